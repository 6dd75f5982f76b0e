#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dger/gradcheck.hpp"
#include "dger/mwer.hpp"
#include "dger/rng.hpp"

using namespace dger;

namespace {

// Three dummy hypotheses framed with BOS/EOS; scores irrelevant here.
NBestList dummy_nbest(int n) {
    NBestList nb;
    for (int i = 0; i < n; ++i)
        nb.hyps.push_back({{Tokenizer::kBos, Tokenizer::kNumSpecials + i, Tokenizer::kEos},
                           -0.1 * static_cast<double>(i)});
    return nb;
}

std::vector<Var> score_vars(Tape& t, const std::vector<double>& scores) {
    std::vector<Var> out;
    for (double s : scores) out.push_back(t.constant(Tensor::scalar(s)));
    return out;
}

Tensor onehot_col(int n, int i) {
    Tensor c({n, 1});
    c.at(i, 0) = 1.0;
    return c;
}

}  // namespace

TEST_CASE("normalize_likelihoods gives a uniform distribution for equal scores") {
    Tape t;
    Var p = normalize_likelihoods(t, score_vars(t, {0.7, 0.7, 0.7, 0.7}));
    REQUIRE(p.val().rows() == 1);
    REQUIRE(p.val().cols() == 4);
    for (int i = 0; i < 4; ++i) REQUIRE(p.val().at(0, i) == Catch::Approx(0.25).margin(1e-15));
}

TEST_CASE("normalize_likelihoods degenerates to one for a single hypothesis") {
    Tape t;
    Var p = normalize_likelihoods(t, score_vars(t, {-3.2}));
    REQUIRE(p.val().numel() == 1);
    REQUIRE(p.val().at(0, 0) == 1.0);
}

TEST_CASE("normalize_likelihoods hand example") {
    Tape t;
    Var p = normalize_likelihoods(t, score_vars(t, {0.0, std::log(3.0)}));
    REQUIRE(p.val().at(0, 0) == Catch::Approx(0.25).margin(1e-12));
    REQUIRE(p.val().at(0, 1) == Catch::Approx(0.75).margin(1e-12));
    double sum = p.val().at(0, 0) + p.val().at(0, 1);
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("normalize_likelihoods input validation") {
    Tape t;
    REQUIRE_THROWS_WITH(normalize_likelihoods(t, {}),
                        Catch::Matchers::ContainsSubstring("empty"));
    std::vector<Var> bad = {t.constant(Tensor({1, 2}, {0.1, 0.2}))};
    REQUIRE_THROWS_WITH(normalize_likelihoods(t, bad),
                        Catch::Matchers::ContainsSubstring("scalar"));
    std::vector<Var> inf = {t.constant(Tensor::scalar(HUGE_VAL))};
    REQUIRE_THROWS_WITH(normalize_likelihoods(t, inf),
                        Catch::Matchers::ContainsSubstring("finite"));
}

TEST_CASE("rl_loss is exactly zero when every hypothesis shares one WER") {
    Tape t;
    auto item = make_mwer_item(dummy_nbest(3), "ka to", score_vars(t, {0.9, -0.4, 0.1}),
                               {0.5, 0.5, 0.5});
    REQUIRE(rl_loss(t, item).item() == 0.0);
}

TEST_CASE("rl_loss vanishes under a uniform distribution") {
    Tape t;
    auto item = make_mwer_item(dummy_nbest(3), "ka to", score_vars(t, {0.3, 0.3, 0.3}),
                               {0.8, 0.1, 0.45});
    REQUIRE(std::abs(rl_loss(t, item).item()) <= 1e-12);
}

TEST_CASE("rl_loss hand example") {
    Tape t;
    auto item = make_mwer_item(dummy_nbest(2), "ka to", score_vars(t, {std::log(4.0), 0.0}),
                               {0.5, 0.25});
    REQUIRE(item.baseline == Catch::Approx(0.375).margin(1e-15));
    REQUIRE(rl_loss(t, item).item() == Catch::Approx(0.0375).margin(1e-12));
}

TEST_CASE("rl_loss sign tracks where the probability mass sits") {
    Tape t;
    auto worse = make_mwer_item(dummy_nbest(2), "ka", score_vars(t, {2.0, -2.0}), {0.9, 0.1});
    REQUIRE(rl_loss(t, worse).item() > 0.0);
    auto better = make_mwer_item(dummy_nbest(2), "ka", score_vars(t, {-2.0, 2.0}), {0.9, 0.1});
    REQUIRE(rl_loss(t, better).item() < 0.0);
}

TEST_CASE("rl_loss is invariant to a constant shift of the scores") {
    std::vector<double> wers = {0.6, 0.2, 0.4, 0.0};
    std::vector<double> base_scores = {0.4, -1.1, 0.9, 0.2};
    Tape t;
    auto item = make_mwer_item(dummy_nbest(4), "ka to mi", score_vars(t, base_scores), wers);
    const double base = rl_loss(t, item).item();

    std::vector<double> shifted = base_scores;
    for (double& s : shifted) s += 3.14;
    Tape t2;
    auto item2 = make_mwer_item(dummy_nbest(4), "ka to mi", score_vars(t2, shifted), wers);
    REQUIRE(rl_loss(t2, item2).item() == Catch::Approx(base).margin(1e-12));
}

TEST_CASE("one gradient step raises the probability of the best hypothesis") {
    Parameter logits("logits", Tensor({1, 3}, {0.2, -0.3, 0.5}));
    const std::vector<double> wers = {0.6, 0.2, 0.4};

    auto evaluate = [&](Tape& t) {
        std::vector<Var> scores;
        Var row = t.param(logits);
        for (int i = 0; i < 3; ++i)
            scores.push_back(t.reshape(t.matmul(row, t.constant(onehot_col(3, i))), {1}));
        return make_mwer_item(dummy_nbest(3), "ka", scores, wers);
    };

    Tape t;
    auto item = evaluate(t);
    Var loss = rl_loss(t, item);
    Var p_before = normalize_likelihoods(t, item.raw_scores);
    logits.zero_grad();
    t.backward(loss);
    REQUIRE(logits.grad.max_abs() > 0.0);

    for (std::size_t i = 0; i < logits.value.numel(); ++i)
        logits.value.values()[i] -= 0.5 * logits.grad.values()[i];

    Tape t2;
    auto item2 = evaluate(t2);
    Var p_after = normalize_likelihoods(t2, item2.raw_scores);
    REQUIRE(p_after.val().at(0, 1) > p_before.val().at(0, 1));
    REQUIRE(rl_loss(t2, item2).item() < loss.item());
}

TEST_CASE("rl_loss passes the finite-difference gradient check") {
    const std::vector<double> wers = {0.7, 0.1, 0.4, 0.3};
    auto f = [&](Tape& t, Var probe) {
        std::vector<Var> scores;
        for (int i = 0; i < 4; ++i)
            scores.push_back(t.reshape(t.matmul(probe, t.constant(onehot_col(4, i))), {1}));
        return rl_loss(t, make_mwer_item(dummy_nbest(4), "ka", scores, wers));
    };
    Rng rng(0xbee);
    REQUIRE(grad_check(f, Tensor::randn({1, 4}, rng, 0.8)) < 1e-4);
}

TEST_CASE("mwer item validation") {
    Tape t;
    MwerBatchItem item;
    item.hypotheses = dummy_nbest(2);
    item.reference = "ka";
    item.raw_scores = score_vars(t, {0.1, 0.2});
    item.wers = {0.5, 0.1};
    item.baseline = 0.2;
    REQUIRE_THROWS_WITH(item.validate(), Catch::Matchers::ContainsSubstring("baseline"));

    item.baseline = 0.3;
    item.wers = {0.5};
    REQUIRE_THROWS_WITH(item.validate(), Catch::Matchers::ContainsSubstring("disagree"));

    REQUIRE_THROWS_WITH(mean_wer({}), Catch::Matchers::ContainsSubstring("empty"));
}
