#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dger/fusion.hpp"
#include "dger/gradcheck.hpp"
#include "dger/rng.hpp"

using namespace dger;

namespace {

Tensor randn(std::vector<int> shape, std::uint64_t seed, double stddev = 1.0) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng, stddev);
}

FusionConfig shared_cfg(double k) {
    FusionConfig cfg;
    cfg.k_a = k;
    cfg.k_t = k;
    cfg.shared_gain = true;
    return cfg;
}

double max_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

}  // namespace

TEST_CASE("compensate with k=0 returns the acoustic sequence twice") {
    Tape t;
    Var x = t.constant(randn({3, 4}, 11));
    Var y = t.constant(randn({3, 4}, 12));
    auto c = compensate(t, x, y, shared_cfg(0.0));
    REQUIRE(max_diff(c.x.val(), x.val()) == 0.0);
    REQUIRE(max_diff(c.y.val(), x.val()) < 1e-12);
}

TEST_CASE("compensate with k=1 returns the linguistic sequence twice") {
    Tape t;
    Var x = t.constant(randn({3, 4}, 13));
    Var y = t.constant(randn({3, 4}, 14));
    auto c = compensate(t, x, y, shared_cfg(1.0));
    REQUIRE(max_diff(c.x.val(), y.val()) < 1e-12);
    REQUIRE(max_diff(c.y.val(), y.val()) == 0.0);
}

TEST_CASE("compensate hand example at k=0.7") {
    Tape t;
    Var x = t.constant(Tensor({1, 2}, {1.0, 0.0}));
    Var y = t.constant(Tensor({1, 2}, {0.0, 1.0}));
    auto c = compensate(t, x, y, shared_cfg(0.7));
    REQUIRE(c.x.val().at(0, 0) == Catch::Approx(0.3).margin(1e-12));
    REQUIRE(c.x.val().at(0, 1) == Catch::Approx(0.7).margin(1e-12));
    REQUIRE(c.y.val().at(0, 0) == Catch::Approx(0.3).margin(1e-12));
    REQUIRE(c.y.val().at(0, 1) == Catch::Approx(0.7).margin(1e-12));
}

TEST_CASE("single-gain compensation collapses both outputs onto (1-k)x + ky") {
    Rng rng(0xdead);
    for (int trial = 0; trial < 100; ++trial) {
        const double k = rng.uniform();
        const int rows = rng.uniform_int(1, 6);
        const int cols = rng.uniform_int(1, 8);
        Tape t;
        Var x = t.constant(randn({rows, cols}, 1000 + static_cast<std::uint64_t>(trial)));
        Var y = t.constant(randn({rows, cols}, 2000 + static_cast<std::uint64_t>(trial)));
        auto c = compensate(t, x, y, shared_cfg(k));
        REQUIRE(max_diff(c.x.val(), c.y.val()) <= 1e-12);
        Tensor expect = x.val();
        for (std::size_t i = 0; i < expect.numel(); ++i)
            expect.values()[i] = (1.0 - k) * x.val().values()[i] + k * y.val().values()[i];
        REQUIRE(max_diff(c.x.val(), expect) <= 1e-12);
    }
}

TEST_CASE("independent gains keep the compensated sequences distinct") {
    Tape t;
    Var x = t.constant(randn({4, 5}, 21));
    Var y = t.constant(randn({4, 5}, 22));
    auto c = compensate(t, x, y, FusionConfig::variant());
    REQUIRE(max_diff(c.x.val(), c.y.val()) > 1e-6);
}

TEST_CASE("compensate truncates unequal lengths with a warning") {
    Tensor xa = randn({5, 3}, 31);
    Tensor ya = randn({3, 3}, 32);
    Tape t;
    Var x = t.constant(xa);
    Var y = t.constant(ya);
    LogSilencer quiet;
    auto c = compensate(t, x, y, shared_cfg(0.7));
    REQUIRE(c.x.val().rows() == 3);
    REQUIRE(c.y.val().rows() == 3);

    Tensor xa3({3, 3});
    for (int r = 0; r < 3; ++r)
        for (int col = 0; col < 3; ++col) xa3.at(r, col) = xa.at(r, col);
    Tape t2;
    auto c2 = compensate(t2, t2.constant(xa3), t2.constant(ya), shared_cfg(0.7));
    REQUIRE(max_diff(c.x.val(), c2.x.val()) == 0.0);
    REQUIRE(max_diff(c.y.val(), c2.y.val()) == 0.0);
}

TEST_CASE("fusion config and shape validation") {
    Tape t;
    Var x = t.constant(randn({4, 3}, 41));
    Var y2 = t.constant(randn({4, 2}, 42));
    REQUIRE_THROWS_WITH(compensate(t, x, y2, shared_cfg(0.5)),
                        Catch::Matchers::ContainsSubstring("feature dims"));

    FusionConfig bad = FusionConfig::variant();
    bad.shared_gain = true;
    REQUIRE_THROWS_WITH(bad.validate(), Catch::Matchers::ContainsSubstring("shared_gain"));

    FusionConfig range;
    range.k_a = 1.5;
    range.k_t = 1.5;
    REQUIRE_THROWS_WITH(range.validate(), Catch::Matchers::ContainsSubstring("[0, 1]"));

    Var empty = t.constant(Tensor({0, 3}));
    REQUIRE_THROWS_WITH(compensate(t, empty, empty, shared_cfg(0.5)),
                        Catch::Matchers::ContainsSubstring("empty"));
}

TEST_CASE("dynamic weight is exactly one half when the inputs coincide") {
    Tape t;
    Var x = t.constant(randn({3, 4}, 51));
    Var target = t.constant(randn({3, 4}, 52));
    Var mu = dynamic_weight(t, x, x, target);
    REQUIRE(mu.item() == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("dynamic weight matches the softmax of the mean cosines") {
    // Rows of x are parallel to the target (cosine 1), rows of y orthogonal
    // (cosine 0), so mu = e / (e + 1).
    Tape t;
    Var target = t.constant(Tensor({2, 2}, {1.0, 0.0, 1.0, 0.0}));
    Var x = t.constant(Tensor({2, 2}, {2.0, 0.0, 0.5, 0.0}));
    Var y = t.constant(Tensor({2, 2}, {0.0, 3.0, 0.0, -2.0}));
    Var mu = dynamic_weight(t, x, y, target);
    const double e = std::exp(1.0);
    REQUIRE(mu.item() == Catch::Approx(e / (e + 1.0)).margin(1e-9));
    REQUIRE(mu.item() == Catch::Approx(0.7311).margin(5e-5));

    Var mu_swapped = dynamic_weight(t, y, x, target);
    REQUIRE(mu_swapped.item() == Catch::Approx(1.0 / (e + 1.0)).margin(1e-9));
    REQUIRE(mu.item() + mu_swapped.item() == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("dynamic weight increases strictly with acoustic alignment") {
    Tensor target({1, 2}, {1.0, 0.0});
    Tensor y({1, 2}, {0.6, 0.8});
    double prev = -1.0;
    for (double angle : {1.2, 0.9, 0.6, 0.3, 0.0}) {
        Tape t;
        Tensor x({1, 2}, {std::cos(angle), std::sin(angle)});
        Var mu = dynamic_weight(t, t.constant(x), t.constant(y), t.constant(target));
        REQUIRE(mu.item() > prev);
        prev = mu.item();
    }
}

TEST_CASE("dynamic weight ignores positive rescaling of a row") {
    Tensor xa = randn({3, 4}, 61);
    Tensor ya = randn({3, 4}, 62);
    Tensor ga = randn({3, 4}, 63);
    Tape t;
    Var mu = dynamic_weight(t, t.constant(xa), t.constant(ya), t.constant(ga));

    Tensor xs = xa;
    for (int c = 0; c < 4; ++c) xs.at(1, c) *= 3.7;
    Tensor gs = ga;
    for (int c = 0; c < 4; ++c) gs.at(2, c) *= 0.25;
    Tape t2;
    Var mu2 = dynamic_weight(t2, t2.constant(xs), t2.constant(ya), t2.constant(gs));
    REQUIRE(mu2.item() == Catch::Approx(mu.item()).margin(1e-12));
}

TEST_CASE("dynamic weight treats a zero-norm row as cosine zero") {
    Tape t;
    Tensor x({2, 2}, {0.0, 0.0, 1.0, 0.0});
    Var y = t.constant(randn({2, 2}, 71));
    Var target = t.constant(Tensor({2, 2}, {1.0, 0.0, 1.0, 0.0}));
    LogSilencer quiet;
    Var mu = dynamic_weight(t, t.constant(x), y, target);
    REQUIRE(std::isfinite(mu.item()));
    REQUIRE(mu.item() > 0.0);
    REQUIRE(mu.item() < 1.0);
}

TEST_CASE("dynamic weight truncates all inputs to the shortest sequence") {
    Tensor xa = randn({5, 3}, 81);
    Tensor ya = randn({4, 3}, 82);
    Tensor ga = randn({6, 3}, 83);
    Tape t;
    Var mu = dynamic_weight(t, t.constant(xa), t.constant(ya), t.constant(ga));

    Tensor xa4({4, 3});
    Tensor ga4({4, 3});
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 3; ++c) {
            xa4.at(r, c) = xa.at(r, c);
            ga4.at(r, c) = ga.at(r, c);
        }
    Tape t2;
    Var mu2 = dynamic_weight(t2, t2.constant(xa4), t2.constant(ya), t2.constant(ga4));
    REQUIRE(mu.item() == mu2.item());
}

TEST_CASE("fuse concatenates the gated halves per row") {
    Tape t;
    Tensor xa = randn({3, 4}, 91);
    Tensor ya = randn({3, 4}, 92);
    Var x = t.constant(xa);
    Var y = t.constant(ya);
    Var mu = t.constant(Tensor::scalar(0.65));
    auto fused = fuse(t, x, y, mu, y);
    REQUIRE(fused.x_mmc.val().rows() == 3);
    REQUIRE(fused.x_mmc.val().cols() == 8);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) {
            REQUIRE(fused.x_mmc.val().at(r, c) == 0.65 * xa.at(r, c));
            REQUIRE(fused.x_mmc.val().at(r, c + 4) ==
                    Catch::Approx((1.0 - 0.65) * ya.at(r, c)).margin(1e-15));
        }
    REQUIRE(fused.mu.item() == 0.65);
}

TEST_CASE("fuse at mu one half with identical inputs duplicates half the vector") {
    Tape t;
    Tensor v = randn({2, 3}, 101);
    Var x = t.constant(v);
    Var mu = t.constant(Tensor::scalar(0.5));
    auto fused = fuse(t, x, x, mu, x);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) {
            REQUIRE(fused.x_mmc.val().at(r, c) == 0.5 * v.at(r, c));
            REQUIRE(fused.x_mmc.val().at(r, c + 3) == 0.5 * v.at(r, c));
        }
}

TEST_CASE("fuse is homogeneous in its inputs at fixed mu") {
    Tensor xa = randn({3, 4}, 111);
    Tensor ya = randn({3, 4}, 112);
    Tape t;
    Var mu = t.constant(Tensor::scalar(0.37));
    auto base = fuse(t, t.constant(xa), t.constant(ya), mu, t.constant(ya));

    Tensor x2 = xa;
    Tensor y2 = ya;
    for (auto& v : x2.values()) v *= 2.0;
    for (auto& v : y2.values()) v *= 2.0;
    auto doubled = fuse(t, t.constant(x2), t.constant(y2), mu, t.constant(y2));
    Tensor expect = base.x_mmc.val();
    for (auto& v : expect.values()) v *= 2.0;
    REQUIRE(max_diff(doubled.x_mmc.val(), expect) <= 1e-12);
}

TEST_CASE("fuse validates mu and shapes") {
    Tape t;
    Var x = t.constant(randn({2, 3}, 121));
    Var y = t.constant(randn({2, 3}, 122));
    Var y_bad = t.constant(randn({2, 4}, 123));
    REQUIRE_THROWS_WITH(fuse(t, x, y_bad, t.constant(Tensor::scalar(0.5)), y),
                        Catch::Matchers::ContainsSubstring("shape mismatch"));
    REQUIRE_THROWS_WITH(fuse(t, x, y, t.constant(Tensor::scalar(0.0)), y),
                        Catch::Matchers::ContainsSubstring("(0, 1)"));
    REQUIRE_THROWS_WITH(fuse(t, x, y, t.constant(Tensor::scalar(1.2)), y),
                        Catch::Matchers::ContainsSubstring("(0, 1)"));
    REQUIRE_THROWS_WITH(fuse(t, x, y, t.constant(randn({2, 2}, 124)), y),
                        Catch::Matchers::ContainsSubstring("scalar"));
}

TEST_CASE("fused weight from the dynamic gate stays in the open unit interval") {
    Tape t;
    Var x = t.constant(randn({3, 4}, 131));
    Var y = t.constant(randn({3, 4}, 132));
    Var target = t.constant(randn({3, 4}, 133));
    auto c = compensate(t, x, y, FusionConfig::variant());
    Var mu = dynamic_weight(t, c.x, c.y, target);
    auto fused = fuse(t, c.x, c.y, mu, y);
    REQUIRE(fused.mu.item() > 0.0);
    REQUIRE(fused.mu.item() < 1.0);
    REQUIRE(fused.x_mmc.val().all_finite());
}

TEST_CASE("baseline fusion modes") {
    Tape t;
    Tensor xa = randn({3, 4}, 141);
    Tensor ya = randn({3, 4}, 142);
    Var x = t.constant(xa);
    Var y = t.constant(ya);
    Var zero = t.constant(Tensor::zeros({3, 4}));

    SECTION("add with a zero linguistic side returns the acoustic side") {
        Var out = baseline_fusions(t, x, zero, FusionMode::add);
        REQUIRE(max_diff(out.val(), xa) == 0.0);
    }
    SECTION("concat output width is the sum of input widths") {
        Var out = baseline_fusions(t, x, y, FusionMode::concat);
        REQUIRE(out.val().rows() == 3);
        REQUIRE(out.val().cols() == 8);
    }
    SECTION("linguistic_only ignores the acoustic side bitwise") {
        Var other = t.constant(randn({5, 4}, 143));
        Var a = baseline_fusions(t, x, y, FusionMode::linguistic_only);
        Var b = baseline_fusions(t, other, y, FusionMode::linguistic_only);
        REQUIRE(max_diff(a.val(), ya) == 0.0);
        REQUIRE(max_diff(a.val(), b.val()) == 0.0);
    }
    SECTION("acoustic_only ignores the linguistic side bitwise") {
        Var out = baseline_fusions(t, x, y, FusionMode::acoustic_only);
        REQUIRE(max_diff(out.val(), xa) == 0.0);
    }
    SECTION("transformer mixer keeps the acoustic shape and needs its params") {
        TransformerMixer mixer(4, 7);
        Var out = baseline_fusions(t, x, y, FusionMode::transformer, &mixer);
        REQUIRE(out.val().rows() == 3);
        REQUIRE(out.val().cols() == 4);
        REQUIRE(out.val().all_finite());
        REQUIRE_THROWS_WITH(baseline_fusions(t, x, y, FusionMode::transformer),
                            Catch::Matchers::ContainsSubstring("mixer"));
    }
    SECTION("transformer mixer attends across unequal lengths") {
        TransformerMixer mixer(4, 7);
        Var y_long = t.constant(randn({6, 4}, 144));
        Var out = baseline_fusions(t, x, y_long, FusionMode::transformer, &mixer);
        REQUIRE(out.val().rows() == 3);
        REQUIRE(out.val().cols() == 4);
    }
    SECTION("mode parsing and rejection") {
        REQUIRE(fusion_mode_from("concat") == FusionMode::concat);
        REQUIRE(fusion_mode_from(fusion_mode_name(FusionMode::transformer)) ==
                FusionMode::transformer);
        REQUIRE_THROWS_WITH(fusion_mode_from("quux"),
                            Catch::Matchers::ContainsSubstring("unknown"));
        REQUIRE_THROWS_WITH(baseline_fusions(t, x, y, FusionMode::hfcdf),
                            Catch::Matchers::ContainsSubstring("not a baseline"));
    }
}

TEST_CASE("fusion chain passes the finite-difference gradient check") {
    const Tensor x0 = randn({4, 3}, 151, 0.8);
    const Tensor y0 = randn({4, 3}, 152, 0.8);
    const Tensor g0 = randn({4, 3}, 153, 0.8);
    const FusionConfig cfg = FusionConfig::variant();

    auto chain = [&](Tape& t, Var probe, int role) {
        Var x = role == 0 ? probe : t.constant(x0);
        Var y = role == 1 ? probe : t.constant(y0);
        Var target = role == 2 ? probe : t.constant(g0);
        auto c = compensate(t, x, y, cfg);
        Var mu = dynamic_weight(t, c.x, c.y, target);
        auto fused = fuse(t, c.x, c.y, mu, y);
        return t.mean_all(fused.x_mmc);
    };
    auto through_x = [&](Tape& t, Var v) { return chain(t, v, 0); };
    auto through_y = [&](Tape& t, Var v) { return chain(t, v, 1); };
    auto through_target = [&](Tape& t, Var v) { return chain(t, v, 2); };

    REQUIRE(grad_check(through_x, x0) < 1e-3);
    REQUIRE(grad_check(through_y, y0) < 1e-3);
    REQUIRE(grad_check(through_target, g0) < 1e-3);
}

TEST_CASE("transformer mixer passes the finite-difference gradient check") {
    TransformerMixer mixer(3, 9);
    const Tensor x0 = randn({2, 3}, 161, 0.7);
    const Tensor y0 = randn({3, 3}, 162, 0.7);
    auto f = [&](Tape& t) {
        Var out = baseline_fusions(t, t.constant(x0), t.constant(y0), FusionMode::transformer,
                                   &mixer);
        return t.mean_all(out);
    };
    REQUIRE(grad_check_params(f, mixer.param_ptrs()) < 1e-3);
}
