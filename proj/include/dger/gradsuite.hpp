#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "dger/asr.hpp"
#include "dger/fusion.hpp"
#include "dger/ger.hpp"
#include "dger/gradcheck.hpp"
#include "dger/mwer.hpp"
#include "dger/pipeline.hpp"
#include "dger/trainer.hpp"

namespace dger {

// ===========================================================================
// Named finite-difference checks: one per tape operation, one per model
// seam, and one for the composed training loss on a single utterance.
// A corruption name can be supplied as a negative control: the named case
// gets a value-only term spliced into its loss, so its analytic gradient
// genuinely disagrees with the numeric one and the case must fail.
// ===========================================================================

struct GradCheckCase {
    std::string name;
    double rel_err = 0.0;
    double tol = 0.0;

    bool passed() const { return rel_err < tol; }
};

namespace gradsuite_detail {

constexpr double kOpTol = 1e-4;
constexpr double kComposedTol = 1e-3;

inline Tensor rand_uniform(const std::vector<int>& shape, Rng& rng, double lo, double hi) {
    Tensor t(shape);
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

// Values in +-[lo, hi]: bounded away from zero so kinked ops (relu, l1)
// are probed on smooth ground.
inline Tensor rand_signed(const std::vector<int>& shape, Rng& rng, double lo, double hi) {
    Tensor t(shape);
    for (auto& v : t.values()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
    return t;
}

// Adds a term whose value tracks the input but whose gradient is severed,
// faking a wrong backward rule for the negative control.
inline Var corrupt(Tape& t, Var loss, Var x) {
    return t.add(loss, t.scale(0.5, t.mean_all(t.constant(x.val()))));
}

// Reduces a matrix to a scalar through a fixed random projection so every
// coordinate of the op output influences the loss with a distinct weight.
inline Var project(Tape& t, Var m, const Tensor& proj) {
    return t.mean_all(t.matmul(m, t.constant(proj)));
}

struct CaseBuilder {
    std::vector<GradCheckCase>& out;
    const std::string& corrupt_name;
    Rng& rng;

    void add(const std::string& name, const Tensor& at,
             const std::function<Var(Tape&, Var)>& build, double tol = kOpTol) {
        const bool poison = name == corrupt_name;
        const auto wrapped = [&](Tape& t, Var x) {
            Var y = build(t, x);
            return poison ? corrupt(t, y, x) : y;
        };
        out.push_back({name, grad_check(wrapped, at), tol});
    }
};

}  // namespace gradsuite_detail

// One check per differentiable tape operation. Two-operand ops are checked
// against each operand in turn (suffixes /lhs and /rhs).
inline std::vector<GradCheckCase> gradcheck_ops(std::uint64_t seed,
                                                const std::string& corrupt_name = "") {
    using namespace gradsuite_detail;
    std::vector<GradCheckCase> cases;
    Rng rng(seed, 0x9cull);
    CaseBuilder cb{cases, corrupt_name, rng};

    const Tensor p4 = Tensor::randn({4, 3}, rng);
    const Tensor p2 = Tensor::randn({2, 3}, rng);
    const Tensor p5 = Tensor::randn({5, 3}, rng);
    const Tensor p6 = Tensor::randn({6, 3}, rng);
    const Tensor p7 = Tensor::randn({7, 3}, rng);

    cb.add("reshape", Tensor::randn({2, 6}, rng),
           [&](Tape& t, Var x) { return project(t, t.reshape(x, {3, 4}), p4); });

    const Tensor addend = Tensor::randn({3, 4}, rng);
    cb.add("add/lhs", Tensor::randn({3, 4}, rng),
           [&](Tape& t, Var x) { return project(t, t.add(x, t.constant(addend)), p4); });
    cb.add("add/rhs", Tensor::randn({3, 4}, rng),
           [&](Tape& t, Var x) { return project(t, t.add(t.constant(addend), x), p4); });
    cb.add("sub/lhs", Tensor::randn({3, 4}, rng),
           [&](Tape& t, Var x) { return project(t, t.sub(x, t.constant(addend)), p4); });
    cb.add("sub/rhs", Tensor::randn({3, 4}, rng),
           [&](Tape& t, Var x) { return project(t, t.sub(t.constant(addend), x), p4); });

    cb.add("scale-const", Tensor::randn({3, 4}, rng),
           [&](Tape& t, Var x) { return project(t, t.scale(-1.7, x), p4); });

    const Tensor scaled = Tensor::randn({3, 4}, rng);
    cb.add("scale-var/scalar", Tensor::randn({1, 1}, rng),
           [&](Tape& t, Var s) { return project(t, t.scale(s, t.constant(scaled)), p4); });
    cb.add("scale-var/matrix", Tensor::randn({3, 4}, rng), [&](Tape& t, Var x) {
        return project(t, t.scale(t.constant(Tensor::scalar(0.6)), x), p4);
    });

    const Tensor ma = Tensor::randn({3, 4}, rng);
    const Tensor mb = Tensor::randn({4, 2}, rng);
    cb.add("matmul/lhs", ma,
           [&](Tape& t, Var x) { return project(t, t.matmul(x, t.constant(mb)), p2); });
    cb.add("matmul/rhs", mb,
           [&](Tape& t, Var x) { return project(t, t.matmul(t.constant(ma), x), p2); });

    const Tensor nb = Tensor::randn({2, 4}, rng);
    cb.add("matmul-nt/lhs", ma,
           [&](Tape& t, Var x) { return project(t, t.matmul_nt(x, t.constant(nb)), p2); });
    cb.add("matmul-nt/rhs", nb,
           [&](Tape& t, Var x) { return project(t, t.matmul_nt(t.constant(ma), x), p2); });

    const Tensor wing = Tensor::randn({3, 2}, rng);
    cb.add("concat-cols", Tensor::randn({3, 3}, rng), [&](Tape& t, Var x) {
        return project(t, t.concat_cols({t.constant(wing), x, t.constant(wing)}), p7);
    });
    const Tensor rwing = Tensor::randn({2, 4}, rng);
    cb.add("concat-rows", Tensor::randn({3, 4}, rng), [&](Tape& t, Var x) {
        return project(t, t.concat_rows({t.constant(rwing), x, t.constant(rwing)}), p4);
    });

    cb.add("relu", rand_signed({3, 4}, rng, 0.3, 1.2),
           [&](Tape& t, Var x) { return project(t, t.relu(x), p4); });
    cb.add("tanh", Tensor::randn({3, 4}, rng),
           [&](Tape& t, Var x) { return project(t, t.tanh(x), p4); });

    cb.add("softmax-rows", Tensor::randn({3, 5}, rng),
           [&](Tape& t, Var x) { return project(t, t.softmax_rows(x), p5); });
    cb.add("softmax-causal", Tensor::randn({4, 4}, rng),
           [&](Tape& t, Var x) { return project(t, t.softmax_rows(x, 1), p4); });

    cb.add("layer-norm", Tensor::randn({3, 6}, rng),
           [&](Tape& t, Var x) { return project(t, t.layer_norm(x), p6); });

    cb.add("mean-all", Tensor::randn({3, 4}, rng),
           [&](Tape& t, Var x) { return t.mean_all(x); });

    const Tensor la = Tensor::randn({3, 4}, rng);
    Tensor lb = la;
    for (auto& v : lb.values()) v += (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.3, 1.0);
    cb.add("l1-distance/lhs", la,
           [&](Tape& t, Var x) { return t.l1_distance(x, t.constant(lb)); });
    cb.add("l1-distance/rhs", lb,
           [&](Tape& t, Var x) { return t.l1_distance(t.constant(la), x); });

    cb.add("cross-entropy", Tensor::randn({4, 7}, rng),
           [&](Tape& t, Var x) { return t.cross_entropy(x, {1, 3, 0, 6}); });

    const Tensor ca = Tensor::randn({3, 5}, rng);
    const Tensor cbm = Tensor::randn({3, 5}, rng);
    cb.add("cosine-rows/lhs", ca,
           [&](Tape& t, Var x) { return t.cosine_rows_mean(x, t.constant(cbm)); });
    cb.add("cosine-rows/rhs", cbm,
           [&](Tape& t, Var x) { return t.cosine_rows_mean(t.constant(ca), x); });

    cb.add("embedding-lookup", Tensor::randn({6, 4}, rng), [&](Tape& t, Var x) {
        return project(t, t.embedding_lookup(x, {0, 2, 2, 5, 1}), p4);
    });

    const Tensor cx = Tensor::randn({8, 3}, rng);
    const Tensor cw = Tensor::randn({4, 3, 3}, rng, 0.5);
    const Tensor cbias = Tensor::randn({4}, rng);
    const Tensor pc = Tensor::randn({4, 3}, rng);
    cb.add("conv1d/input", cx, [&](Tape& t, Var x) {
        return project(t, t.conv1d(x, t.constant(cw), t.constant(cbias), 2, 1), pc);
    });
    cb.add("conv1d/kernel", cw, [&](Tape& t, Var w) {
        return project(t, t.conv1d(t.constant(cx), w, t.constant(cbias), 2, 1), pc);
    });
    cb.add("conv1d/bias", cbias, [&](Tape& t, Var b) {
        return project(t, t.conv1d(t.constant(cx), t.constant(cw), b, 2, 1), pc);
    });

    const Tensor tx = Tensor::randn({4, 3}, rng);
    const Tensor tw = Tensor::randn({3, 2, 3}, rng, 0.5);
    const Tensor tbias = Tensor::randn({2}, rng);
    const Tensor pt = Tensor::randn({2, 3}, rng);
    cb.add("tconv1d/input", tx, [&](Tape& t, Var x) {
        return project(t, t.tconv1d(x, t.constant(tw), t.constant(tbias), 2, 1), pt);
    });
    cb.add("tconv1d/kernel", tw, [&](Tape& t, Var w) {
        return project(t, t.tconv1d(t.constant(tx), w, t.constant(tbias), 2, 1), pt);
    });
    cb.add("tconv1d/bias", tbias, [&](Tape& t, Var b) {
        return project(t, t.tconv1d(t.constant(tx), t.constant(tw), b, 2, 1), pt);
    });

    cb.add("mean-pool-segments", Tensor::randn({6, 4}, rng), [&](Tape& t, Var x) {
        return project(t, t.mean_pool_segments(x, {{0, 2}, {1, 4}, {4, 6}}), p4);
    });

    return cases;
}

// Seam checks: each model stage differentiated end to end through its public
// loss or forward, against the inputs feeding it.
inline std::vector<GradCheckCase> gradcheck_modules(std::uint64_t seed,
                                                    const std::string& corrupt_name = "") {
    using namespace gradsuite_detail;
    std::vector<GradCheckCase> cases;
    Rng rng(seed, 0x5eau);
    CaseBuilder cb{cases, corrupt_name, rng};

    {
        NaaeConfig nc;
        nc.n_features = 4;
        nc.d_enc = 8;
        nc.unet_channels = 4;
        nc.d_dec = 8;
        nc.frames_per_char = 2;
        NaaeModel asr(nc, mix_seed(seed, 0xa5));
        asr.set_mode(FinetuneMode::adapter_only);
        // Kick the adapter off its zero-residual initialization so the
        // reconstruction term is differentiable at the probe point.
        Rng kick(seed, 0xad);
        for (auto* p : asr.params())
            if (p->trainable)
                for (auto& v : p->value.values()) v += kick.normal(0.0, 0.05);
        const std::vector<int> y = {Tokenizer::kBos, 5, 9, 6, Tokenizer::kEos};
        cb.add("asr-loss", Tensor::randn({8, 4}, rng),
               [&](Tape& t, Var x) {
                   return asr.asr_loss(t, x, asr.adapt(t, x), y, 0.5);
               },
               kComposedTol);
    }

    {
        FusionConfig fc = FusionConfig::variant();
        const Tensor fy = Tensor::randn({4, 6}, rng);
        const Tensor ftarget = Tensor::randn({4, 6}, rng);
        const Tensor fctx = Tensor::randn({5, 6}, rng);
        const Tensor fproj = Tensor::randn({12, 3}, rng);
        const auto fused_loss = [&](Tape& t, Var x, Var y) {
            const Compensated comp = compensate(t, x, y, fc);
            Var mu = dynamic_weight(t, comp.x, comp.y, t.constant(ftarget));
            const FusedMultimodal fm = fuse(t, comp.x, comp.y, mu, t.constant(fctx));
            return project(t, fm.x_mmc, fproj);
        };
        cb.add("fusion/acoustic", Tensor::randn({4, 6}, rng),
               [&](Tape& t, Var x) { return fused_loss(t, x, t.constant(fy)); }, kComposedTol);
        const Tensor fx = Tensor::randn({4, 6}, rng);
        cb.add("fusion/linguistic", Tensor::randn({4, 6}, rng),
               [&](Tape& t, Var y) { return fused_loss(t, t.constant(fx), y); }, kComposedTol);
    }

    {
        GerConfig gc;
        gc.d_model = 12;
        gc.n_layers = 1;
        gc.n_heads = 2;
        gc.d_ff = 16;
        gc.d_fused = 12;
        gc.d_context = 6;
        gc.max_len = 16;
        gc.max_mem = 64;
        GerModel ger(gc, mix_seed(seed, 0x6e));
        ger.set_mask(GerMask::prefix_and_head);
        const Tensor gctx = Tensor::randn({5, 6}, rng);
        const std::vector<int> gy = {Tokenizer::kBos, 7, 4, 11, Tokenizer::kEos};
        cb.add("ger-loss", Tensor::randn({4, 12}, rng),
               [&](Tape& t, Var x) {
                   const FusedMultimodal fm{x, t.constant(gctx), t.constant(Tensor::scalar(0.5))};
                   return ger.llm_loss(t, fm, gy);
               },
               kComposedTol);
    }

    {
        NBestList nbl;
        const std::vector<std::vector<int>> toks = {
            {Tokenizer::kBos, 5, 6, Tokenizer::kEos},
            {Tokenizer::kBos, 5, 7, Tokenizer::kEos},
            {Tokenizer::kBos, 8, Tokenizer::kEos},
            {Tokenizer::kBos, 9, 6, 4, Tokenizer::kEos}};
        for (std::size_t i = 0; i < toks.size(); ++i)
            nbl.hyps.push_back({toks[i], -0.5 * static_cast<double>(i)});
        const std::vector<double> wers = {0.5, 0.0, 0.25, 0.75};
        cb.add("mwer-loss", Tensor::randn({4, 1}, rng),
               [&](Tape& t, Var x) {
                   std::vector<Var> scores;
                   for (int i = 0; i < 4; ++i)
                       scores.push_back(t.mean_all(t.mean_pool_segments(x, {{i, i + 1}})));
                   return rl_loss(t, make_mwer_item(nbl, "ab", scores, wers));
               },
               kComposedTol);
    }

    return cases;
}

// The composed training objective on one utterance, differentiated against
// every trainable parameter of the whole pipeline.
inline GradCheckCase gradcheck_full(std::uint64_t seed, const std::string& corrupt_name = "") {
    using namespace gradsuite_detail;

    CorpusConfig cc;
    cc.vocab_words = 6;
    cc.word_len_min = 2;
    cc.word_len_max = 2;
    cc.train_utterances = 1;
    cc.test_utterances = 1;
    cc.utt_words_min = 2;
    cc.utt_words_max = 2;
    cc.frames_per_char = 2;
    cc.n_features = 4;
    cc.jitter = 0.03;
    const Corpus corpus = generate_corpus(cc, mix_seed(seed, 0xc0));
    const Utterance& utt = corpus.train.utts.front();

    PipelineConfig pc;
    pc.asr.n_features = 4;
    pc.asr.d_enc = 8;
    pc.asr.unet_channels = 4;
    pc.asr.d_dec = 8;
    pc.asr.frames_per_char = 2;
    pc.ger.d_model = 12;
    pc.ger.n_layers = 1;
    pc.ger.n_heads = 2;
    pc.ger.d_ff = 16;
    pc.ger.d_fused = 12;
    pc.ger.d_context = 6;
    pc.ger.max_len = 16;
    pc.ger.max_mem = 64;
    pc.d_embed = 6;
    pc.beam = 3;
    DenoisingGerModel model(pc, mix_seed(seed, 0xde));

    // Off the adapter's zero-residual initialization (reconstruction kink).
    Rng kick(seed, 0xad);
    for (auto* p : model.params())
        if (p->name.rfind("adapter.", 0) == 0)
            for (auto& v : p->value.values()) v += kick.normal(0.0, 0.05);

    TrainConfig tc;
    tc.alpha = 0.2;
    tc.beta = 0.2;

    const NBestList nbl = model.nbest(utt);
    const bool poison = corrupt_name == "composed-loss";
    Parameter* head_b = nullptr;
    for (auto* p : model.params())
        if (p->name == "head.b") head_b = p;
    const auto build = [&](Tape& t) {
        const UttForward f = model.forward(t, utt, nbl);
        Var total = total_loss_var(t, f, tc);
        // The negative control severs one parameter's gradient by routing
        // its value through a constant.
        if (poison) total = t.add(total, t.scale(0.5, t.mean_all(t.constant(head_b->value))));
        return total;
    };

    const double rel = grad_check_params(build, model.trainable_params());
    return {"composed-loss", rel, kComposedTol};
}

inline std::vector<GradCheckCase> gradcheck_all(std::uint64_t seed,
                                                const std::string& corrupt_name = "") {
    std::vector<GradCheckCase> cases = gradcheck_ops(seed, corrupt_name);
    std::vector<GradCheckCase> seams = gradcheck_modules(seed, corrupt_name);
    cases.insert(cases.end(), seams.begin(), seams.end());
    cases.push_back(gradcheck_full(seed, corrupt_name));
    return cases;
}

}  // namespace dger
