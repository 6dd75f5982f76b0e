#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dger/autodiff.hpp"
#include "dger/common.hpp"
#include "dger/fusion.hpp"
#include "dger/nn.hpp"
#include "dger/rng.hpp"
#include "dger/text.hpp"

namespace dger {

// ===========================================================================
// The corrector: a small autoregressive character decoder with causal
// self-attention and cross-attention over the fused multimodal prefix.  The
// prefix projector, a learned separator row between context hypotheses, and
// the output head are the default trainable surface; the decoder body can be
// frozen after pretraining or trained in full for ablations.
// ===========================================================================

enum class GerMask { prefix_and_head, full };

inline const char* ger_mask_name(GerMask m) {
    switch (m) {
        case GerMask::prefix_and_head: return "prefix_and_head";
        case GerMask::full: return "full";
    }
    return "?";
}

inline GerMask ger_mask_from(const std::string& s) {
    for (GerMask m : {GerMask::prefix_and_head, GerMask::full})
        if (s == ger_mask_name(m)) return m;
    fail(strfmt("ger mask '%s' unknown; expected prefix_and_head or full", s.c_str()));
}

struct GerConfig {
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 2;
    int d_ff = 128;
    int vocab_size = 31;
    int d_fused = 48;    // width of the fused prefix rows (x_mmc)
    int d_context = 24;  // width of the n-best context rows (y_context)
    int max_len = 64;    // generated tokens after BOS, including EOS
    int max_mem = 192;   // maximum cross-attention memory rows

    void validate() const {
        if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0)
            fail("ger config: dimensions must be positive");
        if (d_model % n_heads != 0)
            fail(strfmt("ger config: d_model %d not divisible by n_heads %d", d_model, n_heads));
        if (vocab_size <= Tokenizer::kNumSpecials)
            fail(strfmt("ger config: vocab size %d leaves no characters", vocab_size));
        if (d_fused <= 0 || d_context <= 0 || max_len <= 0 || max_mem <= 0)
            fail("ger config: widths and limits must be positive");
    }
};

struct GerOutput {
    std::vector<int> tokens;  // BOS ... EOS, always EOS-terminated
    std::vector<double> stepwise_log_probs;
    double total_log_prob = 0.0;
    bool truncated = false;
};

struct GerForward {
    GerOutput output;
    Var logits;  // one row per predicted position
};

class GerModel {
public:
    GerModel(GerConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(mix_seed(seed, 0x6e5));
        const int d = cfg_.d_model;
        const int dh = d / cfg_.n_heads;

        prefix_wx_ = add(prefix_, "prefix.wx", {cfg_.d_fused, d}, cfg_.d_fused, rng);
        prefix_bx_ = add_zero(prefix_, "prefix.bx", {1, d});
        prefix_wc_ = add(prefix_, "prefix.wc", {cfg_.d_context, d}, cfg_.d_context, rng);
        prefix_bc_ = add_zero(prefix_, "prefix.bc", {1, d});
        prefix_sep_ = add(prefix_, "prefix.sep", {1, cfg_.d_context}, cfg_.d_context, rng);

        embed_ = add(body_, "body.embed", {cfg_.vocab_size, d}, 4, rng);
        pos_dec_ = add(body_, "body.pos_dec", {cfg_.max_len + 2, d}, d, rng);
        pos_mem_ = add(body_, "body.pos_mem", {cfg_.max_mem, d}, d, rng);
        layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
        for (int l = 0; l < cfg_.n_layers; ++l) {
            auto& L = layers_[static_cast<std::size_t>(l)];
            const std::string p = strfmt("body.l%d.", l);
            for (int h = 0; h < cfg_.n_heads; ++h) {
                const std::string hp = strfmt("%sself.h%d.", p.c_str(), h);
                L.self.wq.push_back(add(body_, hp + "wq", {d, dh}, d, rng));
                L.self.wk.push_back(add(body_, hp + "wk", {d, dh}, d, rng));
                L.self.wv.push_back(add(body_, hp + "wv", {d, dh}, d, rng));
            }
            L.self.wo = add(body_, p + "self.wo", {d, d}, d, rng);
            for (int h = 0; h < cfg_.n_heads; ++h) {
                const std::string hp = strfmt("%scross.h%d.", p.c_str(), h);
                L.cross.wq.push_back(add(body_, hp + "wq", {d, dh}, d, rng));
                L.cross.wk.push_back(add(body_, hp + "wk", {d, dh}, d, rng));
                L.cross.wv.push_back(add(body_, hp + "wv", {d, dh}, d, rng));
            }
            L.cross.wo = add(body_, p + "cross.wo", {d, d}, d, rng);
            L.mlp_w1 = add(body_, p + "mlp.w1", {d, cfg_.d_ff}, d, rng);
            L.mlp_b1 = add_zero(body_, p + "mlp.b1", {1, cfg_.d_ff});
            L.mlp_w2 = add(body_, p + "mlp.w2", {cfg_.d_ff, d}, cfg_.d_ff, rng);
            L.mlp_b2 = add_zero(body_, p + "mlp.b2", {1, d});
        }

        // Small head init keeps the untrained output near-uniform.
        {
            Tensor w = Tensor::randn({d, cfg_.vocab_size}, rng, 1.0 / static_cast<double>(d));
            head_w_ = push(head_, Parameter("head.w", std::move(w)));
            head_b_ = add_zero(head_, "head.b", {1, cfg_.vocab_size});
        }
        set_mask(GerMask::prefix_and_head);
    }

    GerModel(const GerModel&) = delete;
    GerModel& operator=(const GerModel&) = delete;

    const GerConfig& config() const { return cfg_; }
    GerMask mask() const { return mask_; }

    void set_mask(GerMask m) {
        mask_ = m;
        for (auto& p : prefix_) p.trainable = true;
        for (auto& p : head_) p.trainable = true;
        for (auto& p : body_) p.trainable = (m == GerMask::full);
    }

    std::vector<Parameter*> params() {
        std::vector<Parameter*> out;
        for (auto* g : {&prefix_, &body_, &head_})
            for (auto& p : *g) out.push_back(&p);
        return out;
    }

    std::vector<Parameter*> body_params() {
        std::vector<Parameter*> out;
        for (auto& p : body_) out.push_back(&p);
        return out;
    }

    std::vector<Parameter*> trainable_params() {
        std::vector<Parameter*> out;
        for (auto* p : params())
            if (p->trainable) out.push_back(p);
        return out;
    }

    std::size_t trainable_count() {
        std::size_t n = 0;
        for (auto* p : trainable_params()) n += p->numel();
        return n;
    }

    // Concatenate per-hypothesis context embeddings, inserting the learned
    // separator row between consecutive hypotheses.
    Var build_context(Tape& t, const std::vector<Var>& hyp_embeddings) {
        if (hyp_embeddings.empty()) fail("ger context: no hypotheses");
        std::vector<Var> parts;
        for (std::size_t i = 0; i < hyp_embeddings.size(); ++i) {
            const Tensor& hv = hyp_embeddings[i].val();
            if (hv.rank() != 2 || hv.cols() != cfg_.d_context)
                fail(strfmt("ger context: hypothesis embedding must be Tx%d, got %s",
                            cfg_.d_context, hv.shape_str().c_str()));
            if (i > 0) parts.push_back(t.param(*prefix_sep_));
            if (hv.rows() > 0) parts.push_back(hyp_embeddings[i]);
        }
        return t.concat_rows(parts);
    }

    // Project the fused prefix and the n-best context into decoder width and
    // stack them as cross-attention memory rows.
    Var memory(Tape& t, Var x_mmc, Var y_context) {
        const Tensor& xv = x_mmc.val();
        const Tensor& cv = y_context.val();
        if (xv.rank() != 2 || xv.rows() == 0)
            fail("ger memory: fused prefix must be a nonempty rank-2 sequence");
        if (xv.cols() != cfg_.d_fused)
            fail(strfmt("ger memory: fused rows must be %d wide, got %s", cfg_.d_fused,
                        xv.shape_str().c_str()));
        if (cv.rank() != 2 || cv.cols() != cfg_.d_context)
            fail(strfmt("ger memory: context rows must be %d wide, got %s", cfg_.d_context,
                        cv.shape_str().c_str()));
        Var mx = linear(t, x_mmc, t.param(*prefix_wx_), t.param(*prefix_bx_));
        Var rows = mx;
        if (cv.rows() > 0) {
            Var mc = linear(t, y_context, t.param(*prefix_wc_), t.param(*prefix_bc_));
            rows = t.concat_rows({mx, mc});
        }
        const int m = rows.val().rows();
        if (m > cfg_.max_mem)
            fail(strfmt("ger memory: %d rows exceed max_mem %d", m, cfg_.max_mem));
        return t.add(rows, t.embedding_lookup(t.param(*pos_mem_), iota(m)));
    }

    Var memory(Tape& t, const FusedMultimodal& fused) {
        return memory(t, fused.x_mmc, fused.y_context);
    }

    // Teacher-forced logits: row i predicts tokens[i + 1] from tokens[0..i].
    Var teacher_logits(Tape& t, Var mem, const std::vector<int>& tokens) {
        validate_framing(tokens);
        const std::vector<int> inputs(tokens.begin(), tokens.end() - 1);
        if (static_cast<int>(inputs.size()) > cfg_.max_len + 1)
            fail(strfmt("ger: sequence length %zu exceeds max_len %d", tokens.size(), cfg_.max_len));
        Var x = t.add(t.embedding_lookup(t.param(*embed_), inputs),
                      t.embedding_lookup(t.param(*pos_dec_), iota(static_cast<int>(inputs.size()))));
        for (auto& L : layers_) {
            x = t.add(x, attention(t, L.self, t.layer_norm(x), x, /*causal=*/true));
            x = t.add(x, attention(t, L.cross, t.layer_norm(x), mem, /*causal=*/false));
            x = t.add(x, mlp(t, L, t.layer_norm(x)));
        }
        return linear(t, t.layer_norm(x), t.param(*head_w_), t.param(*head_b_));
    }

    GerForward ger_forward(Tape& t, const FusedMultimodal& fused, const std::vector<int>& teacher) {
        Var mem = memory(t, fused);
        Var logits = teacher_logits(t, mem, teacher);
        GerForward fwd{GerOutput{}, logits};
        fwd.output.tokens = teacher;
        const std::vector<int> targets(teacher.begin() + 1, teacher.end());
        const Tensor lp = log_prob_rows(logits.val());
        for (std::size_t i = 0; i < targets.size(); ++i) {
            const double step = lp.at(static_cast<int>(i), targets[i]);
            fwd.output.stepwise_log_probs.push_back(step);
            fwd.output.total_log_prob += step;
        }
        return fwd;
    }

    // Greedy generation until EOS or the length budget; gradients are not
    // recorded.  BOS, PAD, and UNK are never emitted.
    GerOutput generate(const FusedMultimodal& fused, int max_len = -1) {
        if (max_len < 0) max_len = cfg_.max_len;
        if (max_len < 1) fail("ger generate: max_len must be at least 1");
        Tape t;
        t.set_grad_enabled(false);
        Var mem = memory(t, t.constant(fused.x_mmc.val()), t.constant(fused.y_context.val()));

        GerOutput out;
        out.tokens = {Tokenizer::kBos};
        while (true) {
            std::vector<int> probe = out.tokens;
            probe.push_back(Tokenizer::kEos);
            Var logits = teacher_logits(t, mem, probe);
            const Tensor lp = log_prob_rows(logits.val());
            const int last = lp.rows() - 1;
            int best = Tokenizer::kEos;
            for (int v = 0; v < cfg_.vocab_size; ++v) {
                if (v == Tokenizer::kBos || v == Tokenizer::kPad || v == Tokenizer::kUnk) continue;
                if (lp.at(last, v) > lp.at(last, best)) best = v;
            }
            const int emitted = static_cast<int>(out.tokens.size()) - 1;
            if (emitted + 1 >= max_len && best != Tokenizer::kEos) {
                out.tokens.push_back(Tokenizer::kEos);
                out.stepwise_log_probs.push_back(lp.at(last, Tokenizer::kEos));
                out.total_log_prob += lp.at(last, Tokenizer::kEos);
                out.truncated = true;
                break;
            }
            out.tokens.push_back(best);
            out.stepwise_log_probs.push_back(lp.at(last, best));
            out.total_log_prob += lp.at(last, best);
            if (best == Tokenizer::kEos) break;
        }
        return out;
    }

    // Mean per-token negative log-likelihood of y under teacher forcing.
    Var llm_loss(Tape& t, const FusedMultimodal& fused, const std::vector<int>& y) {
        Var logits = teacher_logits(t, memory(t, fused), y);
        return t.cross_entropy(logits, std::vector<int>(y.begin() + 1, y.end()));
    }

    // Total teacher-forced log probability of y_i (sum over its tokens).
    Var score_hypothesis(Tape& t, const FusedMultimodal& fused, const std::vector<int>& y_i) {
        Var logits = teacher_logits(t, memory(t, fused), y_i);
        Var ce = t.cross_entropy(logits, std::vector<int>(y_i.begin() + 1, y_i.end()));
        return t.scale(-static_cast<double>(y_i.size() - 1), ce);
    }

    // Row-wise log-softmax computed in plain double arithmetic.
    static Tensor log_prob_rows(const Tensor& logits) {
        Tensor out(logits.shape());
        for (int r = 0; r < logits.rows(); ++r) {
            double mx = logits.at(r, 0);
            for (int c = 1; c < logits.cols(); ++c) mx = std::max(mx, logits.at(r, c));
            double sum = 0.0;
            for (int c = 0; c < logits.cols(); ++c) sum += std::exp(logits.at(r, c) - mx);
            const double lse = mx + std::log(sum);
            for (int c = 0; c < logits.cols(); ++c) out.at(r, c) = logits.at(r, c) - lse;
        }
        return out;
    }

private:
    struct Slot {
        std::vector<Parameter>* group = nullptr;
        std::size_t index = 0;
        Parameter& operator*() const { return (*group)[index]; }
    };

    struct AttnSlots {
        std::vector<Slot> wq, wk, wv;
        Slot wo;
    };

    struct LayerSlots {
        AttnSlots self, cross;
        Slot mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    };

    GerConfig cfg_;
    GerMask mask_ = GerMask::prefix_and_head;
    std::vector<Parameter> prefix_, body_, head_;
    Slot prefix_wx_, prefix_bx_, prefix_wc_, prefix_bc_, prefix_sep_;
    Slot embed_, pos_dec_, pos_mem_;
    std::vector<LayerSlots> layers_;
    Slot head_w_, head_b_;

    static Slot push(std::vector<Parameter>& group, Parameter p) {
        group.push_back(std::move(p));
        return Slot{&group, group.size() - 1};
    }

    static Slot add(std::vector<Parameter>& group, const std::string& name, std::vector<int> shape,
                    int fan_in, Rng& rng) {
        Tensor v = Tensor::randn(std::move(shape), rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
        return push(group, Parameter(name, std::move(v)));
    }

    static Slot add_zero(std::vector<Parameter>& group, const std::string& name,
                         std::vector<int> shape) {
        return push(group, Parameter(name, Tensor::zeros(std::move(shape))));
    }

    static std::vector<int> iota(int n) {
        std::vector<int> ids(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
        return ids;
    }

    static void validate_framing(const std::vector<int>& tokens) {
        if (tokens.size() < 2 || tokens.front() != Tokenizer::kBos || tokens.back() != Tokenizer::kEos)
            fail("ger: token sequence must be BOS ... EOS framed");
    }

    Var attention(Tape& t, const AttnSlots& a, Var q_in, Var kv_in, bool causal) {
        const int dh = cfg_.d_model / cfg_.n_heads;
        std::vector<Var> heads;
        for (int h = 0; h < cfg_.n_heads; ++h) {
            const auto hu = static_cast<std::size_t>(h);
            Var q = t.matmul(q_in, t.param(*a.wq[hu]));
            Var k = t.matmul(kv_in, t.param(*a.wk[hu]));
            Var v = t.matmul(kv_in, t.param(*a.wv[hu]));
            Var scores = t.scale(1.0 / std::sqrt(static_cast<double>(dh)), t.matmul_nt(q, k));
            Var att = causal ? t.softmax_rows(scores, 0) : t.softmax_rows(scores);
            heads.push_back(t.matmul(att, v));
        }
        Var cat = cfg_.n_heads == 1 ? heads[0] : t.concat_cols(heads);
        return t.matmul(cat, t.param(*a.wo));
    }

    Var mlp(Tape& t, const LayerSlots& L, Var x) {
        Var h = t.relu(linear(t, x, t.param(*L.mlp_w1), t.param(*L.mlp_b1)));
        return linear(t, h, t.param(*L.mlp_w2), t.param(*L.mlp_b2));
    }
};

}  // namespace dger
