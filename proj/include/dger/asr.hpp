#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dger/autodiff.hpp"
#include "dger/common.hpp"
#include "dger/nn.hpp"
#include "dger/rng.hpp"
#include "dger/tensor.hpp"
#include "dger/text.hpp"

namespace dger {

// ===========================================================================
// Toy ASR with a noise-adaptive front end:
//   - a U-Net residual adapter on the input features (3 stride-2 conv stages
//     down, 3 transpose-conv stages up, additive skips, zero-initialized
//     final layer so adaptation starts as the exact identity),
//   - a base encoder (2 convs + a tanh dense layer) that is frozen except in
//     full fine-tuning mode,
//   - an autoregressive character decoder with dot-product attention and a
//     recurrent cell, decoded by beam search into n-best lists.
// ===========================================================================

enum class FinetuneMode { frozen, full_ft, adapter_only };

inline const char* finetune_mode_name(FinetuneMode m) {
    switch (m) {
        case FinetuneMode::frozen: return "frozen";
        case FinetuneMode::full_ft: return "full_ft";
        case FinetuneMode::adapter_only: return "adapter_only";
    }
    return "?";
}

inline FinetuneMode finetune_mode_from(const std::string& s) {
    if (s == "frozen") return FinetuneMode::frozen;
    if (s == "full_ft") return FinetuneMode::full_ft;
    if (s == "adapter_only") return FinetuneMode::adapter_only;
    fail(strfmt("unknown finetune mode '%s'", s.c_str()));
}

struct NaaeConfig {
    int n_features = 16;
    int d_enc = 32;
    int unet_channels = 16;
    int d_dec = 32;
    int vocab_size = 31;  // tokenizer vocabulary
    int frames_per_char = 4;
    int beam = 5;
    int max_decode_slack = 4;  // extra characters allowed beyond T'/frames_per_char
};

class NaaeModel {
public:
    NaaeModel(const NaaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        if (cfg.n_features < 1 || cfg.d_enc < 1 || cfg.d_dec < 1 || cfg.unet_channels < 1)
            fail("asr config: dimensions must be positive");
        if (cfg.vocab_size <= Tokenizer::kNumSpecials)
            fail("asr config: vocabulary has no non-special tokens");
        Rng rng(mix_seed(seed, 0xa5));
        const int f = cfg.n_features, c = cfg.unet_channels;
        const int de = cfg.d_enc, dd = cfg.d_dec, v = cfg.vocab_size;

        // adapter (U-Net)
        unet_d1_w_ = add(adapter_, "adapter.d1.w", {c, f, 4}, f * 4, rng);
        unet_d1_b_ = add_zero(adapter_, "adapter.d1.b", {c});
        unet_d2_w_ = add(adapter_, "adapter.d2.w", {c, c, 4}, c * 4, rng);
        unet_d2_b_ = add_zero(adapter_, "adapter.d2.b", {c});
        unet_d3_w_ = add(adapter_, "adapter.d3.w", {c, c, 4}, c * 4, rng);
        unet_d3_b_ = add_zero(adapter_, "adapter.d3.b", {c});
        unet_u1_w_ = add(adapter_, "adapter.u1.w", {c, c, 4}, c * 4, rng);
        unet_u1_b_ = add_zero(adapter_, "adapter.u1.b", {c});
        unet_u2_w_ = add(adapter_, "adapter.u2.w", {c, c, 4}, c * 4, rng);
        unet_u2_b_ = add_zero(adapter_, "adapter.u2.b", {c});
        unet_u3_w_ = add(adapter_, "adapter.u3.w", {c, f, 4}, c * 4, rng);
        unet_u3_b_ = add_zero(adapter_, "adapter.u3.b", {f});
        unet_out_w_ = add_zero(adapter_, "adapter.out.w", {f, f, 3});  // identity at init
        unet_out_b_ = add_zero(adapter_, "adapter.out.b", {f});

        // base encoder
        enc_c1_w_ = add(base_, "base.conv1.w", {de, f, 3}, f * 3, rng);
        enc_c1_b_ = add_zero(base_, "base.conv1.b", {de});
        enc_c2_w_ = add(base_, "base.conv2.w", {de, de, 3}, de * 3, rng);
        enc_c2_b_ = add_zero(base_, "base.conv2.b", {de});
        enc_d_w_ = add(base_, "base.dense.w", {de, de}, de, rng);
        enc_d_b_ = add_zero(base_, "base.dense.b", {1, de});

        // decoder
        dec_embed_ = add(decoder_, "dec.embed", {v, dd}, 4, rng);
        dec_wq_ = add(decoder_, "dec.wq", {dd, de}, dd, rng);
        dec_wh_ = add(decoder_, "dec.wh", {dd, dd}, dd, rng);
        dec_we_ = add(decoder_, "dec.we", {dd, dd}, dd, rng);
        dec_wc_ = add(decoder_, "dec.wc", {de, dd}, de, rng);
        dec_bh_ = add_zero(decoder_, "dec.bh", {1, dd});
        dec_wo_ = add(decoder_, "dec.wo", {dd + de, v}, dd + de, rng);
        dec_bo_ = add_zero(decoder_, "dec.bo", {1, v});

        set_mode(FinetuneMode::frozen);
    }

    NaaeModel(const NaaeModel&) = delete;
    NaaeModel& operator=(const NaaeModel&) = delete;

    const NaaeConfig& config() const { return cfg_; }
    FinetuneMode mode() const { return mode_; }

    // Switches which parameter groups can receive gradient. The pretraining
    // phase drives the base model through full_ft on clean data; the main
    // loop uses whichever mode the experiment row asks for.
    void set_mode(FinetuneMode m) {
        mode_ = m;
        const bool full = m == FinetuneMode::full_ft;
        for (auto& p : base_) p.trainable = full;
        for (auto& p : decoder_) p.trainable = full;
        for (auto& p : adapter_) p.trainable = m == FinetuneMode::adapter_only;
    }

    std::vector<Parameter*> params() {
        std::vector<Parameter*> out;
        for (auto* group : {&adapter_, &base_, &decoder_})
            for (auto& p : *group) out.push_back(&p);
        return out;
    }

    std::vector<Parameter*> adapter_params() {
        std::vector<Parameter*> out;
        for (auto& p : adapter_) out.push_back(&p);
        return out;
    }

    std::vector<Parameter*> trainable_params() {
        std::vector<Parameter*> out;
        for (auto* p : params())
            if (p->trainable) out.push_back(p);
        return out;
    }

    long long trainable_count() {
        long long n = 0;
        for (auto* p : trainable_params()) n += static_cast<long long>(p->numel());
        return n;
    }

    // ---- adapter ----------------------------------------------------------

    // Residual adaptation x + unet(x). Inactive modes pass the input through
    // untouched; the adapter_only mode pads to a multiple of 8 frames (three
    // stride-2 stages), runs the U-Net, adds, and strips the padding.
    Var adapt(Tape& t, Var x_in) {
        if (x_in.val().rank() != 2 || x_in.val().dim(0) < 1)
            fail("adapt: input must be a nonempty T x F matrix");
        if (x_in.val().dim(1) != cfg_.n_features)
            fail(strfmt("adapt: expected %d features, got %s", cfg_.n_features,
                        x_in.val().shape_str().c_str()));
        if (mode_ != FinetuneMode::adapter_only) return x_in;
        const int t_in = x_in.val().dim(0);
        const int t_pad = ((t_in + 7) / 8) * 8;
        Var x = x_in;
        if (t_pad != t_in) {
            Var zeros = t.constant(Tensor::zeros({t_pad - t_in, cfg_.n_features}));
            x = t.concat_rows({x_in, zeros});
        }
        Var out = t.add(x, unet(t, x));
        if (t_pad != t_in) out = t.mean_pool_segments(out, single_frame_ranges(t_in));
        return out;
    }

    // Raw adapter response (without the residual add); input frames must
    // already be a multiple of 8.
    Var unet(Tape& t, Var x) {
        if (x.val().dim(0) % 8 != 0) fail("unet: frame count must be a multiple of 8");
        Var d1 = t.tanh(t.conv1d(x, t.param(*unet_d1_w_), t.param(*unet_d1_b_), 2, 1));
        Var d2 = t.tanh(t.conv1d(d1, t.param(*unet_d2_w_), t.param(*unet_d2_b_), 2, 1));
        Var d3 = t.tanh(t.conv1d(d2, t.param(*unet_d3_w_), t.param(*unet_d3_b_), 2, 1));
        Var u1 = t.add(t.tanh(t.tconv1d(d3, t.param(*unet_u1_w_), t.param(*unet_u1_b_), 2, 1)), d2);
        Var u2 = t.add(t.tanh(t.tconv1d(u1, t.param(*unet_u2_w_), t.param(*unet_u2_b_), 2, 1)), d1);
        Var u3 = t.tanh(t.tconv1d(u2, t.param(*unet_u3_w_), t.param(*unet_u3_b_), 2, 1));
        return t.conv1d(u3, t.param(*unet_out_w_), t.param(*unet_out_b_), 1, 1);
    }

    // ---- encoder -----------------------------------------------------------

    // T x F -> T x D_enc (no temporal subsampling).
    Var encode(Tape& t, Var x_adapted) {
        Var h1 = t.tanh(t.conv1d(x_adapted, t.param(*enc_c1_w_), t.param(*enc_c1_b_), 1, 1));
        Var h2 = t.tanh(t.conv1d(h1, t.param(*enc_c2_w_), t.param(*enc_c2_b_), 1, 1));
        return t.tanh(linear(t, h2, t.param(*enc_d_w_), t.param(*enc_d_b_)));
    }

    Tensor encode_tensor(const Tensor& x_adapted) {
        Tape t;
        t.set_grad_enabled(false);
        return encode(t, t.constant(x_adapted)).val();
    }

    // ---- decoder -----------------------------------------------------------

    // One autoregressive step: previous token + state + encoder memory ->
    // next state and vocabulary logits.
    std::pair<Var, Var> decoder_step(Tape& t, Var h, int prev_token, Var enc) {
        Var e = t.embedding_lookup(t.param(*dec_embed_), {prev_token});
        Var q = t.matmul(h, t.param(*dec_wq_));
        Var scores = t.scale(1.0 / std::sqrt(static_cast<double>(cfg_.d_enc)), t.matmul_nt(q, enc));
        Var ctx = t.matmul(t.softmax_rows(scores), enc);
        Var pre = t.add(t.add(t.matmul(h, t.param(*dec_wh_)), t.matmul(e, t.param(*dec_we_))),
                        t.add(t.matmul(ctx, t.param(*dec_wc_)), t.param(*dec_bh_)));
        Var h2 = t.tanh(pre);
        Var logits = linear(t, t.concat_cols({h2, ctx}), t.param(*dec_wo_), t.param(*dec_bo_));
        return {h2, logits};
    }

    Var initial_state(Tape& t) { return t.constant(Tensor::zeros({1, cfg_.d_dec})); }

    // Teacher-forced mean cross-entropy over a BOS...EOS token sequence.
    Var teacher_ce(Tape& t, Var enc, const std::vector<int>& tokens) {
        if (tokens.size() < 2 || tokens.front() != Tokenizer::kBos || tokens.back() != Tokenizer::kEos)
            fail("teacher_ce: token sequence must be BOS...EOS");
        Var h = initial_state(t);
        std::vector<Var> rows;
        rows.reserve(tokens.size() - 1);
        for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
            auto [h2, logits] = decoder_step(t, h, tokens[i], enc);
            h = h2;
            rows.push_back(logits);
        }
        const std::vector<int> targets(tokens.begin() + 1, tokens.end());
        return t.cross_entropy(t.concat_rows(rows), targets);
    }

    // ---- beam search -------------------------------------------------------

    // Deterministic beam search over the character vocabulary. Hypotheses are
    // ranked by total log-probability; exact ties prefer the lexicographically
    // smaller token sequence (which also puts shorter sequences first). The
    // beam-1 greedy hypothesis is always merged into the candidate pool, so
    // widening the beam can never lose to greedy.
    NBestList decode_nbest(const Tensor& x_audio, int beam, int max_len = -1) {
        if (beam < 1) fail("decode_nbest: beam must be >= 1");
        if (x_audio.rank() != 2 || x_audio.dim(0) < 1)
            fail("decode_nbest: need a nonempty T' x D_enc matrix");
        if (max_len < 0) max_len = x_audio.dim(0) / cfg_.frames_per_char + cfg_.max_decode_slack;
        max_len = std::max(max_len, 1);

        Tape t;
        t.set_grad_enabled(false);
        Var enc = t.constant(x_audio);

        auto finished = search(t, enc, beam, max_len);
        if (beam > 1) {
            auto greedy = search(t, enc, 1, max_len);
            finished.insert(finished.end(), greedy.begin(), greedy.end());
        }
        std::sort(finished.begin(), finished.end(), [](const SearchHyp& a, const SearchHyp& b) {
            if (a.logp != b.logp) return a.logp > b.logp;
            return a.tokens < b.tokens;
        });
        NBestList out;
        for (const auto& h : finished) {
            if (!out.hyps.empty() && out.hyps.back().tokens == h.tokens) continue;
            bool dup = false;
            for (const auto& k : out.hyps) dup = dup || k.tokens == h.tokens;
            if (dup) continue;
            out.hyps.push_back({h.tokens, h.logp});
            if (out.n() == beam) break;
        }
        out.validate(beam);
        return out;
    }

    // ---- combined loss -----------------------------------------------------

    // lambda * CE(decoder over encode(x_adapted), y) +
    // (1 - lambda) * L1(x_adapted, x_in)
    Var asr_loss(Tape& t, Var x_in, Var x_adapted, const std::vector<int>& y, double lambda) {
        if (lambda < 0.0 || lambda > 1.0) fail(strfmt("asr_loss: lambda %.4f outside [0,1]", lambda));
        Var ce = teacher_ce(t, encode(t, x_adapted), y);
        Var l1 = t.l1_distance(x_adapted, x_in);
        return t.add(t.scale(lambda, ce), t.scale(1.0 - lambda, l1));
    }

private:
    struct SearchHyp {
        std::vector<int> tokens;
        double logp = 0.0;
        Var h;
        bool done = false;
    };

    NaaeConfig cfg_;
    FinetuneMode mode_ = FinetuneMode::frozen;
    std::vector<Parameter> adapter_, base_, decoder_;

    // Groups hold parameters by value; index handles stay valid because each
    // group is fully populated in the constructor and never resized again.
    struct Slot {
        std::vector<Parameter>* group = nullptr;
        std::size_t index = 0;
        Parameter& operator*() const { return (*group)[index]; }
    };

    Slot unet_d1_w_, unet_d1_b_, unet_d2_w_, unet_d2_b_, unet_d3_w_, unet_d3_b_;
    Slot unet_u1_w_, unet_u1_b_, unet_u2_w_, unet_u2_b_, unet_u3_w_, unet_u3_b_;
    Slot unet_out_w_, unet_out_b_;
    Slot enc_c1_w_, enc_c1_b_, enc_c2_w_, enc_c2_b_, enc_d_w_, enc_d_b_;
    Slot dec_embed_, dec_wq_, dec_wh_, dec_we_, dec_wc_, dec_bh_, dec_wo_, dec_bo_;

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

    static std::vector<std::pair<int, int>> single_frame_ranges(int n) {
        std::vector<std::pair<int, int>> r;
        r.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) r.emplace_back(i, i + 1);
        return r;
    }

    static std::vector<double> log_probs(const Tensor& logits) {
        const int v = logits.dim(1);
        double mx = logits[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, logits[static_cast<std::size_t>(j)]);
        double sum = 0.0;
        for (int j = 0; j < v; ++j) sum += std::exp(logits[static_cast<std::size_t>(j)] - mx);
        const double lse = mx + std::log(sum);
        std::vector<double> lp(static_cast<std::size_t>(v));
        for (int j = 0; j < v; ++j) lp[static_cast<std::size_t>(j)] = logits[static_cast<std::size_t>(j)] - lse;
        return lp;
    }

    std::vector<SearchHyp> search(Tape& t, Var enc, int width, int max_len) {
        std::vector<SearchHyp> live;
        live.push_back({{Tokenizer::kBos}, 0.0, initial_state(t), false});
        std::vector<SearchHyp> pool;
        for (int step = 0; step < max_len + 1; ++step) {
            const bool force_eos = step == max_len;
            std::vector<SearchHyp> cand;
            for (auto& hyp : live) {
                if (hyp.done) {
                    cand.push_back(hyp);
                    continue;
                }
                auto [h2, logits] = decoder_step(t, hyp.h, hyp.tokens.back(), enc);
                const auto lp = log_probs(logits.val());
                for (int v = 0; v < static_cast<int>(lp.size()); ++v) {
                    if (v == Tokenizer::kBos || v == Tokenizer::kPad || v == Tokenizer::kUnk) continue;
                    if (force_eos && v != Tokenizer::kEos) continue;
                    SearchHyp next;
                    next.tokens = hyp.tokens;
                    next.tokens.push_back(v);
                    next.logp = hyp.logp + lp[static_cast<std::size_t>(v)];
                    next.h = h2;
                    next.done = v == Tokenizer::kEos;
                    cand.push_back(std::move(next));
                }
            }
            std::sort(cand.begin(), cand.end(), [](const SearchHyp& a, const SearchHyp& b) {
                if (a.logp != b.logp) return a.logp > b.logp;
                return a.tokens < b.tokens;
            });
            if (static_cast<int>(cand.size()) > width) cand.resize(static_cast<std::size_t>(width));
            live.clear();
            bool all_done = true;
            for (auto& hyp : cand) {
                all_done = all_done && hyp.done;
                live.push_back(std::move(hyp));
            }
            if (all_done) {
                pool = std::move(live);
                break;
            }
        }
        std::vector<SearchHyp> out;
        for (auto& h : pool)
            if (h.done) out.push_back(std::move(h));
        if (out.empty()) fail("decode_nbest: search produced no finished hypothesis");
        return out;
    }
};

}  // namespace dger
