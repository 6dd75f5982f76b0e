#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dger/asr.hpp"
#include "dger/checkpoint.hpp"
#include "dger/corpus.hpp"
#include "dger/fusion.hpp"
#include "dger/ger.hpp"
#include "dger/mwer.hpp"
#include "dger/text.hpp"

namespace dger {

// ===========================================================================
// End-to-end correction pipeline: noisy frames -> adapted acoustic encoding
// -> n-best transcripts -> feature compensation and dynamic fusion -> decoder
// that rewrites the 1-best.  Three switches select which stages participate:
// the acoustic adapter, the compensation/fusion mechanism, and the
// hypothesis-ranking loss.  A disabled stage contributes nothing to the loss
// and its parameters stay frozen.
// ===========================================================================

// Reference sequence used for the fusion weight when no ground truth is
// available: the average hypothesis embedding, or a fixed 0.5 weight.
enum class MuTarget { nbest_mean, fixed };

inline const char* mu_target_name(MuTarget m) {
    return m == MuTarget::nbest_mean ? "nbest_mean" : "fixed";
}

inline MuTarget mu_target_from(const std::string& s) {
    if (s == "nbest_mean") return MuTarget::nbest_mean;
    if (s == "fixed") return MuTarget::fixed;
    fail(strfmt("mu target '%s' unknown; expected nbest_mean or fixed", s.c_str()));
}

struct PipelineConfig {
    NaaeConfig asr;
    GerConfig ger;
    FusionConfig fusion = FusionConfig::variant();
    FusionMode baseline_mode = FusionMode::concat;  // fusion used when hfcdf_on is false
    MuTarget infer_target = MuTarget::nbest_mean;
    int d_embed = 24;     // character embedding width for the fusion inputs
    int beam = 4;
    double lambda = 0.5;  // CE-vs-reconstruction mix inside the acoustic loss
    bool naae_on = true;
    bool hfcdf_on = true;
    bool rl_on = true;

    void validate() const {
        ger.validate();
        fusion.validate();
        if (d_embed < 1) fail("pipeline config: d_embed must be positive");
        if (beam < 1) fail("pipeline config: beam must be at least 1");
        if (lambda < 0.0 || lambda > 1.0)
            fail(strfmt("pipeline config: lambda must lie in [0, 1], got %g", lambda));
        if (ger.d_context != d_embed)
            fail(strfmt("pipeline config: decoder d_context %d must equal d_embed %d",
                        ger.d_context, d_embed));
        if (ger.d_fused != 2 * d_embed)
            fail(strfmt("pipeline config: decoder d_fused %d must be twice d_embed %d",
                        ger.d_fused, d_embed));
        if (ger.vocab_size != asr.vocab_size)
            fail(strfmt("pipeline config: decoder vocab %d differs from recognizer vocab %d",
                        ger.vocab_size, asr.vocab_size));
        if (!hfcdf_on && baseline_mode == FusionMode::hfcdf)
            fail("pipeline config: baseline mode cannot be hfcdf; enable hfcdf_on instead");
    }
};

// Component losses for one utterance.  A stage that is switched off leaves
// its slot empty rather than contributing a zero, so the combined loss can
// prove the stage added nothing.
struct UttForward {
    Var llm;
    std::optional<Var> asr;
    std::optional<Var> rl;
    NBestList nbest;
};

class DenoisingGerModel {
public:
    DenoisingGerModel(const PipelineConfig& cfg, std::uint64_t seed)
        : cfg_(cfg),
          asr_(cfg.asr, mix_seed(seed, 0xa0)),
          ger_(cfg.ger, mix_seed(seed, 0x6e)),
          mixer_(cfg.d_embed, mix_seed(seed, 0xf0)) {
        cfg_.validate();
        if (tok_.vocab_size() != cfg.ger.vocab_size)
            fail(strfmt("pipeline: tokenizer vocab %d differs from configured vocab %d",
                        tok_.vocab_size(), cfg.ger.vocab_size));
        Rng rng(mix_seed(seed, 0x97));
        glue_.reserve(3);
        glue_.emplace_back("glue.embed",
                           Tensor::randn({cfg.ger.vocab_size, cfg.d_embed}, rng, 0.5));
        glue_.emplace_back("glue.align_w",
                           Tensor::randn({cfg.asr.d_enc, cfg.d_embed}, rng,
                                         1.0 / std::sqrt(static_cast<double>(cfg.asr.d_enc))));
        glue_.emplace_back("glue.align_b", Tensor::zeros({1, cfg.d_embed}));
        apply_toggles();
    }

    DenoisingGerModel(const DenoisingGerModel&) = delete;
    DenoisingGerModel& operator=(const DenoisingGerModel&) = delete;

    const PipelineConfig& config() const { return cfg_; }
    const Tokenizer& tokenizer() const { return tok_; }
    NaaeModel& asr() { return asr_; }
    GerModel& ger() { return ger_; }

    // Trainability per the stage switches: the adapter trains only when the
    // acoustic stage is on, the mixer only when it is the active baseline,
    // and the decoder trains its fusion-facing prefix and output head.
    void apply_toggles() {
        asr_.set_mode(cfg_.naae_on ? FinetuneMode::adapter_only : FinetuneMode::frozen);
        ger_.set_mask(GerMask::prefix_and_head);
        for (auto& p : glue_) p.trainable = true;
        const bool mixer_active = !cfg_.hfcdf_on && cfg_.baseline_mode == FusionMode::transformer;
        for (auto* p : mixer_.param_ptrs()) p->trainable = mixer_active;
    }

    std::vector<Parameter*> params() {
        std::vector<Parameter*> out = asr_.params();
        for (auto* p : ger_.params()) out.push_back(p);
        for (auto& p : glue_) out.push_back(&p);
        for (auto* p : mixer_.param_ptrs()) out.push_back(p);
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

    // ---- persistence -------------------------------------------------------

    CheckpointEntries checkpoint_entries() {
        CheckpointEntries entries;
        for (auto* p : params()) entries[p->name] = p->value;
        return entries;
    }

    // Restores every model parameter; "__"-prefixed entries (optimizer
    // bookkeeping) are ignored, anything else unrecognized is an error.
    void load_entries(const CheckpointEntries& entries) {
        std::map<std::string, Parameter*> by_name;
        for (auto* p : params()) by_name[p->name] = p;
        for (const auto& [name, tensor] : entries) {
            if (name.rfind("__", 0) == 0) continue;
            auto it = by_name.find(name);
            if (it == by_name.end())
                fail(strfmt("checkpoint entry '%s' does not match any model parameter", name.c_str()));
            if (tensor.shape() != it->second->value.shape())
                fail(strfmt("checkpoint entry '%s' has shape %s, expected %s", name.c_str(),
                            tensor.shape_str().c_str(), it->second->value.shape_str().c_str()));
            it->second->value = tensor;
            it->second->zero_grad();
            by_name.erase(it);
        }
        if (!by_name.empty())
            fail(strfmt("checkpoint is missing parameter '%s'", by_name.begin()->first.c_str()));
    }

    // ---- recognition -------------------------------------------------------

    // N-best transcripts under the current weights; no gradients.
    NBestList nbest(const Utterance& utt) {
        Tape t;
        t.set_grad_enabled(false);
        Var x = asr_.adapt(t, t.constant(utt.noisy_frames));
        return asr_.decode_nbest(asr_.encode_tensor(x.val()), cfg_.beam);
    }

    // ---- training forward --------------------------------------------------

    UttForward forward(Tape& t, const Utterance& utt, const NBestList& nb) {
        nb.validate(cfg_.beam);
        Var x_in = t.constant(utt.noisy_frames);
        Var x_adapted = asr_.adapt(t, x_in);
        const FusedMultimodal fused = build_fused(t, x_adapted, nb, &utt.transcript);

        UttForward out;
        out.nbest = nb;
        const std::vector<int> y_ref = tok_.encode_delimited(utt.transcript);
        out.llm = ger_.llm_loss(t, fused, y_ref);
        if (cfg_.naae_on) out.asr = asr_.asr_loss(t, x_in, x_adapted, y_ref, cfg_.lambda);
        if (cfg_.rl_on) {
            std::vector<Var> scores;
            std::vector<double> wers;
            scores.reserve(static_cast<std::size_t>(nb.n()));
            wers.reserve(static_cast<std::size_t>(nb.n()));
            for (const auto& h : nb.hyps) {
                scores.push_back(ger_.score_hypothesis(t, fused, h.tokens));
                wers.push_back(wer(utt.transcript, tok_.decode(h.tokens)));
            }
            out.rl = rl_loss(t, make_mwer_item(nb, utt.transcript, scores, wers));
        }
        return out;
    }

    // ---- inference ---------------------------------------------------------

    GerOutput correct(const Utterance& utt) { return correct(utt, nbest(utt)); }

    GerOutput correct(const Utterance& utt, const NBestList& nb) {
        nb.validate(cfg_.beam);
        Tape t;
        t.set_grad_enabled(false);
        Var x_adapted = asr_.adapt(t, t.constant(utt.noisy_frames));
        const FusedMultimodal fused = build_fused(t, x_adapted, nb, nullptr);
        return ger_.generate(fused);
    }

    std::string correct_text(const Utterance& utt) {
        return tok_.decode(correct(utt).tokens);
    }

private:
    // Hypothesis interiors can be empty (the recognizer may emit BOS EOS);
    // a lone PAD keeps the embedding nonempty without inventing characters.
    Var embed_hyp(Tape& t, const std::vector<int>& tokens) {
        std::vector<int> ids = interior_tokens(tokens);
        if (ids.empty()) ids.push_back(Tokenizer::kPad);
        return embed_text(t, t.param(glue_[0]), ids);
    }

    Var nbest_mean_embedding(Tape& t, const std::vector<Var>& hyp_embs) {
        int min_rows = hyp_embs.front().val().rows();
        for (const Var& e : hyp_embs) min_rows = std::min(min_rows, e.val().rows());
        Var acc = truncate_rows(t, hyp_embs.front(), min_rows);
        for (std::size_t i = 1; i < hyp_embs.size(); ++i)
            acc = t.add(acc, truncate_rows(t, hyp_embs[i], min_rows));
        return t.scale(1.0 / static_cast<double>(hyp_embs.size()), acc);
    }

    // Fusion front end shared by training and inference.  `truth` selects the
    // reference for the dynamic weight: the ground-truth embedding during
    // training, the n-best mean (or a fixed weight) when correcting.
    FusedMultimodal build_fused(Tape& t, Var x_adapted, const NBestList& nb,
                                const std::string* truth) {
        std::vector<Var> hyp_embs;
        hyp_embs.reserve(static_cast<std::size_t>(nb.n()));
        for (const auto& h : nb.hyps) hyp_embs.push_back(embed_hyp(t, h.tokens));
        Var y_top1 = hyp_embs.front();
        Var y_context = ger_.build_context(t, hyp_embs);

        Var enc = asr_.encode(t, x_adapted);
        Var x_tok = align_frames_to_chars(t, enc, y_top1.val().rows(), t.param(glue_[1]),
                                          t.param(glue_[2]));

        if (!cfg_.hfcdf_on) {
            Var combined = baseline_fusions(t, x_tok, y_top1, cfg_.baseline_mode, &mixer_);
            if (combined.val().cols() == cfg_.d_embed) {
                Var pad = t.constant(Tensor::zeros({combined.val().rows(), cfg_.d_embed}));
                combined = t.concat_cols({combined, pad});
            }
            return FusedMultimodal{combined, y_context, t.constant(Tensor::scalar(0.5))};
        }

        const Compensated comp = compensate(t, x_tok, y_top1, cfg_.fusion);
        Var mu;
        if (truth != nullptr) {
            Var target = embed_text(t, t.param(glue_[0]), tok_.encode(*truth));
            mu = dynamic_weight(t, comp.x, comp.y, target);
        } else if (cfg_.infer_target == MuTarget::nbest_mean) {
            mu = dynamic_weight(t, comp.x, comp.y, nbest_mean_embedding(t, hyp_embs));
        } else {
            mu = t.constant(Tensor::scalar(0.5));
        }
        return fuse(t, comp.x, comp.y, mu, y_context);
    }

    PipelineConfig cfg_;
    Tokenizer tok_;
    NaaeModel asr_;
    GerModel ger_;
    TransformerMixer mixer_;
    std::vector<Parameter> glue_;
};

}  // namespace dger
