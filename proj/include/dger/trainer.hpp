#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dger/checkpoint.hpp"
#include "dger/config.hpp"
#include "dger/eval.hpp"
#include "dger/pipeline.hpp"

namespace dger {

// ===========================================================================
// Joint optimization of the correction objective: decoder likelihood plus
// weighted acoustic and hypothesis-ranking terms, with stage switches for
// ablations, linear warmup, gradient clipping, per-epoch checkpoints, and
// fully deterministic seeding.
// ===========================================================================

struct TrainConfig {
    double alpha = 0.2;        // weight of the acoustic loss
    double beta = 0.2;         // weight of the ranking loss
    double lambda = 0.5;       // CE-vs-reconstruction mix inside the acoustic loss
    double k = 0.7;            // compensation gain
    double k_t_variant = 0.3;  // text-side gain when the single-gain mode is off
    bool shared_gain = false;   // single-gain compensation (collapses both streams)
    int beam = 5;
    double lr = 2e-4;
    int warmup_steps = 100;
    int epochs = 5;
    int batch_size = 8;
    std::uint64_t seed = 1;
    bool naae_on = true;
    bool hfcdf_on = true;
    bool rl_on = true;

    FusionMode baseline_mode = FusionMode::concat;  // fusion used when hfcdf_on is false
    MuTarget infer_target = MuTarget::nbest_mean;

    // Recognizer preparation: supervised warm start on clean frames, run once
    // before the main loop so correction operates on a working recognizer.
    int pretrain_epochs = 12;
    double pretrain_lr = 3e-3;

    // Schedule option: first train the acoustic side alone, then the
    // corrector alone, splitting the epoch budget in half.
    bool two_stage = false;

    int max_utterances = 0;       // cap on train utterances per epoch; 0 = all
    int max_eval_utterances = 0;  // cap per test split; 0 = all

    NaaeConfig asr;
    GerConfig ger;
    int d_embed = 24;

    void validate() const {
        if (alpha < 0.0) fail(strfmt("train config: alpha must be nonnegative, got %g", alpha));
        if (beta < 0.0) fail(strfmt("train config: beta must be nonnegative, got %g", beta));
        if (beam < 1) fail("train config: beam must be at least 1");
        if (epochs < 1) fail("train config: epochs must be at least 1");
        if (batch_size < 1) fail("train config: batch_size must be at least 1");
        if (lr < 0.0) fail("train config: learning rate must be nonnegative");
        if (pretrain_lr < 0.0) fail("train config: pretrain learning rate must be nonnegative");
        if (warmup_steps < 0) fail("train config: warmup_steps must be nonnegative");
        if (pretrain_epochs < 0) fail("train config: pretrain_epochs must be nonnegative");
        if (max_utterances < 0 || max_eval_utterances < 0)
            fail("train config: utterance caps must be nonnegative");
        if (k < 0.0 || k > 1.0) fail(strfmt("train config: k must lie in [0, 1], got %g", k));
        if (k_t_variant < 0.0 || k_t_variant > 1.0)
            fail(strfmt("train config: k_t must lie in [0, 1], got %g", k_t_variant));
        pipeline().validate();
    }

    FusionConfig fusion() const {
        FusionConfig f;
        f.k_a = k;
        f.k_t = shared_gain ? k : k_t_variant;
        f.shared_gain = shared_gain;
        return f;
    }

    PipelineConfig pipeline() const {
        PipelineConfig p;
        p.asr = asr;
        p.ger = ger;
        p.ger.d_fused = 2 * d_embed;
        p.ger.d_context = d_embed;
        p.fusion = fusion();
        p.baseline_mode = baseline_mode;
        p.infer_target = infer_target;
        p.d_embed = d_embed;
        p.beam = beam;
        p.lambda = lambda;
        p.naae_on = naae_on;
        p.hfcdf_on = hfcdf_on;
        p.rl_on = rl_on;
        return p;
    }

    static std::vector<std::string> known_keys() {
        return {"train.alpha",         "train.beta",
                "train.lambda",        "train.beam",
                "train.lr",            "train.warmup_steps",
                "train.epochs",        "train.batch_size",
                "train.seed",          "train.naae_on",
                "train.hfcdf_on",      "train.rl_on",
                "train.pretrain_epochs", "train.pretrain_lr",
                "train.two_stage",     "train.max_utterances",
                "train.max_eval_utterances", "train.d_embed",
                "fusion.k",            "fusion.k_t",
                "fusion.shared_gain",   "fusion.mode",
                "fusion.infer_target", "ger.d_model",
                "ger.n_layers",        "ger.n_heads",
                "ger.d_ff",            "asr.d_enc",
                "asr.d_dec",           "asr.unet_channels",
                "asr.n_features",      "asr.frames_per_char"};
    }

    static TrainConfig from_config(const Config& c) {
        TrainConfig d;
        d.alpha = c.get_double("train.alpha", d.alpha);
        d.beta = c.get_double("train.beta", d.beta);
        d.lambda = c.get_double("train.lambda", d.lambda);
        d.beam = c.get_int("train.beam", d.beam);
        d.lr = c.get_double("train.lr", d.lr);
        d.warmup_steps = c.get_int("train.warmup_steps", d.warmup_steps);
        d.epochs = c.get_int("train.epochs", d.epochs);
        d.batch_size = c.get_int("train.batch_size", d.batch_size);
        d.seed = static_cast<std::uint64_t>(c.get_int("train.seed", static_cast<int>(d.seed)));
        d.naae_on = c.get_bool("train.naae_on", d.naae_on);
        d.hfcdf_on = c.get_bool("train.hfcdf_on", d.hfcdf_on);
        d.rl_on = c.get_bool("train.rl_on", d.rl_on);
        d.pretrain_epochs = c.get_int("train.pretrain_epochs", d.pretrain_epochs);
        d.pretrain_lr = c.get_double("train.pretrain_lr", d.pretrain_lr);
        d.two_stage = c.get_bool("train.two_stage", d.two_stage);
        d.max_utterances = c.get_int("train.max_utterances", d.max_utterances);
        d.max_eval_utterances = c.get_int("train.max_eval_utterances", d.max_eval_utterances);
        d.d_embed = c.get_int("train.d_embed", d.d_embed);
        d.k = c.get_double("fusion.k", d.k);
        d.k_t_variant = c.get_double("fusion.k_t", d.k_t_variant);
        d.shared_gain = c.get_bool("fusion.shared_gain", d.shared_gain);
        d.baseline_mode = fusion_mode_from(c.get_string("fusion.mode", fusion_mode_name(d.baseline_mode)));
        d.infer_target = mu_target_from(c.get_string("fusion.infer_target", mu_target_name(d.infer_target)));
        d.ger.d_model = c.get_int("ger.d_model", d.ger.d_model);
        d.ger.n_layers = c.get_int("ger.n_layers", d.ger.n_layers);
        d.ger.n_heads = c.get_int("ger.n_heads", d.ger.n_heads);
        d.ger.d_ff = c.get_int("ger.d_ff", d.ger.d_ff);
        d.asr.d_enc = c.get_int("asr.d_enc", d.asr.d_enc);
        d.asr.d_dec = c.get_int("asr.d_dec", d.asr.d_dec);
        d.asr.unet_channels = c.get_int("asr.unet_channels", d.asr.unet_channels);
        d.asr.n_features = c.get_int("asr.n_features", d.asr.n_features);
        d.asr.frames_per_char = c.get_int("asr.frames_per_char", d.asr.frames_per_char);
        return d;
    }

    void to_config(Config& c) const {
        c.set("train.alpha", strfmt("%g", alpha));
        c.set("train.beta", strfmt("%g", beta));
        c.set("train.lambda", strfmt("%g", lambda));
        c.set("train.beam", strfmt("%d", beam));
        c.set("train.lr", strfmt("%g", lr));
        c.set("train.warmup_steps", strfmt("%d", warmup_steps));
        c.set("train.epochs", strfmt("%d", epochs));
        c.set("train.batch_size", strfmt("%d", batch_size));
        c.set("train.seed", strfmt("%llu", static_cast<unsigned long long>(seed)));
        c.set("train.naae_on", naae_on ? "true" : "false");
        c.set("train.hfcdf_on", hfcdf_on ? "true" : "false");
        c.set("train.rl_on", rl_on ? "true" : "false");
        c.set("train.pretrain_epochs", strfmt("%d", pretrain_epochs));
        c.set("train.pretrain_lr", strfmt("%g", pretrain_lr));
        c.set("train.two_stage", two_stage ? "true" : "false");
        c.set("train.max_utterances", strfmt("%d", max_utterances));
        c.set("train.max_eval_utterances", strfmt("%d", max_eval_utterances));
        c.set("train.d_embed", strfmt("%d", d_embed));
        c.set("fusion.k", strfmt("%g", k));
        c.set("fusion.k_t", strfmt("%g", k_t_variant));
        c.set("fusion.shared_gain", shared_gain ? "true" : "false");
        c.set("fusion.mode", fusion_mode_name(baseline_mode));
        c.set("fusion.infer_target", mu_target_name(infer_target));
        c.set("ger.d_model", strfmt("%d", ger.d_model));
        c.set("ger.n_layers", strfmt("%d", ger.n_layers));
        c.set("ger.n_heads", strfmt("%d", ger.n_heads));
        c.set("ger.d_ff", strfmt("%d", ger.d_ff));
        c.set("asr.d_enc", strfmt("%d", asr.d_enc));
        c.set("asr.d_dec", strfmt("%d", asr.d_dec));
        c.set("asr.unet_channels", strfmt("%d", asr.unet_channels));
        c.set("asr.n_features", strfmt("%d", asr.n_features));
        c.set("asr.frames_per_char", strfmt("%d", asr.frames_per_char));
    }
};

// ---------------------------------------------------------------------------
// Loss combination.
// ---------------------------------------------------------------------------

struct LossBreakdown {
    double llm = 0.0;
    double asr = 0.0;
    double rl = 0.0;
    double total = 0.0;
};

inline double scalar_value(Var v) {
    if (v.val().numel() != 1) fail(strfmt("expected a scalar, got %s", v.val().shape_str().c_str()));
    return v.val().values()[0];
}

// Weighted sum over the enabled components.  A disabled component (switch
// off, or weight zero) is omitted entirely rather than multiplied by zero.
inline double total_loss(const LossBreakdown& parts, const TrainConfig& cfg) {
    if (cfg.alpha < 0.0) fail(strfmt("total loss: alpha must be nonnegative, got %g", cfg.alpha));
    if (cfg.beta < 0.0) fail(strfmt("total loss: beta must be nonnegative, got %g", cfg.beta));
    double total = parts.llm;
    if (cfg.naae_on && cfg.alpha != 0.0) total += cfg.alpha * parts.asr;
    if (cfg.rl_on && cfg.beta != 0.0) total += cfg.beta * parts.rl;
    return total;
}

// Graph-level counterpart over one utterance's component losses.  Omitted
// components never enter the graph, so they receive no gradient.
inline Var total_loss_var(Tape& t, const UttForward& f, const TrainConfig& cfg,
                          LossBreakdown* parts = nullptr) {
    if (cfg.alpha < 0.0) fail(strfmt("total loss: alpha must be nonnegative, got %g", cfg.alpha));
    if (cfg.beta < 0.0) fail(strfmt("total loss: beta must be nonnegative, got %g", cfg.beta));
    Var total = f.llm;
    if (f.asr.has_value() && cfg.naae_on && cfg.alpha != 0.0)
        total = t.add(total, t.scale(cfg.alpha, *f.asr));
    if (f.rl.has_value() && cfg.rl_on && cfg.beta != 0.0)
        total = t.add(total, t.scale(cfg.beta, *f.rl));
    if (parts != nullptr) {
        parts->llm = scalar_value(f.llm);
        parts->asr = f.asr.has_value() ? scalar_value(*f.asr) : 0.0;
        parts->rl = f.rl.has_value() ? scalar_value(*f.rl) : 0.0;
        parts->total = scalar_value(total);
    }
    return total;
}

inline void check_loss_accounting(const LossBreakdown& parts, const TrainConfig& cfg) {
    const double recomputed = total_loss(parts, cfg);
    if (std::abs(recomputed - parts.total) > 1e-10)
        fail(strfmt("loss accounting: logged total %.17g differs from recomputed %.17g",
                    parts.total, recomputed));
}

// ---------------------------------------------------------------------------
// Optimizer: Adam with moments (0.9, 0.999), eps 1e-8, linear warmup, and
// global-norm clipping.  Parameters whose trainable flag is off are skipped
// entirely (no moment decay), so freezes are exact.
// ---------------------------------------------------------------------------

class Adam {
public:
    Adam(std::vector<Parameter*> params, double lr, int warmup_steps, double clip_norm = 5.0)
        : params_(std::move(params)), lr_(lr), warmup_(warmup_steps), clip_(clip_norm) {
        if (lr_ < 0.0) fail("adam: learning rate must be nonnegative");
        if (warmup_ < 0) fail("adam: warmup must be nonnegative");
        if (clip_ <= 0.0) fail("adam: clip norm must be positive");
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (auto* p : params_) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

    long long steps_taken() const { return step_; }

    // Linear warmup: lr scaled by s/warmup for steps before the warmup ends
    // (steps are 1-indexed), constant afterwards.
    double effective_lr(long long s) const {
        if (warmup_ > 0 && s < warmup_)
            return lr_ * static_cast<double>(s) / static_cast<double>(warmup_);
        return lr_;
    }

    // Applies the accumulated gradients; returns true if clipping triggered.
    bool step() {
        ++step_;
        double norm_sq = 0.0;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (!params_[i]->trainable) continue;
            for (double g : params_[i]->grad.values()) norm_sq += g * g;
        }
        const double norm = std::sqrt(norm_sq);
        const bool clipped = norm > clip_;
        const double cs = clipped ? clip_ / norm : 1.0;
        if (clipped)
            log_info(strfmt("adam step %lld: gradient norm %.4f clipped to %.1f",
                            static_cast<long long>(step_), norm, clip_));

        const double eff = effective_lr(step_);
        const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Parameter* p = params_[i];
            if (!p->trainable) continue;
            auto& m = m_[i].values();
            auto& v = v_[i].values();
            auto& val = p->value.values();
            const auto& grad = p->grad.values();
            for (std::size_t j = 0; j < val.size(); ++j) {
                const double g = cs * grad[j];
                m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g;
                v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g * g;
                const double delta = eff * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + kEps);
                if (delta != 0.0) val[j] -= delta;
            }
        }
        return clipped;
    }

    void to_entries(CheckpointEntries& entries) const {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            entries["__adam_m/" + params_[i]->name] = m_[i];
            entries["__adam_v/" + params_[i]->name] = v_[i];
        }
        entries["__step"] = Tensor::scalar(static_cast<double>(step_));
    }

    void from_entries(const CheckpointEntries& entries) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const std::string name = params_[i]->name;
            auto im = entries.find("__adam_m/" + name);
            auto iv = entries.find("__adam_v/" + name);
            if (im == entries.end() || iv == entries.end())
                fail(strfmt("checkpoint has no optimizer state for '%s'", name.c_str()));
            if (im->second.shape() != m_[i].shape() || iv->second.shape() != v_[i].shape())
                fail(strfmt("optimizer state for '%s' has the wrong shape", name.c_str()));
            m_[i] = im->second;
            v_[i] = iv->second;
        }
        auto is = entries.find("__step");
        if (is == entries.end()) fail("checkpoint has no optimizer step counter");
        step_ = static_cast<long long>(is->second.values()[0]);
    }

    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

private:
    std::vector<Parameter*> params_;
    std::vector<Tensor> m_, v_;
    double lr_;
    int warmup_;
    double clip_;
    long long step_ = 0;
};

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

struct WerPair {
    double baseline = 0.0;
    double corrected = 0.0;
};

struct EpochEval {
    WerPair in, out, clean;
};

struct EpochLog {
    int epoch = 0;  // 1-based
    LossBreakdown mean_loss;
    EpochEval eval;
    int clip_events = 0;
    double eff_lr_end = 0.0;
    double wall_seconds = 0.0;
};

struct TrainReport {
    EpochEval initial;  // evaluated before the first main-loop epoch
    std::vector<EpochLog> epochs;
    long long total_params = 0;
    long long trainable_params = 0;
    int resumed_from_epoch = 0;  // 0 = fresh run
    double wall_seconds = 0.0;

    double initial_wer_in() const { return initial.in.corrected; }
    double final_wer_in() const {
        return epochs.empty() ? initial.in.corrected : epochs.back().eval.in.corrected;
    }
    const EpochEval& final_eval() const { return epochs.empty() ? initial : epochs.back().eval; }

    // Everything except wall-clock timing, at full precision; two runs with
    // the same seed must produce identical strings.
    std::string deterministic_text() const {
        std::ostringstream os;
        os << strfmt("params total=%lld trainable=%lld resumed_from=%d\n", total_params,
                     trainable_params, resumed_from_epoch);
        const auto ev_line = [](const char* tag, const EpochEval& e) {
            return strfmt("%s in=%.17g/%.17g out=%.17g/%.17g clean=%.17g/%.17g\n", tag,
                          e.in.baseline, e.in.corrected, e.out.baseline, e.out.corrected,
                          e.clean.baseline, e.clean.corrected);
        };
        os << ev_line("initial", initial);
        for (const auto& ep : epochs) {
            os << strfmt("epoch %d llm=%.17g asr=%.17g rl=%.17g total=%.17g clip=%d lr=%.17g\n",
                         ep.epoch, ep.mean_loss.llm, ep.mean_loss.asr, ep.mean_loss.rl,
                         ep.mean_loss.total, ep.clip_events, ep.eff_lr_end);
            os << ev_line(strfmt("epoch %d", ep.epoch).c_str(), ep.eval);
        }
        return os.str();
    }

    std::string text_table() const {
        std::ostringstream os;
        os << strfmt("%-6s %10s %10s %10s %10s %8s %8s %8s\n", "epoch", "L_LLM", "L_ASR", "L_RL",
                     "total", "WER in%", "out%", "clean%");
        os << strfmt("%-6s %10s %10s %10s %10s %8.2f %8.2f %8.2f\n", "init", "-", "-", "-", "-",
                     100.0 * initial.in.corrected, 100.0 * initial.out.corrected,
                     100.0 * initial.clean.corrected);
        for (const auto& ep : epochs)
            os << strfmt("%-6d %10.4f %10.4f %10.4f %10.4f %8.2f %8.2f %8.2f\n", ep.epoch,
                         ep.mean_loss.llm, ep.mean_loss.asr, ep.mean_loss.rl, ep.mean_loss.total,
                         100.0 * ep.eval.in.corrected, 100.0 * ep.eval.out.corrected,
                         100.0 * ep.eval.clean.corrected);
        os << strfmt("wall seconds: %.1f; params %lld (%lld trainable)\n", wall_seconds,
                     total_params, trainable_params);
        return os.str();
    }
};

struct TrainHooks {
    std::string checkpoint_path;  // saved after every epoch when nonempty
    std::string resume_path;      // checkpoint to restore before training
    const CheckpointEntries* recognizer_snapshot = nullptr;  // reuse a prepared recognizer
    CheckpointEntries* capture_recognizer = nullptr;         // receive the prepared recognizer
};

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

namespace detail {

inline double wall_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void abort_if_nonfinite(Tape& t, double total, const char* phase, int epoch, int batch) {
    if (std::isfinite(total)) return;
    const int id = t.first_nonfinite();
    fail(strfmt("%s diverged at epoch %d, batch %d: first non-finite node is %s", phase, epoch,
                batch, id >= 0 ? t.describe(id).c_str() : "(not in the graph)"));
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch,
                                            std::uint64_t salt) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(seed, salt + static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    return order;
}

inline std::size_t capped(std::size_t n, int cap) {
    return cap > 0 ? std::min(n, static_cast<std::size_t>(cap)) : n;
}

// Supervised warm start of the recognizer on clean frames (pure CE).
inline void prepare_recognizer(DenoisingGerModel& model, const CorpusSplit& split,
                               const TrainConfig& cfg) {
    NaaeModel& asr = model.asr();
    asr.set_mode(FinetuneMode::full_ft);
    std::vector<Parameter*> targets;
    for (auto* p : asr.params())
        if (p->trainable) targets.push_back(p);
    Adam opt(targets, cfg.pretrain_lr, 0);

    const std::size_t n = capped(split.utts.size(), cfg.max_utterances);
    for (int epoch = 1; epoch <= cfg.pretrain_epochs; ++epoch) {
        const auto order = epoch_order(n, cfg.seed, epoch, 0xa11c5ull);
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            const double bn = static_cast<double>(stop - start);
            for (auto* p : targets) p->zero_grad();
            for (std::size_t i = start; i < stop; ++i) {
                const Utterance& utt = split.utts[order[i]];
                Tape t;
                Var x = t.constant(utt.clean_frames);
                Var loss = asr.asr_loss(t, x, x, model.tokenizer().encode_delimited(utt.transcript),
                                        1.0);
                abort_if_nonfinite(t, scalar_value(loss), "recognizer preparation", epoch,
                                   static_cast<int>(start / cfg.batch_size));
                t.backward(t.scale(1.0 / bn, loss));
            }
            opt.step();
        }
    }
    model.apply_toggles();
}

// Two-stage schedule: restrict training to the acoustic side for the first
// half of the epochs, then to the corrector side.  Applied on top of the
// stage switches so disabled stages stay disabled.
inline void apply_stage_freeze(DenoisingGerModel& model, const TrainConfig& cfg, int epoch) {
    model.apply_toggles();
    if (!cfg.two_stage) return;
    const bool acoustic_stage = epoch <= (cfg.epochs + 1) / 2;
    for (auto* p : model.params()) {
        const bool acoustic = p->name.rfind("adapter.", 0) == 0 ||
                              p->name.rfind("base.", 0) == 0 || p->name.rfind("dec.", 0) == 0;
        if (acoustic != acoustic_stage) p->trainable = false;
    }
}

}  // namespace detail

inline TrainReport train(DenoisingGerModel& model, const Corpus& corpus, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}) {
    cfg.validate();
    if (corpus.train.utts.empty()) fail("train: train split is empty");
    const auto t0 = std::chrono::steady_clock::now();

    TrainReport report;
    for (auto* p : model.params()) report.total_params += static_cast<long long>(p->numel());

    int start_epoch = 0;
    if (!hooks.resume_path.empty()) {
        const CheckpointEntries entries = load_checkpoint(hooks.resume_path);
        model.load_entries(entries);
        auto it = entries.find("__epoch");
        if (it == entries.end()) fail("resume: checkpoint has no epoch counter");
        start_epoch = static_cast<int>(it->second.values()[0]);
        report.resumed_from_epoch = start_epoch;
    } else if (hooks.recognizer_snapshot != nullptr) {
        model.load_entries(*hooks.recognizer_snapshot);
    } else if (cfg.pretrain_epochs > 0) {
        detail::prepare_recognizer(model, corpus.train, cfg);
    }
    if (hooks.capture_recognizer != nullptr && hooks.resume_path.empty())
        *hooks.capture_recognizer = model.checkpoint_entries();

    model.apply_toggles();
    report.trainable_params = model.trainable_count();

    Adam opt(model.params(), cfg.lr, cfg.warmup_steps);
    if (!hooks.resume_path.empty()) opt.from_entries(load_checkpoint(hooks.resume_path));

    // Per-split n-best caches; valid while the acoustic path is static.
    std::vector<NBestList> nb_in, nb_out, nb_clean, nb_train;
    const auto epoch_eval = [&]() {
        if (cfg.naae_on) {
            nb_in.clear();
            nb_out.clear();
            nb_clean.clear();
        }
        EpochEval ev;
        const int cap = cfg.max_eval_utterances;
        const SplitEval a = evaluate_split(model, corpus.test_in, cap, &nb_in);
        const SplitEval b = evaluate_split(model, corpus.test_out, cap, &nb_out);
        const SplitEval c = evaluate_split(model, corpus.test_clean, cap, &nb_clean);
        ev.in = {a.pooled_wer_baseline, a.pooled_wer_corrected};
        ev.out = {b.pooled_wer_baseline, b.pooled_wer_corrected};
        ev.clean = {c.pooled_wer_baseline, c.pooled_wer_corrected};
        return ev;
    };

    report.initial = epoch_eval();

    const std::size_t n = detail::capped(corpus.train.utts.size(), cfg.max_utterances);
    const auto trainable_all = model.params();
    for (int epoch = start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
        const auto te0 = std::chrono::steady_clock::now();
        detail::apply_stage_freeze(model, cfg, epoch);

        if (nb_train.empty() || cfg.naae_on) {
            nb_train.clear();
            for (std::size_t i = 0; i < n; ++i) nb_train.push_back(model.nbest(corpus.train.utts[i]));
        }

        EpochLog log;
        log.epoch = epoch;
        LossBreakdown sums;
        std::size_t counted = 0;
        const auto order = detail::epoch_order(n, cfg.seed, epoch, 0x5e9ull);
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            const double bn = static_cast<double>(stop - start);
            for (auto* p : trainable_all) p->zero_grad();
            for (std::size_t i = start; i < stop; ++i) {
                const std::size_t idx = order[i];
                Tape t;
                const UttForward f = model.forward(t, corpus.train.utts[idx], nb_train[idx]);
                LossBreakdown parts;
                Var total = total_loss_var(t, f, cfg, &parts);
                detail::abort_if_nonfinite(t, parts.total, "training", epoch,
                                           static_cast<int>(start / cfg.batch_size));
                check_loss_accounting(parts, cfg);
                t.backward(t.scale(1.0 / bn, total));
                sums.llm += parts.llm;
                sums.asr += parts.asr;
                sums.rl += parts.rl;
                sums.total += parts.total;
                ++counted;
            }
            log.clip_events += opt.step() ? 1 : 0;
        }
        const double cn = static_cast<double>(counted);
        log.mean_loss = {sums.llm / cn, sums.asr / cn, sums.rl / cn, sums.total / cn};
        log.eff_lr_end = opt.effective_lr(opt.steps_taken());
        log.eval = epoch_eval();
        log.wall_seconds = detail::wall_since(te0);
        report.epochs.push_back(log);

        if (!hooks.checkpoint_path.empty()) {
            CheckpointEntries entries = model.checkpoint_entries();
            opt.to_entries(entries);
            entries["__epoch"] = Tensor::scalar(static_cast<double>(epoch));
            save_checkpoint(hooks.checkpoint_path, entries);
        }
    }

    model.apply_toggles();
    report.wall_seconds = detail::wall_since(t0);
    return report;
}

// ---------------------------------------------------------------------------
// Ablation matrix: the stage-switch combinations, trained with a shared
// prepared recognizer so rows differ only in what the main loop does.
// ---------------------------------------------------------------------------

struct AblationRow {
    bool naae = false;
    bool hfcdf = false;
    bool rl = false;
    TrainReport report;
};

struct AblationTable {
    std::vector<AblationRow> rows;

    static const std::array<std::array<bool, 3>, 7>& combos() {
        static const std::array<std::array<bool, 3>, 7> c = {{{false, false, false},
                                                              {true, false, false},
                                                              {false, true, false},
                                                              {false, false, true},
                                                              {true, true, false},
                                                              {false, true, true},
                                                              {true, true, true}}};
        return c;
    }

    std::string text_table() const {
        std::ostringstream os;
        os << strfmt("%-5s %-5s %-5s %10s %10s %10s\n", "naae", "hfcdf", "rl", "WER in%", "out%",
                     "clean%");
        for (const auto& r : rows) {
            const EpochEval& e = r.report.final_eval();
            os << strfmt("%-5s %-5s %-5s %10.2f %10.2f %10.2f\n", r.naae ? "yes" : "no",
                         r.hfcdf ? "yes" : "no", r.rl ? "yes" : "no", 100.0 * e.in.corrected,
                         100.0 * e.out.corrected, 100.0 * e.clean.corrected);
        }
        return os.str();
    }
};

inline AblationTable ablation_matrix(const Corpus& corpus, const TrainConfig& base_cfg) {
    AblationTable table;
    CheckpointEntries recognizer;
    bool have_recognizer = false;
    for (const auto& combo : AblationTable::combos()) {
        TrainConfig cfg = base_cfg;
        cfg.naae_on = combo[0];
        cfg.hfcdf_on = combo[1];
        cfg.rl_on = combo[2];
        DenoisingGerModel model(cfg.pipeline(), cfg.seed);
        TrainHooks hooks;
        if (have_recognizer)
            hooks.recognizer_snapshot = &recognizer;
        else
            hooks.capture_recognizer = &recognizer;
        AblationRow row;
        row.naae = combo[0];
        row.hfcdf = combo[1];
        row.rl = combo[2];
        row.report = train(model, corpus, cfg, hooks);
        have_recognizer = true;
        table.rows.push_back(std::move(row));
    }
    return table;
}

}  // namespace dger
