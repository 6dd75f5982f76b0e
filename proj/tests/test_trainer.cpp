#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "dger/trainer.hpp"

using namespace dger;

namespace {

CorpusConfig micro_corpus_cfg(int train_n, int test_n) {
    CorpusConfig c;
    c.vocab_words = 8;
    c.word_len_min = 2;
    c.word_len_max = 3;
    c.train_utterances = train_n;
    c.test_utterances = test_n;
    c.utt_words_min = 2;
    c.utt_words_max = 2;
    c.frames_per_char = 2;
    c.n_features = 6;
    c.jitter = 0.03;
    return c;
}

TrainConfig micro_train_cfg() {
    TrainConfig cfg;
    cfg.asr.n_features = 6;
    cfg.asr.d_enc = 12;
    cfg.asr.unet_channels = 6;
    cfg.asr.d_dec = 12;
    cfg.asr.frames_per_char = 2;
    cfg.ger.d_model = 16;
    cfg.ger.n_layers = 1;
    cfg.ger.n_heads = 2;
    cfg.ger.d_ff = 24;
    cfg.ger.max_len = 24;
    cfg.ger.max_mem = 96;
    cfg.d_embed = 8;
    cfg.beam = 2;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    cfg.warmup_steps = 3;
    cfg.pretrain_epochs = 2;
    cfg.pretrain_lr = 3e-3;
    cfg.seed = 11;
    return cfg;
}

const Corpus& micro_corpus() {
    static const Corpus c = generate_corpus(micro_corpus_cfg(8, 2), 0x77);
    return c;
}

bool entries_equal(const CheckpointEntries& a, const CheckpointEntries& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, t] : a) {
        auto it = b.find(name);
        if (it == b.end() || it->second.shape() != t.shape()) return false;
        for (std::size_t i = 0; i < t.numel(); ++i)
            if (it->second.values()[i] != t.values()[i]) return false;
    }
    return true;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (a.values()[i] != b.values()[i]) return false;
    return true;
}

struct TempPath {
    std::string path;
    explicit TempPath(const char* tag)
        : path(std::string("/tmp/dger_trainer_") + tag + ".ckpt") {}
    ~TempPath() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("total loss combines the enabled components with their weights") {
    TrainConfig cfg;
    cfg.alpha = 0.2;
    cfg.beta = 0.2;
    LossBreakdown parts{1.0, 0.5, 0.1, 0.0};

    REQUIRE(std::abs(total_loss(parts, cfg) - 1.12) <= 1e-12);

    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    REQUIRE(total_loss(parts, cfg) == parts.llm);

    cfg.alpha = 0.2;
    cfg.beta = 0.2;
    cfg.naae_on = false;
    REQUIRE(std::abs(total_loss(parts, cfg) - 1.02) <= 1e-12);
    cfg.naae_on = true;
    cfg.rl_on = false;
    REQUIRE(std::abs(total_loss(parts, cfg) - 1.10) <= 1e-12);

    cfg.alpha = -0.1;
    REQUIRE_THROWS_WITH(total_loss(parts, cfg),
                        Catch::Matchers::ContainsSubstring("nonnegative"));
}

TEST_CASE("graph total matches the scalar total and gates components identically") {
    Tape t;
    UttForward f{t.constant(Tensor::scalar(1.0)), t.constant(Tensor::scalar(0.5)),
                 t.constant(Tensor::scalar(0.1)), NBestList{}};

    TrainConfig cfg;
    cfg.alpha = 0.2;
    cfg.beta = 0.2;
    LossBreakdown parts;
    Var total = total_loss_var(t, f, cfg, &parts);
    REQUIRE(std::abs(total.item() - 1.12) <= 1e-12);
    REQUIRE(parts.llm == 1.0);
    REQUIRE(parts.asr == 0.5);
    REQUIRE(parts.rl == 0.1);
    REQUIRE(parts.total == total.item());
    REQUIRE_NOTHROW(check_loss_accounting(parts, cfg));

    parts.total += 1e-6;
    REQUIRE_THROWS_WITH(check_loss_accounting(parts, cfg),
                        Catch::Matchers::ContainsSubstring("loss accounting"));

    // Zero weight drops the term from the graph entirely.
    cfg.alpha = 0.0;
    REQUIRE(total_loss_var(t, f, cfg).item() == t.add(f.llm, t.scale(0.2, *f.rl)).item());

    // A switched-off component is dropped even when present in the forward.
    cfg.alpha = 0.2;
    cfg.naae_on = false;
    cfg.rl_on = false;
    LossBreakdown gated;
    REQUIRE(total_loss_var(t, f, cfg, &gated).item() == 1.0);
    REQUIRE_NOTHROW(check_loss_accounting(gated, cfg));

    // Absent components are fine with the switches on.
    UttForward bare{t.constant(Tensor::scalar(2.0)), std::nullopt, std::nullopt, NBestList{}};
    cfg.naae_on = true;
    cfg.rl_on = true;
    REQUIRE(total_loss_var(t, bare, cfg).item() == 2.0);
}

TEST_CASE("warmup scales the learning rate linearly then holds it constant") {
    Adam opt({}, 0.01, 10);
    REQUIRE(opt.effective_lr(1) == 0.001);
    REQUIRE(opt.effective_lr(5) == 0.005);
    REQUIRE(opt.effective_lr(9) == 0.01 * 9.0 / 10.0);
    REQUIRE(opt.effective_lr(10) == 0.01);
    REQUIRE(opt.effective_lr(1000) == 0.01);

    Adam flat({}, 0.02, 0);
    REQUIRE(flat.effective_lr(1) == 0.02);
    REQUIRE(flat.effective_lr(100) == 0.02);
}

TEST_CASE("the first optimizer step moves a weight by roughly the learning rate") {
    Parameter p("w", Tensor::scalar(2.0));
    p.grad.values()[0] = 0.5;
    Adam opt({&p}, 0.01, 0);
    opt.step();
    REQUIRE(std::abs(p.value.values()[0] - 1.99) <= 1e-9);
    REQUIRE(opt.steps_taken() == 1);
}

TEST_CASE("a zero learning rate leaves weights bitwise untouched") {
    Parameter p("w", Tensor({1, 2}, {1.5, -0.0}));
    const Tensor before = p.value;
    p.grad.values()[0] = 3.0;
    p.grad.values()[1] = 4.0;
    Adam opt({&p}, 0.0, 0);
    opt.step();
    REQUIRE(tensors_equal(p.value, before));
}

TEST_CASE("frozen parameters are skipped including their moments") {
    Parameter p("w", Tensor::scalar(2.0), /*train=*/false);
    p.grad.values()[0] = 0.5;
    Adam opt({&p}, 0.01, 0);
    opt.step();
    REQUIRE(p.value.values()[0] == 2.0);
    CheckpointEntries entries;
    opt.to_entries(entries);
    REQUIRE(entries.at("__adam_m/w").values()[0] == 0.0);
    REQUIRE(entries.at("__adam_v/w").values()[0] == 0.0);
}

TEST_CASE("clipping triggers strictly above the norm threshold") {
    Parameter p("w", Tensor({1, 2}, {0.0, 0.0}));
    Adam opt({&p}, 0.01, 0);

    p.grad.values()[0] = 3.0;
    p.grad.values()[1] = 4.0;  // norm exactly 5
    REQUIRE_FALSE(opt.step());

    p.grad.values()[0] = 30.0;
    p.grad.values()[1] = 40.0;  // norm 50
    REQUIRE(opt.step());
}

TEST_CASE("optimizer state round trips through checkpoint entries") {
    Parameter a1("a", Tensor({1, 2}, {1.0, -2.0}));
    Parameter b1("b", Tensor::scalar(0.5));
    Adam oa({&a1, &b1}, 0.01, 5);
    const auto set_grads = [](Parameter& a, Parameter& b) {
        a.grad.values()[0] = 0.3;
        a.grad.values()[1] = -0.7;
        b.grad.values()[0] = 1.1;
    };
    for (int i = 0; i < 3; ++i) {
        set_grads(a1, b1);
        oa.step();
    }
    CheckpointEntries entries;
    oa.to_entries(entries);
    REQUIRE(entries.at("__step").values()[0] == 3.0);

    Parameter a2("a", a1.value);
    Parameter b2("b", b1.value);
    Adam ob({&a2, &b2}, 0.01, 5);
    ob.from_entries(entries);

    set_grads(a1, b1);
    set_grads(a2, b2);
    oa.step();
    ob.step();
    REQUIRE(tensors_equal(a1.value, a2.value));
    REQUIRE(tensors_equal(b1.value, b2.value));

    entries.erase("__adam_m/a");
    Adam oc({&a2, &b2}, 0.01, 5);
    REQUIRE_THROWS_WITH(oc.from_entries(entries),
                        Catch::Matchers::ContainsSubstring("optimizer state"));
    CheckpointEntries stepless;
    oa.to_entries(stepless);
    stepless.erase("__step");
    REQUIRE_THROWS_WITH(oc.from_entries(stepless),
                        Catch::Matchers::ContainsSubstring("step counter"));
}

TEST_CASE("a short training run produces a coherent report") {
    const TrainConfig cfg = micro_train_cfg();
    DenoisingGerModel model(cfg.pipeline(), cfg.seed);
    const TrainReport report = train(model, micro_corpus(), cfg);

    REQUIRE(report.epochs.size() == 1);
    REQUIRE(report.total_params > 0);
    REQUIRE(report.trainable_params > 0);
    REQUIRE(report.trainable_params < report.total_params);
    REQUIRE(report.resumed_from_epoch == 0);
    REQUIRE(report.wall_seconds < 60.0);

    const EpochLog& ep = report.epochs.front();
    REQUIRE(ep.epoch == 1);
    const double recombined =
        ep.mean_loss.llm + cfg.alpha * ep.mean_loss.asr + cfg.beta * ep.mean_loss.rl;
    REQUIRE(std::abs(ep.mean_loss.total - recombined) <= 1e-9);
    REQUIRE(ep.eff_lr_end > 0.0);

    for (const WerPair* w : {&ep.eval.in, &ep.eval.out, &ep.eval.clean}) {
        REQUIRE(w->baseline >= 0.0);
        REQUIRE(w->corrected >= 0.0);
        REQUIRE(std::isfinite(w->corrected));
    }
    REQUIRE_FALSE(report.deterministic_text().empty());
    REQUIRE_FALSE(report.text_table().empty());
}

TEST_CASE("training is deterministic given the seed") {
    const TrainConfig cfg = micro_train_cfg();
    DenoisingGerModel m1(cfg.pipeline(), cfg.seed);
    DenoisingGerModel m2(cfg.pipeline(), cfg.seed);
    const TrainReport r1 = train(m1, micro_corpus(), cfg);
    const TrainReport r2 = train(m2, micro_corpus(), cfg);
    REQUIRE(r1.deterministic_text() == r2.deterministic_text());
    REQUIRE(entries_equal(m1.checkpoint_entries(), m2.checkpoint_entries()));
}

TEST_CASE("a zero learning rate without preparation changes nothing") {
    TrainConfig cfg = micro_train_cfg();
    cfg.lr = 0.0;
    cfg.pretrain_epochs = 0;
    DenoisingGerModel model(cfg.pipeline(), cfg.seed);
    const CheckpointEntries before = model.checkpoint_entries();
    train(model, micro_corpus(), cfg);
    REQUIRE(entries_equal(before, model.checkpoint_entries()));
}

TEST_CASE("with the acoustic stage off its weights stay bitwise constant") {
    TrainConfig cfg = micro_train_cfg();
    cfg.naae_on = false;
    cfg.pretrain_epochs = 0;
    DenoisingGerModel model(cfg.pipeline(), cfg.seed);
    const CheckpointEntries before = model.checkpoint_entries();
    train(model, micro_corpus(), cfg);
    const CheckpointEntries after = model.checkpoint_entries();

    bool corrector_moved = false;
    for (const auto& [name, t] : after) {
        const bool acoustic = name.rfind("adapter.", 0) == 0 || name.rfind("base.", 0) == 0 ||
                              name.rfind("dec.", 0) == 0;
        if (acoustic) {
            INFO(name);
            REQUIRE(tensors_equal(t, before.at(name)));
        } else if (!tensors_equal(t, before.at(name))) {
            corrector_moved = true;
        }
    }
    REQUIRE(corrector_moved);
}

TEST_CASE("the two stage schedule trains only the acoustic side first") {
    TrainConfig cfg = micro_train_cfg();
    cfg.two_stage = true;
    cfg.epochs = 1;  // one epoch means only the acoustic stage runs
    cfg.pretrain_epochs = 1;
    DenoisingGerModel model(cfg.pipeline(), cfg.seed);
    CheckpointEntries prepared;
    TrainHooks hooks;
    hooks.capture_recognizer = &prepared;
    train(model, micro_corpus(), cfg, hooks);
    const CheckpointEntries after = model.checkpoint_entries();

    bool adapter_moved = false;
    for (const auto& [name, t] : after) {
        const bool acoustic = name.rfind("adapter.", 0) == 0 || name.rfind("base.", 0) == 0 ||
                              name.rfind("dec.", 0) == 0;
        if (!acoustic) {
            INFO(name);
            REQUIRE(tensors_equal(t, prepared.at(name)));
        } else if (!tensors_equal(t, prepared.at(name))) {
            adapter_moved = true;
        }
    }
    REQUIRE(adapter_moved);
}

TEST_CASE("a poisoned weight aborts training with a diagnostic") {
    TrainConfig cfg = micro_train_cfg();
    cfg.pretrain_epochs = 0;
    DenoisingGerModel model(cfg.pipeline(), cfg.seed);
    for (auto* p : model.params())
        if (p->name == "head.w") p->value.values()[0] = std::nan("");
    REQUIRE_THROWS_WITH(train(model, micro_corpus(), cfg),
                        Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("resuming from a checkpoint reproduces the straight-through run") {
    TrainConfig cfg = micro_train_cfg();
    cfg.epochs = 2;
    cfg.pretrain_epochs = 1;

    TempPath straight("straight"), half("half"), resumed("resumed");

    {
        DenoisingGerModel model(cfg.pipeline(), cfg.seed);
        TrainHooks hooks;
        hooks.checkpoint_path = straight.path;
        train(model, micro_corpus(), cfg, hooks);
    }
    {
        TrainConfig one = cfg;
        one.epochs = 1;
        DenoisingGerModel model(one.pipeline(), one.seed);
        TrainHooks hooks;
        hooks.checkpoint_path = half.path;
        train(model, micro_corpus(), one, hooks);
    }
    {
        DenoisingGerModel model(cfg.pipeline(), cfg.seed);
        TrainHooks hooks;
        hooks.resume_path = half.path;
        hooks.checkpoint_path = resumed.path;
        const TrainReport report = train(model, micro_corpus(), cfg, hooks);
        REQUIRE(report.resumed_from_epoch == 1);
        REQUIRE(report.epochs.size() == 1);
        REQUIRE(report.epochs.front().epoch == 2);
    }

    const CheckpointEntries a = load_checkpoint(straight.path);
    const CheckpointEntries b = load_checkpoint(resumed.path);
    REQUIRE(entries_equal(a, b));
    REQUIRE(a.at("__epoch").values()[0] == 2.0);
}

TEST_CASE("the ablation matrix covers the switch combinations deterministically") {
    const Corpus corpus = generate_corpus(micro_corpus_cfg(6, 2), 0x55);
    TrainConfig cfg = micro_train_cfg();
    cfg.pretrain_epochs = 1;
    cfg.max_eval_utterances = 2;

    const AblationTable table = ablation_matrix(corpus, cfg);
    REQUIRE(table.rows.size() == 7);
    const auto& combos = AblationTable::combos();
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        REQUIRE(table.rows[i].naae == combos[i][0]);
        REQUIRE(table.rows[i].hfcdf == combos[i][1]);
        REQUIRE(table.rows[i].rl == combos[i][2]);
        REQUIRE(table.rows[i].report.epochs.size() == 1);
    }
    REQUIRE_FALSE(table.text_table().empty());

    // The first row (every switch off) must match a standalone run that
    // prepares its own recognizer the same way.
    TrainConfig off = cfg;
    off.naae_on = false;
    off.hfcdf_on = false;
    off.rl_on = false;
    DenoisingGerModel model(off.pipeline(), off.seed);
    const TrainReport standalone = train(model, corpus, off);
    REQUIRE(standalone.deterministic_text() == table.rows[0].report.deterministic_text());
}

TEST_CASE("train config survives the config file round trip") {
    TrainConfig cfg = micro_train_cfg();
    cfg.naae_on = false;
    cfg.baseline_mode = FusionMode::transformer;
    cfg.infer_target = MuTarget::fixed;
    cfg.two_stage = true;
    cfg.alpha = 0.35;

    Config c;
    cfg.to_config(c);
    const TrainConfig back = TrainConfig::from_config(c);
    REQUIRE(back.alpha == cfg.alpha);
    REQUIRE(back.naae_on == cfg.naae_on);
    REQUIRE(back.baseline_mode == cfg.baseline_mode);
    REQUIRE(back.infer_target == cfg.infer_target);
    REQUIRE(back.two_stage == cfg.two_stage);
    REQUIRE(back.beam == cfg.beam);
    REQUIRE(back.lr == cfg.lr);
    REQUIRE(back.warmup_steps == cfg.warmup_steps);
    REQUIRE(back.seed == cfg.seed);
    REQUIRE(back.d_embed == cfg.d_embed);
    REQUIRE(back.asr.d_enc == cfg.asr.d_enc);
    REQUIRE(back.ger.d_model == cfg.ger.d_model);

    // Every emitted key is announced as known.
    const auto known = TrainConfig::known_keys();
    for (const auto& [key, value] : c.values()) {
        INFO(key);
        REQUIRE(std::find(known.begin(), known.end(), key) != known.end());
    }
}

TEST_CASE("train rejects an empty corpus and bad settings") {
    TrainConfig cfg = micro_train_cfg();
    DenoisingGerModel model(cfg.pipeline(), cfg.seed);
    Corpus empty;
    empty.vocab = micro_corpus().vocab;
    REQUIRE_THROWS_WITH(train(model, empty, cfg), Catch::Matchers::ContainsSubstring("empty"));

    TrainConfig bad = cfg;
    bad.epochs = 0;
    REQUIRE_THROWS_WITH(train(model, micro_corpus(), bad),
                        Catch::Matchers::ContainsSubstring("epochs"));
}
