#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "dger/pipeline.hpp"

using namespace dger;

namespace {

CorpusConfig tiny_corpus_cfg() {
    CorpusConfig c;
    c.vocab_words = 8;
    c.word_len_min = 2;
    c.word_len_max = 3;
    c.train_utterances = 10;
    c.test_utterances = 3;
    c.utt_words_min = 2;
    c.utt_words_max = 2;
    c.frames_per_char = 2;
    c.n_features = 6;
    c.jitter = 0.03;
    return c;
}

PipelineConfig tiny_pipeline_cfg() {
    PipelineConfig p;
    p.asr.n_features = 6;
    p.asr.d_enc = 12;
    p.asr.unet_channels = 6;
    p.asr.d_dec = 12;
    p.asr.frames_per_char = 2;
    p.ger.d_model = 16;
    p.ger.n_layers = 1;
    p.ger.n_heads = 2;
    p.ger.d_ff = 24;
    p.ger.d_fused = 16;
    p.ger.d_context = 8;
    p.ger.max_len = 24;
    p.ger.max_mem = 96;
    p.d_embed = 8;
    p.beam = 3;
    return p;
}

const Corpus& tiny_corpus() {
    static const Corpus c = generate_corpus(tiny_corpus_cfg(), 0x7711);
    return c;
}

bool params_equal(DenoisingGerModel& a, DenoisingGerModel& b) {
    const auto ea = a.checkpoint_entries();
    const auto eb = b.checkpoint_entries();
    if (ea.size() != eb.size()) return false;
    for (const auto& [name, t] : ea) {
        auto it = eb.find(name);
        if (it == eb.end() || it->second.shape() != t.shape()) return false;
        for (std::size_t i = 0; i < t.numel(); ++i)
            if (it->second.values()[i] != t.values()[i]) return false;
    }
    return true;
}

double grad_abs_sum(const Parameter& p) {
    double s = 0.0;
    for (double g : p.grad.values()) s += std::abs(g);
    return s;
}

}  // namespace

TEST_CASE("pipeline config validation catches inconsistent dimensions") {
    PipelineConfig p = tiny_pipeline_cfg();
    REQUIRE_NOTHROW(p.validate());

    PipelineConfig bad = p;
    bad.ger.d_context = 7;
    REQUIRE_THROWS_WITH(bad.validate(), Catch::Matchers::ContainsSubstring("d_context"));

    bad = p;
    bad.ger.d_fused = 17;
    REQUIRE_THROWS_WITH(bad.validate(), Catch::Matchers::ContainsSubstring("d_fused"));

    bad = p;
    bad.ger.vocab_size = 30;
    REQUIRE_THROWS_WITH(bad.validate(), Catch::Matchers::ContainsSubstring("vocab"));

    bad = p;
    bad.hfcdf_on = false;
    bad.baseline_mode = FusionMode::hfcdf;
    REQUIRE_THROWS_WITH(bad.validate(), Catch::Matchers::ContainsSubstring("baseline mode"));

    bad = p;
    bad.beam = 0;
    REQUIRE_THROWS_WITH(bad.validate(), Catch::Matchers::ContainsSubstring("beam"));

    bad = p;
    bad.lambda = 1.5;
    REQUIRE_THROWS_WITH(bad.validate(), Catch::Matchers::ContainsSubstring("lambda"));
}

TEST_CASE("parameter inventory has unique names and toggle-driven trainability") {
    DenoisingGerModel model(tiny_pipeline_cfg(), 5);
    std::set<std::string> names;
    for (auto* p : model.params()) REQUIRE(names.insert(p->name).second);
    for (const char* prefix : {"adapter.", "base.", "dec.", "prefix.", "body.", "head.",
                               "glue.", "mixer."}) {
        bool found = false;
        for (const auto& n : names) found = found || n.rfind(prefix, 0) == 0;
        INFO(prefix);
        REQUIRE(found);
    }

    const auto trainable_prefixes = [&](DenoisingGerModel& m) {
        std::set<std::string> out;
        for (auto* p : m.trainable_params()) out.insert(p->name.substr(0, p->name.find('.')));
        return out;
    };

    // Default: adapter, decoder prefix and head, glue.
    auto pref = trainable_prefixes(model);
    REQUIRE(pref == std::set<std::string>{"adapter", "prefix", "head", "glue"});

    PipelineConfig off = tiny_pipeline_cfg();
    off.naae_on = false;
    DenoisingGerModel frozen(off, 5);
    pref = trainable_prefixes(frozen);
    REQUIRE(pref == std::set<std::string>{"prefix", "head", "glue"});

    PipelineConfig mix = tiny_pipeline_cfg();
    mix.hfcdf_on = false;
    mix.baseline_mode = FusionMode::transformer;
    DenoisingGerModel with_mixer(mix, 5);
    pref = trainable_prefixes(with_mixer);
    REQUIRE(pref == std::set<std::string>{"adapter", "prefix", "head", "glue", "mixer"});
}

TEST_CASE("checkpoint entries round trip into a fresh model bitwise") {
    DenoisingGerModel a(tiny_pipeline_cfg(), 5);
    DenoisingGerModel b(tiny_pipeline_cfg(), 17);
    REQUIRE_FALSE(params_equal(a, b));

    CheckpointEntries entries = a.checkpoint_entries();
    entries["__step"] = Tensor::scalar(9.0);  // reserved names are ignored
    b.load_entries(entries);
    REQUIRE(params_equal(a, b));

    CheckpointEntries missing = a.checkpoint_entries();
    missing.erase("glue.embed");
    REQUIRE_THROWS_WITH(b.load_entries(missing), Catch::Matchers::ContainsSubstring("missing"));

    CheckpointEntries extra = a.checkpoint_entries();
    extra["bogus.param"] = Tensor::scalar(1.0);
    REQUIRE_THROWS_WITH(b.load_entries(extra),
                        Catch::Matchers::ContainsSubstring("does not match"));

    CheckpointEntries reshaped = a.checkpoint_entries();
    reshaped["glue.align_b"] = Tensor({1, 2});
    REQUIRE_THROWS_WITH(b.load_entries(reshaped), Catch::Matchers::ContainsSubstring("shape"));
}

TEST_CASE("n-best lists are framed and bounded by the beam") {
    DenoisingGerModel model(tiny_pipeline_cfg(), 5);
    const Utterance& utt = tiny_corpus().train.utts.front();
    const NBestList nb = model.nbest(utt);
    REQUIRE(nb.n() >= 1);
    REQUIRE(nb.n() <= 3);
    for (const auto& h : nb.hyps) {
        REQUIRE(h.tokens.front() == Tokenizer::kBos);
        REQUIRE(h.tokens.back() == Tokenizer::kEos);
    }
    for (int i = 1; i < nb.n(); ++i)
        REQUIRE(nb.hyps[static_cast<std::size_t>(i - 1)].log_score >=
                nb.hyps[static_cast<std::size_t>(i)].log_score);
}

TEST_CASE("forward exposes exactly the components the switches enable") {
    const Utterance& utt = tiny_corpus().train.utts.front();

    DenoisingGerModel all_on(tiny_pipeline_cfg(), 5);
    {
        Tape t;
        const UttForward f = all_on.forward(t, utt, all_on.nbest(utt));
        REQUIRE(f.asr.has_value());
        REQUIRE(f.rl.has_value());
        REQUIRE(std::isfinite(f.llm.val().values()[0]));
        REQUIRE(std::isfinite(f.asr->val().values()[0]));
        REQUIRE(std::isfinite(f.rl->val().values()[0]));
    }

    PipelineConfig no_acoustic = tiny_pipeline_cfg();
    no_acoustic.naae_on = false;
    DenoisingGerModel m2(no_acoustic, 5);
    {
        Tape t;
        const UttForward f = m2.forward(t, utt, m2.nbest(utt));
        REQUIRE_FALSE(f.asr.has_value());
        REQUIRE(f.rl.has_value());
    }

    PipelineConfig no_rank = tiny_pipeline_cfg();
    no_rank.rl_on = false;
    DenoisingGerModel m3(no_rank, 5);
    {
        Tape t;
        const UttForward f = m3.forward(t, utt, m3.nbest(utt));
        REQUIRE(f.asr.has_value());
        REQUIRE_FALSE(f.rl.has_value());
    }
}

TEST_CASE("gradients reach enabled stages and never reach frozen ones") {
    const Utterance& utt = tiny_corpus().train.utts.front();

    DenoisingGerModel model(tiny_pipeline_cfg(), 5);
    for (auto* p : model.params()) p->zero_grad();
    {
        Tape t;
        const UttForward f = model.forward(t, utt, model.nbest(utt));
        Var total = t.add(f.llm, t.add(t.scale(0.2, *f.asr), t.scale(0.2, *f.rl)));
        t.backward(total);
    }
    double adapter = 0.0, glue = 0.0, head = 0.0, body = 0.0, base = 0.0, mixer = 0.0;
    for (auto* p : model.params()) {
        const double g = grad_abs_sum(*p);
        if (p->name.rfind("adapter.", 0) == 0) adapter += g;
        if (p->name.rfind("glue.", 0) == 0) glue += g;
        if (p->name.rfind("head.", 0) == 0) head += g;
        if (p->name.rfind("body.", 0) == 0) body += g;
        if (p->name.rfind("base.", 0) == 0 || p->name.rfind("dec.", 0) == 0) base += g;
        if (p->name.rfind("mixer.", 0) == 0) mixer += g;
    }
    REQUIRE(adapter > 0.0);
    REQUIRE(glue > 0.0);
    REQUIRE(head > 0.0);
    REQUIRE(body == 0.0);
    REQUIRE(base == 0.0);
    REQUIRE(mixer == 0.0);

    PipelineConfig off = tiny_pipeline_cfg();
    off.naae_on = false;
    DenoisingGerModel frozen(off, 5);
    for (auto* p : frozen.params()) p->zero_grad();
    {
        Tape t;
        const UttForward f = frozen.forward(t, utt, frozen.nbest(utt));
        t.backward(t.add(f.llm, t.scale(0.2, *f.rl)));
    }
    double acoustic = 0.0;
    for (auto* p : frozen.params())
        if (p->name.rfind("adapter.", 0) == 0 || p->name.rfind("base.", 0) == 0 ||
            p->name.rfind("dec.", 0) == 0)
            acoustic += grad_abs_sum(*p);
    REQUIRE(acoustic == 0.0);
}

TEST_CASE("every baseline fusion mode feeds the decoder") {
    const Utterance& utt = tiny_corpus().train.utts.front();
    for (const FusionMode mode : {FusionMode::concat, FusionMode::add, FusionMode::linguistic_only,
                                  FusionMode::acoustic_only, FusionMode::transformer}) {
        PipelineConfig cfg = tiny_pipeline_cfg();
        cfg.hfcdf_on = false;
        cfg.baseline_mode = mode;
        DenoisingGerModel model(cfg, 5);
        Tape t;
        const UttForward f = model.forward(t, utt, model.nbest(utt));
        INFO(fusion_mode_name(mode));
        REQUIRE(std::isfinite(f.llm.val().values()[0]));
    }
}

TEST_CASE("correction emits a framed deterministic transcript") {
    DenoisingGerModel model(tiny_pipeline_cfg(), 5);
    const Utterance& utt = tiny_corpus().test_in.utts.front();
    const GerOutput out1 = model.correct(utt);
    const GerOutput out2 = model.correct(utt);
    REQUIRE(out1.tokens == out2.tokens);
    REQUIRE(out1.tokens.front() == Tokenizer::kBos);
    REQUIRE(out1.tokens.back() == Tokenizer::kEos);
    REQUIRE_NOTHROW(model.tokenizer().decode(out1.tokens));

    PipelineConfig fixed = tiny_pipeline_cfg();
    fixed.infer_target = MuTarget::fixed;
    DenoisingGerModel mf(fixed, 5);
    REQUIRE_NOTHROW(mf.correct(utt));
}

TEST_CASE("identical seeds build identical models and losses") {
    DenoisingGerModel a(tiny_pipeline_cfg(), 23);
    DenoisingGerModel b(tiny_pipeline_cfg(), 23);
    REQUIRE(params_equal(a, b));

    const Utterance& utt = tiny_corpus().train.utts[1];
    Tape ta, tb;
    const UttForward fa = a.forward(ta, utt, a.nbest(utt));
    const UttForward fb = b.forward(tb, utt, b.nbest(utt));
    REQUIRE(fa.llm.val().values()[0] == fb.llm.val().values()[0]);
    REQUIRE(fa.asr->val().values()[0] == fb.asr->val().values()[0]);
    REQUIRE(fa.rl->val().values()[0] == fb.rl->val().values()[0]);
}
