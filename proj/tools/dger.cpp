// Command-line front end: corpus generation, training, WER evaluation,
// the stage-switch ablation matrix, single-utterance correction, and the
// gradient-check sweep.  Exit codes: 0 success, 1 runtime error, 2 usage.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dger/config.hpp"
#include "dger/corpus.hpp"
#include "dger/eval.hpp"
#include "dger/gradsuite.hpp"
#include "dger/trainer.hpp"

namespace fs = std::filesystem;
using namespace dger;

namespace {

std::vector<std::string> corpus_keys() {
    return {"corpus.vocab_words",      "corpus.word_len_min",  "corpus.word_len_max",
            "corpus.train_utterances", "corpus.test_utterances", "corpus.utt_words_min",
            "corpus.utt_words_max",    "corpus.frames_per_char", "corpus.n_features",
            "corpus.jitter",           "corpus.snr_min_db",    "corpus.snr_max_db"};
}

CorpusConfig corpus_from_config(const Config& c) {
    CorpusConfig d;
    d.vocab_words = c.get_int("corpus.vocab_words", d.vocab_words);
    d.word_len_min = c.get_int("corpus.word_len_min", d.word_len_min);
    d.word_len_max = c.get_int("corpus.word_len_max", d.word_len_max);
    d.train_utterances = c.get_int("corpus.train_utterances", d.train_utterances);
    d.test_utterances = c.get_int("corpus.test_utterances", d.test_utterances);
    d.utt_words_min = c.get_int("corpus.utt_words_min", d.utt_words_min);
    d.utt_words_max = c.get_int("corpus.utt_words_max", d.utt_words_max);
    d.frames_per_char = c.get_int("corpus.frames_per_char", d.frames_per_char);
    d.n_features = c.get_int("corpus.n_features", d.n_features);
    d.jitter = c.get_double("corpus.jitter", d.jitter);
    d.snr_min_db = c.get_int("corpus.snr_min_db", d.snr_min_db);
    d.snr_max_db = c.get_int("corpus.snr_max_db", d.snr_max_db);
    return d;
}

Config load_layered_config(const std::string& path, const std::vector<std::string>& sets,
                           const std::vector<std::string>& known) {
    Config c;
    if (!path.empty()) c = Config::from_file(path);
    for (const auto& kv : sets) c.apply_override(kv, known);
    return c;
}

// The recognizer's feature geometry is a property of the corpus; adopt it,
// and reject a config that pins a conflicting value.
void align_with_corpus(TrainConfig& tc, const Corpus& corpus, const Config& c) {
    const int feats = corpus.vocab.n_features;
    const int fpc = corpus.vocab.frames_per_char;
    if (c.has("asr.n_features") && tc.asr.n_features != feats)
        fail(strfmt("config asr.n_features %d conflicts with corpus features %d",
                    tc.asr.n_features, feats));
    if (c.has("asr.frames_per_char") && tc.asr.frames_per_char != fpc)
        fail(strfmt("config asr.frames_per_char %d conflicts with corpus value %d",
                    tc.asr.frames_per_char, fpc));
    tc.asr.n_features = feats;
    tc.asr.frames_per_char = fpc;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) fail(strfmt("cannot open %s for writing", path.c_str()));
    f << text;
    if (!f) fail(strfmt("write to %s failed", path.c_str()));
}

std::string tsv_escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
        if (ch == '\t' || ch == '\n') out += ' ';
        else out += ch;
    }
    return out;
}

std::string cases_tsv(const EvalReport& report) {
    std::ostringstream os;
    os << "split\tid\twer_baseline\twer_corrected\treference\tone_best\tcorrected\n";
    for (const auto& split : report.splits)
        for (const auto& c : split.cases)
            os << strfmt("%s\t%s\t%.17g\t%.17g\t%s\t%s\t%s\n", split.name.c_str(), c.id.c_str(),
                         c.wer_before, c.wer_after, tsv_escape(c.reference).c_str(),
                         tsv_escape(c.one_best).c_str(), tsv_escape(c.corrected).c_str());
    return os.str();
}

int cmd_gen(const std::string& out_dir, std::uint64_t seed, const std::string& config_path,
            const std::vector<std::string>& sets) {
    const Config c = load_layered_config(config_path, sets, corpus_keys());
    const CorpusConfig cfg = corpus_from_config(c);
    const Corpus corpus = generate_corpus(cfg, seed);
    fs::create_directories(out_dir);
    write_corpus(corpus, out_dir);
    std::printf("wrote %zu train / %zu in / %zu out / %zu clean utterances to %s\n",
                corpus.train.utts.size(), corpus.test_in.utts.size(),
                corpus.test_out.utts.size(), corpus.test_clean.utts.size(), out_dir.c_str());
    return 0;
}

int cmd_train(const std::string& corpus_dir, const std::string& out_dir,
              const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& resume_path) {
    const Config c = load_layered_config(config_path, sets, TrainConfig::known_keys());
    TrainConfig tc = TrainConfig::from_config(c);
    const Corpus corpus = read_corpus(corpus_dir);
    align_with_corpus(tc, corpus, c);
    tc.validate();

    fs::create_directories(out_dir);
    DenoisingGerModel model(tc.pipeline(), tc.seed);
    TrainHooks hooks;
    hooks.checkpoint_path = (fs::path(out_dir) / "checkpoint.ckpt").string();
    hooks.resume_path = resume_path;
    const TrainReport report = train(model, corpus, tc, hooks);

    Config effective;
    tc.to_config(effective);
    effective.save((fs::path(out_dir) / "config.ini").string());
    write_text((fs::path(out_dir) / "train_report.txt").string(), report.text_table());
    write_text((fs::path(out_dir) / "train_log.txt").string(), report.deterministic_text());
    std::fputs(report.text_table().c_str(), stdout);
    return 0;
}

int cmd_eval(const std::string& corpus_dir, const std::string& checkpoint_path,
             const std::string& out_dir, const std::string& config_path,
             const std::vector<std::string>& sets, int max_utts) {
    const Config c = load_layered_config(config_path, sets, TrainConfig::known_keys());
    TrainConfig tc = TrainConfig::from_config(c);
    const Corpus corpus = read_corpus(corpus_dir);
    align_with_corpus(tc, corpus, c);

    DenoisingGerModel model(tc.pipeline(), tc.seed);
    model.load_entries(load_checkpoint(checkpoint_path));
    const EvalReport report = evaluate(model, corpus, max_utts);

    fs::create_directories(out_dir);
    write_text((fs::path(out_dir) / "eval_report.txt").string(), report.text_table());
    write_text((fs::path(out_dir) / "cases.tsv").string(), cases_tsv(report));
    write_text((fs::path(out_dir) / "error_cases.txt").string(), error_case_dump(report));
    std::fputs(report.text_table().c_str(), stdout);
    return 0;
}

int cmd_ablate(const std::string& corpus_dir, const std::string& out_dir,
               const std::string& config_path, const std::vector<std::string>& sets) {
    const Config c = load_layered_config(config_path, sets, TrainConfig::known_keys());
    TrainConfig tc = TrainConfig::from_config(c);
    const Corpus corpus = read_corpus(corpus_dir);
    align_with_corpus(tc, corpus, c);
    tc.validate();

    const AblationTable table = ablation_matrix(corpus, tc);
    fs::create_directories(out_dir);
    write_text((fs::path(out_dir) / "ablation.txt").string(), table.text_table());
    std::ostringstream log;
    for (const auto& row : table.rows) {
        log << strfmt("--- naae=%d hfcdf=%d rl=%d ---\n", row.naae ? 1 : 0, row.hfcdf ? 1 : 0,
                      row.rl ? 1 : 0);
        log << row.report.deterministic_text();
    }
    write_text((fs::path(out_dir) / "ablation_log.txt").string(), log.str());
    std::fputs(table.text_table().c_str(), stdout);
    return 0;
}

int cmd_correct(const std::string& corpus_dir, const std::string& checkpoint_path,
                const std::string& config_path, const std::vector<std::string>& sets,
                const std::string& split_name, int index) {
    const Config c = load_layered_config(config_path, sets, TrainConfig::known_keys());
    TrainConfig tc = TrainConfig::from_config(c);
    const Corpus corpus = read_corpus(corpus_dir);
    align_with_corpus(tc, corpus, c);

    const CorpusSplit* split = nullptr;
    if (split_name == "in") split = &corpus.test_in;
    else if (split_name == "out") split = &corpus.test_out;
    else if (split_name == "clean") split = &corpus.test_clean;
    else if (split_name == "train") split = &corpus.train;
    else fail(strfmt("unknown split '%s'; expected in, out, clean, or train", split_name.c_str()));
    if (index < 0 || index >= static_cast<int>(split->utts.size()))
        fail(strfmt("index %d out of range for split '%s' with %zu utterances", index,
                    split_name.c_str(), split->utts.size()));

    DenoisingGerModel model(tc.pipeline(), tc.seed);
    model.load_entries(load_checkpoint(checkpoint_path));

    const Utterance& utt = split->utts[static_cast<std::size_t>(index)];
    const NBestList nb = model.nbest(utt);
    const std::string one_best = model.tokenizer().decode(nb.top1().tokens);
    const std::string corrected = model.tokenizer().decode(model.correct(utt, nb).tokens);
    std::printf("id:         %s\n", utt.id.c_str());
    std::printf("reference:  %s\n", utt.transcript.c_str());
    std::printf("one best:   %s   (WER %.2f%%)\n", one_best.c_str(),
                100.0 * wer(utt.transcript, one_best));
    std::printf("corrected:  %s   (WER %.2f%%)\n", corrected.c_str(),
                100.0 * wer(utt.transcript, corrected));
    for (int i = 0; i < nb.n(); ++i)
        std::printf("hyp %d:      %s   (score %.4f)\n", i + 1,
                    model.tokenizer().decode(nb.hyps[static_cast<std::size_t>(i)].tokens).c_str(),
                    nb.hyps[static_cast<std::size_t>(i)].log_score);
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& only, const std::string& corrupt) {
    std::vector<GradCheckCase> cases = gradcheck_all(seed, corrupt);
    int shown = 0, failed = 0;
    for (const auto& c : cases) {
        if (!only.empty() && c.name.find(only) == std::string::npos) continue;
        ++shown;
        if (c.passed()) {
            std::printf("pass  %-22s rel %.3e (tol %.0e)\n", c.name.c_str(), c.rel_err, c.tol);
        } else {
            std::printf("FAIL  %-22s rel %.3e (tol %.0e)\n", c.name.c_str(), c.rel_err, c.tol);
            ++failed;
        }
    }
    if (shown == 0) fail(strfmt("no gradient check matches '%s'", only.c_str()));
    std::printf("%d/%d gradient checks passed\n", shown - failed, shown);
    return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Denoising correction pipeline for a synthetic speech recognizer"};
    app.require_subcommand(1);

    std::string out_dir, corpus_dir, config_path, resume_path, checkpoint_path;
    std::string split_name = "in", only, corrupt;
    std::vector<std::string> sets;
    std::uint64_t seed = 1;
    int index = 0, max_utts = 0;

    auto* gen = app.add_subcommand("gen", "Generate a synthetic corpus");
    gen->add_option("--out", out_dir, "Output directory")->required();
    gen->add_option("--seed", seed, "Generation seed");
    gen->add_option("--config", config_path, "Config file with corpus.* keys");
    gen->add_option("--set", sets, "Override, key=value (suffix match allowed)");

    auto* tr = app.add_subcommand("train", "Train on a generated corpus");
    tr->add_option("--corpus", corpus_dir, "Corpus directory from gen")->required();
    tr->add_option("--out", out_dir, "Output directory")->required();
    tr->add_option("--config", config_path, "Config file with train.* keys");
    tr->add_option("--set", sets, "Override, key=value (suffix match allowed)");
    tr->add_option("--resume", resume_path, "Checkpoint to resume from");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint: WER matrix and cases");
    ev->add_option("--corpus", corpus_dir, "Corpus directory")->required();
    ev->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required();
    ev->add_option("--out", out_dir, "Output directory")->required();
    ev->add_option("--config", config_path, "Config the checkpoint was trained with");
    ev->add_option("--set", sets, "Override, key=value");
    ev->add_option("--max-utterances", max_utts, "Cap per split, 0 = all");

    auto* ab = app.add_subcommand("ablate", "Train the stage-switch ablation matrix");
    ab->add_option("--corpus", corpus_dir, "Corpus directory")->required();
    ab->add_option("--out", out_dir, "Output directory")->required();
    ab->add_option("--config", config_path, "Config file with train.* keys");
    ab->add_option("--set", sets, "Override, key=value");

    auto* co = app.add_subcommand("correct", "Correct one utterance and show the n-best");
    co->add_option("--corpus", corpus_dir, "Corpus directory")->required();
    co->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required();
    co->add_option("--config", config_path, "Config the checkpoint was trained with");
    co->add_option("--set", sets, "Override, key=value");
    co->add_option("--split", split_name, "Split: in, out, clean, train");
    co->add_option("--index", index, "Utterance index within the split");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    gc->add_option("--seed", seed, "Probe seed");
    gc->add_option("--only", only, "Run only checks whose name contains this");
    gc->add_option("--corrupt", corrupt, "Corrupt the named check (negative control)")
        ->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // help and version land here with code 0
    }

    try {
        if (gen->parsed()) return cmd_gen(out_dir, seed, config_path, sets);
        if (tr->parsed()) return cmd_train(corpus_dir, out_dir, config_path, sets, resume_path);
        if (ev->parsed())
            return cmd_eval(corpus_dir, checkpoint_path, out_dir, config_path, sets, max_utts);
        if (ab->parsed()) return cmd_ablate(corpus_dir, out_dir, config_path, sets);
        if (co->parsed())
            return cmd_correct(corpus_dir, checkpoint_path, config_path, sets, split_name, index);
        if (gc->parsed()) return cmd_gradcheck(seed, only, corrupt);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
