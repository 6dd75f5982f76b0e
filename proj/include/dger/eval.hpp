#pragma once

#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

#include "dger/pipeline.hpp"

namespace dger {

// ===========================================================================
// Evaluation harness: per-utterance records of what the recognizer said and
// what the corrector made of it, aggregated into per-split word error rates.
// Every aggregate is recomputable from the records it summarizes.
// ===========================================================================

struct CaseRecord {
    std::string id;
    std::string reference;
    std::string one_best;
    std::string corrected;
    double wer_before = 0.0;
    double wer_after = 0.0;
};

struct SplitEval {
    std::string name;
    std::vector<CaseRecord> cases;
    double mean_wer_baseline = 0.0;
    double mean_wer_corrected = 0.0;
    double pooled_wer_baseline = 0.0;
    double pooled_wer_corrected = 0.0;
    long long ref_words = 0;
    long long edits_baseline = 0;
    long long edits_corrected = 0;

    // corrected minus baseline; negative when correction helps
    double delta_pooled() const { return pooled_wer_corrected - pooled_wer_baseline; }
    double delta_mean() const { return mean_wer_corrected - mean_wer_baseline; }
};

// Fills the aggregate fields from the case records.
inline void finalize_split(SplitEval& s) {
    if (s.cases.empty()) fail(strfmt("eval split '%s': no cases", s.name.c_str()));
    double mean_b = 0.0, mean_c = 0.0;
    s.ref_words = 0;
    s.edits_baseline = 0;
    s.edits_corrected = 0;
    for (const auto& c : s.cases) {
        const auto ref = split_words(c.reference);
        if (ref.empty()) fail(strfmt("eval case '%s': empty reference", c.id.c_str()));
        s.ref_words += static_cast<long long>(ref.size());
        s.edits_baseline += edit_alignment(ref, split_words(c.one_best)).edits();
        s.edits_corrected += edit_alignment(ref, split_words(c.corrected)).edits();
        mean_b += c.wer_before;
        mean_c += c.wer_after;
    }
    const double n = static_cast<double>(s.cases.size());
    s.mean_wer_baseline = mean_b / n;
    s.mean_wer_corrected = mean_c / n;
    s.pooled_wer_baseline = static_cast<double>(s.edits_baseline) / static_cast<double>(s.ref_words);
    s.pooled_wer_corrected = static_cast<double>(s.edits_corrected) / static_cast<double>(s.ref_words);
}

struct EvalReport {
    std::vector<SplitEval> splits;

    const SplitEval& split(const std::string& name) const {
        for (const auto& s : splits)
            if (s.name == name) return s;
        fail(strfmt("eval report: no split named '%s'", name.c_str()));
    }

    // Baseline/corrected pooled WER matrix over the splits, with deltas.
    std::string text_table() const {
        std::ostringstream os;
        os << strfmt("%-12s %14s %14s %10s\n", "split", "baseline WER%", "corrected WER%", "delta pp");
        for (const auto& s : splits)
            os << strfmt("%-12s %14.2f %14.2f %+10.2f\n", s.name.c_str(),
                         100.0 * s.pooled_wer_baseline, 100.0 * s.pooled_wer_corrected,
                         100.0 * s.delta_pooled());
        os << strfmt("%-12s %14s %14s\n", "(mean WER%)", "", "");
        for (const auto& s : splits)
            os << strfmt("%-12s %14.2f %14.2f %+10.2f\n", s.name.c_str(),
                         100.0 * s.mean_wer_baseline, 100.0 * s.mean_wer_corrected,
                         100.0 * s.delta_mean());
        return os.str();
    }
};

// Most instructive cases first: sorted by how much the correction improved
// the utterance (baseline WER minus corrected WER, descending).
inline std::string error_case_dump(const EvalReport& report, int limit = 20) {
    std::vector<const CaseRecord*> all;
    for (const auto& s : report.splits)
        for (const auto& c : s.cases) all.push_back(&c);
    std::stable_sort(all.begin(), all.end(), [](const CaseRecord* a, const CaseRecord* b) {
        return a->wer_before - a->wer_after > b->wer_before - b->wer_after;
    });
    std::ostringstream os;
    int shown = 0;
    for (const auto* c : all) {
        if (limit > 0 && shown >= limit) break;
        os << strfmt("[%s] WER %.2f%% -> %.2f%%\n", c->id.c_str(), 100.0 * c->wer_before,
                     100.0 * c->wer_after);
        os << "  reference: " << c->reference << "\n";
        os << "  1-best:    " << c->one_best << "\n";
        os << "  corrected: " << c->corrected << "\n";
        ++shown;
    }
    return os.str();
}

// Evaluates one split.  `cache` (optional) holds one n-best list per scored
// utterance; an empty cache is filled, a filled one is reused.
inline SplitEval evaluate_split(DenoisingGerModel& model, const CorpusSplit& split,
                                int max_utts = 0, std::vector<NBestList>* cache = nullptr) {
    if (split.utts.empty()) fail(strfmt("eval: split '%s' is empty", split.name.c_str()));
    std::size_t n = split.utts.size();
    if (max_utts > 0) n = std::min(n, static_cast<std::size_t>(max_utts));

    std::vector<NBestList> local;
    std::vector<NBestList>* lists = cache != nullptr ? cache : &local;
    if (lists->empty())
        for (std::size_t i = 0; i < n; ++i) lists->push_back(model.nbest(split.utts[i]));
    if (lists->size() != n)
        fail(strfmt("eval: cache holds %zu n-best lists for %zu utterances", lists->size(), n));

    SplitEval s;
    s.name = split.name;
    for (std::size_t i = 0; i < n; ++i) {
        const Utterance& utt = split.utts[i];
        CaseRecord c;
        c.id = utt.id;
        c.reference = utt.transcript;
        c.one_best = model.tokenizer().decode((*lists)[i].top1().tokens);
        c.corrected = model.tokenizer().decode(model.correct(utt, (*lists)[i]).tokens);
        c.wer_before = wer(c.reference, c.one_best);
        c.wer_after = wer(c.reference, c.corrected);
        s.cases.push_back(std::move(c));
    }
    finalize_split(s);
    return s;
}

inline EvalReport evaluate(DenoisingGerModel& model, const Corpus& corpus, int max_utts = 0) {
    EvalReport r;
    r.splits.push_back(evaluate_split(model, corpus.test_in, max_utts));
    r.splits.push_back(evaluate_split(model, corpus.test_out, max_utts));
    r.splits.push_back(evaluate_split(model, corpus.test_clean, max_utts));
    return r;
}

}  // namespace dger
