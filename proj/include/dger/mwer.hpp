#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dger/autodiff.hpp"
#include "dger/common.hpp"
#include "dger/text.hpp"

namespace dger {

// ===========================================================================
// Expected-relative-WER training objective over an n-best list: hypothesis
// log scores are softmax-normalized into probabilities p_hat, and the loss is
//   (1/N) * sum_i p_hat_i * (w_i - w_bar)
// with w_bar the mean hypothesis WER.  Gradients flow through p_hat only; the
// WERs are constants of the graph.
// ===========================================================================

inline double mean_wer(const std::vector<double>& wers) {
    if (wers.empty()) fail("mean_wer: empty WER list");
    double s = 0.0;
    for (double w : wers) s += w;
    return s / static_cast<double>(wers.size());
}

// One utterance's worth of RL-loss inputs.  `raw_scores` are per-hypothesis
// total log probabilities living on the tape that will receive gradients.
struct MwerBatchItem {
    NBestList hypotheses;
    std::string reference;
    std::vector<Var> raw_scores;
    std::vector<double> wers;
    double baseline = 0.0;

    void validate() const {
        if (hypotheses.n() == 0) fail("mwer item: empty hypothesis list");
        const std::size_t n = static_cast<std::size_t>(hypotheses.n());
        if (raw_scores.size() != n || wers.size() != n)
            fail(strfmt("mwer item: field lengths disagree (%zu hypotheses, %zu scores, %zu wers)",
                        n, raw_scores.size(), wers.size()));
        if (std::abs(baseline - mean_wer(wers)) > 1e-12)
            fail(strfmt("mwer item: baseline %g is not the mean WER %g", baseline, mean_wer(wers)));
    }
};

inline MwerBatchItem make_mwer_item(NBestList hypotheses, std::string reference,
                                    std::vector<Var> raw_scores, std::vector<double> wers) {
    MwerBatchItem item;
    item.hypotheses = std::move(hypotheses);
    item.reference = std::move(reference);
    item.raw_scores = std::move(raw_scores);
    item.wers = std::move(wers);
    item.baseline = mean_wer(item.wers);
    item.validate();
    return item;
}

// Softmax over the hypothesis log scores.  Returns a 1xN row that sums to 1.
inline Var normalize_likelihoods(Tape& t, const std::vector<Var>& raw_scores) {
    if (raw_scores.empty()) fail("normalize_likelihoods: empty score list");
    std::vector<Var> cells;
    cells.reserve(raw_scores.size());
    for (const Var& s : raw_scores) {
        const Tensor& sv = s.val();
        if (sv.numel() != 1)
            fail(strfmt("normalize_likelihoods: scores must be scalar, got %s",
                        sv.shape_str().c_str()));
        if (!sv.all_finite()) fail("normalize_likelihoods: non-finite score");
        cells.push_back(t.reshape(s, {1, 1}));
    }
    return t.softmax_rows(t.concat_cols(cells));
}

// The scalar objective.  Uniform probabilities or constant WERs both give
// exactly zero; mass on above-average-WER hypotheses gives a positive value.
inline Var rl_loss(Tape& t, const MwerBatchItem& item) {
    item.validate();
    Var p_hat = normalize_likelihoods(t, item.raw_scores);
    const int n = static_cast<int>(item.wers.size());
    Tensor coeff({n, 1});
    for (int i = 0; i < n; ++i)
        coeff.at(i, 0) = (item.wers[static_cast<std::size_t>(i)] - item.baseline) / static_cast<double>(n);
    return t.reshape(t.matmul(p_hat, t.constant(std::move(coeff))), {1});
}

}  // namespace dger
