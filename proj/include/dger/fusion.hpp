#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dger/autodiff.hpp"
#include "dger/common.hpp"
#include "dger/rng.hpp"

namespace dger {

// ===========================================================================
// Cross-modal feature compensation and dynamic fusion: the acoustic and
// linguistic embedding sequences exchange difference vectors, a cosine-gated
// weight mu blends them, and the result is concatenated per row into the
// corrector's multimodal input.  Baseline fusion modes used by the ablation
// CLI live here too.
// ===========================================================================

enum class FusionMode {
    hfcdf,
    linguistic_only,
    acoustic_only,
    add,
    concat,
    transformer,
};

inline const char* fusion_mode_name(FusionMode m) {
    switch (m) {
        case FusionMode::hfcdf: return "hfcdf";
        case FusionMode::linguistic_only: return "linguistic_only";
        case FusionMode::acoustic_only: return "acoustic_only";
        case FusionMode::add: return "add";
        case FusionMode::concat: return "concat";
        case FusionMode::transformer: return "transformer";
    }
    return "?";
}

inline FusionMode fusion_mode_from(const std::string& s) {
    for (FusionMode m : {FusionMode::hfcdf, FusionMode::linguistic_only, FusionMode::acoustic_only,
                         FusionMode::add, FusionMode::concat, FusionMode::transformer}) {
        if (s == fusion_mode_name(m)) return m;
    }
    fail(strfmt("fusion mode '%s' unknown; expected one of hfcdf, linguistic_only, acoustic_only, "
                "add, concat, transformer",
                s.c_str()));
}

// Compensation gains.  shared_gain uses a single gain k for both directions,
// which collapses the two compensated sequences onto the same vector
// (1-k)x + ky; the variant
// with independent gains keeps them distinct so the downstream weight can
// move off 0.5.
struct FusionConfig {
    double k_a = 0.7;
    double k_t = 0.7;
    bool shared_gain = true;

    static FusionConfig variant() {
        FusionConfig cfg;
        cfg.k_a = 0.7;
        cfg.k_t = 0.3;
        cfg.shared_gain = false;
        return cfg;
    }

    void validate() const {
        if (!(k_a >= 0.0 && k_a <= 1.0))
            fail(strfmt("fusion config: k_a must lie in [0, 1], got %g", k_a));
        if (!(k_t >= 0.0 && k_t <= 1.0))
            fail(strfmt("fusion config: k_t must lie in [0, 1], got %g", k_t));
        if (shared_gain && k_a != k_t)
            fail(strfmt("fusion config: shared_gain requires k_a == k_t, got %g and %g", k_a, k_t));
    }
};

// Keep the first `rows` rows of a rank-2 value.  Gradients route only to the
// surviving rows.
inline Var truncate_rows(Tape& t, Var v, int rows) {
    const Tensor& tv = v.val();
    if (tv.rank() != 2) fail(strfmt("truncate_rows: expected rank-2 value, got %s", tv.shape_str().c_str()));
    if (rows <= 0) fail(strfmt("truncate_rows: row count must be positive, got %d", rows));
    if (rows == tv.rows()) return v;
    std::vector<std::pair<int, int>> ranges;
    ranges.reserve(static_cast<std::size_t>(rows));
    for (int i = 0; i < rows; ++i) ranges.emplace_back(i, i + 1);
    return t.mean_pool_segments(v, ranges);
}

struct Compensated {
    Var x;
    Var y;
};

// Exchange difference vectors between the acoustic embedding x_tok and the
// linguistic embedding y_tok:
//   x' = x + k_a * (y - x),   y' = y + (1 - k_t) * (x - y).
// Sequences of unequal length are truncated to the shorter one with a logged
// warning.
inline Compensated compensate(Tape& t, Var x_tok, Var y_tok, const FusionConfig& cfg) {
    cfg.validate();
    const Tensor& xv = x_tok.val();
    const Tensor& yv = y_tok.val();
    if (xv.rank() != 2 || yv.rank() != 2)
        fail(strfmt("compensate: expected rank-2 embedding sequences, got %s and %s",
                    xv.shape_str().c_str(), yv.shape_str().c_str()));
    if (xv.rows() == 0 || yv.rows() == 0) fail("compensate: empty embedding sequence");
    if (xv.rows() != yv.rows()) {
        const int rows = std::min(xv.rows(), yv.rows());
        log_warn(strfmt("compensate: sequence lengths differ (%d vs %d); truncating to %d",
                        xv.rows(), yv.rows(), rows));
        x_tok = truncate_rows(t, x_tok, rows);
        y_tok = truncate_rows(t, y_tok, rows);
    }
    if (x_tok.val().cols() != y_tok.val().cols())
        fail(strfmt("compensate: feature dims differ (%s vs %s)",
                    x_tok.val().shape_str().c_str(), y_tok.val().shape_str().c_str()));
    Var dx = t.sub(x_tok, y_tok);
    Var dy = t.sub(y_tok, x_tok);
    Var xc = t.add(x_tok, t.scale(cfg.k_a, dy));
    Var yc = t.add(y_tok, t.scale(1.0 - cfg.k_t, dx));
    return {xc, yc};
}

// Gate between the compensated sequences by how well each matches `target`:
//   R_a = mean row cosine(x', target),  R_t = mean row cosine(y', target),
//   mu  = e^{R_a} / (e^{R_a} + e^{R_t}).
// Computed as 0.5 + 0.5*tanh((R_a - R_t)/2), the same value on existing ops.
// All three sequences are truncated to the shortest.  Returns a scalar node;
// gradients flow to both sequences and the target.
inline Var dynamic_weight(Tape& t, Var x_comp, Var y_comp, Var target) {
    const Tensor& xv = x_comp.val();
    const Tensor& yv = y_comp.val();
    const Tensor& gv = target.val();
    if (xv.rank() != 2 || yv.rank() != 2 || gv.rank() != 2)
        fail("dynamic_weight: expected rank-2 embedding sequences");
    const int rows = std::min({xv.rows(), yv.rows(), gv.rows()});
    if (rows == 0) fail("dynamic_weight: empty embedding sequence");
    if (xv.cols() != gv.cols() || yv.cols() != gv.cols())
        fail(strfmt("dynamic_weight: feature dims differ (%s, %s, %s)", xv.shape_str().c_str(),
                    yv.shape_str().c_str(), gv.shape_str().c_str()));
    x_comp = truncate_rows(t, x_comp, rows);
    y_comp = truncate_rows(t, y_comp, rows);
    target = truncate_rows(t, target, rows);
    Var ra = t.cosine_rows_mean(x_comp, target);
    Var rt = t.cosine_rows_mean(y_comp, target);
    Var half = t.scale(0.5, t.tanh(t.scale(0.5, t.sub(ra, rt))));
    return t.add(half, t.constant(Tensor::scalar(0.5)));
}

struct FusedMultimodal {
    Var x_mmc;
    Var y_context;
    Var mu;
};

// Blend the compensated acoustic sequence with the 1-best linguistic
// embedding: each fused row is the concatenation of mu*x' and (1-mu)*y'_top1.
// y_context (the full n-best embedding) is carried through for the decoder
// prefix.
inline FusedMultimodal fuse(Tape& t, Var x_comp, Var y_top1, Var mu, Var y_context) {
    const Tensor& xv = x_comp.val();
    const Tensor& yv = y_top1.val();
    if (!xv.same_shape(yv))
        fail(strfmt("fuse: shape mismatch (%s vs %s)", xv.shape_str().c_str(),
                    yv.shape_str().c_str()));
    if (mu.val().numel() != 1)
        fail(strfmt("fuse: mu must be scalar, got %s", mu.val().shape_str().c_str()));
    const double m = mu.item();
    if (!(m > 0.0 && m < 1.0)) fail(strfmt("fuse: mu must lie in (0, 1), got %g", m));
    if (mu.val().rank() != 1) mu = t.reshape(mu, {1});
    Var one_minus_mu = t.sub(t.constant(Tensor::scalar(1.0)), mu);
    Var x_mmc = t.concat_cols({t.scale(mu, x_comp), t.scale(one_minus_mu, y_top1)});
    return {x_mmc, y_context, mu};
}

// Single cross-attention block used by the `transformer` baseline: queries
// from the acoustic side, keys and values from the linguistic side, residual
// back onto the acoustic side.
struct TransformerMixer {
    std::vector<Parameter> params;

    TransformerMixer(int dim, std::uint64_t seed) {
        Rng rng(mix_seed(seed, 0xf0));
        const double s = 1.0 / std::sqrt(static_cast<double>(dim));
        params.emplace_back("mixer.wq", Tensor::randn({dim, dim}, rng, s));
        params.emplace_back("mixer.wk", Tensor::randn({dim, dim}, rng, s));
        params.emplace_back("mixer.wv", Tensor::randn({dim, dim}, rng, s));
    }

    int dim() const { return params[0].value.rows(); }

    std::vector<Parameter*> param_ptrs() {
        std::vector<Parameter*> out;
        for (auto& p : params) out.push_back(&p);
        return out;
    }
};

// Baseline decoder inputs for the fusion ablation.  `mixer` is required for
// the transformer mode and ignored otherwise.  Modes that combine the two
// sequences row-wise truncate to the shorter one.
inline Var baseline_fusions(Tape& t, Var x_tok, Var y_tok, FusionMode mode,
                            TransformerMixer* mixer = nullptr) {
    const Tensor& xv = x_tok.val();
    const Tensor& yv = y_tok.val();
    if (xv.rank() != 2 || yv.rank() != 2)
        fail("baseline_fusions: expected rank-2 embedding sequences");
    switch (mode) {
        case FusionMode::linguistic_only:
            return y_tok;
        case FusionMode::acoustic_only:
            return x_tok;
        case FusionMode::add:
        case FusionMode::concat: {
            if (xv.rows() == 0 || yv.rows() == 0) fail("baseline_fusions: empty embedding sequence");
            const int rows = std::min(xv.rows(), yv.rows());
            Var x = truncate_rows(t, x_tok, rows);
            Var y = truncate_rows(t, y_tok, rows);
            if (mode == FusionMode::add) {
                if (x.val().cols() != y.val().cols())
                    fail(strfmt("baseline_fusions: add needs equal feature dims (%s vs %s)",
                                x.val().shape_str().c_str(), y.val().shape_str().c_str()));
                return t.add(x, y);
            }
            return t.concat_cols({x, y});
        }
        case FusionMode::transformer: {
            if (mixer == nullptr) fail("baseline_fusions: transformer mode needs a mixer");
            if (xv.cols() != mixer->dim() || yv.cols() != mixer->dim())
                fail(strfmt("baseline_fusions: mixer dim %d does not match inputs (%s, %s)",
                            mixer->dim(), xv.shape_str().c_str(), yv.shape_str().c_str()));
            Var q = t.matmul(x_tok, t.param(mixer->params[0]));
            Var k = t.matmul(y_tok, t.param(mixer->params[1]));
            Var v = t.matmul(y_tok, t.param(mixer->params[2]));
            Var scores = t.scale(1.0 / std::sqrt(static_cast<double>(mixer->dim())), t.matmul_nt(q, k));
            return t.add(x_tok, t.matmul(t.softmax_rows(scores), v));
        }
        case FusionMode::hfcdf:
            fail("baseline_fusions: hfcdf is the full mechanism, not a baseline mode");
    }
    fail("baseline_fusions: unknown mode");
}

}  // namespace dger
