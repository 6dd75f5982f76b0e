#pragma once

#include <vector>

#include "dger/autodiff.hpp"

namespace dger {

// Compositions of tape ops shared by the model headers. These are not ops of
// their own; gradients flow through the underlying graph nodes.

// Repeat a 1 x D row n times. Used to broadcast biases; the concat backward
// accumulates one slice per occurrence, so the bias gradient sums over rows.
inline Var broadcast_rows(Tape& t, Var row, int n) {
    if (row.val().rank() != 2 || row.val().dim(0) != 1)
        fail(strfmt("broadcast_rows: expected a 1 x D row, got %s", row.val().shape_str().c_str()));
    if (n == 1) return row;
    std::vector<Var> parts(static_cast<std::size_t>(n), row);
    return t.concat_rows(parts);
}

// x: N x D, w: D x M, b: 1 x M -> N x M
inline Var linear(Tape& t, Var x, Var w, Var b) {
    return t.add(t.matmul(x, w), broadcast_rows(t, b, x.val().dim(0)));
}

}  // namespace dger
