#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <deque>
#include <vector>

#include "dger/common.hpp"
#include "dger/tensor.hpp"

namespace dger {

// ===========================================================================
// Reverse-mode autodiff over dense double tensors.
//
// A Tape records every operation of one forward pass (define-by-run); the
// graph is rebuilt from scratch on each pass. backward() walks the node list
// in reverse append order, which is a valid topological order by
// construction, and visits each node exactly once. Gradients of leaves bound
// to Parameters accumulate into Parameter::grad.
// ===========================================================================

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}

    void zero_grad() { std::fill(grad.values().begin(), grad.values().end(), 0.0); }
    std::size_t numel() const { return value.numel(); }
};

enum class Op {
    Leaf,
    Reshape,
    Add,
    Sub,
    ScaleConst,
    ScaleVar,
    Matmul,
    MatmulNT,
    ConcatCols,
    ConcatRows,
    Relu,
    Tanh,
    Softmax,
    LayerNorm,
    Mean,
    L1Distance,
    CrossEntropy,
    CosineRows,
    EmbedLookup,
    Conv1d,
    TConv1d,
    MeanPoolSegments,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Reshape: return "reshape";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::ScaleConst: return "mul-by-scalar";
        case Op::ScaleVar: return "mul-by-scalar";
        case Op::Matmul: return "matmul";
        case Op::MatmulNT: return "matmul";
        case Op::ConcatCols: return "concat-last-dim";
        case Op::ConcatRows: return "concat-rows";
        case Op::Relu: return "relu";
        case Op::Tanh: return "tanh";
        case Op::Softmax: return "softmax-last-dim";
        case Op::LayerNorm: return "layer-norm";
        case Op::Mean: return "mean";
        case Op::L1Distance: return "l1-distance";
        case Op::CrossEntropy: return "cross-entropy-with-logits";
        case Op::CosineRows: return "cosine-similarity";
        case Op::EmbedLookup: return "embedding-lookup";
        case Op::Conv1d: return "conv1d";
        case Op::TConv1d: return "transpose-conv1d";
        case Op::MeanPoolSegments: return "mean-pool-segments";
    }
    return "?";
}

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid until the tape is cleared.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& val() const;
    double item() const { return val().item(); }
};

struct Node {
    Op op = Op::Leaf;
    Tensor value;
    Tensor grad;  // empty until backward reaches this node
    bool requires_grad = false;
    std::vector<int> parents;
    std::vector<int> aux;      // op-specific ints (ids, stride, pad, flags)
    std::vector<double> auxd;  // op-specific doubles (scale factor)
    Parameter* bound = nullptr;
};

namespace detail {

// C += A(m x k) * B(k x n)
inline void mm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C += A(m x k) * B(n x k)^T
inline void mm_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

// C += A(m x k)^T * B(m x n)
inline void mm_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        const double* bi = b + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

}  // namespace detail

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // When gradients are disabled the tape still records values (so handles
    // stay valid) but marks nothing differentiable; backward() then refuses.
    void set_grad_enabled(bool on) { grad_enabled_ = on; }
    bool grad_enabled() const { return grad_enabled_; }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }

    Var leaf(Tensor t, bool requires_grad = false) {
        Node n;
        n.op = Op::Leaf;
        n.value = std::move(t);
        n.requires_grad = requires_grad && grad_enabled_;
        return push(std::move(n));
    }

    Var constant(Tensor t) { return leaf(std::move(t), false); }

    // Leaf bound to a model parameter; backward() accumulates into p.grad.
    Var param(Parameter& p) {
        Node n;
        n.op = Op::Leaf;
        n.value = p.value;
        n.requires_grad = p.trainable && grad_enabled_;
        n.bound = &p;
        return push(std::move(n));
    }

    // Gradient of a node after backward(); zeros if the node did not
    // participate in the loss.
    Tensor grad(Var v) const {
        const Node& n = node(v.id);
        if (n.grad.empty()) return Tensor::zeros(n.value.shape());
        return n.grad;
    }

    void backward(Var loss) {
        if (!grad_enabled_) fail("backward: gradients are disabled on this tape");
        if (loss.tape != this) fail("backward: loss lives on another tape");
        Node& ln = node(loss.id);
        if (ln.value.numel() != 1)
            fail(strfmt("backward: loss must be scalar, got %s", ln.value.shape_str().c_str()));
        ln.grad = Tensor::scalar(1.0);
        for (int id = loss.id; id >= 0; --id) {
            Node& n = node(id);
            if (!n.requires_grad || n.grad.empty()) continue;
            dispatch_backward(n);
            if (n.bound != nullptr && n.bound->trainable) {
                auto& acc = n.bound->grad.values();
                const auto& g = n.grad.values();
                for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
            }
        }
    }

    // First node holding a non-finite value, or -1. Used for divergence
    // diagnostics.
    int first_nonfinite() const {
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            if (!nodes_[i].value.all_finite()) return static_cast<int>(i);
        return -1;
    }

    std::string describe(int id) const {
        return strfmt("node %d (%s, shape %s)", id, op_name(nodes_[static_cast<std::size_t>(id)].op),
                      nodes_[static_cast<std::size_t>(id)].value.shape_str().c_str());
    }

    // ---- operations -------------------------------------------------------

    Var reshape(Var x, std::vector<int> shape) {
        const Tensor& xv = val(x);
        if (Tensor::count(shape) != static_cast<long long>(xv.numel()))
            fail(strfmt("reshape: %s -> %s changes element count", xv.shape_str().c_str(),
                        Tensor::shape_str(shape).c_str()));
        Node n;
        n.op = Op::Reshape;
        n.value = Tensor(std::move(shape), xv.values());
        n.parents = {x.id};
        return push_op(std::move(n));
    }

    Var add(Var a, Var b) { return add_sub(a, b, /*sub=*/false); }
    Var sub(Var a, Var b) { return add_sub(a, b, /*sub=*/true); }

    Var scale(double c, Var x) {
        Node n;
        n.op = Op::ScaleConst;
        n.value = val(x);
        for (auto& v : n.value.values()) v *= c;
        n.parents = {x.id};
        n.auxd = {c};
        return push_op(std::move(n));
    }

    // Multiply a tensor by a scalar node; gradients flow to both.
    Var scale(Var s, Var x) {
        const Tensor& sv = val(s);
        if (sv.numel() != 1)
            fail(strfmt("mul-by-scalar: scale operand must be scalar, got %s", sv.shape_str().c_str()));
        Node n;
        n.op = Op::ScaleVar;
        n.value = val(x);
        const double c = sv.item();
        for (auto& v : n.value.values()) v *= c;
        n.parents = {s.id, x.id};
        return push_op(std::move(n));
    }

    Var matmul(Var a, Var b) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        require_rank2(av, "matmul");
        require_rank2(bv, "matmul");
        if (av.dim(1) != bv.dim(0))
            fail(strfmt("matmul: inner dimensions differ, %s vs %s", av.shape_str().c_str(),
                        bv.shape_str().c_str()));
        Node n;
        n.op = Op::Matmul;
        n.value = Tensor({av.dim(0), bv.dim(1)});
        detail::mm_acc(av.data(), bv.data(), n.value.data(), av.dim(0), av.dim(1), bv.dim(1));
        n.parents = {a.id, b.id};
        return push_op(std::move(n));
    }

    // a @ b^T without materializing the transpose.
    Var matmul_nt(Var a, Var b) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        require_rank2(av, "matmul");
        require_rank2(bv, "matmul");
        if (av.dim(1) != bv.dim(1))
            fail(strfmt("matmul: inner dimensions differ, %s vs %s^T", av.shape_str().c_str(),
                        bv.shape_str().c_str()));
        Node n;
        n.op = Op::MatmulNT;
        n.value = Tensor({av.dim(0), bv.dim(0)});
        detail::mm_nt_acc(av.data(), bv.data(), n.value.data(), av.dim(0), av.dim(1), bv.dim(0));
        n.parents = {a.id, b.id};
        return push_op(std::move(n));
    }

    Var concat_cols(const std::vector<Var>& parts) { return concat(parts, /*rows=*/false); }
    Var concat_rows(const std::vector<Var>& parts) { return concat(parts, /*rows=*/true); }

    Var relu(Var x) {
        Node n;
        n.op = Op::Relu;
        n.value = val(x);
        for (auto& v : n.value.values()) v = v > 0.0 ? v : 0.0;
        n.parents = {x.id};
        return push_op(std::move(n));
    }

    Var tanh(Var x) {
        Node n;
        n.op = Op::Tanh;
        n.value = val(x);
        for (auto& v : n.value.values()) v = std::tanh(v);
        n.parents = {x.id};
        return push_op(std::move(n));
    }

    // Row-wise softmax with max subtraction. causal_offset < 0 disables
    // masking; otherwise row r sees columns [0, r + 1 + causal_offset).
    Var softmax_rows(Var x, int causal_offset = -1) {
        const Tensor& xv = val(x);
        require_rank2(xv, "softmax-last-dim");
        require_finite(xv, "softmax-last-dim");
        const int rows = xv.dim(0), cols = xv.dim(1);
        Node n;
        n.op = Op::Softmax;
        n.value = Tensor({rows, cols});
        for (int r = 0; r < rows; ++r) {
            const int valid = causal_offset < 0 ? cols : std::min(cols, r + 1 + causal_offset);
            if (valid <= 0) fail("softmax-last-dim: causal mask leaves an empty row");
            const double* xi = xv.data() + static_cast<std::size_t>(r) * cols;
            double* yi = n.value.data() + static_cast<std::size_t>(r) * cols;
            double mx = xi[0];
            for (int j = 1; j < valid; ++j) mx = std::max(mx, xi[j]);
            double sum = 0.0;
            for (int j = 0; j < valid; ++j) {
                yi[j] = std::exp(xi[j] - mx);
                sum += yi[j];
            }
            for (int j = 0; j < valid; ++j) yi[j] /= sum;
        }
        n.parents = {x.id};
        n.aux = {causal_offset};
        return push_op(std::move(n));
    }

    // Row-wise normalization to zero mean / unit variance (no learned affine).
    Var layer_norm(Var x) {
        const Tensor& xv = val(x);
        require_rank2(xv, "layer-norm");
        const int rows = xv.dim(0), cols = xv.dim(1);
        Node n;
        n.op = Op::LayerNorm;
        n.value = Tensor({rows, cols});
        for (int r = 0; r < rows; ++r) {
            const double* xi = xv.data() + static_cast<std::size_t>(r) * cols;
            double* yi = n.value.data() + static_cast<std::size_t>(r) * cols;
            double m = 0.0;
            for (int j = 0; j < cols; ++j) m += xi[j];
            m /= cols;
            double var = 0.0;
            for (int j = 0; j < cols; ++j) var += (xi[j] - m) * (xi[j] - m);
            var /= cols;
            const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
            for (int j = 0; j < cols; ++j) yi[j] = (xi[j] - m) * inv;
        }
        n.parents = {x.id};
        return push_op(std::move(n));
    }

    Var mean_all(Var x) {
        const Tensor& xv = val(x);
        if (xv.numel() == 0) fail("mean: empty input");
        double s = 0.0;
        for (double v : xv.values()) s += v;
        Node n;
        n.op = Op::Mean;
        n.value = Tensor::scalar(s / static_cast<double>(xv.numel()));
        n.parents = {x.id};
        return push_op(std::move(n));
    }

    // Mean elementwise absolute difference.
    Var l1_distance(Var a, Var b) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        if (!av.same_shape(bv))
            fail(strfmt("l1-distance: shape mismatch %s vs %s", av.shape_str().c_str(),
                        bv.shape_str().c_str()));
        if (av.numel() == 0) fail("l1-distance: empty input");
        double s = 0.0;
        for (std::size_t i = 0; i < av.numel(); ++i) s += std::fabs(av[i] - bv[i]);
        Node n;
        n.op = Op::L1Distance;
        n.value = Tensor::scalar(s / static_cast<double>(av.numel()));
        n.parents = {a.id, b.id};
        return push_op(std::move(n));
    }

    // Mean per-row negative log-likelihood of integer targets under
    // softmax(logits).
    Var cross_entropy(Var logits, const std::vector<int>& targets) {
        const Tensor& xv = val(logits);
        require_rank2(xv, "cross-entropy-with-logits");
        require_finite(xv, "cross-entropy-with-logits");
        const int rows = xv.dim(0), cols = xv.dim(1);
        if (static_cast<int>(targets.size()) != rows)
            fail(strfmt("cross-entropy-with-logits: %zu targets for %d rows", targets.size(), rows));
        double total = 0.0;
        for (int r = 0; r < rows; ++r) {
            const int t = targets[r];
            if (t < 0 || t >= cols)
                fail(strfmt("cross-entropy-with-logits: target %d out of range [0,%d)", t, cols));
            total += row_logsumexp(xv, r) - xv.at(r, t);
        }
        Node n;
        n.op = Op::CrossEntropy;
        n.value = Tensor::scalar(total / rows);
        n.parents = {logits.id};
        n.aux = targets;
        return push_op(std::move(n));
    }

    // Mean over rows of the cosine similarity between corresponding rows.
    // A zero-norm row contributes 0 (logged), never an error.
    Var cosine_rows_mean(Var a, Var b) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        require_rank2(av, "cosine-similarity");
        if (!av.same_shape(bv))
            fail(strfmt("cosine-similarity: shape mismatch %s vs %s", av.shape_str().c_str(),
                        bv.shape_str().c_str()));
        const int rows = av.dim(0), cols = av.dim(1);
        if (rows == 0) fail("cosine-similarity: empty input");
        double sum = 0.0;
        for (int r = 0; r < rows; ++r) {
            double na = 0.0, nb = 0.0, dot = 0.0;
            for (int j = 0; j < cols; ++j) {
                const double x = av.at(r, j), y = bv.at(r, j);
                na += x * x;
                nb += y * y;
                dot += x * y;
            }
            if (na == 0.0 || nb == 0.0) {
                log_warn(strfmt("cosine-similarity: zero-norm row %d treated as similarity 0", r));
                continue;
            }
            sum += dot / std::sqrt(na * nb);
        }
        Node n;
        n.op = Op::CosineRows;
        n.value = Tensor::scalar(sum / rows);
        n.parents = {a.id, b.id};
        return push_op(std::move(n));
    }

    Var embedding_lookup(Var table, const std::vector<int>& ids) {
        const Tensor& tv = val(table);
        require_rank2(tv, "embedding-lookup");
        const int vocab = tv.dim(0), dim = tv.dim(1);
        Node n;
        n.op = Op::EmbedLookup;
        n.value = Tensor({static_cast<int>(ids.size()), dim});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const int id = ids[i];
            if (id < 0 || id >= vocab)
                fail(strfmt("embedding-lookup: id %d out of range [0,%d)", id, vocab));
            std::memcpy(n.value.data() + i * static_cast<std::size_t>(dim),
                        tv.data() + static_cast<std::size_t>(id) * dim, sizeof(double) * dim);
        }
        n.parents = {table.id};
        n.aux = ids;
        return push_op(std::move(n));
    }

    // 1-D convolution over time. x: T x Cin, w: Cout x Cin x K, b: Cout.
    // Zero padding of `pad` frames on both ends.
    Var conv1d(Var x, Var w, Var b, int stride, int pad) {
        const Tensor& xv = val(x);
        const Tensor& wv = val(w);
        const Tensor& bv = val(b);
        require_rank2(xv, "conv1d");
        if (wv.rank() != 3) fail(strfmt("conv1d: kernel must be rank 3, got %s", wv.shape_str().c_str()));
        const int t_in = xv.dim(0), c_in = xv.dim(1);
        const int c_out = wv.dim(0), k = wv.dim(2);
        if (wv.dim(1) != c_in)
            fail(strfmt("conv1d: input channels %d vs kernel %s", c_in, wv.shape_str().c_str()));
        if (bv.rank() != 1 || bv.dim(0) != c_out)
            fail(strfmt("conv1d: bias shape %s for %d channels", bv.shape_str().c_str(), c_out));
        if (stride < 1) fail("conv1d: stride must be >= 1");
        const int t_out = (t_in + 2 * pad - k) / stride + 1;
        if (t_out < 1) fail(strfmt("conv1d: input of %d frames too short for kernel %d", t_in, k));
        Node n;
        n.op = Op::Conv1d;
        n.value = Tensor({t_out, c_out});
        for (int to = 0; to < t_out; ++to) {
            double* yo = n.value.data() + static_cast<std::size_t>(to) * c_out;
            for (int co = 0; co < c_out; ++co) yo[co] = bv[static_cast<std::size_t>(co)];
            for (int kk = 0; kk < k; ++kk) {
                const int t = to * stride - pad + kk;
                if (t < 0 || t >= t_in) continue;
                const double* xt = xv.data() + static_cast<std::size_t>(t) * c_in;
                for (int co = 0; co < c_out; ++co) {
                    const double* wr = wv.data() + (static_cast<std::size_t>(co) * c_in) * k + kk;
                    double s = 0.0;
                    for (int ci = 0; ci < c_in; ++ci) s += xt[ci] * wr[static_cast<std::size_t>(ci) * k];
                    yo[co] += s;
                }
            }
        }
        n.parents = {x.id, w.id, b.id};
        n.aux = {stride, pad};
        return push_op(std::move(n));
    }

    // Transposed 1-D convolution. x: T x Cin, w: Cin x Cout x K, b: Cout.
    // Output length (T-1)*stride - 2*pad + K.
    Var tconv1d(Var x, Var w, Var b, int stride, int pad) {
        const Tensor& xv = val(x);
        const Tensor& wv = val(w);
        const Tensor& bv = val(b);
        require_rank2(xv, "transpose-conv1d");
        if (wv.rank() != 3)
            fail(strfmt("transpose-conv1d: kernel must be rank 3, got %s", wv.shape_str().c_str()));
        const int t_in = xv.dim(0), c_in = xv.dim(1);
        const int c_out = wv.dim(1), k = wv.dim(2);
        if (wv.dim(0) != c_in)
            fail(strfmt("transpose-conv1d: input channels %d vs kernel %s", c_in, wv.shape_str().c_str()));
        if (bv.rank() != 1 || bv.dim(0) != c_out)
            fail(strfmt("transpose-conv1d: bias shape %s for %d channels", bv.shape_str().c_str(), c_out));
        const int t_out = (t_in - 1) * stride - 2 * pad + k;
        if (t_out < 1) fail("transpose-conv1d: empty output");
        Node n;
        n.op = Op::TConv1d;
        n.value = Tensor({t_out, c_out});
        for (int t = 0; t < t_out; ++t) {
            double* yo = n.value.data() + static_cast<std::size_t>(t) * c_out;
            for (int co = 0; co < c_out; ++co) yo[co] = bv[static_cast<std::size_t>(co)];
        }
        for (int ti = 0; ti < t_in; ++ti) {
            const double* xt = xv.data() + static_cast<std::size_t>(ti) * c_in;
            for (int kk = 0; kk < k; ++kk) {
                const int t = ti * stride - pad + kk;
                if (t < 0 || t >= t_out) continue;
                double* yo = n.value.data() + static_cast<std::size_t>(t) * c_out;
                for (int ci = 0; ci < c_in; ++ci) {
                    const double xvv = xt[ci];
                    if (xvv == 0.0) continue;
                    const double* wr = wv.data() + (static_cast<std::size_t>(ci) * c_out) * k + kk;
                    for (int co = 0; co < c_out; ++co) yo[co] += xvv * wr[static_cast<std::size_t>(co) * k];
                }
            }
        }
        n.parents = {x.id, w.id, b.id};
        n.aux = {stride, pad};
        return push_op(std::move(n));
    }

    // Mean-pool rows of x over explicit [begin, end) row ranges. Ranges may
    // repeat rows (used when there are more segments than frames).
    Var mean_pool_segments(Var x, const std::vector<std::pair<int, int>>& ranges) {
        const Tensor& xv = val(x);
        require_rank2(xv, "mean-pool-segments");
        const int t_in = xv.dim(0), dim = xv.dim(1);
        Node n;
        n.op = Op::MeanPoolSegments;
        n.value = Tensor({static_cast<int>(ranges.size()), dim});
        n.aux.reserve(ranges.size() * 2);
        for (std::size_t i = 0; i < ranges.size(); ++i) {
            const auto [b, e] = ranges[i];
            if (b < 0 || e > t_in || b >= e)
                fail(strfmt("mean-pool-segments: bad range [%d,%d) over %d rows", b, e, t_in));
            double* yo = n.value.data() + i * static_cast<std::size_t>(dim);
            for (int t = b; t < e; ++t) {
                const double* xt = xv.data() + static_cast<std::size_t>(t) * dim;
                for (int j = 0; j < dim; ++j) yo[j] += xt[j];
            }
            const double inv = 1.0 / (e - b);
            for (int j = 0; j < dim; ++j) yo[j] *= inv;
            n.aux.push_back(b);
            n.aux.push_back(e);
        }
        n.parents = {x.id};
        return push_op(std::move(n));
    }

private:
    static constexpr double kLayerNormEps = 1e-5;

    // Deque keeps node references stable across pushes, so values returned
    // by val() stay valid while the graph grows.
    std::deque<Node> nodes_;
    bool grad_enabled_ = true;

    const Tensor& val(Var v) const {
        if (v.tape != this) fail("op: operand from another tape");
        return nodes_[static_cast<std::size_t>(v.id)].value;
    }

    static void require_rank2(const Tensor& t, const char* op) {
        if (t.rank() != 2) fail(strfmt("%s: expected a matrix, got %s", op, t.shape_str().c_str()));
    }

    static void require_finite(const Tensor& t, const char* op) {
        if (!t.all_finite()) fail(strfmt("%s: non-finite input", op));
    }

    static double row_logsumexp(const Tensor& x, int r) {
        const int cols = x.dim(1);
        const double* xi = x.data() + static_cast<std::size_t>(r) * cols;
        double mx = xi[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
        double s = 0.0;
        for (int j = 0; j < cols; ++j) s += std::exp(xi[j] - mx);
        return mx + std::log(s);
    }

    Var push(Node&& n) {
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var push_op(Node&& n) {
        bool req = false;
        for (int p : n.parents) req = req || nodes_[static_cast<std::size_t>(p)].requires_grad;
        n.requires_grad = req && grad_enabled_;
        return push(std::move(n));
    }

    Var add_sub(Var a, Var b, bool sub) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        if (!av.same_shape(bv))
            fail(strfmt("%s: shape mismatch %s vs %s", sub ? "sub" : "add", av.shape_str().c_str(),
                        bv.shape_str().c_str()));
        Node n;
        n.op = sub ? Op::Sub : Op::Add;
        n.value = av;
        if (sub)
            for (std::size_t i = 0; i < bv.numel(); ++i) n.value[i] -= bv[i];
        else
            for (std::size_t i = 0; i < bv.numel(); ++i) n.value[i] += bv[i];
        n.parents = {a.id, b.id};
        return push_op(std::move(n));
    }

    Var concat(const std::vector<Var>& parts, bool rows) {
        const char* name = rows ? "concat-rows" : "concat-last-dim";
        if (parts.empty()) fail(strfmt("%s: no inputs", name));
        const Tensor& first = val(parts[0]);
        require_rank2(first, name);
        int fixed = rows ? first.dim(1) : first.dim(0);
        int total = 0;
        for (Var p : parts) {
            const Tensor& t = val(p);
            require_rank2(t, name);
            const int f = rows ? t.dim(1) : t.dim(0);
            if (f != fixed)
                fail(strfmt("%s: shape mismatch %s vs %s", name, first.shape_str().c_str(),
                            t.shape_str().c_str()));
            total += rows ? t.dim(0) : t.dim(1);
        }
        Node n;
        n.op = rows ? Op::ConcatRows : Op::ConcatCols;
        if (rows) {
            n.value = Tensor({total, fixed});
            std::size_t off = 0;
            for (Var p : parts) {
                const Tensor& t = val(p);
                std::memcpy(n.value.data() + off, t.data(), sizeof(double) * t.numel());
                off += t.numel();
            }
        } else {
            n.value = Tensor({fixed, total});
            int coff = 0;
            for (Var p : parts) {
                const Tensor& t = val(p);
                const int c = t.dim(1);
                for (int r = 0; r < fixed; ++r)
                    std::memcpy(n.value.data() + static_cast<std::size_t>(r) * total + coff,
                                t.data() + static_cast<std::size_t>(r) * c, sizeof(double) * c);
                coff += c;
            }
        }
        for (Var p : parts) n.parents.push_back(p.id);
        return push_op(std::move(n));
    }

    Tensor& grad_buf(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
        return n.grad;
    }

    bool parent_needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

    void dispatch_backward(Node& n) {
        const Tensor& g = n.grad;
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Reshape: {
                if (!parent_needs_grad(n.parents[0])) break;
                Tensor& pg = grad_buf(n.parents[0]);
                for (std::size_t i = 0; i < g.numel(); ++i) pg[i] += g[i];
                break;
            }
            case Op::Add:
            case Op::Sub: {
                if (parent_needs_grad(n.parents[0])) {
                    Tensor& pg = grad_buf(n.parents[0]);
                    for (std::size_t i = 0; i < g.numel(); ++i) pg[i] += g[i];
                }
                if (parent_needs_grad(n.parents[1])) {
                    Tensor& pg = grad_buf(n.parents[1]);
                    const double sign = n.op == Op::Sub ? -1.0 : 1.0;
                    for (std::size_t i = 0; i < g.numel(); ++i) pg[i] += sign * g[i];
                }
                break;
            }
            case Op::ScaleConst: {
                if (!parent_needs_grad(n.parents[0])) break;
                Tensor& pg = grad_buf(n.parents[0]);
                const double c = n.auxd[0];
                for (std::size_t i = 0; i < g.numel(); ++i) pg[i] += c * g[i];
                break;
            }
            case Op::ScaleVar: {
                const Tensor& sv = nodes_[static_cast<std::size_t>(n.parents[0])].value;
                const Tensor& xv = nodes_[static_cast<std::size_t>(n.parents[1])].value;
                if (parent_needs_grad(n.parents[0])) {
                    double ds = 0.0;
                    for (std::size_t i = 0; i < g.numel(); ++i) ds += xv[i] * g[i];
                    grad_buf(n.parents[0])[0] += ds;
                }
                if (parent_needs_grad(n.parents[1])) {
                    Tensor& pg = grad_buf(n.parents[1]);
                    const double c = sv.item();
                    for (std::size_t i = 0; i < g.numel(); ++i) pg[i] += c * g[i];
                }
                break;
            }
            case Op::Matmul: {
                const Tensor& av = nodes_[static_cast<std::size_t>(n.parents[0])].value;
                const Tensor& bv = nodes_[static_cast<std::size_t>(n.parents[1])].value;
                const int m = av.dim(0), k = av.dim(1), c = bv.dim(1);
                if (parent_needs_grad(n.parents[0]))
                    detail::mm_nt_acc(g.data(), bv.data(), grad_buf(n.parents[0]).data(), m, c, k);
                if (parent_needs_grad(n.parents[1]))
                    detail::mm_tn_acc(av.data(), g.data(), grad_buf(n.parents[1]).data(), m, k, c);
                break;
            }
            case Op::MatmulNT: {
                const Tensor& av = nodes_[static_cast<std::size_t>(n.parents[0])].value;
                const Tensor& bv = nodes_[static_cast<std::size_t>(n.parents[1])].value;
                const int m = av.dim(0), k = av.dim(1), c = bv.dim(0);
                if (parent_needs_grad(n.parents[0]))
                    detail::mm_acc(g.data(), bv.data(), grad_buf(n.parents[0]).data(), m, c, k);
                if (parent_needs_grad(n.parents[1]))
                    detail::mm_tn_acc(g.data(), av.data(), grad_buf(n.parents[1]).data(), m, c, k);
                break;
            }
            case Op::ConcatCols: {
                const int rows = n.value.dim(0);
                const int total = n.value.dim(1);
                int coff = 0;
                for (int p : n.parents) {
                    const Tensor& pv = nodes_[static_cast<std::size_t>(p)].value;
                    const int c = pv.dim(1);
                    if (parent_needs_grad(p)) {
                        Tensor& pg = grad_buf(p);
                        for (int r = 0; r < rows; ++r)
                            for (int j = 0; j < c; ++j)
                                pg[static_cast<std::size_t>(r) * c + j] +=
                                    g[static_cast<std::size_t>(r) * total + coff + j];
                    }
                    coff += c;
                }
                break;
            }
            case Op::ConcatRows: {
                std::size_t off = 0;
                for (int p : n.parents) {
                    const Tensor& pv = nodes_[static_cast<std::size_t>(p)].value;
                    if (parent_needs_grad(p)) {
                        Tensor& pg = grad_buf(p);
                        for (std::size_t i = 0; i < pv.numel(); ++i) pg[i] += g[off + i];
                    }
                    off += pv.numel();
                }
                break;
            }
            case Op::Relu: {
                if (!parent_needs_grad(n.parents[0])) break;
                const Tensor& xv = nodes_[static_cast<std::size_t>(n.parents[0])].value;
                Tensor& pg = grad_buf(n.parents[0]);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    if (xv[i] > 0.0) pg[i] += g[i];
                break;
            }
            case Op::Tanh: {
                if (!parent_needs_grad(n.parents[0])) break;
                Tensor& pg = grad_buf(n.parents[0]);
                for (std::size_t i = 0; i < g.numel(); ++i) pg[i] += (1.0 - n.value[i] * n.value[i]) * g[i];
                break;
            }
            case Op::Softmax: {
                if (!parent_needs_grad(n.parents[0])) break;
                Tensor& pg = grad_buf(n.parents[0]);
                const int rows = n.value.dim(0), cols = n.value.dim(1);
                for (int r = 0; r < rows; ++r) {
                    const double* s = n.value.data() + static_cast<std::size_t>(r) * cols;
                    const double* gr = g.data() + static_cast<std::size_t>(r) * cols;
                    double dot = 0.0;
                    for (int j = 0; j < cols; ++j) dot += s[j] * gr[j];
                    double* pgr = pg.data() + static_cast<std::size_t>(r) * cols;
                    for (int j = 0; j < cols; ++j) pgr[j] += s[j] * (gr[j] - dot);
                }
                break;
            }
            case Op::LayerNorm: {
                if (!parent_needs_grad(n.parents[0])) break;
                const Tensor& xv = nodes_[static_cast<std::size_t>(n.parents[0])].value;
                Tensor& pg = grad_buf(n.parents[0]);
                const int rows = n.value.dim(0), cols = n.value.dim(1);
                for (int r = 0; r < rows; ++r) {
                    const double* xi = xv.data() + static_cast<std::size_t>(r) * cols;
                    const double* yi = n.value.data() + static_cast<std::size_t>(r) * cols;
                    const double* gr = g.data() + static_cast<std::size_t>(r) * cols;
                    double m = 0.0;
                    for (int j = 0; j < cols; ++j) m += xi[j];
                    m /= cols;
                    double var = 0.0;
                    for (int j = 0; j < cols; ++j) var += (xi[j] - m) * (xi[j] - m);
                    var /= cols;
                    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                    double mg = 0.0, mgy = 0.0;
                    for (int j = 0; j < cols; ++j) {
                        mg += gr[j];
                        mgy += gr[j] * yi[j];
                    }
                    mg /= cols;
                    mgy /= cols;
                    double* pgr = pg.data() + static_cast<std::size_t>(r) * cols;
                    for (int j = 0; j < cols; ++j) pgr[j] += inv * (gr[j] - mg - yi[j] * mgy);
                }
                break;
            }
            case Op::Mean: {
                if (!parent_needs_grad(n.parents[0])) break;
                Tensor& pg = grad_buf(n.parents[0]);
                const double gv = g.item() / static_cast<double>(pg.numel());
                for (auto& v : pg.values()) v += gv;
                break;
            }
            case Op::L1Distance: {
                const Tensor& av = nodes_[static_cast<std::size_t>(n.parents[0])].value;
                const Tensor& bv = nodes_[static_cast<std::size_t>(n.parents[1])].value;
                const double gv = g.item() / static_cast<double>(av.numel());
                const bool need_a = parent_needs_grad(n.parents[0]);
                const bool need_b = parent_needs_grad(n.parents[1]);
                for (std::size_t i = 0; i < av.numel(); ++i) {
                    const double d = av[i] - bv[i];
                    const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                    if (need_a) grad_buf(n.parents[0])[i] += s * gv;
                    if (need_b) grad_buf(n.parents[1])[i] -= s * gv;
                }
                break;
            }
            case Op::CrossEntropy: {
                if (!parent_needs_grad(n.parents[0])) break;
                const Tensor& xv = nodes_[static_cast<std::size_t>(n.parents[0])].value;
                Tensor& pg = grad_buf(n.parents[0]);
                const int rows = xv.dim(0), cols = xv.dim(1);
                const double gv = g.item() / rows;
                for (int r = 0; r < rows; ++r) {
                    const double* xi = xv.data() + static_cast<std::size_t>(r) * cols;
                    double* pgr = pg.data() + static_cast<std::size_t>(r) * cols;
                    double mx = xi[0];
                    for (int j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
                    double sum = 0.0;
                    for (int j = 0; j < cols; ++j) sum += std::exp(xi[j] - mx);
                    for (int j = 0; j < cols; ++j) pgr[j] += gv * std::exp(xi[j] - mx) / sum;
                    pgr[n.aux[static_cast<std::size_t>(r)]] -= gv;
                }
                break;
            }
            case Op::CosineRows: {
                const Tensor& av = nodes_[static_cast<std::size_t>(n.parents[0])].value;
                const Tensor& bv = nodes_[static_cast<std::size_t>(n.parents[1])].value;
                const int rows = av.dim(0), cols = av.dim(1);
                const double gv = g.item() / rows;
                const bool need_a = parent_needs_grad(n.parents[0]);
                const bool need_b = parent_needs_grad(n.parents[1]);
                for (int r = 0; r < rows; ++r) {
                    const double* ar = av.data() + static_cast<std::size_t>(r) * cols;
                    const double* br = bv.data() + static_cast<std::size_t>(r) * cols;
                    double na = 0.0, nb = 0.0, dot = 0.0;
                    for (int j = 0; j < cols; ++j) {
                        na += ar[j] * ar[j];
                        nb += br[j] * br[j];
                        dot += ar[j] * br[j];
                    }
                    if (na == 0.0 || nb == 0.0) continue;
                    const double inv = 1.0 / std::sqrt(na * nb);
                    const double c = dot * inv;
                    if (need_a) {
                        double* pgr = grad_buf(n.parents[0]).data() + static_cast<std::size_t>(r) * cols;
                        for (int j = 0; j < cols; ++j) pgr[j] += gv * (br[j] * inv - c * ar[j] / na);
                    }
                    if (need_b) {
                        double* pgr = grad_buf(n.parents[1]).data() + static_cast<std::size_t>(r) * cols;
                        for (int j = 0; j < cols; ++j) pgr[j] += gv * (ar[j] * inv - c * br[j] / nb);
                    }
                }
                break;
            }
            case Op::EmbedLookup: {
                if (!parent_needs_grad(n.parents[0])) break;
                Tensor& pg = grad_buf(n.parents[0]);
                const int dim = n.value.dim(1);
                for (std::size_t i = 0; i < n.aux.size(); ++i) {
                    const double* gr = g.data() + i * static_cast<std::size_t>(dim);
                    double* pgr = pg.data() + static_cast<std::size_t>(n.aux[i]) * dim;
                    for (int j = 0; j < dim; ++j) pgr[j] += gr[j];
                }
                break;
            }
            case Op::Conv1d: {
                const Tensor& xv = nodes_[static_cast<std::size_t>(n.parents[0])].value;
                const Tensor& wv = nodes_[static_cast<std::size_t>(n.parents[1])].value;
                const int stride = n.aux[0], pad = n.aux[1];
                const int t_in = xv.dim(0), c_in = xv.dim(1);
                const int c_out = wv.dim(0), k = wv.dim(2);
                const int t_out = n.value.dim(0);
                const bool need_x = parent_needs_grad(n.parents[0]);
                const bool need_w = parent_needs_grad(n.parents[1]);
                const bool need_b = parent_needs_grad(n.parents[2]);
                if (need_b) {
                    Tensor& bg = grad_buf(n.parents[2]);
                    for (int to = 0; to < t_out; ++to)
                        for (int co = 0; co < c_out; ++co)
                            bg[static_cast<std::size_t>(co)] += g[static_cast<std::size_t>(to) * c_out + co];
                }
                if (!need_x && !need_w) break;
                for (int to = 0; to < t_out; ++to) {
                    const double* gr = g.data() + static_cast<std::size_t>(to) * c_out;
                    for (int kk = 0; kk < k; ++kk) {
                        const int t = to * stride - pad + kk;
                        if (t < 0 || t >= t_in) continue;
                        const double* xt = xv.data() + static_cast<std::size_t>(t) * c_in;
                        for (int co = 0; co < c_out; ++co) {
                            const double gvv = gr[co];
                            if (gvv == 0.0) continue;
                            const double* wr = wv.data() + (static_cast<std::size_t>(co) * c_in) * k + kk;
                            if (need_x) {
                                double* xg = grad_buf(n.parents[0]).data() + static_cast<std::size_t>(t) * c_in;
                                for (int ci = 0; ci < c_in; ++ci)
                                    xg[ci] += gvv * wr[static_cast<std::size_t>(ci) * k];
                            }
                            if (need_w) {
                                double* wg = grad_buf(n.parents[1]).data() +
                                             (static_cast<std::size_t>(co) * c_in) * k + kk;
                                for (int ci = 0; ci < c_in; ++ci)
                                    wg[static_cast<std::size_t>(ci) * k] += gvv * xt[ci];
                            }
                        }
                    }
                }
                break;
            }
            case Op::TConv1d: {
                const Tensor& xv = nodes_[static_cast<std::size_t>(n.parents[0])].value;
                const Tensor& wv = nodes_[static_cast<std::size_t>(n.parents[1])].value;
                const int stride = n.aux[0], pad = n.aux[1];
                const int t_in = xv.dim(0), c_in = xv.dim(1);
                const int c_out = wv.dim(1), k = wv.dim(2);
                const int t_out = n.value.dim(0);
                const bool need_x = parent_needs_grad(n.parents[0]);
                const bool need_w = parent_needs_grad(n.parents[1]);
                const bool need_b = parent_needs_grad(n.parents[2]);
                if (need_b) {
                    Tensor& bg = grad_buf(n.parents[2]);
                    for (int t = 0; t < t_out; ++t)
                        for (int co = 0; co < c_out; ++co)
                            bg[static_cast<std::size_t>(co)] += g[static_cast<std::size_t>(t) * c_out + co];
                }
                if (!need_x && !need_w) break;
                for (int ti = 0; ti < t_in; ++ti) {
                    const double* xt = xv.data() + static_cast<std::size_t>(ti) * c_in;
                    for (int kk = 0; kk < k; ++kk) {
                        const int t = ti * stride - pad + kk;
                        if (t < 0 || t >= t_out) continue;
                        const double* gr = g.data() + static_cast<std::size_t>(t) * c_out;
                        for (int ci = 0; ci < c_in; ++ci) {
                            const double* wr = wv.data() + (static_cast<std::size_t>(ci) * c_out) * k + kk;
                            if (need_x) {
                                double s = 0.0;
                                for (int co = 0; co < c_out; ++co)
                                    s += gr[co] * wr[static_cast<std::size_t>(co) * k];
                                grad_buf(n.parents[0])[static_cast<std::size_t>(ti) * c_in + ci] += s;
                            }
                            if (need_w) {
                                const double xvv = xt[ci];
                                if (xvv == 0.0) continue;
                                double* wg = grad_buf(n.parents[1]).data() +
                                             (static_cast<std::size_t>(ci) * c_out) * k + kk;
                                for (int co = 0; co < c_out; ++co)
                                    wg[static_cast<std::size_t>(co) * k] += xvv * gr[co];
                            }
                        }
                    }
                }
                break;
            }
            case Op::MeanPoolSegments: {
                if (!parent_needs_grad(n.parents[0])) break;
                Tensor& pg = grad_buf(n.parents[0]);
                const int dim = n.value.dim(1);
                const int segs = n.value.dim(0);
                for (int i = 0; i < segs; ++i) {
                    const int b = n.aux[static_cast<std::size_t>(i) * 2];
                    const int e = n.aux[static_cast<std::size_t>(i) * 2 + 1];
                    const double inv = 1.0 / (e - b);
                    const double* gr = g.data() + static_cast<std::size_t>(i) * dim;
                    for (int t = b; t < e; ++t) {
                        double* pgr = pg.data() + static_cast<std::size_t>(t) * dim;
                        for (int j = 0; j < dim; ++j) pgr[j] += inv * gr[j];
                    }
                }
                break;
            }
        }
    }
};

inline const Tensor& Var::val() const { return tape->node(id).value; }

}  // namespace dger
