#pragma once

// Dense double tensors (rank <= 4) with a dynamic reverse-mode tape.
// One Tape per forward/backward pass; tapes on disjoint data may run on
// different threads. Matrix products delegate to Eigen, everything else is
// plain loops so the recorded forward is bit-replayable.

#include <Eigen/Dense>
#include <algorithm>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <unordered_map>

#include "egi/common.hpp"

namespace egi::ten {

using Shape = std::vector<long>;

inline long numel(const Shape& s) {
    long n = 1;
    for (long d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) { return "[" + join(s) + "]"; }

enum class Op {
    leaf,
    add, sub, mul, div, neg,
    matmul,
    sum_axis, mean_axis, concat_axis, slice, reshape, broadcast,
    exp_, log_, sqrt_, square, tanh_, sigmoid_, silu,
    softmax_axis,
    gather_rows, scatter_add_rows,
    norm_last_axis,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::div: return "div";
        case Op::neg: return "neg";
        case Op::matmul: return "matmul";
        case Op::sum_axis: return "sum-over-axis";
        case Op::mean_axis: return "mean-over-axis";
        case Op::concat_axis: return "concat-over-axis";
        case Op::slice: return "slice";
        case Op::reshape: return "reshape";
        case Op::broadcast: return "broadcast";
        case Op::exp_: return "exp";
        case Op::log_: return "log";
        case Op::sqrt_: return "sqrt";
        case Op::square: return "square";
        case Op::tanh_: return "tanh";
        case Op::sigmoid_: return "sigmoid";
        case Op::silu: return "silu";
        case Op::softmax_axis: return "softmax-over-axis";
        case Op::gather_rows: return "gather-rows";
        case Op::scatter_add_rows: return "scatter-add-rows";
        case Op::norm_last_axis: return "norm-last-axis";
    }
    return "?";
}

inline Op op_from_name(const std::string& name) {
    static const std::map<std::string, Op> table = {
        {"add", Op::add}, {"sub", Op::sub}, {"mul", Op::mul}, {"div", Op::div},
        {"neg", Op::neg}, {"matmul", Op::matmul}, {"sum-over-axis", Op::sum_axis},
        {"mean-over-axis", Op::mean_axis}, {"concat-over-axis", Op::concat_axis},
        {"slice", Op::slice}, {"reshape", Op::reshape}, {"broadcast", Op::broadcast},
        {"exp", Op::exp_}, {"log", Op::log_}, {"sqrt", Op::sqrt_}, {"square", Op::square},
        {"tanh", Op::tanh_}, {"sigmoid", Op::sigmoid_}, {"silu", Op::silu},
        {"softmax-over-axis", Op::softmax_axis}, {"gather-rows", Op::gather_rows},
        {"scatter-add-rows", Op::scatter_add_rows}, {"norm-last-axis", Op::norm_last_axis},
    };
    auto it = table.find(name);
    if (it == table.end()) fail("unknown-primitive", name);
    return it->second;
}

// Attribute record for primitives that need one.
struct Attrs {
    long axis = 0;
    long start = 0;
    long stop = 0;
    long rows = 0;           // scatter-add-rows target row count
    double eps = 0.0;        // norm-last-axis stabilizer
    bool keepdim = false;
    Shape shape;             // reshape / broadcast target
    std::vector<long> indices;  // gather / scatter
};

using EigMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EigMat>;
using MapCM = Eigen::Map<const EigMat>;

class Tape;

// Lightweight handle; valid while its tape is alive.
struct Tensor {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Shape& shape() const;
    const std::vector<double>& value() const;
    const std::vector<double>& grad() const;
    long size() const { return numel(shape()); }
    double scalar() const;
};

class Tape {
public:
    struct Node {
        Shape shape;
        std::vector<double> val;
        std::vector<double> grad;  // allocated lazily during backward
        bool requires_grad = false;
        bool is_leaf = false;
    };
    struct RecordEntry {
        Op op;
        Attrs attrs;
        std::vector<int> inputs;
        int output;
    };

    Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad) {
        if (numel(shape) != static_cast<long>(values.size()))
            fail("shape-mismatch", "leaf " + shape_str(shape) + " vs " +
                                        std::to_string(values.size()) + " values");
        if (shape.size() > 4) fail("rank-overflow", "rank > 4 in leaf");
        Node n;
        n.shape = std::move(shape);
        n.val = std::move(values);
        n.requires_grad = requires_grad;
        n.is_leaf = true;
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size() - 1)};
    }

    Tensor leaf_scalar(double v, bool requires_grad = false) {
        return leaf({1}, {v}, requires_grad);
    }

    Tensor apply(Op op, const std::vector<Tensor>& inputs, const Attrs& attrs = {}) {
        if (consumed_) fail("record-consumed", "apply after backward; reset the tape");
        std::vector<int> ids;
        ids.reserve(inputs.size());
        bool rg = false;
        for (const Tensor& t : inputs) {
            if (t.tape != this) fail("cross-tape", std::string(op_name(op)) + " got a tensor from another record");
            ids.push_back(t.id);
            rg = rg || nodes_[t.id].requires_grad;
        }
        Node out;
        forward_op(op, attrs, ids, out);
        out.requires_grad = rg;
        if (out.shape.size() > 4)
            fail("rank-overflow", std::string(op_name(op)) + " produced rank > 4");
        if (check_finite_) {
            for (double v : out.val)
                if (!std::isfinite(v))
                    fail("non-finite", std::string(op_name(op)) + " produced a non-finite value");
        }
        nodes_.push_back(std::move(out));
        const int out_id = static_cast<int>(nodes_.size() - 1);
        entries_.push_back({op, attrs, std::move(ids), out_id});
        return {this, out_id};
    }

    // Reverse pass from a scalar loss. Fills gradients for every grad-tracked
    // node; returns the map for grad-tracked leaves. The record is consumed.
    std::unordered_map<int, std::vector<double>> backward(const Tensor& loss) {
        if (loss.tape != this) fail("cross-tape", "backward on foreign tensor");
        Node& ln = nodes_[loss.id];
        if (numel(ln.shape) != 1) fail("non-scalar-loss", "backward needs a scalar, got " + shape_str(ln.shape));
        if (!ln.requires_grad) fail("no-grad", "loss is not grad-tracked");
        for (Node& n : nodes_) n.grad.clear();
        ln.grad.assign(1, 1.0);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            Node& out = nodes_[it->output];
            if (!out.requires_grad || out.grad.empty()) continue;
            backward_op(*it);
        }
        std::unordered_map<int, std::vector<double>> grads;
        for (int i = 0; i < static_cast<int>(nodes_.size()); ++i) {
            Node& n = nodes_[i];
            if (n.is_leaf && n.requires_grad) {
                if (n.grad.empty()) n.grad.assign(n.val.size(), 0.0);
                grads.emplace(i, n.grad);
            }
        }
        consumed_ = true;
        entries_.clear();
        return grads;
    }

    // Recompute every recorded entry from current node values and compare
    // bit-for-bit. Valid only before backward.
    bool replay_matches() const {
        for (const RecordEntry& e : entries_) {
            Node scratch;
            const_cast<Tape*>(this)->forward_op(e.op, e.attrs, e.inputs, scratch);
            const Node& out = nodes_[e.output];
            if (scratch.shape != out.shape) return false;
            if (std::memcmp(scratch.val.data(), out.val.data(), out.val.size() * sizeof(double)) != 0)
                return false;
        }
        return true;
    }

    const std::vector<RecordEntry>& record() const { return entries_; }
    const Node& node(int id) const { return nodes_[id]; }
    std::vector<double>& grad_of(int id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.val.size(), 0.0);
        return n.grad;
    }
    std::size_t size() const { return nodes_.size(); }
    void set_check_finite(bool b) { check_finite_ = b; }

private:
    std::vector<Node> nodes_;
    std::vector<RecordEntry> entries_;
    bool consumed_ = false;
    bool check_finite_ = true;

    // ---- broadcasting for elementwise binary ops -------------------------
    // Supported: identical shapes; rank-1 [n] against [..., n]; size-1 tensor
    // against anything. Anything else requires an explicit broadcast.
    enum class BKind { same, a_small, b_small };
    struct BPlan { BKind kind; bool rank1; };  // rank1: small side is [n] over last axis

    static BPlan broadcast_plan(Op op, const Shape& a, const Shape& b) {
        if (a == b) return {BKind::same, false};
        const long na = numel(a), nb = numel(b);
        if (nb == 1) return {BKind::b_small, false};
        if (na == 1) return {BKind::a_small, false};
        if (b.size() == 1 && !a.empty() && a.back() == b[0]) return {BKind::b_small, true};
        if (a.size() == 1 && !b.empty() && b.back() == a[0]) return {BKind::a_small, true};
        fail("shape-mismatch", std::string(op_name(op)) + " " + shape_str(a) + " vs " + shape_str(b));
    }

    void forward_op(Op op, const Attrs& attrs, const std::vector<int>& in, Node& out) {
        switch (op) {
            case Op::leaf: fail("bad-op", "leaf is not applicable");
            case Op::add: case Op::sub: case Op::mul: case Op::div:
                ew_binary(op, in, out); return;
            case Op::neg: case Op::exp_: case Op::log_: case Op::sqrt_:
            case Op::square: case Op::tanh_: case Op::sigmoid_: case Op::silu:
                ew_unary(op, in, out); return;
            case Op::matmul: f_matmul(in, out); return;
            case Op::sum_axis: f_reduce(in, attrs, out, false); return;
            case Op::mean_axis: f_reduce(in, attrs, out, true); return;
            case Op::concat_axis: f_concat(in, attrs, out); return;
            case Op::slice: f_slice(in, attrs, out); return;
            case Op::reshape: f_reshape(in, attrs, out); return;
            case Op::broadcast: f_broadcast(in, attrs, out); return;
            case Op::softmax_axis: f_softmax(in, attrs, out); return;
            case Op::gather_rows: f_gather(in, attrs, out); return;
            case Op::scatter_add_rows: f_scatter(in, attrs, out); return;
            case Op::norm_last_axis: f_norm_last(in, attrs, out); return;
        }
    }

    void require_n(Op op, const std::vector<int>& in, std::size_t n) {
        if (in.size() != n)
            fail("arity", std::string(op_name(op)) + " expects " + std::to_string(n) + " inputs");
    }

    void ew_binary(Op op, const std::vector<int>& in, Node& out) {
        require_n(op, in, 2);
        const Node& A = nodes_[in[0]];
        const Node& B = nodes_[in[1]];
        const BPlan plan = broadcast_plan(op, A.shape, B.shape);
        const Node& big = plan.kind == BKind::a_small ? B : A;
        out.shape = big.shape;
        const long n = numel(out.shape);
        out.val.resize(n);
        const long tail = plan.rank1 ? big.shape.back() : 1;
        auto at = [&](const Node& x, BKind small_tag, long i) -> double {
            if (plan.kind == BKind::same || plan.kind != small_tag) return x.val[i];
            return plan.rank1 ? x.val[i % tail] : x.val[0];
        };
        if (op == Op::div) {
            for (long i = 0; i < n; ++i) {
                const double b = at(B, BKind::b_small, i);
                if (b == 0.0) fail("division-by-zero", "div");
                out.val[i] = at(A, BKind::a_small, i) / b;
            }
            return;
        }
        for (long i = 0; i < n; ++i) {
            const double a = at(A, BKind::a_small, i), b = at(B, BKind::b_small, i);
            out.val[i] = op == Op::add ? a + b : op == Op::sub ? a - b : a * b;
        }
    }

    void ew_unary(Op op, const std::vector<int>& in, Node& out) {
        require_n(op, in, 1);
        const Node& A = nodes_[in[0]];
        out.shape = A.shape;
        out.val.resize(A.val.size());
        for (std::size_t i = 0; i < A.val.size(); ++i) {
            const double x = A.val[i];
            switch (op) {
                case Op::neg: out.val[i] = -x; break;
                case Op::exp_: out.val[i] = std::exp(x); break;
                case Op::log_:
                    if (x <= 0.0) fail("log-domain", "log of non-positive value");
                    out.val[i] = std::log(x);
                    break;
                case Op::sqrt_:
                    if (x < 0.0) fail("sqrt-domain", "sqrt of negative value");
                    out.val[i] = std::sqrt(x);
                    break;
                case Op::square: out.val[i] = x * x; break;
                case Op::tanh_: out.val[i] = std::tanh(x); break;
                case Op::sigmoid_: out.val[i] = sigmoid(x); break;
                case Op::silu: out.val[i] = x * sigmoid(x); break;
                default: fail("bad-op", "unary");
            }
        }
    }

    static double sigmoid(double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }

    void f_matmul(const std::vector<int>& in, Node& out) {
        require_n(Op::matmul, in, 2);
        const Node& A = nodes_[in[0]];
        const Node& B = nodes_[in[1]];
        if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0])
            fail("shape-mismatch", "matmul " + shape_str(A.shape) + " @ " + shape_str(B.shape));
        const long m = A.shape[0], k = A.shape[1], n = B.shape[1];
        out.shape = {m, n};
        out.val.resize(m * n);
        MapM(out.val.data(), m, n).noalias() =
            MapCM(A.val.data(), m, k) * MapCM(B.val.data(), k, n);
    }

    static long norm_axis(Op op, long axis, std::size_t rank) {
        long a = axis < 0 ? axis + static_cast<long>(rank) : axis;
        if (a < 0 || a >= static_cast<long>(rank))
            fail("bad-axis", std::string(op_name(op)) + " axis " + std::to_string(axis));
        return a;
    }

    // Decompose shape around `axis` into (outer, n, inner).
    static void decomp(const Shape& s, long axis, long& outer, long& n, long& inner) {
        outer = 1;
        for (long i = 0; i < axis; ++i) outer *= s[i];
        n = s[axis];
        inner = 1;
        for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    }

    void f_reduce(const std::vector<int>& in, const Attrs& attrs, Node& out, bool mean) {
        require_n(mean ? Op::mean_axis : Op::sum_axis, in, 1);
        const Node& A = nodes_[in[0]];
        const long axis = norm_axis(Op::sum_axis, attrs.axis, A.shape.size());
        long outer, n, inner;
        decomp(A.shape, axis, outer, n, inner);
        out.shape.clear();
        for (long i = 0; i < static_cast<long>(A.shape.size()); ++i) {
            if (i == axis) {
                if (attrs.keepdim) out.shape.push_back(1);
            } else {
                out.shape.push_back(A.shape[i]);
            }
        }
        if (out.shape.empty()) out.shape = {1};
        out.val.assign(outer * inner, 0.0);
        for (long o = 0; o < outer; ++o)
            for (long j = 0; j < n; ++j) {
                const double* src = A.val.data() + (o * n + j) * inner;
                double* dst = out.val.data() + o * inner;
                for (long t = 0; t < inner; ++t) dst[t] += src[t];
            }
        if (mean)
            for (double& v : out.val) v /= static_cast<double>(n);
    }

    void f_concat(const std::vector<int>& in, const Attrs& attrs, Node& out) {
        if (in.empty()) fail("arity", "concat-over-axis needs inputs");
        const Node& first = nodes_[in[0]];
        const long axis = norm_axis(Op::concat_axis, attrs.axis, first.shape.size());
        out.shape = first.shape;
        long total = 0;
        for (int id : in) {
            const Node& x = nodes_[id];
            if (x.shape.size() != first.shape.size())
                fail("shape-mismatch", "concat-over-axis rank mismatch");
            for (long i = 0; i < static_cast<long>(first.shape.size()); ++i)
                if (i != axis && x.shape[i] != first.shape[i])
                    fail("shape-mismatch", "concat-over-axis " + shape_str(x.shape));
            total += x.shape[axis];
        }
        out.shape[axis] = total;
        long outer, n_out, inner;
        decomp(out.shape, axis, outer, n_out, inner);
        out.val.resize(numel(out.shape));
        long offset = 0;
        for (int id : in) {
            const Node& x = nodes_[id];
            const long nx = x.shape[axis];
            for (long o = 0; o < outer; ++o)
                std::memcpy(out.val.data() + (o * n_out + offset) * inner,
                            x.val.data() + o * nx * inner, nx * inner * sizeof(double));
            offset += nx;
        }
    }

    void f_slice(const std::vector<int>& in, const Attrs& attrs, Node& out) {
        require_n(Op::slice, in, 1);
        const Node& A = nodes_[in[0]];
        const long axis = norm_axis(Op::slice, attrs.axis, A.shape.size());
        const long n = A.shape[axis];
        if (attrs.start < 0 || attrs.stop > n || attrs.start >= attrs.stop)
            fail("bad-slice", "slice [" + std::to_string(attrs.start) + "," +
                                  std::to_string(attrs.stop) + ") of axis extent " + std::to_string(n));
        long outer, _n, inner;
        decomp(A.shape, axis, outer, _n, inner);
        out.shape = A.shape;
        out.shape[axis] = attrs.stop - attrs.start;
        out.val.resize(numel(out.shape));
        const long w = attrs.stop - attrs.start;
        for (long o = 0; o < outer; ++o)
            std::memcpy(out.val.data() + o * w * inner,
                        A.val.data() + (o * n + attrs.start) * inner, w * inner * sizeof(double));
    }

    void f_reshape(const std::vector<int>& in, const Attrs& attrs, Node& out) {
        require_n(Op::reshape, in, 1);
        const Node& A = nodes_[in[0]];
        if (numel(attrs.shape) != numel(A.shape))
            fail("shape-mismatch", "reshape " + shape_str(A.shape) + " -> " + shape_str(attrs.shape));
        out.shape = attrs.shape;
        out.val = A.val;
    }

    // Expansion cases: rank-1 [n] -> [..., n]; same-rank with size-1 axes
    // expanded; size-1 tensor -> anything.
    void f_broadcast(const std::vector<int>& in, const Attrs& attrs, Node& out) {
        require_n(Op::broadcast, in, 1);
        const Node& A = nodes_[in[0]];
        const Shape& tgt = attrs.shape;
        out.shape = tgt;
        out.val.resize(numel(tgt));
        if (numel(A.shape) == 1) {
            std::fill(out.val.begin(), out.val.end(), A.val[0]);
            return;
        }
        if (A.shape.size() == 1 && !tgt.empty() && tgt.back() == A.shape[0]) {
            const long n = A.shape[0], reps = numel(tgt) / n;
            for (long r = 0; r < reps; ++r)
                std::memcpy(out.val.data() + r * n, A.val.data(), n * sizeof(double));
            return;
        }
        if (A.shape.size() == tgt.size()) {
            for (std::size_t i = 0; i < tgt.size(); ++i)
                if (A.shape[i] != tgt[i] && A.shape[i] != 1)
                    fail("shape-mismatch", "broadcast " + shape_str(A.shape) + " -> " + shape_str(tgt));
            // strided copy
            const long rank = static_cast<long>(tgt.size());
            std::vector<long> idx(rank, 0);
            std::vector<long> astr(rank, 1);
            for (long i = rank - 2; i >= 0; --i) astr[i] = astr[i + 1] * A.shape[i + 1];
            const long total = numel(tgt);
            for (long flat = 0; flat < total; ++flat) {
                long a_off = 0;
                for (long i = 0; i < rank; ++i)
                    if (A.shape[i] != 1) a_off += idx[i] * astr[i];
                out.val[flat] = A.val[a_off];
                for (long i = rank - 1; i >= 0; --i) {
                    if (++idx[i] < tgt[i]) break;
                    idx[i] = 0;
                }
            }
            return;
        }
        fail("shape-mismatch", "broadcast " + shape_str(A.shape) + " -> " + shape_str(tgt));
    }

    void f_softmax(const std::vector<int>& in, const Attrs& attrs, Node& out) {
        require_n(Op::softmax_axis, in, 1);
        const Node& A = nodes_[in[0]];
        const long axis = norm_axis(Op::softmax_axis, attrs.axis, A.shape.size());
        long outer, n, inner;
        decomp(A.shape, axis, outer, n, inner);
        out.shape = A.shape;
        out.val.resize(A.val.size());
        for (long o = 0; o < outer; ++o)
            for (long t = 0; t < inner; ++t) {
                double mx = -std::numeric_limits<double>::infinity();
                for (long j = 0; j < n; ++j) mx = std::max(mx, A.val[(o * n + j) * inner + t]);
                double z = 0.0;
                for (long j = 0; j < n; ++j) {
                    const double e = std::exp(A.val[(o * n + j) * inner + t] - mx);
                    out.val[(o * n + j) * inner + t] = e;
                    z += e;
                }
                for (long j = 0; j < n; ++j) out.val[(o * n + j) * inner + t] /= z;
            }
    }

    void f_gather(const std::vector<int>& in, const Attrs& attrs, Node& out) {
        require_n(Op::gather_rows, in, 1);
        const Node& A = nodes_[in[0]];
        if (A.shape.size() != 2) fail("shape-mismatch", "gather-rows needs rank-2 input");
        const long R = A.shape[0], C = A.shape[1];
        out.shape = {static_cast<long>(attrs.indices.size()), C};
        out.val.resize(numel(out.shape));
        for (std::size_t k = 0; k < attrs.indices.size(); ++k) {
            const long i = attrs.indices[k];
            if (i < 0 || i >= R) fail("bad-index", "gather-rows index " + std::to_string(i));
            std::memcpy(out.val.data() + k * C, A.val.data() + i * C, C * sizeof(double));
        }
    }

    void f_scatter(const std::vector<int>& in, const Attrs& attrs, Node& out) {
        require_n(Op::scatter_add_rows, in, 1);
        const Node& A = nodes_[in[0]];
        if (A.shape.size() != 2) fail("shape-mismatch", "scatter-add-rows needs rank-2 input");
        if (static_cast<long>(attrs.indices.size()) != A.shape[0])
            fail("shape-mismatch", "scatter-add-rows index count vs rows");
        const long C = A.shape[1];
        if (attrs.rows <= 0) fail("bad-attr", "scatter-add-rows needs rows > 0");
        out.shape = {attrs.rows, C};
        out.val.assign(numel(out.shape), 0.0);
        for (std::size_t k = 0; k < attrs.indices.size(); ++k) {
            const long i = attrs.indices[k];
            if (i < 0 || i >= attrs.rows) fail("bad-index", "scatter-add-rows index " + std::to_string(i));
            const double* src = A.val.data() + k * C;
            double* dst = out.val.data() + i * C;
            for (long c = 0; c < C; ++c) dst[c] += src[c];
        }
    }

    void f_norm_last(const std::vector<int>& in, const Attrs& attrs, Node& out) {
        require_n(Op::norm_last_axis, in, 1);
        const Node& A = nodes_[in[0]];
        if (A.shape.empty()) fail("shape-mismatch", "norm-last-axis needs rank >= 1");
        const long n = A.shape.back();
        const long rows = numel(A.shape) / n;
        out.shape = Shape(A.shape.begin(), A.shape.end() - 1);
        if (out.shape.empty()) out.shape = {1};
        out.val.resize(rows);
        for (long r = 0; r < rows; ++r) {
            double s = attrs.eps * attrs.eps;
            const double* p = A.val.data() + r * n;
            for (long j = 0; j < n; ++j) s += p[j] * p[j];
            const double nrm = std::sqrt(s);
            if (nrm == 0.0 && attrs.eps == 0.0)
                fail("norm-of-zero", "norm-last-axis on a zero vector without eps");
            out.val[r] = nrm;
        }
    }

    // ---- backward rules ---------------------------------------------------

    void add_reduced(const Node& big_out_grad_holder, const std::vector<double>& g,
                     Node& target, const BPlan& plan, BKind tag, long tail) {
        std::vector<double>& tg = grad_alloc(target);
        if (plan.kind == BKind::same || plan.kind != tag) {
            for (std::size_t i = 0; i < g.size(); ++i) tg[i] += g[i];
        } else if (plan.rank1) {
            for (std::size_t i = 0; i < g.size(); ++i) tg[i % tail] += g[i];
        } else {
            double s = 0.0;
            for (double v : g) s += v;
            tg[0] += s;
        }
        (void)big_out_grad_holder;
    }

    static std::vector<double>& grad_alloc(Node& n) {
        if (n.grad.empty()) n.grad.assign(n.val.size(), 0.0);
        return n.grad;
    }

    void backward_op(const RecordEntry& e) {
        Node& out = nodes_[e.output];
        const std::vector<double>& g = out.grad;
        switch (e.op) {
            case Op::add: case Op::sub: case Op::mul: case Op::div: {
                Node& A = nodes_[e.inputs[0]];
                Node& B = nodes_[e.inputs[1]];
                const BPlan plan = broadcast_plan(e.op, A.shape, B.shape);
                const long tail =
                    plan.rank1 ? (plan.kind == BKind::b_small ? B.shape[0] : A.shape[0]) : 1;
                auto at = [&](const Node& x, BKind small_tag, long i) -> double {
                    if (plan.kind == BKind::same || plan.kind != small_tag) return x.val[i];
                    return plan.rank1 ? x.val[i % tail] : x.val[0];
                };
                const long n = static_cast<long>(g.size());
                if (A.requires_grad) {
                    std::vector<double> ga(n);
                    for (long i = 0; i < n; ++i) {
                        switch (e.op) {
                            case Op::add: case Op::sub: ga[i] = g[i]; break;
                            case Op::mul: ga[i] = g[i] * at(B, BKind::b_small, i); break;
                            default: ga[i] = g[i] / at(B, BKind::b_small, i); break;
                        }
                    }
                    add_reduced(out, ga, A, plan, BKind::a_small, tail);
                }
                if (B.requires_grad) {
                    std::vector<double> gb(n);
                    for (long i = 0; i < n; ++i) {
                        switch (e.op) {
                            case Op::add: gb[i] = g[i]; break;
                            case Op::sub: gb[i] = -g[i]; break;
                            case Op::mul: gb[i] = g[i] * at(A, BKind::a_small, i); break;
                            default: {
                                const double b = at(B, BKind::b_small, i);
                                gb[i] = -g[i] * at(A, BKind::a_small, i) / (b * b);
                            }
                        }
                    }
                    add_reduced(out, gb, B, plan, BKind::b_small, tail);
                }
                return;
            }
            case Op::neg: case Op::exp_: case Op::log_: case Op::sqrt_:
            case Op::square: case Op::tanh_: case Op::sigmoid_: case Op::silu: {
                Node& A = nodes_[e.inputs[0]];
                if (!A.requires_grad) return;
                std::vector<double>& ga = grad_alloc(A);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double x = A.val[i], y = out.val[i];
                    double d = 0.0;
                    switch (e.op) {
                        case Op::neg: d = -1.0; break;
                        case Op::exp_: d = y; break;
                        case Op::log_: d = 1.0 / x; break;
                        case Op::sqrt_:
                            if (y == 0.0) {
                                if (g[i] != 0.0) fail("sqrt-grad-at-zero", "sqrt backward at 0");
                                d = 0.0;
                            } else {
                                d = 0.5 / y;
                            }
                            break;
                        case Op::square: d = 2.0 * x; break;
                        case Op::tanh_: d = 1.0 - y * y; break;
                        case Op::sigmoid_: d = y * (1.0 - y); break;
                        case Op::silu: {
                            const double s = sigmoid(x);
                            d = s * (1.0 + x * (1.0 - s));
                            break;
                        }
                        default: break;
                    }
                    ga[i] += g[i] * d;
                }
                return;
            }
            case Op::matmul: {
                Node& A = nodes_[e.inputs[0]];
                Node& B = nodes_[e.inputs[1]];
                const long m = A.shape[0], k = A.shape[1], n = B.shape[1];
                MapCM G(g.data(), m, n);
                if (A.requires_grad) {
                    MapM GA(grad_alloc(A).data(), m, k);
                    GA.noalias() += G * MapCM(B.val.data(), k, n).transpose();
                }
                if (B.requires_grad) {
                    MapM GB(grad_alloc(B).data(), k, n);
                    GB.noalias() += MapCM(A.val.data(), m, k).transpose() * G;
                }
                return;
            }
            case Op::sum_axis: case Op::mean_axis: {
                Node& A = nodes_[e.inputs[0]];
                if (!A.requires_grad) return;
                const long axis = norm_axis(e.op, e.attrs.axis, A.shape.size());
                long outer, n, inner;
                decomp(A.shape, axis, outer, n, inner);
                const double scale = e.op == Op::mean_axis ? 1.0 / static_cast<double>(n) : 1.0;
                std::vector<double>& ga = grad_alloc(A);
                for (long o = 0; o < outer; ++o)
                    for (long j = 0; j < n; ++j) {
                        const double* src = g.data() + o * inner;
                        double* dst = ga.data() + (o * n + j) * inner;
                        for (long t = 0; t < inner; ++t) dst[t] += scale * src[t];
                    }
                return;
            }
            case Op::concat_axis: {
                const Node& first = nodes_[e.inputs[0]];
                const long axis = norm_axis(e.op, e.attrs.axis, first.shape.size());
                long outer, n_out, inner;
                decomp(out.shape, axis, outer, n_out, inner);
                long offset = 0;
                for (int id : e.inputs) {
                    Node& x = nodes_[id];
                    const long nx = x.shape[axis];
                    if (x.requires_grad) {
                        std::vector<double>& gx = grad_alloc(x);
                        for (long o = 0; o < outer; ++o) {
                            const double* src = g.data() + (o * n_out + offset) * inner;
                            double* dst = gx.data() + o * nx * inner;
                            for (long t = 0; t < nx * inner; ++t) dst[t] += src[t];
                        }
                    }
                    offset += nx;
                }
                return;
            }
            case Op::slice: {
                Node& A = nodes_[e.inputs[0]];
                if (!A.requires_grad) return;
                const long axis = norm_axis(e.op, e.attrs.axis, A.shape.size());
                long outer, n, inner;
                decomp(A.shape, axis, outer, n, inner);
                const long w = e.attrs.stop - e.attrs.start;
                std::vector<double>& ga = grad_alloc(A);
                for (long o = 0; o < outer; ++o) {
                    const double* src = g.data() + o * w * inner;
                    double* dst = ga.data() + (o * n + e.attrs.start) * inner;
                    for (long t = 0; t < w * inner; ++t) dst[t] += src[t];
                }
                return;
            }
            case Op::reshape: {
                Node& A = nodes_[e.inputs[0]];
                if (!A.requires_grad) return;
                std::vector<double>& ga = grad_alloc(A);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                return;
            }
            case Op::broadcast: {
                Node& A = nodes_[e.inputs[0]];
                if (!A.requires_grad) return;
                std::vector<double>& ga = grad_alloc(A);
                const Shape& tgt = out.shape;
                if (numel(A.shape) == 1) {
                    double s = 0.0;
                    for (double v : g) s += v;
                    ga[0] += s;
                    return;
                }
                if (A.shape.size() == 1) {
                    const long n = A.shape[0], reps = numel(tgt) / n;
                    for (long r = 0; r < reps; ++r)
                        for (long j = 0; j < n; ++j) ga[j] += g[r * n + j];
                    return;
                }
                const long rank = static_cast<long>(tgt.size());
                std::vector<long> idx(rank, 0), astr(rank, 1);
                for (long i = rank - 2; i >= 0; --i) astr[i] = astr[i + 1] * A.shape[i + 1];
                const long total = numel(tgt);
                for (long flat = 0; flat < total; ++flat) {
                    long a_off = 0;
                    for (long i = 0; i < rank; ++i)
                        if (A.shape[i] != 1) a_off += idx[i] * astr[i];
                    ga[a_off] += g[flat];
                    for (long i = rank - 1; i >= 0; --i) {
                        if (++idx[i] < tgt[i]) break;
                        idx[i] = 0;
                    }
                }
                return;
            }
            case Op::softmax_axis: {
                Node& A = nodes_[e.inputs[0]];
                if (!A.requires_grad) return;
                const long axis = norm_axis(e.op, e.attrs.axis, A.shape.size());
                long outer, n, inner;
                decomp(A.shape, axis, outer, n, inner);
                std::vector<double>& ga = grad_alloc(A);
                for (long o = 0; o < outer; ++o)
                    for (long t = 0; t < inner; ++t) {
                        double dot = 0.0;
                        for (long j = 0; j < n; ++j) {
                            const long off = (o * n + j) * inner + t;
                            dot += g[off] * out.val[off];
                        }
                        for (long j = 0; j < n; ++j) {
                            const long off = (o * n + j) * inner + t;
                            ga[off] += out.val[off] * (g[off] - dot);
                        }
                    }
                return;
            }
            case Op::gather_rows: {
                Node& A = nodes_[e.inputs[0]];
                if (!A.requires_grad) return;
                const long C = A.shape[1];
                std::vector<double>& ga = grad_alloc(A);
                for (std::size_t k = 0; k < e.attrs.indices.size(); ++k) {
                    const long i = e.attrs.indices[k];
                    const double* src = g.data() + k * C;
                    double* dst = ga.data() + i * C;
                    for (long c = 0; c < C; ++c) dst[c] += src[c];
                }
                return;
            }
            case Op::scatter_add_rows: {
                Node& A = nodes_[e.inputs[0]];
                if (!A.requires_grad) return;
                const long C = A.shape[1];
                std::vector<double>& ga = grad_alloc(A);
                for (std::size_t k = 0; k < e.attrs.indices.size(); ++k) {
                    const long i = e.attrs.indices[k];
                    const double* src = g.data() + i * C;
                    double* dst = ga.data() + k * C;
                    for (long c = 0; c < C; ++c) dst[c] += src[c];
                }
                return;
            }
            case Op::norm_last_axis: {
                Node& A = nodes_[e.inputs[0]];
                if (!A.requires_grad) return;
                const long n = A.shape.back();
                const long rows = numel(A.shape) / n;
                std::vector<double>& ga = grad_alloc(A);
                for (long r = 0; r < rows; ++r) {
                    const double nrm = out.val[r];
                    if (nrm == 0.0) continue;
                    const double gr = g[r] / nrm;
                    const double* p = A.val.data() + r * n;
                    double* d = ga.data() + r * n;
                    for (long j = 0; j < n; ++j) d[j] += gr * p[j];
                }
                return;
            }
            case Op::leaf: return;
        }
    }
};

inline const Shape& Tensor::shape() const { return tape->node(id).shape; }
inline const std::vector<double>& Tensor::value() const { return tape->node(id).val; }
inline const std::vector<double>& Tensor::grad() const { return tape->node(id).grad; }
inline double Tensor::scalar() const {
    if (size() != 1) fail("non-scalar", "scalar() on " + shape_str(shape()));
    return value()[0];
}

// Spec-facing generic entry point.
inline Tensor forward_primitive(const std::string& name, const std::vector<Tensor>& inputs,
                                const Attrs& attrs = {}) {
    if (inputs.empty()) fail("arity", "forward_primitive needs at least one input");
    return inputs[0].tape->apply(op_from_name(name), inputs, attrs);
}

// Typed wrappers.
inline Tensor add(Tensor a, Tensor b) { return a.tape->apply(Op::add, {a, b}); }
inline Tensor sub(Tensor a, Tensor b) { return a.tape->apply(Op::sub, {a, b}); }
inline Tensor mul(Tensor a, Tensor b) { return a.tape->apply(Op::mul, {a, b}); }
inline Tensor div(Tensor a, Tensor b) { return a.tape->apply(Op::div, {a, b}); }
inline Tensor neg(Tensor a) { return a.tape->apply(Op::neg, {a}); }
inline Tensor matmul(Tensor a, Tensor b) { return a.tape->apply(Op::matmul, {a, b}); }
inline Tensor exp(Tensor a) { return a.tape->apply(Op::exp_, {a}); }
inline Tensor log(Tensor a) { return a.tape->apply(Op::log_, {a}); }
inline Tensor sqrt(Tensor a) { return a.tape->apply(Op::sqrt_, {a}); }
inline Tensor square(Tensor a) { return a.tape->apply(Op::square, {a}); }
inline Tensor tanh(Tensor a) { return a.tape->apply(Op::tanh_, {a}); }
inline Tensor sigmoid(Tensor a) { return a.tape->apply(Op::sigmoid_, {a}); }
inline Tensor silu(Tensor a) { return a.tape->apply(Op::silu, {a}); }

inline Tensor sum_axis(Tensor a, long axis, bool keepdim = false) {
    Attrs at; at.axis = axis; at.keepdim = keepdim;
    return a.tape->apply(Op::sum_axis, {a}, at);
}
inline Tensor mean_axis(Tensor a, long axis, bool keepdim = false) {
    Attrs at; at.axis = axis; at.keepdim = keepdim;
    return a.tape->apply(Op::mean_axis, {a}, at);
}
inline Tensor concat_axis(const std::vector<Tensor>& xs, long axis) {
    Attrs at; at.axis = axis;
    return xs.at(0).tape->apply(Op::concat_axis, xs, at);
}
inline Tensor slice(Tensor a, long axis, long start, long stop) {
    Attrs at; at.axis = axis; at.start = start; at.stop = stop;
    return a.tape->apply(Op::slice, {a}, at);
}
inline Tensor reshape(Tensor a, Shape shape) {
    Attrs at; at.shape = std::move(shape);
    return a.tape->apply(Op::reshape, {a}, at);
}
inline Tensor broadcast(Tensor a, Shape shape) {
    Attrs at; at.shape = std::move(shape);
    return a.tape->apply(Op::broadcast, {a}, at);
}
inline Tensor softmax_axis(Tensor a, long axis) {
    Attrs at; at.axis = axis;
    return a.tape->apply(Op::softmax_axis, {a}, at);
}
inline Tensor gather_rows(Tensor a, std::vector<long> indices) {
    Attrs at; at.indices = std::move(indices);
    return a.tape->apply(Op::gather_rows, {a}, at);
}
inline Tensor scatter_add_rows(Tensor a, std::vector<long> indices, long rows) {
    Attrs at; at.indices = std::move(indices); at.rows = rows;
    return a.tape->apply(Op::scatter_add_rows, {a}, at);
}
inline Tensor norm_last_axis(Tensor a, double eps = 0.0) {
    Attrs at; at.eps = eps;
    return a.tape->apply(Op::norm_last_axis, {a}, at);
}

inline Tensor sum_all(Tensor a) {
    Tensor flat = reshape(a, {a.size()});
    return sum_axis(flat, 0);
}
inline Tensor mean_all(Tensor a) {
    Tensor flat = reshape(a, {a.size()});
    return mean_axis(flat, 0);
}

// Max over coordinates of |analytic - central difference| / (|cd| + 1e-12).
// f builds a fresh scalar graph from a leaf holding x. Probes every
// coordinate unless max_coords caps it (capped probes are chosen evenly).
inline double finite_diff_check(const std::function<Tensor(Tape&, Tensor)>& f,
                                const std::vector<double>& x, const Shape& shape, double step,
                                long max_coords = -1) {
    std::vector<double> analytic;
    {
        Tape tape;
        Tensor leaf = tape.leaf(shape, x, true);
        Tensor loss = f(tape, leaf);
        auto grads = tape.backward(loss);
        analytic = grads.at(leaf.id);
    }
    auto eval = [&](const std::vector<double>& v) {
        Tape tape;
        Tensor leaf = tape.leaf(shape, v, false);
        Tensor loss = f(tape, leaf);
        return loss.scalar();
    };
    const long n = static_cast<long>(x.size());
    long probes = max_coords <= 0 ? n : std::min(max_coords, n);
    double worst = 0.0;
    for (long k = 0; k < probes; ++k) {
        const long i = probes == n ? k : (k * n) / probes;
        std::vector<double> xp = x, xm = x;
        xp[i] += step;
        xm[i] -= step;
        const double cd = (eval(xp) - eval(xm)) / (2.0 * step);
        const double err = std::abs(analytic[i] - cd) / (std::abs(cd) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace egi::ten
