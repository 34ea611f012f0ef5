#include "vaenar/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

namespace vaenar {

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};

thread_local Tape* g_active_tape = nullptr;
thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr new_node(Shape shape, std::vector<double> value, bool requires_grad) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
    return n;
}

bool recording(std::initializer_list<const Tensor*> ins) {
    if (!g_grad_enabled || g_active_tape == nullptr) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

Tensor finish_op(const char* op, std::initializer_list<const Tensor*> ins, Shape out_shape,
                 std::vector<double> out_data,
                 const std::function<std::function<void()>(const NodePtr&)>& make_rule) {
    bool rec = recording(ins);
    NodePtr out = new_node(std::move(out_shape), std::move(out_data), rec);
    if (rec) {
        out->tape = g_active_tape;
        std::vector<NodePtr> in_nodes;
        in_nodes.reserve(ins.size());
        for (const Tensor* t : ins) in_nodes.push_back(t->node());
        g_active_tape->record(op, std::move(in_nodes), out, make_rule(out));
    }
    return Tensor(out);
}

// Broadcast classification for elementwise binary ops.
enum class Bcast { Same, ASmall, BSmall };

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    for (std::size_t i = 0; i < small.size(); ++i)
        if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    return true;
}

Bcast classify(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return Bcast::Same;
    if (b.size() == 1 || is_suffix(b.shape(), a.shape())) return Bcast::BSmall;
    if (a.size() == 1 || is_suffix(a.shape(), b.shape())) return Bcast::ASmall;
    throw ShapeError(std::string(op) + ": shapes not broadcastable, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

void accumulate(const NodePtr& n, const std::vector<double>& g) {
    if (!n->requires_grad) return;
    n->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
}

// raw matmul helpers (no tape)
void mm_raw(const double* a, const double* b, double* y, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* yi = y + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = a[static_cast<std::size_t>(i) * k + p];
            if (av == 0.0) continue;
            const double* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) yi[j] += av * bp[j];
        }
    }
}

// y[m,n] += a[m,k] * b[n,k]^T
void mm_nt_raw(const double* a, const double* b, double* y, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* yi = y + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            yi[j] += acc;
        }
    }
}

// y[k,n] += a[m,k]^T * g[m,n]
void mm_tn_raw(const double* a, const double* g, double* y, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        const double* gi = g + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            double* yp = y + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) yp[j] += av * gi[j];
        }
    }
}

// LU factorization with partial pivoting; a is n*n row-major, overwritten.
// Returns false when a pivot underflows (singular to working precision).
bool lu_factor(std::vector<double>& a, int n, std::vector<int>& piv) {
    piv.resize(n);
    for (int i = 0; i < n; ++i) piv[i] = i;
    for (int col = 0; col < n; ++col) {
        int best = col;
        double best_abs = std::fabs(a[static_cast<std::size_t>(col) * n + col]);
        for (int r = col + 1; r < n; ++r) {
            double v = std::fabs(a[static_cast<std::size_t>(r) * n + col]);
            if (v > best_abs) {
                best_abs = v;
                best = r;
            }
        }
        if (best_abs == 0.0) return false;
        if (best != col) {
            for (int j = 0; j < n; ++j)
                std::swap(a[static_cast<std::size_t>(best) * n + j],
                          a[static_cast<std::size_t>(col) * n + j]);
            std::swap(piv[best], piv[col]);
        }
        double pivot = a[static_cast<std::size_t>(col) * n + col];
        for (int r = col + 1; r < n; ++r) {
            double f = a[static_cast<std::size_t>(r) * n + col] / pivot;
            a[static_cast<std::size_t>(r) * n + col] = f;
            if (f == 0.0) continue;
            for (int j = col + 1; j < n; ++j)
                a[static_cast<std::size_t>(r) * n + j] -= f * a[static_cast<std::size_t>(col) * n + j];
        }
    }
    return true;
}

// Solves LU x = e_{piv^-1} columns to build the full inverse.
std::vector<double> lu_inverse(const std::vector<double>& lu, const std::vector<int>& piv, int n) {
    std::vector<double> inv(static_cast<std::size_t>(n) * n, 0.0);
    std::vector<double> col(n);
    for (int c = 0; c < n; ++c) {
        for (int i = 0; i < n; ++i) col[i] = (piv[i] == c) ? 1.0 : 0.0;
        // forward substitution (unit lower)
        for (int i = 1; i < n; ++i) {
            double s = col[i];
            for (int j = 0; j < i; ++j) s -= lu[static_cast<std::size_t>(i) * n + j] * col[j];
            col[i] = s;
        }
        // back substitution
        for (int i = n - 1; i >= 0; --i) {
            double s = col[i];
            for (int j = i + 1; j < n; ++j) s -= lu[static_cast<std::size_t>(i) * n + j] * col[j];
            col[i] = s / lu[static_cast<std::size_t>(i) * n + i];
        }
        for (int i = 0; i < n; ++i) inv[static_cast<std::size_t>(i) * n + c] = col[i];
    }
    return inv;
}

constexpr double kSingularLogDet = -27.631021115928547;  // log(1e-12)

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d < 0) throw ShapeError("negative dimension in " + shape_str(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape) {
    std::size_t n = shape_size(shape);
    return Tensor(new_node(std::move(shape), std::vector<double>(n, 0.0), false));
}

Tensor Tensor::constant(Shape shape, double v) {
    std::size_t n = shape_size(shape);
    return Tensor(new_node(std::move(shape), std::vector<double>(n, v), false));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    if (shape_size(shape) != data.size())
        throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                         std::to_string(data.size()) + " elements");
    return Tensor(new_node(std::move(shape), std::move(data), false));
}

Tensor Tensor::scalar(double v) { return Tensor(new_node({1}, {v}, false)); }

Tensor Tensor::leaf(Shape shape, std::vector<double> data) {
    if (shape_size(shape) != data.size())
        throw ShapeError("leaf: " + shape_str(shape) + " does not hold " +
                         std::to_string(data.size()) + " elements");
    return Tensor(new_node(std::move(shape), std::move(data), true));
}

int Tensor::dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw ShapeError("dim index out of range");
    return n_->shape[i];
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
    return n_->value[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank()) throw ShapeError("at: rank mismatch");
    std::size_t off = 0;
    int k = 0;
    for (int i : idx) {
        if (i < 0 || i >= n_->shape[k]) throw ShapeError("at: index out of range");
        off = off * static_cast<std::size_t>(n_->shape[k]) + static_cast<std::size_t>(i);
        ++k;
    }
    return n_->value[off];
}

void Tensor::zero_grad() const {
    if (n_) n_->grad.clear();
}

bool Tensor::has_nonfinite() const {
    for (double v : n_->value)
        if (!std::isfinite(v)) return true;
    return false;
}

bool Tensor::grad_nonfinite() const {
    for (double v : n_->grad)
        if (!std::isfinite(v)) return true;
    return false;
}

void Tensor::update_value(const std::vector<double>& delta) const {
    if (delta.size() != n_->value.size()) throw ShapeError("update_value: size mismatch");
    for (std::size_t i = 0; i < delta.size(); ++i) n_->value[i] += delta[i];
}

void Tensor::assign_value(const std::vector<double>& v) const {
    if (v.size() != n_->value.size()) throw ShapeError("assign_value: size mismatch");
    n_->value = v;
}

// ---- Mask ----

Mask Mask::causal(int T) {
    if (T < 1) throw ShapeError("causal mask needs T >= 1");
    Mask m;
    m.rows = T;
    m.cols = T;
    m.allow.assign(static_cast<std::size_t>(T) * T, 0);
    for (int i = 0; i < T; ++i)
        for (int j = 0; j <= i; ++j) m.allow[static_cast<std::size_t>(i) * T + j] = 1;
    return m;
}

Mask Mask::all_allowed(int rows, int cols) {
    Mask m;
    m.rows = rows;
    m.cols = cols;
    m.allow.assign(static_cast<std::size_t>(rows) * cols, 1);
    return m;
}

// ---- Tape ----

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op, std::vector<std::shared_ptr<detail::Node>> inputs,
                  std::shared_ptr<detail::Node> output, std::function<void()> rule) {
    Record r;
    r.op = op;
    r.input_ids.reserve(inputs.size());
    for (const auto& n : inputs) r.input_ids.push_back(n->id);
    r.output_id = output->id;
    r.inputs = std::move(inputs);
    r.output = std::move(output);
    r.rule = std::move(rule);
    records_.push_back(std::move(r));
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " +
                                           shape_str(loss.shape()));
    auto n = loss.node();
    if (n->tape != this) throw Error("backward: loss was not produced on this tape");
    n->ensure_grad();
    n->grad[0] += 1.0;
    for (std::size_t i = records_.size(); i-- > 0;) {
        Record& r = records_[i];
        if (r.output->grad.empty()) continue;  // does not contribute to loss
        r.rule();
    }
}

void backward(const Tensor& loss) {
    Tape* t = Tape::active();
    if (!t) throw Error("backward: no active tape");
    t->backward(loss);
}

NoGrad::NoGrad() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGrad::~NoGrad() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- elementwise binary ----

namespace {

template <typename FwdFn, typename BwdFn>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdFn fwd, BwdFn bwd) {
    Bcast mode = classify(name, a, b);
    const Tensor& big = (mode == Bcast::ASmall) ? b : a;
    std::size_t n = big.size();
    std::size_t inner = (mode == Bcast::Same) ? n : ((mode == Bcast::BSmall) ? b.size() : a.size());
    if (inner == 0) throw ShapeError(std::string(name) + ": empty operand");

    std::vector<double> out(n);
    const std::vector<double>& av = a.data();
    const std::vector<double>& bv = b.data();
    switch (mode) {
        case Bcast::Same:
            for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
            break;
        case Bcast::BSmall:
            for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i % inner]);
            break;
        case Bcast::ASmall:
            for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i % inner], bv[i]);
            break;
    }

    return finish_op(name, {&a, &b}, big.shape(), std::move(out), [&](const NodePtr& out_node) {
        auto an = a.node();
        auto bn = b.node();
        return [an, bn, out_node, mode, inner, bwd]() {
            const std::vector<double>& g = out_node->grad;
            const std::vector<double>& y = out_node->value;
            std::size_t n2 = g.size();
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::size_t i = 0; i < n2; ++i) {
                std::size_t ia = (mode == Bcast::ASmall) ? (i % inner) : i;
                std::size_t ib = (mode == Bcast::BSmall) ? (i % inner) : i;
                double da = 0.0, db = 0.0;
                bwd(g[i], an->value[ia], bn->value[ib], y[i], da, db);
                if (an->requires_grad) an->grad[ia] += da;
                if (bn->requires_grad) bn->grad[ib] += db;
            }
        };
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double g, double, double, double, double& da, double& db) {
            da = g;
            db = g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double g, double, double, double, double& da, double& db) {
            da = g;
            db = -g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double g, double x, double y, double, double& da, double& db) {
            da = g * y;
            db = g * x;
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double g, double, double y, double out, double& da, double& db) {
            da = g / y;
            db = -g * out / y;
        });
}

Tensor affine(const Tensor& x, double k, double c) {
    std::vector<double> out(x.size());
    const auto& xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * xv[i] + c;
    return finish_op("affine", {&x}, x.shape(), std::move(out), [&](const NodePtr& o) {
        auto xn = x.node();
        return [xn, o, k]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) xn->grad[i] += k * o->grad[i];
        };
    });
}

// ---- elementwise unary ----

namespace {

template <typename FwdFn, typename BwdFn>
Tensor unary_op(const char* name, const Tensor& x, FwdFn fwd, BwdFn bwd) {
    std::vector<double> out(x.size());
    const auto& xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
    return finish_op(name, {&x}, x.shape(), std::move(out), [&](const NodePtr& o) {
        auto xn = x.node();
        return [xn, o, bwd]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i)
                xn->grad[i] += bwd(o->grad[i], xn->value[i], o->value[i]);
        };
    });
}

}  // namespace

Tensor vexp(const Tensor& x) {
    return unary_op(
        "exp", x, [](double v) { return std::exp(v); },
        [](double g, double, double y) { return g * y; });
}

Tensor vlog(const Tensor& x) {
    for (double v : x.data())
        if (v <= 0.0) throw NumericError("log: non-positive input " + std::to_string(v));
    return unary_op(
        "log", x, [](double v) { return std::log(v); },
        [](double g, double v, double) { return g / v; });
}

Tensor vtanh(const Tensor& x) {
    return unary_op(
        "tanh", x, [](double v) { return std::tanh(v); },
        [](double g, double, double y) { return g * (1.0 - y * y); });
}

Tensor vsqrt(const Tensor& x) {
    for (double v : x.data())
        if (v < 0.0) throw NumericError("sqrt: negative input");
    return unary_op(
        "sqrt", x, [](double v) { return std::sqrt(v); },
        [](double g, double, double y) { return y > 0.0 ? g / (2.0 * y) : 0.0; });
}

Tensor relu(const Tensor& x) {
    return unary_op(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double g, double v, double) { return v > 0.0 ? g : 0.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (lo > hi) throw ConfigError("clamp: lo > hi");
    return unary_op(
        "clamp", x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](double g, double v, double) { return (v >= lo && v <= hi) ? g : 0.0; });
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    mm_raw(a.data().data(), b.data().data(), out.data(), m, k, n);
    return finish_op("matmul", {&a, &b}, {m, n}, std::move(out), [&](const NodePtr& o) {
        auto an = a.node();
        auto bn = b.node();
        return [an, bn, o, m, k, n]() {
            const double* g = o->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                mm_nt_raw(g, bn->value.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                mm_tn_raw(an->value.data(), g, bn->grad.data(), m, k, n);
            }
        };
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
    int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    mm_nt_raw(a.data().data(), b.data().data(), out.data(), m, k, n);
    return finish_op("matmul_nt", {&a, &b}, {m, n}, std::move(out), [&](const NodePtr& o) {
        auto an = a.node();
        auto bn = b.node();
        return [an, bn, o, m, k, n]() {
            const double* g = o->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                mm_raw(g, bn->value.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                mm_tn_raw(g, an->value.data(), bn->grad.data(), m, n, k);
            }
        };
    });
}

// ---- reductions ----

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return finish_op("sum", {&x}, {1}, {s}, [&](const NodePtr& o) {
        auto xn = x.node();
        return [xn, o]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            double g = o->grad[0];
            for (double& gv : xn->grad) gv += g;
        };
    });
}

Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw ShapeError("mean of empty tensor");
    double s = 0.0;
    for (double v : x.data()) s += v;
    double inv = 1.0 / static_cast<double>(x.size());
    return finish_op("mean", {&x}, {1}, {s * inv}, [&](const NodePtr& o) {
        auto xn = x.node();
        return [xn, o, inv]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            double g = o->grad[0] * inv;
            for (double& gv : xn->grad) gv += g;
        };
    });
}

// ---- shape ops ----

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_size(shape) != x.size())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    std::vector<double> out = x.data();
    return finish_op("reshape", {&x}, std::move(shape), std::move(out), [&](const NodePtr& o) {
        auto xn = x.node();
        return [xn, o]() { accumulate(xn, o->grad); };
    });
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
    if (x.rank() < 1) throw ShapeError("slice_rows: rank 0");
    int rows = x.dim(0);
    if (r0 < 0 || r1 > rows || r0 >= r1) throw ShapeError("slice_rows: bad range");
    std::size_t inner = x.size() / static_cast<std::size_t>(rows);
    Shape out_shape = x.shape();
    out_shape[0] = r1 - r0;
    std::vector<double> out(x.data().begin() + r0 * inner, x.data().begin() + r1 * inner);
    return finish_op("slice_rows", {&x}, std::move(out_shape), std::move(out),
                     [&](const NodePtr& o) {
                         auto xn = x.node();
                         return [xn, o, r0, inner]() {
                             if (!xn->requires_grad) return;
                             xn->ensure_grad();
                             for (std::size_t i = 0; i < o->grad.size(); ++i)
                                 xn->grad[static_cast<std::size_t>(r0) * inner + i] += o->grad[i];
                         };
                     });
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
    if (x.rank() < 2) throw ShapeError("slice_cols: needs rank >= 2");
    int cols = x.dim(-1);
    if (c0 < 0 || c1 > cols || c0 >= c1) throw ShapeError("slice_cols: bad range");
    std::size_t rows = x.size() / static_cast<std::size_t>(cols);
    int width = c1 - c0;
    Shape out_shape = x.shape();
    out_shape.back() = width;
    std::vector<double> out(rows * static_cast<std::size_t>(width));
    const auto& xv = x.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (int c = 0; c < width; ++c) out[r * width + c] = xv[r * cols + c0 + c];
    return finish_op("slice_cols", {&x}, std::move(out_shape), std::move(out),
                     [&](const NodePtr& o) {
                         auto xn = x.node();
                         return [xn, o, rows, cols, c0, width]() {
                             if (!xn->requires_grad) return;
                             xn->ensure_grad();
                             for (std::size_t r = 0; r < rows; ++r)
                                 for (int c = 0; c < width; ++c)
                                     xn->grad[r * cols + c0 + c] += o->grad[r * width + c];
                         };
                     });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.rank() < 2) throw ShapeError("concat_cols: rank mismatch");
    for (int i = 0; i + 1 < a.rank(); ++i)
        if (a.dim(i) != b.dim(i)) throw ShapeError("concat_cols: leading dims differ");
    int ca = a.dim(-1), cb = b.dim(-1);
    std::size_t rows = a.size() / static_cast<std::size_t>(ca);
    Shape out_shape = a.shape();
    out_shape.back() = ca + cb;
    std::vector<double> out(rows * static_cast<std::size_t>(ca + cb));
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (int c = 0; c < ca; ++c) out[r * (ca + cb) + c] = av[r * ca + c];
        for (int c = 0; c < cb; ++c) out[r * (ca + cb) + ca + c] = bv[r * cb + c];
    }
    return finish_op("concat_cols", {&a, &b}, std::move(out_shape), std::move(out),
                     [&](const NodePtr& o) {
                         auto an = a.node();
                         auto bn = b.node();
                         return [an, bn, o, rows, ca, cb]() {
                             if (an->requires_grad) {
                                 an->ensure_grad();
                                 for (std::size_t r = 0; r < rows; ++r)
                                     for (int c = 0; c < ca; ++c)
                                         an->grad[r * ca + c] += o->grad[r * (ca + cb) + c];
                             }
                             if (bn->requires_grad) {
                                 bn->ensure_grad();
                                 for (std::size_t r = 0; r < rows; ++r)
                                     for (int c = 0; c < cb; ++c)
                                         bn->grad[r * cb + c] += o->grad[r * (ca + cb) + ca + c];
                             }
                         };
                     });
}

Tensor detach(const Tensor& x) {
    return Tensor::from_data(x.shape(), x.data());
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D");
    int v = table.dim(0), d = table.dim(1);
    if (ids.empty()) throw ShapeError("embedding: empty id sequence");
    for (int id : ids)
        if (id < 0 || id >= v)
            throw VocabError("embedding: id " + std::to_string(id) + " outside table of size " +
                             std::to_string(v));
    int m = static_cast<int>(ids.size());
    std::vector<double> out(static_cast<std::size_t>(m) * d);
    const auto& tv = table.data();
    for (int i = 0; i < m; ++i)
        std::memcpy(out.data() + static_cast<std::size_t>(i) * d,
                    tv.data() + static_cast<std::size_t>(ids[i]) * d, sizeof(double) * d);
    return finish_op("embedding", {&table}, {m, d}, std::move(out), [&](const NodePtr& o) {
        auto tn = table.node();
        auto ids_copy = ids;
        return [tn, o, ids_copy, d]() {
            if (!tn->requires_grad) return;
            tn->ensure_grad();
            for (std::size_t i = 0; i < ids_copy.size(); ++i)
                for (int c = 0; c < d; ++c)
                    tn->grad[static_cast<std::size_t>(ids_copy[i]) * d + c] +=
                        o->grad[i * d + c];
        };
    });
}

// ---- softmax ----

Tensor softmax_last(const Tensor& x, const Mask* mask) {
    if (x.rank() < 1) throw ShapeError("softmax_last: rank 0");
    int cols = x.dim(-1);
    std::size_t rows = x.size() / static_cast<std::size_t>(cols);
    int mask_rows = 1;
    if (mask) {
        if (mask->cols != cols)
            throw ShapeError("softmax_last: mask cols " + std::to_string(mask->cols) +
                             " != " + std::to_string(cols));
        mask_rows = mask->rows;
        std::size_t per_block = static_cast<std::size_t>(mask_rows);
        if (rows % per_block != 0)
            throw ShapeError("softmax_last: mask rows do not tile input rows");
    }

    std::vector<double> out(x.size(), 0.0);
    const auto& xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        int mr = mask ? static_cast<int>(r % static_cast<std::size_t>(mask_rows)) : 0;
        const double* xr = xv.data() + r * cols;
        double* yr = out.data() + r * cols;
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < cols; ++c)
            if (!mask || mask->at(mr, c)) mx = std::max(mx, xr[c]);
        if (!std::isfinite(mx))
            throw NumericError("softmax_last: fully masked row " + std::to_string(r));
        double s = 0.0;
        for (int c = 0; c < cols; ++c) {
            if (mask && !mask->at(mr, c)) continue;
            double e = std::exp(xr[c] - mx);
            yr[c] = e;
            s += e;
        }
        for (int c = 0; c < cols; ++c) {
            if (mask && !mask->at(mr, c)) {
                yr[c] = 0.0;
                continue;
            }
            yr[c] /= s;
        }
    }

    return finish_op("softmax_last", {&x}, x.shape(), std::move(out), [&](const NodePtr& o) {
        auto xn = x.node();
        return [xn, o, rows, cols]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = o->value.data() + r * cols;
                const double* g = o->grad.data() + r * cols;
                double dot = 0.0;
                for (int c = 0; c < cols; ++c) dot += y[c] * g[c];
                double* gx = xn->grad.data() + r * cols;
                for (int c = 0; c < cols; ++c) gx[c] += y[c] * (g[c] - dot);
            }
        };
    });
}

// ---- normalization ----

Tensor normalize_last(const Tensor& x, double eps) {
    if (x.rank() < 1) throw ShapeError("normalize_last: rank 0");
    int cols = x.dim(-1);
    std::size_t rows = x.size() / static_cast<std::size_t>(cols);
    std::vector<double> out(x.size());
    std::vector<double> inv_std(rows);
    const auto& xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * cols;
        double mu = 0.0;
        for (int c = 0; c < cols; ++c) mu += xr[c];
        mu /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) {
            double d = xr[c] - mu;
            var += d * d;
        }
        var /= cols;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        double* yr = out.data() + r * cols;
        for (int c = 0; c < cols; ++c) yr[c] = (xr[c] - mu) * is;
    }
    return finish_op("normalize_last", {&x}, x.shape(), std::move(out), [&](const NodePtr& o) {
        auto xn = x.node();
        auto istd = std::move(inv_std);
        return [xn, o, istd, rows, cols]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = o->value.data() + r * cols;
                const double* g = o->grad.data() + r * cols;
                double m1 = 0.0, m2 = 0.0;
                for (int c = 0; c < cols; ++c) {
                    m1 += g[c];
                    m2 += g[c] * y[c];
                }
                m1 /= cols;
                m2 /= cols;
                double* gx = xn->grad.data() + r * cols;
                for (int c = 0; c < cols; ++c) gx[c] += istd[r] * (g[c] - m1 - y[c] * m2);
            }
        };
    });
}

Tensor normalize_cols(const Tensor& x, double eps) {
    if (x.rank() != 2) throw ShapeError("normalize_cols: needs rank 2");
    int rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(x.size());
    std::vector<double> inv_std(cols);
    const auto& xv = x.data();
    for (int c = 0; c < cols; ++c) {
        double mu = 0.0;
        for (int r = 0; r < rows; ++r) mu += xv[static_cast<std::size_t>(r) * cols + c];
        mu /= rows;
        double var = 0.0;
        for (int r = 0; r < rows; ++r) {
            double d = xv[static_cast<std::size_t>(r) * cols + c] - mu;
            var += d * d;
        }
        var /= rows;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[c] = is;
        for (int r = 0; r < rows; ++r)
            out[static_cast<std::size_t>(r) * cols + c] =
                (xv[static_cast<std::size_t>(r) * cols + c] - mu) * is;
    }
    return finish_op("normalize_cols", {&x}, x.shape(), std::move(out), [&](const NodePtr& o) {
        auto xn = x.node();
        auto istd = std::move(inv_std);
        return [xn, o, istd, rows, cols]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (int c = 0; c < cols; ++c) {
                double m1 = 0.0, m2 = 0.0;
                for (int r = 0; r < rows; ++r) {
                    std::size_t i = static_cast<std::size_t>(r) * cols + c;
                    m1 += o->grad[i];
                    m2 += o->grad[i] * o->value[i];
                }
                m1 /= rows;
                m2 /= rows;
                for (int r = 0; r < rows; ++r) {
                    std::size_t i = static_cast<std::size_t>(r) * cols + c;
                    xn->grad[i] += istd[c] * (o->grad[i] - m1 - o->value[i] * m2);
                }
            }
        };
    });
}

// ---- convolution ----

namespace {

// shift_of(t, dt): input row index feeding output row t at kernel tap dt.
Tensor conv1d_impl(const char* name, const Tensor& x, const Tensor& kernels, int left_pad) {
    if (x.rank() != 2 || kernels.rank() != 3)
        throw ShapeError(std::string(name) + ": x must be [T,c_in], kernels [K,c_in,c_out]");
    int T = x.dim(0), cin = x.dim(1);
    int K = kernels.dim(0), kin = kernels.dim(1), cout = kernels.dim(2);
    if (kin != cin)
        throw ShapeError(std::string(name) + ": channel mismatch, x has " + std::to_string(cin) +
                         ", kernels expect " + std::to_string(kin));
    if (T < 1) throw ShapeError(std::string(name) + ": empty input");

    std::vector<double> out(static_cast<std::size_t>(T) * cout, 0.0);
    const auto& xv = x.data();
    const auto& kv = kernels.data();
    for (int t = 0; t < T; ++t) {
        double* yt = out.data() + static_cast<std::size_t>(t) * cout;
        for (int dt = 0; dt < K; ++dt) {
            int src = t + dt - left_pad;
            if (src < 0 || src >= T) continue;
            const double* xs = xv.data() + static_cast<std::size_t>(src) * cin;
            const double* kdt = kv.data() + static_cast<std::size_t>(dt) * cin * cout;
            for (int i = 0; i < cin; ++i) {
                double xvv = xs[i];
                if (xvv == 0.0) continue;
                const double* krow = kdt + static_cast<std::size_t>(i) * cout;
                for (int o = 0; o < cout; ++o) yt[o] += xvv * krow[o];
            }
        }
    }

    return finish_op(name, {&x, &kernels}, {T, cout}, std::move(out), [&](const NodePtr& on) {
        auto xn = x.node();
        auto kn = kernels.node();
        return [xn, kn, on, T, cin, K, cout, left_pad]() {
            const double* g = on->grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int t = 0; t < T; ++t) {
                    const double* gt = g + static_cast<std::size_t>(t) * cout;
                    for (int dt = 0; dt < K; ++dt) {
                        int src = t + dt - left_pad;
                        if (src < 0 || src >= T) continue;
                        double* gx = xn->grad.data() + static_cast<std::size_t>(src) * cin;
                        const double* kdt =
                            kn->value.data() + static_cast<std::size_t>(dt) * cin * cout;
                        for (int i = 0; i < cin; ++i) {
                            double acc = 0.0;
                            const double* krow = kdt + static_cast<std::size_t>(i) * cout;
                            for (int o = 0; o < cout; ++o) acc += gt[o] * krow[o];
                            gx[i] += acc;
                        }
                    }
                }
            }
            if (kn->requires_grad) {
                kn->ensure_grad();
                for (int t = 0; t < T; ++t) {
                    const double* gt = g + static_cast<std::size_t>(t) * cout;
                    for (int dt = 0; dt < K; ++dt) {
                        int src = t + dt - left_pad;
                        if (src < 0 || src >= T) continue;
                        const double* xs = xn->value.data() + static_cast<std::size_t>(src) * cin;
                        double* gk = kn->grad.data() + static_cast<std::size_t>(dt) * cin * cout;
                        for (int i = 0; i < cin; ++i) {
                            double xvv = xs[i];
                            if (xvv == 0.0) continue;
                            double* gkrow = gk + static_cast<std::size_t>(i) * cout;
                            for (int o = 0; o < cout; ++o) gkrow[o] += xvv * gt[o];
                        }
                    }
                }
            }
        };
    });
}

}  // namespace

Tensor conv1d_same(const Tensor& x, const Tensor& kernels) {
    if (kernels.rank() != 3) throw ShapeError("conv1d_same: kernels must be [K,c_in,c_out]");
    int K = kernels.dim(0);
    if (K % 2 == 0)
        throw ConfigError("conv1d_same: kernel size must be odd, got " + std::to_string(K));
    return conv1d_impl("conv1d_same", x, kernels, (K - 1) / 2);
}

Tensor conv1d_causal(const Tensor& x, const Tensor& kernels) {
    if (kernels.rank() != 3) throw ShapeError("conv1d_causal: kernels must be [K,c_in,c_out]");
    return conv1d_impl("conv1d_causal", x, kernels, kernels.dim(0) - 1);
}

// ---- matrix inverse / log|det| ----

namespace {

void check_square(const char* op, const Tensor& w) {
    if (w.rank() != 2 || w.dim(0) != w.dim(1))
        throw ShapeError(std::string(op) + ": needs a square matrix, got " + shape_str(w.shape()));
}

// Factors w and returns (inverse, logabsdet); throws on |det| < 1e-12.
std::pair<std::vector<double>, double> inverse_and_logdet(const char* op, const Tensor& w) {
    int n = w.dim(0);
    std::vector<double> lu = w.data();
    std::vector<int> piv;
    if (!lu_factor(lu, n, piv)) throw NumericError(std::string(op) + ": singular matrix");
    double ld = 0.0;
    for (int i = 0; i < n; ++i) ld += std::log(std::fabs(lu[static_cast<std::size_t>(i) * n + i]));
    if (ld < kSingularLogDet)
        throw NumericError(std::string(op) + ": |det| below 1e-12, matrix is singular");
    return {lu_inverse(lu, piv, n), ld};
}

}  // namespace

Tensor matinv(const Tensor& w) {
    check_square("matinv", w);
    int n = w.dim(0);
    auto [inv, ld] = inverse_and_logdet("matinv", w);
    (void)ld;
    return finish_op("matinv", {&w}, {n, n}, std::move(inv), [&](const NodePtr& o) {
        auto wn = w.node();
        return [wn, o, n]() {
            if (!wn->requires_grad) return;
            wn->ensure_grad();
            // dW = -Z^T G Z^T, Z = W^{-1} (the op output)
            const std::vector<double>& z = o->value;
            const std::vector<double>& g = o->grad;
            std::vector<double> zt(static_cast<std::size_t>(n) * n);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j)
                    zt[static_cast<std::size_t>(i) * n + j] = z[static_cast<std::size_t>(j) * n + i];
            std::vector<double> tmp(static_cast<std::size_t>(n) * n, 0.0);
            mm_raw(zt.data(), g.data(), tmp.data(), n, n, n);
            std::vector<double> res(static_cast<std::size_t>(n) * n, 0.0);
            mm_raw(tmp.data(), zt.data(), res.data(), n, n, n);
            for (std::size_t i = 0; i < res.size(); ++i) wn->grad[i] -= res[i];
        };
    });
}

Tensor logabsdet(const Tensor& w) {
    check_square("logabsdet", w);
    int n = w.dim(0);
    auto [inv, ld] = inverse_and_logdet("logabsdet", w);
    return finish_op("logabsdet", {&w}, {1}, {ld}, [&](const NodePtr& o) {
        auto wn = w.node();
        auto z = std::move(inv);
        return [wn, o, z, n]() {
            if (!wn->requires_grad) return;
            wn->ensure_grad();
            double g = o->grad[0];
            // d log|det W| / dW = (W^{-1})^T
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j)
                    wn->grad[static_cast<std::size_t>(i) * n + j] +=
                        g * z[static_cast<std::size_t>(j) * n + i];
        };
    });
}

// ---- operators ----

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator*(const Tensor& a, double k) { return affine(a, k, 0.0); }
Tensor operator*(double k, const Tensor& a) { return affine(a, k, 0.0); }

// ---- oracle ----

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double step) {
    if (step <= 0.0) throw ConfigError("finite_diff_grad: step must be positive");
    std::vector<double> g(x.size());
    std::vector<double> base = x.data();
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> up = base, dn = base;
        up[i] += step;
        dn[i] -= step;
        double fu = f(Tensor::from_data(x.shape(), std::move(up)));
        double fd = f(Tensor::from_data(x.shape(), std::move(dn)));
        g[i] = (fu - fd) / (2.0 * step);
    }
    return Tensor::from_data(x.shape(), std::move(g));
}

Tensor stack_detached(const std::vector<Tensor>& mats) {
    if (mats.empty()) throw ShapeError("stack_detached: empty list");
    const Shape& s = mats[0].shape();
    for (const auto& m : mats)
        if (m.shape() != s) throw ShapeError("stack_detached: shape mismatch");
    Shape out_shape;
    out_shape.push_back(static_cast<int>(mats.size()));
    for (int d : s) out_shape.push_back(d);
    std::vector<double> out;
    out.reserve(mats.size() * mats[0].size());
    for (const auto& m : mats) out.insert(out.end(), m.data().begin(), m.data().end());
    return Tensor::from_data(std::move(out_shape), std::move(out));
}

}  // namespace vaenar
