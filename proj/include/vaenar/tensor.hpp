#pragma once

// Dense f64 tensors with reverse-mode automatic differentiation.
//
// Tensors are value-semantic handles onto shared nodes. A node's value is
// immutable once produced; gradients accumulate additively into a lazily
// allocated buffer. Ops record backward rules on the active Tape; replaying
// the tape in reverse order from a scalar loss populates every
// requires-grad leaf. Broadcasting is restricted to leading batch
// dimensions (the smaller operand's shape must be a suffix of the larger's,
// or be a single element).

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "vaenar/common.hpp"

namespace vaenar {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

class Tape;

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    const Tape* tape = nullptr;  // producing tape, null for leaves
    std::uint64_t id = 0;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor constant(Shape shape, double v);
    static Tensor from_data(Shape shape, std::vector<double> data);
    static Tensor scalar(double v);
    // Leaf with gradient accumulation (a trainable parameter).
    static Tensor leaf(Shape shape, std::vector<double> data);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int dim(int i) const;
    std::size_t size() const { return n_->value.size(); }

    const std::vector<double>& data() const { return n_->value; }
    double item() const;
    double at(std::initializer_list<int> idx) const;

    bool requires_grad() const { return n_ && n_->requires_grad; }
    const std::vector<double>& grad() const { return n_->grad; }
    void zero_grad() const;
    bool has_nonfinite() const;
    bool grad_nonfinite() const;

    // In-place value update for leaves (optimizer steps between tapes).
    void update_value(const std::vector<double>& delta) const;
    void assign_value(const std::vector<double>& v) const;

    std::shared_ptr<detail::Node> node() const { return n_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> n_;
};

// 2-D boolean attention mask; true = position allowed.
struct Mask {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> allow;

    static Mask causal(int T);
    static Mask all_allowed(int rows, int cols);
    bool at(int i, int j) const { return allow[static_cast<std::size_t>(i) * cols + j] != 0; }
};

class Tape {
public:
    struct Record {
        const char* op;
        std::vector<std::uint64_t> input_ids;
        std::uint64_t output_id;
        std::vector<std::shared_ptr<detail::Node>> inputs;  // keeps graph alive
        std::shared_ptr<detail::Node> output;
        std::function<void()> rule;
    };

    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    void record(const char* op, std::vector<std::shared_ptr<detail::Node>> inputs,
                std::shared_ptr<detail::Node> output, std::function<void()> rule);

    // Seeds d(loss)/d(loss) = 1 and replays recorded rules in reverse
    // topological order; each record fires at most once.
    void backward(const Tensor& loss);

    std::size_t size() const { return records_.size(); }

private:
    std::vector<Record> records_;
    Tape* prev_ = nullptr;
};

// RAII guard disabling gradient recording (inference / oracle evaluation).
struct NoGrad {
    NoGrad();
    ~NoGrad();

private:
    bool prev_;
};

bool grad_enabled();

// ---- ops ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
// k*x + c elementwise
Tensor affine(const Tensor& x, double k, double c);

Tensor vexp(const Tensor& x);
Tensor vlog(const Tensor& x);
Tensor vtanh(const Tensor& x);
Tensor vsqrt(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor matmul(const Tensor& a, const Tensor& b);
// a [m,k] * b[n,k]^T -> [m,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor detach(const Tensor& x);

Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// Numerically stabilized softmax over the last axis. Masked positions are
// exactly zero in the output and excluded from the max subtraction, so a
// perturbation of a masked entry cannot change the result in any bit.
Tensor softmax_last(const Tensor& x, const Mask* mask = nullptr);

// (x - mean) / sqrt(var + eps) per row over the last axis.
Tensor normalize_last(const Tensor& x, double eps = 1e-5);
// Same, per column over axis 0 (time-axis batch norm statistics).
Tensor normalize_cols(const Tensor& x, double eps = 1e-5);

// Length-preserving 1-D convolution, x [T, c_in], kernels [K, c_in, c_out].
// "same" centers the kernel (K odd); "causal" left-pads with K-1 zeros so
// output t depends on inputs <= t only.
Tensor conv1d_same(const Tensor& x, const Tensor& kernels);
Tensor conv1d_causal(const Tensor& x, const Tensor& kernels);

Tensor matinv(const Tensor& w);
Tensor logabsdet(const Tensor& w);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, double k);
Tensor operator*(double k, const Tensor& a);

// Convenience: populate gradients from a scalar loss via the active tape.
void backward(const Tensor& loss);

// Central finite differences, (f(x+he) - f(x-he)) / 2h per element.
// The oracle side of every gradient check; calls f only, never the tape.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double step);

// Stacks equal-shape [r,c] matrices into a constant [n,r,c] tensor
// (diagnostic outputs; never on the tape).
Tensor stack_detached(const std::vector<Tensor>& mats);

}  // namespace vaenar
