#pragma once

// Parameterized layers built on the tensor core: linear, layer norm,
// time-axis batch norm, embeddings, 1-D convolutions and dropout, plus the
// parameter registry the optimizer and checkpoints iterate over.

#include <string>
#include <utility>
#include <vector>

#include "vaenar/tensor.hpp"

namespace vaenar {

struct ParamRef {
    std::string name;
    Tensor tensor;
    bool trainable = true;  // running statistics are registered non-trainable
};

// Ordered parameter collection; registration order fixes optimizer state
// layout and checkpoint record order.
class ParamRegistry {
public:
    void add(const std::string& name, const Tensor& t, bool trainable = true);
    const std::vector<ParamRef>& items() const { return items_; }
    std::vector<ParamRef>& items() { return items_; }
    std::size_t size() const { return items_.size(); }
    void zero_grads() const;
    const ParamRef* find(const std::string& name) const;

private:
    std::vector<ParamRef> items_;
};

// Shared forward-pass context: dropout RNG and train/eval switch.
struct EvalCtx {
    Rng* rng = nullptr;
    bool training = false;
};

inline EvalCtx eval_ctx() { return EvalCtx{}; }

struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [out]

    Linear() = default;
    Linear(int in, int out, Rng& rng);
    static Linear zero_init(int in, int out);

    Tensor forward(const Tensor& x) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

struct LayerNorm {
    Tensor gamma;
    Tensor beta;

    LayerNorm() = default;
    explicit LayerNorm(int dim);

    Tensor forward(const Tensor& x) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

// Per-channel batch norm over the time axis of a [T, c] sequence.
struct BatchNorm {
    Tensor gamma;
    Tensor beta;
    Tensor running_mean;  // non-trainable
    Tensor running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    BatchNorm() = default;
    explicit BatchNorm(int dim);

    Tensor forward(const Tensor& x, const EvalCtx& ctx) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

struct Embedding {
    Tensor table;  // [vocab, dim]

    Embedding() = default;
    Embedding(int vocab, int dim, Rng& rng);

    Tensor forward(const std::vector<int>& ids) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

struct Conv1d {
    Tensor kernels;  // [K, c_in, c_out]
    Tensor bias;     // [c_out]
    bool causal = false;

    Conv1d() = default;
    Conv1d(int kernel_size, int c_in, int c_out, Rng& rng, bool causal = false);

    Tensor forward(const Tensor& x) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

// Inverted-scaling Bernoulli dropout; identity when rate is 0 or ctx is not
// training.
Tensor dropout(const Tensor& x, double rate, const EvalCtx& ctx);

}  // namespace vaenar
