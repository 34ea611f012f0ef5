#include "vaenar/nn.hpp"

#include <cmath>

namespace vaenar {

namespace {

std::vector<double> glorot(std::size_t n, int fan_in, int fan_out, Rng& rng) {
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-limit, limit);
    return v;
}

}  // namespace

void ParamRegistry::add(const std::string& name, const Tensor& t, bool trainable) {
    for (const auto& p : items_)
        if (p.name == name) throw ConfigError("duplicate parameter name: " + name);
    items_.push_back(ParamRef{name, t, trainable});
}

void ParamRegistry::zero_grads() const {
    for (const auto& p : items_) p.tensor.zero_grad();
}

const ParamRef* ParamRegistry::find(const std::string& name) const {
    for (const auto& p : items_)
        if (p.name == name) return &p;
    return nullptr;
}

Linear::Linear(int in, int out, Rng& rng)
    : w(Tensor::leaf({in, out}, glorot(static_cast<std::size_t>(in) * out, in, out, rng))),
      b(Tensor::leaf({out}, std::vector<double>(out, 0.0))) {}

Linear Linear::zero_init(int in, int out) {
    Linear l;
    l.w = Tensor::leaf({in, out}, std::vector<double>(static_cast<std::size_t>(in) * out, 0.0));
    l.b = Tensor::leaf({out}, std::vector<double>(out, 0.0));
    return l;
}

Tensor Linear::forward(const Tensor& x) const { return add(matmul(x, w), b); }

void Linear::register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".w", w);
    reg.add(prefix + ".b", b);
}

LayerNorm::LayerNorm(int dim)
    : gamma(Tensor::leaf({dim}, std::vector<double>(dim, 1.0))),
      beta(Tensor::leaf({dim}, std::vector<double>(dim, 0.0))) {}

Tensor LayerNorm::forward(const Tensor& x) const {
    return add(mul(normalize_last(x), gamma), beta);
}

void LayerNorm::register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".gamma", gamma);
    reg.add(prefix + ".beta", beta);
}

BatchNorm::BatchNorm(int dim)
    : gamma(Tensor::leaf({dim}, std::vector<double>(dim, 1.0))),
      beta(Tensor::leaf({dim}, std::vector<double>(dim, 0.0))),
      running_mean(Tensor::from_data({dim}, std::vector<double>(dim, 0.0))),
      running_var(Tensor::from_data({dim}, std::vector<double>(dim, 1.0))) {}

Tensor BatchNorm::forward(const Tensor& x, const EvalCtx& ctx) const {
    if (ctx.training) {
        int rows = x.dim(0), cols = x.dim(1);
        // update running stats from batch statistics (side channel, untaped)
        std::vector<double> mu(cols, 0.0), var(cols, 0.0);
        const auto& xv = x.data();
        for (int c = 0; c < cols; ++c) {
            for (int r = 0; r < rows; ++r) mu[c] += xv[static_cast<std::size_t>(r) * cols + c];
            mu[c] /= rows;
            for (int r = 0; r < rows; ++r) {
                double d = xv[static_cast<std::size_t>(r) * cols + c] - mu[c];
                var[c] += d * d;
            }
            var[c] /= rows;
        }
        std::vector<double> rm = running_mean.data(), rv = running_var.data();
        for (int c = 0; c < cols; ++c) {
            rm[c] = (1.0 - momentum) * rm[c] + momentum * mu[c];
            rv[c] = (1.0 - momentum) * rv[c] + momentum * var[c];
        }
        running_mean.assign_value(rm);
        running_var.assign_value(rv);
        return add(mul(normalize_cols(x, eps), gamma), beta);
    }
    Tensor centered = sub(x, running_mean);
    Tensor denom = vsqrt(affine(running_var, 1.0, eps));
    return add(mul(div(centered, denom), gamma), beta);
}

void BatchNorm::register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".gamma", gamma);
    reg.add(prefix + ".beta", beta);
    reg.add(prefix + ".running_mean", running_mean, /*trainable=*/false);
    reg.add(prefix + ".running_var", running_var, /*trainable=*/false);
}

Embedding::Embedding(int vocab, int dim, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(vocab) * dim);
    double s = 1.0 / std::sqrt(static_cast<double>(dim));
    for (auto& x : v) x = rng.normal(0.0, s);
    table = Tensor::leaf({vocab, dim}, std::move(v));
}

Tensor Embedding::forward(const std::vector<int>& ids) const { return embedding(table, ids); }

void Embedding::register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".table", table);
}

Conv1d::Conv1d(int kernel_size, int c_in, int c_out, Rng& rng, bool causal_) : causal(causal_) {
    if (!causal && kernel_size % 2 == 0)
        throw ConfigError("Conv1d: same-padding kernel size must be odd");
    std::size_t n = static_cast<std::size_t>(kernel_size) * c_in * c_out;
    kernels = Tensor::leaf({kernel_size, c_in, c_out}, glorot(n, kernel_size * c_in, c_out, rng));
    bias = Tensor::leaf({c_out}, std::vector<double>(c_out, 0.0));
}

Tensor Conv1d::forward(const Tensor& x) const {
    Tensor y = causal ? conv1d_causal(x, kernels) : conv1d_same(x, kernels);
    return add(y, bias);
}

void Conv1d::register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".kernels", kernels);
    reg.add(prefix + ".bias", bias);
}

Tensor dropout(const Tensor& x, double rate, const EvalCtx& ctx) {
    if (rate < 0.0 || rate >= 1.0) {
        if (rate != 0.0) throw ConfigError("dropout rate must be in [0,1)");
    }
    if (!ctx.training || rate == 0.0) return x;
    if (ctx.rng == nullptr) throw ConfigError("dropout in training mode requires an RNG");
    double keep = 1.0 - rate;
    std::vector<double> mask(x.size());
    for (auto& m : mask) m = (ctx.rng->uniform() < keep) ? 1.0 / keep : 0.0;
    return mul(x, Tensor::from_data(x.shape(), std::move(mask)));
}

}  // namespace vaenar
