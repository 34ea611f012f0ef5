#pragma once

// Conditional Glow prior over frame-level latents. Each block applies
// actnorm, an invertible 1x1 convolution over the feature axis, and an
// affine coupling whose transform is a stack of decoder blocks querying the
// linguistic feature. The forward direction pushes base noise to a latent
// sample; the inverse direction recovers the base noise and an exact
// log-density via the change-of-variables formula.

#include <vector>

#include "vaenar/attention.hpp"
#include "vaenar/nn.hpp"
#include "vaenar/tensor.hpp"

namespace vaenar {

enum class FlowDirection { Forward, Inverse };

struct GlowConfig {
    int d_z = 128;
    int n_blocks = 6;
    int coupling_blocks = 2;  // decoder blocks per coupling transform
    AttentionConfig attn;     // coupling transform width = attn.d_model
    bool causal_coupling = true;

    void validate() const;
};

struct LatentSample {
    Tensor z;            // [N_r, d_z]
    Tensor log_density;  // scalar, defined only on the density path
};

// y = scale * x + bias per feature; logdet = N_r * sum log|scale|.
struct ActNorm {
    Tensor scale;
    Tensor bias;

    ActNorm() = default;
    explicit ActNorm(int d_z);

    struct Out {
        Tensor y;
        Tensor logdet;
    };
    Out apply(const Tensor& x, FlowDirection dir) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

// y = x W; logdet = N_r * log|det W|. W starts as a random rotation.
struct Invertible1x1 {
    Tensor w;

    Invertible1x1() = default;
    Invertible1x1(int d_z, Rng& rng);

    struct Out {
        Tensor y;
        Tensor logdet;
    };
    Out apply(const Tensor& x, FlowDirection dir) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

// Splits features into contiguous halves (x_a, x_b); x_a conditions an
// affine transform of x_b through decoder blocks attending the linguistic
// feature. The final projection starts at zero so the coupling is the
// identity at initialization.
struct AffineCoupling {
    Linear in_proj;
    std::vector<DecoderBlock> blocks;
    Linear out_proj;  // zero-initialized, d_model -> d_z
    int d_z = 0;
    bool causal = true;

    AffineCoupling() = default;
    AffineCoupling(const GlowConfig& cfg, Rng& rng);

    struct Out {
        Tensor y;
        Tensor logdet;
    };
    Out apply(const Tensor& x, const Tensor& memory, FlowDirection dir, const EvalCtx& ctx) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

struct GlowBlock {
    ActNorm actnorm;
    Invertible1x1 perm;
    AffineCoupling coupling;

    GlowBlock() = default;
    GlowBlock(const GlowConfig& cfg, Rng& rng);

    struct Out {
        Tensor y;
        Tensor logdet;  // in the applied direction
    };
    Out apply(const Tensor& x, const Tensor& memory, FlowDirection dir, const EvalCtx& ctx) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

class GlowPrior {
public:
    GlowPrior() = default;
    GlowPrior(const GlowConfig& cfg, Rng& rng);

    // Forward pass: base noise -> latent sample. log_density is left
    // undefined on this path.
    LatentSample sample(const Tensor& noise, const Tensor& memory, const EvalCtx& ctx) const;

    // Inverse pass: exact log P(z | memory), differentiable w.r.t. z,
    // memory and all flow parameters.
    Tensor log_density(const Tensor& z, const Tensor& memory, const EvalCtx& ctx) const;

    // Forward pass keeping the accumulated forward log-determinant
    // (round-trip consistency checks).
    GlowBlock::Out transform(const Tensor& x, const Tensor& memory, FlowDirection dir,
                             const EvalCtx& ctx) const;

    const std::vector<GlowBlock>& blocks() const { return blocks_; }
    std::vector<GlowBlock>& blocks() { return blocks_; }
    const GlowConfig& config() const { return cfg_; }

    // Replaces every 1x1 convolution weight with the identity; with fresh
    // actnorm and couplings this makes the whole flow the identity map.
    void set_identity_permutations();

    void register_params(ParamRegistry& reg, const std::string& prefix) const;

private:
    GlowConfig cfg_;
    std::vector<GlowBlock> blocks_;
};

// log N(x; 0, I) summed over all elements.
Tensor standard_normal_logpdf(const Tensor& x);

}  // namespace vaenar
