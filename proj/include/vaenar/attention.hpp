#pragma once

// Transformer building blocks shared by the text encoder, the posterior
// encoder, the prior's coupling transforms, and the decoder: sinusoidal
// positions, multi-head attention with optional causal masking, and
// post-norm residual blocks.

#include <vector>

#include "vaenar/nn.hpp"
#include "vaenar/tensor.hpp"

namespace vaenar {

struct AttentionConfig {
    int d_model = 256;
    int n_heads = 4;
    int d_ffn = 1024;
    double dropout_rate = 0.1;

    void validate() const;
};

// Per-head attention distributions, [n_heads, T_q, T_k]. Detached from the
// tape; alignment diagnostics read these directly.
struct AttentionWeights {
    Tensor weights;

    int n_heads() const { return weights.dim(0); }
    int t_query() const { return weights.dim(1); }
    int t_key() const { return weights.dim(2); }

    // Head-averaged matrix [T_q, T_k]; rows remain distributions.
    Tensor head_mean() const;
};

// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same).
Tensor sinusoidal_pe(int length, int d_model);

Mask causal_mask(int T);

struct MhaOutput {
    Tensor output;
    AttentionWeights weights;
};

struct MultiHeadAttention {
    Linear wq, wk, wv, wo;
    int n_heads = 0;
    double dropout_rate = 0.0;

    MultiHeadAttention() = default;
    MultiHeadAttention(const AttentionConfig& cfg, Rng& rng);

    MhaOutput forward(const Tensor& q, const Tensor& k, const Tensor& v, const Mask* mask,
                      const EvalCtx& ctx) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

struct FeedForward {
    Linear l1, l2;
    double dropout_rate = 0.0;

    FeedForward() = default;
    FeedForward(const AttentionConfig& cfg, Rng& rng);

    Tensor forward(const Tensor& x, const EvalCtx& ctx) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

// x + MHA(x,x,x) -> LN -> + FFN -> LN
struct SelfAttentionBlock {
    MultiHeadAttention mha;
    FeedForward ffn;
    LayerNorm ln1, ln2;
    double dropout_rate = 0.0;

    SelfAttentionBlock() = default;
    SelfAttentionBlock(const AttentionConfig& cfg, Rng& rng);

    Tensor forward(const Tensor& x, const Mask* mask, const EvalCtx& ctx) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

struct DecoderBlockOutput {
    Tensor output;
    AttentionWeights cross_weights;
};

// Masked self-attention, cross-attention against the linguistic memory
// (never masked), then FFN; residual + layer norm around each stage.
struct DecoderBlock {
    MultiHeadAttention self_attn;
    MultiHeadAttention cross_attn;
    FeedForward ffn;
    LayerNorm ln1, ln2, ln3;
    double dropout_rate = 0.0;

    DecoderBlock() = default;
    DecoderBlock(const AttentionConfig& cfg, Rng& rng);

    DecoderBlockOutput forward(const Tensor& x, const Tensor& memory, const Mask* self_mask,
                               const EvalCtx& ctx) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

}  // namespace vaenar
