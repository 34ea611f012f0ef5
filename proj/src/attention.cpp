#include "vaenar/attention.hpp"

#include <cmath>

namespace vaenar {

void AttentionConfig::validate() const {
    if (d_model <= 0 || n_heads <= 0 || d_ffn <= 0)
        throw ConfigError("attention config: dimensions must be positive");
    if (d_model % n_heads != 0)
        throw ConfigError("attention config: d_model " + std::to_string(d_model) +
                          " not divisible by n_heads " + std::to_string(n_heads));
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw ConfigError("attention config: dropout must be in [0,1)");
}

Tensor AttentionWeights::head_mean() const {
    int h = n_heads(), tq = t_query(), tk = t_key();
    std::vector<double> out(static_cast<std::size_t>(tq) * tk, 0.0);
    const auto& w = weights.data();
    for (int hh = 0; hh < h; ++hh)
        for (int i = 0; i < tq; ++i)
            for (int j = 0; j < tk; ++j)
                out[static_cast<std::size_t>(i) * tk + j] +=
                    w[(static_cast<std::size_t>(hh) * tq + i) * tk + j];
    for (auto& v : out) v /= h;
    return Tensor::from_data({tq, tk}, std::move(out));
}

Tensor sinusoidal_pe(int length, int d_model) {
    if (d_model % 2 != 0)
        throw ConfigError("sinusoidal_pe: d_model must be even, got " + std::to_string(d_model));
    if (length < 1) throw ShapeError("sinusoidal_pe: length must be >= 1");
    std::vector<double> pe(static_cast<std::size_t>(length) * d_model);
    for (int pos = 0; pos < length; ++pos) {
        for (int i = 0; i < d_model / 2; ++i) {
            double rate = std::pow(10000.0, 2.0 * i / static_cast<double>(d_model));
            double angle = pos / rate;
            pe[static_cast<std::size_t>(pos) * d_model + 2 * i] = std::sin(angle);
            pe[static_cast<std::size_t>(pos) * d_model + 2 * i + 1] = std::cos(angle);
        }
    }
    return Tensor::from_data({length, d_model}, std::move(pe));
}

Mask causal_mask(int T) { return Mask::causal(T); }

namespace {
const AttentionConfig& validated(const AttentionConfig& cfg) {
    cfg.validate();
    return cfg;
}
}  // namespace

MultiHeadAttention::MultiHeadAttention(const AttentionConfig& cfg, Rng& rng)
    : wq(validated(cfg).d_model, cfg.d_model, rng),
      wk(cfg.d_model, cfg.d_model, rng),
      wv(cfg.d_model, cfg.d_model, rng),
      wo(cfg.d_model, cfg.d_model, rng),
      n_heads(cfg.n_heads),
      dropout_rate(cfg.dropout_rate) {}

MhaOutput MultiHeadAttention::forward(const Tensor& q, const Tensor& k, const Tensor& v,
                                      const Mask* mask, const EvalCtx& ctx) const {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw ShapeError("attention: q/k/v must be 2-D sequences");
    int d_model = wq.w.dim(0);
    if (q.dim(1) != d_model || k.dim(1) != d_model || v.dim(1) != d_model)
        throw ShapeError("attention: q/k/v width must be d_model " + std::to_string(d_model));
    if (k.dim(0) != v.dim(0)) throw ShapeError("attention: key/value lengths differ");

    Tensor qp = wq.forward(q);
    Tensor kp = wk.forward(k);
    Tensor vp = wv.forward(v);

    int d_head = d_model / n_heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(d_head));

    std::vector<Tensor> head_outs;
    std::vector<Tensor> head_weights;
    head_outs.reserve(n_heads);
    head_weights.reserve(n_heads);
    Tensor ctx_cat;
    for (int h = 0; h < n_heads; ++h) {
        Tensor qh = slice_cols(qp, h * d_head, (h + 1) * d_head);
        Tensor kh = slice_cols(kp, h * d_head, (h + 1) * d_head);
        Tensor vh = slice_cols(vp, h * d_head, (h + 1) * d_head);
        Tensor scores = affine(matmul_nt(qh, kh), scale, 0.0);
        Tensor attn = softmax_last(scores, mask);
        head_weights.push_back(detach(attn));
        Tensor ctx_h = matmul(attn, vh);
        ctx_cat = (h == 0) ? ctx_h : concat_cols(ctx_cat, ctx_h);
    }

    Tensor out = wo.forward(ctx_cat);
    out = dropout(out, dropout_rate, ctx);
    return {out, AttentionWeights{stack_detached(head_weights)}};
}

void MultiHeadAttention::register_params(ParamRegistry& reg, const std::string& prefix) const {
    wq.register_params(reg, prefix + ".wq");
    wk.register_params(reg, prefix + ".wk");
    wv.register_params(reg, prefix + ".wv");
    wo.register_params(reg, prefix + ".wo");
}

FeedForward::FeedForward(const AttentionConfig& cfg, Rng& rng)
    : l1(cfg.d_model, cfg.d_ffn, rng), l2(cfg.d_ffn, cfg.d_model, rng),
      dropout_rate(cfg.dropout_rate) {}

Tensor FeedForward::forward(const Tensor& x, const EvalCtx& ctx) const {
    Tensor h = relu(l1.forward(x));
    h = dropout(h, dropout_rate, ctx);
    return l2.forward(h);
}

void FeedForward::register_params(ParamRegistry& reg, const std::string& prefix) const {
    l1.register_params(reg, prefix + ".l1");
    l2.register_params(reg, prefix + ".l2");
}

SelfAttentionBlock::SelfAttentionBlock(const AttentionConfig& cfg, Rng& rng)
    : mha(cfg, rng), ffn(cfg, rng), ln1(cfg.d_model), ln2(cfg.d_model),
      dropout_rate(cfg.dropout_rate) {}

Tensor SelfAttentionBlock::forward(const Tensor& x, const Mask* mask, const EvalCtx& ctx) const {
    Tensor h = ln1.forward(add(x, mha.forward(x, x, x, mask, ctx).output));
    Tensor f = dropout(ffn.forward(h, ctx), dropout_rate, ctx);
    return ln2.forward(add(h, f));
}

void SelfAttentionBlock::register_params(ParamRegistry& reg, const std::string& prefix) const {
    mha.register_params(reg, prefix + ".mha");
    ffn.register_params(reg, prefix + ".ffn");
    ln1.register_params(reg, prefix + ".ln1");
    ln2.register_params(reg, prefix + ".ln2");
}

DecoderBlock::DecoderBlock(const AttentionConfig& cfg, Rng& rng)
    : self_attn(cfg, rng), cross_attn(cfg, rng), ffn(cfg, rng), ln1(cfg.d_model),
      ln2(cfg.d_model), ln3(cfg.d_model), dropout_rate(cfg.dropout_rate) {}

DecoderBlockOutput DecoderBlock::forward(const Tensor& x, const Tensor& memory,
                                         const Mask* self_mask, const EvalCtx& ctx) const {
    Tensor h = ln1.forward(add(x, self_attn.forward(x, x, x, self_mask, ctx).output));
    MhaOutput cross = cross_attn.forward(h, memory, memory, nullptr, ctx);
    h = ln2.forward(add(h, cross.output));
    Tensor f = dropout(ffn.forward(h, ctx), dropout_rate, ctx);
    return {ln3.forward(add(h, f)), cross.weights};
}

void DecoderBlock::register_params(ParamRegistry& reg, const std::string& prefix) const {
    self_attn.register_params(reg, prefix + ".self");
    cross_attn.register_params(reg, prefix + ".cross");
    ffn.register_params(reg, prefix + ".ffn");
    ln1.register_params(reg, prefix + ".ln1");
    ln2.register_params(reg, prefix + ".ln2");
    ln3.register_params(reg, prefix + ".ln3");
}

}  // namespace vaenar
