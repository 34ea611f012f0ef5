#include "vaenar/glow.hpp"

#include <cmath>

namespace vaenar {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

// QR of a random Gaussian matrix via modified Gram-Schmidt; |det Q| = 1.
std::vector<double> random_rotation(int n, Rng& rng) {
    std::vector<double> a(static_cast<std::size_t>(n) * n);
    for (auto& v : a) v = rng.normal();
    std::vector<double> q(static_cast<std::size_t>(n) * n, 0.0);
    for (int c = 0; c < n; ++c) {
        std::vector<double> col(n);
        for (int r = 0; r < n; ++r) col[r] = a[static_cast<std::size_t>(r) * n + c];
        for (int p = 0; p < c; ++p) {
            double dot = 0.0;
            for (int r = 0; r < n; ++r) dot += col[r] * q[static_cast<std::size_t>(r) * n + p];
            for (int r = 0; r < n; ++r) col[r] -= dot * q[static_cast<std::size_t>(r) * n + p];
        }
        double norm = 0.0;
        for (double v : col) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-8) throw NumericError("random_rotation: degenerate column");
        for (int r = 0; r < n; ++r) q[static_cast<std::size_t>(r) * n + c] = col[r] / norm;
    }
    return q;
}

void check_latent(const char* op, const Tensor& x) {
    if (x.rank() != 2) throw ShapeError(std::string(op) + ": latent must be [N_r, d_z]");
}

}  // namespace

void GlowConfig::validate() const {
    if (d_z <= 0 || d_z % 2 != 0)
        throw ConfigError("glow config: d_z must be positive and even, got " + std::to_string(d_z));
    if (n_blocks < 1) throw ConfigError("glow config: n_blocks must be >= 1");
    if (coupling_blocks < 1) throw ConfigError("glow config: coupling_blocks must be >= 1");
    attn.validate();
}

// ---- ActNorm ----

ActNorm::ActNorm(int d_z)
    : scale(Tensor::leaf({d_z}, std::vector<double>(d_z, 1.0))),
      bias(Tensor::leaf({d_z}, std::vector<double>(d_z, 0.0))) {}

ActNorm::Out ActNorm::apply(const Tensor& x, FlowDirection dir) const {
    check_latent("actnorm", x);
    for (double s : scale.data())
        if (std::fabs(s) < 1e-12) throw NumericError("actnorm: zero scale element");
    int n_frames = x.dim(0);
    // sum log|s| via 0.5 * log(s^2): differentiable and sign-safe
    Tensor log_abs = affine(vlog(mul(scale, scale)), 0.5, 0.0);
    Tensor logdet = affine(sum(log_abs), static_cast<double>(n_frames), 0.0);
    if (dir == FlowDirection::Forward) {
        return {add(mul(x, scale), bias), logdet};
    }
    return {div(sub(x, bias), scale), affine(logdet, -1.0, 0.0)};
}

void ActNorm::register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".scale", scale);
    reg.add(prefix + ".bias", bias);
}

// ---- Invertible1x1 ----

Invertible1x1::Invertible1x1(int d_z, Rng& rng)
    : w(Tensor::leaf({d_z, d_z}, random_rotation(d_z, rng))) {}

Invertible1x1::Out Invertible1x1::apply(const Tensor& x, FlowDirection dir) const {
    check_latent("invertible_1x1", x);
    int n_frames = x.dim(0);
    Tensor ld = affine(logabsdet(w), static_cast<double>(n_frames), 0.0);
    if (dir == FlowDirection::Forward) {
        return {matmul(x, w), ld};
    }
    return {matmul(x, matinv(w)), affine(ld, -1.0, 0.0)};
}

void Invertible1x1::register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".w", w);
}

// ---- AffineCoupling ----

AffineCoupling::AffineCoupling(const GlowConfig& cfg, Rng& rng)
    : in_proj(cfg.d_z / 2, cfg.attn.d_model, rng),
      out_proj(Linear::zero_init(cfg.attn.d_model, cfg.d_z)),
      d_z(cfg.d_z),
      causal(cfg.causal_coupling) {
    blocks.reserve(cfg.coupling_blocks);
    for (int i = 0; i < cfg.coupling_blocks; ++i) blocks.emplace_back(cfg.attn, rng);
}

AffineCoupling::Out AffineCoupling::apply(const Tensor& x, const Tensor& memory,
                                          FlowDirection dir, const EvalCtx& ctx) const {
    check_latent("affine_coupling", x);
    if (x.dim(1) != d_z) throw ShapeError("affine_coupling: latent width mismatch");
    if (d_z % 2 != 0) throw ConfigError("affine_coupling: d_z must be even");
    if (memory.rank() != 2 || memory.dim(0) < 1)
        throw ShapeError("affine_coupling: empty conditioning memory");
    int half = d_z / 2;
    int n_frames = x.dim(0);

    Tensor xa = slice_cols(x, 0, half);
    Tensor xb = slice_cols(x, half, d_z);

    // transform net: x_a (+PE) -> decoder blocks over the linguistic memory
    Tensor h = add(in_proj.forward(xa), sinusoidal_pe(n_frames, in_proj.w.dim(1)));
    Mask self_mask = causal ? Mask::causal(n_frames) : Mask();
    const Mask* mask_ptr = causal ? &self_mask : nullptr;
    for (const auto& blk : blocks) h = blk.forward(h, memory, mask_ptr, ctx).output;
    Tensor st = out_proj.forward(h);
    Tensor log_s = slice_cols(st, 0, half);
    Tensor t = slice_cols(st, half, d_z);

    if (dir == FlowDirection::Forward) {
        Tensor yb = add(mul(xb, vexp(log_s)), t);
        return {concat_cols(xa, yb), sum(log_s)};
    }
    Tensor orig_b = mul(sub(xb, t), vexp(affine(log_s, -1.0, 0.0)));
    return {concat_cols(xa, orig_b), affine(sum(log_s), -1.0, 0.0)};
}

void AffineCoupling::register_params(ParamRegistry& reg, const std::string& prefix) const {
    in_proj.register_params(reg, prefix + ".in_proj");
    for (std::size_t i = 0; i < blocks.size(); ++i)
        blocks[i].register_params(reg, prefix + ".block" + std::to_string(i));
    out_proj.register_params(reg, prefix + ".out_proj");
}

// ---- GlowBlock ----

GlowBlock::GlowBlock(const GlowConfig& cfg, Rng& rng)
    : actnorm(cfg.d_z), perm(cfg.d_z, rng), coupling(cfg, rng) {}

GlowBlock::Out GlowBlock::apply(const Tensor& x, const Tensor& memory, FlowDirection dir,
                                const EvalCtx& ctx) const {
    if (dir == FlowDirection::Forward) {
        auto a = actnorm.apply(x, dir);
        auto p = perm.apply(a.y, dir);
        auto c = coupling.apply(p.y, memory, dir, ctx);
        return {c.y, add(add(a.logdet, p.logdet), c.logdet)};
    }
    auto c = coupling.apply(x, memory, dir, ctx);
    auto p = perm.apply(c.y, dir);
    auto a = actnorm.apply(p.y, dir);
    return {a.y, add(add(c.logdet, p.logdet), a.logdet)};
}

void GlowBlock::register_params(ParamRegistry& reg, const std::string& prefix) const {
    actnorm.register_params(reg, prefix + ".actnorm");
    perm.register_params(reg, prefix + ".perm");
    coupling.register_params(reg, prefix + ".coupling");
}

// ---- GlowPrior ----

GlowPrior::GlowPrior(const GlowConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    blocks_.reserve(cfg.n_blocks);
    for (int i = 0; i < cfg.n_blocks; ++i) blocks_.emplace_back(cfg, rng);
}

LatentSample GlowPrior::sample(const Tensor& noise, const Tensor& memory,
                               const EvalCtx& ctx) const {
    check_latent("glow_sample", noise);
    if (noise.dim(1) != cfg_.d_z) throw ShapeError("glow_sample: noise width != d_z");
    Tensor z = noise;
    for (const auto& blk : blocks_) z = blk.apply(z, memory, FlowDirection::Forward, ctx).y;
    return {z, Tensor()};
}

Tensor GlowPrior::log_density(const Tensor& z, const Tensor& memory, const EvalCtx& ctx) const {
    check_latent("glow_log_density", z);
    if (z.dim(1) != cfg_.d_z) throw ShapeError("glow_log_density: latent width != d_z");
    if (z.has_nonfinite()) throw NumericError("glow_log_density: non-finite latent");
    Tensor u = z;
    Tensor logdet_sum;
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
        auto out = it->apply(u, memory, FlowDirection::Inverse, ctx);
        u = out.y;
        logdet_sum = logdet_sum.defined() ? add(logdet_sum, out.logdet) : out.logdet;
    }
    return add(standard_normal_logpdf(u), logdet_sum);
}

GlowBlock::Out GlowPrior::transform(const Tensor& x, const Tensor& memory, FlowDirection dir,
                                    const EvalCtx& ctx) const {
    Tensor y = x;
    Tensor logdet_sum;
    if (dir == FlowDirection::Forward) {
        for (const auto& blk : blocks_) {
            auto out = blk.apply(y, memory, dir, ctx);
            y = out.y;
            logdet_sum = logdet_sum.defined() ? add(logdet_sum, out.logdet) : out.logdet;
        }
    } else {
        for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
            auto out = it->apply(y, memory, dir, ctx);
            y = out.y;
            logdet_sum = logdet_sum.defined() ? add(logdet_sum, out.logdet) : out.logdet;
        }
    }
    return {y, logdet_sum};
}

void GlowPrior::set_identity_permutations() {
    for (auto& blk : blocks_) {
        int n = blk.perm.w.dim(0);
        std::vector<double> eye(static_cast<std::size_t>(n) * n, 0.0);
        for (int i = 0; i < n; ++i) eye[static_cast<std::size_t>(i) * n + i] = 1.0;
        blk.perm.w.assign_value(eye);
    }
}

void GlowPrior::register_params(ParamRegistry& reg, const std::string& prefix) const {
    for (std::size_t i = 0; i < blocks_.size(); ++i)
        blocks_[i].register_params(reg, prefix + ".block" + std::to_string(i));
}

Tensor standard_normal_logpdf(const Tensor& x) {
    double c = -0.5 * kLog2Pi * static_cast<double>(x.size());
    return affine(sum(mul(x, x)), -0.5, c);
}

}  // namespace vaenar
