#include "vaenar/model.hpp"

#include <cmath>

namespace vaenar {

namespace {

Tensor mse(const Tensor& target, const Tensor& pred) {
    Tensor d = sub(target, pred);
    return mean(mul(d, d));
}

const Linear* find_for_r(const std::vector<std::pair<int, Linear>>& table, int r) {
    for (const auto& [rr, lin] : table)
        if (rr == r) return &lin;
    return nullptr;
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 1) throw ConfigError("model config: vocab_size must be >= 1");
    if (n_bins < 1) throw ConfigError("model config: n_bins must be >= 1");
    if (d_model < 2 || d_model % 2 != 0)
        throw ConfigError("model config: d_model must be even and >= 2");
    if (d_model % n_heads != 0) throw ConfigError("model config: d_model % n_heads != 0");
    if (d_z < 2 || d_z % 2 != 0) throw ConfigError("model config: d_z must be even and >= 2");
    if (embed_dim < 1) throw ConfigError("model config: embed_dim must be >= 1");
    if (conv_prenet_kernel % 2 == 0)
        throw ConfigError("model config: conv_prenet_kernel must be odd");
    if (min_r < 1 || max_r < min_r)
        throw ConfigError("model config: need 1 <= min_r <= max_r");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model config: dropout in [0,1)");
    if (postnet_layers < 1 || postnet_kernel < 1 || postnet_channels < 1)
        throw ConfigError("model config: postnet layers/kernel/channels must be >= 1");
    attention().validate();
}

AttentionConfig ModelConfig::attention() const {
    return AttentionConfig{d_model, n_heads, d_ffn, dropout};
}

GlowConfig ModelConfig::glow() const {
    GlowConfig g;
    g.d_z = d_z;
    g.n_blocks = flow_blocks;
    g.coupling_blocks = coupling_blocks;
    g.attn = attention();
    g.causal_coupling = use_causal_mask;
    return g;
}

Tensor reduce_spectrogram(const Tensor& y, int r) {
    if (y.rank() != 2) throw ShapeError("reduce_spectrogram: expected [N, n_bins]");
    if (r < 1) throw ConfigError("reduce_spectrogram: r must be >= 1");
    int n = y.dim(0), bins = y.dim(1);
    int n_r = (n + r - 1) / r;
    std::vector<double> out(static_cast<std::size_t>(n_r) * bins * r, 0.0);
    const auto& yv = y.data();
    std::copy(yv.begin(), yv.end(), out.begin());  // row-major stacking == frame concat
    return Tensor::from_data({n_r, bins * r}, std::move(out));
}

Tensor expand_spectrogram(const Tensor& y_reduced, int r, int n_bins) {
    if (y_reduced.rank() != 2) throw ShapeError("expand_spectrogram: expected 2-D input");
    if (y_reduced.dim(1) != n_bins * r)
        throw ShapeError("expand_spectrogram: width " + std::to_string(y_reduced.dim(1)) +
                         " != n_bins*r = " + std::to_string(n_bins * r));
    return reshape(y_reduced, {y_reduced.dim(0) * r, n_bins});
}

// ---- TextEncoder ----

TextEncoder::TextEncoder(const ModelConfig& cfg, Rng& rng)
    : embed(cfg.vocab_size, cfg.embed_dim, rng),
      proj(cfg.embed_dim, cfg.d_model, rng),
      dropout_rate(cfg.dropout) {
    convs.reserve(cfg.conv_prenet_layers);
    conv_norms.reserve(cfg.conv_prenet_layers);
    for (int i = 0; i < cfg.conv_prenet_layers; ++i) {
        convs.emplace_back(cfg.conv_prenet_kernel, cfg.embed_dim, cfg.embed_dim, rng);
        conv_norms.emplace_back(cfg.embed_dim);
    }
    blocks.reserve(cfg.text_blocks);
    for (int i = 0; i < cfg.text_blocks; ++i) blocks.emplace_back(cfg.attention(), rng);
}

Tensor TextEncoder::forward(const std::vector<int>& char_ids, const EvalCtx& ctx) const {
    if (char_ids.empty()) throw VocabError("encode_text: empty id sequence");
    Tensor h = embed.forward(char_ids);
    for (std::size_t i = 0; i < convs.size(); ++i) {
        h = relu(conv_norms[i].forward(convs[i].forward(h), ctx));
        h = dropout(h, dropout_rate, ctx);
    }
    h = proj.forward(h);
    h = add(h, sinusoidal_pe(static_cast<int>(char_ids.size()), proj.w.dim(1)));
    for (const auto& blk : blocks) h = blk.forward(h, nullptr, ctx);
    return h;
}

void TextEncoder::register_params(ParamRegistry& reg, const std::string& prefix) const {
    embed.register_params(reg, prefix + ".embed");
    for (std::size_t i = 0; i < convs.size(); ++i) {
        convs[i].register_params(reg, prefix + ".conv" + std::to_string(i));
        conv_norms[i].register_params(reg, prefix + ".bn" + std::to_string(i));
    }
    proj.register_params(reg, prefix + ".proj");
    for (std::size_t i = 0; i < blocks.size(); ++i)
        blocks[i].register_params(reg, prefix + ".block" + std::to_string(i));
}

// ---- PosteriorEncoder ----

PosteriorEncoder::PosteriorEncoder(const ModelConfig& cfg, Rng& rng)
    : fc2(cfg.d_model, cfg.d_model, rng),
      mean_head(cfg.d_model, cfg.d_z, rng),
      logvar_head(cfg.d_model, cfg.d_z, rng),
      dropout_rate(cfg.dropout),
      causal(cfg.use_causal_mask),
      logvar_clamp(cfg.logvar_clamp) {
    for (int r = cfg.min_r; r <= cfg.max_r; ++r)
        in_fc.emplace_back(r, Linear(cfg.n_bins * r, cfg.d_model, rng));
    blocks.reserve(cfg.posterior_blocks);
    for (int i = 0; i < cfg.posterior_blocks; ++i) blocks.emplace_back(cfg.attention(), rng);
}

PosteriorParams PosteriorEncoder::forward(const Tensor& y_reduced, const Tensor& memory, int r,
                                          const EvalCtx& ctx) const {
    const Linear* fc1 = find_for_r(in_fc, r);
    if (!fc1) throw ConfigError("posterior_encode: no input layer for r=" + std::to_string(r));
    if (y_reduced.dim(1) != fc1->w.dim(0))
        throw ShapeError("posterior_encode: reduced width " + std::to_string(y_reduced.dim(1)) +
                         " inconsistent with r=" + std::to_string(r));
    int n_r = y_reduced.dim(0);

    Tensor h = dropout(relu(fc1->forward(y_reduced)), dropout_rate, ctx);
    h = dropout(relu(fc2.forward(h)), dropout_rate, ctx);
    h = add(h, sinusoidal_pe(n_r, fc2.w.dim(1)));

    Mask self_mask = causal ? Mask::causal(n_r) : Mask();
    const Mask* mask_ptr = causal ? &self_mask : nullptr;
    for (const auto& blk : blocks) h = blk.forward(h, memory, mask_ptr, ctx).output;

    Tensor mean = mean_head.forward(h);
    Tensor log_var = clamp(logvar_head.forward(h), -logvar_clamp, logvar_clamp);
    return {mean, log_var};
}

void PosteriorEncoder::register_params(ParamRegistry& reg, const std::string& prefix) const {
    for (const auto& [r, lin] : in_fc)
        lin.register_params(reg, prefix + ".fc1_r" + std::to_string(r));
    fc2.register_params(reg, prefix + ".fc2");
    for (std::size_t i = 0; i < blocks.size(); ++i)
        blocks[i].register_params(reg, prefix + ".block" + std::to_string(i));
    mean_head.register_params(reg, prefix + ".mean");
    logvar_head.register_params(reg, prefix + ".logvar");
}

// ---- SpectrogramDecoder ----

SpectrogramDecoder::SpectrogramDecoder(const ModelConfig& cfg, Rng& rng)
    : in_proj(cfg.d_z, cfg.d_model, rng),
      n_bins(cfg.n_bins),
      dropout_rate(cfg.dropout),
      causal(cfg.use_causal_mask) {
    blocks.reserve(cfg.decoder_blocks);
    for (int i = 0; i < cfg.decoder_blocks; ++i) blocks.emplace_back(cfg.attention(), rng);
    for (int r = cfg.min_r; r <= cfg.max_r; ++r)
        heads.emplace_back(r, Linear(cfg.d_model, cfg.n_bins * r, rng));
    // PostNet: causal convs so later frames never leak backwards
    int layers = cfg.postnet_layers;
    for (int i = 0; i < layers; ++i) {
        int c_in = (i == 0) ? cfg.n_bins : cfg.postnet_channels;
        int c_out = (i == layers - 1) ? cfg.n_bins : cfg.postnet_channels;
        postnet_convs.emplace_back(cfg.postnet_kernel, c_in, c_out, rng, /*causal=*/true);
        if (i != layers - 1) postnet_norms.emplace_back(c_out);
    }
}

DecodeResult SpectrogramDecoder::forward(const Tensor& z, const Tensor& memory, int r,
                                         int target_frames, const EvalCtx& ctx) const {
    if (z.rank() != 2 || z.dim(0) < 1) throw ShapeError("decode: latent must be [N_r >= 1, d_z]");
    const Linear* head = find_for_r(heads, r);
    if (!head)
        throw ConfigError("decode: no output projection head registered for r=" +
                          std::to_string(r));
    int n_r = z.dim(0);

    Tensor h = add(in_proj.forward(z), sinusoidal_pe(n_r, in_proj.w.dim(1)));
    Mask self_mask = causal ? Mask::causal(n_r) : Mask();
    const Mask* mask_ptr = causal ? &self_mask : nullptr;

    std::vector<AttentionWeights> all_weights;
    all_weights.reserve(blocks.size());
    for (const auto& blk : blocks) {
        auto out = blk.forward(h, memory, mask_ptr, ctx);
        h = out.output;
        all_weights.push_back(std::move(out.cross_weights));
    }

    Tensor pre = expand_spectrogram(head->forward(h), r, n_bins);
    if (target_frames >= 0) {
        if (target_frames < 1 || target_frames > pre.dim(0))
            throw ShapeError("decode: target frame count out of range");
        if (target_frames < pre.dim(0)) pre = slice_rows(pre, 0, target_frames);
    }

    Tensor res = pre;
    for (std::size_t i = 0; i < postnet_convs.size(); ++i) {
        res = postnet_convs[i].forward(res);
        if (i + 1 < postnet_convs.size()) {
            res = vtanh(postnet_norms[i].forward(res, ctx));
            res = dropout(res, dropout_rate, ctx);
        }
    }
    Tensor post = add(pre, res);
    return {pre, post, std::move(all_weights)};
}

void SpectrogramDecoder::register_params(ParamRegistry& reg, const std::string& prefix) const {
    in_proj.register_params(reg, prefix + ".in_proj");
    for (std::size_t i = 0; i < blocks.size(); ++i)
        blocks[i].register_params(reg, prefix + ".block" + std::to_string(i));
    for (const auto& [r, lin] : heads)
        lin.register_params(reg, prefix + ".head_r" + std::to_string(r));
    for (std::size_t i = 0; i < postnet_convs.size(); ++i)
        postnet_convs[i].register_params(reg, prefix + ".postnet" + std::to_string(i));
    for (std::size_t i = 0; i < postnet_norms.size(); ++i)
        postnet_norms[i].register_params(reg, prefix + ".postnet_bn" + std::to_string(i));
}

// ---- LengthPredictor ----

LengthPredictor::LengthPredictor(const ModelConfig& cfg, Rng& rng)
    : proj(cfg.d_model, 1, rng) {}

LengthPrediction LengthPredictor::forward(const Tensor& memory) const {
    if (memory.dim(0) < 1) throw ShapeError("predict_length: empty linguistic feature");
    Tensor per_char = relu(proj.forward(detach(memory)));
    Tensor total = sum(vexp(per_char));
    return {total.item(), total, per_char};
}

void LengthPredictor::register_params(ParamRegistry& reg, const std::string& prefix) const {
    proj.register_params(reg, prefix + ".proj");
}

// ---- VaenarModel ----

VaenarModel::VaenarModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0x76616e61));  // independent init stream per model seed
    text_encoder_ = TextEncoder(cfg, rng);
    posterior_ = PosteriorEncoder(cfg, rng);
    prior_ = GlowPrior(cfg.glow(), rng);
    decoder_ = SpectrogramDecoder(cfg, rng);
    length_predictor_ = LengthPredictor(cfg, rng);

    text_encoder_.register_params(params_, "text_encoder");
    posterior_.register_params(params_, "posterior");
    prior_.register_params(params_, "prior");
    decoder_.register_params(params_, "decoder");
    length_predictor_.register_params(params_, "length_predictor");
}

Tensor VaenarModel::encode_text(const std::vector<int>& char_ids, const EvalCtx& ctx) const {
    for (int id : char_ids)
        if (id < 0 || id >= cfg_.vocab_size)
            throw VocabError("encode_text: symbol id " + std::to_string(id) +
                             " outside vocabulary of size " + std::to_string(cfg_.vocab_size));
    return text_encoder_.forward(char_ids, ctx);
}

PosteriorParams VaenarModel::posterior_encode(const Tensor& y_reduced, const Tensor& memory,
                                              int r, const EvalCtx& ctx) const {
    return posterior_.forward(y_reduced, memory, r, ctx);
}

Tensor VaenarModel::reparam_sample(const PosteriorParams& p, const Tensor& noise) {
    if (noise.shape() != p.mean.shape())
        throw ShapeError("reparam_sample: noise shape " + shape_str(noise.shape()) +
                         " != mean shape " + shape_str(p.mean.shape()));
    Tensor std_dev = vexp(affine(p.log_var, 0.5, 0.0));
    return add(p.mean, mul(std_dev, noise));
}

Tensor VaenarModel::gaussian_logpdf(const Tensor& z, const Tensor& mean, const Tensor& log_var) {
    constexpr double kLog2Pi = 1.8378770664093453;
    Tensor d = sub(z, mean);
    Tensor sq = mul(mul(d, d), vexp(affine(log_var, -1.0, 0.0)));
    Tensor per_elem = add(sq, log_var);
    double c = -0.5 * kLog2Pi * static_cast<double>(z.size());
    return affine(sum(per_elem), -0.5, c);
}

Tensor VaenarModel::kl_estimate(const PosteriorParams& p, const Tensor& z, const Tensor& memory,
                                const EvalCtx& ctx) const {
    Tensor q_ll = gaussian_logpdf(z, p.mean, p.log_var);
    Tensor p_ll = prior_.log_density(z, memory, ctx);
    return sub(q_ll, p_ll);
}

DecodeResult VaenarModel::decode_spectrogram(const Tensor& z, const Tensor& memory, int r,
                                             int target_frames, const EvalCtx& ctx) const {
    return decoder_.forward(z, memory, r, target_frames, ctx);
}

LengthPrediction VaenarModel::predict_length(const Tensor& memory) const {
    return length_predictor_.forward(memory);
}

double weighted_total(double recon, double alpha, double kl, double beta, double length_loss) {
    return recon + alpha * kl + beta * length_loss;
}

LossBreakdown VaenarModel::compute_loss(const Tensor& y, const std::vector<int>& char_ids,
                                        const Tensor& noise, int r, double alpha, double beta,
                                        const EvalCtx& ctx) const {
    if (alpha < 0.0 || beta < 0.0) throw ConfigError("compute_loss: alpha, beta must be >= 0");
    if (y.rank() != 2 || y.dim(0) < 1) throw ShapeError("compute_loss: empty spectrogram");
    if (y.dim(1) != cfg_.n_bins) throw ShapeError("compute_loss: spectrogram bin mismatch");

    int n = y.dim(0);
    Tensor memory = encode_text(char_ids, ctx);
    Tensor y_red = reduce_spectrogram(y, r);

    PosteriorParams p = posterior_encode(y_red, memory, r, ctx);
    Tensor z = reparam_sample(p, noise);
    Tensor kl_t = kl_estimate(p, z, memory, ctx);

    DecodeResult dec = decode_spectrogram(z, memory, r, n, ctx);
    Tensor recon_t = add(mse(y, dec.pre), mse(y, dec.post));

    LengthPrediction lp = predict_length(memory);
    Tensor log_diff = sub(Tensor::scalar(std::log(static_cast<double>(n))), vlog(lp.total));
    Tensor len_t = mul(log_diff, log_diff);

    Tensor total_t = add(add(recon_t, affine(kl_t, alpha, 0.0)), affine(len_t, beta, 0.0));

    LossBreakdown lb;
    lb.recon_mse = recon_t.item();
    lb.kl = kl_t.item();
    lb.length_loss = len_t.item();
    lb.alpha = alpha;
    lb.beta = beta;
    lb.total = weighted_total(lb.recon_mse, alpha, lb.kl, beta, lb.length_loss);
    lb.total_tensor = total_t;
    return lb;
}

SynthesisResult VaenarModel::synthesize(const std::vector<int>& char_ids, int r,
                                        int length_bias_frames, NoiseMode mode,
                                        Rng* noise_rng) const {
    if (char_ids.empty()) throw VocabError("synthesize: empty text");
    NoGrad no_grad;
    EvalCtx ctx{};

    Tensor memory = encode_text(char_ids, ctx);
    LengthPrediction lp = predict_length(memory);
    long target = std::lround(lp.total_frames) + length_bias_frames;
    if (target < 1) target = 1;
    int n_r = static_cast<int>((target + r - 1) / r);

    Tensor noise;
    if (mode == NoiseMode::Zeros) {
        noise = Tensor::zeros({n_r, cfg_.d_z});
    } else {
        if (!noise_rng) throw ConfigError("synthesize: sampling mode requires an RNG");
        std::vector<double> v(static_cast<std::size_t>(n_r) * cfg_.d_z);
        for (auto& x : v) x = noise_rng->normal();
        noise = Tensor::from_data({n_r, cfg_.d_z}, std::move(v));
    }

    Tensor z = prior_.sample(noise, memory, ctx).z;
    DecodeResult dec = decode_spectrogram(z, memory, r, -1, ctx);
    return {dec.post, std::move(dec.cross_weights), lp.total_frames, n_r * r, r};
}

}  // namespace vaenar
