#pragma once

// The complete network: text encoder, posterior encoder Q(Z|X,Y), Glow
// prior P(Z|X), decoder P(Y|Z,X), length predictor, reduction-factor
// reshaping and the weighted training loss
//
//   L = MSE(Y, Y_hat) + alpha * KL(Q || P) + beta * (log L - log L_hat)^2
//
// with a single-sample Monte-Carlo KL estimate.

#include <string>
#include <vector>

#include "vaenar/attention.hpp"
#include "vaenar/glow.hpp"
#include "vaenar/nn.hpp"
#include "vaenar/tensor.hpp"

namespace vaenar {

struct ModelConfig {
    int vocab_size = 43;
    int n_bins = 80;
    int d_model = 256;
    int n_heads = 4;
    int d_ffn = 1024;
    int d_z = 128;
    int embed_dim = 512;

    int conv_prenet_layers = 5;
    int conv_prenet_kernel = 5;
    int text_blocks = 4;
    int posterior_blocks = 2;
    int decoder_blocks = 2;
    int flow_blocks = 6;
    int coupling_blocks = 2;

    int postnet_layers = 5;
    int postnet_kernel = 5;
    int postnet_channels = 512;

    double dropout = 0.1;
    bool use_causal_mask = true;

    int min_r = 2;  // projection heads exist for every r in [min_r, max_r]
    int max_r = 5;

    double logvar_clamp = 10.0;

    void validate() const;
    AttentionConfig attention() const;
    GlowConfig glow() const;
};

// Zero-pads N to a multiple of r and stacks r consecutive frames along the
// feature axis: [N, n_bins] -> [ceil(N/r), n_bins*r]. Operates on constant
// spectrogram data (never taped).
Tensor reduce_spectrogram(const Tensor& y, int r);

// Inverse of reduce up to the zero padding; taped (used on decoder output).
Tensor expand_spectrogram(const Tensor& y_reduced, int r, int n_bins);

struct TextEncoder {
    Embedding embed;
    std::vector<Conv1d> convs;
    std::vector<BatchNorm> conv_norms;
    Linear proj;
    std::vector<SelfAttentionBlock> blocks;
    double dropout_rate = 0.1;

    TextEncoder() = default;
    TextEncoder(const ModelConfig& cfg, Rng& rng);

    // [M] ids -> [M, d_model]
    Tensor forward(const std::vector<int>& char_ids, const EvalCtx& ctx) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

struct PosteriorParams {
    Tensor mean;     // [N_r, d_z]
    Tensor log_var;  // [N_r, d_z], clamped
};

struct PosteriorEncoder {
    std::vector<std::pair<int, Linear>> in_fc;  // one input layer per r
    Linear fc2;
    std::vector<DecoderBlock> blocks;
    Linear mean_head;
    Linear logvar_head;
    double dropout_rate = 0.1;
    bool causal = true;
    double logvar_clamp = 10.0;

    PosteriorEncoder() = default;
    PosteriorEncoder(const ModelConfig& cfg, Rng& rng);

    PosteriorParams forward(const Tensor& y_reduced, const Tensor& memory, int r,
                            const EvalCtx& ctx) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

struct DecodeResult {
    Tensor pre;   // [N, n_bins] before the PostNet residual
    Tensor post;  // [N, n_bins] final spectrogram
    std::vector<AttentionWeights> cross_weights;  // one per decoder block
};

struct SpectrogramDecoder {
    Linear in_proj;
    std::vector<DecoderBlock> blocks;
    std::vector<std::pair<int, Linear>> heads;  // per-r output projection
    std::vector<Conv1d> postnet_convs;          // causal; output t sees inputs <= t
    std::vector<BatchNorm> postnet_norms;
    int n_bins = 0;
    double dropout_rate = 0.1;
    bool causal = true;

    SpectrogramDecoder() = default;
    SpectrogramDecoder(const ModelConfig& cfg, Rng& rng);

    // z [N_r, d_z] -> spectrogram of N_r*r frames, trimmed to target_frames
    // when >= 0.
    DecodeResult forward(const Tensor& z, const Tensor& memory, int r, int target_frames,
                         const EvalCtx& ctx) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

struct LengthPrediction {
    double total_frames = 0.0;
    Tensor total;     // scalar, differentiable (length head only)
    Tensor per_char;  // [M, 1] log-durations after ReLU
};

// One scalar per character through ReLU; utterance length is the sum of
// exponentials. The input is detached so no gradient reaches the encoder.
struct LengthPredictor {
    Linear proj;

    LengthPredictor() = default;
    LengthPredictor(const ModelConfig& cfg, Rng& rng);

    LengthPrediction forward(const Tensor& memory) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

struct LossBreakdown {
    double recon_mse = 0.0;
    double kl = 0.0;
    double length_loss = 0.0;
    double total = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
    Tensor total_tensor;  // backward entry point
};

struct SynthesisResult {
    Tensor spectrogram;  // [N, n_bins]
    std::vector<AttentionWeights> cross_weights;
    double predicted_frames = 0.0;
    int realized_frames = 0;
    int reduction_factor = 1;
};

enum class NoiseMode { Zeros, Sample };

// The scalar loss combination; one shared code path so the reported total
// equals recon + alpha*kl + beta*length bit-for-bit.
double weighted_total(double recon, double alpha, double kl, double beta, double length_loss);

class VaenarModel {
public:
    VaenarModel() = default;
    VaenarModel(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }

    Tensor encode_text(const std::vector<int>& char_ids, const EvalCtx& ctx) const;

    PosteriorParams posterior_encode(const Tensor& y_reduced, const Tensor& memory, int r,
                                     const EvalCtx& ctx) const;

    // z = mean + exp(log_var / 2) * noise
    static Tensor reparam_sample(const PosteriorParams& p, const Tensor& noise);

    // Single-sample estimate log Q(z) - log P(z|X).
    Tensor kl_estimate(const PosteriorParams& p, const Tensor& z, const Tensor& memory,
                       const EvalCtx& ctx) const;

    DecodeResult decode_spectrogram(const Tensor& z, const Tensor& memory, int r,
                                    int target_frames, const EvalCtx& ctx) const;

    LengthPrediction predict_length(const Tensor& memory) const;

    LossBreakdown compute_loss(const Tensor& y, const std::vector<int>& char_ids,
                               const Tensor& noise, int r, double alpha, double beta,
                               const EvalCtx& ctx) const;

    // Fully parallel inference: predicted length + bias frames, prior
    // sample (zero noise by default), one decoder pass.
    SynthesisResult synthesize(const std::vector<int>& char_ids, int r, int length_bias_frames,
                               NoiseMode mode, Rng* noise_rng = nullptr) const;

    ParamRegistry& params() { return params_; }
    const ParamRegistry& registry() const { return params_; }

    GlowPrior& prior() { return prior_; }
    const GlowPrior& prior() const { return prior_; }
    const PosteriorEncoder& posterior() const { return posterior_; }
    const SpectrogramDecoder& decoder() const { return decoder_; }

    // Diagonal-Gaussian log-likelihood of z under (mean, log_var).
    static Tensor gaussian_logpdf(const Tensor& z, const Tensor& mean, const Tensor& log_var);

private:
    ModelConfig cfg_;
    TextEncoder text_encoder_;
    PosteriorEncoder posterior_;
    GlowPrior prior_;
    SpectrogramDecoder decoder_;
    LengthPredictor length_predictor_;
    ParamRegistry params_;
};

}  // namespace vaenar
