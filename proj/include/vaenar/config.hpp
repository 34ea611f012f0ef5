#pragma once

// Flat key = value run configuration. '#' starts a comment, unknown keys
// are rejected, every key has a default from the active preset. to_text()
// emits the complete effective configuration in a canonical, byte-stable
// form; parse(to_text()) is the identity.

#include <cstdint>
#include <string>

#include "vaenar/corpus.hpp"
#include "vaenar/model.hpp"

namespace vaenar {

struct RunConfig {
    std::string preset = "desk";

    // model dims
    int vocab_size = 16;
    int n_bins = 16;
    int d_model = 64;
    int n_heads = 4;
    int d_ffn = 128;
    int d_z = 32;
    int embed_dim = 64;
    int conv_prenet_layers = 5;
    int conv_prenet_kernel = 5;
    int text_blocks = 4;
    int posterior_blocks = 2;
    int decoder_blocks = 2;
    int flow_blocks = 3;
    int coupling_blocks = 2;
    int postnet_layers = 5;
    int postnet_kernel = 5;
    int postnet_channels = 32;
    double dropout = 0.1;
    bool use_causal_mask = true;

    // loss weights
    double alpha = 1e-4;
    double beta = 1.0;

    // reduction-factor schedule
    int initial_r = 5;
    int r_step_every = 20;
    int floor_r = 2;

    // optimizer / run
    double lr = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 5.0;
    int batch_size = 4;
    int epochs = 100;
    int checkpoint_every = 25;

    // corpus
    int corpus_utterances = 200;
    int min_chars = 5;
    int max_chars = 15;
    int base_duration_min = 2;
    int base_duration_max = 6;
    double duration_jitter = 0.2;
    double noise_std = 0.02;

    // misc
    std::uint64_t seed = 1;
    double val_fraction = 0.1;
    int length_bias = -1;  // -1: 10% of the corpus mean length, fixed at train time

    static RunConfig desk();
    static RunConfig full();  // full-scale hyperparameters (not a test target)

    static RunConfig parse(const std::string& text);
    static RunConfig parse_file(const std::string& path);
    std::string to_text() const;

    void validate() const;
    ModelConfig model() const;
    SyntheticCorpusSpec corpus() const;
};

}  // namespace vaenar
