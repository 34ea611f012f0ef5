#pragma once

// Synthetic symbol -> spectrogram corpus. Each symbol owns a base duration
// and a distinct spectral profile; an utterance is the concatenation of its
// symbols' profiles, repeated for a jittered number of frames, plus
// Gaussian observation noise. Ground-truth per-symbol durations are kept
// for diagnostics only and never reach the model.

#include <cstdint>
#include <string>
#include <vector>

#include "vaenar/tensor.hpp"

namespace vaenar {

struct SyntheticCorpusSpec {
    int vocab_size = 16;
    int n_utterances = 200;
    int min_chars = 5;
    int max_chars = 15;
    int n_bins = 16;
    int base_duration_min = 2;
    int base_duration_max = 6;
    double duration_jitter = 0.2;
    double noise_std = 0.02;
    std::uint64_t seed = 1;

    void validate() const;
};

struct SymbolTemplate {
    int base_duration = 0;
    std::vector<double> profile;  // [n_bins]
};

struct Utterance {
    std::string text;
    std::vector<int> char_ids;
    Tensor spectrogram;          // [N, n_bins]
    std::vector<int> durations;  // realized frames per symbol (diagnostics only)
    int n_frames() const { return spectrogram.dim(0); }
};

struct Corpus {
    std::vector<Utterance> utterances;
    std::vector<SymbolTemplate> templates;
    int n_bins = 0;
    int vocab_size = 0;

    double mean_frames() const;
};

Corpus generate_corpus(const SyntheticCorpusSpec& spec);

// Deterministic per-symbol templates for a given (seed, vocab, bins);
// profiles are pairwise distinct (L2 > 0.1 after unit normalization).
std::vector<SymbolTemplate> make_symbol_templates(const SyntheticCorpusSpec& spec);

// One VSPG file per utterance plus index.tsv (id, text, n_frames).
void write_corpus_dir(const Corpus& corpus, const std::string& dir);
Corpus read_corpus_dir(const std::string& dir, int vocab_size);

}  // namespace vaenar
