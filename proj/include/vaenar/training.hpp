#pragma once

// Training loop: annealing reduction-factor schedule, Adam with gradient
// clipping, per-epoch metrics (loss terms plus alignment diagnostics on a
// fixed validation batch), atomic checkpointing and deterministic resume.

#include <optional>
#include <string>
#include <vector>

#include "vaenar/config.hpp"
#include "vaenar/corpus.hpp"
#include "vaenar/model.hpp"
#include "vaenar/serialize.hpp"

namespace vaenar {

struct RFSchedule {
    int initial_r = 5;
    int step_every = 200;  // epochs per decrement
    int floor_r = 2;

    void validate() const;
    int r_at_epoch(int epoch) const;
};

struct AdamConfig {
    double lr = 1.25e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Standard Adam with bias correction over a parameter registry; moments are
// kept per trainable parameter in registration order.
class Adam {
public:
    Adam() = default;
    Adam(const AdamConfig& cfg, const ParamRegistry& params);

    // Applies one update from the accumulated gradients. A non-finite
    // gradient aborts the step naming the offending parameter.
    void step(const ParamRegistry& params);

    const AdamConfig& config() const { return cfg_; }
    std::uint64_t step_count() const { return step_count_; }

    std::vector<MomentRecord> export_moments(const ParamRegistry& params) const;
    void import_moments(const ParamRegistry& params, const std::vector<MomentRecord>& moments,
                        std::uint64_t step_count);

private:
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::uint64_t step_count_ = 0;
};

// Scales every trainable gradient by k (mini-batch averaging).
void scale_gradients(const ParamRegistry& params, double k);

// Global-norm clipping; returns the pre-clip norm.
double clip_gradients(const ParamRegistry& params, double max_norm);

struct AlignmentDiagnostics {
    double diagonality = 0.0;
    double monotonicity = 0.0;
    int epoch = 0;
};

// w is a head-averaged [N_r, M] cross-attention matrix whose rows are
// distributions. Diagonality is the mean mass inside a band of half-width
// max(1, 0.1*M) around j = i*M/N_r; monotonicity is the fraction of
// adjacent frames whose argmax key is nondecreasing.
AlignmentDiagnostics alignment_diagnostics(const Tensor& w);

struct MetricsRow {
    int epoch = 0;
    int r = 1;
    double recon = 0.0;
    double kl = 0.0;
    double length = 0.0;
    double total = 0.0;
    double diagonality = 0.0;
    double monotonicity = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);

enum class TrainStatus { Completed, NanHalt };

struct TrainResult {
    TrainStatus status = TrainStatus::Completed;
    int epochs_done = 0;  // cumulative, including epochs before a resume
    std::vector<MetricsRow> metrics;
    std::string final_checkpoint;
    std::string best_checkpoint;
    std::string halt_reason;
};

// Runs (or resumes) training on the given corpus, writing metrics.csv,
// periodic ckpt_latest.vnck, best.vnck (lowest validation reconstruction)
// and model.vnck into out_dir.
TrainResult train(VaenarModel& model, const Corpus& corpus, const RunConfig& cfg,
                  const std::string& out_dir, const Checkpoint* resume = nullptr);

// Deterministic train/validation split: the last ceil(fraction*n) indices
// of a seeded permutation are validation.
void split_corpus(std::size_t n, double val_fraction, std::uint64_t seed,
                  std::vector<std::size_t>& train_idx, std::vector<std::size_t>& val_idx);

Checkpoint make_checkpoint(const VaenarModel& model, const Adam& opt, const RFSchedule& sched,
                           int epochs_done, const std::string& config_text);
void load_model_params(VaenarModel& model, const Checkpoint& ckpt);

}  // namespace vaenar
