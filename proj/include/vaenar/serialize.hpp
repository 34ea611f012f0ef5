#pragma once

// On-disk formats.
//
// Spectrogram "VSPG": magic, u32 version=1, u32 n_frames, u32 n_bins, then
// f32 little-endian row-major frames (f64 in memory, f32 on disk).
//
// Checkpoint "VNCK": magic, u32 version, named f64 tensor records
// [name_len u32, name, rank u32, dims u32 x rank, f64 LE data], the
// optimizer state (scalars plus first/second moment records), the
// reduction-factor schedule position, and the run configuration text.
// Both formats round-trip byte-exactly.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vaenar/tensor.hpp"

namespace vaenar {

void write_vspg(const std::string& path, const Tensor& spectrogram);
Tensor read_vspg(const std::string& path);

struct MomentRecord {
    std::string name;
    std::vector<double> m;
    std::vector<double> v;
};

struct Checkpoint {
    std::uint32_t version = 1;
    std::vector<std::pair<std::string, Tensor>> tensors;

    // optimizer state
    double lr = 0.0;
    double beta1 = 0.0;
    double beta2 = 0.0;
    double eps = 0.0;
    std::uint64_t step_count = 0;
    std::vector<MomentRecord> moments;

    // schedule position
    std::uint32_t initial_r = 0;
    std::uint32_t r_step_every = 0;
    std::uint32_t floor_r = 0;
    std::uint32_t epochs_done = 0;

    std::string config_text;
};

// Atomic: writes to a temporary file in the same directory, then renames.
void write_vnck(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_vnck(const std::string& path);

}  // namespace vaenar
