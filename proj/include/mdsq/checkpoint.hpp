#pragma once
// Binary checkpoints: "MDSQ", u32 version, u32-length-prefixed config text,
// then named tensor records until end of file. All integers and the float64
// payload are little-endian.
//
//   record := u32 name_len, name bytes, u32 rank, rank x u64 dims, numel x f64

#include "mdsq/config.hpp"
#include "mdsq/denoiser.hpp"
#include "mdsq/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mdsq {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string config_text;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
// Throws IoError on truncated or malformed bytes.
Checkpoint parse_checkpoint(std::string_view bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// The config text carries the full RunConfig plus a model-hash line.
Checkpoint make_checkpoint(const DenoiserModel& model, const RunConfig& config);
void save_model(const std::filesystem::path& path, const DenoiserModel& model, const RunConfig& config);

struct LoadedModel {
    RunConfig config;
    DenoiserModel model;
};

// Rebuilds the model from the stored config; every parameter must be present
// with the expected shape (CompatibilityError otherwise).
LoadedModel load_model(const std::filesystem::path& path);
LoadedModel model_from_checkpoint(const Checkpoint& ckpt);

// CompatibilityError unless `expected` produces the checkpoint's model hash.
void check_compatible(const RunConfig& expected, const RunConfig& stored);

} // namespace mdsq
