#pragma once

// Binary checkpoints: "SACC", u32 version, u32 block count, then blocks of
// (u32 name length, name, u32 rank, u32 dims..., payload). Little-endian
// throughout; payloads are 32-bit words.

#include <sacc/pipeline.hpp>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace sacc {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CorruptCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointVersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes every parameter, the optimizer state (if given) and `config_text`.
void save_checkpoint(const Model& model, const std::filesystem::path& path, const TrainState* state = nullptr,
                     const std::string& config_text = {});

/// The stored config snapshot, read without touching parameters.
std::string read_checkpoint_config(const std::filesystem::path& path);

/// Loads parameters (and state) into an already-built model. Throws
/// ShapeError when a block is missing or differently shaped.
void load_checkpoint(Model& model, const std::filesystem::path& path, TrainState* state = nullptr);

}  // namespace sacc
