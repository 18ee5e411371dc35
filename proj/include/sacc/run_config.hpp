#pragma once

// Flat "key = value" run configuration shared by every CLI command.

#include <sacc/dataset.hpp>
#include <sacc/pipeline.hpp>

#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace sacc {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::uint64_t seed = 0;  // model initialization, training order and sampling
  std::string dataset_source = "glyph";  // glyph | folder
  std::string dataset_path;              // root of the folder dataset
  GlyphDatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;

  /// Desk-scale defaults.
  RunConfig();

  /// Sets one key from its text form. Unknown keys and malformed values throw ConfigError.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Every key, one per line, in a form parse_run_config reads back.
  std::string to_text() const;

  /// Model configuration with source side, class count and seed filled in.
  ModelConfig model_config() const;
  /// Training configuration with the run seed filled in.
  TrainConfig train_config() const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Training, validation and test sets described by the config. The folder
/// source has no separate validation split.
struct DatasetBundle {
  std::unique_ptr<Dataset> train;
  std::unique_ptr<Dataset> val;
  std::unique_ptr<Dataset> test;
};

DatasetBundle load_datasets(const RunConfig& cfg);

}  // namespace sacc
