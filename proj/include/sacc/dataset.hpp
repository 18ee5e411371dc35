#pragma once

#include <sacc/tensor.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace sacc {

/// Labelled square RGB images in [0, 1].
class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual std::size_t size() const = 0;
  virtual int label(std::size_t i) const = 0;
  virtual ImageF image(std::size_t i) const = 0;
  virtual int num_classes() const = 0;
  virtual int side() const = 0;
};

enum class Placement { Uniform, CenterBiased };

/// Synthetic fine-grained set: one small textured glyph per canvas, class
/// given by the texture (plus a coarse ink colour group), surrounded by
/// class-independent clutter.
struct GlyphDatasetConfig {
  int canvas_side = 256;
  int glyph_side = 16;
  int num_classes = 10;
  int train_per_class = 50;
  int val_per_class = 10;
  int test_per_class = 20;
  double clutter_density = 0.5;
  double distractor_fraction = 0.3;  // clutter drawn in glyph ink (thin shapes only)
  Placement placement = Placement::Uniform;
  std::uint64_t seed = 0;

  void validate() const;
};

inline constexpr float kGlyphBackground = 0.1f;
inline constexpr int kGlyphTextures = 5;
inline constexpr int kGlyphColourGroups = 4;

/// 0/1 texture value at glyph-local (r, c).
int glyph_texture(int texture, int r, int c, int side);

struct GlyphSample {
  int label = 0;
  int top = 0;
  int left = 0;
  std::uint64_t clutter_seed = 0;
};

class GlyphDataset final : public Dataset {
 public:
  GlyphDataset() = default;
  GlyphDataset(GlyphDatasetConfig cfg, std::vector<GlyphSample> samples) : cfg_(cfg), samples_(std::move(samples)) {}

  std::size_t size() const override { return samples_.size(); }
  int label(std::size_t i) const override { return samples_.at(i).label; }
  ImageF image(std::size_t i) const override;
  int num_classes() const override { return cfg_.num_classes; }
  int side() const override { return cfg_.canvas_side; }

  const GlyphSample& sample(std::size_t i) const { return samples_.at(i); }
  const GlyphDatasetConfig& config() const { return cfg_; }

 private:
  GlyphDatasetConfig cfg_;
  std::vector<GlyphSample> samples_;
};

struct GlyphSplits {
  GlyphDataset train;
  GlyphDataset val;
  GlyphDataset test;
};

/// Deterministic in cfg.seed; the three splits draw from disjoint streams.
GlyphSplits generate_glyph_dataset(const GlyphDatasetConfig& cfg);

ImageF render_glyph_sample(const GlyphDatasetConfig& cfg, const GlyphSample& s);

/// One sub-directory per class (sorted by name) of binary P6 files.
class ImageFolderDataset final : public Dataset {
 public:
  explicit ImageFolderDataset(const std::filesystem::path& root);

  std::size_t size() const override { return images_.size(); }
  int label(std::size_t i) const override { return labels_.at(i); }
  ImageF image(std::size_t i) const override { return images_.at(i); }
  int num_classes() const override { return static_cast<int>(class_names_.size()); }
  int side() const override { return side_; }
  const std::vector<std::string>& class_names() const { return class_names_; }

 private:
  std::vector<ImageF> images_;
  std::vector<int> labels_;
  std::vector<std::string> class_names_;
  int side_ = 0;
};

}  // namespace sacc
