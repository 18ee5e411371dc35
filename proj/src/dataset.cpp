#include <sacc/dataset.hpp>
#include <sacc/image_io.hpp>
#include <sacc/saccade.hpp>
#include <sacc/seeding.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

namespace sacc {

namespace {

struct Rgb {
  float r, g, b;
};

// High/low ink per colour group; warm hues that clutter never uses.
constexpr std::array<std::array<Rgb, 2>, kGlyphColourGroups> kInk{{
    {{{0.95f, 0.30f, 0.20f}, {0.55f, 0.05f, 0.05f}}},  // red
    {{{0.95f, 0.85f, 0.25f}, {0.55f, 0.45f, 0.05f}}},  // yellow
    {{{0.95f, 0.55f, 0.15f}, {0.60f, 0.25f, 0.00f}}},  // orange
    {{{0.95f, 0.30f, 0.85f}, {0.50f, 0.05f, 0.45f}}},  // magenta
}};

void fill_rect(ImageF& img, int top, int left, int h, int w, Rgb c) {
  const int y0 = std::max(0, top), x0 = std::max(0, left);
  const int y1 = std::min(img.height(), top + h), x1 = std::min(img.width(), left + w);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      img.channels[0](y, x) = c.r;
      img.channels[1](y, x) = c.g;
      img.channels[2](y, x) = c.b;
    }
}

Rgb clutter_colour(std::mt19937_64& rng) {
  const float red = static_cast<float>(0.3 * uniform01(rng));
  const float g = static_cast<float>(0.2 + 0.7 * uniform01(rng));
  const float b = static_cast<float>(0.2 + 0.7 * uniform01(rng));
  return {red, g, b};
}

// Cool-coloured boxes, outlines and bars. A fraction of the outlines and
// bars take a glyph ink of a random colour group, so ink colour alone does
// not locate the glyph; filled warm patches are never drawn.
void draw_clutter(ImageF& img, const GlyphDatasetConfig& cfg, std::mt19937_64& rng) {
  const int side = img.height();
  const int items = static_cast<int>(std::lround(cfg.clutter_density * 40.0 * side * side / (256.0 * 256.0)));
  const int groups = (cfg.num_classes + kGlyphTextures - 1) / kGlyphTextures;
  for (int k = 0; k < items; ++k) {
    Rgb c = clutter_colour(rng);
    int kind = static_cast<int>(uniform01(rng) * 3);
    if (uniform01(rng) < cfg.distractor_fraction) {
      const auto& ink = kInk[static_cast<std::size_t>(uniform01(rng) * groups)];
      c = ink[uniform01(rng) < 0.5 ? 0 : 1];
      if (kind == 0) kind = 1 + static_cast<int>(uniform01(rng) * 2);
    }
    const int top = static_cast<int>(uniform01(rng) * side), left = static_cast<int>(uniform01(rng) * side);
    if (kind == 0) {  // filled box
      const int h = 3 + static_cast<int>(uniform01(rng) * 12), w = 3 + static_cast<int>(uniform01(rng) * 12);
      fill_rect(img, top, left, h, w, c);
    } else if (kind == 1) {  // outline box
      const int h = 6 + static_cast<int>(uniform01(rng) * 16), w = 6 + static_cast<int>(uniform01(rng) * 16);
      fill_rect(img, top, left, 1, w, c);
      fill_rect(img, top + h - 1, left, 1, w, c);
      fill_rect(img, top, left, h, 1, c);
      fill_rect(img, top, left + w - 1, h, 1, c);
    } else {  // horizontal or vertical bar
      const int len = 8 + static_cast<int>(uniform01(rng) * 24);
      if (uniform01(rng) < 0.5)
        fill_rect(img, top, left, 2, len, c);
      else
        fill_rect(img, top, left, len, 2, c);
    }
  }
}

std::vector<GlyphSample> make_split(const GlyphDatasetConfig& cfg, int per_class, std::uint64_t stream) {
  std::mt19937_64 rng(derive_seed(cfg.seed, {stream}));
  const int span = cfg.canvas_side - cfg.glyph_side;
  std::normal_distribution<double> centered(span / 2.0, cfg.canvas_side / 8.0);
  std::vector<GlyphSample> out;
  out.reserve(static_cast<std::size_t>(per_class) * cfg.num_classes);
  for (int i = 0; i < per_class; ++i)
    for (int k = 0; k < cfg.num_classes; ++k) {
      GlyphSample s;
      s.label = k;
      if (cfg.placement == Placement::Uniform) {
        s.top = static_cast<int>(uniform01(rng) * (span + 1));
        s.left = static_cast<int>(uniform01(rng) * (span + 1));
      } else {
        s.top = std::clamp(static_cast<int>(std::lround(centered(rng))), 0, span);
        s.left = std::clamp(static_cast<int>(std::lround(centered(rng))), 0, span);
      }
      s.clutter_seed = rng();
      out.push_back(s);
    }
  return out;
}

}  // namespace

void GlyphDatasetConfig::validate() const {
  if (canvas_side < 8 || glyph_side < 2) throw std::invalid_argument("GlyphDatasetConfig: sizes too small");
  if (glyph_side * 4 > canvas_side) throw std::invalid_argument("GlyphDatasetConfig: glyph must be much smaller than canvas");
  if (num_classes < 2 || num_classes > kGlyphTextures * kGlyphColourGroups)
    throw std::invalid_argument("GlyphDatasetConfig: num_classes must be in [2, 20]");
  if (train_per_class < 0 || val_per_class < 0 || test_per_class < 0)
    throw std::invalid_argument("GlyphDatasetConfig: negative split size");
  if (clutter_density < 0) throw std::invalid_argument("GlyphDatasetConfig: negative clutter density");
  if (distractor_fraction < 0 || distractor_fraction > 1)
    throw std::invalid_argument("GlyphDatasetConfig: distractor fraction must be in [0, 1]");
}

int glyph_texture(int texture, int r, int c, int side) {
  const int half = side / 2;
  switch (texture % kGlyphTextures) {
    case 0: return r % 2;                              // horizontal lines
    case 1: return c % 2;                              // vertical lines
    case 2: return (r + c) % 2;                        // checkerboard
    case 3: return c < half ? r % 2 : c % 2;           // horizontal | vertical
    default: return r < half ? c % 2 : (r + c) % 2;   // vertical over checkerboard
  }
}

ImageF render_glyph_sample(const GlyphDatasetConfig& cfg, const GlyphSample& s) {
  ImageF img(3, cfg.canvas_side, cfg.canvas_side, kGlyphBackground);
  std::mt19937_64 rng(s.clutter_seed);
  draw_clutter(img, cfg, rng);
  const auto& ink = kInk[static_cast<std::size_t>(s.label / kGlyphTextures)];
  const int texture = s.label % kGlyphTextures;
  for (int r = 0; r < cfg.glyph_side; ++r)
    for (int c = 0; c < cfg.glyph_side; ++c) {
      const Rgb& col = ink[glyph_texture(texture, r, c, cfg.glyph_side) ? 0 : 1];
      img.channels[0](s.top + r, s.left + c) = col.r;
      img.channels[1](s.top + r, s.left + c) = col.g;
      img.channels[2](s.top + r, s.left + c) = col.b;
    }
  return img;
}

ImageF GlyphDataset::image(std::size_t i) const { return render_glyph_sample(cfg_, samples_.at(i)); }

GlyphSplits generate_glyph_dataset(const GlyphDatasetConfig& cfg) {
  cfg.validate();
  return {GlyphDataset(cfg, make_split(cfg, cfg.train_per_class, 1)),
          GlyphDataset(cfg, make_split(cfg, cfg.val_per_class, 2)),
          GlyphDataset(cfg, make_split(cfg, cfg.test_per_class, 3))};
}

ImageFolderDataset::ImageFolderDataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw ImageIoError("dataset directory not found: " + root.string());
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_names_.push_back(e.path().filename().string());
  std::sort(class_names_.begin(), class_names_.end());
  if (class_names_.size() < 2) throw ImageIoError("dataset needs at least two class directories: " + root.string());
  for (std::size_t k = 0; k < class_names_.size(); ++k) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(root / class_names_[k]))
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      ImageF img = read_pnm(f);
      if (img.num_channels() != 3) throw ImageIoError("expected an RGB (P6) image: " + f.string());
      if (img.height() != img.width()) throw ImageIoError("images must be square: " + f.string());
      if (side_ == 0) side_ = img.height();
      if (img.height() != side_) throw ImageIoError("all images must share one size: " + f.string());
      images_.push_back(std::move(img));
      labels_.push_back(static_cast<int>(k));
    }
  }
  if (images_.empty()) throw ImageIoError("no .ppm files under " + root.string());
}

}  // namespace sacc
