#pragma once

// Binary portable pixmap / graymap files.

#include <sacc/tensor.hpp>

#include <filesystem>
#include <stdexcept>

namespace sacc {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads P6 (RGB) or P5 (gray, returned as one channel) with maxval 255.
ImageF read_pnm(const std::filesystem::path& path);

/// P6 for three channels, P5 for one; values clamped to [0, 1].
void write_pnm(const std::filesystem::path& path, const ImageF& img);

/// Gray map scaled so the maximum maps to 255 (all-zero stays black).
void write_normalized_map(const std::filesystem::path& path, const MatD& field);

}  // namespace sacc
