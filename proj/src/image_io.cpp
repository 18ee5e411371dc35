#include <sacc/image_io.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <vector>

namespace sacc {

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

ImageF read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError("cannot open image: " + path.string());
  const std::string magic = next_token(in);
  if (magic != "P6" && magic != "P5") throw ImageIoError("not a binary P5/P6 file: " + path.string());
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token(in));
    h = std::stoi(next_token(in));
    maxval = std::stoi(next_token(in));
  } catch (const std::exception&) {
    throw ImageIoError("malformed header: " + path.string());
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw ImageIoError("unsupported dimensions or maxval: " + path.string());
  const int c = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * c);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw ImageIoError("truncated image: " + path.string());
  ImageF img(c, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k)
        img.channels[k](y, x) = buf[(static_cast<std::size_t>(y) * w + x) * c + k] / 255.0f;
  return img;
}

void write_pnm(const std::filesystem::path& path, const ImageF& img) {
  const int c = img.num_channels();
  if (c != 1 && c != 3) throw ImageIoError("write_pnm: need one or three channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageIoError("cannot write image: " + path.string());
  out << (c == 3 ? "P6" : "P5") << '\n' << img.width() << ' ' << img.height() << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(img.width()) * img.height() * c);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int k = 0; k < c; ++k)
        buf[(static_cast<std::size_t>(y) * img.width() + x) * c + k] = to_byte(img.channels[k](y, x));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void write_normalized_map(const std::filesystem::path& path, const MatD& field) {
  const double mx = field.size() ? field.maxCoeff() : 0.0;
  ImageF img(1, static_cast<int>(field.rows()), static_cast<int>(field.cols()));
  if (mx > 0) img.channels[0] = (field.cwiseMax(0.0) / mx).cast<float>();
  write_pnm(path, img);
}

}  // namespace sacc
