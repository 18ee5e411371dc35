#include <sacc/checkpoint.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <vector>

namespace sacc {

namespace {

constexpr char kMagic[4] = {'S', 'A', 'C', 'C'};
constexpr std::uint32_t kMaxRank = 8;

struct Block {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint32_t> payload;
};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

Block matrix_block(std::string name, const MatF& m) {
  Block b{std::move(name), {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, {}};
  b.payload.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) b.payload.push_back(std::bit_cast<std::uint32_t>(m.data()[i]));
  return b;
}

MatF block_matrix(const Block& b) {
  MatF m(b.dims[0], b.dims[1]);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<float>(b.payload[static_cast<std::size_t>(i)]);
  return m;
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CorruptCheckpoint("checkpoint is truncated");
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

std::vector<Block> read_blocks(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  Reader r(std::string(std::istreambuf_iterator<char>(in), {}));
  if (r.raw(4) != std::string(kMagic, 4)) throw CorruptCheckpoint("not a checkpoint (bad magic): " + path.string());
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t count = r.u32();
  std::vector<Block> blocks;
  for (std::uint32_t k = 0; k < count; ++k) {
    Block b;
    b.name = r.raw(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > kMaxRank) throw CorruptCheckpoint("implausible block rank in " + b.name);
    std::uint64_t elems = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      b.dims.push_back(r.u32());
      elems *= b.dims.back();
    }
    if (elems > (1ull << 32)) throw CorruptCheckpoint("implausible block size in " + b.name);
    b.payload.resize(static_cast<std::size_t>(elems));
    for (auto& w : b.payload) w = r.u32();
    blocks.push_back(std::move(b));
  }
  if (!r.done()) throw CorruptCheckpoint("trailing bytes after the last block");
  return blocks;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path, const TrainState* state,
                     const std::string& config_text) {
  const ParameterSet<float>& params = model.parameters();
  std::vector<Block> blocks;
  for (std::size_t p = 0; p < params.size(); ++p) blocks.push_back(matrix_block("param/" + params[p].name, params[p].value));
  if (state) {
    blocks.push_back({"state/step", {2},
                      {static_cast<std::uint32_t>(state->step & 0xffffffffu), static_cast<std::uint32_t>(state->step >> 32)}});
    for (std::size_t p = 0; p < state->momentum.size() && p < params.size(); ++p)
      if (state->momentum[p].size() > 0) blocks.push_back(matrix_block("momentum/" + params[p].name, state->momentum[p]));
    for (std::size_t p = 0; p < state->second_moment.size() && p < params.size(); ++p)
      if (state->second_moment[p].size() > 0)
        blocks.push_back(matrix_block("second_moment/" + params[p].name, state->second_moment[p]));
  }
  Block cfg{"meta/config", {static_cast<std::uint32_t>(config_text.size())}, {}};
  for (unsigned char c : config_text) cfg.payload.push_back(c);
  blocks.push_back(std::move(cfg));

  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(blocks.size()));
  for (const Block& b : blocks) {
    put_u32(out, static_cast<std::uint32_t>(b.name.size()));
    out += b.name;
    put_u32(out, static_cast<std::uint32_t>(b.dims.size()));
    for (auto d : b.dims) put_u32(out, d);
    for (auto w : b.payload) put_u32(out, w);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write checkpoint: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

std::string read_checkpoint_config(const std::filesystem::path& path) {
  for (const Block& b : read_blocks(path))
    if (b.name == "meta/config") {
      std::string s;
      for (auto w : b.payload) {
        if (w > 0xffu) throw CorruptCheckpoint("config block holds a non-byte value");
        s.push_back(static_cast<char>(w));
      }
      return s;
    }
  return {};
}

void load_checkpoint(Model& model, const std::filesystem::path& path, TrainState* state) {
  std::map<std::string, const Block*> by_name;
  const std::vector<Block> blocks = read_blocks(path);
  for (const Block& b : blocks) by_name[b.name] = &b;

  ParameterSet<float>& params = model.parameters();
  std::vector<MatF> values;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto it = by_name.find("param/" + params[p].name);
    if (it == by_name.end()) throw ShapeError("checkpoint has no parameter " + params[p].name);
    const Block& b = *it->second;
    if (b.dims.size() != 2 || b.dims[0] != params[p].value.rows() || b.dims[1] != params[p].value.cols())
      throw ShapeError("checkpoint parameter " + params[p].name + " has a different shape than the configured model");
    values.push_back(block_matrix(b));
  }
  for (const Block& b : blocks)
    if (b.name.rfind("param/", 0) == 0 && !params.find(b.name.substr(6)))
      throw ShapeError("checkpoint parameter " + b.name.substr(6) + " does not exist in the configured model");
  for (std::size_t p = 0; p < params.size(); ++p) params[p].value = std::move(values[p]);

  if (!state) return;
  state->step = 0;
  state->momentum.assign(params.size(), MatF());
  state->second_moment.assign(params.size(), MatF());
  if (const auto it = by_name.find("state/step"); it != by_name.end()) {
    if (it->second->payload.size() != 2) throw CorruptCheckpoint("malformed step block");
    state->step = it->second->payload[0] | (static_cast<std::uint64_t>(it->second->payload[1]) << 32);
  }
  auto load_moment = [&](const std::string& kind, std::vector<MatF>& dst) {
    for (std::size_t p = 0; p < params.size(); ++p)
      if (const auto it = by_name.find(kind + "/" + params[p].name); it != by_name.end()) {
        const Block& b = *it->second;
        if (b.dims.size() != 2 || b.dims[0] != params[p].value.rows() || b.dims[1] != params[p].value.cols())
          throw ShapeError(kind + " for " + params[p].name + " has the wrong shape");
        dst[p] = block_matrix(b);
      }
  };
  load_moment("momentum", state->momentum);
  load_moment("second_moment", state->second_moment);
}

}  // namespace sacc
