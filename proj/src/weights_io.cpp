#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "oet/errors.hpp"
#include "oet/model.hpp"

namespace oet {

namespace {

constexpr char kMagic[4] = {'O', 'E', 'T', 'W'};

void put_u32_le(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> b = {
      static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
      static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

std::uint32_t get_u32_le(std::ifstream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64_le(std::ofstream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((bits >> (8 * i)) & 0xff);
  out.write(b.data(), 8);
}

double get_f64_le(std::ifstream& in) {
  std::array<unsigned char, 8> b{};
  in.read(reinterpret_cast<char*>(b.data()), 8);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_weights(const ModelWeights& w, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("save_weights: cannot open " + path);

  out.write(kMagic, 4);
  put_u32_le(out, kWeightFormatVersion);
  put_u32_le(out, static_cast<std::uint32_t>(w.config.layers));
  put_u32_le(out, static_cast<std::uint32_t>(w.config.d_model));
  put_u32_le(out, static_cast<std::uint32_t>(w.config.heads));
  put_u32_le(out, static_cast<std::uint32_t>(w.config.context));
  put_u32_le(out, static_cast<std::uint32_t>(w.config.vocab));
  put_u32_le(out, 0);  // reserved

  for_each_param_tensor(w, [&](const std::vector<double>& t) {
    for (double v : t) put_f64_le(out, v);
  });
  if (!out) throw data_error("save_weights: write failed for " + path);
}

ModelWeights load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("load_weights: cannot open " + path);

  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw data_error("load_weights: bad magic in " + path);
  }
  const std::uint32_t version = get_u32_le(in);
  if (version != kWeightFormatVersion) {
    throw data_error("load_weights: unsupported format version in " + path);
  }

  ModelConfig config;
  config.layers = static_cast<int>(get_u32_le(in));
  config.d_model = static_cast<int>(get_u32_le(in));
  config.heads = static_cast<int>(get_u32_le(in));
  config.context = static_cast<int>(get_u32_le(in));
  config.vocab = static_cast<int>(get_u32_le(in));
  get_u32_le(in);  // reserved
  if (!in) throw data_error("load_weights: truncated header in " + path);

  if (config.layers < 1 || config.layers > 64 || config.d_model < 1 || config.heads < 1 ||
      config.d_model % config.heads != 0 || config.context < 1 || config.vocab != Vocab::size) {
    throw data_error("load_weights: invalid model dimensions in " + path);
  }

  ModelWeights w = make_zero_weights(config);
  bool all_finite = true;
  for_each_param_tensor(w, [&](std::vector<double>& t) {
    for (double& v : t) {
      v = get_f64_le(in);
      all_finite = all_finite && std::isfinite(v);
    }
  });
  if (!in) throw data_error("load_weights: truncated parameters in " + path);
  in.peek();
  if (!in.eof()) throw data_error("load_weights: trailing bytes in " + path);
  if (!all_finite) throw data_error("load_weights: non-finite parameter in " + path);
  return w;
}

}  // namespace oet
