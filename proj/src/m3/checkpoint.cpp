#include "m3/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "json.hpp"
#include "m3/error.hpp"

namespace m3 {
namespace {

constexpr char kMagic[4] = {'M', '3', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <class UInt>
void put(std::ostream& out, UInt v) {
  char bytes[sizeof(UInt)];
  for (std::size_t i = 0; i < sizeof(UInt); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, sizeof(UInt));
}

template <class UInt>
UInt get(std::istream& in, const char* what) {
  unsigned char bytes[sizeof(UInt)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(UInt))) {
    fail(ErrorCode::format, std::string("checkpoint: truncated while reading ") + what);
  }
  UInt v = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) v |= static_cast<UInt>(bytes[i]) << (8 * i);
  return v;
}

std::string get_bytes(std::istream& in, std::uint64_t n, const char* what) {
  if (n > (1ull << 32)) fail(ErrorCode::format, std::string("checkpoint: implausible ") + what + " length");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) {
    fail(ErrorCode::format, std::string("checkpoint: truncated while reading ") + what);
  }
  return s;
}

}  // namespace

template <class Real>
Checkpoint snapshot(const M3Model<Real>& model) {
  Checkpoint ck{model.config(), model.meta(), {}};
  for (const auto& p : model.parameters()) {
    NamedArray a{p.name, p.value.shape(), {}};
    a.values.assign(p.value.values().begin(), p.value.values().end());
    ck.params.push_back(std::move(a));
  }
  return ck;
}

template <class Real>
void restore(M3Model<Real>& model, const Checkpoint& ck) {
  if (ck.params.size() != model.parameters().size()) {
    fail(ErrorCode::shape_mismatch, "checkpoint has " + std::to_string(ck.params.size()) +
                                        " parameters, model has " +
                                        std::to_string(model.parameters().size()));
  }
  for (const auto& a : ck.params) {
    auto* p = model.parameters().find(a.name);
    if (!p) fail(ErrorCode::shape_mismatch, "checkpoint parameter " + a.name + " not in model");
    if (p->value.shape() != a.shape) {
      fail(ErrorCode::shape_mismatch, "parameter " + a.name + ": shape " + shape_string(a.shape) +
                                          " vs model " + shape_string(p->value.shape()));
    }
    for (std::size_t i = 0; i < a.values.size(); ++i) p->value[i] = static_cast<Real>(a.values[i]);
  }
}

void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  nlohmann::json manifest;
  manifest["config"] = nlohmann::json::parse(config_to_json(ck.config));
  manifest["meta"] = nlohmann::json::parse(meta_to_json(ck.meta));
  const std::string text = manifest.dump();

  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  put<std::uint64_t>(out, ck.params.size());
  for (const auto& a : ck.params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
    for (std::size_t d : a.shape) put<std::uint64_t>(out, d);
    for (double v : a.values) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) fail(ErrorCode::io, "checkpoint: write failed");
}

void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot open " + path + " for writing");
  write_checkpoint(out, ck);
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    fail(ErrorCode::format, "not an m3 checkpoint (bad magic)");
  }
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kVersion) {
    fail(ErrorCode::format, "unsupported checkpoint version " + std::to_string(version));
  }
  const std::string text = get_bytes(in, get<std::uint64_t>(in, "manifest"), "manifest");
  Checkpoint ck;
  try {
    const auto manifest = nlohmann::json::parse(text);
    ck.config = config_from_json(manifest.at("config").dump());
    ck.meta = meta_from_json(manifest.at("meta").dump());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, std::string("checkpoint manifest: ") + e.what());
  }
  const auto count = get<std::uint64_t>(in, "parameter count");
  for (std::uint64_t k = 0; k < count; ++k) {
    NamedArray a;
    a.name = get_bytes(in, get<std::uint32_t>(in, "name"), "name");
    const auto rank = get<std::uint32_t>(in, "rank");
    if (rank == 0 || rank > 8) fail(ErrorCode::format, "checkpoint: bad rank for " + a.name);
    for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(get<std::uint64_t>(in, "extent"));
    std::uint64_t n = 1;
    for (std::size_t d : a.shape) {
      if (d == 0 || d > (1ull << 32) || n * d > (1ull << 32)) {
        fail(ErrorCode::format, "checkpoint: implausible shape for " + a.name);
      }
      n *= d;
    }
    // Grow as bytes arrive so a corrupt extent cannot force a huge allocation.
    a.values.reserve(std::min<std::uint64_t>(n, 1u << 20));
    for (std::uint64_t i = 0; i < n; ++i) {
      a.values.push_back(std::bit_cast<double>(get<std::uint64_t>(in, "values")));
    }
    ck.params.push_back(std::move(a));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    fail(ErrorCode::format, "checkpoint: trailing bytes");
  }
  return ck;
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open checkpoint " + path);
  return read_checkpoint(in);
}

template Checkpoint snapshot(const M3Model<double>&);
template Checkpoint snapshot(const M3Model<float>&);
template void restore(M3Model<double>&, const Checkpoint&);
template void restore(M3Model<float>&, const Checkpoint&);

}  // namespace m3
