#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "m3/model.hpp"

namespace m3 {

// Binary layout, all integers little-endian:
//   "M3CK"  u32 version (1)
//   u64 manifest length, manifest bytes (JSON, keys sorted: config, meta)
//   u64 parameter count, then per parameter in model order:
//     u32 name length, name bytes, u32 rank, rank x u64 extents,
//     size x float64 values (IEEE-754, little-endian)
// Writing the same parameters twice yields identical bytes.

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;

  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

struct Checkpoint {
  M3Config config;
  DatasetMeta meta;
  std::vector<NamedArray> params;
};

template <class Real>
Checkpoint snapshot(const M3Model<Real>& model);

// Copies values into `model`; names and shapes must match one to one.
template <class Real>
void restore(M3Model<Real>& model, const Checkpoint& checkpoint);

void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
void write_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(std::istream& in);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace m3
