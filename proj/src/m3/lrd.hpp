#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "m3/sequence_data.hpp"
#include "m3/tensor.hpp"

namespace m3 {

// Trace of the empirical cross-covariance (1/n convention) between the
// embedding of each sequence's last item and the item `lag` steps earlier.
// Only sequences longer than `lag` take part; at least two are required.
// The result does not depend on `threads`.
double dep_l(std::span<const UserSequence> sequences, const Tensor& embeddings,
             std::size_t lag, std::size_t threads = 1);

// Number of sequences that qualify for `lag`.
std::size_t dep_samples(std::span<const UserSequence> sequences, std::size_t lag) noexcept;

struct DepProfile {
  std::vector<std::size_t> lags;
  // Empty where fewer than two sequences qualify.
  std::vector<std::optional<double>> dep;
  std::vector<std::size_t> n_samples;
  // Least-squares slope of log(dep) against log(lag) over lags with dep > 0.
  std::optional<double> slope;
};

// `lags` must be strictly ascending and positive.
DepProfile dep_profile(std::span<const UserSequence> sequences, const Tensor& embeddings,
                       std::span<const std::size_t> lags, std::size_t threads = 1);

std::optional<double> loglog_slope(std::span<const std::size_t> lags,
                                   std::span<const std::optional<double>> dep);

// `lag,dep,n_samples`; dep is left blank where undefined.
void write_profile_csv(std::ostream& out, const DepProfile& profile);
void write_profile_csv(const std::string& path, const DepProfile& profile);

// One line per item: `item_index v1 v2 ... vd`. Every index in [0, n) must
// appear exactly once; line order is free.
Tensor read_embeddings(std::istream& in);
Tensor read_embeddings(const std::string& path);
void write_embeddings(std::ostream& out, const Tensor& embeddings);
void write_embeddings(const std::string& path, const Tensor& embeddings);

}  // namespace m3
