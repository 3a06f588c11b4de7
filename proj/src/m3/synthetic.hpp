#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "m3/sequence_data.hpp"

namespace m3 {

enum class SyntheticKind { markov, long_copy, mixed_context };

SyntheticKind parse_synthetic_kind(const std::string& name);
const char* to_string(SyntheticKind kind) noexcept;

using TransitionMatrix = std::vector<std::vector<double>>;

struct SyntheticParams {
  std::size_t vocab = 50;
  std::size_t users = 1000;
  std::size_t length = 50;
  // markov and mixed-context (detail scenario). Drawn row-wise from a
  // symmetric Dirichlet(concentration) when empty.
  TransitionMatrix transition;
  double concentration = 0.1;
  // long-copy
  std::size_t lag = 50;
  double copy_prob = 0.8;
  // mixed-context: scenario 0 = home, 1 = detail
  double home_prob = 0.5;
  std::size_t taste_size = 10;
};

// Exact distribution of seq.events[position].item given everything before it
// (and, for mixed-context, that event's own scenario). Valid for the full
// generated sequences; windows cut from them lose the absolute position.
using BayesOracle =
    std::function<std::vector<double>(const UserSequence& seq, std::size_t position)>;

struct SyntheticData {
  SequenceSet data;
  BayesOracle oracle;
  TransitionMatrix transition;
};

// JSON object of the scalar SyntheticParams fields; the transition matrix is
// always drawn. Unknown keys are rejected.
std::string synthetic_params_to_json(const SyntheticParams& params);
SyntheticParams synthetic_params_from_json(const std::string& json);

inline constexpr std::size_t kScenarioHome = 0;
inline constexpr std::size_t kScenarioDetail = 1;

SyntheticData generate_synthetic(SyntheticKind kind, const SyntheticParams& params,
                                 std::uint64_t seed);

TransitionMatrix random_transition_matrix(std::size_t vocab, double concentration,
                                          std::mt19937_64& rng);

// Throws unless rows are nonnegative, finite, and sum to 1 within 1e-9.
void validate_stochastic(const TransitionMatrix& matrix);

}  // namespace m3
