#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "m3/evaluation.hpp"
#include "m3/model.hpp"
#include "m3/training.hpp"

namespace m3 {

struct AblationResult {
  EncoderSet subset;
  MetricsReport report;  // on the test split
  TrainResult training;
};

// Trains one model per subset from `base` with the same seeds and
// hyperparameters, then evaluates each on `test`. Precision follows
// base.precision.
std::vector<AblationResult> ablate(const SequenceSet& train_set, const SequenceSet* validation,
                                   const SequenceSet& test, const M3Config& base,
                                   std::span<const EncoderSet> subsets,
                                   const TrainConfig& train_config,
                                   std::span<const std::size_t> ns,
                                   const std::function<void(const EncoderSet&, const LossRecord&)>&
                                       on_record = {});

// "T,S,L,TS" -> four subsets.
std::vector<EncoderSet> parse_subsets(const std::string& list);

std::vector<MetricsRow> ablation_rows(const M3Config& base,
                                      const std::vector<AblationResult>& results);

}  // namespace m3
