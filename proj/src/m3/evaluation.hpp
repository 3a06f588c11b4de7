#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "m3/model.hpp"
#include "m3/sequence_data.hpp"

namespace m3 {

// Single-target average precision: 1/rank inside the top n, else 0.
double average_precision(std::size_t rank, std::size_t n);

// 1-based rank of `target` when items are sorted by descending score with
// ties broken by ascending index.
std::size_t rank_of(std::span<const double> scores, std::size_t target);

// Full rankings (item lists, best first) with one target each. Rankings with
// repeated items are rejected; a target absent from its ranking scores 0.
double map_at_n(const std::vector<std::vector<std::size_t>>& rankings,
                std::span<const std::size_t> targets, std::size_t n);

// Mean of average_precision over 1-based ranks, accumulated in index order.
double map_from_ranks(std::span<const std::size_t> ranks, std::size_t n);

struct MetricsReport {
  std::vector<std::size_t> ns;
  std::vector<double> map;  // aligned with ns
  std::size_t n_examples = 0;

  double at(std::size_t n) const;
};

// Scores every item for the event that follows `history`; the target's
// output context is passed along.
using Scorer = std::function<std::vector<double>(std::span<const Event> history,
                                                 const std::vector<std::size_t>& next_context_out)>;

// One instance per window of length >= 2: predict its last event from the
// preceding events. Workers score disjoint instances; the reduction always
// runs in instance order, so results do not depend on `threads`.
// Scorer must be safe to call concurrently when threads > 1.
std::vector<std::size_t> target_ranks(const Scorer& scorer, const SequenceSet& test,
                                      std::size_t threads = 1);
MetricsReport evaluate(const Scorer& scorer, const SequenceSet& test,
                       std::span<const std::size_t> ns, std::size_t threads = 1);

// Rejects test data whose vocabulary or context cardinalities differ from the
// model's.
void check_compatible(const DatasetMeta& model, const DatasetMeta& data);

template <class Real>
MetricsReport evaluate(M3Model<Real>& model, const SequenceSet& test,
                       std::span<const std::size_t> ns, std::size_t threads = 1);

struct MetricsRow {
  std::string model;
  std::string subset;
  std::string gate_type;
  MetricsReport report;
};

// `model,subset,gate_type,map5,map10,map20,n_examples`; the map columns
// follow the report's n list. All rows must share one n list.
void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows);
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

// Gate statistics grouped by one context feature of the target event.
struct GroupKey {
  enum class Side { input, output } side = Side::output;
  std::size_t feature = 0;

  // "context" (first output feature, else first input feature),
  // "ctx_out:<f>" or "ctx_in:<f>".
  static GroupKey parse(const std::string& spec, const DatasetMeta& meta);
};

struct GateRow {
  std::size_t group = 0;
  std::size_t count = 0;
  std::array<double, 3> mean{};
};

template <class Real>
std::vector<GateRow> gate_report(M3Model<Real>& model, const SequenceSet& data,
                                 const GroupKey& key);

// Per-group arithmetic means of gate vectors, ascending by group.
std::vector<GateRow> mean_gates(std::span<const std::size_t> groups,
                                std::span<const std::array<double, 3>> gates);

// `group,count,gate_t,gate_s,gate_l`; labels replace group indices when given.
void write_gate_csv(std::ostream& out, const std::vector<GateRow>& rows,
                    const std::map<std::size_t, std::string>& labels = {});

}  // namespace m3
