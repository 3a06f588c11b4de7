#include "m3/evaluation.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>
#include <thread>

#include "m3/error.hpp"
#include "m3/text.hpp"

namespace m3 {

double average_precision(std::size_t rank, std::size_t n) {
  require(rank >= 1, "rank is 1-based");
  return rank <= n ? 1.0 / static_cast<double>(rank) : 0.0;
}

std::size_t rank_of(std::span<const double> scores, std::size_t target) {
  require(target < scores.size(), "target outside score vector");
  const double s = scores[target];
  std::size_t rank = 1;
  for (std::size_t v = 0; v < scores.size(); ++v) {
    if (scores[v] > s || (v < target && scores[v] == s)) ++rank;
  }
  return rank;
}

double map_at_n(const std::vector<std::vector<std::size_t>>& rankings,
                std::span<const std::size_t> targets, std::size_t n) {
  require(rankings.size() == targets.size(), "one target per ranking required");
  require(!rankings.empty(), "no instances");
  std::vector<std::size_t> ranks;
  for (std::size_t i = 0; i < rankings.size(); ++i) {
    const auto& r = rankings[i];
    std::vector<std::size_t> sorted = r;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      fail(ErrorCode::invalid_argument,
           "ranking " + std::to_string(i) + " lists an item more than once");
    }
    const auto it = std::find(r.begin(), r.end(), targets[i]);
    // Absent targets rank past every listed item, i.e. beyond any n used.
    ranks.push_back(it == r.end() ? r.size() + n + 1 : static_cast<std::size_t>(it - r.begin()) + 1);
  }
  return map_from_ranks(ranks, n);
}

double map_from_ranks(std::span<const std::size_t> ranks, std::size_t n) {
  require(!ranks.empty(), "no instances");
  double total = 0;
  for (std::size_t r : ranks) total += average_precision(r, n);
  return total / static_cast<double>(ranks.size());
}

double MetricsReport::at(std::size_t n) const {
  for (std::size_t i = 0; i < ns.size(); ++i) {
    if (ns[i] == n) return map[i];
  }
  fail(ErrorCode::invalid_argument, "mAP@" + std::to_string(n) + " not computed");
}

std::vector<std::size_t> target_ranks(const Scorer& scorer, const SequenceSet& test,
                                      std::size_t threads) {
  std::vector<const UserSequence*> instances;
  for (const auto& s : test.sequences) {
    if (s.events.size() >= 2) instances.push_back(&s);
  }
  if (instances.empty()) fail(ErrorCode::invalid_argument, "no evaluation instances (windows need >= 2 events)");

  std::vector<std::size_t> ranks(instances.size());
  auto work = [&](std::size_t worker, std::size_t stride) {
    for (std::size_t i = worker; i < instances.size(); i += stride) {
      const auto& ev = instances[i]->events;
      const std::span<const Event> history(ev.data(), ev.size() - 1);
      const auto scores = scorer(history, ev.back().context_out);
      ranks[i] = rank_of(scores, ev.back().item);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, instances.size()));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          work(w, threads);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return ranks;
}

MetricsReport evaluate(const Scorer& scorer, const SequenceSet& test,
                       std::span<const std::size_t> ns, std::size_t threads) {
  require(!ns.empty(), "at least one cutoff n required");
  for (std::size_t n : ns) require(n >= 1, "cutoff n must be positive");
  const auto ranks = target_ranks(scorer, test, threads);
  MetricsReport report;
  report.ns.assign(ns.begin(), ns.end());
  for (std::size_t n : ns) report.map.push_back(map_from_ranks(ranks, n));
  report.n_examples = ranks.size();
  return report;
}

void check_compatible(const DatasetMeta& model, const DatasetMeta& data) {
  if (model.n_items != data.n_items) {
    fail(ErrorCode::vocabulary_mismatch,
         "vocabulary mismatch: model has " + std::to_string(model.n_items) + " items, data has " +
             std::to_string(data.n_items));
  }
  if (model.ctx_in_sizes != data.ctx_in_sizes || model.ctx_out_sizes != data.ctx_out_sizes) {
    fail(ErrorCode::vocabulary_mismatch, "context feature cardinalities differ between model and data");
  }
}

template <class Real>
MetricsReport evaluate(M3Model<Real>& model, const SequenceSet& test,
                       std::span<const std::size_t> ns, std::size_t threads) {
  check_compatible(model.meta(), test.meta);
  Scorer scorer = [&model](std::span<const Event> history, const std::vector<std::size_t>& ctx) {
    return model.score_next(history, ctx);
  };
  return evaluate(scorer, test, ns, threads);
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  require(!rows.empty(), "no metrics rows");
  const auto& ns = rows.front().report.ns;
  out << "model,subset,gate_type";
  for (std::size_t n : ns) out << ",map" << n;
  out << ",n_examples\n";
  for (const auto& r : rows) {
    require(r.report.ns == ns, "metrics rows use different cutoffs");
    out << r.model << ',' << r.subset << ',' << r.gate_type;
    for (double m : r.report.map) out << ',' << text::format_double(m);
    out << ',' << r.report.n_examples << '\n';
  }
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::io, "cannot open " + path + " for writing");
  write_metrics_csv(out, rows);
  if (!out) fail(ErrorCode::io, "write failed: " + path);
}

GroupKey GroupKey::parse(const std::string& spec, const DatasetMeta& meta) {
  GroupKey key;
  if (spec == "context") {
    if (!meta.ctx_out_sizes.empty()) return key;
    if (!meta.ctx_in_sizes.empty()) return {Side::input, 0};
    fail(ErrorCode::invalid_argument, "dataset has no context features to group by");
  }
  const auto colon = spec.find(':');
  const std::string side = spec.substr(0, colon);
  if (colon == std::string::npos || (side != "ctx_in" && side != "ctx_out")) {
    fail(ErrorCode::invalid_argument,
         "invalid group key \"" + spec + "\" (use context, ctx_in:<f> or ctx_out:<f>)");
  }
  key.side = side == "ctx_in" ? Side::input : Side::output;
  const auto feature = text::parse_int<std::size_t>(spec.substr(colon + 1));
  if (!feature) fail(ErrorCode::invalid_argument, "invalid feature index in \"" + spec + "\"");
  key.feature = *feature;
  const auto& sizes = key.side == Side::input ? meta.ctx_in_sizes : meta.ctx_out_sizes;
  if (key.feature >= sizes.size()) {
    fail(ErrorCode::invalid_argument, "group key \"" + spec + "\" names a missing feature");
  }
  return key;
}

std::vector<GateRow> mean_gates(std::span<const std::size_t> groups,
                                std::span<const std::array<double, 3>> gates) {
  require(groups.size() == gates.size(), "one group per gate vector required");
  std::map<std::size_t, GateRow> acc;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    auto& row = acc[groups[i]];
    row.group = groups[i];
    ++row.count;
    for (std::size_t k = 0; k < 3; ++k) row.mean[k] += gates[i][k];
  }
  std::vector<GateRow> out;
  for (auto& [g, row] : acc) {
    for (double& m : row.mean) m /= static_cast<double>(row.count);
    out.push_back(row);
  }
  return out;
}

template <class Real>
std::vector<GateRow> gate_report(M3Model<Real>& model, const SequenceSet& data,
                                 const GroupKey& key) {
  check_compatible(model.meta(), data.meta);
  std::vector<std::size_t> groups;
  std::vector<std::array<double, 3>> gates;
  for (const auto& s : data.sequences) {
    if (s.events.size() < 2) continue;
    const Event& target = s.events.back();
    const auto& ctx = key.side == GroupKey::Side::output ? target.context_out : target.context_in;
    if (key.feature >= ctx.size()) fail(ErrorCode::invalid_argument, "group feature missing from event");
    const std::span<const Event> history(s.events.data(), s.events.size() - 1);
    groups.push_back(ctx[key.feature]);
    gates.push_back(model.gate_next(history, target.context_out));
  }
  return mean_gates(groups, gates);
}

void write_gate_csv(std::ostream& out, const std::vector<GateRow>& rows,
                    const std::map<std::size_t, std::string>& labels) {
  out << "group,count,gate_t,gate_s,gate_l\n";
  for (const auto& r : rows) {
    auto it = labels.find(r.group);
    out << (it == labels.end() ? std::to_string(r.group) : it->second) << ',' << r.count;
    for (double m : r.mean) out << ',' << text::format_double(m);
    out << '\n';
  }
}

template MetricsReport evaluate(M3Model<double>&, const SequenceSet&, std::span<const std::size_t>,
                                std::size_t);
template MetricsReport evaluate(M3Model<float>&, const SequenceSet&, std::span<const std::size_t>,
                                std::size_t);
template std::vector<GateRow> gate_report(M3Model<double>&, const SequenceSet&, const GroupKey&);
template std::vector<GateRow> gate_report(M3Model<float>&, const SequenceSet&, const GroupKey&);

}  // namespace m3
