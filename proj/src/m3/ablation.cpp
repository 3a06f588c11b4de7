#include "m3/ablation.hpp"

#include "m3/error.hpp"
#include "m3/text.hpp"

namespace m3 {
namespace {

template <class Real>
AblationResult run_one(const SequenceSet& train_set, const SequenceSet* validation,
                       const SequenceSet& test, const M3Config& config,
                       const TrainConfig& train_config, std::span<const std::size_t> ns,
                       const std::function<void(const LossRecord&)>& on_record) {
  M3Model<Real> model(config, train_set.meta, train_config.seed);
  AblationResult r;
  r.subset = config.enabled;
  r.training = train(model, train_set, validation, train_config, on_record);
  r.report = evaluate(model, test, ns, train_config.threads);
  return r;
}

}  // namespace

std::vector<AblationResult> ablate(const SequenceSet& train_set, const SequenceSet* validation,
                                   const SequenceSet& test, const M3Config& base,
                                   std::span<const EncoderSet> subsets,
                                   const TrainConfig& train_config,
                                   std::span<const std::size_t> ns,
                                   const std::function<void(const EncoderSet&, const LossRecord&)>&
                                       on_record) {
  require(!subsets.empty(), "ablate: no encoder subsets given");
  std::vector<AblationResult> out;
  for (const auto& subset : subsets) {
    M3Config c = base;
    c.enabled = subset;
    c.validate(train_set.meta);
    std::function<void(const LossRecord&)> forward;
    if (on_record) forward = [&](const LossRecord& r) { on_record(subset, r); };
    out.push_back(c.precision == Precision::float32
                      ? run_one<float>(train_set, validation, test, c, train_config, ns, forward)
                      : run_one<double>(train_set, validation, test, c, train_config, ns, forward));
  }
  return out;
}

std::vector<EncoderSet> parse_subsets(const std::string& list) {
  std::vector<EncoderSet> out;
  for (auto part : text::split(list, ',')) out.push_back(EncoderSet::parse(std::string(text::trim(part))));
  require(!out.empty(), "no encoder subsets given");
  return out;
}

std::vector<MetricsRow> ablation_rows(const M3Config& base,
                                      const std::vector<AblationResult>& results) {
  std::vector<MetricsRow> rows;
  for (const auto& r : results) {
    rows.push_back({to_string(base.variant), r.subset.letters(), to_string(base.gate), r.report});
  }
  return rows;
}

}  // namespace m3
