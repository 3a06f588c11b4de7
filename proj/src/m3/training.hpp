#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "m3/model.hpp"
#include "m3/parameters.hpp"
#include "m3/sequence_data.hpp"

namespace m3 {

enum class NegativeSampling { uniform, frequency };

std::string to_string(NegativeSampling s);
NegativeSampling parse_sampling(const std::string& s);

struct LossConfig {
  std::size_t negatives = 100;  // capped at |V| - 1
  double label_weight = 1.0;
  NegativeSampling sampling = NegativeSampling::uniform;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;  // windows per update
  std::uint64_t seed = 1;
  double learning_rate = 0.1;
  double epsilon = 1e-8;
  std::size_t eval_every = 1;  // epochs between validation passes
  // Rows whose prefix holds at least this many events are targets.
  std::size_t min_target_position = 2;
  bool final_only = false;  // only the last event of each window
  std::size_t threads = 1;  // validation scoring workers
  LossConfig loss;

  void validate() const;
};

// JSON object of TrainConfig fields; unknown keys are rejected.
std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const std::string& json);

template <class Real>
struct AdagradState {
  double learning_rate = 0.1;
  double epsilon = 1e-8;
  std::vector<BasicTensor<Real>> accumulators;  // one per parameter, lazily sized
};

// acc += g^2; theta -= lr * g / (sqrt(acc) + eps); gradient cleared.
// Entries with zero gradient are left untouched.
template <class Real>
void adagrad_step(ParameterSet<Real>& params, AdagradState<Real>& state);

// Draws distinct negatives, never the label.
class NegativeSampler {
 public:
  NegativeSampler(std::size_t n_items, NegativeSampling mode,
                  std::vector<double> item_counts = {});

  std::vector<std::size_t> sample(std::size_t label, std::size_t count, std::mt19937_64& rng);

 private:
  std::size_t n_items_;
  NegativeSampling mode_;
  std::discrete_distribution<std::size_t> frequency_;
  std::vector<std::uint8_t> taken_;
};

struct LossRecord {
  std::size_t epoch = 0;  // 0 = before any update
  std::size_t step = 0;   // updates applied so far
  double loss = 0;        // mean per target
  std::optional<double> val_map20;
};

struct TrainResult {
  std::vector<LossRecord> records;
  std::optional<double> best_val_map20;
  std::size_t best_epoch = 0;
};

// Next-item training on every window. With a validation set the parameters
// with the best validation mAP@20 are restored at the end.
template <class Real>
TrainResult train(M3Model<Real>& model, const SequenceSet& train_set,
                  const SequenceSet* validation, const TrainConfig& config,
                  const std::function<void(const LossRecord&)>& on_record = {});

void write_loss_csv(std::ostream& out, const std::vector<LossRecord>& records);
void write_loss_csv(const std::string& path, const std::vector<LossRecord>& records);

}  // namespace m3
