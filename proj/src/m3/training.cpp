#include "m3/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "json.hpp"
#include "m3/error.hpp"
#include "m3/evaluation.hpp"
#include "m3/text.hpp"

namespace m3 {

std::string to_string(NegativeSampling s) {
  return s == NegativeSampling::uniform ? "uniform" : "frequency";
}

NegativeSampling parse_sampling(const std::string& s) {
  if (s == "uniform") return NegativeSampling::uniform;
  if (s == "frequency" || s == "frequency-proportional") return NegativeSampling::frequency;
  fail(ErrorCode::invalid_argument, "invalid sampling \"" + s + "\" (expected uniform or frequency)");
}

void TrainConfig::validate() const {
  require(epochs >= 1, "epochs must be positive");
  require(batch_size >= 1, "batch_size must be positive");
  require(eval_every >= 1, "eval_every must be positive");
  require(min_target_position >= 1, "min_target_position must be positive");
  require(threads >= 1, "threads must be positive");
  require(std::isfinite(learning_rate) && learning_rate >= 0, "learning_rate must be >= 0");
  require(std::isfinite(epsilon) && epsilon >= 0, "epsilon must be >= 0");
  require(loss.negatives >= 1, "negatives must be positive");
  require(std::isfinite(loss.label_weight) && loss.label_weight > 0, "label_weight must be > 0");
}

std::string train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["learning_rate"] = c.learning_rate;
  j["epsilon"] = c.epsilon;
  j["eval_every"] = c.eval_every;
  j["min_target_position"] = c.min_target_position;
  j["final_only"] = c.final_only;
  j["threads"] = c.threads;
  j["negatives"] = c.loss.negatives;
  j["label_weight"] = c.loss.label_weight;
  j["sampling"] = to_string(c.loss.sampling);
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_object()) fail(ErrorCode::format, "train config must be a JSON object");
    for (auto& [key, v] : j.items()) {
      auto count = [&] {
        if (!v.is_number_unsigned()) {
          fail(ErrorCode::invalid_argument, "train config: " + key + " must be a nonnegative integer");
        }
        return v.get<std::size_t>();
      };
      if (key == "epochs") c.epochs = count();
      else if (key == "batch_size") c.batch_size = count();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "epsilon") c.epsilon = v.get<double>();
      else if (key == "eval_every") c.eval_every = count();
      else if (key == "min_target_position") c.min_target_position = count();
      else if (key == "final_only") c.final_only = v.get<bool>();
      else if (key == "threads") c.threads = count();
      else if (key == "negatives") c.loss.negatives = count();
      else if (key == "label_weight") c.loss.label_weight = v.get<double>();
      else if (key == "sampling") c.loss.sampling = parse_sampling(v.get<std::string>());
      else fail(ErrorCode::invalid_argument, "train config: unknown key \"" + key + "\"");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("train config: ") + e.what());
  }
  return c;
}

template <class Real>
void adagrad_step(ParameterSet<Real>& params, AdagradState<Real>& state) {
  std::size_t k = 0;
  for (auto& p : params) {
    if (state.accumulators.size() <= k) state.accumulators.emplace_back(p.value.shape());
    auto& acc = state.accumulators[k++];
    if (acc.shape() != p.value.shape()) fail(ErrorCode::internal, "adagrad: accumulator shape drift");
    Real* theta = p.value.data();
    Real* g = p.gradient.data();
    Real* a = acc.data();
    const Real lr = static_cast<Real>(state.learning_rate);
    const Real eps = static_cast<Real>(state.epsilon);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      if (g[i] == Real(0)) continue;
      a[i] += g[i] * g[i];
      theta[i] -= lr * g[i] / (std::sqrt(a[i]) + eps);
      g[i] = Real(0);
    }
  }
}

NegativeSampler::NegativeSampler(std::size_t n_items, NegativeSampling mode,
                                 std::vector<double> item_counts)
    : n_items_(n_items), mode_(mode), taken_(n_items, 0) {
  require(n_items >= 2, "negative sampling needs at least two items");
  if (mode == NegativeSampling::frequency) {
    require(item_counts.size() == n_items, "frequency sampling needs one count per item");
    frequency_ = std::discrete_distribution<std::size_t>(item_counts.begin(), item_counts.end());
  }
}

std::vector<std::size_t> NegativeSampler::sample(std::size_t label, std::size_t count,
                                                 std::mt19937_64& rng) {
  require(label < n_items_, "label outside vocabulary");
  const std::size_t pool = n_items_ - 1;
  require(count >= 1 && count <= pool, "negatives must lie in [1, |V|-1]");
  // Items other than the label, as positions 0..pool-1.
  auto item_at = [label](std::size_t x) { return x >= label ? x + 1 : x; };
  std::vector<std::size_t> out;
  out.reserve(count);
  auto take = [&](std::size_t item) {
    taken_[item] = 1;
    out.push_back(item);
  };

  if (mode_ == NegativeSampling::frequency) {
    std::size_t attempts = 0;
    const std::size_t limit = 50 * count + 100;
    while (out.size() < count && attempts++ < limit) {
      const std::size_t item = frequency_(rng);
      if (item != label && !taken_[item]) take(item);
    }
  }
  // Uniform fill with Floyd's algorithm over a universe of untaken items.
  auto floyd = [&](std::size_t n, auto&& item_of) {
    const std::size_t need = count - out.size();
    for (std::size_t j = n - need; j < n; ++j) {
      const std::size_t t = std::uniform_int_distribution<std::size_t>(0, j)(rng);
      take(taken_[item_of(t)] ? item_of(j) : item_of(t));
    }
  };
  if (out.empty()) {
    floyd(pool, item_at);
  } else if (out.size() < count) {
    std::vector<std::size_t> free;
    for (std::size_t x = 0; x < pool; ++x) {
      if (!taken_[item_at(x)]) free.push_back(item_at(x));
    }
    floyd(free.size(), [&](std::size_t x) { return free[x]; });
  }
  for (std::size_t item : out) taken_[item] = 0;
  return out;
}

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t component) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(component)};
  return std::mt19937_64(seq);
}

// Target rows of one window given the policy.
std::vector<std::size_t> target_rows(std::size_t length, const TrainConfig& c) {
  std::vector<std::size_t> rows;
  if (length < 2) return rows;
  if (c.final_only) return {length - 2};
  for (std::size_t t = 0; t + 1 < length; ++t) {
    if (t + 1 >= c.min_target_position) rows.push_back(t);
  }
  return rows;
}

struct WindowLoss {
  double value = 0;
  std::size_t targets = 0;
};

}  // namespace

template <class Real>
TrainResult train(M3Model<Real>& model, const SequenceSet& train_set,
                  const SequenceSet* validation, const TrainConfig& config,
                  const std::function<void(const LossRecord&)>& on_record) {
  config.validate();
  check_compatible(model.meta(), train_set.meta);
  if (validation) check_compatible(model.meta(), validation->meta);
  const std::size_t n_items = model.meta().n_items;
  const std::size_t negatives = std::min(config.loss.negatives, n_items - 1);

  std::vector<std::size_t> windows;
  for (std::size_t i = 0; i < train_set.sequences.size(); ++i) {
    if (!target_rows(train_set.sequences[i].events.size(), config).empty()) windows.push_back(i);
  }
  if (windows.empty()) fail(ErrorCode::invalid_argument, "training set has no usable windows");

  std::vector<double> counts(n_items, 0.0);
  for (const auto& s : train_set.sequences) {
    for (const auto& e : s.events) counts[e.item] += 1;
  }
  NegativeSampler sampler(n_items, config.loss.sampling, counts);

  auto window_loss = [&](const UserSequence& seq, std::mt19937_64& rng, double scale_by,
                         bool backprop) {
    const auto& ev = seq.events;
    const auto rows = target_rows(ev.size(), config);
    std::vector<SampledTarget> targets;
    for (std::size_t t : rows) {
      const std::size_t label = ev[t + 1].item;
      targets.push_back({t, label, sampler.sample(label, negatives, rng)});
    }
    Tape<Real> tape;
    const std::span<const Event> history(ev.data(), ev.size() - 1);
    const auto ctx = next_contexts(ev);
    const auto pass = model.forward(tape, history, ctx);
    auto loss = sampled_softmax_loss(pass.z_out, tape.parameter(model.output_table()),
                                     std::span<const SampledTarget>(targets),
                                     config.loss.label_weight);
    const double value = static_cast<double>(loss.value()[0]);
    if (backprop) tape.backward(scale(loss, scale_by));
    return WindowLoss{value, targets.size()};
  };

  auto validate_map = [&]() -> std::optional<double> {
    if (!validation) return std::nullopt;
    const std::size_t n20[] = {20};
    return evaluate(model, *validation, n20, config.threads).map[0];
  };

  TrainResult result;
  auto emit = [&](const LossRecord& r) {
    result.records.push_back(r);
    if (on_record) on_record(r);
  };

  // Epoch 0: loss of the initial parameters on the same target set.
  {
    auto rng = stream(config.seed, 1);
    double total = 0;
    std::size_t n = 0;
    for (std::size_t w : windows) {
      const auto l = window_loss(train_set.sequences[w], rng, 1.0, false);
      total += l.value;
      n += l.targets;
    }
    LossRecord r{0, 0, total / static_cast<double>(n), validate_map()};
    emit(r);
  }

  std::vector<std::vector<Real>> best;
  auto save_best = [&] {
    best.clear();
    for (const auto& p : model.parameters()) best.emplace_back(p.value.values().begin(), p.value.values().end());
  };
  if (result.records.back().val_map20) {
    result.best_val_map20 = result.records.back().val_map20;
    save_best();
  }

  model.parameters().zero_grad();
  AdagradState<Real> state{config.learning_rate, config.epsilon, {}};
  auto shuffle_rng = stream(config.seed, 2);
  auto negative_rng = stream(config.seed, 3);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(windows.begin(), windows.end(), shuffle_rng);
    double epoch_loss = 0;
    std::size_t epoch_targets = 0;
    for (std::size_t begin = 0; begin < windows.size(); begin += config.batch_size) {
      const std::size_t end = std::min(windows.size(), begin + config.batch_size);
      std::size_t batch_targets = 0;
      for (std::size_t i = begin; i < end; ++i) {
        batch_targets += target_rows(train_set.sequences[windows[i]].events.size(), config).size();
      }
      double batch_loss = 0;
      try {
        for (std::size_t i = begin; i < end; ++i) {
          batch_loss += window_loss(train_set.sequences[windows[i]], negative_rng,
                                    1.0 / static_cast<double>(batch_targets), true)
                            .value;
        }
        if (!std::isfinite(batch_loss)) fail(ErrorCode::non_finite, "non-finite loss");
        adagrad_step(model.parameters(), state);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::non_finite) throw;
        fail(ErrorCode::diverged, "training diverged at batch " + std::to_string(step) +
                                      " (epoch " + std::to_string(epoch) + "): " + e.what());
      }
      ++step;
      epoch_loss += batch_loss;
      epoch_targets += batch_targets;
    }
    LossRecord r{epoch, step, epoch_loss / static_cast<double>(epoch_targets), std::nullopt};
    if (epoch % config.eval_every == 0 || epoch == config.epochs) {
      r.val_map20 = validate_map();
      if (r.val_map20 && (!result.best_val_map20 || *r.val_map20 > *result.best_val_map20)) {
        result.best_val_map20 = r.val_map20;
        result.best_epoch = epoch;
        save_best();
      }
    }
    emit(r);
  }

  if (!best.empty()) {
    std::size_t k = 0;
    for (auto& p : model.parameters()) {
      std::copy(best[k].begin(), best[k].end(), p.value.data());
      ++k;
    }
  }
  return result;
}

void write_loss_csv(std::ostream& out, const std::vector<LossRecord>& records) {
  out << "epoch,step,loss,val_map20\n";
  for (const auto& r : records) {
    out << r.epoch << ',' << r.step << ',' << text::format_double(r.loss) << ',';
    if (r.val_map20) out << text::format_double(*r.val_map20);
    out << '\n';
  }
}

void write_loss_csv(const std::string& path, const std::vector<LossRecord>& records) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::io, "cannot open " + path + " for writing");
  write_loss_csv(out, records);
}

template void adagrad_step(ParameterSet<double>&, AdagradState<double>&);
template void adagrad_step(ParameterSet<float>&, AdagradState<float>&);
template TrainResult train(M3Model<double>&, const SequenceSet&, const SequenceSet*,
                           const TrainConfig&, const std::function<void(const LossRecord&)>&);
template TrainResult train(M3Model<float>&, const SequenceSet&, const SequenceSet*,
                           const TrainConfig&, const std::function<void(const LossRecord&)>&);

}  // namespace m3
