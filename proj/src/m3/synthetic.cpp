#include "m3/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <unordered_map>

#include "json.hpp"
#include "m3/error.hpp"

namespace m3 {

SyntheticKind parse_synthetic_kind(const std::string& name) {
  if (name == "markov") return SyntheticKind::markov;
  if (name == "long-copy") return SyntheticKind::long_copy;
  if (name == "mixed-context") return SyntheticKind::mixed_context;
  fail(ErrorCode::invalid_argument, "unknown synthetic kind '" + name + "'");
}

const char* to_string(SyntheticKind kind) noexcept {
  switch (kind) {
    case SyntheticKind::markov: return "markov";
    case SyntheticKind::long_copy: return "long-copy";
    case SyntheticKind::mixed_context: return "mixed-context";
  }
  return "unknown";
}

std::string synthetic_params_to_json(const SyntheticParams& p) {
  nlohmann::json j;
  j["vocab"] = p.vocab;
  j["users"] = p.users;
  j["length"] = p.length;
  j["concentration"] = p.concentration;
  j["lag"] = p.lag;
  j["copy_prob"] = p.copy_prob;
  j["home_prob"] = p.home_prob;
  j["taste_size"] = p.taste_size;
  return j.dump();
}

SyntheticParams synthetic_params_from_json(const std::string& text) {
  SyntheticParams p;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_object()) fail(ErrorCode::format, "synthetic params must be a JSON object");
    for (auto& [key, v] : j.items()) {
      auto count = [&] {
        if (!v.is_number_unsigned()) {
          fail(ErrorCode::invalid_argument, "synthetic params: " + key + " must be a nonnegative integer");
        }
        return v.get<std::size_t>();
      };
      if (key == "vocab") p.vocab = count();
      else if (key == "users") p.users = count();
      else if (key == "length") p.length = count();
      else if (key == "concentration") p.concentration = v.get<double>();
      else if (key == "lag") p.lag = count();
      else if (key == "copy_prob") p.copy_prob = v.get<double>();
      else if (key == "home_prob") p.home_prob = v.get<double>();
      else if (key == "taste_size") p.taste_size = count();
      else fail(ErrorCode::invalid_argument, "synthetic params: unknown key \"" + key + "\"");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("synthetic params: ") + e.what());
  }
  return p;
}

void validate_stochastic(const TransitionMatrix& matrix) {
  require(!matrix.empty(), "transition matrix is empty");
  for (std::size_t r = 0; r < matrix.size(); ++r) {
    const auto& row = matrix[r];
    if (row.size() != matrix.size()) {
      fail(ErrorCode::invalid_argument, "transition matrix must be square");
    }
    double sum = 0;
    for (double p : row) {
      if (!std::isfinite(p) || p < 0) {
        fail(ErrorCode::invalid_argument,
             "transition matrix row " + std::to_string(r) + " has a negative or non-finite entry");
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      fail(ErrorCode::invalid_argument,
           "transition matrix row " + std::to_string(r) + " does not sum to 1");
    }
  }
}

TransitionMatrix random_transition_matrix(std::size_t vocab, double concentration,
                                          std::mt19937_64& rng) {
  require(vocab >= 1, "vocab must be positive");
  require(concentration > 0, "concentration must be positive");
  std::gamma_distribution<double> gamma(concentration, 1.0);
  TransitionMatrix m(vocab, std::vector<double>(vocab));
  for (auto& row : m) {
    double sum = 0;
    for (auto& p : row) sum += (p = gamma(rng));
    if (sum <= 0) {
      row.assign(vocab, 0.0);
      row[std::uniform_int_distribution<std::size_t>(0, vocab - 1)(rng)] = 1.0;
      continue;
    }
    for (auto& p : row) p /= sum;
    // Renormalise so the row sums to 1 to the last bit the check cares about.
    const double s2 = std::accumulate(row.begin(), row.end(), 0.0);
    for (auto& p : row) p /= s2;
  }
  return m;
}

namespace {

std::size_t draw(const std::vector<double>& probs, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // Rounding left a sliver above the cumulative sum: take the last nonzero entry.
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0) return i;
  }
  return probs.size() - 1;
}

std::string user_name(std::size_t u) { return std::to_string(u + 1); }

}  // namespace

SyntheticData generate_synthetic(SyntheticKind kind, const SyntheticParams& params,
                                 std::uint64_t seed) {
  require(params.vocab >= 1, "synthetic: vocab must be positive");
  require(params.length >= 1, "synthetic: length must be positive");
  std::mt19937_64 rng(seed);
  SyntheticData out;
  out.data.meta.n_items = params.vocab;
  const std::size_t V = params.vocab;
  const std::vector<double> uniform(V, 1.0 / static_cast<double>(V));
  std::uniform_int_distribution<std::size_t> any_item(0, V - 1);

  if (kind == SyntheticKind::markov || kind == SyntheticKind::mixed_context) {
    out.transition = params.transition.empty()
                         ? random_transition_matrix(V, params.concentration, rng)
                         : params.transition;
    validate_stochastic(out.transition);
    require(out.transition.size() == V, "synthetic: transition matrix must be vocab x vocab");
  }

  switch (kind) {
    case SyntheticKind::markov: {
      for (std::size_t u = 0; u < params.users; ++u) {
        UserSequence seq;
        seq.user = user_name(u);
        std::size_t item = any_item(rng);
        for (std::size_t t = 0; t < params.length; ++t) {
          if (t > 0) item = draw(out.transition[item], rng);
          Event e;
          e.item = item;
          seq.events.push_back(e);
        }
        out.data.sequences.push_back(std::move(seq));
      }
      auto matrix = std::make_shared<TransitionMatrix>(out.transition);
      out.oracle = [matrix, uniform](const UserSequence& seq, std::size_t position) {
        if (position == 0) return uniform;
        return (*matrix)[seq.events.at(position - 1).item];
      };
      break;
    }
    case SyntheticKind::long_copy: {
      require(params.lag >= 1, "synthetic: lag must be at least 1");
      require(params.copy_prob >= 0 && params.copy_prob <= 1, "synthetic: copy_prob must be in [0,1]");
      std::bernoulli_distribution copy(params.copy_prob);
      for (std::size_t u = 0; u < params.users; ++u) {
        UserSequence seq;
        seq.user = user_name(u);
        for (std::size_t t = 0; t < params.length; ++t) {
          Event e;
          // The coin is flipped at every step so p=1 is an exact copy.
          const bool do_copy = copy(rng);
          const std::size_t fresh = any_item(rng);
          e.item = (t >= params.lag && do_copy) ? seq.events[t - params.lag].item : fresh;
          seq.events.push_back(e);
        }
        out.data.sequences.push_back(std::move(seq));
      }
      const std::size_t lag = params.lag;
      const double p = params.copy_prob;
      out.oracle = [lag, p, uniform](const UserSequence& seq, std::size_t position) {
        if (position < lag) return uniform;
        std::vector<double> d(uniform.size());
        for (auto& v : d) v = (1.0 - p) / static_cast<double>(uniform.size());
        d[seq.events.at(position - lag).item] += p;
        return d;
      };
      break;
    }
    case SyntheticKind::mixed_context: {
      require(params.taste_size >= 1 && params.taste_size <= V,
              "synthetic: taste_size must be in [1, vocab]");
      require(params.home_prob >= 0 && params.home_prob <= 1, "synthetic: home_prob must be in [0,1]");
      out.data.meta.ctx_in_sizes = {2};
      out.data.meta.ctx_out_sizes = {2};
      std::bernoulli_distribution home(params.home_prob);
      auto tastes = std::make_shared<std::unordered_map<std::string, std::vector<std::size_t>>>();
      std::vector<std::size_t> all(V);
      std::iota(all.begin(), all.end(), std::size_t{0});
      for (std::size_t u = 0; u < params.users; ++u) {
        UserSequence seq;
        seq.user = user_name(u);
        std::vector<std::size_t> pool = all;
        std::shuffle(pool.begin(), pool.end(), rng);
        pool.resize(params.taste_size);
        std::sort(pool.begin(), pool.end());
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        for (std::size_t t = 0; t < params.length; ++t) {
          const std::size_t scenario = home(rng) ? kScenarioHome : kScenarioDetail;
          Event e;
          if (scenario == kScenarioHome) {
            e.item = pool[pick(rng)];
          } else if (t == 0) {
            e.item = any_item(rng);
          } else {
            e.item = draw(out.transition[seq.events[t - 1].item], rng);
          }
          e.context_in = {scenario};
          e.context_out = {scenario};
          seq.events.push_back(std::move(e));
        }
        tastes->emplace(seq.user, std::move(pool));
        out.data.sequences.push_back(std::move(seq));
      }
      auto matrix = std::make_shared<TransitionMatrix>(out.transition);
      out.oracle = [matrix, tastes, uniform](const UserSequence& seq, std::size_t position) {
        const auto& e = seq.events.at(position);
        if (e.context_out.at(0) == kScenarioHome) {
          const auto& pool = tastes->at(seq.user);
          std::vector<double> d(uniform.size(), 0.0);
          for (auto i : pool) d[i] = 1.0 / static_cast<double>(pool.size());
          return d;
        }
        if (position == 0) return uniform;
        return (*matrix)[seq.events[position - 1].item];
      };
      break;
    }
  }
  return out;
}

}  // namespace m3
