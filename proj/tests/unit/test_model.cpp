#include "unit/doctest_main.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "m3/error.hpp"
#include "m3/model.hpp"

using m3::Event;
using m3::M3Config;
using m3::M3Model;
using m3::Tape;
using m3::Tensor;
using Vec = std::vector<double>;

namespace {

std::vector<Event> random_history(std::mt19937_64& rng, const m3::DatasetMeta& meta,
                                  std::size_t steps) {
  std::vector<Event> out(steps);
  for (auto& e : out) {
    e.item = rng() % meta.n_items;
    for (std::size_t s : meta.ctx_in_sizes) e.context_in.push_back(rng() % s);
    for (std::size_t s : meta.ctx_out_sizes) e.context_out.push_back(rng() % s);
  }
  return out;
}

// Independent plain-loop evaluation of the model equations for the last
// position of a history, reading parameters by name.
class DeskOracle {
 public:
  DeskOracle(M3Model<double>& model) : m_(model), c_(model.config()) {}

  Vec scores(const std::vector<Event>& h, const std::vector<std::size_t>& c_out, Vec* gate_out) {
    std::vector<Vec> z;
    for (const Event& e : h) {
      Vec x = row("item_embedding", e.item);
      for (std::size_t f = 0; f < e.context_in.size(); ++f) {
        append(x, row("ctx_in." + std::to_string(f), e.context_in[f]));
      }
      z.push_back(dense("f_in", c_.in_activation, c_.in_layers, x));
    }
    const Vec& last = z.back();

    Vec gate(3, 1.0);
    if (c_.gate != m3::GateType::fixed) {
      Vec g_in;
      if (c_.gate == m3::GateType::bottom_switch) {
        g_in = last;
      } else {
        for (std::size_t f = 0; f < h.back().context_in.size(); ++f) {
          append(g_in, row("ctx_in." + std::to_string(f), h.back().context_in[f]));
        }
        for (std::size_t f = 0; f < c_out.size(); ++f) {
          append(g_in, row("ctx_out." + std::to_string(f), c_out[f]));
        }
      }
      gate = affine(g_in, "gate.weight", "gate.bias");
      for (double& g : gate) g = 1 / (1 + std::exp(-g));
    }
    for (std::size_t k = 0; k < 3; ++k) {
      if (!c_.enabled.on[k]) gate[k] = 0;
    }
    if (gate_out) *gate_out = gate;

    std::vector<Vec> se(3);
    if (c_.enabled.on[0]) se[0] = c_.d_in == c_.d_enc ? last : affine(last, "tiny.weight", "tiny.bias");
    if (c_.enabled.on[1]) se[1] = c_.variant == m3::Variant::m3r ? gru(z) : tcn(z);
    if (c_.enabled.on[2]) se[2] = attention(z);

    Vec agg;
    if (c_.aggregation == m3::Aggregation::weighted_concat) {
      for (std::size_t k = 0; k < 3; ++k) {
        for (std::size_t j = 0; j < c_.d_enc; ++j) agg.push_back(se[k].empty() ? 0 : gate[k] * se[k][j]);
      }
    } else {
      agg.assign(c_.d_enc, 0.0);
      for (std::size_t k = 0; k < 3; ++k) {
        if (se[k].empty()) continue;
        for (std::size_t j = 0; j < c_.d_enc; ++j) agg[j] += gate[k] * se[k][j];
      }
    }
    for (std::size_t f = 0; f < c_out.size(); ++f) append(agg, row("ctx_out." + std::to_string(f), c_out[f]));
    const Vec z_out = dense("f_out", c_.out_activation, c_.out_layers, agg);

    const Tensor& q = param("output_embedding");
    Vec r(q.rows(), 0.0);
    for (std::size_t v = 0; v < q.rows(); ++v) {
      for (std::size_t j = 0; j < z_out.size(); ++j) r[v] += z_out[j] * q.at(v, j);
    }
    return r;
  }

 private:
  const Tensor& param(const std::string& name) {
    auto* p = m_.parameters().find(name);
    REQUIRE_MESSAGE(p != nullptr, name);
    return p->value;
  }
  Vec row(const std::string& name, std::size_t i) {
    const auto r = param(name).row(i);
    return {r.begin(), r.end()};
  }
  static void append(Vec& a, const Vec& b) { a.insert(a.end(), b.begin(), b.end()); }

  Vec matvec(const Vec& x, const Tensor& w) {
    REQUIRE(x.size() == w.rows());
    Vec y(w.cols(), 0.0);
    for (std::size_t j = 0; j < w.cols(); ++j) {
      for (std::size_t i = 0; i < x.size(); ++i) y[j] += x[i] * w.at(i, j);
    }
    return y;
  }
  Vec affine(const Vec& x, const std::string& w, const std::string& b) {
    Vec y = matvec(x, param(w));
    const Tensor& bias = param(b);
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += bias[j];
    return y;
  }
  Vec dense(const std::string& prefix, m3::Activation act, std::size_t layers, Vec x) {
    if (act == m3::Activation::identity) return x;
    for (std::size_t k = 0; k < layers; ++k) {
      const std::string n = prefix + ".layer" + std::to_string(k);
      x = affine(x, n + ".weight", n + ".bias");
      for (double& v : x) v = std::max(0.0, v);
    }
    return x;
  }

  Vec gru(const std::vector<Vec>& z) {
    const std::string p = "short.gru.";
    const std::size_t n = c_.d_in;
    Vec h(n, 0.0);
    auto sig = [](double a) { return 1 / (1 + std::exp(-a)); };
    for (const Vec& x : z) {
      Vec xr = matvec(x, param(p + "w_xr")), hr = matvec(h, param(p + "w_hr"));
      Vec xu = matvec(x, param(p + "w_xu")), hu = matvec(h, param(p + "w_hu"));
      Vec r(n), u(n), rh(n);
      for (std::size_t j = 0; j < n; ++j) {
        r[j] = sig(xr[j] + hr[j] + param(p + "b_r")[j]);
        u[j] = sig(xu[j] + hu[j] + param(p + "b_u")[j]);
        rh[j] = r[j] * h[j];
      }
      Vec xc = matvec(x, param(p + "w_xc")), hc = matvec(rh, param(p + "w_hc"));
      for (std::size_t j = 0; j < n; ++j) {
        const double cand = std::tanh(xc[j] + hc[j] + param(p + "b_c")[j]);
        h[j] = (1 - u[j]) * h[j] + u[j] * cand;
      }
    }
    return matvec(h, param(p + "w_out"));
  }

  Vec tcn(std::vector<Vec> z) {
    const std::size_t w = c_.tcn_width;
    for (std::size_t k = 0; k < c_.tcn_layers; ++k) {
      const std::string n = "short.tcn.layer" + std::to_string(k);
      const Tensor& weight = param(n + ".weight");
      const Tensor& bias = param(n + ".bias");
      const std::size_t ch = z[0].size();
      std::vector<Vec> next(z.size(), Vec(c_.d_enc, 0.0));
      for (std::size_t t = 0; t < z.size(); ++t) {
        for (std::size_t o = 0; o < c_.d_enc; ++o) {
          double acc = bias[o];
          for (std::size_t lag = 0; lag < w; ++lag) {
            if (lag > t) break;
            const std::size_t block = w - 1 - lag;
            for (std::size_t i = 0; i < ch; ++i) acc += z[t - lag][i] * weight.at(block * ch + i, o);
          }
          next[t][o] = std::max(0.0, acc);
        }
      }
      z = next;
    }
    return z.back();
  }

  Vec attention(const std::vector<Vec>& z) {
    std::vector<Vec> keys = z;
    if (c_.d_in != c_.d_enc) {
      for (auto& k : keys) k = matvec(k, param("long.projection"));
    }
    const Vec& q = keys.back();
    Vec logits;
    for (const Vec& k : keys) {
      logits.push_back(std::inner_product(q.begin(), q.end(), k.begin(), 0.0) / std::sqrt(double(c_.d_enc)));
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double total = 0;
    for (double& l : logits) total += (l = std::exp(l - mx));
    Vec out(keys[0].size(), 0.0);
    for (std::size_t i = 0; i < keys.size(); ++i) {
      for (std::size_t j = 0; j < out.size(); ++j) out[j] += logits[i] / total * keys[i][j];
    }
    return out;
  }

  M3Model<double>& m_;
  const M3Config& c_;
};

M3Config small_config() {
  M3Config c;
  c.embed_dim = 6;
  c.d_in = 5;
  c.d_enc = 4;
  c.d_out = 3;
  c.context_dim = 2;
  c.tcn_width = 3;
  return c;
}

void perturb(M3Model<double>& model, std::mt19937_64& rng) {
  // Fresh random biases too, so every term of the oracle is exercised.
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& p : model.parameters()) {
    if (p.value.rank() == 1) {
      for (auto& v : p.value.values()) v = u(rng);
    }
  }
}

}  // namespace

TEST_CASE("forward matches a plain-loop reimplementation") {
  std::mt19937_64 rng(11);
  m3::DatasetMeta meta{20, {3}, {2}};
  for (auto variant : {m3::Variant::m3r, m3::Variant::m3c}) {
    for (auto gate : {m3::GateType::fixed, m3::GateType::bottom_switch, m3::GateType::contextual_switch}) {
      for (auto agg : {m3::Aggregation::weighted_concat, m3::Aggregation::weighted_sum}) {
        M3Config c = small_config();
        c.variant = variant;
        c.gate = gate;
        c.aggregation = agg;
        c.in_layers = 2;
        M3Model<double> model(c, meta, 5);
        perturb(model, rng);
        DeskOracle oracle(model);
        for (int trial = 0; trial < 5; ++trial) {
          const auto h = random_history(rng, meta, 5);
          const std::vector<std::size_t> c_out{rng() % 2};
          std::array<double, 3> gates{};
          const auto got = model.score_next(h, c_out, &gates);
          Vec expect_gate;
          const auto expect = oracle.scores(h, c_out, &expect_gate);
          REQUIRE(got.size() == 20);
          for (std::size_t v = 0; v < 20; ++v) CHECK(std::abs(got[v] - expect[v]) <= 1e-10);
          for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(gates[k] - expect_gate[k]) <= 1e-12);
        }
      }
    }
  }
}

TEST_CASE("every row of a window forward equals its prefix forward") {
  std::mt19937_64 rng(12);
  m3::DatasetMeta meta{15, {2}, {3}};
  M3Config c = small_config();
  c.gate = m3::GateType::contextual_switch;
  M3Model<double> model(c, meta, 9);
  const auto window = random_history(rng, meta, 9);
  const auto ctx = m3::next_contexts(window);
  Tape<double> tape;
  const std::span<const Event> history(window.data(), window.size() - 1);
  const auto pass = model.forward(tape, history, ctx);
  const auto& z = pass.z_out.value();
  const auto& q = model.output_table().value;
  for (std::size_t t = 0; t < history.size(); ++t) {
    const auto prefix = model.score_next(history.subspan(0, t + 1), ctx[t]);
    for (std::size_t v = 0; v < meta.n_items; ++v) {
      double s = 0;
      for (std::size_t j = 0; j < c.d_out; ++j) s += z.at(t, j) * q.at(v, j);
      CHECK(std::abs(s - prefix[v]) <= 1e-12);
    }
  }
}

TEST_CASE("fuse_input examples") {
  m3::DatasetMeta meta{10, {}, {}};
  M3Config c;
  c.embed_dim = c.d_in = c.d_enc = c.d_out = 4;
  c.in_activation = c.out_activation = m3::Activation::identity;
  c.enabled = m3::EncoderSet::parse("T");
  c.gate = m3::GateType::fixed;
  c.aggregation = m3::Aggregation::weighted_sum;
  M3Model<double> model(c, meta, 1);
  std::vector<Event> h{{3, {}, {}, {}}, {7, {}, {}, {}}};
  Tape<double> tape;
  const auto pass = model.forward(tape, h, {});
  for (std::size_t t = 0; t < 2; ++t) {
    const auto a = pass.z_in.value().row(t);
    const auto b = model.input_table().value.row(h[t].item);
    CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }

  // ReLU input layer with identity weights zeroes negative coordinates.
  M3Config r = c;
  r.in_activation = m3::Activation::relu;
  M3Model<double> relu_model(r, meta, 1);
  auto& w = relu_model.parameters().find("f_in.layer0.weight")->value;
  w.fill(0);
  for (std::size_t i = 0; i < 4; ++i) w.at(i, i) = 1;
  relu_model.input_table().value.row(3)[0] = -2.0;
  relu_model.input_table().value.row(3)[1] = 1.5;
  Tape<double> t2;
  const auto z = relu_model.forward(t2, std::span<const Event>(h.data(), 1), {}).z_in.value();
  CHECK(z.at(0, 0) == 0.0);
  CHECK(z.at(0, 1) == 1.5);

  // One context feature with 4 dims next to a 64-dim embedding: 68 inputs.
  M3Config d;
  d.context_dim = 4;
  M3Model<double> ctx_model(d, m3::DatasetMeta{10, {5}, {}}, 1);
  CHECK(ctx_model.parameters().find("f_in.layer0.weight")->value.shape() == m3::Shape{68, 32});
}

TEST_CASE("gate examples") {
  std::mt19937_64 rng(3);
  m3::DatasetMeta meta{12, {}, {}};
  M3Config c;
  c.embed_dim = 8;
  c.d_in = c.d_enc = c.d_out = 8;
  const auto h = random_history(rng, meta, 4);

  c.gate = m3::GateType::fixed;
  M3Model<double> fixed(c, meta, 2);
  CHECK(fixed.gate_next(h, {}) == std::array<double, 3>{1.0, 1.0, 1.0});
  CHECK(fixed.parameters().find("gate.weight") == nullptr);

  c.gate = m3::GateType::bottom_switch;
  M3Model<double> bottom(c, meta, 2);
  bottom.parameters().find("gate.weight")->value.fill(0);
  CHECK(bottom.gate_next(h, {}) == std::array<double, 3>{0.5, 0.5, 0.5});
  bottom.parameters().find("gate.bias")->value[1] = std::log(3.0);
  CHECK(bottom.gate_next(h, {})[1] == doctest::Approx(0.75).epsilon(1e-15));

  c.enabled = m3::EncoderSet::parse("TL");
  M3Model<double> partial(c, meta, 2);
  const auto g = partial.gate_next(h, {});
  CHECK(g[1] == 0.0);
  CHECK((g[0] > 0 && g[0] < 1 && g[2] > 0 && g[2] < 1));

  c.gate = m3::GateType::contextual_switch;
  CHECK_THROWS_AS(M3Model<double>(c, meta, 2), m3::Error);
}

TEST_CASE("aggregate examples") {
  Tape<double> tape;
  auto a = tape.constant(Tensor::matrix(1, 2, {1, 2}));
  auto b = tape.constant(Tensor::matrix(1, 2, {3, 4}));
  auto d = tape.constant(Tensor::matrix(1, 2, {5, 6}));
  auto ones = tape.constant(Tensor::matrix(1, 3, {1, 1, 1}));
  auto zeros = tape.constant(Tensor::matrix(1, 3, {0, 0, 0}));
  auto half = tape.constant(Tensor::matrix(1, 3, {0.5, 0.5, 0.5}));
  using A = std::array<m3::Var<double>, 3>;

  CHECK(m3::aggregate(tape, A{a, b, d}, ones, 2, m3::Aggregation::weighted_concat).value() ==
        Tensor::matrix(1, 6, {1, 2, 3, 4, 5, 6}));
  CHECK(m3::aggregate(tape, A{a, b, d}, zeros, 2, m3::Aggregation::weighted_concat).value() ==
        Tensor::matrix(1, 6, {0, 0, 0, 0, 0, 0}));
  CHECK(m3::aggregate(tape, A{a, b, d}, zeros, 2, m3::Aggregation::weighted_sum).value() ==
        Tensor::matrix(1, 2, {0, 0}));
  CHECK(m3::aggregate(tape, A{a, a, a}, half, 2, m3::Aggregation::weighted_sum).value() ==
        Tensor::matrix(1, 2, {1.5, 3.0}));
  // Disabled encoders leave a zero block in concat mode.
  CHECK(m3::aggregate(tape, A{a, {}, d}, ones, 2, m3::Aggregation::weighted_concat).value() ==
        Tensor::matrix(1, 6, {1, 2, 0, 0, 5, 6}));
}

TEST_CASE("tiny-only identity model scores by last-item co-occurrence") {
  std::mt19937_64 rng(21);
  m3::DatasetMeta meta{30, {}, {}};
  M3Config c;
  c.embed_dim = c.d_in = c.d_enc = c.d_out = 6;
  c.in_activation = c.out_activation = m3::Activation::identity;
  c.enabled = m3::EncoderSet::parse("T");
  c.gate = m3::GateType::fixed;
  c.aggregation = m3::Aggregation::weighted_sum;
  M3Model<double> model(c, meta, 4);
  CHECK(model.parameters().size() == 2);
  const auto& q = model.input_table().value;
  const auto& qo = model.output_table().value;
  for (int trial = 0; trial < 50; ++trial) {
    const auto h = random_history(rng, meta, 1 + trial % 7);
    const auto r = model.score_next(h, {});
    for (std::size_t v = 0; v < 30; ++v) {
      double s = 0;
      for (std::size_t j = 0; j < 6; ++j) s += q.at(h.back().item, j) * qo.at(v, j);
      CHECK(r[v] == s);
    }
  }
}

TEST_CASE("single-event history") {
  m3::DatasetMeta meta{9, {}, {}};
  M3Config c = small_config();
  M3Model<double> model(c, meta, 6);
  std::vector<Event> h{{4, {}, {}, {}}};
  const auto r = model.score_next(h, {});
  CHECK(r.size() == 9);
  CHECK(std::all_of(r.begin(), r.end(), [](double v) { return std::isfinite(v); }));
  CHECK_THROWS_AS(model.score_next({}, {}), m3::Error);
}

TEST_CASE("disabling an encoder equals zeroing its gate") {
  std::mt19937_64 rng(31);
  m3::DatasetMeta meta{25, {2}, {2}};
  for (auto subset : {"TS", "TL", "SL", "T", "S", "L"}) {
    for (auto gate : {m3::GateType::fixed, m3::GateType::bottom_switch, m3::GateType::contextual_switch}) {
      M3Config full = small_config();
      full.gate = gate;
      M3Config part = full;
      part.enabled = m3::EncoderSet::parse(subset);
      M3Model<double> a(full, meta, 8);
      M3Model<double> b(part, meta, 8);
      // Shared names start identical; the subset model has no extra names.
      for (auto& p : b.parameters()) {
        REQUIRE(a.parameters().find(p.name) != nullptr);
        CHECK(a.parameters().find(p.name)->value == p.value);
      }
      m3::ForwardOptions opt;
      for (std::size_t k = 0; k < 3; ++k) opt.gate_mask[k] = part.enabled.on[k] ? 1.0 : 0.0;
      for (int trial = 0; trial < 5; ++trial) {
        const auto h = random_history(rng, meta, 6);
        const std::vector<std::size_t> c_out{rng() % 2};
        CHECK(a.score_next(h, c_out, nullptr, opt) == b.score_next(h, c_out));
      }
    }
  }
}

TEST_CASE("forward is deterministic and gates stay inside (0,1)") {
  std::mt19937_64 rng(41);
  m3::DatasetMeta meta{40, {3}, {2}};
  M3Config c = small_config();
  c.gate = m3::GateType::contextual_switch;
  M3Model<double> a(c, meta, 3), b(c, meta, 3);
  for (int trial = 0; trial < 30; ++trial) {
    const auto h = random_history(rng, meta, 1 + trial % 10);
    const std::vector<std::size_t> c_out{rng() % 2};
    std::array<double, 3> g{};
    const auto r = a.score_next(h, c_out, &g);
    CHECK(r == b.score_next(h, c_out));
    CHECK(r == a.score_next(h, c_out));
    for (double v : g) CHECK((v > 0 && v < 1));

    // Ranking by raw score equals ranking by softmax probability.
    std::vector<std::size_t> by_score(r.size()), by_prob(r.size());
    std::iota(by_score.begin(), by_score.end(), 0);
    std::iota(by_prob.begin(), by_prob.end(), 0);
    const double mx = *std::max_element(r.begin(), r.end());
    double total = 0;
    for (double v : r) total += std::exp(v - mx);
    std::vector<double> p(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) p[i] = std::exp(r[i] - mx) / total;
    std::stable_sort(by_score.begin(), by_score.end(), [&](auto x, auto y) { return r[x] > r[y]; });
    std::stable_sort(by_prob.begin(), by_prob.end(), [&](auto x, auto y) { return p[x] > p[y]; });
    CHECK(by_score == by_prob);
  }
}

TEST_CASE("forward validates events") {
  m3::DatasetMeta meta{5, {2}, {}};
  M3Model<double> model(small_config(), meta, 1);
  CHECK_THROWS_AS(model.score_next(std::vector<Event>{{5, {0}, {}, {}}}, {}), m3::Error);
  CHECK_THROWS_AS(model.score_next(std::vector<Event>{{1, {}, {}, {}}}, {}), m3::Error);
  CHECK_THROWS_AS(model.score_next(std::vector<Event>{{1, {2}, {}, {}}}, {}), m3::Error);
  CHECK(model.score_next(std::vector<Event>{{1, {1}, {}, {}}}, {}).size() == 5);
}

TEST_CASE("config json round trip and validation") {
  M3Config c = small_config();
  c.variant = m3::Variant::m3c;
  c.gate = m3::GateType::contextual_switch;
  c.enabled = m3::EncoderSet::parse("SL");
  c.precision = m3::Precision::float32;
  CHECK(m3::config_from_json(m3::config_to_json(c)) == c);
  CHECK(m3::config_from_json("{}") == M3Config{});
  CHECK(m3::config_from_json(R"({"gate":"bottom-switch","aggregation":"weighted-sum"})").aggregation ==
        m3::Aggregation::weighted_sum);
  CHECK_THROWS_AS(m3::config_from_json(R"({"d_hidden":3})"), m3::Error);
  CHECK_THROWS_AS(m3::config_from_json(R"({"d_in":-3})"), m3::Error);
  CHECK_THROWS_AS(m3::config_from_json(R"({"gate":"soft"})"), m3::Error);
  CHECK_THROWS_AS(m3::config_from_json("not json"), m3::Error);
  CHECK_THROWS_AS(m3::EncoderSet::parse(""), m3::Error);
  CHECK_THROWS_AS(m3::EncoderSet::parse("TT"), m3::Error);
  CHECK_THROWS_AS(m3::EncoderSet::parse("TX"), m3::Error);
  CHECK(m3::EncoderSet::parse("lst").letters() == "TSL");

  m3::DatasetMeta meta{7, {2, 3}, {4}};
  CHECK(m3::meta_from_json(m3::meta_to_json(meta)) == meta);

  M3Config bad;
  bad.in_activation = m3::Activation::identity;  // 64 != 32
  CHECK_THROWS_AS(bad.validate(m3::DatasetMeta{5, {}, {}}), m3::Error);
}

TEST_CASE("single precision model agrees with double") {
  std::mt19937_64 rng(51);
  m3::DatasetMeta meta{20, {}, {}};
  M3Config c = small_config();
  M3Model<double> d(c, meta, 7);
  M3Model<float> f(c, meta, 7);
  for (auto& p : d.parameters()) {
    auto* q = f.parameters().find(p.name);
    REQUIRE(q != nullptr);
    for (std::size_t i = 0; i < p.value.size(); ++i) q->value[i] = static_cast<float>(p.value[i]);
  }
  const auto h = random_history(rng, meta, 6);
  const auto a = d.score_next(h, {});
  const auto b = f.score_next(h, {});
  for (std::size_t v = 0; v < a.size(); ++v) CHECK(std::abs(a[v] - b[v]) <= 1e-4);
}
