#include "m3/model.hpp"

#include <algorithm>
#include <random>

#include "json.hpp"
#include "m3/error.hpp"

namespace m3 {

using nlohmann::json;

EncoderSet EncoderSet::parse(const std::string& letters) {
  EncoderSet set;
  set.on = {false, false, false};
  for (char c : letters) {
    std::size_t k;
    switch (c) {
      case 'T': case 't': k = kTiny; break;
      case 'S': case 's': k = kShort; break;
      case 'L': case 'l': k = kLong; break;
      default: fail(ErrorCode::invalid_argument, "unknown encoder '" + std::string(1, c) +
                                                     "' in \"" + letters + "\" (use T, S, L)");
    }
    if (set.on[k]) fail(ErrorCode::invalid_argument, "encoder repeated in \"" + letters + "\"");
    set.on[k] = true;
  }
  if (set.empty()) fail(ErrorCode::invalid_argument, "encoder set must not be empty");
  return set;
}

std::string EncoderSet::letters() const {
  std::string s;
  if (on[kTiny]) s += 'T';
  if (on[kShort]) s += 'S';
  if (on[kLong]) s += 'L';
  return s;
}

std::string to_string(Variant v) { return v == Variant::m3r ? "m3r" : "m3c"; }
std::string to_string(Aggregation a) {
  return a == Aggregation::weighted_concat ? "concat" : "sum";
}
std::string to_string(GateType g) {
  switch (g) {
    case GateType::fixed: return "fixed";
    case GateType::bottom_switch: return "bottom";
    case GateType::contextual_switch: return "contextual";
  }
  return "?";
}
std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }
std::string to_string(Precision p) { return p == Precision::float64 ? "float64" : "float32"; }

namespace {

[[noreturn]] void bad_choice(const std::string& what, const std::string& value,
                             const std::string& choices) {
  fail(ErrorCode::invalid_argument,
       "invalid " + what + " \"" + value + "\" (expected " + choices + ")");
}

}  // namespace

Variant parse_variant(const std::string& s) {
  if (s == "m3r" || s == "M3R") return Variant::m3r;
  if (s == "m3c" || s == "M3C") return Variant::m3c;
  bad_choice("variant", s, "m3r or m3c");
}

Aggregation parse_aggregation(const std::string& s) {
  if (s == "concat" || s == "weighted-concat") return Aggregation::weighted_concat;
  if (s == "sum" || s == "weighted-sum") return Aggregation::weighted_sum;
  bad_choice("aggregation", s, "concat or sum");
}

GateType parse_gate(const std::string& s) {
  if (s == "fixed") return GateType::fixed;
  if (s == "bottom" || s == "bottom-switch") return GateType::bottom_switch;
  if (s == "contextual" || s == "contextual-switch") return GateType::contextual_switch;
  bad_choice("gate", s, "fixed, bottom or contextual");
}

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  bad_choice("activation", s, "relu or identity");
}

Precision parse_precision(const std::string& s) {
  if (s == "float64" || s == "double") return Precision::float64;
  if (s == "float32" || s == "float") return Precision::float32;
  bad_choice("precision", s, "float64 or float32");
}

namespace {

std::size_t se_width(const M3Config& c) {
  return c.aggregation == Aggregation::weighted_concat ? 3 * c.d_enc : c.d_enc;
}

std::size_t f_in_width(const M3Config& c, const DatasetMeta& m) {
  return c.embed_dim + m.ctx_in_sizes.size() * c.context_dim;
}

std::size_t f_out_width(const M3Config& c, const DatasetMeta& m) {
  return se_width(c) + m.ctx_out_sizes.size() * c.context_dim;
}

}  // namespace

void M3Config::validate(const DatasetMeta& meta) const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) fail(ErrorCode::invalid_argument, std::string(name) + " must be positive");
  };
  positive(d_in, "d_in");
  positive(d_enc, "d_enc");
  positive(d_out, "d_out");
  positive(embed_dim, "embed_dim");
  positive(context_dim, "context_dim");
  positive(in_layers, "in_layers");
  positive(out_layers, "out_layers");
  positive(tcn_layers, "tcn_layers");
  positive(tcn_width, "tcn_width");
  if (enabled.empty()) fail(ErrorCode::invalid_argument, "no encoder enabled");
  if (meta.n_items == 0) fail(ErrorCode::invalid_argument, "empty item vocabulary");
  if (gate == GateType::contextual_switch && meta.ctx_in_sizes.empty() &&
      meta.ctx_out_sizes.empty()) {
    fail(ErrorCode::invalid_argument, "contextual gate requires context features");
  }
  if (in_activation == Activation::identity && f_in_width(*this, meta) != d_in) {
    fail(ErrorCode::invalid_argument,
         "identity input layer needs d_in == embed_dim + context width (" +
             std::to_string(d_in) + " vs " + std::to_string(f_in_width(*this, meta)) + ")");
  }
  if (out_activation == Activation::identity && f_out_width(*this, meta) != d_out) {
    fail(ErrorCode::invalid_argument,
         "identity output layer needs d_out == aggregate width (" + std::to_string(d_out) +
             " vs " + std::to_string(f_out_width(*this, meta)) + ")");
  }
}

std::string config_to_json(const M3Config& c) {
  json j;
  j["variant"] = to_string(c.variant);
  j["d_in"] = c.d_in;
  j["d_enc"] = c.d_enc;
  j["d_out"] = c.d_out;
  j["embed_dim"] = c.embed_dim;
  j["context_dim"] = c.context_dim;
  j["aggregation"] = to_string(c.aggregation);
  j["gate"] = to_string(c.gate);
  j["encoders"] = c.enabled.letters();
  j["in_activation"] = to_string(c.in_activation);
  j["in_layers"] = c.in_layers;
  j["out_activation"] = to_string(c.out_activation);
  j["out_layers"] = c.out_layers;
  j["tcn_layers"] = c.tcn_layers;
  j["tcn_width"] = c.tcn_width;
  j["precision"] = to_string(c.precision);
  return j.dump();
}

M3Config config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::format, std::string("model config: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorCode::format, "model config must be a JSON object");
  M3Config c;
  try {
    for (auto& [key, value] : j.items()) {
      auto size = [&] {
        if (!value.is_number_unsigned()) {
          fail(ErrorCode::invalid_argument, "model config: " + key + " must be a positive integer");
        }
        return value.get<std::size_t>();
      };
      auto str = [&] { return value.get<std::string>(); };
      if (key == "variant") c.variant = parse_variant(str());
      else if (key == "d_in") c.d_in = size();
      else if (key == "d_enc") c.d_enc = size();
      else if (key == "d_out") c.d_out = size();
      else if (key == "embed_dim") c.embed_dim = size();
      else if (key == "context_dim") c.context_dim = size();
      else if (key == "aggregation") c.aggregation = parse_aggregation(str());
      else if (key == "gate") c.gate = parse_gate(str());
      else if (key == "encoders") c.enabled = EncoderSet::parse(str());
      else if (key == "in_activation") c.in_activation = parse_activation(str());
      else if (key == "in_layers") c.in_layers = size();
      else if (key == "out_activation") c.out_activation = parse_activation(str());
      else if (key == "out_layers") c.out_layers = size();
      else if (key == "tcn_layers") c.tcn_layers = size();
      else if (key == "tcn_width") c.tcn_width = size();
      else if (key == "precision") c.precision = parse_precision(str());
      else fail(ErrorCode::invalid_argument, "model config: unknown key \"" + key + "\"");
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("model config: ") + e.what());
  }
  return c;
}

std::string meta_to_json(const DatasetMeta& m) {
  json j;
  j["n_items"] = m.n_items;
  j["ctx_in_sizes"] = m.ctx_in_sizes;
  j["ctx_out_sizes"] = m.ctx_out_sizes;
  return j.dump();
}

DatasetMeta meta_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    DatasetMeta m;
    for (auto& [key, value] : j.items()) {
      if (key == "n_items") m.n_items = value.get<std::size_t>();
      else if (key == "ctx_in_sizes") m.ctx_in_sizes = value.get<std::vector<std::size_t>>();
      else if (key == "ctx_out_sizes") m.ctx_out_sizes = value.get<std::vector<std::size_t>>();
      else fail(ErrorCode::format, "dataset meta: unknown key \"" + key + "\"");
    }
    return m;
  } catch (const json::exception& e) {
    fail(ErrorCode::format, std::string("dataset meta: ") + e.what());
  }
}

std::vector<std::vector<std::size_t>> next_contexts(std::span<const Event> window) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t t = 1; t < window.size(); ++t) out.push_back(window[t].context_out);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

template <class Real>
M3Model<Real>::M3Model(const M3Config& config, const DatasetMeta& meta, std::uint64_t seed)
    : config_(config), meta_(meta) {
  config_.validate(meta_);
  std::mt19937_64 rng(seed);
  const auto& c = config_;

  item_table_ = &params_.add("item_embedding", {meta_.n_items, c.embed_dim});
  output_table_ = &params_.add("output_embedding", {meta_.n_items, c.d_out});
  for (std::size_t f = 0; f < meta_.ctx_in_sizes.size(); ++f) {
    ctx_in_tables_.push_back(
        &params_.add("ctx_in." + std::to_string(f), {meta_.ctx_in_sizes[f], c.context_dim}));
  }
  for (std::size_t f = 0; f < meta_.ctx_out_sizes.size(); ++f) {
    ctx_out_tables_.push_back(
        &params_.add("ctx_out." + std::to_string(f), {meta_.ctx_out_sizes[f], c.context_dim}));
  }
  f_in_ = make_dense("f_in", c.in_activation, c.in_layers, f_in_width(c, meta_), c.d_in);
  if (c.enabled.on[kTiny]) tiny_ = make_tiny_encoder(params_, "tiny", c.d_in, c.d_enc, rng);
  if (c.enabled.on[kShort]) {
    if (c.variant == Variant::m3r) {
      gru_ = make_gru_encoder(params_, "short.gru", c.d_in, c.d_enc, rng);
    } else {
      tcn_ = make_tcn_encoder(params_, "short.tcn", c.d_in, c.d_enc, c.tcn_layers, c.tcn_width,
                              rng);
    }
  }
  if (c.enabled.on[kLong]) {
    attention_ = make_attention_encoder(params_, "long", c.d_in, c.d_enc, rng);
  }
  if (c.gate != GateType::fixed) {
    const std::size_t g_in =
        c.gate == GateType::bottom_switch
            ? c.d_in
            : (meta_.ctx_in_sizes.size() + meta_.ctx_out_sizes.size()) * c.context_dim;
    gate_weight_ = &params_.add("gate.weight", {g_in, 3});
    gate_bias_ = &params_.add("gate.bias", {3});
  }
  f_out_ = make_dense("f_out", c.out_activation, c.out_layers, f_out_width(c, meta_), c.d_out);

  // Each parameter draws from its own stream keyed by name, so models that
  // share a parameter name (e.g. across ablation subsets) start identical.
  for (auto& p : params_) {
    p.value.fill(Real(0));
    std::mt19937_64 prng(seed ^ fnv1a(p.name));
    init_glorot(p, prng);
  }
}

template <class Real>
typename M3Model<Real>::Dense M3Model<Real>::make_dense(const std::string& prefix,
                                                        Activation act, std::size_t layers,
                                                        std::size_t in, std::size_t out) {
  Dense d;
  d.activation = act;
  if (act == Activation::identity) return d;
  for (std::size_t k = 0; k < layers; ++k) {
    const std::string name = prefix + ".layer" + std::to_string(k);
    d.weights.push_back(&params_.add(name + ".weight", {k == 0 ? in : out, out}));
    d.biases.push_back(&params_.add(name + ".bias", {out}));
  }
  return d;
}

template <class Real>
Var<Real> M3Model<Real>::apply_dense(const Dense& dense, Var<Real> x) {
  Tape<Real>& tape = *x.tape();
  for (std::size_t k = 0; k < dense.weights.size(); ++k) {
    x = relu(add(matmul(x, tape.parameter(*dense.weights[k])),
                 tape.parameter(*dense.biases[k])));
  }
  return x;
}

template <class Real>
Var<Real> M3Model<Real>::context_embeddings(
    Tape<Real>& tape, const std::vector<Parameter<Real>*>& tables,
    const std::vector<std::vector<std::size_t>>& columns) {
  std::vector<Var<Real>> parts;
  for (std::size_t f = 0; f < tables.size(); ++f) {
    parts.push_back(gather(tape.parameter(*tables[f]), std::span<const std::size_t>(columns[f])));
  }
  return parts.size() == 1 ? parts[0] : concat(std::span<const Var<Real>>(parts));
}

template <class Real>
void M3Model<Real>::check_events(std::span<const Event> history,
                                 std::span<const std::vector<std::size_t>> next_ctx) const {
  if (history.empty()) fail(ErrorCode::invalid_argument, "forward: empty history");
  for (const Event& e : history) {
    if (e.item >= meta_.n_items) {
      fail(ErrorCode::invalid_argument, "item " + std::to_string(e.item) +
                                            " outside vocabulary of " +
                                            std::to_string(meta_.n_items));
    }
    if (e.context_in.size() != meta_.ctx_in_sizes.size()) {
      fail(ErrorCode::shape_mismatch, "event has " + std::to_string(e.context_in.size()) +
                                          " input context features, model expects " +
                                          std::to_string(meta_.ctx_in_sizes.size()));
    }
    for (std::size_t f = 0; f < e.context_in.size(); ++f) {
      if (e.context_in[f] >= meta_.ctx_in_sizes[f]) {
        fail(ErrorCode::invalid_argument, "input context value out of range");
      }
    }
  }
  if (meta_.ctx_out_sizes.empty()) {
    for (const auto& c : next_ctx) {
      if (!c.empty()) fail(ErrorCode::shape_mismatch, "model has no output context features");
    }
    return;
  }
  if (next_ctx.size() != history.size()) {
    fail(ErrorCode::shape_mismatch, "output contexts must accompany every history row");
  }
  for (const auto& c : next_ctx) {
    if (c.size() != meta_.ctx_out_sizes.size()) {
      fail(ErrorCode::shape_mismatch, "output context feature count mismatch");
    }
    for (std::size_t f = 0; f < c.size(); ++f) {
      if (c[f] >= meta_.ctx_out_sizes[f]) {
        fail(ErrorCode::invalid_argument, "output context value out of range");
      }
    }
  }
}

template <class Real>
ForwardPass<Real> M3Model<Real>::forward(Tape<Real>& tape, std::span<const Event> history,
                                         std::span<const std::vector<std::size_t>> next_ctx,
                                         const ForwardOptions& options) {
  check_events(history, next_ctx);
  const auto& c = config_;
  const std::size_t steps = history.size();

  std::vector<std::size_t> items(steps);
  std::vector<std::vector<std::size_t>> cin(meta_.ctx_in_sizes.size(),
                                            std::vector<std::size_t>(steps));
  std::vector<std::vector<std::size_t>> cout(meta_.ctx_out_sizes.size(),
                                             std::vector<std::size_t>(steps));
  for (std::size_t t = 0; t < steps; ++t) {
    items[t] = history[t].item;
    for (std::size_t f = 0; f < cin.size(); ++f) cin[f][t] = history[t].context_in[f];
    for (std::size_t f = 0; f < cout.size(); ++f) cout[f][t] = next_ctx[t][f];
  }

  // Input fusion and F_in.
  Var<Real> x = gather(tape.parameter(*item_table_), std::span<const std::size_t>(items));
  Var<Real> ctx_in, ctx_out;
  if (!cin.empty()) {
    ctx_in = context_embeddings(tape, ctx_in_tables_, cin);
    const Var<Real> parts[] = {x, ctx_in};
    x = concat(std::span<const Var<Real>>(parts));
  }
  if (!cout.empty()) ctx_out = context_embeddings(tape, ctx_out_tables_, cout);
  const Var<Real> z_in = apply_dense(f_in_, x);

  // Gate.
  std::vector<Real> mask(3);
  for (std::size_t k = 0; k < 3; ++k) {
    mask[k] = static_cast<Real>(c.enabled.on[k] ? options.gate_mask[k] : 0.0);
  }
  Var<Real> gates;
  if (c.gate == GateType::fixed) {
    BasicTensor<Real> g({steps, 3});
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t k = 0; k < 3; ++k) g.at(t, k) = mask[k];
    }
    gates = tape.constant(std::move(g));
  } else {
    Var<Real> g_in;
    if (c.gate == GateType::bottom_switch) {
      g_in = z_in;
    } else {
      std::vector<Var<Real>> parts;
      if (ctx_in.valid()) parts.push_back(ctx_in);
      if (ctx_out.valid()) parts.push_back(ctx_out);
      g_in = parts.size() == 1 ? parts[0] : concat(std::span<const Var<Real>>(parts));
    }
    gates = sigmoid(add(matmul(g_in, tape.parameter(*gate_weight_)),
                        tape.parameter(*gate_bias_)));
    if (std::any_of(mask.begin(), mask.end(), [](Real m) { return m != Real(1); })) {
      gates = multiply(gates, tape.constant(BasicTensor<Real>({1, 3}, mask)));
    }
  }

  // Encoders and aggregation.
  std::array<Var<Real>, 3> encoded;
  if (c.enabled.on[kTiny]) encoded[kTiny] = tiny_encode(z_in, tiny_);
  if (c.enabled.on[kShort]) {
    encoded[kShort] = c.variant == Variant::m3r ? gru_encode(z_in, gru_) : tcn_encode(z_in, tcn_);
  }
  if (c.enabled.on[kLong]) encoded[kLong] = attention_encode(z_in, attention_);
  Var<Real> combined = aggregate(tape, encoded, gates, c.d_enc, c.aggregation);

  if (ctx_out.valid()) {
    const Var<Real> parts[] = {combined, ctx_out};
    combined = concat(std::span<const Var<Real>>(parts));
  }
  return {z_in, gates, apply_dense(f_out_, combined)};
}

template <class Real>
std::vector<double> M3Model<Real>::score_next(std::span<const Event> history,
                                              const std::vector<std::size_t>& next_context_out,
                                              std::array<double, 3>* gates,
                                              const ForwardOptions& options) {
  Tape<Real> tape;
  std::vector<std::vector<std::size_t>> ctx;
  if (!meta_.ctx_out_sizes.empty()) {
    // Only the last row is read; earlier rows reuse the same context.
    ctx.assign(history.size(), next_context_out);
  }
  const auto pass = forward(tape, history, ctx, options);
  const auto& z = pass.z_out.value();
  const std::size_t last = z.rows() - 1, d = z.cols();
  const auto& q = output_table_->value;
  std::vector<double> scores(meta_.n_items);
  for (std::size_t v = 0; v < meta_.n_items; ++v) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(z.at(last, j)) * q.at(v, j);
    scores[v] = s;
  }
  if (gates) {
    for (std::size_t k = 0; k < 3; ++k) (*gates)[k] = pass.gates.value().at(last, k);
  }
  return scores;
}

template <class Real>
std::array<double, 3> M3Model<Real>::gate_next(std::span<const Event> history,
                                               const std::vector<std::size_t>& next_context_out) {
  std::array<double, 3> g{};
  score_next(history, next_context_out, &g);
  return g;
}

template <class Real>
Var<Real> aggregate(Tape<Real>& tape, const std::array<Var<Real>, 3>& encoded,
                    const Var<Real>& gates, std::size_t d_enc, Aggregation mode) {
  const std::size_t steps = gates.value().rows();
  std::vector<Var<Real>> blocks;
  for (std::size_t k = 0; k < 3; ++k) {
    if (!encoded[k].valid()) {
      if (mode == Aggregation::weighted_concat) {
        blocks.push_back(tape.constant(BasicTensor<Real>({steps, d_enc})));
      }
      continue;
    }
    blocks.push_back(multiply(encoded[k], slice_cols(gates, k, 1)));
  }
  if (blocks.empty()) fail(ErrorCode::invalid_argument, "aggregate: no encoder output");
  if (mode == Aggregation::weighted_concat) return concat(std::span<const Var<Real>>(blocks));
  Var<Real> sum = blocks[0];
  for (std::size_t i = 1; i < blocks.size(); ++i) sum = add(sum, blocks[i]);
  return sum;
}

template Var<double> aggregate(Tape<double>&, const std::array<Var<double>, 3>&,
                               const Var<double>&, std::size_t, Aggregation);
template Var<float> aggregate(Tape<float>&, const std::array<Var<float>, 3>&,
                              const Var<float>&, std::size_t, Aggregation);

template class M3Model<double>;
template class M3Model<float>;

}  // namespace m3
