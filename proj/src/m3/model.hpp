#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m3/autodiff.hpp"
#include "m3/encoders.hpp"
#include "m3/parameters.hpp"
#include "m3/sequence_data.hpp"

namespace m3 {

enum class Variant { m3r, m3c };  // GRU or TCN short-range encoder
enum class Aggregation { weighted_concat, weighted_sum };
enum class GateType { fixed, bottom_switch, contextual_switch };
enum class Activation { identity, relu };
enum class Precision { float64, float32 };

inline constexpr std::size_t kTiny = 0, kShort = 1, kLong = 2;

// Which of the T, S, L encoders take part.
struct EncoderSet {
  std::array<bool, 3> on{true, true, true};

  static EncoderSet parse(const std::string& letters);  // e.g. "TSL", "T", "SL"
  std::string letters() const;
  bool empty() const { return !on[0] && !on[1] && !on[2]; }
  friend bool operator==(const EncoderSet&, const EncoderSet&) = default;
};

struct M3Config {
  Variant variant = Variant::m3r;
  std::size_t d_in = 32;
  std::size_t d_enc = 32;
  std::size_t d_out = 32;
  std::size_t embed_dim = 64;
  std::size_t context_dim = 8;  // per categorical feature
  Aggregation aggregation = Aggregation::weighted_concat;
  GateType gate = GateType::bottom_switch;
  EncoderSet enabled;
  // identity means the layer passes its input through unchanged.
  Activation in_activation = Activation::relu;
  std::size_t in_layers = 1;
  Activation out_activation = Activation::relu;
  std::size_t out_layers = 1;
  std::size_t tcn_layers = 2;
  std::size_t tcn_width = 5;
  Precision precision = Precision::float64;

  // Checks internal consistency and compatibility with the dataset.
  void validate(const DatasetMeta& meta) const;
  friend bool operator==(const M3Config&, const M3Config&) = default;
};

std::string to_string(Variant v);
std::string to_string(Aggregation a);
std::string to_string(GateType g);
std::string to_string(Activation a);
std::string to_string(Precision p);
Variant parse_variant(const std::string& s);
Aggregation parse_aggregation(const std::string& s);
GateType parse_gate(const std::string& s);
Activation parse_activation(const std::string& s);
Precision parse_precision(const std::string& s);

// JSON object with one key per field; parsing rejects unknown keys and keeps
// defaults for missing ones.
std::string config_to_json(const M3Config& config);
M3Config config_from_json(const std::string& json);
std::string meta_to_json(const DatasetMeta& meta);
DatasetMeta meta_from_json(const std::string& json);

struct ForwardOptions {
  // Multiplies the gate after disabled encoders are zeroed.
  std::array<double, 3> gate_mask{1.0, 1.0, 1.0};
};

template <class Real>
struct ForwardPass {
  Var<Real> z_in;   // T x d_in
  Var<Real> gates;  // T x 3
  Var<Real> z_out;  // T x d_out
};

template <class Real>
class M3Model {
 public:
  M3Model(const M3Config& config, const DatasetMeta& meta, std::uint64_t seed);
  M3Model(const M3Model&) = delete;
  M3Model& operator=(const M3Model&) = delete;

  const M3Config& config() const noexcept { return config_; }
  const DatasetMeta& meta() const noexcept { return meta_; }
  ParameterSet<Real>& parameters() noexcept { return params_; }
  const ParameterSet<Real>& parameters() const noexcept { return params_; }
  Parameter<Real>& input_table() { return *item_table_; }
  Parameter<Real>& output_table() { return *output_table_; }

  // Row t of the result encodes history[0..t] and targets the following
  // event, whose output context is next_context_out[t]. next_context_out may
  // be empty when the dataset has no output context features.
  ForwardPass<Real> forward(Tape<Real>& tape, std::span<const Event> history,
                            std::span<const std::vector<std::size_t>> next_context_out,
                            const ForwardOptions& options = {});

  // Scores for every item as the event following `history`.
  std::vector<double> score_next(std::span<const Event> history,
                                 const std::vector<std::size_t>& next_context_out,
                                 std::array<double, 3>* gates = nullptr,
                                 const ForwardOptions& options = {});

  // Gate values at the last row for the event following `history`.
  std::array<double, 3> gate_next(std::span<const Event> history,
                                  const std::vector<std::size_t>& next_context_out);

 private:
  struct Dense {
    Activation activation = Activation::relu;
    std::vector<Parameter<Real>*> weights;
    std::vector<Parameter<Real>*> biases;
  };

  Dense make_dense(const std::string& prefix, Activation act, std::size_t layers,
                   std::size_t in, std::size_t out);
  Var<Real> apply_dense(const Dense& dense, Var<Real> x);
  Var<Real> context_embeddings(Tape<Real>& tape, const std::vector<Parameter<Real>*>& tables,
                               const std::vector<std::vector<std::size_t>>& columns);
  void check_events(std::span<const Event> history,
                    std::span<const std::vector<std::size_t>> next_context_out) const;

  M3Config config_;
  DatasetMeta meta_;
  ParameterSet<Real> params_;
  Parameter<Real>* item_table_ = nullptr;
  Parameter<Real>* output_table_ = nullptr;
  std::vector<Parameter<Real>*> ctx_in_tables_;
  std::vector<Parameter<Real>*> ctx_out_tables_;
  Dense f_in_;
  Dense f_out_;
  TinyEncoder<Real> tiny_;
  GruEncoder<Real> gru_;
  TcnEncoder<Real> tcn_;
  AttentionEncoder<Real> attention_;
  Parameter<Real>* gate_weight_ = nullptr;
  Parameter<Real>* gate_bias_ = nullptr;
};

// Weighted-concat or weighted-sum of the encoder outputs (T x d_enc each)
// scaled by the matching gate column; an invalid Var marks a disabled encoder.
template <class Real>
Var<Real> aggregate(Tape<Real>& tape, const std::array<Var<Real>, 3>& encoded,
                    const Var<Real>& gates, std::size_t d_enc, Aggregation mode);

// Output contexts of window[1..], aligned with forward() rows over
// window[0..n-2].
std::vector<std::vector<std::size_t>> next_contexts(std::span<const Event> window);

extern template class M3Model<double>;
extern template class M3Model<float>;

}  // namespace m3
