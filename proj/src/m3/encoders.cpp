#include "m3/encoders.hpp"

#include <cmath>
#include <utility>

#include "m3/error.hpp"

namespace m3 {
namespace {

template <class Real>
Parameter<Real>* matrix(ParameterSet<Real>& params, const std::string& name, std::size_t rows,
                        std::size_t cols, std::mt19937_64& rng) {
  auto& p = params.add(name, {rows, cols});
  init_glorot(p, rng);
  return &p;
}

template <class Real>
Parameter<Real>* vector(ParameterSet<Real>& params, const std::string& name, std::size_t n) {
  return &params.add(name, {n});
}

template <class Real>
void require_rows(const Var<Real>& z_in, const char* what) {
  if (z_in.value().rank() != 2 || z_in.shape()[0] == 0) {
    fail(ErrorCode::invalid_argument, std::string(what) + ": empty input sequence");
  }
}

// Returns (Z~, causal softmax of Z~ Z~^T / sqrt(d_enc)).
template <class Real>
std::pair<Var<Real>, Var<Real>> attention_parts(const Var<Real>& z_in,
                                                const AttentionEncoder<Real>& enc) {
  require_rows(z_in, "attention encoder");
  Var<Real> keys = enc.projection ? matmul(z_in, z_in.tape()->parameter(*enc.projection)) : z_in;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(enc.d_enc));
  return {keys, causal_softmax(scale(matmul(keys, transpose(keys)), inv_sqrt))};
}

}  // namespace

template <class Real>
TinyEncoder<Real> make_tiny_encoder(ParameterSet<Real>& params, const std::string& prefix,
                                    std::size_t d_in, std::size_t d_enc, std::mt19937_64& rng) {
  TinyEncoder<Real> enc;
  if (d_in != d_enc) {
    enc.weight = matrix(params, prefix + ".weight", d_in, d_enc, rng);
    enc.bias = vector(params, prefix + ".bias", d_enc);
  }
  return enc;
}

template <class Real>
GruEncoder<Real> make_gru_encoder(ParameterSet<Real>& params, const std::string& prefix,
                                  std::size_t d_in, std::size_t d_enc, std::mt19937_64& rng) {
  GruEncoder<Real> enc;
  enc.w_xr = matrix(params, prefix + ".w_xr", d_in, d_in, rng);
  enc.w_xu = matrix(params, prefix + ".w_xu", d_in, d_in, rng);
  enc.w_xc = matrix(params, prefix + ".w_xc", d_in, d_in, rng);
  enc.w_hr = matrix(params, prefix + ".w_hr", d_in, d_in, rng);
  enc.w_hu = matrix(params, prefix + ".w_hu", d_in, d_in, rng);
  enc.w_hc = matrix(params, prefix + ".w_hc", d_in, d_in, rng);
  enc.b_r = vector(params, prefix + ".b_r", d_in);
  enc.b_u = vector(params, prefix + ".b_u", d_in);
  enc.b_c = vector(params, prefix + ".b_c", d_in);
  enc.w_out = matrix(params, prefix + ".w_out", d_in, d_enc, rng);
  return enc;
}

template <class Real>
TcnEncoder<Real> make_tcn_encoder(ParameterSet<Real>& params, const std::string& prefix,
                                  std::size_t d_in, std::size_t d_enc, std::size_t layers,
                                  std::size_t width, std::mt19937_64& rng) {
  require(layers >= 1, "tcn: at least one layer required");
  require(width >= 1, "tcn: width must be positive");
  TcnEncoder<Real> enc;
  enc.width = width;
  std::size_t channels = d_in;
  for (std::size_t k = 0; k < layers; ++k) {
    const std::string name = prefix + ".layer" + std::to_string(k);
    enc.weights.push_back(matrix(params, name + ".weight", width * channels, d_enc, rng));
    enc.biases.push_back(vector(params, name + ".bias", d_enc));
    channels = d_enc;
  }
  return enc;
}

template <class Real>
AttentionEncoder<Real> make_attention_encoder(ParameterSet<Real>& params,
                                              const std::string& prefix, std::size_t d_in,
                                              std::size_t d_enc, std::mt19937_64& rng) {
  AttentionEncoder<Real> enc;
  enc.d_enc = d_enc;
  if (d_in != d_enc) enc.projection = matrix(params, prefix + ".projection", d_in, d_enc, rng);
  return enc;
}

template <class Real>
Var<Real> tiny_encode(const Var<Real>& z_in, const TinyEncoder<Real>& enc) {
  require_rows(z_in, "tiny encoder");
  if (!enc.weight) return z_in;
  Tape<Real>& tape = *z_in.tape();
  return add(matmul(z_in, tape.parameter(*enc.weight)), tape.parameter(*enc.bias));
}

template <class Real>
Var<Real> gru_encode(const Var<Real>& z_in, const GruEncoder<Real>& enc) {
  require_rows(z_in, "gru encoder");
  Tape<Real>& tape = *z_in.tape();
  auto p = [&](Parameter<Real>* q) { return tape.parameter(*q); };
  GruWeights<Real> w{p(enc.w_xr), p(enc.w_xu), p(enc.w_xc), p(enc.w_hr), p(enc.w_hu),
                     p(enc.w_hc), p(enc.b_r),  p(enc.b_u),  p(enc.b_c)};
  return matmul(gru_sequence(z_in, w), p(enc.w_out));
}

template <class Real>
Var<Real> tcn_encode(const Var<Real>& z_in, const TcnEncoder<Real>& enc) {
  require_rows(z_in, "tcn encoder");
  Tape<Real>& tape = *z_in.tape();
  Var<Real> h = z_in;
  for (std::size_t k = 0; k < enc.weights.size(); ++k) {
    Var<Real> windowed = enc.width == 1 ? h : causal_unfold(h, enc.width);
    h = relu(add(matmul(windowed, tape.parameter(*enc.weights[k])),
                 tape.parameter(*enc.biases[k])));
  }
  return h;
}

template <class Real>
Var<Real> attention_weights(const Var<Real>& z_in, const AttentionEncoder<Real>& enc) {
  return attention_parts(z_in, enc).second;
}

template <class Real>
Var<Real> attention_encode(const Var<Real>& z_in, const AttentionEncoder<Real>& enc) {
  // Values are the inputs themselves; with a projection (d_in != d_enc) the
  // projected rows are used so the output still has d_enc columns.
  auto [keys, weights] = attention_parts(z_in, enc);
  return matmul(weights, keys);
}

#define M3_INSTANTIATE_ENCODERS(Real)                                                      \
  template TinyEncoder<Real> make_tiny_encoder(ParameterSet<Real>&, const std::string&,   \
                                               std::size_t, std::size_t, std::mt19937_64&); \
  template GruEncoder<Real> make_gru_encoder(ParameterSet<Real>&, const std::string&,     \
                                             std::size_t, std::size_t, std::mt19937_64&);   \
  template TcnEncoder<Real> make_tcn_encoder(ParameterSet<Real>&, const std::string&,     \
                                             std::size_t, std::size_t, std::size_t,         \
                                             std::size_t, std::mt19937_64&);                \
  template AttentionEncoder<Real> make_attention_encoder(                                  \
      ParameterSet<Real>&, const std::string&, std::size_t, std::size_t, std::mt19937_64&); \
  template Var<Real> tiny_encode(const Var<Real>&, const TinyEncoder<Real>&);              \
  template Var<Real> gru_encode(const Var<Real>&, const GruEncoder<Real>&);                \
  template Var<Real> tcn_encode(const Var<Real>&, const TcnEncoder<Real>&);                \
  template Var<Real> attention_encode(const Var<Real>&, const AttentionEncoder<Real>&);    \
  template Var<Real> attention_weights(const Var<Real>&, const AttentionEncoder<Real>&);

M3_INSTANTIATE_ENCODERS(double)
M3_INSTANTIATE_ENCODERS(float)

#undef M3_INSTANTIATE_ENCODERS

}  // namespace m3
