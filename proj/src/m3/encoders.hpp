#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "m3/autodiff.hpp"
#include "m3/parameters.hpp"

namespace m3 {

// All encoders take the processed inputs Z_in (T x d_in) of a whole window
// and return T x d_enc: row t encodes the prefix of rows 0..t and never reads
// later rows.

template <class Real>
struct TinyEncoder {
  Parameter<Real>* weight = nullptr;  // d_in x d_enc, only when d_in != d_enc
  Parameter<Real>* bias = nullptr;
};

template <class Real>
struct GruEncoder {
  Parameter<Real>* w_xr = nullptr;
  Parameter<Real>* w_xu = nullptr;
  Parameter<Real>* w_xc = nullptr;
  Parameter<Real>* w_hr = nullptr;
  Parameter<Real>* w_hu = nullptr;
  Parameter<Real>* w_hc = nullptr;
  Parameter<Real>* b_r = nullptr;
  Parameter<Real>* b_u = nullptr;
  Parameter<Real>* b_c = nullptr;
  Parameter<Real>* w_out = nullptr;  // d_in x d_enc
};

template <class Real>
struct TcnEncoder {
  std::size_t width = 5;
  // Layer k maps width*C_k inputs to d_enc channels: the filter for lag j
  // (0 = current step) occupies rows (width-1-j)*C_k .. of the weight.
  std::vector<Parameter<Real>*> weights;
  std::vector<Parameter<Real>*> biases;

  std::size_t receptive_field() const { return weights.size() * (width - 1) + 1; }
};

template <class Real>
struct AttentionEncoder {
  Parameter<Real>* projection = nullptr;  // d_in x d_enc, only when d_in != d_enc
  std::size_t d_enc = 0;
};

template <class Real>
TinyEncoder<Real> make_tiny_encoder(ParameterSet<Real>& params, const std::string& prefix,
                                    std::size_t d_in, std::size_t d_enc, std::mt19937_64& rng);
template <class Real>
GruEncoder<Real> make_gru_encoder(ParameterSet<Real>& params, const std::string& prefix,
                                  std::size_t d_in, std::size_t d_enc, std::mt19937_64& rng);
template <class Real>
TcnEncoder<Real> make_tcn_encoder(ParameterSet<Real>& params, const std::string& prefix,
                                  std::size_t d_in, std::size_t d_enc, std::size_t layers,
                                  std::size_t width, std::mt19937_64& rng);
template <class Real>
AttentionEncoder<Real> make_attention_encoder(ParameterSet<Real>& params,
                                              const std::string& prefix, std::size_t d_in,
                                              std::size_t d_enc, std::mt19937_64& rng);

template <class Real>
Var<Real> tiny_encode(const Var<Real>& z_in, const TinyEncoder<Real>& enc);
template <class Real>
Var<Real> gru_encode(const Var<Real>& z_in, const GruEncoder<Real>& enc);
template <class Real>
Var<Real> tcn_encode(const Var<Real>& z_in, const TcnEncoder<Real>& enc);
template <class Real>
Var<Real> attention_encode(const Var<Real>& z_in, const AttentionEncoder<Real>& enc);

// T x T matrix whose row t holds the softmax weights over positions 0..t.
template <class Real>
Var<Real> attention_weights(const Var<Real>& z_in, const AttentionEncoder<Real>& enc);

}  // namespace m3
