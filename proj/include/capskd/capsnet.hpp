#pragma once

// The LSTM-CapsNet model: stacked LSTM layers (layer-norm + LeakyReLU after
// each), per-window feature maps stacked as channels, two convolutions, lower
// capsules, routing-by-agreement, and a classification (capsule lengths) or
// regression (small sigmoid MLP) head.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "capskd/tensor.hpp"

namespace capskd {

enum class HeadKind { Classification, Regression };

struct ArchSpec {
  std::size_t input_features = 0;  // F, per-window feature width
  std::size_t lstm_layers = 1;     // N
  std::size_t hidden_units = 256;  // M, a perfect square
  std::size_t windows = 8;         // L, also conv channel count
  std::size_t capsule_groups = 2;  // C
  std::size_t higher_count = 3;    // K
  std::size_t higher_dim = 16;     // H
  HeadKind head = HeadKind::Classification;
  std::size_t routing_iters = 3;

  std::size_t map_side() const;       // sqrt(M)
  std::size_t conv_out_side() const;  // sqrt(M) - 2
  std::size_t lower_count() const;    // A = C * (sqrt(M)-2)^2
  std::size_t lower_dim() const;      // d = L / C
  void validate() const;

  std::string to_json() const;
  static ArchSpec from_json(const std::string& json_text);
};

struct ModelParams {
  ArchSpec spec;
  std::vector<std::pair<std::string, Tensor>> named;  // fixed order

  static ModelParams init(const ArchSpec& spec, std::uint64_t seed,
                          bool requires_grad = true);
  Tensor& find(const std::string& name);
  const Tensor& find(const std::string& name) const;
  std::vector<Tensor> tensors() const;
  std::size_t param_count() const;  // sum of numel over named tensors
  void zero_grads();
  void set_requires_grad(bool on);
  ModelParams clone(bool requires_grad) const;
};

// Closed-form trainable-scalar count for the assembled model; verified in
// tests against ModelParams::param_count of the real assembly.
std::size_t count_params(const ArchSpec& spec);

struct RoutingResult {
  Tensor higher;      // [B, K, H]
  Tensor coupling;    // [B, A, K], final coefficients
  Tensor pre_squash;  // [B, K, H], final s_j
  std::vector<Tensor> coupling_per_iter;  // filled when trace requested
};

// Routing-by-agreement over prediction vectors u_hat [B, A, K, H]. Logits
// start at zero; each iteration softmaxes them over K, mixes, squashes, and
// adds the agreement update (skipped after the final iteration).
RoutingResult dynamic_routing(const Tensor& u_hat, std::size_t iters,
                              bool record_trace = false);

// u_hat[b,a,k] = u[b,a] . W[a,k]  (per-pair weights, no sharing across a)
Tensor predict_vectors(const Tensor& u, const Tensor& w);

struct ForwardResult {
  Tensor lower;     // [B, A, d] squashed lower capsules
  Tensor u_hat;     // [B, A, K, H]
  Tensor coupling;  // [B, A, K]
  Tensor higher;    // [B, K, H]
  Tensor lengths;   // [B, K] higher-capsule norms
  Tensor head_out;  // [B, 1] regression output; undefined for classification
};

// features: [B, L*F] (window-major rows per sample).
ForwardResult forward(const Tensor& features, const ModelParams& params);

// argmax_k ||v_k|| per sample from a [B, K] length matrix.
std::vector<std::size_t> predict_classes(const Tensor& lengths);

}  // namespace capskd
