#pragma once

// Reverse-mode differentiable tensor engine.
//
// Tensors are handles to graph nodes holding 64-bit float buffers. Ops build
// the graph eagerly (values computed immediately, backward rules recorded);
// backward() walks the recorded graph once in reverse topological order.
// Execution is single-threaded and bit-deterministic for identical inputs.
//
// There is no broadcasting beyond the explicit scalar-taking ops; shape
// mismatches throw with both shapes named.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace capskd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// When enabled, every op forward pass scans its output for NaN/Inf and
// throws. Defaults to on unless compiled with NDEBUG.
void set_debug_checks(bool enabled);
bool debug_checks();

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily by backward()
  bool requires_grad = false;  // leaf accumulation target
  bool needs_grad = false;     // true if on a path from a requires_grad leaf
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward_fn;
  const char* op = "leaf";

  std::size_t numel() const { return data.size(); }
  double* grad_data();  // ensures the buffer exists (zero-filled)
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  std::vector<double>& values() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  // Scalar (1-element) tensors only.
  double value() const;

  bool requires_grad() const { return node_->requires_grad; }
  // Gradient buffer; allocated zero-filled on first access.
  std::vector<double>& grad() { return ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad();

  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

 private:
  std::vector<double>& ensure_grad();
  std::shared_ptr<TensorNode> node_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor const_minus(double c, const Tensor& a);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double negative_slope = 0.01);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor log(const Tensor& a);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor l2_norm(const Tensor& a);  // Frobenius norm of the whole tensor

// ---- rank-2 linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add_bias_rows(const Tensor& a, const Tensor& bias);
Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, Shape new_shape);
Tensor softmax(const Tensor& a);  // along the last axis
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// ---- convolution (input [B,C,H,W], weight [CO,CI,k,k], bias [CO]) ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t stride = 1);

// ---- capsule primitives ----
// v = (|s|^2 / (1+|s|^2)) * s/|s| along the last axis; squash(0) = 0.
Tensor squash(const Tensor& a);
Tensor l2_norm_last(const Tensor& a);  // [..., H] -> [...]
// [B, C*d, s, s] -> [B, C*s*s, d]: channel group g at spatial position p
// becomes capsule g*s*s + p with its d in-group channels as coordinates.
Tensor form_capsules(const Tensor& maps, std::size_t groups);
// u [B,A,d], w [A,K,d,H] -> u_hat [B,A,K,H], u_hat[b,a,k] = u[b,a] . w[a,k]
Tensor caps_predict(const Tensor& u, const Tensor& w);
// c [B,A,K], u_hat [B,A,K,H] -> s [B,K,H], s[b,k] = sum_a c[b,a,k] u_hat[b,a,k]
Tensor routing_mix(const Tensor& c, const Tensor& u_hat);
// u_hat [B,A,K,H], v [B,K,H] -> [B,A,K], out[b,a,k] = u_hat[b,a,k] . v[b,k]
Tensor routing_agreement(const Tensor& u_hat, const Tensor& v);
// u [A,d] -> G = u^T u, [d,d]
Tensor gram(const Tensor& u);
// G / ||G||_F; a (near-)zero G is passed through unnormalized and counted in
// Diagnostics::zero_gram_guards.
Tensor frobenius_normalize(const Tensor& g);
Tensor select_batch(const Tensor& t, std::size_t index);  // [B,...] -> [...]

// Reverse accumulation from a scalar loss. Every reachable node is visited
// exactly once; returns the number of nodes visited. Throws on non-scalars.
std::size_t backward(const Tensor& loss);

// ---- LSTM ----
struct LstmParams {
  Tensor w_input;   // [F, 4M], gate order i,f,g,o
  Tensor w_hidden;  // [M, 4M]
  Tensor bias;      // [4M]
};

// One step stack over x_steps (each [B, F]); h and c start at zero.
std::vector<Tensor> lstm_forward_steps(const std::vector<Tensor>& x_steps,
                                       const LstmParams& p,
                                       std::size_t hidden_units);
// Single sequence [L, F] -> per-step outputs [L, M].
Tensor lstm_forward(const Tensor& seq, const LstmParams& p,
                    std::size_t hidden_units);

// ---- RNG ----
// Deterministic generator used everywhere; normal() is Box-Muller so results
// do not depend on the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform(double lo, double hi);
  double normal();
  std::uint64_t next_u64() { return gen_(); }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Uniform init in [-bound, bound], filled in row-major order.
Tensor uniform_init(Shape shape, double bound, Rng& rng,
                    bool requires_grad = true);

}  // namespace capskd
