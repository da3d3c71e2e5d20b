#include "capskd/tensor.hpp"

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "capskd/diagnostics.hpp"

extern "C" void openblas_set_num_threads(int);

namespace capskd {

namespace {

// Single-threaded BLAS keeps results bit-identical across runs.
struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit blas_init;

bool g_debug_checks =
#ifdef NDEBUG
    false;
#else
    true;
#endif

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
         " vs " + shape_str(b.shape()));
  }
}

std::shared_ptr<TensorNode> make_node(Shape shape,
                                      std::vector<std::shared_ptr<TensorNode>> inputs,
                                      const char* op) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data.assign(shape_numel(n->shape), 0.0);
  n->inputs = std::move(inputs);
  n->op = op;
  for (const auto& in : n->inputs) {
    if (in->needs_grad) {
      n->needs_grad = true;
      break;
    }
  }
  return n;
}

void check_finite(const TensorNode& n) {
  if (!g_debug_checks) return;
  for (double v : n.data) {
    if (!std::isfinite(v)) {
      fail(std::string("non-finite value produced by op '") + n.op + "'");
    }
  }
}

Tensor finish(std::shared_ptr<TensorNode> n) {
  check_finite(*n);
  return Tensor(std::move(n));
}

// dgemm wrappers over row-major buffers. `accumulate` adds into C.
void mm_nn(const double* a, const double* b, double* c, int m, int k, int n,
           bool accumulate) {
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, a, k,
              b, n, accumulate ? 1.0 : 0.0, c, n);
}
void mm_nt(const double* a, const double* b, double* c, int m, int k, int n,
           bool accumulate) {
  // a [m,k] row-major, b [n,k] row-major; c = a * b^T
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, n, k, 1.0, a, k, b,
              k, accumulate ? 1.0 : 0.0, c, n);
}
void mm_tn(const double* a, const double* b, double* c, int m, int k, int n,
           bool accumulate) {
  // a [k,m] row-major, b [k,n] row-major; c = a^T * b
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, m, n, k, 1.0, a, m, b,
              n, accumulate ? 1.0 : 0.0, c, n);
}

using Node = TensorNode;

// Elementwise unary helper: y = f(x), dx += dfdy(x, y) * gy.
template <typename F, typename DF>
Tensor unary_op(const Tensor& a, const char* name, F f, DF dfdx) {
  auto n = make_node(a.shape(), {a.node_ptr()}, name);
  const double* x = a.data();
  for (std::size_t i = 0; i < n->data.size(); ++i) n->data[i] = f(x[i]);
  if (n->needs_grad) {
    n->backward_fn = [dfdx](Node& self) {
      Node& in = *self.inputs[0];
      if (!in.needs_grad) return;
      double* gi = in.grad_data();
      const double* gy = self.grad.data();
      const double* x = in.data.data();
      const double* y = self.data.data();
      for (std::size_t i = 0; i < self.data.size(); ++i) {
        gi[i] += dfdx(x[i], y[i]) * gy[i];
      }
    };
  }
  return finish(n);
}

}  // namespace

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

void set_debug_checks(bool enabled) { g_debug_checks = enabled; }
bool debug_checks() { return g_debug_checks; }

double* TensorNode::grad_data() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad.data();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data.assign(shape_numel(n->shape), value);
  n->requires_grad = requires_grad;
  n->needs_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    fail("from_data: " + std::to_string(values.size()) +
         " values for shape " + shape_str(shape));
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  n->needs_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

double Tensor::value() const {
  if (numel() != 1) {
    fail("value(): tensor " + shape_str(shape()) + " is not a scalar");
  }
  return node_->data[0];
}

std::vector<double>& Tensor::ensure_grad() {
  node_->grad_data();
  return node_->grad;
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto n = make_node(a.shape(), {a.node_ptr(), b.node_ptr()}, "add");
  const double* x = a.data();
  const double* y = b.data();
  for (std::size_t i = 0; i < n->data.size(); ++i) n->data[i] = x[i] + y[i];
  if (n->needs_grad) {
    n->backward_fn = [](Node& self) {
      for (int which = 0; which < 2; ++which) {
        Node& in = *self.inputs[which];
        if (!in.needs_grad) continue;
        double* gi = in.grad_data();
        for (std::size_t i = 0; i < self.data.size(); ++i) gi[i] += self.grad[i];
      }
    };
  }
  return finish(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto n = make_node(a.shape(), {a.node_ptr(), b.node_ptr()}, "sub");
  const double* x = a.data();
  const double* y = b.data();
  for (std::size_t i = 0; i < n->data.size(); ++i) n->data[i] = x[i] - y[i];
  if (n->needs_grad) {
    n->backward_fn = [](Node& self) {
      Node& ia = *self.inputs[0];
      Node& ib = *self.inputs[1];
      if (ia.needs_grad) {
        double* gi = ia.grad_data();
        for (std::size_t i = 0; i < self.data.size(); ++i) gi[i] += self.grad[i];
      }
      if (ib.needs_grad) {
        double* gi = ib.grad_data();
        for (std::size_t i = 0; i < self.data.size(); ++i) gi[i] -= self.grad[i];
      }
    };
  }
  return finish(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto n = make_node(a.shape(), {a.node_ptr(), b.node_ptr()}, "mul");
  const double* x = a.data();
  const double* y = b.data();
  for (std::size_t i = 0; i < n->data.size(); ++i) n->data[i] = x[i] * y[i];
  if (n->needs_grad) {
    n->backward_fn = [](Node& self) {
      Node& ia = *self.inputs[0];
      Node& ib = *self.inputs[1];
      const double* x = ia.data.data();
      const double* y = ib.data.data();
      if (ia.needs_grad) {
        double* gi = ia.grad_data();
        for (std::size_t i = 0; i < self.data.size(); ++i)
          gi[i] += y[i] * self.grad[i];
      }
      if (ib.needs_grad) {
        double* gi = ib.grad_data();
        for (std::size_t i = 0; i < self.data.size(); ++i)
          gi[i] += x[i] * self.grad[i];
      }
    };
  }
  return finish(n);
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      a, "scale", [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      a, "add_scalar", [c](double x) { return x + c; },
      [](double, double) { return 1.0; });
}

Tensor const_minus(double c, const Tensor& a) {
  return unary_op(
      a, "const_minus", [c](double x) { return c - x; },
      [](double, double) { return -1.0; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, "square", [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double negative_slope) {
  const double s = negative_slope;
  return unary_op(
      a, "leaky_relu", [s](double x) { return x > 0.0 ? x : s * x; },
      [s](double x, double) { return x > 0.0 ? 1.0 : s; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, "sigmoid",
      [](double x) {
        // Branch avoids overflow in exp for large |x|.
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, "log",
      [](double x) {
        if (x <= 0.0) fail("log: non-positive input " + std::to_string(x));
        return std::log(x);
      },
      [](double x, double) { return 1.0 / x; });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  auto n = make_node({1}, {a.node_ptr()}, "sum");
  double acc = 0.0;
  const double* x = a.data();
  for (std::size_t i = 0; i < a.numel(); ++i) acc += x[i];
  n->data[0] = acc;
  if (n->needs_grad) {
    n->backward_fn = [](Node& self) {
      Node& in = *self.inputs[0];
      if (!in.needs_grad) return;
      double* gi = in.grad_data();
      const double g = self.grad[0];
      for (std::size_t i = 0; i < in.data.size(); ++i) gi[i] += g;
    };
  }
  return finish(n);
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) fail("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor l2_norm(const Tensor& a) {
  auto n = make_node({1}, {a.node_ptr()}, "l2_norm");
  double acc = 0.0;
  const double* x = a.data();
  for (std::size_t i = 0; i < a.numel(); ++i) acc += x[i] * x[i];
  n->data[0] = std::sqrt(acc);
  if (n->needs_grad) {
    n->backward_fn = [](Node& self) {
      Node& in = *self.inputs[0];
      if (!in.needs_grad) return;
      const double norm = self.data[0];
      if (norm <= 0.0) return;  // grad of ||.|| at 0: take 0
      double* gi = in.grad_data();
      const double g = self.grad[0] / norm;
      const double* x = in.data.data();
      for (std::size_t i = 0; i < in.data.size(); ++i) gi[i] += g * x[i];
    };
  }
  return finish(n);
}

// ---------------------------------------------------------------------------
// rank-2 linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    fail("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
         shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
  auto n = make_node({m, p}, {a.node_ptr(), b.node_ptr()}, "matmul");
  mm_nn(a.data(), b.data(), n->data.data(), static_cast<int>(m),
        static_cast<int>(k), static_cast<int>(p), false);
  if (n->needs_grad) {
    n->backward_fn = [m, k, p](Node& self) {
      Node& ia = *self.inputs[0];
      Node& ib = *self.inputs[1];
      if (ia.needs_grad) {
        mm_nt(self.grad.data(), ib.data.data(), ia.grad_data(),
              static_cast<int>(m), static_cast<int>(p), static_cast<int>(k),
              true);
      }
      if (ib.needs_grad) {
        mm_tn(ia.data.data(), self.grad.data(), ib.grad_data(),
              static_cast<int>(k), static_cast<int>(m), static_cast<int>(p),
              true);
      }
    };
  }
  return finish(n);
}

Tensor add_bias_rows(const Tensor& a, const Tensor& bias) {
  if (a.rank() != 2 || bias.rank() != 1 || bias.shape()[0] != a.shape()[1]) {
    fail("add_bias_rows: " + shape_str(a.shape()) + " with bias " +
         shape_str(bias.shape()));
  }
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  auto n = make_node(a.shape(), {a.node_ptr(), bias.node_ptr()},
                     "add_bias_rows");
  const double* x = a.data();
  const double* b = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      n->data[r * cols + c] = x[r * cols + c] + b[c];
  if (n->needs_grad) {
    n->backward_fn = [rows, cols](Node& self) {
      Node& ia = *self.inputs[0];
      Node& ib = *self.inputs[1];
      if (ia.needs_grad) {
        double* gi = ia.grad_data();
        for (std::size_t i = 0; i < self.data.size(); ++i) gi[i] += self.grad[i];
      }
      if (ib.needs_grad) {
        double* gb = ib.grad_data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c)
            gb[c] += self.grad[r * cols + c];
      }
    };
  }
  return finish(n);
}

Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (a.rank() != 2 || c0 >= c1 || c1 > a.shape()[1]) {
    fail("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
         ") of " + shape_str(a.shape()));
  }
  const std::size_t rows = a.shape()[0], cols = a.shape()[1], w = c1 - c0;
  auto n = make_node({rows, w}, {a.node_ptr()}, "slice_cols");
  const double* x = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c)
      n->data[r * w + c] = x[r * cols + c0 + c];
  if (n->needs_grad) {
    n->backward_fn = [rows, cols, c0, w](Node& self) {
      Node& in = *self.inputs[0];
      if (!in.needs_grad) return;
      double* gi = in.grad_data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c)
          gi[r * cols + c0 + c] += self.grad[r * w + c];
    };
  }
  return finish(n);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail("concat_cols: no parts");
  const std::size_t rows = parts[0].shape()[0];
  std::size_t total = 0;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  inputs.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.shape()[0] != rows) {
      fail("concat_cols: part " + shape_str(p.shape()) +
           " does not match leading rows " + std::to_string(rows));
    }
    total += p.shape()[1];
    inputs.push_back(p.node_ptr());
  }
  auto n = make_node({rows, total}, std::move(inputs), "concat_cols");
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[1];
    const double* x = p.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c)
        n->data[r * total + off + c] = x[r * w + c];
    off += w;
  }
  if (n->needs_grad) {
    n->backward_fn = [rows, total](Node& self) {
      std::size_t off = 0;
      for (auto& inp : self.inputs) {
        const std::size_t w = inp->shape[1];
        if (inp->needs_grad) {
          double* gi = inp->grad_data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c)
              gi[r * w + c] += self.grad[r * total + off + c];
        }
        off += w;
      }
    };
  }
  return finish(n);
}

Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel()) {
    fail("reshape: " + shape_str(a.shape()) + " to " + shape_str(new_shape));
  }
  auto n = make_node(std::move(new_shape), {a.node_ptr()}, "reshape");
  n->data = a.values();
  if (n->needs_grad) {
    n->backward_fn = [](Node& self) {
      Node& in = *self.inputs[0];
      if (!in.needs_grad) return;
      double* gi = in.grad_data();
      for (std::size_t i = 0; i < self.data.size(); ++i) gi[i] += self.grad[i];
    };
  }
  return finish(n);
}

Tensor softmax(const Tensor& a) {
  if (a.rank() < 1) fail("softmax: needs at least rank 1");
  const std::size_t width = a.shape().back();
  const std::size_t rows = a.numel() / width;
  auto n = make_node(a.shape(), {a.node_ptr()}, "softmax");
  const double* x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * width;
    double* yr = n->data.data() + r * width;
    double mx = xr[0];
    for (std::size_t i = 1; i < width; ++i) mx = std::max(mx, xr[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < width; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      z += yr[i];
    }
    for (std::size_t i = 0; i < width; ++i) yr[i] /= z;
  }
  if (n->needs_grad) {
    n->backward_fn = [rows, width](Node& self) {
      Node& in = *self.inputs[0];
      if (!in.needs_grad) return;
      double* gi = in.grad_data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.data.data() + r * width;
        const double* gy = self.grad.data() + r * width;
        double dot = 0.0;
        for (std::size_t i = 0; i < width; ++i) dot += gy[i] * y[i];
        for (std::size_t i = 0; i < width; ++i)
          gi[r * width + i] += y[i] * (gy[i] - dot);
      }
    };
  }
  return finish(n);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (x.rank() != 2) fail("layer_norm: input must be rank 2");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (gain.rank() != 1 || gain.shape()[0] != cols || bias.rank() != 1 ||
      bias.shape()[0] != cols) {
    fail("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
         shape_str(bias.shape()) + " for input " + shape_str(x.shape()));
  }
  auto n = make_node(x.shape(), {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
                     "layer_norm");
  // Cache inv-std per row for the backward pass.
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* xd = x.data();
  const double* g = gain.data();
  const double* b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = xr[c] - mu;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    double* yr = n->data.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c)
      yr[c] = (xr[c] - mu) * is * g[c] + b[c];
  }
  if (n->needs_grad) {
    n->backward_fn = [rows, cols, inv_std](Node& self) {
      Node& ix = *self.inputs[0];
      Node& ig = *self.inputs[1];
      Node& ib = *self.inputs[2];
      const double* g = ig.data.data();
      const double inv_cols = 1.0 / static_cast<double>(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gy = self.grad.data() + r * cols;
        const double is = (*inv_std)[r];
        // Recover normalized input xhat from y = xhat*g + b.
        // Guard g==0 by recomputing xhat from x directly.
        const double* xr = ix.data.data() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
        mu *= inv_cols;
        if (ig.needs_grad) {
          double* gg = ig.grad_data();
          for (std::size_t c = 0; c < cols; ++c)
            gg[c] += gy[c] * (xr[c] - mu) * is;
        }
        if (ib.needs_grad) {
          double* gb = ib.grad_data();
          for (std::size_t c = 0; c < cols; ++c) gb[c] += gy[c];
        }
        if (ix.needs_grad) {
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const double xhat = (xr[c] - mu) * is;
            const double dxhat = gy[c] * g[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          double* gx = ix.grad_data();
          for (std::size_t c = 0; c < cols; ++c) {
            const double xhat = (xr[c] - mu) * is;
            const double dxhat = gy[c] * g[c];
            gx[c + r * cols] += is * (dxhat - inv_cols * sum_dxhat -
                                      xhat * inv_cols * sum_dxhat_xhat);
          }
        }
      }
    };
  }
  return finish(n);
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t stride) {
  if (x.rank() != 4 || w.rank() != 4) {
    fail("conv2d: input " + shape_str(x.shape()) + ", weight " +
         shape_str(w.shape()));
  }
  const std::size_t batch = x.shape()[0], ci = x.shape()[1], h = x.shape()[2],
                    wd = x.shape()[3];
  const std::size_t co = w.shape()[0], kci = w.shape()[1], kh = w.shape()[2],
                    kw = w.shape()[3];
  if (kci != ci || kh != kw) {
    fail("conv2d: weight " + shape_str(w.shape()) + " for input " +
         shape_str(x.shape()));
  }
  if (bias.rank() != 1 || bias.shape()[0] != co) {
    fail("conv2d: bias " + shape_str(bias.shape()));
  }
  if (kh > h || kw > wd) {
    fail("conv2d: kernel " + shape_str(w.shape()) + " larger than input " +
         shape_str(x.shape()));
  }
  if (stride == 0) fail("conv2d: stride must be >= 1");
  const std::size_t oh = (h - kh) / stride + 1, ow = (wd - kw) / stride + 1;
  auto n = make_node({batch, co, oh, ow},
                     {x.node_ptr(), w.node_ptr(), bias.node_ptr()}, "conv2d");
  const double* xd = x.data();
  const double* wdz = w.data();
  const double* bd = bias.data();
  auto xi = [=](std::size_t b2, std::size_t c, std::size_t y2, std::size_t x2) {
    return ((b2 * ci + c) * h + y2) * wd + x2;
  };
  auto wi = [=](std::size_t o, std::size_t c, std::size_t y2, std::size_t x2) {
    return ((o * ci + c) * kh + y2) * kw + x2;
  };
  auto oi = [=](std::size_t b2, std::size_t o, std::size_t y2, std::size_t x2) {
    return ((b2 * co + o) * oh + y2) * ow + x2;
  };
  for (std::size_t b2 = 0; b2 < batch; ++b2)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y2 = 0; y2 < oh; ++y2)
        for (std::size_t x2 = 0; x2 < ow; ++x2) {
          double acc = bd[o];
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t dy = 0; dy < kh; ++dy)
              for (std::size_t dx = 0; dx < kw; ++dx)
                acc += xd[xi(b2, c, y2 * stride + dy, x2 * stride + dx)] *
                       wdz[wi(o, c, dy, dx)];
          n->data[oi(b2, o, y2, x2)] = acc;
        }
  if (n->needs_grad) {
    n->backward_fn = [=](Node& self) {
      Node& ixn = *self.inputs[0];
      Node& iwn = *self.inputs[1];
      Node& ibn = *self.inputs[2];
      const double* gy = self.grad.data();
      double* gx = ixn.needs_grad ? ixn.grad_data() : nullptr;
      double* gw = iwn.needs_grad ? iwn.grad_data() : nullptr;
      double* gb = ibn.needs_grad ? ibn.grad_data() : nullptr;
      const double* xd = ixn.data.data();
      const double* wdz = iwn.data.data();
      for (std::size_t b2 = 0; b2 < batch; ++b2)
        for (std::size_t o = 0; o < co; ++o)
          for (std::size_t y2 = 0; y2 < oh; ++y2)
            for (std::size_t x2 = 0; x2 < ow; ++x2) {
              const double g = gy[oi(b2, o, y2, x2)];
              if (gb) gb[o] += g;
              for (std::size_t c = 0; c < ci; ++c)
                for (std::size_t dy = 0; dy < kh; ++dy)
                  for (std::size_t dx = 0; dx < kw; ++dx) {
                    const std::size_t yy = y2 * stride + dy,
                                      xx = x2 * stride + dx;
                    if (gx) gx[xi(b2, c, yy, xx)] += wdz[wi(o, c, dy, dx)] * g;
                    if (gw) gw[wi(o, c, dy, dx)] += xd[xi(b2, c, yy, xx)] * g;
                  }
            }
    };
  }
  return finish(n);
}

// ---------------------------------------------------------------------------
// capsule primitives
// ---------------------------------------------------------------------------

Tensor squash(const Tensor& a) {
  if (a.rank() < 1) fail("squash: needs at least rank 1");
  const std::size_t width = a.shape().back();
  const std::size_t rows = a.numel() / width;
  auto n = make_node(a.shape(), {a.node_ptr()}, "squash");
  const double* x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* s = x + r * width;
    double* v = n->data.data() + r * width;
    double n2 = 0.0;
    for (std::size_t i = 0; i < width; ++i) n2 += s[i] * s[i];
    const double norm = std::sqrt(n2);
    // v = s * |s| / (1 + |s|^2); exactly zero input maps to zero.
    const double f = norm > 0.0 ? norm / (1.0 + n2) : 0.0;
    for (std::size_t i = 0; i < width; ++i) v[i] = s[i] * f;
  }
  if (n->needs_grad) {
    n->backward_fn = [rows, width](Node& self) {
      Node& in = *self.inputs[0];
      if (!in.needs_grad) return;
      double* gi = in.grad_data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* s = in.data.data() + r * width;
        const double* gv = self.grad.data() + r * width;
        double n2 = 0.0, dot = 0.0;
        for (std::size_t i = 0; i < width; ++i) {
          n2 += s[i] * s[i];
          dot += gv[i] * s[i];
        }
        const double norm = std::sqrt(n2);
        if (norm <= 0.0) continue;  // dv/ds -> 0 at the origin
        const double f = norm / (1.0 + n2);
        // d f(|s|)/d s_b = s_b * (1 - n2) / (|s| (1+n2)^2)
        const double df = (1.0 - n2) / (norm * (1.0 + n2) * (1.0 + n2));
        for (std::size_t b = 0; b < width; ++b)
          gi[r * width + b] += gv[b] * f + dot * s[b] * df;
      }
    };
  }
  return finish(n);
}

Tensor l2_norm_last(const Tensor& a) {
  if (a.rank() < 2) fail("l2_norm_last: needs at least rank 2");
  const std::size_t width = a.shape().back();
  const std::size_t rows = a.numel() / width;
  Shape out(a.shape().begin(), a.shape().end() - 1);
  auto n = make_node(std::move(out), {a.node_ptr()}, "l2_norm_last");
  const double* x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < width; ++i) {
      const double v = x[r * width + i];
      acc += v * v;
    }
    n->data[r] = std::sqrt(acc);
  }
  if (n->needs_grad) {
    n->backward_fn = [rows, width](Node& self) {
      Node& in = *self.inputs[0];
      if (!in.needs_grad) return;
      double* gi = in.grad_data();
      const double* x = in.data.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double norm = self.data[r];
        if (norm <= 0.0) continue;
        const double g = self.grad[r] / norm;
        for (std::size_t i = 0; i < width; ++i)
          gi[r * width + i] += g * x[r * width + i];
      }
    };
  }
  return finish(n);
}

Tensor form_capsules(const Tensor& maps, std::size_t groups) {
  if (maps.rank() != 4) fail("form_capsules: input " + shape_str(maps.shape()));
  const std::size_t batch = maps.shape()[0], ch = maps.shape()[1],
                    side = maps.shape()[2];
  if (maps.shape()[3] != side) {
    fail("form_capsules: spatial dims must be square, got " +
         shape_str(maps.shape()));
  }
  if (groups == 0 || ch % groups != 0) {
    fail("form_capsules: " + std::to_string(ch) + " channels not divisible by " +
         std::to_string(groups) + " groups");
  }
  const std::size_t dim = ch / groups;
  const std::size_t caps = groups * side * side;
  auto n = make_node({batch, caps, dim}, {maps.node_ptr()}, "form_capsules");
  const double* x = maps.data();
  const std::size_t plane = side * side;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t j = 0; j < dim; ++j) {
          const std::size_t a = g * plane + p;
          n->data[(b * caps + a) * dim + j] =
              x[(b * ch + g * dim + j) * plane + p];
        }
  if (n->needs_grad) {
    n->backward_fn = [batch, ch, plane, groups, dim, caps](Node& self) {
      Node& in = *self.inputs[0];
      if (!in.needs_grad) return;
      double* gi = in.grad_data();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t p = 0; p < plane; ++p)
            for (std::size_t j = 0; j < dim; ++j) {
              const std::size_t a = g * plane + p;
              gi[(b * ch + g * dim + j) * plane + p] +=
                  self.grad[(b * caps + a) * dim + j];
            }
    };
  }
  return finish(n);
}

Tensor caps_predict(const Tensor& u, const Tensor& w) {
  if (u.rank() != 3 || w.rank() != 4 || u.shape()[1] != w.shape()[0] ||
      u.shape()[2] != w.shape()[2]) {
    fail("caps_predict: u " + shape_str(u.shape()) + ", w " +
         shape_str(w.shape()));
  }
  const std::size_t batch = u.shape()[0], caps = u.shape()[1],
                    dim = u.shape()[2];
  const std::size_t k = w.shape()[1], hd = w.shape()[3];
  auto n = make_node({batch, caps, k, hd}, {u.node_ptr(), w.node_ptr()},
                     "caps_predict");
  const double* ud = u.data();
  const double* wd = w.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t a = 0; a < caps; ++a)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t h = 0; h < hd; ++h) {
          double acc = 0.0;
          for (std::size_t dd = 0; dd < dim; ++dd)
            acc += ud[(b * caps + a) * dim + dd] *
                   wd[((a * k + j) * dim + dd) * hd + h];
          n->data[((b * caps + a) * k + j) * hd + h] = acc;
        }
  if (n->needs_grad) {
    n->backward_fn = [batch, caps, dim, k, hd](Node& self) {
      Node& iu = *self.inputs[0];
      Node& iw = *self.inputs[1];
      const double* ud = iu.data.data();
      const double* wd = iw.data.data();
      double* gu = iu.needs_grad ? iu.grad_data() : nullptr;
      double* gw = iw.needs_grad ? iw.grad_data() : nullptr;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t a = 0; a < caps; ++a)
          for (std::size_t j = 0; j < k; ++j)
            for (std::size_t h = 0; h < hd; ++h) {
              const double g = self.grad[((b * caps + a) * k + j) * hd + h];
              for (std::size_t dd = 0; dd < dim; ++dd) {
                if (gu)
                  gu[(b * caps + a) * dim + dd] +=
                      wd[((a * k + j) * dim + dd) * hd + h] * g;
                if (gw)
                  gw[((a * k + j) * dim + dd) * hd + h] +=
                      ud[(b * caps + a) * dim + dd] * g;
              }
            }
    };
  }
  return finish(n);
}

Tensor routing_mix(const Tensor& c, const Tensor& u_hat) {
  if (c.rank() != 3 || u_hat.rank() != 4 || c.shape()[0] != u_hat.shape()[0] ||
      c.shape()[1] != u_hat.shape()[1] || c.shape()[2] != u_hat.shape()[2]) {
    fail("routing_mix: c " + shape_str(c.shape()) + ", u_hat " +
         shape_str(u_hat.shape()));
  }
  const std::size_t batch = c.shape()[0], caps = c.shape()[1],
                    k = c.shape()[2], hd = u_hat.shape()[3];
  auto n = make_node({batch, k, hd}, {c.node_ptr(), u_hat.node_ptr()},
                     "routing_mix");
  const double* cd = c.data();
  const double* ud = u_hat.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t a = 0; a < caps; ++a)
      for (std::size_t j = 0; j < k; ++j) {
        const double cc = cd[(b * caps + a) * k + j];
        for (std::size_t h = 0; h < hd; ++h)
          n->data[(b * k + j) * hd + h] +=
              cc * ud[((b * caps + a) * k + j) * hd + h];
      }
  if (n->needs_grad) {
    n->backward_fn = [batch, caps, k, hd](Node& self) {
      Node& ic = *self.inputs[0];
      Node& iu = *self.inputs[1];
      const double* cd = ic.data.data();
      const double* ud = iu.data.data();
      double* gc = ic.needs_grad ? ic.grad_data() : nullptr;
      double* gu = iu.needs_grad ? iu.grad_data() : nullptr;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t a = 0; a < caps; ++a)
          for (std::size_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (std::size_t h = 0; h < hd; ++h) {
              const double g = self.grad[(b * k + j) * hd + h];
              const std::size_t ui = ((b * caps + a) * k + j) * hd + h;
              if (gu) gu[ui] += cd[(b * caps + a) * k + j] * g;
              acc += ud[ui] * g;
            }
            if (gc) gc[(b * caps + a) * k + j] += acc;
          }
    };
  }
  return finish(n);
}

Tensor routing_agreement(const Tensor& u_hat, const Tensor& v) {
  if (u_hat.rank() != 4 || v.rank() != 3 ||
      u_hat.shape()[0] != v.shape()[0] || u_hat.shape()[2] != v.shape()[1] ||
      u_hat.shape()[3] != v.shape()[2]) {
    fail("routing_agreement: u_hat " + shape_str(u_hat.shape()) + ", v " +
         shape_str(v.shape()));
  }
  const std::size_t batch = u_hat.shape()[0], caps = u_hat.shape()[1],
                    k = u_hat.shape()[2], hd = u_hat.shape()[3];
  auto n = make_node({batch, caps, k}, {u_hat.node_ptr(), v.node_ptr()},
                     "routing_agreement");
  const double* ud = u_hat.data();
  const double* vd = v.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t a = 0; a < caps; ++a)
      for (std::size_t j = 0; j < k; ++j) {
        double acc = 0.0;
        for (std::size_t h = 0; h < hd; ++h)
          acc += ud[((b * caps + a) * k + j) * hd + h] *
                 vd[(b * k + j) * hd + h];
        n->data[(b * caps + a) * k + j] = acc;
      }
  if (n->needs_grad) {
    n->backward_fn = [batch, caps, k, hd](Node& self) {
      Node& iu = *self.inputs[0];
      Node& iv = *self.inputs[1];
      const double* ud = iu.data.data();
      const double* vd = iv.data.data();
      double* gu = iu.needs_grad ? iu.grad_data() : nullptr;
      double* gv = iv.needs_grad ? iv.grad_data() : nullptr;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t a = 0; a < caps; ++a)
          for (std::size_t j = 0; j < k; ++j) {
            const double g = self.grad[(b * caps + a) * k + j];
            for (std::size_t h = 0; h < hd; ++h) {
              const std::size_t ui = ((b * caps + a) * k + j) * hd + h;
              const std::size_t vi = (b * k + j) * hd + h;
              if (gu) gu[ui] += vd[vi] * g;
              if (gv) gv[vi] += ud[ui] * g;
            }
          }
    };
  }
  return finish(n);
}

Tensor gram(const Tensor& u) {
  if (u.rank() != 2) fail("gram: input " + shape_str(u.shape()));
  const std::size_t rows = u.shape()[0], dim = u.shape()[1];
  auto n = make_node({dim, dim}, {u.node_ptr()}, "gram");
  mm_tn(u.data(), u.data(), n->data.data(), static_cast<int>(dim),
        static_cast<int>(rows), static_cast<int>(dim), false);
  if (n->needs_grad) {
    n->backward_fn = [rows, dim](Node& self) {
      Node& in = *self.inputs[0];
      if (!in.needs_grad) return;
      // dU = U (G~ + G~^T)
      std::vector<double> sym(dim * dim);
      for (std::size_t i = 0; i < dim; ++i)
        for (std::size_t j = 0; j < dim; ++j)
          sym[i * dim + j] = self.grad[i * dim + j] + self.grad[j * dim + i];
      mm_nn(in.data.data(), sym.data(), in.grad_data(),
            static_cast<int>(rows), static_cast<int>(dim),
            static_cast<int>(dim), true);
    };
  }
  return finish(n);
}

Tensor frobenius_normalize(const Tensor& g) {
  auto n = make_node(g.shape(), {g.node_ptr()}, "frobenius_normalize");
  const double* x = g.data();
  double n2 = 0.0;
  for (std::size_t i = 0; i < g.numel(); ++i) n2 += x[i] * x[i];
  const double norm = std::sqrt(n2);
  const bool degenerate = norm < 1e-30;
  if (degenerate) {
    Diagnostics::zero_gram_guards.fetch_add(1, std::memory_order_relaxed);
    n->data = g.values();
  } else {
    for (std::size_t i = 0; i < g.numel(); ++i) n->data[i] = x[i] / norm;
  }
  if (n->needs_grad) {
    n->backward_fn = [norm, degenerate](Node& self) {
      Node& in = *self.inputs[0];
      if (!in.needs_grad) return;
      double* gi = in.grad_data();
      if (degenerate) {
        for (std::size_t i = 0; i < self.data.size(); ++i)
          gi[i] += self.grad[i];
        return;
      }
      double dot = 0.0;
      for (std::size_t i = 0; i < self.data.size(); ++i)
        dot += self.grad[i] * self.data[i];
      for (std::size_t i = 0; i < self.data.size(); ++i)
        gi[i] += (self.grad[i] - dot * self.data[i]) / norm;
    };
  }
  return finish(n);
}

Tensor select_batch(const Tensor& t, std::size_t index) {
  if (t.rank() < 2) fail("select_batch: input " + shape_str(t.shape()));
  const std::size_t batch = t.shape()[0];
  if (index >= batch) {
    fail("select_batch: index " + std::to_string(index) + " out of " +
         std::to_string(batch));
  }
  Shape out(t.shape().begin() + 1, t.shape().end());
  const std::size_t width = shape_numel(out);
  auto n = make_node(std::move(out), {t.node_ptr()}, "select_batch");
  const double* x = t.data() + index * width;
  std::copy(x, x + width, n->data.begin());
  if (n->needs_grad) {
    n->backward_fn = [index, width](Node& self) {
      Node& in = *self.inputs[0];
      if (!in.needs_grad) return;
      double* gi = in.grad_data();
      for (std::size_t i = 0; i < width; ++i)
        gi[index * width + i] += self.grad[i];
    };
  }
  return finish(n);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

std::size_t backward(const Tensor& loss) {
  if (!loss.defined()) fail("backward: undefined tensor");
  if (loss.numel() != 1) {
    fail("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  // Iterative post-order DFS; visitation order is fixed by construction order
  // of the inputs, so accumulation is deterministic.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode* child = node->inputs[next].get();
      ++next;
      if (child->needs_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->grad_data()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  return order.size();
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

std::vector<Tensor> lstm_forward_steps(const std::vector<Tensor>& x_steps,
                                       const LstmParams& p,
                                       std::size_t hidden_units) {
  if (x_steps.empty()) fail("lstm_forward_steps: empty sequence");
  const std::size_t m = hidden_units;
  if (p.w_input.rank() != 2 || p.w_input.shape()[1] != 4 * m ||
      p.w_hidden.rank() != 2 || p.w_hidden.shape()[0] != m ||
      p.w_hidden.shape()[1] != 4 * m || p.bias.shape()[0] != 4 * m) {
    fail("lstm_forward_steps: parameter shapes inconsistent with M=" +
         std::to_string(m));
  }
  const std::size_t batch = x_steps[0].shape()[0];
  Tensor h = Tensor::zeros({batch, m});
  Tensor c = Tensor::zeros({batch, m});
  std::vector<Tensor> outputs;
  outputs.reserve(x_steps.size());
  for (const Tensor& x : x_steps) {
    Tensor z = add_bias_rows(add(matmul(x, p.w_input), matmul(h, p.w_hidden)),
                             p.bias);
    Tensor gi = sigmoid(slice_cols(z, 0, m));
    Tensor gf = sigmoid(slice_cols(z, m, 2 * m));
    Tensor gg = tanh(slice_cols(z, 2 * m, 3 * m));
    Tensor go = sigmoid(slice_cols(z, 3 * m, 4 * m));
    c = add(mul(gf, c), mul(gi, gg));
    h = mul(go, tanh(c));
    outputs.push_back(h);
  }
  return outputs;
}

Tensor lstm_forward(const Tensor& seq, const LstmParams& p,
                    std::size_t hidden_units) {
  if (seq.rank() != 2) fail("lstm_forward: sequence " + shape_str(seq.shape()));
  const std::size_t steps = seq.shape()[0], feat = seq.shape()[1];
  Tensor flat = reshape(seq, {1, steps * feat});
  std::vector<Tensor> xs;
  xs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t)
    xs.push_back(slice_cols(flat, t * feat, (t + 1) * feat));
  std::vector<Tensor> hs = lstm_forward_steps(xs, p, hidden_units);
  return reshape(concat_cols(hs), {steps, hidden_units});
}

// ---------------------------------------------------------------------------
// RNG
// ---------------------------------------------------------------------------

double Rng::uniform(double lo, double hi) {
  // 53-bit mantissa-uniform in [0,1).
  const double u = static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform(0.0, 1.0);
  } while (u1 <= 0.0);
  const double u2 = uniform(0.0, 1.0);
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

Tensor uniform_init(Shape shape, double bound, Rng& rng, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = rng.uniform(-bound, bound);
  return Tensor::from_data(std::move(shape), std::move(values), requires_grad);
}

// ---------------------------------------------------------------------------
// diagnostics
// ---------------------------------------------------------------------------

std::atomic<std::uint64_t> Diagnostics::floored_power_values{0};
std::atomic<std::uint64_t> Diagnostics::floored_variance_windows{0};
std::atomic<std::uint64_t> Diagnostics::zero_gram_guards{0};
std::atomic<std::uint64_t> Diagnostics::skipped_optimizer_steps{0};
std::atomic<std::uint64_t> Diagnostics::degenerate_pcc{0};
std::atomic<std::uint64_t> Diagnostics::fraction_missing_class{0};

void Diagnostics::reset() {
  floored_power_values = 0;
  floored_variance_windows = 0;
  zero_gram_guards = 0;
  skipped_optimizer_steps = 0;
  degenerate_pcc = 0;
  fraction_missing_class = 0;
}

}  // namespace capskd
