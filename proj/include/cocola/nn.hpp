#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cocola/rng.hpp"

namespace cocola {
namespace nn {

// Dense row-major double tensor. Shapes are small and known at
// construction; all model math runs in double so gradient checks are clean.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor randn(std::vector<int> s, Rng& rng, double stddev);
  static Tensor identity(int n);

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }
  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }
  void fill(double v);
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
};

// y += a * x  (shapes must match)
void axpy(double a, const Tensor& x, Tensor& y);

// --- Convolution (stride 1, odd kernel, "same" zero padding) ---------------
// x: (Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout) -> y: (Cout, H, W)
// 1-D convolutions use H == 1 and kh == 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);
void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                     Tensor& dx, Tensor& dw, Tensor& db,
                     bool want_dx = true);

// --- Pooling ----------------------------------------------------------------
// 2x2 average pooling with stride 2; odd trailing rows/cols are dropped.
Tensor avgpool2(const Tensor& x);
Tensor avgpool2_backward(const Tensor& x, const Tensor& dy);

// Global average over the spatial dims: (C, H, W) -> (C)
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& x, const Tensor& dy);

// --- Affine -----------------------------------------------------------------
// w: (out, in), b: (out), x: (in) -> y: (out)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                     Tensor& dx, Tensor& dw, Tensor& db, bool want_dx = true);

// --- Elementwise ------------------------------------------------------------
Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& dy);  // x is pre-activation

// Inverted dropout; mask entries are 0 or 1/(1-rate).
Tensor dropout_mask(const std::vector<int>& shape, double rate, Rng& rng);
Tensor hadamard(const Tensor& a, const Tensor& b);

// --- Optimizer ---------------------------------------------------------------
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Applies one update. Parameter order must be stable across calls.
  void step(const std::vector<Tensor*>& params, const std::vector<Tensor*>& grads);

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// FNV-1a over the raw bytes of every tensor, in order.
std::uint64_t parameter_hash(const std::vector<const Tensor*>& params);

}  // namespace nn
}  // namespace cocola
