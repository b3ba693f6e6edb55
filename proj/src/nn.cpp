#include "cocola/nn.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace cocola {
namespace nn {

namespace {
using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                        Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                                   Eigen::Dynamic, Eigen::RowMajor>>;

std::int64_t numel(const std::vector<int>& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
  data.assign(static_cast<std::size_t>(numel(shape)), 0.0);
}

Tensor Tensor::randn(std::vector<int> s, Rng& rng, double stddev) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = rng.normal(0.0, stddev);
  return t;
}

Tensor Tensor::identity(int n) {
  Tensor t({n, n});
  for (int i = 0; i < n; ++i) t.data[static_cast<std::size_t>(i) * n + i] = 1.0;
  return t;
}

void Tensor::fill(double v) {
  for (auto& x : data) x = v;
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

void axpy(double a, const Tensor& x, Tensor& y) {
  if (!x.same_shape(y)) throw std::runtime_error("axpy: shape mismatch");
  for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] += a * x.data[i];
}

namespace {

// im2col for "same" padding, stride 1: (Cin*kh*kw) x (H*W)
void im2col(const Tensor& x, int kh, int kw, std::vector<double>& col) {
  const int c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  const std::size_t cols = static_cast<std::size_t>(h) * w;
  col.assign(static_cast<std::size_t>(c_in) * kh * kw * cols, 0.0);
  std::size_t row = 0;
  for (int c = 0; c < c_in; ++c) {
    const double* xc = x.ptr() + static_cast<std::size_t>(c) * h * w;
    for (int di = 0; di < kh; ++di) {
      for (int dj = 0; dj < kw; ++dj, ++row) {
        double* dst = col.data() + row * cols;
        for (int i = 0; i < h; ++i) {
          const int si = i + di - ph;
          if (si < 0 || si >= h) continue;
          const double* src = xc + static_cast<std::size_t>(si) * w;
          const int j_lo = std::max(0, pw - dj);
          const int j_hi = std::min(w, w + pw - dj);
          for (int j = j_lo; j < j_hi; ++j)
            dst[static_cast<std::size_t>(i) * w + j] = src[j + dj - pw];
        }
      }
    }
  }
}

void col2im(const std::vector<double>& col, int c_in, int h, int w, int kh,
            int kw, Tensor& dx) {
  const int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  const std::size_t cols = static_cast<std::size_t>(h) * w;
  std::size_t row = 0;
  for (int c = 0; c < c_in; ++c) {
    double* xc = dx.ptr() + static_cast<std::size_t>(c) * h * w;
    for (int di = 0; di < kh; ++di) {
      for (int dj = 0; dj < kw; ++dj, ++row) {
        const double* src = col.data() + row * cols;
        for (int i = 0; i < h; ++i) {
          const int si = i + di - ph;
          if (si < 0 || si >= h) continue;
          double* dst = xc + static_cast<std::size_t>(si) * w;
          const int j_lo = std::max(0, pw - dj);
          const int j_hi = std::min(w, w + pw - dj);
          for (int j = j_lo; j < j_hi; ++j)
            dst[j + dj - pw] += src[static_cast<std::size_t>(i) * w + j];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() != 3 || w.ndim() != 4)
    throw std::runtime_error("conv2d: expected x (C,H,W) and w (Co,Ci,kh,kw)");
  const int c_in = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int c_out = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != c_in) throw std::runtime_error("conv2d: channel mismatch");
  if (kh % 2 == 0 || kw % 2 == 0) throw std::runtime_error("conv2d: kernel must be odd");
  if (b.size() != c_out) throw std::runtime_error("conv2d: bias size mismatch");

  std::vector<double> col;
  im2col(x, kh, kw, col);
  const std::int64_t k = static_cast<std::int64_t>(c_in) * kh * kw;
  const std::int64_t cols = static_cast<std::int64_t>(h) * wd;

  Tensor y({c_out, h, wd});
  ConstMatMap wm(w.ptr(), c_out, k);
  ConstMatMap cm(col.data(), k, cols);
  MatMap ym(y.ptr(), c_out, cols);
  ym.noalias() = wm * cm;
  for (int co = 0; co < c_out; ++co)
    ym.row(co).array() += b.data[static_cast<std::size_t>(co)];
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                     Tensor& dx, Tensor& dw, Tensor& db, bool want_dx) {
  const int c_in = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int c_out = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::int64_t k = static_cast<std::int64_t>(c_in) * kh * kw;
  const std::int64_t cols = static_cast<std::int64_t>(h) * wd;

  std::vector<double> col;
  im2col(x, kh, kw, col);

  if (!dw.same_shape(w)) dw = Tensor(w.shape);
  if (db.size() != c_out) db = Tensor({c_out});

  ConstMatMap dym(dy.ptr(), c_out, cols);
  ConstMatMap cm(col.data(), k, cols);
  MatMap dwm(dw.ptr(), c_out, k);
  dwm.noalias() += dym * cm.transpose();
  for (int co = 0; co < c_out; ++co)
    db.data[static_cast<std::size_t>(co)] += dym.row(co).sum();

  if (want_dx) {
    ConstMatMap wm(w.ptr(), c_out, k);
    std::vector<double> dcol(static_cast<std::size_t>(k) * cols);
    MatMap dcm(dcol.data(), k, cols);
    dcm.noalias() = wm.transpose() * dym;
    if (!dx.same_shape(x)) dx = Tensor(x.shape);
    col2im(dcol, c_in, h, wd, kh, kw, dx);
  }
}

Tensor avgpool2(const Tensor& x) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = h / 2, wo = w / 2;
  if (ho == 0 || wo == 0) throw std::runtime_error("avgpool2: input too small");
  Tensor y({c, ho, wo});
  for (int ch = 0; ch < c; ++ch) {
    const double* xs = x.ptr() + static_cast<std::size_t>(ch) * h * w;
    double* ys = y.ptr() + static_cast<std::size_t>(ch) * ho * wo;
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j)
        ys[static_cast<std::size_t>(i) * wo + j] =
            0.25 * (xs[static_cast<std::size_t>(2 * i) * w + 2 * j] +
                    xs[static_cast<std::size_t>(2 * i) * w + 2 * j + 1] +
                    xs[static_cast<std::size_t>(2 * i + 1) * w + 2 * j] +
                    xs[static_cast<std::size_t>(2 * i + 1) * w + 2 * j + 1]);
  }
  return y;
}

Tensor avgpool2_backward(const Tensor& x, const Tensor& dy) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = h / 2, wo = w / 2;
  Tensor dx(x.shape);
  for (int ch = 0; ch < c; ++ch) {
    const double* ds = dy.ptr() + static_cast<std::size_t>(ch) * ho * wo;
    double* xs = dx.ptr() + static_cast<std::size_t>(ch) * h * w;
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        const double g = 0.25 * ds[static_cast<std::size_t>(i) * wo + j];
        xs[static_cast<std::size_t>(2 * i) * w + 2 * j] += g;
        xs[static_cast<std::size_t>(2 * i) * w + 2 * j + 1] += g;
        xs[static_cast<std::size_t>(2 * i + 1) * w + 2 * j] += g;
        xs[static_cast<std::size_t>(2 * i + 1) * w + 2 * j + 1] += g;
      }
  }
  return dx;
}

Tensor global_avg_pool(const Tensor& x) {
  const int c = x.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  Tensor y({c});
  for (int ch = 0; ch < c; ++ch) {
    const double* xs = x.ptr() + static_cast<std::size_t>(ch) * hw;
    double acc = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) acc += xs[i];
    y.data[static_cast<std::size_t>(ch)] = acc / static_cast<double>(hw);
  }
  return y;
}

Tensor global_avg_pool_backward(const Tensor& x, const Tensor& dy) {
  const int c = x.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  Tensor dx(x.shape);
  for (int ch = 0; ch < c; ++ch) {
    const double g = dy.data[static_cast<std::size_t>(ch)] / static_cast<double>(hw);
    double* xs = dx.ptr() + static_cast<std::size_t>(ch) * hw;
    for (std::int64_t i = 0; i < hw; ++i) xs[i] = g;
  }
  return dx;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int out = w.dim(0), in = w.dim(1);
  if (x.size() != in) throw std::runtime_error("linear: input size mismatch");
  if (b.size() != out) throw std::runtime_error("linear: bias size mismatch");
  Tensor y({out});
  ConstMatMap wm(w.ptr(), out, in);
  Eigen::Map<const Eigen::VectorXd> xv(x.ptr(), in);
  Eigen::Map<Eigen::VectorXd> yv(y.ptr(), out);
  yv.noalias() = wm * xv;
  for (int i = 0; i < out; ++i) yv(i) += b.data[static_cast<std::size_t>(i)];
  return y;
}

void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                     Tensor& dx, Tensor& dw, Tensor& db, bool want_dx) {
  const int out = w.dim(0), in = w.dim(1);
  if (!dw.same_shape(w)) dw = Tensor(w.shape);
  if (db.size() != out) db = Tensor({out});
  MatMap dwm(dw.ptr(), out, in);
  Eigen::Map<const Eigen::VectorXd> xv(x.ptr(), in);
  Eigen::Map<const Eigen::VectorXd> dyv(dy.ptr(), out);
  dwm.noalias() += dyv * xv.transpose();
  for (int i = 0; i < out; ++i) db.data[static_cast<std::size_t>(i)] += dyv(i);
  if (want_dx) {
    if (dx.size() != in) dx = Tensor({in});
    ConstMatMap wm(w.ptr(), out, in);
    Eigen::Map<Eigen::VectorXd> dxv(dx.ptr(), in);
    dxv.noalias() = wm.transpose() * dyv;
  }
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx = dy;
  for (std::size_t i = 0; i < x.data.size(); ++i)
    if (x.data[i] <= 0.0) dx.data[i] = 0.0;
  return dx;
}

Tensor dropout_mask(const std::vector<int>& shape, double rate, Rng& rng) {
  Tensor m(shape);
  if (rate <= 0.0) {
    m.fill(1.0);
    return m;
  }
  const double keep = 1.0 - rate;
  const double scale = 1.0 / keep;
  for (auto& v : m.data) v = rng.uniform_real() < keep ? scale : 0.0;
  return m;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::runtime_error("hadamard: shape mismatch");
  Tensor y = a;
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] *= b.data[i];
  return y;
}

void Adam::step(const std::vector<Tensor*>& params,
                const std::vector<Tensor*>& grads) {
  if (params.size() != grads.size())
    throw std::runtime_error("adam: params/grads size mismatch");
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i]->data.size(), 0.0);
      v_[i].assign(params[i]->data.size(), 0.0);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->data;
    const auto& g = grads[i]->data;
    if (p.size() != g.size() || p.size() != m_[i].size())
      throw std::runtime_error("adam: tensor size changed between steps");
    for (std::size_t j = 0; j < p.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      p[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

std::uint64_t parameter_hash(const std::vector<const Tensor*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto* t : params)
    h = fnv1a64(t->data.data(), t->data.size() * sizeof(double), h);
  return h;
}

}  // namespace nn
}  // namespace cocola
