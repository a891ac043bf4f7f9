#pragma once

// Dense rank-1..4 arrays plus the handful of numerical kernels the attention
// and segmentation modules are built from. Row-major, last axis fastest.
// Every reduction runs in a fixed ascending order so results are
// bit-reproducible; see parallel_for for the threading contract.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "blockattn/common.hpp"

namespace blockattn {

template <class T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<std::size_t> dims, T fill = T(0)) : dims_(std::move(dims)) {
    check_shape(!dims_.empty() && dims_.size() <= 4, "tensor rank must be 1..4");
    std::size_t n = 1;
    for (const std::size_t d : dims_) {
      check_shape(d > 0, "tensor dims must be positive");
      n *= d;
    }
    data_.assign(n, fill);
  }

  static TensorT zeros(std::vector<std::size_t> dims) { return TensorT(std::move(dims)); }

  static TensorT from_rows(const std::vector<std::vector<T>>& rows) {
    check_shape(!rows.empty() && !rows.front().empty(), "from_rows needs a non-empty matrix");
    TensorT out({rows.size(), rows.front().size()});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      check_shape(rows[i].size() == rows.front().size(), "ragged rows");
      for (std::size_t j = 0; j < rows[i].size(); ++j) out(i, j) = rows[i][j];
    }
    return out;
  }

  std::size_t rank() const { return dims_.size(); }
  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  bool same_dims(const TensorT& other) const { return dims_ == other.dims_; }

  T& operator()(std::size_t i) { return data_[i]; }
  T operator()(std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * dims_[1] + j]; }
  T operator()(std::size_t i, std::size_t j) const { return data_[i * dims_[1] + j]; }

  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  T operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }

  T& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
  }
  T operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  std::vector<std::size_t> dims_;
  std::vector<T> data_;
};

using Tensor = TensorT<double>;

template <class T>
struct FeatureMapT {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  TensorT<T> values;  // [C,H,W]

  FeatureMapT() = default;

  FeatureMapT(std::size_t c, std::size_t h, std::size_t w)
      : channels(c), height(h), width(w), values({c, h, w}) {
    check_shape(c >= 1 && h >= 1 && w >= 1, "feature map dims must be >= 1");
  }

  explicit FeatureMapT(TensorT<T> t) {
    check_shape(t.rank() == 3, "feature map tensor must be rank 3 [C,H,W]");
    channels = t.dim(0);
    height = t.dim(1);
    width = t.dim(2);
    values = std::move(t);
  }

  T& at(std::size_t c, std::size_t y, std::size_t x) {
    return values.data()[(c * height + y) * width + x];
  }
  T at(std::size_t c, std::size_t y, std::size_t x) const {
    return values.data()[(c * height + y) * width + x];
  }

  std::size_t pixels() const { return height * width; }
  bool same_dims(const FeatureMapT& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

using FeatureMap = FeatureMapT<double>;

// ---------------------------------------------------------------------------
// matmul: c[i][j] = sum_k a[i][k] b[k][j], k ascending per output element.
// ---------------------------------------------------------------------------

template <class T>
inline TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  check_shape(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 tensors");
  check_shape(a.dim(1) == b.dim(0), "matmul inner dims disagree: " + std::to_string(a.dim(1)) +
                                        " vs " + std::to_string(b.dim(0)));
  const std::size_t m = a.dim(0), kk = a.dim(1), n = b.dim(0) ? b.dim(1) : 0;
  TensorT<T> c({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  parallel_for(static_cast<std::int64_t>(m), [&](std::int64_t i) {
    T* crow = pc + static_cast<std::size_t>(i) * n;
    const T* arow = pa + static_cast<std::size_t>(i) * kk;
    for (std::size_t k = 0; k < kk; ++k) {
      const T aik = arow[k];
      const T* brow = pb + k * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  });
  return c;
}

template <class T>
inline TensorT<T> transpose(const TensorT<T>& a) {
  check_shape(a.rank() == 2, "transpose expects a rank-2 tensor");
  TensorT<T> out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out(j, i) = a(i, j);
  return out;
}

// Per-row softmax with max subtraction; rows sum to 1 within 1e-12 in f64.
template <class T>
inline TensorT<T> softmax_rows(const TensorT<T>& a) {
  check_shape(a.rank() == 2, "softmax_rows expects a rank-2 tensor");
  const std::size_t m = a.dim(0), n = a.dim(1);
  TensorT<T> out({m, n});
  const T* pa = a.data();
  T* po = out.data();
  parallel_for(static_cast<std::int64_t>(m), [&](std::int64_t i) {
    const T* row = pa + static_cast<std::size_t>(i) * n;
    T* orow = po + static_cast<std::size_t>(i) * n;
    T mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    const T inv = T(1) / denom;
    for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
  });
  return out;
}

// 1x1 convolution: out[c0,p] = (sum_c w[c0,c] x[c,p]) + bias[c0].
// The sum starts at zero and the bias is added last, matching the
// reshape-to-matmul formulation term for term.
template <class T>
inline FeatureMapT<T> conv1x1(const FeatureMapT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  check_shape(w.rank() == 2 && w.dim(1) == x.channels, "conv1x1 weight inner dim != channels");
  check_shape(b.rank() == 1 && b.dim(0) == w.dim(0), "conv1x1 bias dim != out channels");
  const std::size_t c_out = w.dim(0), c_in = x.channels, hw = x.pixels();
  FeatureMapT<T> out(c_out, x.height, x.width);
  const T* px = x.values.data();
  const T* pw = w.data();
  const T* pb = b.data();
  T* po = out.values.data();
  parallel_for(static_cast<std::int64_t>(c_out), [&](std::int64_t co) {
    T* orow = po + static_cast<std::size_t>(co) * hw;
    const T* wrow = pw + static_cast<std::size_t>(co) * c_in;
    for (std::size_t c = 0; c < c_in; ++c) {
      const T wv = wrow[c];
      const T* xrow = px + c * hw;
      for (std::size_t p = 0; p < hw; ++p) orow[p] += wv * xrow[p];
    }
    const T bias = pb[co];
    for (std::size_t p = 0; p < hw; ++p) orow[p] += bias;
  });
  return out;
}

// 3x3 convolution, zero padding 1, stride 1. w is [C_out, C_in, 3, 3].
template <class T>
inline FeatureMapT<T> conv3x3(const FeatureMapT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  check_shape(w.rank() == 4 && w.dim(2) == 3 && w.dim(3) == 3, "conv3x3 weight must be [Co,Ci,3,3]");
  check_shape(w.dim(1) == x.channels, "conv3x3 weight inner dim != channels");
  check_shape(b.rank() == 1 && b.dim(0) == w.dim(0), "conv3x3 bias dim != out channels");
  const std::size_t c_out = w.dim(0), c_in = x.channels;
  const std::size_t h = x.height, wd = x.width;
  FeatureMapT<T> out(c_out, h, wd);
  const T* px = x.values.data();
  const T* pw = w.data();
  T* po = out.values.data();
  parallel_for(static_cast<std::int64_t>(c_out), [&](std::int64_t co) {
    T* oc = po + static_cast<std::size_t>(co) * h * wd;
    for (std::size_t c = 0; c < c_in; ++c) {
      const T* xc = px + c * h * wd;
      const T* wk = pw + (static_cast<std::size_t>(co) * c_in + c) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const T wv = wk[ky * 3 + kx];
          if (wv == T(0)) continue;
          const int dy = ky - 1, dx = kx - 1;
          const std::size_t y0 = static_cast<std::size_t>(std::max(0, -dy));
          const std::size_t y1 = static_cast<std::size_t>(static_cast<int>(h) - std::max(0, dy));
          const std::size_t x0 = static_cast<std::size_t>(std::max(0, -dx));
          const std::size_t x1 = static_cast<std::size_t>(static_cast<int>(wd) - std::max(0, dx));
          for (std::size_t y = y0; y < y1; ++y) {
            T* orow = oc + y * wd;
            const T* xrow = xc + (y + static_cast<std::size_t>(dy)) * wd + static_cast<std::size_t>(dx);
            for (std::size_t xq = x0; xq < x1; ++xq) orow[xq] += wv * xrow[xq];
          }
        }
      }
    }
    const T bias = b.data()[co];
    for (std::size_t p = 0; p < h * wd; ++p) oc[p] += bias;
  });
  return out;
}

template <class T>
inline FeatureMapT<T> relu(const FeatureMapT<T>& x) {
  FeatureMapT<T> out = x;
  for (T& v : out.values.vec()) v = v > T(0) ? v : T(0);
  return out;
}

struct BatchNormStats {
  Tensor mean;  // per channel, batch statistics used in the forward pass
  Tensor var;
};

// Batch norm over the spatial axes of one sample. In training mode the batch
// statistics are used and the running estimates updated in place; in eval
// mode the running estimates are used. Variance is the biased (1/N) estimate.
template <class T>
inline FeatureMapT<T> batchnorm2d(const FeatureMapT<T>& x, const TensorT<T>& gamma,
                                  const TensorT<T>& beta, TensorT<T>& running_mean,
                                  TensorT<T>& running_var, bool training,
                                  BatchNormStats* saved = nullptr, T momentum = T(0.1),
                                  T eps = T(1e-5)) {
  check_shape(gamma.rank() == 1 && gamma.dim(0) == x.channels, "batchnorm gamma dim mismatch");
  check_shape(beta.dim(0) == x.channels && running_mean.dim(0) == x.channels &&
                  running_var.dim(0) == x.channels,
              "batchnorm parameter dims mismatch");
  const std::size_t hw = x.pixels();
  FeatureMapT<T> out(x.channels, x.height, x.width);
  if (saved != nullptr) {
    saved->mean = Tensor({x.channels});
    saved->var = Tensor({x.channels});
  }
  for (std::size_t c = 0; c < x.channels; ++c) {
    const T* xc = x.values.data() + c * hw;
    T mean, var;
    if (training) {
      T s = T(0);
      for (std::size_t p = 0; p < hw; ++p) s += xc[p];
      mean = s / static_cast<T>(hw);
      T sv = T(0);
      for (std::size_t p = 0; p < hw; ++p) {
        const T d = xc[p] - mean;
        sv += d * d;
      }
      var = sv / static_cast<T>(hw);
      running_mean(c) = (T(1) - momentum) * running_mean(c) + momentum * mean;
      running_var(c) = (T(1) - momentum) * running_var(c) + momentum * var;
    } else {
      mean = running_mean(c);
      var = running_var(c);
    }
    if (saved != nullptr) {
      saved->mean(c) = static_cast<double>(mean);
      saved->var(c) = static_cast<double>(var);
    }
    const T inv = T(1) / std::sqrt(var + eps);
    const T g = gamma(c), bt = beta(c);
    T* oc = out.values.data() + c * hw;
    for (std::size_t p = 0; p < hw; ++p) oc[p] = (xc[p] - mean) * inv * g + bt;
  }
  return out;
}

// 2x2 max pooling, stride 2; spatial dims must be even. argmax (flat spatial
// index into the input) is recorded when requested, ties resolved to the
// first element in row-major scan order.
template <class T>
inline FeatureMapT<T> maxpool2x2(const FeatureMapT<T>& x,
                                 std::vector<std::size_t>* argmax = nullptr) {
  check_shape(x.height % 2 == 0 && x.width % 2 == 0, "maxpool2x2 needs even spatial dims");
  const std::size_t h2 = x.height / 2, w2 = x.width / 2;
  FeatureMapT<T> out(x.channels, h2, w2);
  if (argmax != nullptr) argmax->assign(x.channels * h2 * w2, 0);
  for (std::size_t c = 0; c < x.channels; ++c) {
    for (std::size_t y = 0; y < h2; ++y) {
      for (std::size_t xq = 0; xq < w2; ++xq) {
        T best = x.at(c, 2 * y, 2 * xq);
        std::size_t best_idx = (2 * y) * x.width + 2 * xq;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t yy = 2 * y + static_cast<std::size_t>(dy);
            const std::size_t xx = 2 * xq + static_cast<std::size_t>(dx);
            const T v = x.at(c, yy, xx);
            if (v > best) {
              best = v;
              best_idx = yy * x.width + xx;
            }
          }
        }
        out.at(c, y, xq) = best;
        if (argmax != nullptr) (*argmax)[(c * h2 + y) * w2 + xq] = best_idx;
      }
    }
  }
  return out;
}

// nearest-neighbor upsampling by 2
template <class T>
inline FeatureMapT<T> upsample2x(const FeatureMapT<T>& x) {
  FeatureMapT<T> out(x.channels, x.height * 2, x.width * 2);
  for (std::size_t c = 0; c < x.channels; ++c) {
    for (std::size_t y = 0; y < out.height; ++y) {
      const T* src = x.values.data() + (c * x.height + y / 2) * x.width;
      T* dst = out.values.data() + (c * out.height + y) * out.width;
      for (std::size_t xq = 0; xq < out.width; ++xq) dst[xq] = src[xq / 2];
    }
  }
  return out;
}

template <class T>
inline FeatureMapT<T> concat_channels(const FeatureMapT<T>& a, const FeatureMapT<T>& b) {
  check_shape(a.height == b.height && a.width == b.width, "concat_channels spatial dims differ");
  FeatureMapT<T> out(a.channels + b.channels, a.height, a.width);
  std::copy(a.values.data(), a.values.data() + a.values.size(), out.values.data());
  std::copy(b.values.data(), b.values.data() + b.values.size(),
            out.values.data() + a.values.size());
  return out;
}

}  // namespace blockattn
