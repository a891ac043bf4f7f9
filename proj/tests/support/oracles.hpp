#pragma once

// Independent brute-force oracles used by the unit and acceptance suites.
// These deliberately re-derive every quantity with plain scalar loops and do
// not share computation paths with the library kernels they certify.

#include <cmath>
#include <cstddef>
#include <vector>

#include "blockattn/attention.hpp"
#include "blockattn/tensor.hpp"

namespace oracle {

using blockattn::AttentionParams;
using blockattn::FeatureMap;
using blockattn::Tensor;

// c[i][j] = sum_k a[i][k] b[k][j], plain scalar accumulation
inline Tensor matmul_triple_loop(const Tensor& a, const Tensor& b) {
  Tensor c({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.dim(1); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

// softmax rows in extended precision
inline Tensor softmax_rows_longdouble(const Tensor& a) {
  Tensor out(a.dims());
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    long double mx = a(i, 0);
    for (std::size_t j = 1; j < a.dim(1); ++j) mx = std::max<long double>(mx, a(i, j));
    long double denom = 0.0L;
    std::vector<long double> e(a.dim(1));
    for (std::size_t j = 0; j < a.dim(1); ++j) {
      e[j] = expl(static_cast<long double>(a(i, j)) - mx);
      denom += e[j];
    }
    for (std::size_t j = 0; j < a.dim(1); ++j) out(i, j) = static_cast<double>(e[j] / denom);
  }
  return out;
}

// the three 1x1 projections at one position
struct ProjectedPosition {
  std::vector<double> q, k, v;
};

inline ProjectedPosition project_position(const FeatureMap& x, const AttentionParams& p,
                                          std::size_t r, std::size_t c) {
  const std::size_t cp = p.query_w.dim(0), cn = x.channels;
  ProjectedPosition out;
  out.q.assign(cp, 0.0);
  out.k.assign(cp, 0.0);
  out.v.assign(cp, 0.0);
  for (std::size_t e = 0; e < cp; ++e) {
    double sq = 0.0, sk = 0.0, sv = 0.0;
    for (std::size_t ch = 0; ch < cn; ++ch) {
      const double xv = x.at(ch, r, c);
      sq += p.query_w(e, ch) * xv;
      sk += p.key_w(e, ch) * xv;
      sv += p.value_w(e, ch) * xv;
    }
    out.q[e] = sq + p.query_b(e);
    out.k[e] = sk + p.key_b(e);
    out.v[e] = sv + p.value_b(e);
  }
  return out;
}

// Literal position-by-position global attention: for every output position j,
// scores s(i,j) = Q(x_i).K(x_j) over all i, softmax over i, aggregate V, out
// projection plus residual.
inline FeatureMap global_attention_bruteforce(const FeatureMap& x, const AttentionParams& p) {
  const std::size_t h = x.height, w = x.width, n = h * w;
  const std::size_t cp = p.query_w.dim(0), cn = x.channels;
  std::vector<ProjectedPosition> proj;
  proj.reserve(n);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) proj.push_back(project_position(x, p, r, c));

  FeatureMap out(cn, h, w);
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t e = 0; e < cp; ++e) s += proj[i].q[e] * proj[j].k[e];
      scores[i] = s;
    }
    double mx = scores[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, scores[i]);
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = std::exp(scores[i] - mx);
      denom += scores[i];
    }
    std::vector<double> agg(cp, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double beta = scores[i] / denom;
      for (std::size_t e = 0; e < cp; ++e) agg[e] += beta * proj[i].v[e];
    }
    for (std::size_t ch = 0; ch < cn; ++ch) {
      double s = 0.0;
      for (std::size_t e = 0; e < cp; ++e) s += p.out_w(ch, e) * agg[e];
      out.values.data()[ch * n + j] = s + p.out_b(ch) + x.values.data()[ch * n + j];
    }
  }
  return out;
}

// Brute-force one-layer block-wise attention in parallel-average mode with
// explicit coverage-count averaging and zero right/bottom padding.
inline FeatureMap blockwise_parallel_bruteforce(const FeatureMap& x, std::size_t block,
                                                std::size_t stride, const AttentionParams& p) {
  const std::size_t h = x.height, w = x.width, cn = x.channels;
  std::vector<std::size_t> row_origins, col_origins;
  for (std::size_t o = 0;; o += stride) {
    row_origins.push_back(o);
    if (o + block >= h) break;
  }
  for (std::size_t o = 0;; o += stride) {
    col_origins.push_back(o);
    if (o + block >= w) break;
  }
  FeatureMap sum(cn, h, w);
  Tensor count({h, w});
  for (const std::size_t r0 : row_origins) {
    for (const std::size_t c0 : col_origins) {
      // padded block copy
      FeatureMap blockmap(cn, block, block);
      for (std::size_t ch = 0; ch < cn; ++ch)
        for (std::size_t by = 0; by < block; ++by)
          for (std::size_t bx = 0; bx < block; ++bx)
            blockmap.at(ch, by, bx) = (r0 + by < h && c0 + bx < w) ? x.at(ch, r0 + by, c0 + bx) : 0.0;
      const FeatureMap yb = global_attention_bruteforce(blockmap, p);
      for (std::size_t by = 0; by < block && r0 + by < h; ++by)
        for (std::size_t bx = 0; bx < block && c0 + bx < w; ++bx) {
          for (std::size_t ch = 0; ch < cn; ++ch)
            sum.at(ch, r0 + by, c0 + bx) += yb.at(ch, by, bx);
          count(r0 + by, c0 + bx) += 1.0;
        }
    }
  }
  for (std::size_t ch = 0; ch < cn; ++ch)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) sum.at(ch, r, c) /= count(r, c);
  return sum;
}

// Criss-cross oracle: explicit row + column enumeration per output position.
inline FeatureMap crisscross_bruteforce_single(const FeatureMap& x, const AttentionParams& p) {
  const std::size_t h = x.height, w = x.width, cn = x.channels;
  const std::size_t cp = p.query_w.dim(0);
  std::vector<ProjectedPosition> proj;
  proj.reserve(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) proj.push_back(project_position(x, p, r, c));
  FeatureMap out(cn, h, w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      std::vector<std::size_t> support;
      for (std::size_t cc = 0; cc < w; ++cc) support.push_back(r * w + cc);
      for (std::size_t rr = 0; rr < h; ++rr)
        if (rr != r) support.push_back(rr * w + c);
      const std::size_t j = r * w + c;
      std::vector<double> scores(support.size());
      for (std::size_t t = 0; t < support.size(); ++t) {
        double s = 0.0;
        for (std::size_t e = 0; e < cp; ++e) s += proj[support[t]].q[e] * proj[j].k[e];
        scores[t] = s;
      }
      double mx = scores[0];
      for (std::size_t t = 1; t < scores.size(); ++t) mx = std::max(mx, scores[t]);
      double denom = 0.0;
      for (double& s : scores) {
        s = std::exp(s - mx);
        denom += s;
      }
      std::vector<double> agg(cp, 0.0);
      for (std::size_t t = 0; t < support.size(); ++t)
        for (std::size_t e = 0; e < cp; ++e) agg[e] += (scores[t] / denom) * proj[support[t]].v[e];
      for (std::size_t ch = 0; ch < cn; ++ch) {
        double s = 0.0;
        for (std::size_t e = 0; e < cp; ++e) s += p.out_w(ch, e) * agg[e];
        out.at(ch, r, c) = s + p.out_b(ch) + x.at(ch, r, c);
      }
    }
  }
  return out;
}

inline FeatureMap crisscross_bruteforce(const FeatureMap& x, const AttentionParams& p,
                                        std::size_t layers) {
  FeatureMap cur = x;
  for (std::size_t rep = 0; rep < layers; ++rep) cur = crisscross_bruteforce_single(cur, p);
  return cur;
}

inline double max_abs_diff(const FeatureMap& a, const FeatureMap& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i)
    m = std::max(m, std::abs(a.values.vec()[i] - b.values.vec()[i]));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a(i) - b(i)));
  return m;
}

}  // namespace oracle
