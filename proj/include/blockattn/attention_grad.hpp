#pragma once

// Hand-written reverse-mode gradients for the attention kernels. Each
// backward recomputes its forward intermediates (no tape), materializing the
// per-position-set beta matrix, so it is intended for gradcheck-scale and
// training-scale inputs rather than benchmark geometries.

#include <cstdint>
#include <vector>

#include "blockattn/attention.hpp"
#include "blockattn/common.hpp"
#include "blockattn/tensor.hpp"

namespace blockattn {

template <class T>
struct AttentionParamGradsT {
  TensorT<T> query_w, query_b, key_w, key_b, value_w, value_b, out_w, out_b;

  static AttentionParamGradsT zeros_like(const AttentionParamsT<T>& p) {
    AttentionParamGradsT g;
    g.query_w = TensorT<T>(p.query_w.dims());
    g.query_b = TensorT<T>(p.query_b.dims());
    g.key_w = TensorT<T>(p.key_w.dims());
    g.key_b = TensorT<T>(p.key_b.dims());
    g.value_w = TensorT<T>(p.value_w.dims());
    g.value_b = TensorT<T>(p.value_b.dims());
    g.out_w = TensorT<T>(p.out_w.dims());
    g.out_b = TensorT<T>(p.out_b.dims());
    return g;
  }
};

using AttentionParamGrads = AttentionParamGradsT<double>;

// Test fixture: when enabled, the softmax Jacobian term inside the shared
// attention backward flips sign, emulating a classic adjoint bug. Used by the
// verify command's mutation check; never enabled in normal operation.
inline bool& softmax_grad_fault() {
  static bool fault = false;
  return fault;
}

namespace detail {

template <class T>
inline void add_into(TensorT<T>& dst, const TensorT<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst(i) += src(i);
}

template <class T>
inline TensorT<T> row_sums(const TensorT<T>& a) {
  TensorT<T> out({a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < a.dim(1); ++j) s += a(i, j);
    out(i) = s;
  }
  return out;
}

// Adjoint of attend_positions. grad_x accumulates dL/dX; pg accumulates the
// parameter gradients.
template <class T>
inline void backward_attend_positions(const TensorT<T>& xs, const AttentionParamsT<T>& p,
                                      const TensorT<T>& upstream, TensorT<T>& grad_x,
                                      AttentionParamGradsT<T>& pg) {
  check_shape(xs.same_dims(upstream), "upstream gradient dims mismatch");
  const std::size_t n = xs.dim(1);
  const TensorT<T> q = project_positions(xs, p.query_w, p.query_b);
  const TensorT<T> k = project_positions(xs, p.key_w, p.key_b);
  const TensorT<T> v = project_positions(xs, p.value_w, p.value_b);

  // forward scores and softmax
  const TensorT<T> scores = matmul(transpose(k), q);  // [N,N], row j: s(i,j)
  const TensorT<T> beta = softmax_rows(scores);
  const TensorT<T> agg = matmul(v, transpose(beta));  // [C',N]

  const TensorT<T> xs_t = transpose(xs);

  // residual path
  add_into(grad_x, upstream);

  // out projection
  add_into(pg.out_w, matmul(upstream, transpose(agg)));
  add_into(pg.out_b, row_sums(upstream));
  const TensorT<T> d_agg = matmul(transpose(p.out_w), upstream);  // [C',N]

  // aggregation: agg = V beta^T
  const TensorT<T> d_v = matmul(d_agg, beta);              // [C',N]
  const TensorT<T> d_beta = matmul(transpose(d_agg), v);   // [N,N]

  // softmax rows
  TensorT<T> d_scores({n, n});
  const T fault_sign = softmax_grad_fault() ? T(-1) : T(1);
  for (std::size_t j = 0; j < n; ++j) {
    T inner = T(0);
    for (std::size_t i = 0; i < n; ++i) inner += d_beta(j, i) * beta(j, i);
    for (std::size_t i = 0; i < n; ++i)
      d_scores(j, i) = beta(j, i) * (d_beta(j, i) - fault_sign * inner);
  }

  // scores: s(i,j) = Q[:,i].K[:,j]
  const TensorT<T> d_q = matmul(k, d_scores);             // [C',N]
  const TensorT<T> d_k = matmul(q, transpose(d_scores));  // [C',N]

  // projections
  add_into(pg.query_w, matmul(d_q, xs_t));
  add_into(pg.query_b, row_sums(d_q));
  add_into(pg.key_w, matmul(d_k, xs_t));
  add_into(pg.key_b, row_sums(d_k));
  add_into(pg.value_w, matmul(d_v, xs_t));
  add_into(pg.value_b, row_sums(d_v));
  add_into(grad_x, matmul(transpose(p.query_w), d_q));
  add_into(grad_x, matmul(transpose(p.key_w), d_k));
  add_into(grad_x, matmul(transpose(p.value_w), d_v));
}

template <class T>
inline TensorT<T> flatten_map(const FeatureMapT<T>& x) {
  TensorT<T> xs({x.channels, x.pixels()});
  std::copy(x.values.data(), x.values.data() + x.values.size(), xs.data());
  return xs;
}

template <class T>
inline FeatureMapT<T> unflatten_map(const TensorT<T>& xs, std::size_t h, std::size_t w) {
  FeatureMapT<T> x(xs.dim(0), h, w);
  std::copy(xs.data(), xs.data() + xs.size(), x.values.data());
  return x;
}

}  // namespace detail

template <class T>
struct AttentionBackwardResult {
  FeatureMapT<T> grad_x;
  AttentionParamGradsT<T> grads;
};

template <class T>
inline AttentionBackwardResult<T> backward_global_attention(const FeatureMapT<T>& x,
                                                            const AttentionParamsT<T>& p,
                                                            const FeatureMapT<T>& upstream) {
  check_shape(x.same_dims(upstream), "upstream dims must match input");
  TensorT<T> grad({x.channels, x.pixels()});
  auto pg = AttentionParamGradsT<T>::zeros_like(p);
  detail::backward_attend_positions(detail::flatten_map(x), p, detail::flatten_map(upstream),
                                    grad, pg);
  return {detail::unflatten_map(grad, x.height, x.width), std::move(pg)};
}

// ---------------------------------------------------------------------------
// Block-wise layer backward.
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
inline TensorT<T> gather_block_grad(const FeatureMapT<T>& g, std::size_t r0, std::size_t c0,
                                    std::size_t b) {
  return gather_block(g, r0, c0, b);  // zero at padded positions
}

}  // namespace detail

template <class T>
inline AttentionBackwardResult<T> backward_blockwise_attention_layer(
    const FeatureMapT<T>& x, const AttentionConfig& cfg, const AttentionParamsT<T>& p,
    const FeatureMapT<T>& upstream) {
  cfg.validate();
  check_shape(x.same_dims(upstream), "upstream dims must match input");
  const std::size_t b = cfg.block_size;
  const auto rows = block_origins(x.height, b, cfg.stride);
  const auto cols = block_origins(x.width, b, cfg.stride);
  auto pg = AttentionParamGradsT<T>::zeros_like(p);

  if (cfg.update_mode == UpdateMode::SequentialRaster) {
    // replay the forward scan, keeping each block's input snapshot
    FeatureMapT<T> buffer = x;
    std::vector<TensorT<T>> snapshots;
    snapshots.reserve(rows.size() * cols.size());
    for (const std::size_t r0 : rows) {
      for (const std::size_t c0 : cols) {
        TensorT<T> xs = detail::gather_block(buffer, r0, c0, b);
        TensorT<T> ys = detail::attend_positions(xs, p, false, static_cast<TensorT<T>*>(nullptr));
        const std::size_t ylim = std::min(b, x.height - r0);
        const std::size_t xlim = std::min(b, x.width - c0);
        for (std::size_t c = 0; c < x.channels; ++c)
          for (std::size_t by = 0; by < ylim; ++by)
            for (std::size_t bx = 0; bx < xlim; ++bx)
              buffer.at(c, r0 + by, c0 + bx) = ys((c * b + by) * b + bx);
        snapshots.push_back(std::move(xs));
      }
    }
    // reverse scan: a block's region was overwritten, so the buffer gradient
    // over that region is replaced by the block's input gradient
    FeatureMapT<T> g = upstream;
    for (std::size_t bi = snapshots.size(); bi-- > 0;) {
      const std::size_t r0 = rows[bi / cols.size()];
      const std::size_t c0 = cols[bi % cols.size()];
      const TensorT<T> gb = detail::gather_block_grad(g, r0, c0, b);
      TensorT<T> gin({x.channels, b * b});
      detail::backward_attend_positions(snapshots[bi], p, gb, gin, pg);
      const std::size_t ylim = std::min(b, x.height - r0);
      const std::size_t xlim = std::min(b, x.width - c0);
      for (std::size_t c = 0; c < x.channels; ++c)
        for (std::size_t by = 0; by < ylim; ++by)
          for (std::size_t bx = 0; bx < xlim; ++bx)
            g.at(c, r0 + by, c0 + bx) = gin((c * b + by) * b + bx);
    }
    return {std::move(g), std::move(pg)};
  }

  // parallel-average: each block saw the original input; upstream is scaled
  // by the coverage average before entering the block adjoint
  const auto cov_r = detail::axis_coverage(x.height, b, rows);
  const auto cov_c = detail::axis_coverage(x.width, b, cols);
  FeatureMapT<T> g(x.channels, x.height, x.width);
  for (const std::size_t r0 : rows) {
    for (const std::size_t c0 : cols) {
      const std::size_t ylim = std::min(b, x.height - r0);
      const std::size_t xlim = std::min(b, x.width - c0);
      TensorT<T> gb({x.channels, b * b});
      for (std::size_t c = 0; c < x.channels; ++c)
        for (std::size_t by = 0; by < ylim; ++by)
          for (std::size_t bx = 0; bx < xlim; ++bx)
            gb(c * b * b + by * b + bx) =
                upstream.at(c, r0 + by, c0 + bx) /
                static_cast<T>(cov_r[r0 + by] * cov_c[c0 + bx]);
      const TensorT<T> xs = detail::gather_block(x, r0, c0, b);
      TensorT<T> gin({x.channels, b * b});
      detail::backward_attend_positions(xs, p, gb, gin, pg);
      for (std::size_t c = 0; c < x.channels; ++c)
        for (std::size_t by = 0; by < ylim; ++by)
          for (std::size_t bx = 0; bx < xlim; ++bx)
            g.at(c, r0 + by, c0 + bx) += gin((c * b + by) * b + bx);
    }
  }
  return {std::move(g), std::move(pg)};
}

template <class T>
struct StackedBackwardResult {
  FeatureMapT<T> grad_x;
  std::vector<AttentionParamGradsT<T>> grads;  // one entry per parameter set
};

template <class T>
inline StackedBackwardResult<T> backward_stacked_attention(
    const FeatureMapT<T>& x, const AttentionConfig& cfg,
    const std::vector<AttentionParamsT<T>>& params, const FeatureMapT<T>& upstream) {
  cfg.validate();
  const std::size_t expected = cfg.share_layer_params ? 1 : cfg.layers;
  check_config(params.size() == expected, "parameter-set count mismatch");

  std::vector<FeatureMapT<T>> inputs;
  inputs.push_back(x);
  for (std::size_t layer = 0; layer + 1 < cfg.layers; ++layer) {
    const auto& lp = cfg.share_layer_params ? params[0] : params[layer];
    inputs.push_back(blockwise_attention_layer(inputs.back(), cfg, lp, false).features);
  }

  StackedBackwardResult<T> out;
  out.grads.reserve(params.size());
  for (const auto& p : params) out.grads.push_back(AttentionParamGradsT<T>::zeros_like(p));

  FeatureMapT<T> g = upstream;
  for (std::size_t layer = cfg.layers; layer-- > 0;) {
    const std::size_t pidx = cfg.share_layer_params ? 0 : layer;
    auto step = backward_blockwise_attention_layer(inputs[layer], cfg, params[pidx], g);
    g = std::move(step.grad_x);
    detail::add_into(out.grads[pidx].query_w, step.grads.query_w);
    detail::add_into(out.grads[pidx].query_b, step.grads.query_b);
    detail::add_into(out.grads[pidx].key_w, step.grads.key_w);
    detail::add_into(out.grads[pidx].key_b, step.grads.key_b);
    detail::add_into(out.grads[pidx].value_w, step.grads.value_w);
    detail::add_into(out.grads[pidx].value_b, step.grads.value_b);
    detail::add_into(out.grads[pidx].out_w, step.grads.out_w);
    detail::add_into(out.grads[pidx].out_b, step.grads.out_b);
  }
  out.grad_x = std::move(g);
  return out;
}

// ---------------------------------------------------------------------------
// Criss-cross backward (shared parameters across both applications).
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
inline AttentionBackwardResult<T> backward_crisscross_single(const FeatureMapT<T>& x,
                                                             const AttentionParamsT<T>& p,
                                                             const FeatureMapT<T>& upstream) {
  const std::size_t h = x.height, w = x.width, hw = h * w;
  const std::size_t support = h + w - 1;
  const std::size_t cp = p.embed_channels();
  const FeatureMapT<T> q = conv1x1(x, p.query_w, p.query_b);
  const FeatureMapT<T> k = conv1x1(x, p.key_w, p.key_b);
  const FeatureMapT<T> v = conv1x1(x, p.value_w, p.value_b);

  // recompute agg for the out-projection weight gradient
  FeatureMapT<T> agg(cp, h, w);
  std::vector<T> beta_all(hw * support);
  std::vector<std::size_t> idx(support);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c0 = 0; c0 < w; ++c0) {
      std::size_t m = 0;
      for (std::size_t cc = 0; cc < w; ++cc) idx[m++] = r * w + cc;
      for (std::size_t rr = 0; rr < h; ++rr)
        if (rr != r) idx[m++] = rr * w + c0;
      const std::size_t jpos = r * w + c0;
      T* brow = beta_all.data() + jpos * support;
      for (std::size_t t = 0; t < support; ++t) {
        T s = T(0);
        for (std::size_t cc = 0; cc < cp; ++cc)
          s += q.values.data()[cc * hw + idx[t]] * k.values.data()[cc * hw + jpos];
        brow[t] = s;
      }
      T mx = brow[0];
      for (std::size_t t = 1; t < support; ++t) mx = std::max(mx, brow[t]);
      T denom = T(0);
      for (std::size_t t = 0; t < support; ++t) {
        brow[t] = std::exp(brow[t] - mx);
        denom += brow[t];
      }
      const T inv = T(1) / denom;
      for (std::size_t t = 0; t < support; ++t) brow[t] *= inv;
      for (std::size_t cc = 0; cc < cp; ++cc) {
        T s = T(0);
        for (std::size_t t = 0; t < support; ++t) s += brow[t] * v.values.data()[cc * hw + idx[t]];
        agg.values.data()[cc * hw + jpos] = s;
      }
    }
  }

  auto pg = AttentionParamGradsT<T>::zeros_like(p);
  FeatureMapT<T> grad_x = upstream;  // residual path

  // out projection: out = Wo agg + bo + x
  for (std::size_t c = 0; c < x.channels; ++c)
    for (std::size_t cc = 0; cc < cp; ++cc) {
      T s = T(0);
      for (std::size_t pp = 0; pp < hw; ++pp)
        s += upstream.values.data()[c * hw + pp] * agg.values.data()[cc * hw + pp];
      pg.out_w(c, cc) += s;
    }
  for (std::size_t c = 0; c < x.channels; ++c) {
    T s = T(0);
    for (std::size_t pp = 0; pp < hw; ++pp) s += upstream.values.data()[c * hw + pp];
    pg.out_b(c) += s;
  }
  FeatureMapT<T> d_agg(cp, h, w);
  for (std::size_t cc = 0; cc < cp; ++cc)
    for (std::size_t pp = 0; pp < hw; ++pp) {
      T s = T(0);
      for (std::size_t c = 0; c < x.channels; ++c)
        s += p.out_w(c, cc) * upstream.values.data()[c * hw + pp];
      d_agg.values.data()[cc * hw + pp] = s;
    }

  FeatureMapT<T> d_q(cp, h, w), d_k(cp, h, w), d_v(cp, h, w);
  std::vector<T> d_beta(support), d_s(support);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c0 = 0; c0 < w; ++c0) {
      std::size_t m = 0;
      for (std::size_t cc = 0; cc < w; ++cc) idx[m++] = r * w + cc;
      for (std::size_t rr = 0; rr < h; ++rr)
        if (rr != r) idx[m++] = rr * w + c0;
      const std::size_t jpos = r * w + c0;
      const T* brow = beta_all.data() + jpos * support;
      for (std::size_t t = 0; t < support; ++t) {
        T s = T(0);
        for (std::size_t cc = 0; cc < cp; ++cc)
          s += d_agg.values.data()[cc * hw + jpos] * v.values.data()[cc * hw + idx[t]];
        d_beta[t] = s;
      }
      T inner = T(0);
      for (std::size_t t = 0; t < support; ++t) inner += d_beta[t] * brow[t];
      for (std::size_t t = 0; t < support; ++t) d_s[t] = brow[t] * (d_beta[t] - inner);
      for (std::size_t t = 0; t < support; ++t) {
        for (std::size_t cc = 0; cc < cp; ++cc) {
          d_q.values.data()[cc * hw + idx[t]] += d_s[t] * k.values.data()[cc * hw + jpos];
          d_k.values.data()[cc * hw + jpos] += d_s[t] * q.values.data()[cc * hw + idx[t]];
          d_v.values.data()[cc * hw + idx[t]] += brow[t] * d_agg.values.data()[cc * hw + jpos];
        }
      }
    }
  }

  // back through the three 1x1 projections
  const auto proj_back = [&](const FeatureMapT<T>& dp, const TensorT<T>& wmat, TensorT<T>& dw,
                             TensorT<T>& db) {
    for (std::size_t cc = 0; cc < cp; ++cc) {
      for (std::size_t c = 0; c < x.channels; ++c) {
        T s = T(0);
        for (std::size_t pp = 0; pp < hw; ++pp)
          s += dp.values.data()[cc * hw + pp] * x.values.data()[c * hw + pp];
        dw(cc, c) += s;
      }
      T s = T(0);
      for (std::size_t pp = 0; pp < hw; ++pp) s += dp.values.data()[cc * hw + pp];
      db(cc) += s;
      for (std::size_t c = 0; c < x.channels; ++c) {
        const T wv = wmat(cc, c);
        for (std::size_t pp = 0; pp < hw; ++pp)
          grad_x.values.data()[c * hw + pp] += wv * dp.values.data()[cc * hw + pp];
      }
    }
  };
  proj_back(d_q, p.query_w, pg.query_w, pg.query_b);
  proj_back(d_k, p.key_w, pg.key_w, pg.key_b);
  proj_back(d_v, p.value_w, pg.value_w, pg.value_b);

  return {std::move(grad_x), std::move(pg)};
}

}  // namespace detail

template <class T>
inline AttentionBackwardResult<T> backward_crisscross_attention(const FeatureMapT<T>& x,
                                                                const AttentionParamsT<T>& p,
                                                                std::size_t layers,
                                                                const FeatureMapT<T>& upstream) {
  check_config(layers == 1 || layers == 2, "criss-cross layers must be 1 or 2");
  std::vector<FeatureMapT<T>> inputs;
  inputs.push_back(x);
  for (std::size_t rep = 0; rep + 1 < layers; ++rep)
    inputs.push_back(crisscross_attention(inputs.back(), p, 1).features);

  AttentionBackwardResult<T> total;
  total.grads = AttentionParamGradsT<T>::zeros_like(p);
  FeatureMapT<T> g = upstream;
  for (std::size_t rep = layers; rep-- > 0;) {
    auto step = detail::backward_crisscross_single(inputs[rep], p, g);
    g = std::move(step.grad_x);
    detail::add_into(total.grads.query_w, step.grads.query_w);
    detail::add_into(total.grads.query_b, step.grads.query_b);
    detail::add_into(total.grads.key_w, step.grads.key_w);
    detail::add_into(total.grads.key_b, step.grads.key_b);
    detail::add_into(total.grads.value_w, step.grads.value_w);
    detail::add_into(total.grads.value_b, step.grads.value_b);
    detail::add_into(total.grads.out_w, step.grads.out_w);
    detail::add_into(total.grads.out_b, step.grads.out_b);
  }
  total.grad_x = std::move(g);
  return total;
}

}  // namespace blockattn
