#pragma once

// Self-attention kernels over 2D feature maps: exact global attention, local
// block-wise attention with overlapping raster-scan blocks, layer stacking,
// and criss-cross attention as a comparison kernel.
//
// Score convention (kept literal to the aggregation it feeds): for output
// position j and context position i,
//     s(i,j) = Q(x_i)^T K(x_j),
//     beta[j][i] = softmax over i of s(i,j),
//     out_j = out_w * (sum_i beta[j][i] V(x_i)) + out_b + x_j.
// beta matrices are stored row-major with one row per output position j.
// No 1/sqrt(d) score scaling is applied.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "blockattn/common.hpp"
#include "blockattn/tensor.hpp"

namespace blockattn {

enum class UpdateMode {
  SequentialRaster,  // blocks read the evolving buffer in raster order
  ParallelAverage,   // blocks read the original input; overlaps averaged
};

inline std::string to_string(UpdateMode m) {
  return m == UpdateMode::SequentialRaster ? "sequential-raster" : "parallel-average";
}

inline UpdateMode update_mode_from_string(const std::string& s) {
  if (s == "sequential-raster") return UpdateMode::SequentialRaster;
  if (s == "parallel-average") return UpdateMode::ParallelAverage;
  throw ConfigError("unknown update_mode: " + s);
}

struct AttentionConfig {
  std::size_t block_size = 36;
  std::size_t stride = 24;
  std::size_t layers = 1;                // 1 = SAB, 2 = DAB
  std::size_t embed_num = 1;             // embed_ratio = embed_num / embed_den
  std::size_t embed_den = 2;
  UpdateMode update_mode = UpdateMode::SequentialRaster;
  bool share_layer_params = false;       // reuse one parameter set across layers
  std::uint64_t seed = 0;

  void validate() const {
    check_config(block_size >= 1, "block_size must be >= 1 (zero-area block)");
    check_config(stride >= 1, "stride must be >= 1");
    check_config(stride <= block_size, "stride must satisfy s <= B");
    check_config(layers >= 1, "layers must be >= 1");
    check_config(embed_num >= 1 && embed_num <= embed_den, "embed_ratio must be in (0,1]");
  }

  std::size_t embed_channels(std::size_t c) const {
    const std::size_t e = (c * embed_num) / embed_den;
    return e >= 1 ? e : 1;
  }
};

// side length of the region that can influence an output pixel; the n=1 and
// n=2 values are the stated B and B+2s, larger n extrapolates the +2s step
inline std::size_t contextual_field(const AttentionConfig& cfg) {
  cfg.validate();
  return cfg.block_size + 2 * cfg.stride * (cfg.layers - 1);
}

// flat key=value config format
inline std::string encode_attention_config(const AttentionConfig& cfg) {
  std::ostringstream os;
  os << "block_size=" << cfg.block_size << '\n'
     << "stride=" << cfg.stride << '\n'
     << "layers=" << cfg.layers << '\n'
     << "update_mode=" << to_string(cfg.update_mode) << '\n'
     << "embed_ratio=" << cfg.embed_num << '/' << cfg.embed_den << '\n'
     << "share_params=" << (cfg.share_layer_params ? 1 : 0) << '\n'
     << "seed=" << cfg.seed << '\n';
  return os.str();
}

inline AttentionConfig parse_attention_config(const std::string& text) {
  AttentionConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line without '=': " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "block_size") {
      cfg.block_size = static_cast<std::size_t>(std::stoull(val));
    } else if (key == "stride") {
      cfg.stride = static_cast<std::size_t>(std::stoull(val));
    } else if (key == "layers") {
      cfg.layers = static_cast<std::size_t>(std::stoull(val));
    } else if (key == "update_mode") {
      cfg.update_mode = update_mode_from_string(val);
    } else if (key == "embed_ratio") {
      const auto slash = val.find('/');
      if (slash != std::string::npos) {
        cfg.embed_num = static_cast<std::size_t>(std::stoull(val.substr(0, slash)));
        cfg.embed_den = static_cast<std::size_t>(std::stoull(val.substr(slash + 1)));
      } else {
        // decimal form: reduce v ~ p/1000000
        const double v = std::strtod(val.c_str(), nullptr);
        check_config(v > 0.0 && v <= 1.0, "embed_ratio must be in (0,1]");
        std::size_t num = static_cast<std::size_t>(std::llround(v * 1000000.0)), den = 1000000;
        const std::size_t g = std::__gcd(num, den);
        cfg.embed_num = num / g;
        cfg.embed_den = den / g;
      }
    } else if (key == "share_params") {
      cfg.share_layer_params = val != "0";
    } else if (key == "seed") {
      cfg.seed = std::stoull(val);
    } else {
      throw ConfigError("unknown config key: " + key);
    }
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Parameters: one set per attention layer.
// ---------------------------------------------------------------------------

template <class T>
struct AttentionParamsT {
  TensorT<T> query_w, query_b;  // [C',C], [C']
  TensorT<T> key_w, key_b;
  TensorT<T> value_w, value_b;
  TensorT<T> out_w, out_b;      // [C,C'], [C] — restores channels before the residual

  std::size_t embed_channels() const { return query_w.dim(0); }
  std::size_t channels() const { return query_w.dim(1); }

  // query/key/value uniform in +-1/sqrt(C); out projection zeroed so a fresh
  // layer is the identity map
  static AttentionParamsT init(std::size_t c, std::size_t c_embed, Rng& rng) {
    AttentionParamsT p = zeros(c, c_embed);
    const T bound = T(1) / std::sqrt(static_cast<T>(c));
    for (T& v : p.query_w.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
    for (T& v : p.key_w.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
    for (T& v : p.value_w.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
    return p;
  }

  // every tensor randomized; used by oracles, probes and benchmarks where a
  // live value path is required
  static AttentionParamsT random_full(std::size_t c, std::size_t c_embed, Rng& rng) {
    AttentionParamsT p = init(c, c_embed, rng);
    const T bound = T(1) / std::sqrt(static_cast<T>(c_embed));
    for (T& v : p.out_w.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
    for (T& v : p.query_b.vec()) v = static_cast<T>(rng.uniform(-0.1, 0.1));
    for (T& v : p.key_b.vec()) v = static_cast<T>(rng.uniform(-0.1, 0.1));
    for (T& v : p.value_b.vec()) v = static_cast<T>(rng.uniform(-0.1, 0.1));
    for (T& v : p.out_b.vec()) v = static_cast<T>(rng.uniform(-0.1, 0.1));
    return p;
  }

  static AttentionParamsT zeros(std::size_t c, std::size_t c_embed) {
    check_config(c_embed >= 1, "embedded channel count must be >= 1");
    AttentionParamsT p;
    p.query_w = TensorT<T>({c_embed, c});
    p.query_b = TensorT<T>({c_embed});
    p.key_w = TensorT<T>({c_embed, c});
    p.key_b = TensorT<T>({c_embed});
    p.value_w = TensorT<T>({c_embed, c});
    p.value_b = TensorT<T>({c_embed});
    p.out_w = TensorT<T>({c, c_embed});
    p.out_b = TensorT<T>({c});
    return p;
  }
};

using AttentionParams = AttentionParamsT<double>;

inline std::size_t attention_param_count(std::size_t c, std::size_t c_embed) {
  return 3 * (c_embed * c + c_embed) + (c * c_embed + c);
}

template <class T>
struct BlockBetaT {
  std::size_t row0 = 0;
  std::size_t col0 = 0;
  std::size_t brows = 0;  // block extent; the beta matrix is [brows*bcols]^2
  std::size_t bcols = 0;
  TensorT<T> beta;  // rows indexed by output position within the block
};

template <class T>
struct AttentionOutputT {
  FeatureMapT<T> features;
  // one entry per attention layer; empty when beta retention was not requested
  std::vector<std::vector<BlockBetaT<T>>> beta_layers;
  bool has_beta() const { return !beta_layers.empty(); }
};

using AttentionOutput = AttentionOutputT<double>;

// ---------------------------------------------------------------------------
// Core kernel over an explicit position set.
// ---------------------------------------------------------------------------

namespace detail {

// [C',N] = w [C',C] * xs [C,N] + b, channel sum ascending, bias added last
template <class T>
inline TensorT<T> project_positions(const TensorT<T>& xs, const TensorT<T>& w,
                                    const TensorT<T>& b) {
  const std::size_t cp = w.dim(0), c_in = w.dim(1), n = xs.dim(1);
  TensorT<T> out({cp, n});
  const T* px = xs.data();
  T* po = out.data();
  parallel_for(static_cast<std::int64_t>(cp), [&](std::int64_t i) {
    T* orow = po + static_cast<std::size_t>(i) * n;
    const T* wrow = w.data() + static_cast<std::size_t>(i) * c_in;
    for (std::size_t c = 0; c < c_in; ++c) {
      const T wv = wrow[c];
      const T* xrow = px + c * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += wv * xrow[j];
    }
    const T bias = b.data()[i];
    for (std::size_t j = 0; j < n; ++j) orow[j] += bias;
  });
  return out;
}

// Attention over one gathered position set xs [C,N]. Scores are streamed in
// query chunks so nothing quadratic is materialized unless beta is retained.
template <class T>
inline TensorT<T> attend_positions(const TensorT<T>& xs, const AttentionParamsT<T>& p,
                                   bool retain_beta, TensorT<T>* beta_out) {
  const std::size_t c = xs.dim(0), n = xs.dim(1);
  check_shape(p.channels() == c, "attention params channel mismatch");
  const std::size_t cp = p.embed_channels();
  const TensorT<T> q = project_positions(xs, p.query_w, p.query_b);
  const TensorT<T> k = project_positions(xs, p.key_w, p.key_b);
  const TensorT<T> v = project_positions(xs, p.value_w, p.value_b);

  TensorT<T> agg({cp, n});
  if (retain_beta && beta_out != nullptr) *beta_out = TensorT<T>({n, n});

  const std::size_t chunk = std::min<std::size_t>(n, 256);
  std::vector<T> slab(chunk * n);
  for (std::size_t j0 = 0; j0 < n; j0 += chunk) {
    const std::size_t jn = std::min(chunk, n - j0);
    parallel_for(static_cast<std::int64_t>(jn), [&](std::int64_t jj) {
      const std::size_t j = j0 + static_cast<std::size_t>(jj);
      T* row = slab.data() + static_cast<std::size_t>(jj) * n;
      std::fill(row, row + n, T(0));
      // s(i,j) = sum_c Q[c,i] K[c,j]
      for (std::size_t cc = 0; cc < cp; ++cc) {
        const T kcj = k.data()[cc * n + j];
        const T* qrow = q.data() + cc * n;
        for (std::size_t i = 0; i < n; ++i) row[i] += kcj * qrow[i];
      }
      // softmax over i, identical arithmetic to softmax_rows
      T mx = row[0];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
      T denom = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        row[i] = std::exp(row[i] - mx);
        denom += row[i];
      }
      const T inv = T(1) / denom;
      for (std::size_t i = 0; i < n; ++i) row[i] *= inv;
      if (retain_beta && beta_out != nullptr)
        std::copy(row, row + n, beta_out->data() + j * n);
      // agg[:,j] = sum_i beta[j][i] V[:,i]
      for (std::size_t cc = 0; cc < cp; ++cc) {
        const T* vrow = v.data() + cc * n;
        T s = T(0);
        for (std::size_t i = 0; i < n; ++i) s += row[i] * vrow[i];
        agg.data()[cc * n + j] = s;
      }
    });
  }

  TensorT<T> out = project_positions(agg, p.out_w, p.out_b);
  const T* px = xs.data();
  T* po = out.data();
  for (std::size_t idx = 0; idx < out.size(); ++idx) po[idx] += px[idx];  // residual
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Global self-attention.
// ---------------------------------------------------------------------------

struct GlobalAttentionOptions {
  bool retain_beta = false;
  // refuse N^2 score matrices beyond this many elements
  std::uint64_t element_budget = std::uint64_t(1) << 28;
};

template <class T>
inline AttentionOutputT<T> global_self_attention(const FeatureMapT<T>& x,
                                                 const AttentionParamsT<T>& p,
                                                 const GlobalAttentionOptions& opts = {}) {
  const std::uint64_t n = x.pixels();
  if (n * n > opts.element_budget) {
    throw BudgetError("global self-attention would form a " + std::to_string(n) + "x" +
                      std::to_string(n) +
                      " attention matrix over the element budget; use the block-wise kernel");
  }
  TensorT<T> xs({x.channels, x.pixels()});
  std::copy(x.values.data(), x.values.data() + x.values.size(), xs.data());
  TensorT<T> beta;
  TensorT<T> ys = detail::attend_positions(xs, p, opts.retain_beta, &beta);
  AttentionOutputT<T> out;
  out.features = FeatureMapT<T>(x.channels, x.height, x.width);
  std::copy(ys.data(), ys.data() + ys.size(), out.features.values.data());
  if (opts.retain_beta) {
    out.beta_layers.resize(1);
    out.beta_layers[0].push_back({0, 0, x.height, x.width, std::move(beta)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Block grid. Origins advance by the stride in raster order; the final block
// in each axis is the first one reaching or passing the edge, so the grid
// covers the map with right/bottom zero padding when not divisible.
// ---------------------------------------------------------------------------

inline std::vector<std::size_t> block_origins(std::size_t dim, std::size_t block,
                                              std::size_t stride) {
  std::vector<std::size_t> origins;
  std::size_t o = 0;
  while (true) {
    origins.push_back(o);
    if (o + block >= dim) break;
    o += stride;
  }
  return origins;
}

// ceil((dim - (B - s)) / s), clamped to >= 1; equals block_origins().size()
inline std::size_t block_grid_count(std::size_t dim, std::size_t block, std::size_t stride) {
  if (dim <= block) return 1;
  const std::size_t span = dim - (block - stride);
  return (span + stride - 1) / stride;
}

namespace detail {

// number of blocks whose [o, o+B) interval covers the pixel, per axis
inline std::vector<std::uint32_t> axis_coverage(std::size_t dim, std::size_t block,
                                                const std::vector<std::size_t>& origins) {
  std::vector<std::uint32_t> cov(dim, 0);
  for (const std::size_t o : origins) {
    const std::size_t end = std::min(dim, o + block);
    for (std::size_t p = o; p < end; ++p) ++cov[p];
  }
  return cov;
}

// gather a BxB block, zero-filled where it overhangs the padded edge
template <class T>
inline TensorT<T> gather_block(const FeatureMapT<T>& x, std::size_t r0, std::size_t c0,
                               std::size_t b) {
  TensorT<T> xs({x.channels, b * b});
  for (std::size_t c = 0; c < x.channels; ++c) {
    T* dst = xs.data() + c * b * b;
    for (std::size_t by = 0; by < b; ++by) {
      const std::size_t y = r0 + by;
      if (y >= x.height) break;  // rows below are padding, already zero
      const T* src = x.values.data() + (c * x.height + y) * x.width + c0;
      const std::size_t cols = std::min(b, x.width - c0);
      std::copy(src, src + cols, dst + by * b);
    }
  }
  return xs;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// One block-wise attention layer.
// ---------------------------------------------------------------------------

template <class T>
inline AttentionOutputT<T> blockwise_attention_layer(const FeatureMapT<T>& x,
                                                     const AttentionConfig& cfg,
                                                     const AttentionParamsT<T>& p,
                                                     bool retain_beta = false) {
  cfg.validate();
  const std::size_t b = cfg.block_size;
  const auto rows = block_origins(x.height, b, cfg.stride);
  const auto cols = block_origins(x.width, b, cfg.stride);

  AttentionOutputT<T> out;
  if (retain_beta) out.beta_layers.resize(1);

  if (cfg.update_mode == UpdateMode::SequentialRaster) {
    // each block reads the current buffer (including earlier blocks' writes
    // in scan order) and overwrites its in-bounds region
    FeatureMapT<T> buffer = x;
    for (const std::size_t r0 : rows) {
      for (const std::size_t c0 : cols) {
        TensorT<T> xs = detail::gather_block(buffer, r0, c0, b);
        TensorT<T> beta;
        TensorT<T> ys = detail::attend_positions(xs, p, retain_beta, &beta);
        const std::size_t ylim = std::min(b, x.height - r0);
        const std::size_t xlim = std::min(b, x.width - c0);
        for (std::size_t c = 0; c < x.channels; ++c) {
          for (std::size_t by = 0; by < ylim; ++by) {
            const T* src = ys.data() + (c * b + by) * b;
            T* dst = buffer.values.data() + ((c * x.height) + r0 + by) * x.width + c0;
            for (std::size_t bx = 0; bx < xlim; ++bx) dst[bx] = src[bx];
          }
        }
        if (retain_beta) out.beta_layers[0].push_back({r0, c0, b, b, std::move(beta)});
      }
    }
    out.features = std::move(buffer);
    return out;
  }

  // parallel-average: all blocks read the original input, overlapping
  // outputs averaged per pixel by coverage count
  FeatureMapT<T> acc(x.channels, x.height, x.width);
  const auto cov_r = detail::axis_coverage(x.height, b, rows);
  const auto cov_c = detail::axis_coverage(x.width, b, cols);
  for (const std::size_t r0 : rows) {
    for (const std::size_t c0 : cols) {
      TensorT<T> xs = detail::gather_block(x, r0, c0, b);
      TensorT<T> beta;
      TensorT<T> ys = detail::attend_positions(xs, p, retain_beta, &beta);
      const std::size_t ylim = std::min(b, x.height - r0);
      const std::size_t xlim = std::min(b, x.width - c0);
      for (std::size_t c = 0; c < x.channels; ++c) {
        for (std::size_t by = 0; by < ylim; ++by) {
          const T* src = ys.data() + (c * b + by) * b;
          T* dst = acc.values.data() + ((c * x.height) + r0 + by) * x.width + c0;
          for (std::size_t bx = 0; bx < xlim; ++bx) dst[bx] += src[bx];
        }
      }
      if (retain_beta) out.beta_layers[0].push_back({r0, c0, b, b, std::move(beta)});
    }
  }
  for (std::size_t c = 0; c < x.channels; ++c) {
    for (std::size_t y = 0; y < x.height; ++y) {
      T* row = acc.values.data() + (c * x.height + y) * x.width;
      for (std::size_t xq = 0; xq < x.width; ++xq)
        row[xq] /= static_cast<T>(cov_r[y] * cov_c[xq]);
    }
  }
  out.features = std::move(acc);
  return out;
}

// n stacked block-wise layers; n=1 is the single attention block (SAB),
// n=2 the dual attention block (DAB)
template <class T>
inline AttentionOutputT<T> stacked_attention(const FeatureMapT<T>& x, const AttentionConfig& cfg,
                                             const std::vector<AttentionParamsT<T>>& params,
                                             bool retain_beta = false) {
  cfg.validate();
  const std::size_t expected = cfg.share_layer_params ? 1 : cfg.layers;
  check_config(params.size() == expected,
               "stacked_attention expects " + std::to_string(expected) + " parameter sets, got " +
                   std::to_string(params.size()));
  AttentionOutputT<T> out;
  out.features = x;
  for (std::size_t layer = 0; layer < cfg.layers; ++layer) {
    const auto& lp = cfg.share_layer_params ? params[0] : params[layer];
    AttentionOutputT<T> step = blockwise_attention_layer(out.features, cfg, lp, retain_beta);
    out.features = std::move(step.features);
    if (retain_beta) out.beta_layers.push_back(std::move(step.beta_layers[0]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Criss-cross attention: each position attends to the H+W-1 positions in its
// row and column (itself counted once), repeated `layers` times with shared
// parameters.
// ---------------------------------------------------------------------------

template <class T>
inline AttentionOutputT<T> crisscross_attention(const FeatureMapT<T>& x,
                                                const AttentionParamsT<T>& p,
                                                std::size_t layers = 2) {
  check_config(layers == 1 || layers == 2, "criss-cross layers must be 1 or 2");
  FeatureMapT<T> cur = x;
  const std::size_t h = x.height, w = x.width, support = h + w - 1;
  for (std::size_t rep = 0; rep < layers; ++rep) {
    const FeatureMapT<T> q = conv1x1(cur, p.query_w, p.query_b);
    const FeatureMapT<T> k = conv1x1(cur, p.key_w, p.key_b);
    const FeatureMapT<T> v = conv1x1(cur, p.value_w, p.value_b);
    const std::size_t cp = p.embed_channels();
    FeatureMapT<T> agg(cp, h, w);
    parallel_for(static_cast<std::int64_t>(h), [&](std::int64_t ri) {
      const std::size_t r = static_cast<std::size_t>(ri);
      std::vector<T> scores(support);
      std::vector<std::size_t> idx(support);
      for (std::size_t c0 = 0; c0 < w; ++c0) {
        // support: full row r, then column c0 without the center
        std::size_t m = 0;
        for (std::size_t cc = 0; cc < w; ++cc) idx[m++] = r * w + cc;
        for (std::size_t rr = 0; rr < h; ++rr)
          if (rr != r) idx[m++] = rr * w + c0;
        const std::size_t jpos = r * w + c0;
        for (std::size_t t = 0; t < support; ++t) {
          T s = T(0);
          for (std::size_t cc = 0; cc < cp; ++cc)
            s += q.values.data()[cc * h * w + idx[t]] * k.values.data()[cc * h * w + jpos];
          scores[t] = s;
        }
        T mx = scores[0];
        for (std::size_t t = 1; t < support; ++t) mx = std::max(mx, scores[t]);
        T denom = T(0);
        for (std::size_t t = 0; t < support; ++t) {
          scores[t] = std::exp(scores[t] - mx);
          denom += scores[t];
        }
        const T inv = T(1) / denom;
        for (std::size_t t = 0; t < support; ++t) scores[t] *= inv;
        for (std::size_t cc = 0; cc < cp; ++cc) {
          T s = T(0);
          const T* vplane = v.values.data() + cc * h * w;
          for (std::size_t t = 0; t < support; ++t) s += scores[t] * vplane[idx[t]];
          agg.values.data()[cc * h * w + jpos] = s;
        }
      }
    });
    FeatureMapT<T> proj = conv1x1(agg, p.out_w, p.out_b);
    for (std::size_t i = 0; i < proj.values.size(); ++i)
      proj.values.data()[i] += cur.values.data()[i];
    cur = std::move(proj);
  }
  AttentionOutputT<T> out;
  out.features = std::move(cur);
  return out;
}

// ---------------------------------------------------------------------------
// Attention-map extraction for a query pixel. Per layer, the query's beta
// rows from every block containing it are scattered into an HxW map and
// averaged per pixel over the contributing blocks; stacked layers compose so
// the map reflects attention flow from the input feature to the query.
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
inline TensorT<T> scatter_beta_row(const std::vector<BlockBetaT<T>>& blocks, std::size_t qr,
                                   std::size_t qc, std::size_t h, std::size_t w) {
  TensorT<T> sum({h, w});
  TensorT<T> count({h, w});
  for (const auto& blk : blocks) {
    if (qr < blk.row0 || qr >= blk.row0 + blk.brows || qc < blk.col0 ||
        qc >= blk.col0 + blk.bcols)
      continue;
    const std::size_t local = (qr - blk.row0) * blk.bcols + (qc - blk.col0);
    const T* row = blk.beta.data() + local * blk.brows * blk.bcols;
    for (std::size_t by = 0; by < blk.brows && blk.row0 + by < h; ++by) {
      for (std::size_t bx = 0; bx < blk.bcols && blk.col0 + bx < w; ++bx) {
        sum(blk.row0 + by, blk.col0 + bx) += row[by * blk.bcols + bx];
        count(blk.row0 + by, blk.col0 + bx) += T(1);
      }
    }
  }
  for (std::size_t i = 0; i < sum.size(); ++i)
    if (count(i) > T(0)) sum(i) /= count(i);
  return sum;
}

}  // namespace detail

template <class T>
inline TensorT<T> extract_attention_map(const AttentionOutputT<T>& out, std::size_t row,
                                        std::size_t col) {
  if (!out.has_beta()) throw StateError("attention map requested but beta was not retained");
  const std::size_t h = out.features.height, w = out.features.width;
  check_shape(row < h && col < w, "query pixel out of bounds");

  const std::size_t last = out.beta_layers.size() - 1;
  TensorT<T> map = detail::scatter_beta_row(out.beta_layers[last], row, col, h, w);
  for (std::size_t layer = last; layer-- > 0;) {
    TensorT<T> next({h, w});
    for (std::size_t mr = 0; mr < h; ++mr) {
      for (std::size_t mc = 0; mc < w; ++mc) {
        const T weight = map(mr, mc);
        if (weight == T(0)) continue;
        TensorT<T> inner = detail::scatter_beta_row(out.beta_layers[layer], mr, mc, h, w);
        for (std::size_t i = 0; i < next.size(); ++i) next(i) += weight * inner(i);
      }
    }
    map = std::move(next);
  }
  return map;
}

// ---------------------------------------------------------------------------
// Empirical contextual-field probe: bump one input pixel, rerun the stacked
// forward pass with randomized (value-path live) parameters, and report the
// bounding-box extent of the output change.
// ---------------------------------------------------------------------------

struct FieldExtent {
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// a pixel near the axis midpoint covered by exactly one block, when one exists
inline std::optional<std::size_t> single_coverage_pixel(std::size_t dim, std::size_t block,
                                                        std::size_t stride) {
  const auto origins = block_origins(dim, block, stride);
  const auto cov = detail::axis_coverage(dim, block, origins);
  std::optional<std::size_t> best;
  for (std::size_t p = 0; p < dim; ++p) {
    if (cov[p] != 1) continue;
    if (!best || std::llabs(static_cast<long long>(p) - static_cast<long long>(dim / 2)) <
                     std::llabs(static_cast<long long>(*best) - static_cast<long long>(dim / 2)))
      best = p;
  }
  return best;
}

template <class T>
inline FieldExtent measure_contextual_field(const AttentionConfig& cfg, std::size_t channels,
                                            std::size_t h, std::size_t w, std::size_t probe_r,
                                            std::size_t probe_c, std::uint64_t seed) {
  cfg.validate();
  Rng data_rng(derive_seed(seed, "field-probe-data"));
  FeatureMapT<T> x(channels, h, w);
  for (T& v : x.values.vec()) v = static_cast<T>(data_rng.uniform(-1.0, 1.0));
  std::vector<AttentionParamsT<T>> params;
  const std::size_t cp = cfg.embed_channels(channels);
  for (std::size_t l = 0; l < (cfg.share_layer_params ? 1 : cfg.layers); ++l) {
    Rng prng(derive_seed(seed, "field-probe-params-" + std::to_string(l)));
    params.push_back(AttentionParamsT<T>::random_full(channels, cp, prng));
  }
  const FeatureMapT<T> base = stacked_attention(x, cfg, params, false).features;
  for (std::size_t c = 0; c < channels; ++c) x.at(c, probe_r, probe_c) += T(0.5);
  const FeatureMapT<T> bumped = stacked_attention(x, cfg, params, false).features;

  std::size_t rmin = h, rmax = 0, cmin = w, cmax = 0;
  bool any = false;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xq = 0; xq < w; ++xq) {
      bool changed = false;
      for (std::size_t c = 0; c < channels; ++c) {
        if (std::abs(static_cast<double>(bumped.at(c, y, xq) - base.at(c, y, xq))) > 1e-12) {
          changed = true;
          break;
        }
      }
      if (changed) {
        any = true;
        rmin = std::min(rmin, y);
        rmax = std::max(rmax, y);
        cmin = std::min(cmin, xq);
        cmax = std::max(cmax, xq);
      }
    }
  }
  if (!any) return {0, 0};
  return {rmax - rmin + 1, cmax - cmin + 1};
}

}  // namespace blockattn
