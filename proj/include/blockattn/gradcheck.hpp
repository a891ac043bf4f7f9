#pragma once

// Finite-difference certification of the hand-written adjoints. Central
// differences at eps=1e-5 in f64; a probed coordinate agrees when its
// relative error is < 1e-4 or its absolute error is < 1e-7. Tensors larger
// than 4x12x12 (576 elements) are probed on a random subset of <= 512
// coordinates, smaller ones exhaustively.

#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "blockattn/attention.hpp"
#include "blockattn/attention_grad.hpp"
#include "blockattn/common.hpp"
#include "blockattn/io.hpp"
#include "blockattn/tensor.hpp"

namespace blockattn {

struct GradReport {
  std::string op;
  double max_rel_err = 0.0;  // over coordinates whose absolute error is >= 1e-7
  double max_abs_err = 0.0;
  std::size_t probe_count = 0;
  bool pass = true;

  void merge(const GradReport& other) {
    max_rel_err = std::max(max_rel_err, other.max_rel_err);
    max_abs_err = std::max(max_abs_err, other.max_abs_err);
    probe_count += other.probe_count;
    pass = pass && other.pass;
  }
};

inline constexpr double kGradEps = 1e-5;
inline constexpr double kGradRelTol = 1e-4;
inline constexpr double kGradAbsTol = 1e-7;
inline constexpr std::size_t kFullScanLimit = 4 * 12 * 12;
inline constexpr std::size_t kMaxSampledProbes = 512;

// central differences of a scalar-valued map, every coordinate
inline Tensor finite_difference(const std::function<double(const Tensor&)>& fn, const Tensor& x,
                                double eps) {
  check_config(eps > 0.0, "finite_difference eps must be positive");
  Tensor grad(x.dims());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe(i);
    probe(i) = orig + eps;
    const double up = fn(probe);
    probe(i) = orig - eps;
    const double down = fn(probe);
    probe(i) = orig;
    grad(i) = (up - down) / (2.0 * eps);
  }
  return grad;
}

namespace detail {

struct ProbeTarget {
  Tensor* value;         // mutated in place while probing
  const Tensor* grad;    // analytic gradient to certify
};

inline GradReport finite_difference_check(const std::string& op,
                                          const std::function<double()>& loss,
                                          const std::vector<ProbeTarget>& targets, Rng& rng,
                                          double eps = kGradEps) {
  GradReport report;
  report.op = op;
  for (const auto& target : targets) {
    Tensor& value = *target.value;
    std::vector<std::size_t> coords(value.size());
    std::iota(coords.begin(), coords.end(), std::size_t(0));
    if (value.size() > kFullScanLimit) {
      for (std::size_t i = coords.size() - 1; i > 0; --i)
        std::swap(coords[i], coords[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
      coords.resize(kMaxSampledProbes);
    }
    for (const std::size_t idx : coords) {
      const double orig = value(idx);
      value(idx) = orig + eps;
      const double up = loss();
      value(idx) = orig - eps;
      const double down = loss();
      value(idx) = orig;
      const double fd = (up - down) / (2.0 * eps);
      const double analytic = (*target.grad)(idx);
      const double abs_err = std::abs(analytic - fd);
      report.max_abs_err = std::max(report.max_abs_err, abs_err);
      if (abs_err >= kGradAbsTol) {
        const double denom = std::max(std::abs(analytic), std::abs(fd));
        report.max_rel_err = std::max(report.max_rel_err, abs_err / denom);
      }
      ++report.probe_count;
    }
  }
  report.pass = report.max_rel_err < kGradRelTol || report.max_abs_err < kGradAbsTol;
  return report;
}

inline double weighted_sum(const FeatureMap& y, const FeatureMap& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.values.size(); ++i) s += y.values.vec()[i] * weights.values.vec()[i];
  return s;
}

inline FeatureMap random_map(std::size_t c, std::size_t h, std::size_t w, Rng& rng,
                             double scale = 1.0) {
  FeatureMap x(c, h, w);
  for (double& v : x.values.vec()) v = rng.uniform(-scale, scale);
  return x;
}

inline std::vector<ProbeTarget> param_targets(AttentionParams& p, const AttentionParamGrads& g) {
  return {{&p.query_w, &g.query_w}, {&p.query_b, &g.query_b}, {&p.key_w, &g.key_w},
          {&p.key_b, &g.key_b},     {&p.value_w, &g.value_w}, {&p.value_b, &g.value_b},
          {&p.out_w, &g.out_w},     {&p.out_b, &g.out_b}};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Per-variant checks on one random instance.
// ---------------------------------------------------------------------------

inline GradReport check_global_attention_grad(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "gc-global"));
  const std::size_t c = static_cast<std::size_t>(rng.uniform_int(1, 4));
  const std::size_t h = static_cast<std::size_t>(rng.uniform_int(2, 8));
  const std::size_t w = static_cast<std::size_t>(rng.uniform_int(2, 8));
  FeatureMap x = detail::random_map(c, h, w, rng);
  AttentionParams p = AttentionParams::random_full(c, std::max<std::size_t>(1, c / 2), rng);
  const FeatureMap weights = detail::random_map(c, h, w, rng);

  const auto back = backward_global_attention(x, p, weights);
  const auto loss = [&]() {
    return detail::weighted_sum(global_self_attention(x, p).features, weights);
  };
  std::vector<detail::ProbeTarget> targets = {{&x.values, &back.grad_x.values}};
  for (auto& t : detail::param_targets(p, back.grads)) targets.push_back(t);
  return detail::finite_difference_check("backward_global_attention", loss, targets, rng);
}

inline GradReport check_blockwise_attention_grad(std::uint64_t seed, std::size_t layers,
                                                 UpdateMode mode) {
  Rng rng(derive_seed(seed, "gc-blockwise-" + std::to_string(layers) + to_string(mode)));
  AttentionConfig cfg;
  cfg.block_size = static_cast<std::size_t>(rng.uniform_int(2, 6));
  // strides below B/2 explode the block count without adding gradient paths;
  // keep the probe loops affordable
  cfg.stride = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>((cfg.block_size + 1) / 2),
                      static_cast<std::int64_t>(cfg.block_size)));
  cfg.layers = layers;
  cfg.update_mode = mode;
  const std::size_t c = static_cast<std::size_t>(rng.uniform_int(1, 4));
  const std::size_t h = static_cast<std::size_t>(rng.uniform_int(4, 10));
  const std::size_t w = static_cast<std::size_t>(rng.uniform_int(4, 10));
  FeatureMap x = detail::random_map(c, h, w, rng);
  std::vector<AttentionParams> params;
  for (std::size_t l = 0; l < layers; ++l)
    params.push_back(AttentionParams::random_full(c, std::max<std::size_t>(1, c / 2), rng));
  const FeatureMap weights = detail::random_map(c, h, w, rng);

  const auto back = backward_stacked_attention(x, cfg, params, weights);
  const auto loss = [&]() {
    return detail::weighted_sum(stacked_attention(x, cfg, params).features, weights);
  };
  const std::string name = "backward_blockwise_attention[n=" + std::to_string(layers) + "," +
                           to_string(mode) + "]";
  std::vector<detail::ProbeTarget> targets = {{&x.values, &back.grad_x.values}};
  for (std::size_t l = 0; l < layers; ++l)
    for (auto& t : detail::param_targets(params[l], back.grads[l])) targets.push_back(t);
  return detail::finite_difference_check(name, loss, targets, rng);
}

inline GradReport check_crisscross_attention_grad(std::uint64_t seed, std::size_t layers = 2) {
  Rng rng(derive_seed(seed, "gc-cca-" + std::to_string(layers)));
  const std::size_t c = static_cast<std::size_t>(rng.uniform_int(1, 4));
  const std::size_t h = static_cast<std::size_t>(rng.uniform_int(2, 7));
  const std::size_t w = static_cast<std::size_t>(rng.uniform_int(2, 7));
  FeatureMap x = detail::random_map(c, h, w, rng);
  AttentionParams p = AttentionParams::random_full(c, std::max<std::size_t>(1, c / 2), rng);
  const FeatureMap weights = detail::random_map(c, h, w, rng);

  const auto back = backward_crisscross_attention(x, p, layers, weights);
  const auto loss = [&]() {
    return detail::weighted_sum(crisscross_attention(x, p, layers).features, weights);
  };
  std::vector<detail::ProbeTarget> targets = {{&x.values, &back.grad_x.values}};
  for (auto& t : detail::param_targets(p, back.grads)) targets.push_back(t);
  return detail::finite_difference_check("backward_crisscross_attention[n=" + std::to_string(layers) + "]",
                                         loss, targets, rng);
}

// every attention variant over `instances` random instances, reports merged
// per variant
inline std::vector<GradReport> run_attention_gradchecks(std::uint64_t seed,
                                                        std::size_t instances) {
  std::vector<GradReport> merged;
  const auto run = [&](const std::function<GradReport(std::uint64_t)>& check) {
    GradReport total;
    for (std::size_t i = 0; i < instances; ++i) {
      const GradReport r = check(derive_seed(seed, "instance-" + std::to_string(i)));
      if (total.op.empty()) total.op = r.op;
      total.merge(r);
    }
    merged.push_back(total);
  };
  run([](std::uint64_t s) { return check_global_attention_grad(s); });
  run([](std::uint64_t s) {
    return check_blockwise_attention_grad(s, 1, UpdateMode::ParallelAverage);
  });
  run([](std::uint64_t s) {
    return check_blockwise_attention_grad(s, 1, UpdateMode::SequentialRaster);
  });
  run([](std::uint64_t s) {
    return check_blockwise_attention_grad(s, 2, UpdateMode::ParallelAverage);
  });
  run([](std::uint64_t s) {
    return check_blockwise_attention_grad(s, 2, UpdateMode::SequentialRaster);
  });
  run([](std::uint64_t s) { return check_crisscross_attention_grad(s, 2); });
  return merged;
}

// ---------------------------------------------------------------------------
// Report formatting.
// ---------------------------------------------------------------------------

inline std::string format_grad_reports(const std::vector<GradReport>& reports) {
  std::size_t name_w = 2;
  for (const auto& r : reports) name_w = std::max(name_w, r.op.size());
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-*s  %8s  %12s  %12s  %s\n", static_cast<int>(name_w), "op",
                "probes", "max_rel", "max_abs", "result");
  out += line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof(line), "%-*s  %8zu  %12.3e  %12.3e  %s\n",
                  static_cast<int>(name_w), r.op.c_str(), r.probe_count, r.max_rel_err,
                  r.max_abs_err, r.pass ? "PASS" : "FAIL");
    out += line;
  }
  return out;
}

inline std::string encode_grad_reports_csv(const std::vector<GradReport>& reports) {
  std::string out = "op,probe_count,max_rel_err,max_abs_err,pass\n";
  for (const auto& r : reports) {
    out += r.op + "," + std::to_string(r.probe_count) + "," + format_double(r.max_rel_err) + "," +
           format_double(r.max_abs_err) + "," + (r.pass ? "1" : "0") + "\n";
  }
  return out;
}

}  // namespace blockattn
