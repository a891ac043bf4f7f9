#pragma once

// Exact integer pairwise-interaction counts per attention method and
// geometry, plus a single-threaded wall-clock micro-benchmark. A count is the
// number of query-key score evaluations; the value-aggregation multiply has
// the same count and is not double-counted.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "blockattn/attention.hpp"
#include "blockattn/common.hpp"

namespace blockattn {

struct Geometry {
  std::size_t channels = 64;
  std::size_t height = 128;
  std::size_t width = 128;
};

enum class Method { GlobalSA, DAN, PSA, CCA, Blockwise };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::GlobalSA: return "global-sa";
    case Method::DAN: return "dan";
    case Method::PSA: return "psa";
    case Method::CCA: return "cca";
    case Method::Blockwise: return "blockwise";
  }
  return "?";
}

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = {Method::GlobalSA, Method::DAN, Method::PSA,
                                              Method::CCA, Method::Blockwise};
  return methods;
}

struct OpCountReport {
  Method method = Method::GlobalSA;
  std::uint64_t pairwise_interactions = 0;
  std::string formula_text;
};

// cca_layers applies to the CCA row only; blockwise geometry comes from cfg
inline OpCountReport count_interactions(Method method, const Geometry& g,
                                        const AttentionConfig* cfg = nullptr,
                                        std::size_t cca_layers = 2) {
  const std::uint64_t h = g.height, w = g.width, hw = h * w;
  OpCountReport r;
  r.method = method;
  switch (method) {
    case Method::GlobalSA:
      r.pairwise_interactions = hw * hw;
      r.formula_text = std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(h) +
                       "x" + std::to_string(w);
      break;
    case Method::DAN:
      // spatial plus channel branch, written as 2(HW)^2
      r.pairwise_interactions = 2 * hw * hw;
      r.formula_text = std::to_string(2 * h) + "x" + std::to_string(w) + "x" + std::to_string(h) +
                       "x" + std::to_string(w);
      break;
    case Method::PSA:
      r.pairwise_interactions = hw * (2 * h - 1) * (2 * w - 1);
      r.formula_text = std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(2 * h - 1) +
                       "x" + std::to_string(2 * w - 1);
      break;
    case Method::CCA:
      r.pairwise_interactions = hw * (h + w - 1) * cca_layers;
      r.formula_text = std::to_string(h) + "x" + std::to_string(w) + "x" +
                       std::to_string(h + w - 1) + "x" + std::to_string(cca_layers);
      break;
    case Method::Blockwise: {
      check_config(cfg != nullptr, "blockwise count requires an attention config (B, s, n)");
      cfg->validate();
      const std::uint64_t b = cfg->block_size;
      const std::uint64_t grid_h = block_grid_count(g.height, cfg->block_size, cfg->stride);
      const std::uint64_t grid_w = block_grid_count(g.width, cfg->block_size, cfg->stride);
      r.pairwise_interactions = b * b * b * b * grid_h * grid_w * cfg->layers;
      r.formula_text = std::to_string(b) + "^2x" + std::to_string(b) + "^2x" +
                       std::to_string(grid_h) + "x" + std::to_string(grid_w) + "x" +
                       std::to_string(cfg->layers);
      break;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// CSV emission. Columns are fixed:
//   method,C,H,W,B,s,n,interactions,contextual_field,median_s,mad_s
// Counts are exact integers; fields that do not apply stay empty.
// ---------------------------------------------------------------------------

inline std::string complexity_csv_header() {
  return "method,C,H,W,B,s,n,interactions,contextual_field,median_s,mad_s\n";
}

inline std::string complexity_csv_row(Method method, const Geometry& g,
                                      const AttentionConfig* cfg, std::uint64_t interactions,
                                      std::size_t cca_layers = 2, const std::string& median_s = "",
                                      const std::string& mad_s = "") {
  std::string row = to_string(method);
  row += "," + std::to_string(g.channels) + "," + std::to_string(g.height) + "," +
         std::to_string(g.width);
  if (method == Method::Blockwise && cfg != nullptr) {
    row += "," + std::to_string(cfg->block_size) + "," + std::to_string(cfg->stride) + "," +
           std::to_string(cfg->layers);
  } else if (method == Method::CCA) {
    row += ",,," + std::to_string(cca_layers);
  } else {
    row += ",,,";
  }
  row += "," + std::to_string(interactions);
  row += ",";
  if (method == Method::Blockwise && cfg != nullptr)
    row += std::to_string(contextual_field(*cfg));
  row += "," + median_s + "," + mad_s + "\n";
  return row;
}

// cross product of geometries and blockwise configs, one row each
inline std::string sweep(const std::vector<Geometry>& geometries,
                         const std::vector<AttentionConfig>& configs) {
  check_config(!geometries.empty() && !configs.empty(), "sweep needs non-empty inputs");
  std::string out = complexity_csv_header();
  for (const auto& g : geometries) {
    for (const auto& cfg : configs) {
      const auto r = count_interactions(Method::Blockwise, g, &cfg);
      out += complexity_csv_row(Method::Blockwise, g, &cfg, r.pairwise_interactions);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Wall-clock micro-benchmark: median and median absolute deviation over
// `reps` calls after two warmups, forced single-threaded for comparability.
// ---------------------------------------------------------------------------

struct BenchResult {
  double median_seconds = 0.0;
  double mad_seconds = 0.0;
  std::vector<double> samples;
};

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline BenchResult bench_wallclock(const std::function<void()>& kernel, std::size_t reps) {
  check_config(reps >= 5, "bench needs reps >= 5");
  const int saved_cap = thread_cap();
  set_thread_cap(1);
  kernel();
  kernel();
  BenchResult result;
  result.samples.reserve(reps);
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    kernel();
    const auto t1 = std::chrono::steady_clock::now();
    result.samples.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  set_thread_cap(saved_cap);
  result.median_seconds = median_of(result.samples);
  std::vector<double> dev;
  dev.reserve(reps);
  for (const double s : result.samples) dev.push_back(std::abs(s - result.median_seconds));
  result.mad_seconds = median_of(dev);
  return result;
}

}  // namespace blockattn
