// Acceptance suite: one pass/fail line per criterion, exit 0 iff all pass.
// Each criterion pins its tolerance in code; stated runtime budgets are
// enforced as part of the verdict.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "blockattn/attention.hpp"
#include "blockattn/attention_grad.hpp"
#include "blockattn/complexity.hpp"
#include "blockattn/gradcheck.hpp"
#include "blockattn/scene.hpp"
#include "blockattn/train.hpp"
#include "blockattn/unet.hpp"
#include "support/oracles.hpp"

using namespace blockattn;

namespace {

using clock_type = std::chrono::steady_clock;

struct Criterion {
  int id;
  std::string name;
  bool pass;
  std::string detail;
  double seconds;
};

std::vector<Criterion> g_results;

void record(int id, const std::string& name, bool pass, const std::string& detail,
            double seconds) {
  g_results.push_back({id, name, pass, detail, seconds});
  std::printf("[%s] criterion %d: %s — %s (%.1f s)\n", pass ? "PASS" : "FAIL", id, name.c_str(),
              detail.c_str(), seconds);
  std::fflush(stdout);
}

FeatureMap random_map(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
  FeatureMap x(c, h, w);
  for (double& v : x.values.vec()) v = rng.uniform(-1.0, 1.0);
  return x;
}

// 1. block-wise attention as a single whole-map block vs the literal Eq. 1-2
//    brute force, 20 random instances up to 8x24x24, 1e-10 absolute, < 10 s
void criterion_1() {
  const auto t0 = clock_type::now();
  double worst = 0.0;
  const int instances = 20;
  for (int i = 0; i < instances; ++i) {
    Rng rng(derive_seed(2024, "acc1-" + std::to_string(i)));
    const std::size_t c = static_cast<std::size_t>(rng.uniform_int(1, 8));
    const std::size_t hw = static_cast<std::size_t>(rng.uniform_int(2, 24));
    const FeatureMap x = random_map(c, hw, hw, rng);
    const AttentionParams p =
        AttentionParams::random_full(c, std::max<std::size_t>(1, c / 2), rng);
    AttentionConfig cfg;
    cfg.block_size = hw;
    cfg.stride = hw;
    cfg.update_mode = i % 2 ? UpdateMode::SequentialRaster : UpdateMode::ParallelAverage;
    const auto got = blockwise_attention_layer(x, cfg, p);
    const FeatureMap want = oracle::global_attention_bruteforce(x, p);
    worst = std::max(worst, oracle::max_abs_diff(got.features, want));
  }
  const double secs = std::chrono::duration<double>(clock_type::now() - t0).count();
  record(1, "oracle equivalence (single block vs brute-force global)",
         worst < 1e-10 && secs < 10.0,
         "max_abs_diff=" + format_double(worst) + " over 20 instances", secs);
}

// 2. the five complexity cells at C=64, H=W=128, exact integers
void criterion_2() {
  const auto t0 = clock_type::now();
  const Geometry g{64, 128, 128};
  AttentionConfig dab;
  dab.block_size = 36;
  dab.stride = 24;
  dab.layers = 2;
  struct Cell {
    Method m;
    std::uint64_t want;
  };
  const std::vector<Cell> cells = {{Method::GlobalSA, 268435456ull},
                                   {Method::DAN, 536870912ull},
                                   {Method::PSA, 1065369600ull},
                                   {Method::CCA, 8355840ull},
                                   {Method::Blockwise, 83980800ull}};
  bool ok = true;
  std::string detail;
  for (const auto& cell : cells) {
    const auto r = count_interactions(cell.m, g, &dab, 2);
    ok = ok && r.pairwise_interactions == cell.want;
    detail += to_string(cell.m) + "=" + std::to_string(r.pairwise_interactions) + " ";
  }
  const double secs = std::chrono::duration<double>(clock_type::now() - t0).count();
  record(2, "Table-1 complexity cells reproduce exactly", ok, detail, secs);
}

// 3. finite-difference certification of every attention variant, >= 20
//    instances each, < 2 min
void criterion_3() {
  const auto t0 = clock_type::now();
  const auto reports = run_attention_gradchecks(4242, 20);
  bool ok = true;
  std::string detail;
  for (const auto& r : reports) {
    ok = ok && r.pass;
    if (!r.pass) detail += r.op + " FAILED; ";
  }
  std::size_t probes = 0;
  for (const auto& r : reports) probes += r.probe_count;
  detail += std::to_string(reports.size()) + " variants, " + std::to_string(probes) + " probes";
  const double secs = std::chrono::duration<double>(clock_type::now() - t0).count();
  record(3, "gradient certification (rel<1e-4 or abs<1e-7, eps=1e-5)", ok && secs < 120.0,
         detail, secs);
}

// 4. empirical contextual field: B for n=1 and B+2s for n=2, exactly,
//    for (B,s) in {(8,4),(9,6),(12,8)}, < 1 min
void criterion_4() {
  const auto t0 = clock_type::now();
  struct Case {
    std::size_t b, s, dim;
  };
  const std::vector<Case> cases = {{8, 4, 32}, {9, 6, 33}, {12, 8, 44}};
  bool ok = true;
  std::string detail;
  for (const auto& cs : cases) {
    AttentionConfig cfg;
    cfg.block_size = cs.b;
    cfg.stride = cs.s;
    cfg.update_mode = UpdateMode::ParallelAverage;
    const auto pix = single_coverage_pixel(cs.dim, cs.b, cs.s);
    const std::size_t probe = pix ? *pix : cs.dim / 2;
    for (const std::size_t n : {std::size_t(1), std::size_t(2)}) {
      cfg.layers = n;
      const std::size_t expect = cs.b + 2 * cs.s * (n - 1);
      const auto ext = measure_contextual_field<double>(cfg, 2, cs.dim, cs.dim, probe, probe, 31);
      const bool match = ext.rows == expect && ext.cols == expect;
      ok = ok && match;
      detail += "(B=" + std::to_string(cs.b) + ",s=" + std::to_string(cs.s) + ",n=" +
                std::to_string(n) + ")->" + std::to_string(ext.rows) + "/" +
                std::to_string(expect) + (match ? " " : "<MISMATCH> ");
    }
  }
  const double secs = std::chrono::duration<double>(clock_type::now() - t0).count();
  record(4, "contextual-field reproduction by perturbation probing", ok && secs < 60.0, detail,
         secs);
}

// 5. single-threaded wall clock at C=64, H=W=128: block-wise strictly faster
//    than global, speedup > 1.3x over 20 reps
void criterion_5() {
  const auto t0 = clock_type::now();
  Rng rng(derive_seed(7, "acc5"));
  FeatureMap x(64, 128, 128);
  for (double& v : x.values.vec()) v = rng.uniform(-1.0, 1.0);
  const AttentionParams p0 = AttentionParams::random_full(64, 32, rng);
  const AttentionParams p1 = AttentionParams::random_full(64, 32, rng);
  AttentionConfig cfg;
  cfg.block_size = 36;
  cfg.stride = 24;
  cfg.layers = 2;
  cfg.update_mode = UpdateMode::SequentialRaster;
  const std::vector<AttentionParams> params = {p0, p1};
  const BenchResult blockwise =
      bench_wallclock([&] { stacked_attention(x, cfg, params); }, 20);
  const BenchResult global = bench_wallclock([&] { global_self_attention(x, p0); }, 20);
  const double speedup = global.median_seconds / blockwise.median_seconds;
  const bool ok = blockwise.median_seconds < global.median_seconds && speedup > 1.3;
  const double secs = std::chrono::duration<double>(clock_type::now() - t0).count();
  record(5, "wall-clock ordering (DAB vs global SA, 20 reps, 1 thread)", ok,
         "global=" + format_double(global.median_seconds) +
             "s blockwise=" + format_double(blockwise.median_seconds) +
             "s speedup=" + format_double(speedup) + "x (count ratio 3.196)",
         secs);
}

// 6. DAB parameter overhead < 1% of the baseline U-net, exact counts
void criterion_6() {
  const auto t0 = clock_type::now();
  UnetConfig base_cfg;
  base_cfg.seed = 1;
  ToyUnet baseline(base_cfg);
  UnetConfig dab_cfg = base_cfg;
  dab_cfg.placement = Placement::Penultimate;
  dab_cfg.attn = UnetConfig::default_attention();
  ToyUnet dab(dab_cfg);
  const std::size_t nb = baseline.parameter_count(true);
  const std::size_t nd = dab.parameter_count(true);
  const double dm = static_cast<double>(nd - nb) / static_cast<double>(nb);
  const double secs = std::chrono::duration<double>(clock_type::now() - t0).count();
  record(6, "DAB parameter overhead below 1%", nd > nb && dm < 0.01,
         "baseline=" + std::to_string(nb) + " +DAB=" + std::to_string(nd) + " dm=" +
             format_double(dm * 100.0) + "%",
         secs);
}

// 7. toy segmentation: over 3 seeds, 48 train / 48 test scenes, mean
//    low-contrast-ellipse DSC with DAB (penultimate) >= baseline; plus the
//    overfit-one-sample trainer sanity check; < 30 min
void criterion_7() {
  const auto t0 = clock_type::now();
  const std::size_t epochs = 8;
  double base_sum = 0.0, dab_sum = 0.0;
  std::string detail;
  for (const std::uint64_t seed : {1ull, 2ull, 3ull}) {
    const auto train_scenes = generate_scenes(derive_seed(seed, "train-scenes"), 48);
    const auto test_scenes = generate_scenes(derive_seed(seed, "test-scenes"), 48);
    double vals[2] = {0.0, 0.0};
    for (int variant = 0; variant < 2; ++variant) {
      TrainConfig tc;
      tc.seed = seed;
      tc.epochs = epochs;
      tc.placement = variant ? Placement::Penultimate : Placement::None;
      ToyUnet model(tc.unet_config());
      train(model, tc, train_scenes);
      vals[variant] = evaluate(model, test_scenes).mean_over({1, 2});
    }
    base_sum += vals[0];
    dab_sum += vals[1];
    detail += "seed" + std::to_string(seed) + ": base=" + format_double(vals[0]) +
              " dab=" + format_double(vals[1]) + "; ";
    std::printf("  criterion 7 progress: %s\n", detail.c_str());
    std::fflush(stdout);
  }
  const double base_mean = base_sum / 3.0, dab_mean = dab_sum / 3.0;

  // trainer sanity: memorize one scene
  TrainConfig overfit_cfg;
  overfit_cfg.seed = 1;
  overfit_cfg.epochs = 200;
  overfit_cfg.placement = Placement::None;
  ToyUnet overfit_model(overfit_cfg.unet_config());
  const auto curve = train(overfit_model, overfit_cfg, {generate_scene(424242)});
  const double final_loss = curve.back();

  const double secs = std::chrono::duration<double>(clock_type::now() - t0).count();
  const bool ok = dab_mean >= base_mean && final_loss < 0.05 && secs < 1800.0;
  record(7, "toy segmentation: DAB >= baseline on low-contrast ellipses", ok,
         detail + "mean base=" + format_double(base_mean) + " dab=" + format_double(dab_mean) +
             "; overfit-one-sample loss=" + format_double(final_loss),
         secs);
}

// 8. invariant suite: beta normalization, exact zero-value-path identity,
//    dice symmetry and boundaries, bit-identical retraining; < 5 min
void criterion_8() {
  const auto t0 = clock_type::now();
  bool ok = true;
  std::string detail;

  {  // beta rows sum to 1 +- 1e-10 across variants
    Rng rng(derive_seed(88, "acc8-beta"));
    const FeatureMap x = random_map(3, 11, 10, rng);
    const AttentionParams p = AttentionParams::random_full(3, 1, rng);
    AttentionConfig cfg;
    cfg.block_size = 5;
    cfg.stride = 3;
    cfg.layers = 2;
    double worst = 0.0;
    for (const UpdateMode mode : {UpdateMode::SequentialRaster, UpdateMode::ParallelAverage}) {
      cfg.update_mode = mode;
      const auto out = stacked_attention(x, cfg, {p, p}, true);
      for (const auto& layer : out.beta_layers)
        for (const auto& blk : layer)
          for (std::size_t r = 0; r < blk.beta.dim(0); ++r) {
            double sum = 0.0;
            for (std::size_t i = 0; i < blk.beta.dim(1); ++i) sum += blk.beta(r, i);
            worst = std::max(worst, std::abs(sum - 1.0));
          }
    }
    GlobalAttentionOptions opts;
    opts.retain_beta = true;
    const auto gl = global_self_attention(x, p, opts);
    for (std::size_t r = 0; r < gl.beta_layers[0][0].beta.dim(0); ++r) {
      double sum = 0.0;
      for (std::size_t i = 0; i < gl.beta_layers[0][0].beta.dim(1); ++i)
        sum += gl.beta_layers[0][0].beta(r, i);
      worst = std::max(worst, std::abs(sum - 1.0));
    }
    ok = ok && worst < 1e-10;
    detail += "beta_sum_err=" + format_double(worst) + "; ";
  }

  {  // zero value path: exact identity for every variant
    Rng rng(derive_seed(88, "acc8-identity"));
    const FeatureMap x = random_map(4, 9, 12, rng);
    AttentionParams p = AttentionParams::random_full(4, 2, rng);
    p.value_w.fill(0.0);
    p.value_b.fill(0.0);
    p.out_w.fill(0.0);
    p.out_b.fill(0.0);
    AttentionConfig cfg;
    cfg.block_size = 4;
    cfg.stride = 3;
    cfg.layers = 2;
    bool exact = true;
    for (const UpdateMode mode : {UpdateMode::SequentialRaster, UpdateMode::ParallelAverage}) {
      cfg.update_mode = mode;
      const auto out = stacked_attention(x, cfg, {p, p});
      for (std::size_t i = 0; i < x.values.size(); ++i)
        exact = exact && out.features.values.vec()[i] == x.values.vec()[i];
    }
    const auto gl = global_self_attention(x, p);
    const auto cc = crisscross_attention(x, p, 2);
    for (std::size_t i = 0; i < x.values.size(); ++i) {
      exact = exact && gl.features.values.vec()[i] == x.values.vec()[i];
      exact = exact && cc.features.values.vec()[i] == x.values.vec()[i];
    }
    ok = ok && exact;
    detail += std::string("zero-value identity=") + (exact ? "exact" : "BROKEN") + "; ";
  }

  {  // dice edge cases and symmetry
    const std::vector<std::uint8_t> a = {1, 1, 0, 2}, b = {1, 0, 1, 2};
    bool dice_ok = dice(a, a, 1) == 1.0;
    dice_ok = dice_ok && dice(a, b, 1) == dice(b, a, 1);
    dice_ok = dice_ok && dice(a, b, 3) == 1.0;                      // both empty
    dice_ok = dice_ok && dice(a, std::vector<std::uint8_t>(4, 0), 1) == 0.0;  // one empty
    ok = ok && dice_ok;
    detail += std::string("dice=") + (dice_ok ? "ok" : "BROKEN") + "; ";
  }

  {  // retraining with an identical config is bit-identical
    const auto scenes = generate_scenes(880, 8);
    TrainConfig tc;
    tc.epochs = 2;
    tc.seed = 88;
    tc.placement = Placement::Penultimate;
    ToyUnet m1(tc.unet_config());
    ToyUnet m2(tc.unet_config());
    train(m1, tc, scenes);
    train(m2, tc, scenes);
    bool identical = true;
    auto r1 = m1.params();
    auto r2 = m2.params();
    for (std::size_t i = 0; i < r1.size(); ++i)
      identical = identical && std::memcmp(r1[i].value->data(), r2[i].value->data(),
                                           r1[i].value->size() * sizeof(double)) == 0;
    ok = ok && identical;
    detail += std::string("retrain=") + (identical ? "bit-identical" : "DIVERGED");
  }

  const double secs = std::chrono::duration<double>(clock_type::now() - t0).count();
  record(8, "invariant suite", ok && secs < 300.0, detail, secs);
}

}  // namespace

int main() {
  set_thread_cap(0);  // hardware threads; results are thread-count invariant
  std::printf("blockattn acceptance suite\n");
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_8();

  std::size_t passed = 0;
  for (const auto& c : g_results) passed += c.pass;
  std::printf("\n%zu/%zu criteria passed\n", passed, g_results.size());
  return passed == g_results.size() ? 0 : 1;
}
