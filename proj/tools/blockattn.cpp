// blockattn: verification, op counting, benchmarking, toy segmentation
// training/ablation, and attention-map export for block-wise self-attention.
//
// Exit codes: 0 success, 1 failure, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "blockattn/attention.hpp"
#include "blockattn/attention_grad.hpp"
#include "blockattn/complexity.hpp"
#include "blockattn/gradcheck.hpp"
#include "blockattn/io.hpp"
#include "blockattn/scene.hpp"
#include "blockattn/train.hpp"
#include "blockattn/unet.hpp"

namespace {

using namespace blockattn;

struct GeometryFlag {
  std::size_t c = 64, h = 128, w = 128;
};

GeometryFlag parse_geometry(const std::string& text) {
  GeometryFlag g;
  if (std::sscanf(text.c_str(), "%zu,%zu,%zu", &g.c, &g.h, &g.w) != 3 || g.c < 1 || g.h < 1 ||
      g.w < 1)
    throw CLI::ValidationError("--geometry expects C,H,W positive integers");
  return g;
}

FeatureMap random_map(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "cli-map"));
  FeatureMap x(c, h, w);
  for (double& v : x.values.vec()) v = rng.uniform(-1.0, 1.0);
  return x;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

struct VerifyCheck {
  std::string name;
  std::string detail;
  bool pass = false;
};

int run_verify(std::uint64_t seed, std::size_t instances, const std::string& csv_path,
               const std::string& inject_fault) {
  if (!inject_fault.empty()) {
    if (inject_fault == "softmax-grad-sign") {
      softmax_grad_fault() = true;
    } else {
      std::cerr << "unknown fault: " << inject_fault << "\n";
      return 2;
    }
  }
  std::vector<VerifyCheck> checks;

  // block-wise with one whole-map block vs global self-attention
  {
    double worst = 0.0;
    for (std::size_t i = 0; i < instances; ++i) {
      Rng rng(derive_seed(seed, "verify-equiv-" + std::to_string(i)));
      const std::size_t c = static_cast<std::size_t>(rng.uniform_int(1, 6));
      const std::size_t hw = static_cast<std::size_t>(rng.uniform_int(2, 12));
      const FeatureMap x = random_map(c, hw, hw, rng.next_u64());
      const AttentionParams p =
          AttentionParams::random_full(c, std::max<std::size_t>(1, c / 2), rng);
      AttentionConfig cfg;
      cfg.block_size = hw;
      cfg.stride = hw;
      const auto blockwise = blockwise_attention_layer(x, cfg, p);
      const auto global = global_self_attention(x, p);
      for (std::size_t k = 0; k < x.values.size(); ++k)
        worst = std::max(worst, std::abs(blockwise.features.values.vec()[k] -
                                         global.features.values.vec()[k]));
    }
    checks.push_back({"blockwise_vs_global_equivalence",
                      "max_abs_diff=" + format_double(worst), worst < 1e-10});
  }

  // beta rows are probability distributions
  {
    Rng rng(derive_seed(seed, "verify-beta"));
    const FeatureMap x = random_map(3, 10, 9, rng.next_u64());
    const AttentionParams p = AttentionParams::random_full(3, 1, rng);
    AttentionConfig cfg;
    cfg.block_size = 5;
    cfg.stride = 3;
    cfg.layers = 2;
    double worst = 0.0;
    const auto out = stacked_attention(x, cfg, {p, p}, true);
    for (const auto& layer : out.beta_layers)
      for (const auto& blk : layer)
        for (std::size_t r = 0; r < blk.beta.dim(0); ++r) {
          double sum = 0.0;
          for (std::size_t i = 0; i < blk.beta.dim(1); ++i) sum += blk.beta(r, i);
          worst = std::max(worst, std::abs(sum - 1.0));
        }
    checks.push_back({"beta_row_normalization", "max_row_sum_err=" + format_double(worst),
                      worst < 1e-10});
  }

  // zeroed value path must leave features untouched
  {
    Rng rng(derive_seed(seed, "verify-residual"));
    const FeatureMap x = random_map(4, 11, 8, rng.next_u64());
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
    const auto bw = stacked_attention(x, cfg, {p, p});
    const auto gl = global_self_attention(x, p);
    const auto cc = crisscross_attention(x, p, 2);
    for (std::size_t k = 0; k < x.values.size(); ++k) {
      exact = exact && bw.features.values.vec()[k] == x.values.vec()[k];
      exact = exact && gl.features.values.vec()[k] == x.values.vec()[k];
      exact = exact && cc.features.values.vec()[k] == x.values.vec()[k];
    }
    checks.push_back({"residual_identity_zero_value_path",
                      exact ? "exact" : "differs", exact});
  }

  const auto reports = run_attention_gradchecks(seed, instances);
  for (const auto& r : reports) {
    checks.push_back({r.op,
                      "probes=" + std::to_string(r.probe_count) +
                          " max_rel=" + format_double(r.max_rel_err) +
                          " max_abs=" + format_double(r.max_abs_err),
                      r.pass});
  }

  std::size_t name_w = 0;
  for (const auto& c : checks) name_w = std::max(name_w, c.name.size());
  bool all_pass = true;
  for (const auto& c : checks) {
    std::printf("%-*s  %-4s  %s\n", static_cast<int>(name_w), c.name.c_str(),
                c.pass ? "PASS" : "FAIL", c.detail.c_str());
    all_pass = all_pass && c.pass;
  }
  std::printf("verify: %s\n", all_pass ? "all checks passed" : "FAILURES present");
  if (!csv_path.empty()) write_file(csv_path, encode_grad_reports_csv(reports));
  return all_pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// counts / bench
// ---------------------------------------------------------------------------

int run_counts(const GeometryFlag& gf, const AttentionConfig& cfg, std::size_t cca_layers) {
  const Geometry g{gf.c, gf.h, gf.w};
  std::string csv = complexity_csv_header();
  for (const Method m : all_methods()) {
    const auto r = count_interactions(m, g, &cfg, cca_layers);
    csv += complexity_csv_row(m, g, &cfg, r.pairwise_interactions, cca_layers);
  }
  std::fputs(csv.c_str(), stdout);
  return 0;
}

template <class T>
double bench_forward(const std::string& method, const GeometryFlag& gf,
                     const AttentionConfig& cfg, std::size_t reps, double* mad) {
  Rng rng(derive_seed(1, "bench-" + method));
  FeatureMapT<T> x(gf.c, gf.h, gf.w);
  for (T& v : x.values.vec()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  const std::size_t cp = cfg.embed_channels(gf.c);
  std::vector<AttentionParamsT<T>> params;
  for (std::size_t l = 0; l < cfg.layers; ++l)
    params.push_back(AttentionParamsT<T>::random_full(gf.c, cp, rng));
  std::function<void()> kernel;
  if (method == "global-sa") {
    kernel = [&] { global_self_attention(x, params[0]); };
  } else if (method == "blockwise") {
    kernel = [&] { stacked_attention(x, cfg, params); };
  } else if (method == "cca") {
    kernel = [&] { crisscross_attention(x, params[0], 2); };
  } else {
    throw ConfigError("bench method must be global-sa|blockwise|cca, got " + method);
  }
  const BenchResult r = bench_wallclock(kernel, reps);
  *mad = r.mad_seconds;
  return r.median_seconds;
}

int run_bench(const GeometryFlag& gf, const AttentionConfig& cfg, std::size_t reps,
              const std::vector<std::string>& methods, const std::string& out_path,
              const std::string& precision) {
  const Geometry g{gf.c, gf.h, gf.w};
  std::string csv = complexity_csv_header();
  for (const std::string& name : methods) {
    double mad = 0.0;
    const double median = precision == "f32"
                              ? bench_forward<float>(name, gf, cfg, reps, &mad)
                              : bench_forward<double>(name, gf, cfg, reps, &mad);
    const Method m = name == "global-sa" ? Method::GlobalSA
                                         : (name == "cca" ? Method::CCA : Method::Blockwise);
    const auto count = count_interactions(m, g, &cfg, 2);
    csv += complexity_csv_row(m, g, &cfg, count.pairwise_interactions, 2,
                              format_double(median), format_double(mad));
    std::printf("%-10s median %.6f s  mad %.6f s\n", name.c_str(), median, mad);
  }
  if (!out_path.empty()) write_file(out_path, csv);
  return 0;
}

// ---------------------------------------------------------------------------
// train / ablate / attnmap
// ---------------------------------------------------------------------------

struct TrainFlags {
  std::uint64_t seed = 0;
  std::size_t epochs = 16;
  std::size_t batch = 1;
  std::string placement = "penultimate";
  std::size_t block = 9;
  std::size_t stride = 6;
  std::size_t layers = 2;
  std::string update_mode = "sequential-raster";
  bool share_params = false;
  double lr = 2e-4;
  std::size_t train_scenes = 48;
  std::size_t test_scenes = 48;

  TrainConfig to_config() const {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.epochs = epochs;
    cfg.batch_size = batch;
    cfg.lr = lr;
    cfg.placement = placement_from_string(placement);
    cfg.attn.block_size = block;
    cfg.attn.stride = stride;
    cfg.attn.layers = layers;
    cfg.attn.update_mode = update_mode_from_string(update_mode);
    cfg.attn.share_layer_params = share_params;
    cfg.attn.seed = seed;
    if (cfg.placement != Placement::None) cfg.attn.validate();
    return cfg;
  }

  std::vector<Scene> make_train_scenes() const {
    return generate_scenes(derive_seed(seed, "train-scenes"), train_scenes);
  }
  std::vector<Scene> make_test_scenes() const {
    return generate_scenes(derive_seed(seed, "test-scenes"), test_scenes);
  }
};

int run_train(const TrainFlags& flags, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const TrainConfig cfg = flags.to_config();
  const auto train_set = flags.make_train_scenes();
  const auto test_set = flags.make_test_scenes();
  ToyUnet model(cfg.unet_config());
  std::vector<double> curve;
  if (cfg.epochs > 0) curve = train(model, cfg, train_set);
  model.save_checkpoint(out_dir + "/checkpoint");
  write_file(out_dir + "/loss.csv", encode_loss_curve_csv(curve));
  const DiceReport report = evaluate(model, test_set);
  std::string dice_csv = dice_csv_header();
  dice_csv += dice_csv_row("train", "final", cfg, report);
  write_file(out_dir + "/dice.csv", dice_csv);
  std::printf("trained %s: placement=%s epochs=%zu", out_dir.c_str(),
              to_string(cfg.placement).c_str(), cfg.epochs);
  if (!curve.empty()) std::printf(" loss %.4f -> %.4f", curve.front(), curve.back());
  std::printf("\nper-class test DSC:");
  for (std::size_t k = 0; k + 1 < kSceneClasses; ++k)
    std::printf(" %zu:%.3f+-%.3f", k + 1, report.mean[k], report.sd[k]);
  std::printf("\n");
  return 0;
}

int run_ablate(const TrainFlags& flags, const std::vector<std::string>& axis_specs,
               const std::string& out_path) {
  std::vector<AblationAxis> axes;
  for (const std::string& spec : axis_specs) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--axis expects name=v1,v2,... got " + spec);
    AblationAxis axis;
    axis.name = spec.substr(0, eq);
    std::string rest = spec.substr(eq + 1);
    std::size_t pos = 0;
    while (pos != std::string::npos) {
      const auto comma = rest.find(',', pos);
      axis.values.push_back(rest.substr(pos, comma == std::string::npos ? comma : comma - pos));
      pos = comma == std::string::npos ? comma : comma + 1;
    }
    axes.push_back(std::move(axis));
  }
  const TrainConfig base = flags.to_config();
  const std::string csv =
      ablation_run(axes, base, flags.make_train_scenes(), flags.make_test_scenes());
  if (out_path.empty())
    std::fputs(csv.c_str(), stdout);
  else
    write_file(out_path, csv);
  return 0;
}

int run_attnmap(const std::string& checkpoint, std::uint64_t scene_seed, const std::string& pixel,
                const std::string& out_dir) {
  ToyUnet model = ToyUnet::load_checkpoint(checkpoint);
  if (model.config().placement == Placement::None) {
    std::cerr << "checkpoint has no attention module; train with --placement penultimate|last\n";
    return 1;
  }
  const Scene scene = generate_scene(scene_seed);
  model.forward(scene.image, false);
  const FeatureMap& feat = model.attention_input();
  std::size_t pr = feat.height / 2, pc = feat.width / 2;
  if (!pixel.empty() && std::sscanf(pixel.c_str(), "%zu,%zu", &pr, &pc) != 2)
    throw ConfigError("--pixel expects r,c");
  check_config(pr < feat.height && pc < feat.width, "query pixel outside the attention feature");

  std::filesystem::create_directories(out_dir);
  const AttentionConfig& cfg = model.config().attn;
  auto& params = model.attention_params();

  AttentionConfig sab = cfg;
  sab.layers = 1;
  const auto sab_out = stacked_attention(feat, sab, {params[0]}, true);
  const Tensor sab_map = extract_attention_map(sab_out, pr, pc);
  write_pgm(out_dir + "/sab.pgm", sab_map);
  write_btf1(out_dir + "/sab.btf1", sab_map);

  if (cfg.layers >= 2) {
    const auto dab_out = stacked_attention(feat, cfg, params, true);
    const Tensor dab_map = extract_attention_map(dab_out, pr, pc);
    write_pgm(out_dir + "/dab.pgm", dab_map);
    write_btf1(out_dir + "/dab.btf1", dab_map);
  }

  GlobalAttentionOptions opts;
  opts.retain_beta = true;
  const auto global_out = global_self_attention(feat, params[0], opts);
  const Tensor global_map = extract_attention_map(global_out, pr, pc);
  write_pgm(out_dir + "/global.pgm", global_map);
  write_btf1(out_dir + "/global.btf1", global_map);

  std::printf("attention maps for pixel (%zu,%zu) on the %zux%zu feature written to %s\n", pr, pc,
              feat.height, feat.width, out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"block-wise self-attention toolkit"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "intra-op thread cap (0 = hardware)");

  // verify
  auto* verify = app.add_subcommand("verify", "oracle-equivalence and gradient checks");
  std::uint64_t v_seed = 0;
  std::size_t v_instances = 5;
  std::string v_csv, v_fault;
  verify->add_option("--seed", v_seed);
  verify->add_option("--instances", v_instances, "random instances per check");
  verify->add_option("--csv", v_csv, "write GradReports as CSV");
  verify->add_option("--inject-fault", v_fault)->group("");  // test fixture, hidden

  // counts
  auto* counts = app.add_subcommand("counts", "pairwise-interaction counts per method");
  std::string c_geom = "64,128,128";
  std::size_t c_block = 36, c_stride = 24, c_layers = 2, c_cca_layers = 2;
  counts->add_option("--geometry", c_geom, "C,H,W");
  counts->add_option("--block", c_block);
  counts->add_option("--stride", c_stride);
  counts->add_option("--layers", c_layers);
  counts->add_option("--cca-layers", c_cca_layers);

  // bench
  auto* bench = app.add_subcommand("bench", "wall-clock forward benchmark (single-threaded)");
  std::string b_geom = "64,128,128", b_out, b_precision = "f64";
  std::size_t b_block = 36, b_stride = 24, b_layers = 2, b_reps = 20;
  std::vector<std::string> b_methods = {"global-sa", "blockwise"};
  bench->add_option("--geometry", b_geom, "C,H,W");
  bench->add_option("--block", b_block);
  bench->add_option("--stride", b_stride);
  bench->add_option("--layers", b_layers);
  bench->add_option("--reps", b_reps);
  bench->add_option("--methods", b_methods, "subset of global-sa,blockwise,cca")->delimiter(',');
  bench->add_option("--out", b_out, "timing CSV path");
  bench->add_option("--precision", b_precision)->check(CLI::IsMember({"f64", "f32"}));

  // train
  auto* train_cmd = app.add_subcommand("train", "train the toy U-net on synthetic scenes");
  TrainFlags t_flags;
  std::string t_out = "train-out";
  train_cmd->add_option("--out", t_out, "output directory");
  train_cmd->add_option("--seed", t_flags.seed);
  train_cmd->add_option("--epochs", t_flags.epochs);
  train_cmd->add_option("--batch", t_flags.batch);
  train_cmd->add_option("--placement", t_flags.placement)
      ->check(CLI::IsMember({"none", "penultimate", "last"}));
  train_cmd->add_option("--block", t_flags.block);
  train_cmd->add_option("--stride", t_flags.stride);
  train_cmd->add_option("--attn-layers", t_flags.layers);
  train_cmd->add_option("--update-mode", t_flags.update_mode)
      ->check(CLI::IsMember({"sequential-raster", "parallel-average"}));
  train_cmd->add_flag("--share-params", t_flags.share_params);
  train_cmd->add_option("--lr", t_flags.lr);
  train_cmd->add_option("--train-scenes", t_flags.train_scenes);
  train_cmd->add_option("--test-scenes", t_flags.test_scenes);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train one model per axis setting");
  TrainFlags a_flags;
  std::string a_out;
  std::vector<std::string> a_axes;
  ablate->add_option("--axis", a_axes, "name=v1,v2,... (layers|placement|block|overlap)")
      ->required();
  ablate->add_option("--out", a_out, "CSV path (default stdout)");
  ablate->add_option("--seed", a_flags.seed);
  ablate->add_option("--epochs", a_flags.epochs);
  ablate->add_option("--batch", a_flags.batch);
  ablate->add_option("--placement", a_flags.placement)
      ->check(CLI::IsMember({"none", "penultimate", "last"}));
  ablate->add_option("--block", a_flags.block);
  ablate->add_option("--stride", a_flags.stride);
  ablate->add_option("--attn-layers", a_flags.layers);
  ablate->add_option("--update-mode", a_flags.update_mode)
      ->check(CLI::IsMember({"sequential-raster", "parallel-average"}));
  ablate->add_option("--lr", a_flags.lr);
  ablate->add_option("--train-scenes", a_flags.train_scenes);
  ablate->add_option("--test-scenes", a_flags.test_scenes);

  // attnmap
  auto* attnmap = app.add_subcommand("attnmap", "export attention heat maps for a query pixel");
  std::string m_checkpoint, m_pixel, m_out = "attnmap-out";
  std::uint64_t m_scene_seed = 0;
  attnmap->add_option("--checkpoint", m_checkpoint)->required();
  attnmap->add_option("--scene-seed", m_scene_seed);
  attnmap->add_option("--pixel", m_pixel, "query r,c on the attention feature");
  attnmap->add_option("--out", m_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (threads != 0) set_thread_cap(threads);

  try {
    if (*verify) return run_verify(v_seed, v_instances, v_csv, v_fault);
    if (*counts) {
      AttentionConfig cfg;
      cfg.block_size = c_block;
      cfg.stride = c_stride;
      cfg.layers = c_layers;
      return run_counts(parse_geometry(c_geom), cfg, c_cca_layers);
    }
    if (*bench) {
      AttentionConfig cfg;
      cfg.block_size = b_block;
      cfg.stride = b_stride;
      cfg.layers = b_layers;
      return run_bench(parse_geometry(b_geom), cfg, b_reps, b_methods, b_out, b_precision);
    }
    if (*train_cmd) return run_train(t_flags, t_out);
    if (*ablate) return run_ablate(a_flags, a_axes, a_out);
    if (*attnmap) return run_attnmap(m_checkpoint, m_scene_seed, m_pixel, m_out);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
