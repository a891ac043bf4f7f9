#pragma once

// Training and evaluation for the toy segmentation task: ADAM on a pixelwise
// multi-class cross-entropy with inverse-frequency class weights, Dice
// evaluation, and the ablation driver. Deterministic given the seed: fixed
// init streams, fixed shuffle stream, fixed parameter iteration order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "blockattn/common.hpp"
#include "blockattn/io.hpp"
#include "blockattn/scene.hpp"
#include "blockattn/tensor.hpp"
#include "blockattn/unet.hpp"

namespace blockattn {

struct TrainConfig {
  double lr = 2e-4;  // initial ADAM learning rate
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 20;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  Placement placement = Placement::None;
  AttentionConfig attn = UnetConfig::default_attention();

  UnetConfig unet_config() const {
    UnetConfig u;
    u.placement = placement;
    u.attn = attn;
    u.seed = seed;
    return u;
  }
};

// w_k = total / (K * count_k) over the training labels; absent classes get 0
inline std::vector<double> inverse_frequency_weights(const std::vector<Scene>& scenes) {
  std::vector<std::uint64_t> counts(kSceneClasses, 0);
  std::uint64_t total = 0;
  for (const auto& s : scenes)
    for (const std::uint8_t v : s.labels) {
      ++counts[v];
      ++total;
    }
  std::vector<double> w(kSceneClasses, 0.0);
  for (std::size_t k = 0; k < kSceneClasses; ++k)
    if (counts[k] > 0)
      w[k] = static_cast<double>(total) /
             (static_cast<double>(kSceneClasses) * static_cast<double>(counts[k]));
  return w;
}

// weighted pixelwise cross-entropy; fills grad (dLoss/dlogits) when non-null
inline double cross_entropy_loss(const FeatureMap& logits, const std::vector<std::uint8_t>& labels,
                                 const std::vector<double>& class_weights,
                                 FeatureMap* grad = nullptr) {
  const std::size_t k_n = logits.channels, hw = logits.pixels();
  check_shape(labels.size() == hw, "label raster does not match logits");
  if (grad != nullptr) *grad = FeatureMap(k_n, logits.height, logits.width);
  double loss = 0.0, weight_total = 0.0;
  for (std::size_t p = 0; p < hw; ++p) weight_total += class_weights[labels[p]];
  check_config(weight_total > 0.0, "all pixels have zero class weight");
  std::vector<double> probs(k_n);
  for (std::size_t p = 0; p < hw; ++p) {
    double mx = logits.values.data()[p];
    for (std::size_t k = 1; k < k_n; ++k) mx = std::max(mx, logits.values.data()[k * hw + p]);
    double denom = 0.0;
    for (std::size_t k = 0; k < k_n; ++k) {
      probs[k] = std::exp(logits.values.data()[k * hw + p] - mx);
      denom += probs[k];
    }
    const double w = class_weights[labels[p]] / weight_total;
    const std::uint8_t y = labels[p];
    loss -= w * (std::log(probs[y]) - std::log(denom));
    if (grad != nullptr) {
      for (std::size_t k = 0; k < k_n; ++k) {
        const double soft = probs[k] / denom;
        grad->values.data()[k * hw + p] = w * (soft - (k == y ? 1.0 : 0.0));
      }
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// ADAM with bias correction over a model's trainable parameters.
// ---------------------------------------------------------------------------

class AdamOptimizer {
 public:
  AdamOptimizer(ToyUnet& model, const TrainConfig& cfg) : model_(&model), cfg_(cfg) {
    for (const auto& ref : model.params()) {
      if (!ref.trainable) continue;
      m_.emplace_back(ref.value->dims());
      v_.emplace_back(ref.value->dims());
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t slot = 0;
    for (const auto& ref : model_->params()) {
      if (!ref.trainable) continue;
      Tensor& m = m_[slot];
      Tensor& v = v_[slot];
      ++slot;
      for (std::size_t i = 0; i < ref.value->size(); ++i) {
        const double g = (*ref.grad)(i);
        m(i) = cfg_.beta1 * m(i) + (1.0 - cfg_.beta1) * g;
        v(i) = cfg_.beta2 * v(i) + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m(i) / bc1;
        const double vhat = v(i) / bc2;
        (*ref.value)(i) -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      }
    }
  }

 private:
  ToyUnet* model_;
  TrainConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop. Returns the per-epoch mean loss curve.
// ---------------------------------------------------------------------------

inline std::vector<double> train(ToyUnet& model, const TrainConfig& cfg,
                                 const std::vector<Scene>& scenes) {
  check_config(!scenes.empty(), "training needs at least one scene");
  const std::vector<double> class_weights = inverse_frequency_weights(scenes);
  AdamOptimizer opt(model, cfg);
  std::vector<double> curve;
  curve.reserve(cfg.epochs);
  std::vector<std::size_t> order(scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle-" + std::to_string(epoch)));
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    double epoch_loss = 0.0;
    std::size_t in_batch = 0;
    model.zero_grads();
    for (std::size_t step = 0; step < order.size(); ++step) {
      const Scene& scene = scenes[order[step]];
      const FeatureMap logits = model.forward(scene.image, true);
      FeatureMap grad;
      const double loss = cross_entropy_loss(logits, scene.labels, class_weights, &grad);
      if (!std::isfinite(loss))
        throw TrainError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                         std::to_string(step) + "; check the learning rate and initialization");
      epoch_loss += loss;
      model.backward(grad);
      if (++in_batch == cfg.batch_size || step + 1 == order.size()) {
        if (in_batch > 1) {
          const double inv = 1.0 / static_cast<double>(in_batch);
          for (const auto& ref : model.params())
            if (ref.trainable)
              for (std::size_t i = 0; i < ref.grad->size(); ++i) (*ref.grad)(i) *= inv;
        }
        opt.step();
        model.zero_grads();
        in_batch = 0;
      }
    }
    curve.push_back(epoch_loss / static_cast<double>(scenes.size()));
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Prediction and Dice evaluation.
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> argmax_mask(const FeatureMap& logits) {
  const std::size_t hw = logits.pixels();
  std::vector<std::uint8_t> mask(hw, 0);
  for (std::size_t p = 0; p < hw; ++p) {
    std::size_t best = 0;
    double best_v = logits.values.data()[p];
    for (std::size_t k = 1; k < logits.channels; ++k) {
      const double v = logits.values.data()[k * hw + p];
      if (v > best_v) {
        best_v = v;
        best = k;
      }
    }
    mask[p] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

inline std::vector<std::uint8_t> predict_mask(ToyUnet& model, const Scene& scene) {
  return argmax_mask(model.forward(scene.image, false));
}

// 2|A n B| / (|A| + |B|); 1.0 when both sets are empty, 0.0 when exactly one is
inline double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth,
                   std::uint8_t cls) {
  check_shape(pred.size() == truth.size(), "dice rasters must have equal dims");
  std::size_t inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool pa = pred[i] == cls, pb = truth[i] == cls;
    a += pa;
    b += pb;
    inter += pa && pb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

struct DiceReport {
  // indexed by class id 1..4 at [k-1]
  std::vector<double> mean;
  std::vector<double> sd;
  std::vector<std::vector<double>> per_scene;  // [class][scene]

  double mean_over(const std::vector<std::uint8_t>& classes) const {
    double s = 0.0;
    for (const std::uint8_t k : classes) s += mean[k - 1];
    return s / static_cast<double>(classes.size());
  }
};

inline DiceReport evaluate(ToyUnet& model, const std::vector<Scene>& scenes) {
  DiceReport report;
  report.per_scene.assign(kSceneClasses - 1, {});
  for (const auto& scene : scenes) {
    const auto mask = predict_mask(model, scene);
    for (std::size_t k = 1; k < kSceneClasses; ++k)
      report.per_scene[k - 1].push_back(dice(mask, scene.labels, static_cast<std::uint8_t>(k)));
  }
  report.mean.assign(kSceneClasses - 1, 0.0);
  report.sd.assign(kSceneClasses - 1, 0.0);
  for (std::size_t k = 0; k + 1 < kSceneClasses; ++k) {
    const auto& vals = report.per_scene[k];
    double s = 0.0;
    for (const double v : vals) s += v;
    const double mean = s / static_cast<double>(vals.size());
    double sq = 0.0;
    for (const double v : vals) sq += (v - mean) * (v - mean);
    report.mean[k] = mean;
    report.sd[k] = std::sqrt(sq / static_cast<double>(vals.size()));
  }
  return report;
}

inline std::string encode_loss_curve_csv(const std::vector<double>& curve) {
  std::string out = "epoch,mean_loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i)
    out += std::to_string(i) + "," + format_double(curve[i]) + "\n";
  return out;
}

inline std::string dice_csv_header() {
  return "setting,value,placement,layers,block,stride,update_mode,"
         "dsc1_mean,dsc1_sd,dsc2_mean,dsc2_sd,dsc3_mean,dsc3_sd,dsc4_mean,dsc4_sd,organ_mean\n";
}

inline std::string dice_csv_row(const std::string& setting, const std::string& value,
                                const TrainConfig& cfg, const DiceReport& r) {
  std::string row = setting + "," + value + "," + to_string(cfg.placement);
  if (cfg.placement != Placement::None) {
    row += "," + std::to_string(cfg.attn.layers) + "," + std::to_string(cfg.attn.block_size) +
           "," + std::to_string(cfg.attn.stride) + "," + to_string(cfg.attn.update_mode);
  } else {
    row += ",,,,";
  }
  double organ_mean = 0.0;
  for (std::size_t k = 0; k + 1 < kSceneClasses; ++k) {
    row += "," + format_double(r.mean[k]) + "," + format_double(r.sd[k]);
    organ_mean += r.mean[k];
  }
  row += "," + format_double(organ_mean / static_cast<double>(kSceneClasses - 1)) + "\n";
  return row;
}

// ---------------------------------------------------------------------------
// Ablation driver: one training run per axis setting, shared seeds so rows
// differ only in the varied knob.
// ---------------------------------------------------------------------------

struct AblationAxis {
  std::string name;                 // layers | placement | block | overlap
  std::vector<std::string> values;  // e.g. {"1","2"} or {"overlap","non-overlap"}
};

inline TrainConfig apply_axis_setting(TrainConfig cfg, const std::string& axis,
                                      const std::string& value) {
  if (axis == "layers") {
    cfg.attn.layers = std::stoull(value);
  } else if (axis == "placement") {
    cfg.placement = placement_from_string(value);
  } else if (axis == "block") {
    cfg.attn.block_size = std::stoull(value);
    // keep the 3:2 overlap ratio unless the stride no longer fits
    cfg.attn.stride = std::max<std::size_t>(1, (cfg.attn.block_size * 2 + 2) / 3);
  } else if (axis == "overlap") {
    if (value == "overlap")
      cfg.attn.stride = std::max<std::size_t>(1, (cfg.attn.block_size * 2 + 2) / 3);
    else if (value == "non-overlap")
      cfg.attn.stride = cfg.attn.block_size;
    else
      throw ConfigError("overlap axis value must be overlap|non-overlap");
  } else {
    throw ConfigError("unknown ablation axis: " + axis);
  }
  return cfg;
}

inline std::string ablation_run(const std::vector<AblationAxis>& axes, const TrainConfig& base,
                                const std::vector<Scene>& train_scenes,
                                const std::vector<Scene>& test_scenes) {
  check_config(!axes.empty(), "ablation needs at least one axis");
  std::string csv = dice_csv_header();
  for (const auto& axis : axes) {
    for (const auto& value : axis.values) {
      TrainConfig cfg = apply_axis_setting(base, axis.name, value);
      ToyUnet model(cfg.unet_config());
      train(model, cfg, train_scenes);
      const DiceReport report = evaluate(model, test_scenes);
      csv += dice_csv_row(axis.name, value, cfg, report);
    }
  }
  return csv;
}

}  // namespace blockattn
