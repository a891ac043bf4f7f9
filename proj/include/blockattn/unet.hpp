#pragma once

// Desk-scale U-net for 64x64 single-channel scenes: a 3-level encoder-decoder
// (16/32/64 channels, two conv-BN-ReLU units per stage), skip connections,
// and an optional block-wise attention module inserted after the penultimate
// layer (feature 16x32x32) or the last layer (16x64x64), ahead of the 1x1
// classification head. Forward and backward are hand-written; there is no
// autodiff graph.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "blockattn/attention.hpp"
#include "blockattn/attention_grad.hpp"
#include "blockattn/common.hpp"
#include "blockattn/io.hpp"
#include "blockattn/scene.hpp"
#include "blockattn/tensor.hpp"

namespace blockattn {

enum class Placement { None, Penultimate, Last };

inline std::string to_string(Placement p) {
  switch (p) {
    case Placement::None: return "none";
    case Placement::Penultimate: return "penultimate";
    case Placement::Last: return "last";
  }
  return "?";
}

inline Placement placement_from_string(const std::string& s) {
  if (s == "none") return Placement::None;
  if (s == "penultimate") return Placement::Penultimate;
  if (s == "last") return Placement::Last;
  throw ConfigError("unknown placement: " + s);
}

struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;  // null for non-trainable state (BN running stats)
  bool trainable = true;
};

namespace detail {

inline void conv3x3_backward(const FeatureMap& x, const Tensor& w, const FeatureMap& g,
                             FeatureMap& dx, Tensor& dw, Tensor& db) {
  const std::size_t co_n = w.dim(0), ci_n = w.dim(1), h = x.height, wd = x.width;
  parallel_for(static_cast<std::int64_t>(co_n), [&](std::int64_t co) {
    const double* gp = g.values.data() + static_cast<std::size_t>(co) * h * wd;
    double bs = 0.0;
    for (std::size_t p = 0; p < h * wd; ++p) bs += gp[p];
    db(static_cast<std::size_t>(co)) += bs;
    for (std::size_t c = 0; c < ci_n; ++c) {
      const double* xp = x.values.data() + c * h * wd;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const int dy = ky - 1, dxo = kx - 1;
          const std::size_t y0 = static_cast<std::size_t>(std::max(0, -dy));
          const std::size_t y1 = static_cast<std::size_t>(static_cast<int>(h) - std::max(0, dy));
          const std::size_t x0 = static_cast<std::size_t>(std::max(0, -dxo));
          const std::size_t x1 = static_cast<std::size_t>(static_cast<int>(wd) - std::max(0, dxo));
          double s = 0.0;
          for (std::size_t y = y0; y < y1; ++y) {
            const double* grow = gp + y * wd;
            const double* xrow = xp + (y + static_cast<std::size_t>(dy)) * wd +
                                 static_cast<std::size_t>(dxo);
            for (std::size_t xq = x0; xq < x1; ++xq) s += grow[xq] * xrow[xq];
          }
          dw(static_cast<std::size_t>(co), c, static_cast<std::size_t>(ky),
             static_cast<std::size_t>(kx)) += s;
        }
      }
    }
  });
  parallel_for(static_cast<std::int64_t>(ci_n), [&](std::int64_t c) {
    double* dxp = dx.values.data() + static_cast<std::size_t>(c) * h * wd;
    for (std::size_t co = 0; co < co_n; ++co) {
      const double* gp = g.values.data() + co * h * wd;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const double wv = w(co, static_cast<std::size_t>(c), static_cast<std::size_t>(ky),
                              static_cast<std::size_t>(kx));
          if (wv == 0.0) continue;
          // x(c, y+dy, x+dx) feeds g(co, y, x): scatter transposed
          const int dy = ky - 1, dxo = kx - 1;
          const std::size_t y0 = static_cast<std::size_t>(std::max(0, -dy));
          const std::size_t y1 = static_cast<std::size_t>(static_cast<int>(h) - std::max(0, dy));
          const std::size_t x0 = static_cast<std::size_t>(std::max(0, -dxo));
          const std::size_t x1 = static_cast<std::size_t>(static_cast<int>(wd) - std::max(0, dxo));
          for (std::size_t y = y0; y < y1; ++y) {
            const double* grow = gp + y * wd;
            double* dxrow = dxp + (y + static_cast<std::size_t>(dy)) * wd +
                            static_cast<std::size_t>(dxo);
            for (std::size_t xq = x0; xq < x1; ++xq) dxrow[xq] += wv * grow[xq];
          }
        }
      }
    }
  });
}

inline void conv1x1_backward(const FeatureMap& x, const Tensor& w, const FeatureMap& g,
                             FeatureMap& dx, Tensor& dw, Tensor& db) {
  const std::size_t co_n = w.dim(0), ci_n = w.dim(1), hw = x.pixels();
  for (std::size_t co = 0; co < co_n; ++co) {
    const double* gp = g.values.data() + co * hw;
    double bs = 0.0;
    for (std::size_t p = 0; p < hw; ++p) bs += gp[p];
    db(co) += bs;
    for (std::size_t c = 0; c < ci_n; ++c) {
      const double* xp = x.values.data() + c * hw;
      double s = 0.0;
      for (std::size_t p = 0; p < hw; ++p) s += gp[p] * xp[p];
      dw(co, c) += s;
      const double wv = w(co, c);
      double* dxp = dx.values.data() + c * hw;
      for (std::size_t p = 0; p < hw; ++p) dxp[p] += wv * gp[p];
    }
  }
}

}  // namespace detail

// conv3x3 + batch norm + ReLU, the paper's notion of one layer
struct ConvBnRelu {
  std::string name;
  Tensor w, b, gamma, beta;
  Tensor dw, db, dgamma, dbeta;
  Tensor run_mean, run_var;

  // forward cache
  FeatureMap in, conv_out, bn_out;
  BatchNormStats stats;
  bool cached_training = false;

  void init(const std::string& layer_name, std::size_t c_in, std::size_t c_out,
            std::uint64_t seed) {
    name = layer_name;
    w = Tensor({c_out, c_in, 3, 3});
    b = Tensor({c_out});
    gamma = Tensor({c_out}, 1.0);
    beta = Tensor({c_out});
    run_mean = Tensor({c_out});
    run_var = Tensor({c_out}, 1.0);
    Rng rng(derive_seed(seed, "unet-" + layer_name));
    const double bound = std::sqrt(6.0 / (static_cast<double>(c_in) * 9.0));
    for (double& v : w.vec()) v = rng.uniform(-bound, bound);
    zero_grads();
  }

  void zero_grads() {
    dw = Tensor(w.dims());
    db = Tensor(b.dims());
    dgamma = Tensor(gamma.dims());
    dbeta = Tensor(beta.dims());
  }

  FeatureMap forward(const FeatureMap& x, bool training) {
    in = x;
    cached_training = training;
    conv_out = conv3x3(x, w, b);
    bn_out = batchnorm2d(conv_out, gamma, beta, run_mean, run_var, training, &stats);
    return relu(bn_out);
  }

  FeatureMap backward(const FeatureMap& g_out) {
    const std::size_t c_out = w.dim(0), hw = in.pixels();
    // ReLU
    FeatureMap g_bn = g_out;
    for (std::size_t i = 0; i < g_bn.values.size(); ++i)
      if (bn_out.values.vec()[i] <= 0.0) g_bn.values.vec()[i] = 0.0;
    // batch norm (training statistics)
    check_config(cached_training, "backward requires a training-mode forward pass");
    FeatureMap g_conv(c_out, in.height, in.width);
    const double m = static_cast<double>(hw);
    for (std::size_t c = 0; c < c_out; ++c) {
      const double mean = stats.mean(c), var = stats.var(c);
      const double inv_std = 1.0 / std::sqrt(var + 1e-5);
      const double* xq = conv_out.values.data() + c * hw;
      const double* gq = g_bn.values.data() + c * hw;
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t p = 0; p < hw; ++p) {
        const double xhat = (xq[p] - mean) * inv_std;
        sum_g += gq[p];
        sum_gx += gq[p] * xhat;
      }
      dgamma(c) += sum_gx;
      dbeta(c) += sum_g;
      const double gm = gamma(c);
      double* out = g_conv.values.data() + c * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        const double xhat = (xq[p] - mean) * inv_std;
        out[p] = gm * inv_std * (gq[p] - sum_g / m - xhat * sum_gx / m);
      }
    }
    // conv
    FeatureMap g_in(in.channels, in.height, in.width);
    detail::conv3x3_backward(in, w, g_conv, g_in, dw, db);
    return g_in;
  }

  std::size_t trainable_count() const {
    return w.size() + b.size() + gamma.size() + beta.size();
  }

  void collect(std::vector<ParamRef>& out) {
    out.push_back({name + ".w", &w, &dw, true});
    out.push_back({name + ".b", &b, &db, true});
    out.push_back({name + ".gamma", &gamma, &dgamma, true});
    out.push_back({name + ".beta", &beta, &dbeta, true});
    out.push_back({name + ".run_mean", &run_mean, nullptr, false});
    out.push_back({name + ".run_var", &run_var, nullptr, false});
  }
};

struct UnetConfig {
  Placement placement = Placement::None;
  AttentionConfig attn;  // consulted when placement != None
  std::uint64_t seed = 0;

  static AttentionConfig default_attention() {
    // same 3:2 block-to-stride ratio as the reference setting, scaled to the
    // 32x32 penultimate feature
    AttentionConfig cfg;
    cfg.block_size = 9;
    cfg.stride = 6;
    cfg.layers = 2;
    cfg.update_mode = UpdateMode::SequentialRaster;
    return cfg;
  }
};

class ToyUnet {
 public:
  static constexpr std::size_t kClasses = kSceneClasses;

  explicit ToyUnet(const UnetConfig& cfg) : cfg_(cfg) {
    if (cfg_.placement != Placement::None) cfg_.attn.validate();
    enc1a_.init("enc1a", 1, 16, cfg.seed);
    enc1b_.init("enc1b", 16, 16, cfg.seed);
    enc2a_.init("enc2a", 16, 32, cfg.seed);
    enc2b_.init("enc2b", 32, 32, cfg.seed);
    bot_a_.init("bot_a", 32, 64, cfg.seed);
    bot_b_.init("bot_b", 64, 64, cfg.seed);
    dec2a_.init("dec2a", 96, 32, cfg.seed);
    dec2b_.init("dec2b", 32, 16, cfg.seed);
    dec1a_.init("dec1a", 32, 16, cfg.seed);
    dec1b_.init("dec1b", 16, 16, cfg.seed);
    head_w_ = Tensor({kClasses, 16});
    head_b_ = Tensor({kClasses});
    Rng rng(derive_seed(cfg.seed, "unet-head"));
    const double bound = std::sqrt(6.0 / 16.0);
    for (double& v : head_w_.vec()) v = rng.uniform(-bound, bound);
    if (cfg_.placement != Placement::None) {
      const std::size_t c = 16;
      const std::size_t cp = cfg_.attn.embed_channels(c);
      const std::size_t sets = cfg_.attn.share_layer_params ? 1 : cfg_.attn.layers;
      for (std::size_t l = 0; l < sets; ++l) {
        Rng arng(derive_seed(cfg.seed, "unet-attn-" + std::to_string(l)));
        attn_params_.push_back(AttentionParams::init(c, cp, arng));
        attn_grads_.push_back(AttentionParamGrads::zeros_like(attn_params_.back()));
      }
    }
    zero_grads();
  }

  const UnetConfig& config() const { return cfg_; }
  std::vector<AttentionParams>& attention_params() { return attn_params_; }

  FeatureMap forward(const FeatureMap& image, bool training) {
    check_shape(image.channels == 1, "expected a single-channel image");
    e1_ = enc1b_.forward(enc1a_.forward(image, training), training);
    const FeatureMap p1 = maxpool2x2(e1_, &pool1_idx_);
    e2_ = enc2b_.forward(enc2a_.forward(p1, training), training);
    const FeatureMap p2 = maxpool2x2(e2_, &pool2_idx_);
    const FeatureMap bott = bot_b_.forward(bot_a_.forward(p2, training), training);
    const FeatureMap cat1 = concat_channels(upsample2x(bott), e2_);
    FeatureMap d2 = dec2b_.forward(dec2a_.forward(cat1, training), training);
    if (cfg_.placement == Placement::Penultimate) {
      attn_in_ = d2;
      d2 = stacked_attention(d2, cfg_.attn, attn_params_, false).features;
    }
    const FeatureMap cat2 = concat_channels(upsample2x(d2), e1_);
    FeatureMap d1 = dec1b_.forward(dec1a_.forward(cat2, training), training);
    if (cfg_.placement == Placement::Last) {
      attn_in_ = d1;
      d1 = stacked_attention(d1, cfg_.attn, attn_params_, false).features;
    }
    head_in_ = d1;
    return conv1x1(d1, head_w_, head_b_);
  }

  void backward(const FeatureMap& grad_logits) {
    FeatureMap g_d1(16, 64, 64);
    detail::conv1x1_backward(head_in_, head_w_, grad_logits, g_d1, head_dw_, head_db_);
    if (cfg_.placement == Placement::Last) g_d1 = attention_backward(g_d1);
    const FeatureMap g_cat2 = dec1a_.backward(dec1b_.backward(g_d1));
    FeatureMap g_up2(16, 64, 64), g_e1(16, 64, 64);
    split_concat(g_cat2, g_up2, g_e1);
    FeatureMap g_d2 = downsample_grad(g_up2);
    if (cfg_.placement == Placement::Penultimate) g_d2 = attention_backward(g_d2);
    const FeatureMap g_cat1 = dec2a_.backward(dec2b_.backward(g_d2));
    FeatureMap g_up1(64, 32, 32), g_e2a(32, 32, 32);
    split_concat(g_cat1, g_up1, g_e2a);
    const FeatureMap g_p2 = bot_a_.backward(bot_b_.backward(downsample_grad(g_up1)));
    FeatureMap g_e2 = unpool_grad(g_p2, pool2_idx_, 32, 32);
    for (std::size_t i = 0; i < g_e2.values.size(); ++i)
      g_e2.values.vec()[i] += g_e2a.values.vec()[i];
    const FeatureMap g_p1 = enc2a_.backward(enc2b_.backward(g_e2));
    FeatureMap g_e1_total = unpool_grad(g_p1, pool1_idx_, 64, 64);
    for (std::size_t i = 0; i < g_e1_total.values.size(); ++i)
      g_e1_total.values.vec()[i] += g_e1.values.vec()[i];
    enc1a_.backward(enc1b_.backward(g_e1_total));
  }

  void zero_grads() {
    enc1a_.zero_grads();
    enc1b_.zero_grads();
    enc2a_.zero_grads();
    enc2b_.zero_grads();
    bot_a_.zero_grads();
    bot_b_.zero_grads();
    dec2a_.zero_grads();
    dec2b_.zero_grads();
    dec1a_.zero_grads();
    dec1b_.zero_grads();
    head_dw_ = Tensor(head_w_.dims());
    head_db_ = Tensor(head_b_.dims());
    for (std::size_t l = 0; l < attn_params_.size(); ++l)
      attn_grads_[l] = AttentionParamGrads::zeros_like(attn_params_[l]);
  }

  std::vector<ParamRef> params() {
    std::vector<ParamRef> out;
    enc1a_.collect(out);
    enc1b_.collect(out);
    enc2a_.collect(out);
    enc2b_.collect(out);
    bot_a_.collect(out);
    bot_b_.collect(out);
    dec2a_.collect(out);
    dec2b_.collect(out);
    dec1a_.collect(out);
    dec1b_.collect(out);
    out.push_back({"head.w", &head_w_, &head_dw_, true});
    out.push_back({"head.b", &head_b_, &head_db_, true});
    for (std::size_t l = 0; l < attn_params_.size(); ++l) {
      const std::string prefix = "attn" + std::to_string(l) + ".";
      auto& p = attn_params_[l];
      auto& g = attn_grads_[l];
      out.push_back({prefix + "query_w", &p.query_w, &g.query_w, true});
      out.push_back({prefix + "query_b", &p.query_b, &g.query_b, true});
      out.push_back({prefix + "key_w", &p.key_w, &g.key_w, true});
      out.push_back({prefix + "key_b", &p.key_b, &g.key_b, true});
      out.push_back({prefix + "value_w", &p.value_w, &g.value_w, true});
      out.push_back({prefix + "value_b", &p.value_b, &g.value_b, true});
      out.push_back({prefix + "out_w", &p.out_w, &g.out_w, true});
      out.push_back({prefix + "out_b", &p.out_b, &g.out_b, true});
    }
    return out;
  }

  std::size_t parameter_count(bool trainable_only = true) {
    std::size_t n = 0;
    for (const auto& ref : params()) {
      if (trainable_only && !ref.trainable) continue;
      n += ref.value->size();
    }
    return n;
  }

  void save_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ostringstream manifest;
    manifest << "format=blockattn-checkpoint-v1\n";
    manifest << "placement=" << to_string(cfg_.placement) << '\n';
    manifest << "seed=" << cfg_.seed << '\n';
    if (cfg_.placement != Placement::None)
      write_file(dir + "/attention.cfg", encode_attention_config(cfg_.attn));
    const auto refs = params();
    manifest << "tensors=" << refs.size() << '\n';
    for (const auto& ref : refs) {
      const std::string file = ref.name + ".btf1";
      write_btf1(dir + "/" + file, *ref.value);
      manifest << ref.name << ' ' << file << ' ' << (ref.trainable ? 1 : 0) << '\n';
    }
    write_file(dir + "/manifest.txt", manifest.str());
  }

  static ToyUnet load_checkpoint(const std::string& dir) {
    const std::string manifest = read_file(dir + "/manifest.txt");
    std::istringstream is(manifest);
    std::string line;
    UnetConfig cfg;
    std::size_t tensor_count = 0;
    std::vector<std::pair<std::string, std::string>> entries;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq != std::string::npos) {
        const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "placement") cfg.placement = placement_from_string(val);
        else if (key == "seed") cfg.seed = std::stoull(val);
        else if (key == "tensors") tensor_count = std::stoull(val);
        else if (key != "format") throw IoError("unknown manifest key: " + key);
        continue;
      }
      std::istringstream ls(line);
      std::string name, file;
      int trainable = 0;
      ls >> name >> file >> trainable;
      entries.emplace_back(name, file);
    }
    if (entries.size() != tensor_count) throw IoError("manifest tensor count mismatch");
    if (cfg.placement != Placement::None)
      cfg.attn = parse_attention_config(read_file(dir + "/attention.cfg"));
    ToyUnet model(cfg);
    auto refs = model.params();
    if (refs.size() != entries.size()) throw IoError("checkpoint does not match architecture");
    for (std::size_t i = 0; i < refs.size(); ++i) {
      if (refs[i].name != entries[i].first) throw IoError("unexpected tensor " + entries[i].first);
      Tensor t = read_btf1(dir + "/" + entries[i].second);
      if (!t.same_dims(*refs[i].value)) throw IoError("dims mismatch for " + entries[i].first);
      *refs[i].value = std::move(t);
    }
    return model;
  }

  // feature entering the attention module (after a forward pass), for
  // attention-map visualization
  const FeatureMap& attention_input() const {
    if (cfg_.placement == Placement::None)
      throw StateError("model has no attention module");
    return attn_in_;
  }

 private:
  FeatureMap attention_backward(const FeatureMap& g) {
    auto res = backward_stacked_attention(attn_in_, cfg_.attn, attn_params_, g);
    for (std::size_t l = 0; l < attn_params_.size(); ++l) {
      attention_grad_detail_add(attn_grads_[l], res.grads[l]);
    }
    return std::move(res.grad_x);
  }

  static void attention_grad_detail_add(AttentionParamGrads& dst, const AttentionParamGrads& src) {
    blockattn::detail::add_into(dst.query_w, src.query_w);
    blockattn::detail::add_into(dst.query_b, src.query_b);
    blockattn::detail::add_into(dst.key_w, src.key_w);
    blockattn::detail::add_into(dst.key_b, src.key_b);
    blockattn::detail::add_into(dst.value_w, src.value_w);
    blockattn::detail::add_into(dst.value_b, src.value_b);
    blockattn::detail::add_into(dst.out_w, src.out_w);
    blockattn::detail::add_into(dst.out_b, src.out_b);
  }

  static void split_concat(const FeatureMap& g, FeatureMap& first, FeatureMap& second) {
    std::copy(g.values.data(), g.values.data() + first.values.size(), first.values.data());
    std::copy(g.values.data() + first.values.size(),
              g.values.data() + first.values.size() + second.values.size(),
              second.values.data());
  }

  static FeatureMap downsample_grad(const FeatureMap& g) {
    // adjoint of nearest-neighbor upsample2x: sum each 2x2 cell
    FeatureMap out(g.channels, g.height / 2, g.width / 2);
    for (std::size_t c = 0; c < g.channels; ++c)
      for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x)
          out.at(c, y, x) = g.at(c, 2 * y, 2 * x) + g.at(c, 2 * y, 2 * x + 1) +
                            g.at(c, 2 * y + 1, 2 * x) + g.at(c, 2 * y + 1, 2 * x + 1);
    return out;
  }

  static FeatureMap unpool_grad(const FeatureMap& g, const std::vector<std::size_t>& argmax,
                                std::size_t h, std::size_t w) {
    FeatureMap out(g.channels, h, w);
    for (std::size_t c = 0; c < g.channels; ++c)
      for (std::size_t p = 0; p < g.pixels(); ++p)
        out.values.data()[c * h * w + argmax[c * g.pixels() + p]] += g.values.data()[c * g.pixels() + p];
    return out;
  }

  UnetConfig cfg_;
  ConvBnRelu enc1a_, enc1b_, enc2a_, enc2b_, bot_a_, bot_b_, dec2a_, dec2b_, dec1a_, dec1b_;
  Tensor head_w_, head_b_, head_dw_, head_db_;
  std::vector<AttentionParams> attn_params_;
  std::vector<AttentionParamGrads> attn_grads_;

  // forward caches
  FeatureMap e1_, e2_, attn_in_, head_in_;
  std::vector<std::size_t> pool1_idx_, pool2_idx_;
};

}  // namespace blockattn
