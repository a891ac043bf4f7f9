#pragma once

// Synthetic 64x64 "regular anatomy" scenes: two low-contrast ellipses placed
// left and right, a high-contrast bar below them, and a disc between the
// ellipses. Organ centers jitter within +-4 pixels of canonical positions;
// class regions are disjoint under every jitter combination by construction.
// Classes: 0 background, 1 left ellipse, 2 right ellipse, 3 bar, 4 disc.

#include <cstdint>
#include <string>
#include <vector>

#include "blockattn/common.hpp"
#include "blockattn/io.hpp"
#include "blockattn/tensor.hpp"

namespace blockattn {

inline constexpr std::size_t kSceneSize = 64;
inline constexpr std::size_t kSceneClasses = 5;

// canonical geometry before jitter
inline constexpr int kEllipseRow = 26;
inline constexpr int kLeftEllipseCol = 11;
inline constexpr int kRightEllipseCol = 53;
inline constexpr int kEllipseSemiRow = 10;
inline constexpr int kEllipseSemiCol = 6;
inline constexpr int kDiscRow = 26;
inline constexpr int kDiscCol = 32;
inline constexpr int kDiscRadius = 6;
inline constexpr int kBarTop = 48;
inline constexpr int kBarBottom = 55;   // inclusive
inline constexpr int kBarLeft = 10;
inline constexpr int kBarRight = 53;    // inclusive
inline constexpr int kJitter = 4;

inline constexpr double kBackgroundLevel = 0.35;
inline constexpr double kEllipseLevel = 0.42;  // within 0.1 of background: low contrast
inline constexpr double kBarLevel = 0.75;
inline constexpr double kDiscLevel = 0.68;
inline constexpr double kNoiseSigma = 0.05;

struct SceneLayout {
  int left_dr = 0, left_dc = 0;    // per-organ center jitter
  int right_dr = 0, right_dc = 0;
  int disc_dr = 0, disc_dc = 0;
  int bar_dr = 0, bar_dc = 0;
};

struct Scene {
  FeatureMap image;                 // [1,64,64], values in [0,1]
  std::vector<std::uint8_t> labels; // 64*64, row-major class ids
  std::uint64_t seed = 0;
  SceneLayout layout;

  std::uint8_t label_at(std::size_t r, std::size_t c) const { return labels[r * kSceneSize + c]; }
};

// analytic membership tests, shared by the generator and its tests
inline bool in_ellipse(int r, int c, int cr, int cc, int sr, int sc) {
  const double dr = (r - cr) / static_cast<double>(sr);
  const double dc = (c - cc) / static_cast<double>(sc);
  return dr * dr + dc * dc <= 1.0;
}

inline bool scene_class_contains(const SceneLayout& lay, std::size_t cls, int r, int c) {
  switch (cls) {
    case 1:
      return in_ellipse(r, c, kEllipseRow + lay.left_dr, kLeftEllipseCol + lay.left_dc,
                        kEllipseSemiRow, kEllipseSemiCol);
    case 2:
      return in_ellipse(r, c, kEllipseRow + lay.right_dr, kRightEllipseCol + lay.right_dc,
                        kEllipseSemiRow, kEllipseSemiCol);
    case 3:
      return r >= kBarTop + lay.bar_dr && r <= kBarBottom + lay.bar_dr &&
             c >= kBarLeft + lay.bar_dc && c <= kBarRight + lay.bar_dc;
    case 4:
      return in_ellipse(r, c, kDiscRow + lay.disc_dr, kDiscCol + lay.disc_dc, kDiscRadius,
                        kDiscRadius);
    default:
      return false;
  }
}

inline Scene generate_scene(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "scene"));
  Scene scene;
  scene.seed = seed;
  auto& lay = scene.layout;
  lay.left_dr = static_cast<int>(rng.uniform_int(-kJitter, kJitter));
  lay.left_dc = static_cast<int>(rng.uniform_int(-kJitter, kJitter));
  lay.right_dr = static_cast<int>(rng.uniform_int(-kJitter, kJitter));
  lay.right_dc = static_cast<int>(rng.uniform_int(-kJitter, kJitter));
  lay.disc_dr = static_cast<int>(rng.uniform_int(-kJitter, kJitter));
  lay.disc_dc = static_cast<int>(rng.uniform_int(-kJitter, kJitter));
  lay.bar_dr = static_cast<int>(rng.uniform_int(-kJitter, kJitter));
  lay.bar_dc = static_cast<int>(rng.uniform_int(-kJitter, kJitter));

  // small per-scene intensity wobble, still low contrast for the ellipses
  const double ellipse_level = kEllipseLevel + rng.uniform(-0.01, 0.01);
  const double bar_level = kBarLevel + rng.uniform(-0.02, 0.02);
  const double disc_level = kDiscLevel + rng.uniform(-0.02, 0.02);

  scene.image = FeatureMap(1, kSceneSize, kSceneSize);
  scene.labels.assign(kSceneSize * kSceneSize, 0);
  for (std::size_t r = 0; r < kSceneSize; ++r) {
    for (std::size_t c = 0; c < kSceneSize; ++c) {
      double level = kBackgroundLevel;
      std::uint8_t cls = 0;
      for (std::size_t k = 1; k < kSceneClasses; ++k) {
        if (scene_class_contains(lay, k, static_cast<int>(r), static_cast<int>(c))) {
          cls = static_cast<std::uint8_t>(k);
          level = k == 1 || k == 2 ? ellipse_level : (k == 3 ? bar_level : disc_level);
          break;  // regions are disjoint; first hit wins
        }
      }
      scene.labels[r * kSceneSize + c] = cls;
      double v = level + kNoiseSigma * rng.normal();
      v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      scene.image.at(0, r, c) = v;
    }
  }
  return scene;
}

inline std::vector<Scene> generate_scenes(std::uint64_t first_seed, std::size_t count) {
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) scenes.push_back(generate_scene(first_seed + i));
  return scenes;
}

inline std::vector<std::size_t> class_pixel_counts(const Scene& scene) {
  std::vector<std::size_t> counts(kSceneClasses, 0);
  for (const std::uint8_t v : scene.labels) ++counts[v];
  return counts;
}

// image as BTF1, labels as a raw PGM whose gray level is the class id
inline void write_scene(const std::string& prefix, const Scene& scene) {
  write_btf1(prefix + ".image.btf1", scene.image.values);
  write_file(prefix + ".labels.pgm", encode_pgm_raw(scene.labels, kSceneSize, kSceneSize));
}

inline Scene read_scene(const std::string& prefix) {
  Scene scene;
  scene.image = FeatureMap(read_btf1(prefix + ".image.btf1"));
  const PgmImage labels = decode_pgm(read_file(prefix + ".labels.pgm"));
  if (labels.height != scene.image.height || labels.width != scene.image.width)
    throw IoError("scene label raster does not match the image dims");
  scene.labels = labels.pixels;
  return scene;
}

}  // namespace blockattn
