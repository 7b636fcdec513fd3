#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tadkd/geometry.hpp"
#include "tadkd/tensor.hpp"

namespace tadkd {

/// Procedural scene parameters. Class ids: 1 = disk, 2 = square, 3 = triangle;
/// 0 is reserved for background.
struct SceneConfig {
  int image_size = 64;
  int num_classes = 3;
  int objects_min = 1;
  int objects_max = 4;
  double object_scale_min = 10.0;
  double object_scale_max = 28.0;
  double noise_std = 0.05;
  double color_jitter = 0.2;

  void validate() const;
};

struct Scene {
  Tensor image;  // {3, H, W}, values in [0,1]
  std::vector<Box> gt_boxes;
  std::vector<int> gt_labels;
};

/// Renders one labeled scene, a pure function of (seed, config). Shapes are
/// drawn with supersampled anti-aliased edges; boxes are the exact geometric
/// extents of the shapes. Object placement rejects pairwise IoU > 0.3 and
/// throws after 1000 failed attempts.
Scene generate_scene(uint64_t seed, const SceneConfig& config);

struct Dataset {
  SceneConfig config;
  std::vector<Scene> scenes;
};

void write_dataset(const std::vector<Scene>& scenes, const SceneConfig& config,
                   const std::string& dir);
Dataset read_dataset(const std::string& dir);

}  // namespace tadkd
