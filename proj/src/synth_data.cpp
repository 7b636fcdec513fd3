#include "tadkd/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "tadkd/config_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tadkd {

namespace {

constexpr uint32_t kImageMagic = 0x4B444154;  // "TADK" little-endian
constexpr uint32_t kImageVersion = 1;
constexpr int kIndexVersion = 1;
constexpr double kMaxPairwiseIou = 0.3;

struct Shape {
  int kind = 0;  // 0 disk, 1 square, 2 triangle
  double cx = 0, cy = 0, size = 0, rot = 0;
  double color[3] = {0, 0, 0};
};

Box shape_extent(const Shape& s) {
  const double half = 0.5 * s.size;
  switch (s.kind) {
    case 0:
      return {s.cx - half, s.cy - half, s.cx + half, s.cy + half};
    case 1: {
      const double e = half * (std::abs(std::cos(s.rot)) + std::abs(std::sin(s.rot)));
      return {s.cx - e, s.cy - e, s.cx + e, s.cy + e};
    }
    default: {
      double x0 = 1e18, y0 = 1e18, x1 = -1e18, y1 = -1e18;
      for (int v = 0; v < 3; ++v) {
        const double a = s.rot + 1.5707963267948966 + v * 2.0943951023931953;
        const double px = s.cx + half * std::cos(a);
        const double py = s.cy - half * std::sin(a);
        x0 = std::min(x0, px);
        y0 = std::min(y0, py);
        x1 = std::max(x1, px);
        y1 = std::max(y1, py);
      }
      return {x0, y0, x1, y1};
    }
  }
}

bool point_in_shape(const Shape& s, double x, double y) {
  const double half = 0.5 * s.size;
  const double dx = x - s.cx;
  const double dy = y - s.cy;
  switch (s.kind) {
    case 0:
      return dx * dx + dy * dy <= half * half;
    case 1: {
      const double c = std::cos(-s.rot), sn = std::sin(-s.rot);
      const double rx = dx * c - dy * sn;
      const double ry = dx * sn + dy * c;
      return std::abs(rx) <= half && std::abs(ry) <= half;
    }
    default: {
      double vx[3], vy[3];
      for (int v = 0; v < 3; ++v) {
        const double a = s.rot + 1.5707963267948966 + v * 2.0943951023931953;
        vx[v] = s.cx + half * std::cos(a);
        vy[v] = s.cy - half * std::sin(a);
      }
      bool neg = false, pos = false;
      for (int v = 0; v < 3; ++v) {
        const double ex = vx[(v + 1) % 3] - vx[v];
        const double ey = vy[(v + 1) % 3] - vy[v];
        const double cross = ex * (y - vy[v]) - ey * (x - vx[v]);
        if (cross < 0) neg = true;
        if (cross > 0) pos = true;
      }
      return !(neg && pos);
    }
  }
}

// 4x4 supersampled coverage of one pixel.
double pixel_coverage(const Shape& s, int px, int py) {
  int inside = 0;
  for (int sy = 0; sy < 4; ++sy)
    for (int sx = 0; sx < 4; ++sx)
      if (point_in_shape(s, px + (sx + 0.5) / 4.0, py + (sy + 0.5) / 4.0)) ++inside;
  return inside / 16.0;
}

const double kBaseColors[3][3] = {
    {0.85, 0.35, 0.35},  // disk
    {0.35, 0.80, 0.40},  // square
    {0.40, 0.45, 0.85},  // triangle
};

void write_u32(std::ofstream& f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void SceneConfig::validate() const {
  if (image_size < 8) throw std::runtime_error("scene config: image_size too small");
  if (num_classes < 1 || num_classes > 3)
    throw std::runtime_error("scene config: num_classes must be in [1,3]");
  if (objects_min < 1 || objects_max < objects_min)
    throw std::runtime_error("scene config: empty objects range");
  if (object_scale_min <= 0 || object_scale_max < object_scale_min)
    throw std::runtime_error("scene config: empty object_scale range");
  if (object_scale_max >= image_size)
    throw std::runtime_error("scene config: object_scale max must be < image_size");
  if (noise_std < 0 || color_jitter < 0)
    throw std::runtime_error("scene config: negative noise/jitter");
}

Scene generate_scene(uint64_t seed, const SceneConfig& config) {
  config.validate();
  Rng rng(seed);
  const int n = config.image_size;

  double bg[3];
  for (double& c : bg) c = uniform(rng, 0.25, 0.55);

  const int count = uniform_int(rng, config.objects_min, config.objects_max);
  std::vector<Shape> shapes;
  std::vector<Box> boxes;
  for (int i = 0; i < count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      Shape s;
      s.kind = uniform_int(rng, 1, config.num_classes) - 1;
      s.size = uniform(rng, config.object_scale_min, config.object_scale_max);
      s.rot = s.kind == 0 ? 0.0 : uniform(rng, 0.0, 6.283185307179586);
      // extent half-width is at most 0.75*size for any rotation
      const double margin = 0.75 * s.size + 0.5;
      if (2.0 * margin >= n) continue;
      s.cx = uniform(rng, margin, n - margin);
      s.cy = uniform(rng, margin, n - margin);
      const Box ext = shape_extent(s);
      bool ok = true;
      for (const Box& other : boxes)
        if (iou(ext, other) > kMaxPairwiseIou) ok = false;
      if (!ok) continue;
      for (int c = 0; c < 3; ++c)
        s.color[c] = std::clamp(kBaseColors[s.kind][c] +
                                    uniform(rng, -config.color_jitter, config.color_jitter),
                                0.05, 0.95);
      shapes.push_back(s);
      boxes.push_back(ext);
      placed = true;
    }
    if (!placed)
      throw std::runtime_error("generate_scene: could not place object within 1000 attempts");
  }

  std::vector<double> img(static_cast<size_t>(3) * n * n);
  for (int c = 0; c < 3; ++c)
    std::fill_n(img.data() + static_cast<size_t>(c) * n * n, n * n, bg[c]);

  for (const Shape& s : shapes) {
    const Box ext = shape_extent(s);
    const int px0 = std::max(0, static_cast<int>(std::floor(ext.x0)) - 1);
    const int py0 = std::max(0, static_cast<int>(std::floor(ext.y0)) - 1);
    const int px1 = std::min(n - 1, static_cast<int>(std::ceil(ext.x1)) + 1);
    const int py1 = std::min(n - 1, static_cast<int>(std::ceil(ext.y1)) + 1);
    for (int py = py0; py <= py1; ++py) {
      for (int px = px0; px <= px1; ++px) {
        const double alpha = pixel_coverage(s, px, py);
        if (alpha <= 0.0) continue;
        for (int c = 0; c < 3; ++c) {
          double& p = img[(static_cast<size_t>(c) * n + py) * n + px];
          p = (1.0 - alpha) * p + alpha * s.color[c];
        }
      }
    }
  }

  if (config.noise_std > 0.0)
    for (double& p : img) p += normal(rng, 0.0, config.noise_std);
  for (double& p : img) p = std::clamp(p, 0.0, 1.0);

  Scene scene;
  scene.image = Tensor::from_data({3, n, n}, std::move(img));
  scene.gt_boxes = std::move(boxes);
  for (const Shape& s : shapes) scene.gt_labels.push_back(s.kind + 1);
  return scene;
}

void write_dataset(const std::vector<Scene>& scenes, const SceneConfig& config,
                   const std::string& dir) {
  fs::create_directories(dir);
  json entries = json::array();
  for (size_t i = 0; i < scenes.size(); ++i) {
    char name[16];
    std::snprintf(name, sizeof(name), "%06zu.bin", i);
    const Scene& s = scenes[i];
    const Tensor& img = s.image;
    std::ofstream f(fs::path(dir) / name, std::ios::binary);
    if (!f) throw std::runtime_error("write_dataset: cannot create " + std::string(name));
    write_u32(f, kImageMagic);
    write_u32(f, kImageVersion);
    write_u32(f, static_cast<uint32_t>(img.dim(0)));
    write_u32(f, static_cast<uint32_t>(img.dim(1)));
    write_u32(f, static_cast<uint32_t>(img.dim(2)));
    f.write(reinterpret_cast<const char*>(img.data()),
            static_cast<std::streamsize>(img.size() * sizeof(double)));
    if (!f) throw std::runtime_error("write_dataset: write failed for " + std::string(name));

    json boxes = json::array();
    for (const Box& b : s.gt_boxes) boxes.push_back({b.x0, b.y0, b.x1, b.y1});
    entries.push_back({{"file", name}, {"boxes", boxes}, {"labels", s.gt_labels}});
  }
  json index{{"version", kIndexVersion},
             {"config", scene_config_to_json(config)},
             {"size", scenes.size()},
             {"entries", entries}};
  std::ofstream f(fs::path(dir) / "index.json");
  f << index.dump(2) << "\n";
  if (!f) throw std::runtime_error("write_dataset: cannot write index.json");
}

Dataset read_dataset(const std::string& dir) {
  const fs::path index_path = fs::path(dir) / "index.json";
  std::ifstream idx(index_path);
  if (!idx) throw std::runtime_error("read_dataset: missing index file " + index_path.string());
  json index;
  try {
    idx >> index;
  } catch (const json::exception& e) {
    throw std::runtime_error("read_dataset: corrupt index.json: " + std::string(e.what()));
  }
  if (index.at("version").get<int>() != kIndexVersion)
    throw std::runtime_error("read_dataset: version mismatch: file has " +
                             std::to_string(index.at("version").get<int>()) + ", expected " +
                             std::to_string(kIndexVersion));
  Dataset ds;
  ds.config = scene_config_from_json(index.at("config"));
  const auto& entries = index.at("entries");
  if (entries.size() != index.at("size").get<size_t>())
    throw std::runtime_error("read_dataset: corrupt index: entry count " +
                             std::to_string(entries.size()) + " != declared size " +
                             std::to_string(index.at("size").get<size_t>()));
  for (const auto& e : entries) {
    const std::string name = e.at("file").get<std::string>();
    const fs::path path = fs::path(dir) / name;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_dataset: corrupt dataset: missing file " + name);
    if (read_u32(f) != kImageMagic)
      throw std::runtime_error("read_dataset: corrupt file " + name + ": bad magic");
    if (read_u32(f) != kImageVersion)
      throw std::runtime_error("read_dataset: version mismatch in " + name);
    const int c = static_cast<int>(read_u32(f));
    const int h = static_cast<int>(read_u32(f));
    const int w = static_cast<int>(read_u32(f));
    if (!f || c <= 0 || h <= 0 || w <= 0 || c > 16 || h > 16384 || w > 16384)
      throw std::runtime_error("read_dataset: corrupt file " + name + ": bad header");
    std::vector<double> data(static_cast<size_t>(c) * h * w);
    f.read(reinterpret_cast<char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!f || f.gcount() != static_cast<std::streamsize>(data.size() * sizeof(double)))
      throw std::runtime_error("read_dataset: corrupt file " + name + ": truncated payload");
    Scene s;
    s.image = Tensor::from_data({c, h, w}, std::move(data));
    for (const auto& b : e.at("boxes"))
      s.gt_boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(),
                            b.at(2).get<double>(), b.at(3).get<double>()});
    s.gt_labels = e.at("labels").get<std::vector<int>>();
    if (s.gt_labels.size() != s.gt_boxes.size())
      throw std::runtime_error("read_dataset: corrupt entry " + name + ": label/box mismatch");
    ds.scenes.push_back(std::move(s));
  }
  return ds;
}

}  // namespace tadkd
