#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "tadkd/synth_data.hpp"

namespace fs = std::filesystem;
using namespace tadkd;

namespace {

fs::path temp_dir(const char* tag) {
  const fs::path dir = fs::temp_directory_path() / (std::string("tadkd_sd_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

bool scenes_equal(const Scene& a, const Scene& b) {
  if (a.image.shape() != b.image.shape()) return false;
  for (int i = 0; i < a.image.size(); ++i)
    if (a.image.at(i) != b.image.at(i)) return false;
  if (a.gt_labels != b.gt_labels) return false;
  if (a.gt_boxes.size() != b.gt_boxes.size()) return false;
  for (size_t i = 0; i < a.gt_boxes.size(); ++i) {
    const Box &x = a.gt_boxes[i], &y = b.gt_boxes[i];
    if (x.x0 != y.x0 || x.y0 != y.y0 || x.x1 != y.x1 || x.y1 != y.y1) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("same seed and config give bit-identical scenes") {
  SceneConfig cfg;
  const Scene a = generate_scene(1234, cfg);
  const Scene b = generate_scene(1234, cfg);
  CHECK(scenes_equal(a, b));
}

TEST_CASE("single-object range yields exactly one box") {
  SceneConfig cfg;
  cfg.objects_min = 1;
  cfg.objects_max = 1;
  for (uint64_t s = 0; s < 20; ++s) {
    const Scene scene = generate_scene(s, cfg);
    CHECK(scene.gt_boxes.size() == 1);
    CHECK(scene.gt_labels.size() == 1);
  }
}

TEST_CASE("generator output honors the scene invariants") {
  SceneConfig cfg;
  int objects = 0;
  std::array<int, 4> class_counts{0, 0, 0, 0};
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    const Scene s = generate_scene(seed, cfg);
    REQUIRE(s.gt_boxes.size() == s.gt_labels.size());
    REQUIRE(!s.gt_boxes.empty());
    CHECK(s.gt_boxes.size() <= 4);
    for (size_t i = 0; i < s.gt_boxes.size(); ++i) {
      const Box& b = s.gt_boxes[i];
      CHECK(b.valid());
      CHECK(b.x0 >= 0.0);
      CHECK(b.y0 >= 0.0);
      CHECK(b.x1 <= cfg.image_size);
      CHECK(b.y1 <= cfg.image_size);
      for (size_t j = i + 1; j < s.gt_boxes.size(); ++j)
        CHECK(iou(b, s.gt_boxes[j]) <= 0.3);
      REQUIRE(s.gt_labels[i] >= 1);
      REQUIRE(s.gt_labels[i] <= 3);
      ++class_counts[s.gt_labels[i]];
      ++objects;
    }
    for (int i = 0; i < s.image.size(); ++i) {
      CHECK(s.image.at(i) >= 0.0);
      CHECK(s.image.at(i) <= 1.0);
    }
  }
  // class balance within +-20% of uniform
  CHECK(objects >= 1000);
  for (int c = 1; c <= 3; ++c) {
    const double freq = static_cast<double>(class_counts[c]) / objects;
    CHECK(freq > (1.0 / 3) * 0.8);
    CHECK(freq < (1.0 / 3) * 1.2);
  }
}

TEST_CASE("distinct seeds give distinct images") {
  SceneConfig cfg;
  std::set<std::vector<double>> seen;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    const Scene s = generate_scene(seed, cfg);
    std::vector<double> key(s.image.data(), s.image.data() + 64);
    CHECK(seen.insert(std::move(key)).second);
  }
}

TEST_CASE("dataset round-trip is exact") {
  SceneConfig cfg;
  std::vector<Scene> scenes;
  for (uint64_t s = 0; s < 10; ++s) scenes.push_back(generate_scene(s, cfg));
  const fs::path dir = temp_dir("roundtrip");
  write_dataset(scenes, cfg, dir.string());
  const Dataset back = read_dataset(dir.string());
  REQUIRE(back.scenes.size() == scenes.size());
  CHECK(back.config.image_size == cfg.image_size);
  for (size_t i = 0; i < scenes.size(); ++i) CHECK(scenes_equal(scenes[i], back.scenes[i]));
  fs::remove_all(dir);
}

TEST_CASE("missing index is an error, not a crash") {
  CHECK_THROWS_WITH_AS(read_dataset("/nonexistent/tadkd_nowhere"),
                       doctest::Contains("missing index"), std::runtime_error);
}

TEST_CASE("corrupt datasets are reported with the failing entry") {
  SceneConfig cfg;
  std::vector<Scene> scenes;
  for (uint64_t s = 0; s < 3; ++s) scenes.push_back(generate_scene(s, cfg));

  SUBCASE("entry count mismatch vs files on disk") {
    const fs::path dir = temp_dir("countmismatch");
    write_dataset(scenes, cfg, dir.string());
    fs::remove(dir / "000001.bin");
    CHECK_THROWS_WITH_AS(read_dataset(dir.string()), doctest::Contains("000001.bin"),
                         std::runtime_error);
    fs::remove_all(dir);
  }
  SUBCASE("declared size disagrees with entries") {
    const fs::path dir = temp_dir("sizemismatch");
    write_dataset(scenes, cfg, dir.string());
    std::ifstream in(dir / "index.json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const auto pos = text.find("\"size\": 3");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 9, "\"size\": 7");
    std::ofstream out(dir / "index.json");
    out << text;
    out.close();
    CHECK_THROWS_WITH_AS(read_dataset(dir.string()), doctest::Contains("corrupt"),
                         std::runtime_error);
    fs::remove_all(dir);
  }
  SUBCASE("truncated payload names the file") {
    const fs::path dir = temp_dir("truncated");
    write_dataset(scenes, cfg, dir.string());
    fs::resize_file(dir / "000002.bin", 64);
    CHECK_THROWS_WITH_AS(read_dataset(dir.string()), doctest::Contains("000002.bin"),
                         std::runtime_error);
    fs::remove_all(dir);
  }
  SUBCASE("version mismatch is its own error") {
    const fs::path dir = temp_dir("version");
    write_dataset(scenes, cfg, dir.string());
    std::ifstream in(dir / "index.json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const auto pos = text.find("\"version\": 1");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 12, "\"version\": 9");
    std::ofstream out(dir / "index.json");
    out << text;
    out.close();
    CHECK_THROWS_WITH_AS(read_dataset(dir.string()), doctest::Contains("version"),
                         std::runtime_error);
    fs::remove_all(dir);
  }
}

TEST_CASE("config validation rejects bad ranges") {
  SceneConfig cfg;
  cfg.object_scale_max = 64.0;  // must be < image_size
  CHECK_THROWS_AS(generate_scene(1, cfg), std::runtime_error);
  SceneConfig cfg2;
  cfg2.objects_min = 3;
  cfg2.objects_max = 2;
  CHECK_THROWS_AS(generate_scene(1, cfg2), std::runtime_error);
}

TEST_CASE("placement failure is reported after 1000 attempts") {
  SceneConfig cfg;
  cfg.image_size = 32;
  cfg.object_scale_min = 24.0;
  cfg.object_scale_max = 28.0;  // shapes cannot fit with the placement margin
  cfg.objects_min = 2;
  cfg.objects_max = 2;
  CHECK_THROWS_WITH_AS(generate_scene(5, cfg), doctest::Contains("1000"),
                       std::runtime_error);
}
