#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "tadkd/detector.hpp"
#include "tadkd/synth_data.hpp"
#include "tadkd/train_eval.hpp"

namespace fs = std::filesystem;
using namespace tadkd;

namespace {

DetectorConfig micro_config() {
  DetectorConfig cfg;
  cfg.backbone_channels = {6, 8, 12};
  cfg.backbone_out_channels = 8;
  cfg.stride = 8;
  cfg.anchors = default_anchor_specs();
  cfg.proposal_count = 4;
  cfg.roi_size = 3;
  cfg.num_classes = 3;
  cfg.rpn_hidden = 8;
  cfg.head_hidden = 16;
  return cfg;
}

SceneConfig micro_scene_config() {
  SceneConfig cfg;
  cfg.image_size = 16;
  cfg.objects_min = 1;
  cfg.objects_max = 1;
  cfg.object_scale_min = 6.0;
  cfg.object_scale_max = 9.0;
  return cfg;
}

}  // namespace

TEST_CASE("backbone shapes and finiteness") {
  Rng rng(1);
  DetectorModel teacher = DetectorModel::init(DetectorConfig::teacher_default(), rng);
  DetectorModel student = DetectorModel::init(DetectorConfig::student_default(), rng);

  Tensor image = Tensor::zeros({3, 64, 64});
  Tensor tf = backbone_forward(teacher, image);
  Tensor sf = backbone_forward(student, image);
  CHECK(tf.shape() == std::vector<int>{64, 8, 8});
  CHECK(sf.shape() == tf.shape());
  for (int i = 0; i < tf.size(); ++i) CHECK(std::isfinite(tf.at(i)));

  CHECK_THROWS_WITH_AS(backbone_forward(student, Tensor::zeros({3, 60, 64})),
                       doctest::Contains("divisible"), std::runtime_error);
}

TEST_CASE("proposals: fixed count, clipped boxes, GT survives in train mode") {
  Rng rng(2);
  DetectorModel model = DetectorModel::init(DetectorConfig::student_default(), rng);
  const Scene scene = generate_scene(77, SceneConfig{});
  Tensor feats = backbone_forward(model, scene.image);
  RpnOut rpn = rpn_forward(model, feats);
  const auto anchors = make_anchors(model.config, rpn.fh, rpn.fw);
  REQUIRE(anchors.size() == 9u * 8 * 8);

  for (bool train_mode : {false, true}) {
    const ProposalBatch batch =
        propose(rpn, anchors, model.config, 64, 64, train_mode, scene.gt_boxes);
    CHECK(batch.boxes.size() == 64);
    CHECK(batch.objectness.size() == 64);
    for (const Box& b : batch.boxes) {
      CHECK(b.valid());
      CHECK(b.x0 >= 0.0);
      CHECK(b.y0 >= 0.0);
      CHECK(b.x1 <= 64.0);
      CHECK(b.y1 <= 64.0);
    }
    if (train_mode) {
      bool has_exact = false;
      for (const Box& b : batch.boxes)
        for (const Box& g : scene.gt_boxes)
          if (iou(b, g) > 0.999) has_exact = true;
      CHECK(has_exact);
    }
  }
}

TEST_CASE("proposal padding recycles candidates on tiny grids") {
  DetectorConfig cfg = micro_config();
  cfg.proposal_count = 12;  // only 9 anchors on a 1x1 grid
  Rng rng(3);
  DetectorModel model = DetectorModel::init(cfg, rng);
  Tensor image = Tensor::zeros({3, 8, 8});
  Tensor feats = backbone_forward(model, image);
  RpnOut rpn = rpn_forward(model, feats);
  const auto anchors = make_anchors(cfg, rpn.fh, rpn.fw);
  REQUIRE(anchors.size() == 9);
  const ProposalBatch batch = propose(rpn, anchors, cfg, 8, 8, false);
  CHECK(batch.boxes.size() == 12);
}

TEST_CASE("assignment rules") {
  ProposalBatch batch;
  batch.boxes = {{10, 10, 20, 20},   // identical to gt 0
                 {40, 40, 50, 50},   // disjoint
                 {0, 0, 1, 1},       // IoU exactly 0.5 with gt 2 = (0,0,1,2)
                 {10, 10, 19, 20}};  // high IoU with gt 0
  const std::vector<Box> gt{{10, 10, 20, 20}, {25, 25, 30, 30}, {0, 0, 1, 2}};
  const std::vector<int> labels{2, 1, 3};
  assign_proposals(batch, gt, labels, 0.5);

  CHECK(batch.assignment[0] == 2);
  CHECK(batch.matched_gt[0] == 0);
  CHECK(batch.assignment[1] == 0);  // background
  CHECK(batch.matched_gt[1] == -1);
  CHECK(iou(batch.boxes[2], gt[2]) == doctest::Approx(0.5));
  CHECK(batch.assignment[2] == 3);  // boundary inclusive
  CHECK(batch.assignment[3] == 2);
  CHECK(batch.positive_indices == std::vector<int>{0, 2, 3});
}

TEST_CASE("assignment is permutation-equivariant") {
  Rng rng(9);
  const Scene scene = generate_scene(5, SceneConfig{});
  ProposalBatch a;
  for (int i = 0; i < 20; ++i) {
    const double x0 = uniform(rng, 0.0, 40.0), y0 = uniform(rng, 0.0, 40.0);
    a.boxes.push_back({x0, y0, x0 + uniform(rng, 4.0, 20.0), y0 + uniform(rng, 4.0, 20.0)});
    a.objectness.push_back(uniform(rng, 0.0, 1.0));
  }
  ProposalBatch b = a;
  std::reverse(b.boxes.begin(), b.boxes.end());
  assign_proposals(a, scene.gt_boxes, scene.gt_labels, 0.5);
  assign_proposals(b, scene.gt_boxes, scene.gt_labels, 0.5);
  for (size_t i = 0; i < a.boxes.size(); ++i)
    CHECK(a.assignment[i] == b.assignment[a.boxes.size() - 1 - i]);
}

TEST_CASE("roi_pool golden cases") {
  SUBCASE("uniform feature map pools to the constant") {
    Tensor feats = Tensor::from_data({2, 4, 4}, std::vector<double>(32, 3.25));
    Tensor out = roi_pool(feats, {5.0, 3.0, 27.0, 29.0}, 8, 3);
    REQUIRE(out.shape() == std::vector<int>{2, 3, 3});
    for (int i = 0; i < out.size(); ++i) CHECK(out.at(i) == doctest::Approx(3.25));
  }
  SUBCASE("box inside one cell replicates that cell") {
    std::vector<double> data(16);
    for (int i = 0; i < 16; ++i) data[i] = i;
    Tensor feats = Tensor::from_data({1, 4, 4}, data);
    // box fully inside cell (2,1): x in [16,24), y in [8,16) at stride 8
    Tensor out = roi_pool(feats, {17.0, 9.0, 23.0, 15.0}, 8, 3);
    for (int i = 0; i < 9; ++i) CHECK(out.at(i) == doctest::Approx(1 * 4 + 2));
  }
  SUBCASE("2x2-cell box with roi_size 1 averages the four cells") {
    std::vector<double> data{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16};
    Tensor feats = Tensor::from_data({1, 4, 4}, data);
    // cells (0,0),(0,1),(1,0),(1,1) -> values 1,2,5,6; mean = 3.5
    Tensor out = roi_pool(feats, {0.0, 0.0, 16.0, 16.0}, 8, 1);
    CHECK(out.size() == 1);
    CHECK(out.at(0) == doctest::Approx(3.5));
  }
  SUBCASE("output ignores features outside the snapped region") {
    std::vector<double> base(16, 1.0);
    Tensor a = Tensor::from_data({1, 4, 4}, base);
    std::vector<double> poked = base;
    poked[15] = 99.0;  // cell (3,3), outside the box below
    Tensor b = Tensor::from_data({1, 4, 4}, poked);
    const Box box{0.0, 0.0, 16.0, 16.0};
    Tensor pa = roi_pool(a, box, 8, 2);
    Tensor pb = roi_pool(b, box, 8, 2);
    for (int i = 0; i < pa.size(); ++i) CHECK(pa.at(i) == pb.at(i));
  }
}

TEST_CASE("heads: shapes, determinism, finite on zero input") {
  Rng rng(4);
  DetectorModel model = DetectorModel::init(DetectorConfig::student_default(), rng);
  const int d = 3 * 3 * 64;
  Tensor rows = Tensor::zeros({5, d});
  HeadOut out = heads_forward(model, rows);
  CHECK(out.class_logits.shape() == std::vector<int>{5, 4});
  CHECK(out.deltas.shape() == std::vector<int>{5, 12});
  for (int i = 0; i < out.class_logits.size(); ++i) CHECK(std::isfinite(out.class_logits.at(i)));

  // identical rows give identical outputs
  Rng rng2(8);
  std::vector<double> row(d);
  for (double& v : row) v = uniform(rng2, -1.0, 1.0);
  std::vector<double> two_rows = row;
  two_rows.insert(two_rows.end(), row.begin(), row.end());
  HeadOut dup = heads_forward(model, Tensor::from_data({2, d}, two_rows));
  for (int c = 0; c < 4; ++c) CHECK(dup.class_logits.at(c) == dup.class_logits.at(4 + c));
  for (int c = 0; c < 12; ++c) CHECK(dup.deltas.at(c) == dup.deltas.at(12 + c));
}

TEST_CASE("rpn loss against a scalar oracle") {
  // single anchor on a 1x1 grid: craft the rpn output tensors directly
  RpnOut rpn;
  rpn.fh = rpn.fw = 1;
  const double z = 0.3;
  const std::array<double, 4> d{0.2, -0.1, 0.05, 0.4};
  const std::array<double, 4> t{0.0, 0.1, -0.15, 0.1};
  rpn.objectness = Tensor::from_data({1, 1, 1}, {z}, true);
  rpn.deltas = Tensor::from_data({4, 1, 1}, {d[0], d[1], d[2], d[3]}, true);

  RpnSample sample;
  sample.anchor_indices = {0};
  sample.labels = {1.0};
  sample.positive_anchor_indices = {0};
  sample.targets = {t};

  const double bce = std::log1p(std::exp(-z));  // -log sigmoid(z)
  double sl1 = 0.0;
  for (int i = 0; i < 4; ++i) sl1 += smooth_l1(d[i] - t[i]);
  Tensor loss = rpn_loss(rpn, sample);
  CHECK(loss.value() == doctest::Approx(bce + sl1).epsilon(1e-12));

  SUBCASE("perfect predictions drive the loss to zero") {
    RpnOut perfect;
    perfect.fh = perfect.fw = 1;
    perfect.objectness = Tensor::from_data({1, 1, 1}, {30.0}, true);
    perfect.deltas = Tensor::from_data({4, 1, 1}, {t[0], t[1], t[2], t[3]}, true);
    CHECK(rpn_loss(perfect, sample).value() == doctest::Approx(0.0).epsilon(1e-9));
  }
}

TEST_CASE("rpn sampling: no GT means negatives only") {
  Rng rng(6);
  DetectorConfig cfg = DetectorConfig::student_default();
  const auto anchors = make_anchors(cfg, 8, 8);
  const RpnSample sample = sample_rpn_targets(anchors, {}, rng);
  CHECK(sample.positive_anchor_indices.empty());
  CHECK(sample.targets.empty());
  CHECK(!sample.anchor_indices.empty());
  CHECK(sample.anchor_indices.size() <= 32);
  for (double l : sample.labels) CHECK(l == 0.0);
}

TEST_CASE("rpn sampling: argmax anchor is positive even below 0.7") {
  Rng rng(16);
  DetectorConfig cfg = DetectorConfig::student_default();
  const auto anchors = make_anchors(cfg, 8, 8);
  // a small off-grid GT that no anchor overlaps at 0.7
  const std::vector<Box> gt{{3.0, 3.0, 11.0, 9.0}};
  double best = 0.0;
  for (const Box& a : anchors) best = std::max(best, iou(a, gt[0]));
  REQUIRE(best < 0.7);
  const RpnSample sample = sample_rpn_targets(anchors, gt, rng);
  CHECK(sample.positive_anchor_indices.size() == 1);
  CHECK(sample.anchor_indices.size() <= 32);
}

TEST_CASE("checkpoint round-trip is exact") {
  Rng rng(12);
  DetectorModel model = DetectorModel::init(DetectorConfig::student_default(), rng);
  const fs::path path = fs::temp_directory_path() / "tadkd_test_model.ckpt";
  save_checkpoint(model, path.string());
  const DetectorModel back = load_checkpoint(path.string());
  CHECK(back.frozen);
  const auto a = model.named_params();
  const auto b = back.named_params();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    REQUIRE(a[i].second.shape() == b[i].second.shape());
    for (int j = 0; j < a[i].second.size(); ++j)
      CHECK(a[i].second.at(j) == b[i].second.at(j));
    CHECK_FALSE(b[i].second.requires_grad());
  }
  CHECK(back.config.backbone_channels == model.config.backbone_channels);
  fs::remove(path);
}

TEST_CASE("checkpoint errors: truncation, bad magic") {
  Rng rng(12);
  DetectorModel model = DetectorModel::init(micro_config(), rng);
  const fs::path path = fs::temp_directory_path() / "tadkd_trunc.ckpt";
  save_checkpoint(model, path.string());

  const auto full = fs::file_size(path);
  fs::resize_file(path, full - 64);
  CHECK_THROWS_WITH_AS(load_checkpoint(path.string()), doctest::Contains("payload"),
                       std::runtime_error);

  std::ofstream f(path, std::ios::binary);
  f << "NOTMAGIC-------";
  f.close();
  CHECK_THROWS_WITH_AS(load_checkpoint(path.string()), doctest::Contains("magic"),
                       std::runtime_error);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/nothing.ckpt"), std::runtime_error);
  fs::remove(path);
}

TEST_CASE("teacher checkpoint with mismatched config is rejected as a teacher") {
  Rng rng(14);
  DetectorConfig tcfg = DetectorConfig::teacher_default();
  tcfg.backbone_out_channels = 32;  // differs from the student default of 64
  DetectorModel teacher = DetectorModel::init(tcfg, rng);
  const fs::path path = fs::temp_directory_path() / "tadkd_teacher_mismatch.ckpt";
  save_checkpoint(teacher, path.string());
  const DetectorModel loaded = load_checkpoint(path.string());

  SceneConfig scfg = micro_scene_config();
  std::vector<Scene> scenes{generate_scene(1, scfg)};
  TrainConfig tc;
  tc.epochs = 1;
  tc.distill = DistillConfig{};
  CHECK_THROWS_WITH_AS(
      train_detector(scenes, {}, DetectorConfig::student_default(), tc, &loaded),
      doctest::Contains("config mismatch"), std::runtime_error);
  fs::remove(path);
}

TEST_CASE("end-to-end gradients of the detection loss pass finite differences") {
  const SceneConfig scfg = micro_scene_config();
  const Scene scene = generate_scene(3, scfg);
  Rng init(41);
  DetectorModel model = DetectorModel::init(micro_config(), init);

  Rng rng(7);
  ScenePlan plan;
  auto f = [&]() {
    return scene_loss(model, scene, nullptr, nullptr, nullptr, 1.0, rng, &plan).total;
  };
  std::vector<Tensor> params = model.params();
  const double err = finite_diff_check(f, params, 1e-5);
  CHECK(err <= 1e-5);
}
