#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tadkd/distill.hpp"
#include "tadkd/synth_data.hpp"
#include "tadkd/train_eval.hpp"

using namespace tadkd;

namespace {

constexpr double kLog2 = 0.6931471805599453;

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

Scene micro_scene(uint64_t seed) {
  SceneConfig cfg;
  cfg.image_size = 16;
  cfg.objects_min = 1;
  cfg.objects_max = 1;
  cfg.object_scale_min = 6.0;
  cfg.object_scale_max = 9.0;
  return generate_scene(seed, cfg);
}

std::vector<double> collect_grads(const std::vector<Tensor>& params) {
  std::vector<double> out;
  for (const Tensor& p : params) {
    const double* g = p.grad_data();
    if (g == nullptr)
      out.insert(out.end(), static_cast<size_t>(p.size()), 0.0);
    else
      out.insert(out.end(), g, g + p.size());
  }
  return out;
}

}  // namespace

TEST_CASE("decay schedule") {
  CHECK(decay_gamma(0, 12) == 1.0);
  CHECK(decay_gamma(12, 12) == 0.0);
  CHECK(decay_gamma(6, 12) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS(decay_gamma(13, 12), std::runtime_error);
  CHECK_THROWS_AS(decay_gamma(-1, 12), std::runtime_error);
  CHECK_THROWS_AS(decay_gamma(0, 0), std::runtime_error);

  DecaySchedule off{12, false};
  for (int t = 0; t <= 12; ++t) CHECK(off.gamma(t) == 1.0);
  DecaySchedule on{12, true};
  for (int t = 1; t <= 12; ++t) CHECK(on.gamma(t) < on.gamma(t - 1));
}

TEST_CASE("backbone distillation loss golden values") {
  SUBCASE("identical features give zero") {
    Tensor fs = Tensor::from_data({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
    Tensor ft = Tensor::from_data({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    ForegroundMask m{2, 2, {1, 1, 1, 1}};
    CHECK(backbone_distill_loss(fs, ft, m).value() == 0.0);
  }
  SUBCASE("all-zero mask is guarded to zero") {
    Tensor fs = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4}, true);
    Tensor ft = Tensor::from_data({1, 2, 2}, {4, 3, 2, 1});
    ForegroundMask m{2, 2, {0, 0, 0, 0}};
    Tensor l = backbone_distill_loss(fs, ft, m);
    CHECK(l.value() == 0.0);
    CHECK_FALSE(l.requires_grad());
  }
  SUBCASE("1x1x1 scalar case: (1/2) * (3-1)^2 / 1 = 2") {
    Tensor fs = Tensor::from_data({1, 1, 1}, {3.0}, true);
    Tensor ft = Tensor::from_data({1, 1, 1}, {1.0});
    ForegroundMask m{1, 1, {1.0}};
    CHECK(backbone_distill_loss(fs, ft, m).value() == doctest::Approx(2.0).epsilon(1e-12));
  }
  SUBCASE("shape mismatch is an error") {
    Tensor fs = Tensor::zeros({2, 2, 2});
    Tensor ft = Tensor::zeros({2, 2, 3});
    ForegroundMask m{2, 2, {1, 1, 1, 1}};
    CHECK_THROWS_AS(backbone_distill_loss(fs, ft, m), std::runtime_error);
  }
}

TEST_CASE("backbone loss: all-ones mask equals half the MSE; mask scale cancels") {
  Rng rng(21);
  const int c = 3, h = 4, w = 5;
  std::vector<double> sdata(c * h * w), tdata(c * h * w);
  for (double& v : sdata) v = uniform(rng, -1, 1);
  for (double& v : tdata) v = uniform(rng, -1, 1);
  Tensor fs = Tensor::from_data({c, h, w}, sdata, true);
  Tensor ft = Tensor::from_data({c, h, w}, tdata);

  ForegroundMask ones{w, h, std::vector<double>(static_cast<size_t>(w) * h, 1.0)};
  double mse = 0.0;
  for (int i = 0; i < c * h * w; ++i) mse += (sdata[i] - tdata[i]) * (sdata[i] - tdata[i]);
  mse /= c * h * w;
  CHECK(backbone_distill_loss(fs, ft, ones).value() ==
        doctest::Approx(mse / 2).epsilon(1e-12));

  // scaling the mask by k > 0 cancels between numerator and N_a
  ForegroundMask random_mask{w, h, {}};
  random_mask.values.resize(static_cast<size_t>(w) * h);
  for (double& v : random_mask.values) v = uniform(rng, 0.05, 1.0);
  const double base = backbone_distill_loss(fs, ft, random_mask).value();
  for (double k : {0.25, 3.0, 117.0}) {
    ForegroundMask scaled = random_mask;
    for (double& v : scaled.values) v *= k;
    CHECK(std::abs(backbone_distill_loss(fs, ft, scaled).value() - base) < 1e-12);
  }
}

TEST_CASE("backbone loss gradients flow to the student side only") {
  Rng rng(33);
  std::vector<double> sdata(12), tdata(12), mdata(6);
  for (double& v : sdata) v = uniform(rng, -1, 1);
  for (double& v : tdata) v = uniform(rng, -1, 1);
  for (double& v : mdata) v = uniform(rng, 0.1, 1.0);
  Tensor fs = Tensor::from_data({2, 2, 3}, sdata, true);
  Tensor ft = Tensor::from_data({2, 2, 3}, tdata, true);  // even if it asks for grads
  ForegroundMask m{3, 2, mdata};

  Tensor loss = backbone_distill_loss(fs, ft, m);
  backward(loss);
  CHECK(fs.grad_data() != nullptr);
  CHECK(ft.grad_data() == nullptr);  // detached inside the loss
  CHECK(ft.requires_grad());         // caller's tensor is untouched

  fs.zero_grad();
  auto f = [&]() { return backbone_distill_loss(fs, ft, m); };
  CHECK(finite_diff_check(f, {fs}, 1e-5) <= 1e-5);
}

TEST_CASE("share_proposals contracts") {
  Rng rng(2);
  DetectorModel teacher = DetectorModel::init(micro_config(), rng);
  teacher.set_frozen(true);
  const Scene scene = micro_scene(4);
  Tensor tf = backbone_forward(teacher, scene.image);

  SUBCASE("empty positives give empty outputs") {
    ProposalBatch batch;
    batch.boxes = {{1, 1, 7, 7}};
    batch.objectness = {0.5};
    batch.assignment = {0};
    batch.matched_gt = {-1};
    const SharedHeadOutputs out = share_proposals(teacher, tf, batch, scene.gt_boxes);
    CHECK(out.size() == 0);
    CHECK(out.teacher_soft_labels.empty());
  }
  SUBCASE("soft labels are probabilities over C'+1 classes") {
    ProposalBatch batch;
    batch.boxes = {scene.gt_boxes[0], {1, 1, 9, 9}};
    batch.objectness = {1.0, 0.9};
    assign_proposals(batch, scene.gt_boxes, scene.gt_labels, 0.5);
    REQUIRE(!batch.positive_indices.empty());
    const SharedHeadOutputs out = share_proposals(teacher, tf, batch, scene.gt_boxes);
    REQUIRE(out.size() == batch.positive_indices.size());
    for (const auto& y : out.teacher_soft_labels) {
      REQUIRE(y.size() == 4);
      double sum = 0.0;
      for (double p : y) {
        CHECK(p >= 0.0);
        sum += p;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(out.proposal_boxes.size() == out.teacher_boxes.size());
    CHECK(out.gt_boxes.size() == out.teacher_boxes.size());
  }
  SUBCASE("uniform-zero teacher logits give uniform soft labels") {
    DetectorModel flat = DetectorModel::init(micro_config(), rng);
    for (Tensor t : {flat.cls_w, flat.cls_b}) std::fill_n(t.data(), t.size(), 0.0);
    flat.set_frozen(true);
    Tensor ff = backbone_forward(flat, scene.image);
    ProposalBatch batch;
    batch.boxes = {scene.gt_boxes[0]};
    batch.objectness = {1.0};
    assign_proposals(batch, scene.gt_boxes, scene.gt_labels, 0.5);
    const SharedHeadOutputs out = share_proposals(flat, ff, batch, scene.gt_boxes);
    REQUIRE(out.size() == 1);
    for (double p : out.teacher_soft_labels[0])
      CHECK(p == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("unfrozen teacher is rejected") {
    DetectorModel hot = DetectorModel::init(micro_config(), rng);
    ProposalBatch batch;
    CHECK_THROWS_AS(share_proposals(hot, tf, batch, scene.gt_boxes), std::runtime_error);
  }
}

TEST_CASE("classification distillation loss") {
  SUBCASE("beta 0 reduces exactly to mean hard-label cross-entropy") {
    Tensor logits = Tensor::from_data({3, 4}, {0.5, -1, 2, 0, 1, 1, -2, 0.3, 0, 0, 0, 0}, true);
    const std::vector<int> labels{2, 0, 3};
    Tensor plain = reduce_mean(softmax_cross_entropy(logits, labels));
    Tensor distilled = cls_distill_loss(logits, labels, {{0.25, 0.25, 0.25, 0.25}}, {0}, 0.0);
    CHECK(distilled.value() == plain.value());
  }
  SUBCASE("golden BCE: uniform student vs one-hot teacher = 2 log 2") {
    // one positive sample, two classes, logits 0 -> sigmoid 0.5 per class
    Tensor logits = Tensor::from_data({1, 2}, {0.0, 0.0}, true);
    const std::vector<int> labels{1};
    const std::vector<std::vector<double>> y_t{{1.0, 0.0}};
    Tensor loss = cls_distill_loss(logits, labels, y_t, {0}, 1.0);
    // CE(uniform, label) = log 2; BCE = -log 0.5 - log 0.5 = 2 log 2
    CHECK(loss.value() == doctest::Approx(kLog2 + 2 * kLog2).epsilon(1e-12));
    CHECK(2 * kLog2 == doctest::Approx(1.3863).epsilon(1e-4));
  }
  SUBCASE("perfect one-hot student with matching teacher drives the loss to zero") {
    Tensor logits = Tensor::from_data({1, 3}, {40.0, -40.0, -40.0}, true);
    const std::vector<int> labels{0};
    const std::vector<std::vector<double>> y_t{{1.0, 0.0, 0.0}};
    Tensor loss = cls_distill_loss(logits, labels, y_t, {0}, 10.0);
    CHECK(loss.value() == doctest::Approx(0.0).epsilon(1e-9));
  }
  SUBCASE("bad positive index is an error") {
    Tensor logits = Tensor::from_data({2, 3}, {0, 0, 0, 0, 0, 0}, true);
    CHECK_THROWS_WITH_AS(
        cls_distill_loss(logits, {0, 1}, {{0.3, 0.3, 0.4}}, {5}, 1.0),
        doctest::Contains("out of range"), std::runtime_error);
  }
  SUBCASE("gradients pass finite differences (sigmoid and softmax variants)") {
    Rng rng(3);
    std::vector<double> ld(4 * 3);
    for (double& v : ld) v = uniform(rng, -1, 1);
    Tensor logits = Tensor::from_data({4, 3}, ld, true);
    const std::vector<int> labels{1, 0, 2, 1};
    const std::vector<std::vector<double>> y_t{{0.7, 0.2, 0.1}, {0.1, 0.8, 0.1}};
    const std::vector<int> pos{0, 2};
    for (BceOn mode : {BceOn::sigmoid, BceOn::softmax_probs}) {
      logits.zero_grad();
      auto f = [&]() { return cls_distill_loss(logits, labels, y_t, pos, 2.5, mode); };
      CHECK(finite_diff_check(f, {logits}, 1e-5) <= 1e-5);
    }
  }
}

TEST_CASE("regression gate") {
  const Box gt{0, 0, 10, 10};
  const Box off{1, 1, 11, 11};
  CHECK(reg_distill_gate(off, gt, gt));        // teacher exactly on gt
  CHECK_FALSE(reg_distill_gate(off, off, gt)); // equality fails the strict >

  // proposal at IoU 0.6, teacher at IoU 0.55: gate stays closed
  const Box r_p{2.5, 0, 12.5, 10};
  const double dx = 2.903225806451613;
  const Box r_t{dx, 0, 10 + dx, 10};
  CHECK(iou(r_p, gt) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(iou(r_t, gt) == doctest::Approx(0.55).epsilon(1e-12));
  CHECK_FALSE(reg_distill_gate(r_p, r_t, gt));
}

TEST_CASE("gate decision is invariant to uniform coordinate scaling") {
  // IoU is scale-invariant, so gating in image vs feature coordinates agrees
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    auto rand_box = [&rng]() {
      const double x0 = uniform(rng, 0, 40), y0 = uniform(rng, 0, 40);
      return Box{x0, y0, x0 + uniform(rng, 2, 20), y0 + uniform(rng, 2, 20)};
    };
    const Box r_p = rand_box(), r_t = rand_box(), r_gt = rand_box();
    const double k = uniform(rng, 0.05, 16.0);
    auto scaled = [k](const Box& b) { return Box{b.x0 / k, b.y0 / k, b.x1 / k, b.y1 / k}; };
    CHECK(reg_distill_gate(r_p, r_t, r_gt) ==
          reg_distill_gate(scaled(r_p), scaled(r_t), scaled(r_gt)));
  }
}

TEST_CASE("regression distillation loss") {
  const Box gt{0, 0, 10, 10};
  const Box prop{2, 1, 11, 12};

  SUBCASE("empty positives give zero") {
    Tensor d = Tensor::zeros({0, 4});
    CHECK(reg_distill_loss(d, {}, {}, {}, 3.0).value() == 0.0);
  }
  SUBCASE("closed gates reduce to the plain smooth-L1 term") {
    // teacher box far off: gate false
    const Box bad_teacher{30, 30, 45, 45};
    Rng rng(5);
    std::vector<double> dd(4);
    for (double& v : dd) v = uniform(rng, -0.5, 0.5);
    Tensor with_gate = Tensor::from_data({1, 4}, dd, true);
    Tensor without = Tensor::from_data({1, 4}, dd, true);
    Tensor a = reg_distill_loss(with_gate, {prop}, {bad_teacher}, {gt}, 3.0);
    Tensor b = reg_distill_loss(without, {prop}, {}, {gt}, 0.0);
    CHECK(a.value() == b.value());

    backward(a);
    backward(b);
    const double* ga = with_gate.grad_data();
    const double* gb = without.grad_data();
    for (int i = 0; i < 4; ++i) CHECK(ga[i] == gb[i]);  // bit-identical
  }
  SUBCASE("open gate with matching deltas adds nothing") {
    const auto to_teacher = encode_deltas(prop, gt);  // teacher = gt: gate open
    Tensor deltas = Tensor::from_data({1, 4}, {to_teacher[0], to_teacher[1],
                                               to_teacher[2], to_teacher[3]}, true);
    Tensor with_distill = reg_distill_loss(deltas, {prop}, {gt}, {gt}, 3.0);
    Tensor hard_only = reg_distill_loss(deltas, {prop}, {}, {gt}, 0.0);
    CHECK(with_distill.value() == doctest::Approx(hard_only.value()).epsilon(1e-15));
  }
  SUBCASE("golden distill term: residual (0.5,0,0,0) adds beta2 * 0.125") {
    const Box teacher_box{1, 0.5, 10.5, 11};  // closer to gt than prop
    REQUIRE(reg_distill_gate(prop, teacher_box, gt));
    const auto t_enc = encode_deltas(prop, teacher_box);
    Tensor deltas = Tensor::from_data(
        {1, 4}, {t_enc[0] + 0.5, t_enc[1], t_enc[2], t_enc[3]}, true);
    const double beta2 = 3.0;
    const double with_d = reg_distill_loss(deltas, {prop}, {teacher_box}, {gt}, beta2).value();
    const double hard = reg_distill_loss(deltas, {prop}, {}, {gt}, 0.0).value();
    CHECK(with_d - hard == doctest::Approx(beta2 * 0.125).epsilon(1e-12));
  }
  SUBCASE("gate gradient: zero when closed, nonzero when open") {
    Rng rng(8);
    std::vector<double> dd(4);
    for (double& v : dd) v = uniform(rng, 0.1, 0.4);
    // closed gate: distill gradient contribution is exactly zero
    {
      Tensor x = Tensor::from_data({1, 4}, dd, true);
      Tensor y = Tensor::from_data({1, 4}, dd, true);
      backward(reg_distill_loss(x, {prop}, {{30, 30, 45, 45}}, {gt}, 3.0));
      backward(reg_distill_loss(y, {prop}, {}, {gt}, 0.0));
      for (int i = 0; i < 4; ++i) CHECK(x.grad_data()[i] == y.grad_data()[i]);
    }
    // open gate: gradients differ
    {
      Tensor x = Tensor::from_data({1, 4}, dd, true);
      Tensor y = Tensor::from_data({1, 4}, dd, true);
      backward(reg_distill_loss(x, {prop}, {gt}, {gt}, 3.0));
      backward(reg_distill_loss(y, {prop}, {}, {gt}, 0.0));
      bool any_diff = false;
      for (int i = 0; i < 4; ++i)
        if (x.grad_data()[i] != y.grad_data()[i]) any_diff = true;
      CHECK(any_diff);
    }
  }
  SUBCASE("gradients pass finite differences") {
    Rng rng(13);
    std::vector<double> dd(8);
    for (double& v : dd) v = uniform(rng, -0.4, 0.4);
    Tensor deltas = Tensor::from_data({2, 4}, dd, true);
    const std::vector<Box> props{prop, {1, 1, 8, 9}};
    const std::vector<Box> teachers{gt, {0.5, 0.5, 9, 9.5}};
    const std::vector<Box> gts{gt, gt};
    auto f = [&]() { return reg_distill_loss(deltas, props, teachers, gts, 2.0); };
    CHECK(finite_diff_check(f, {deltas}, 1e-5) <= 1e-5);
  }
}

TEST_CASE("total loss assembly") {
  Tensor cls = Tensor::scalar(1.0, true);
  Tensor reg = Tensor::scalar(1.0, true);
  Tensor rpn = Tensor::scalar(0.5, true);
  Tensor bk = Tensor::scalar(2.0, true);

  SUBCASE("golden sum: 0.3*2 + 1 + 1 + 0.5 = 3.1") {
    CHECK(total_loss(bk, cls, reg, rpn, 0.3).value() ==
          doctest::Approx(3.1).epsilon(1e-15));
  }
  SUBCASE("all zero components give zero") {
    Tensor z = Tensor::scalar(0.0, true);
    CHECK(total_loss(z, z, z, z, 1.0).value() == 0.0);
  }
  SUBCASE("zero lambda or undefined backbone term drop it from the graph") {
    Tensor a = total_loss(bk, cls, reg, rpn, 0.0);
    Tensor b = total_loss(Tensor{}, cls, reg, rpn, 0.7);
    CHECK(a.value() == 2.5);
    CHECK(b.value() == 2.5);
  }
}

TEST_CASE("decay endpoint: gamma 0 is bit-identical to the undistilled loss") {
  Rng rng(55);
  DetectorModel teacher = DetectorModel::init(micro_config(), rng);
  teacher.set_frozen(true);
  DetectorModel student = DetectorModel::init(micro_config(), rng);
  const Scene scene = micro_scene(9);
  Tensor tf = backbone_forward(teacher, scene.image);
  DistillConfig dc;

  std::vector<Tensor> params = student.params();

  Rng rng_a(101);
  for (Tensor& p : params) p.zero_grad();
  SceneLossParts distilled =
      scene_loss(student, scene, &teacher, &tf, &dc, /*gamma=*/0.0, rng_a, nullptr);
  backward(distilled.total);
  const std::vector<double> grads_distilled = collect_grads(params);
  const double value_distilled = distilled.total.value();

  Rng rng_b(101);
  for (Tensor& p : params) p.zero_grad();
  SceneLossParts plain =
      scene_loss(student, scene, nullptr, nullptr, nullptr, 1.0, rng_b, nullptr);
  backward(plain.total);
  const std::vector<double> grads_plain = collect_grads(params);

  CHECK(value_distilled == plain.total.value());
  CHECK(grads_distilled == grads_plain);
}

TEST_CASE("teacher opacity: no teacher parameter ever receives a gradient") {
  Rng rng(66);
  DetectorModel teacher = DetectorModel::init(micro_config(), rng);
  teacher.set_frozen(true);
  const std::vector<Tensor> tparams = teacher.params();
  std::vector<std::vector<double>> before;
  for (const Tensor& t : tparams) before.push_back(t.data_vec());

  DetectorModel student = DetectorModel::init(micro_config(), rng);
  const Scene scene = micro_scene(10);
  Tensor tf = backbone_forward(teacher, scene.image);
  DistillConfig dc;
  Rng step_rng(5);
  std::vector<Tensor> params = student.params();
  SceneLossParts parts = scene_loss(student, scene, &teacher, &tf, &dc, 0.8, step_rng, nullptr);
  backward(parts.total);
  SgdOptimizer opt(0.01, 0.9, 1e-4);
  opt.step(params);

  for (size_t i = 0; i < tparams.size(); ++i) {
    CHECK(tparams[i].grad_data() == nullptr);
    CHECK(tparams[i].data_vec() == before[i]);
  }
}

TEST_CASE("full distilled loss passes finite differences on a micro scene") {
  Rng rng(77);
  DetectorModel teacher = DetectorModel::init(micro_config(), rng);
  teacher.set_frozen(true);
  DetectorModel student = DetectorModel::init(micro_config(), rng);
  const Scene scene = micro_scene(11);
  Tensor tf = backbone_forward(teacher, scene.image);
  DistillConfig dc;

  Rng plan_rng(3);
  ScenePlan plan;
  auto f = [&]() {
    return scene_loss(student, scene, &teacher, &tf, &dc, 0.75, plan_rng, &plan).total;
  };
  std::vector<Tensor> params = student.params();
  CHECK(finite_diff_check(f, params, 1e-5) <= 1e-5);
}
