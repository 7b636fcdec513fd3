#include "tadkd/train_eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace tadkd {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::runtime_error("train config: epochs must be >= 1");
  if (batch_size < 1) throw std::runtime_error("train config: batch_size must be >= 1");
  if (learning_rate <= 0) throw std::runtime_error("train config: learning_rate must be > 0");
  if (momentum < 0 || momentum >= 1)
    throw std::runtime_error("train config: momentum must be in [0,1)");
  if (weight_decay < 0) throw std::runtime_error("train config: weight_decay must be >= 0");
  if (distill) distill->validate();
}

// ---- per-scene loss ------------------------------------------------------------

namespace {

// Value of the plain detection loss on the current forward, kept out of the
// graph; used for the decayed-loss diagnostics in RunRecord.
double detection_loss_value(const Tensor& class_logits, const std::vector<int>& labels,
                            const Tensor& pos_deltas, const std::vector<double>& hard_targets,
                            double rpn_value) {
  const int n = class_logits.dim(0);
  const int k = class_logits.dim(1);
  const double* ld = class_logits.data();
  double ce = 0.0;
  for (int r = 0; r < n; ++r) {
    const double* row = ld + static_cast<size_t>(r) * k;
    double mx = row[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) sum += std::exp(row[i] - mx);
    ce += std::log(sum) + mx - row[labels[r]];
  }
  ce /= n;
  double reg = 0.0;
  if (pos_deltas.defined() && pos_deltas.size() > 0) {
    const int np = pos_deltas.dim(0);
    const double* dd = pos_deltas.data();
    for (int r = 0; r < np; ++r)
      for (int c = 0; c < 4; ++c)
        reg += smooth_l1(dd[static_cast<size_t>(r) * 4 + c] -
                         hard_targets[static_cast<size_t>(r) * 4 + c]);
    reg /= np;
  }
  return ce + reg + rpn_value;
}

}  // namespace

SceneLossParts scene_loss(const DetectorModel& student, const Scene& scene,
                          const DetectorModel* teacher, const Tensor* teacher_features,
                          const DistillConfig* distill, double gamma, Rng& rng,
                          ScenePlan* plan) {
  const DetectorConfig& cfg = student.config;
  const bool teach = teacher != nullptr && distill != nullptr;
  const double beta1_eff = teach && distill->enable_cls ? gamma * distill->beta1 : 0.0;
  const double beta2_eff = teach && distill->enable_reg ? gamma * distill->beta2 : 0.0;
  const double lambda_eff = teach && distill->enable_backbone ? gamma * distill->lambda : 0.0;

  Tensor feats = backbone_forward(student, scene.image);
  RpnOut rpn = rpn_forward(student, feats);

  ScenePlan local;
  ScenePlan* p = plan ? plan : &local;
  if (!p->filled) {
    const std::vector<Box> anchors = make_anchors(cfg, rpn.fh, rpn.fw);
    p->proposals = propose(rpn, anchors, cfg, scene.image.dim(2), scene.image.dim(1),
                           /*train_mode=*/true, scene.gt_boxes);
    assign_proposals(p->proposals, scene.gt_boxes, scene.gt_labels, cfg.positive_iou);
    p->rpn_sample = sample_rpn_targets(anchors, scene.gt_boxes, rng);
    p->distill_backbone = lambda_eff > 0.0;
    p->distill_heads = beta1_eff > 0.0 || beta2_eff > 0.0;
    p->gamma = gamma;
    if (p->distill_backbone) {
      std::vector<Box> scaled;
      scaled.reserve(scene.gt_boxes.size());
      for (const Box& b : scene.gt_boxes)
        scaled.push_back({b.x0 / cfg.stride, b.y0 / cfg.stride, b.x1 / cfg.stride,
                          b.y1 / cfg.stride});
      p->mask = build_mask(scaled, rpn.fw, rpn.fh, distill->mask);
    }
    if (p->distill_heads) {
      if (teacher_features == nullptr)
        throw std::runtime_error("scene_loss: teacher features required for head distillation");
      p->shared = share_proposals(*teacher, *teacher_features, p->proposals, scene.gt_boxes,
                                  distill->temperature);
    }
    p->filled = true;
  }

  SceneLossParts parts;
  parts.rpn = rpn_loss(rpn, p->rpn_sample);

  Tensor rois = pool_rois(feats, p->proposals.boxes, cfg.stride, cfg.roi_size);
  HeadOut heads = heads_forward(student, rois);

  const double b1 = p->distill_heads && p->shared.size() > 0 ? beta1_eff : 0.0;
  parts.cls = cls_distill_loss(heads.class_logits, p->proposals.assignment,
                               p->shared.teacher_soft_labels, p->proposals.positive_indices,
                               b1, distill ? distill->bce_on : BceOn::sigmoid);

  Tensor pos_deltas;
  std::vector<double> hard_targets;
  const auto& pos = p->proposals.positive_indices;
  if (pos.empty()) {
    parts.reg = Tensor::scalar(0.0);
  } else {
    Tensor pos_rows = gather_rows(heads.deltas, pos);
    std::vector<int> class_blocks;
    class_blocks.reserve(pos.size());
    std::vector<Box> r_p, r_gt;
    for (int i : pos) {
      class_blocks.push_back(p->proposals.assignment[i] - 1);
      r_p.push_back(p->proposals.boxes[i]);
      r_gt.push_back(scene.gt_boxes.at(p->proposals.matched_gt[i]));
    }
    pos_deltas = select_row_blocks(pos_rows, class_blocks, 4);
    hard_targets.reserve(pos.size() * 4);
    for (size_t i = 0; i < pos.size(); ++i) {
      const auto t = encode_deltas(r_p[i], r_gt[i]);
      hard_targets.insert(hard_targets.end(), t.begin(), t.end());
    }
    const bool use_teacher_boxes =
        beta2_eff > 0.0 && p->shared.teacher_boxes.size() == pos.size();
    parts.reg = reg_distill_loss(pos_deltas, r_p,
                                 use_teacher_boxes ? p->shared.teacher_boxes
                                                   : std::vector<Box>{},
                                 r_gt, beta2_eff);
  }

  if (lambda_eff > 0.0 && p->distill_backbone) {
    if (teacher_features == nullptr)
      throw std::runtime_error("scene_loss: teacher features required for backbone distillation");
    parts.bk = backbone_distill_loss(feats, *teacher_features, p->mask);
  }

  parts.total = total_loss(parts.bk, parts.cls, parts.reg, parts.rpn, lambda_eff);
  parts.det_value = detection_loss_value(heads.class_logits, p->proposals.assignment,
                                         pos_deltas, hard_targets, parts.rpn.value());
  return parts;
}

// ---- training loop --------------------------------------------------------------

TrainResult train_detector(const std::vector<Scene>& train_scenes,
                           const std::vector<Scene>& val_scenes,
                           const DetectorConfig& student_config,
                           const TrainConfig& config, const DetectorModel* teacher,
                           const std::function<void(const EpochStats&)>& on_epoch) {
  config.validate();
  if (train_scenes.empty()) throw std::runtime_error("train_detector: empty training set");
  DetectorConfig scfg = student_config;
  if (scfg.anchors.empty()) scfg.anchors = default_anchor_specs();
  scfg.validate();

  DistillConfig dc;
  bool distill_active = false;
  if (teacher != nullptr) {
    if (!teacher->frozen)
      throw std::runtime_error("train_detector: teacher model must be frozen");
    if (teacher->config.backbone_out_channels != scfg.backbone_out_channels ||
        teacher->config.stride != scfg.stride ||
        teacher->config.num_classes != scfg.num_classes)
      throw std::runtime_error(
          "train_detector: config mismatch: teacher and student must share "
          "backbone_out_channels, stride and num_classes");
    dc = config.distill.value_or(DistillConfig{});
    dc.validate();
    distill_active = dc.enable_backbone || dc.enable_cls || dc.enable_reg;
  }
  const DetectorModel* teach = distill_active ? teacher : nullptr;
  const DistillConfig* dcp = distill_active ? &dc : nullptr;

  Rng init_rng(mix_seed(config.seed, 0));
  DetectorModel model = DetectorModel::init(scfg, init_rng);
  std::vector<Tensor> params = model.params();
  SgdOptimizer opt(config.learning_rate, config.momentum, config.weight_decay);

  std::vector<Tensor> teacher_feature_cache(teach ? train_scenes.size() : 0);

  RunRecord record;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double gamma = teach ? (dc.decay_enabled ? decay_gamma(epoch, config.epochs) : 1.0)
                               : 1.0;
    opt.set_learning_rate(config.learning_rate *
                          (epoch >= config.lr_drop_epoch() ? 0.1 : 1.0));
    Rng rng(mix_seed(config.seed, static_cast<uint64_t>(epoch)));
    std::vector<int> order(train_scenes.size());
    std::iota(order.begin(), order.end(), 0);
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
      std::swap(order[i], order[uniform_int(rng, 0, i)]);

    double sum_total = 0, sum_bk = 0, sum_cls = 0, sum_reg = 0, sum_rpn = 0, sum_det = 0;
    int batch_index = 0;
    for (size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const size_t end = std::min(start + config.batch_size, order.size());
      Tensor batch_sum;
      double b_bk = 0, b_cls = 0, b_reg = 0, b_rpn = 0;
      for (size_t i = start; i < end; ++i) {
        const int si = order[i];
        const Tensor* tf = nullptr;
        if (teach) {
          if (!teacher_feature_cache[si].defined())
            teacher_feature_cache[si] = backbone_forward(*teacher, train_scenes[si].image);
          tf = &teacher_feature_cache[si];
        }
        SceneLossParts parts =
            scene_loss(model, train_scenes[si], teach, tf, dcp, gamma, rng, nullptr);
        batch_sum = batch_sum.defined() ? add(batch_sum, parts.total) : parts.total;
        b_bk += parts.bk.defined() ? parts.bk.value() : 0.0;
        b_cls += parts.cls.value();
        b_reg += parts.reg.value();
        b_rpn += parts.rpn.value();
        sum_det += parts.det_value;
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      Tensor batch_loss = scale(batch_sum, inv);
      const double loss_value = batch_loss.value();
      if (!std::isfinite(loss_value)) {
        std::ostringstream msg;
        msg << "train_detector: non-finite loss at epoch " << epoch << ", batch "
            << batch_index << " (L_bk=" << b_bk * inv << ", L_cls=" << b_cls * inv
            << ", L_reg=" << b_reg * inv << ", L_rpn=" << b_rpn * inv << ")";
        throw std::runtime_error(msg.str());
      }
      backward(batch_loss);
      opt.step(params);
      sum_total += loss_value * (end - start);
      sum_bk += b_bk;
      sum_cls += b_cls;
      sum_reg += b_reg;
      sum_rpn += b_rpn;
    }

    EpochStats st;
    st.epoch = epoch;
    if (teach) st.gamma = gamma;
    const double inv_n = 1.0 / static_cast<double>(train_scenes.size());
    st.l_total = sum_total * inv_n;
    st.l_bk = sum_bk * inv_n;
    st.l_cls = sum_cls * inv_n;
    st.l_reg = sum_reg * inv_n;
    st.l_rpn = sum_rpn * inv_n;
    st.det_loss = sum_det * inv_n;
    st.val_map50 = val_scenes.empty() ? 0.0 : eval_map50(model, val_scenes);
    if (on_epoch) on_epoch(st);
    record.epochs.push_back(st);
  }
  return {std::move(model), std::move(record)};
}

// ---- inference -------------------------------------------------------------------

std::vector<Detection> infer(const DetectorModel& model, const Tensor& image,
                             double score_threshold, double nms_iou,
                             int max_detections) {
  NoGradGuard no_grad;
  const DetectorConfig& cfg = model.config;
  Tensor feats = backbone_forward(model, image);
  RpnOut rpn = rpn_forward(model, feats);
  const std::vector<Box> anchors = make_anchors(cfg, rpn.fh, rpn.fw);
  ProposalBatch props =
      propose(rpn, anchors, cfg, image.dim(2), image.dim(1), /*train_mode=*/false);
  Tensor rois = pool_rois(feats, props.boxes, cfg.stride, cfg.roi_size);
  HeadOut heads = heads_forward(model, rois);
  Tensor probs = softmax(heads.class_logits);

  const int n = static_cast<int>(props.boxes.size());
  const int k = cfg.num_classes + 1;
  const double* pd = probs.data();
  const double* dd = heads.deltas.data();

  std::vector<Detection> all;
  for (int cls = 1; cls <= cfg.num_classes; ++cls) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      const double s = pd[static_cast<size_t>(i) * k + cls];
      if (s < score_threshold) continue;
      std::array<double, 4> d;
      for (int c = 0; c < 4; ++c)
        d[c] = dd[static_cast<size_t>(i) * 4 * cfg.num_classes + (cls - 1) * 4 + c];
      Box b = decode_deltas(d, props.boxes[i]);
      b.x0 = std::clamp(b.x0, 0.0, static_cast<double>(image.dim(2)) - 1e-3);
      b.y0 = std::clamp(b.y0, 0.0, static_cast<double>(image.dim(1)) - 1e-3);
      b.x1 = std::clamp(b.x1, b.x0 + 1e-3, static_cast<double>(image.dim(2)));
      b.y1 = std::clamp(b.y1, b.y0 + 1e-3, static_cast<double>(image.dim(1)));
      boxes.push_back(b);
      scores.push_back(s);
    }
    for (int idx : nms(boxes, scores, nms_iou))
      all.push_back({boxes[idx], cls, scores[idx]});
  }
  std::sort(all.begin(), all.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    return a.box.x0 < b.box.x0;
  });
  if (static_cast<int>(all.size()) > max_detections) all.resize(max_detections);
  return all;
}

// ---- average precision -------------------------------------------------------------

std::map<int, double> average_precision(
    const std::vector<std::vector<Detection>>& detections,
    const std::vector<std::vector<Box>>& gt_boxes,
    const std::vector<std::vector<int>>& gt_labels, double iou_threshold,
    bool voc11) {
  if (detections.size() != gt_boxes.size() || gt_boxes.size() != gt_labels.size())
    throw std::runtime_error("average_precision: per-image list sizes differ");
  const size_t images = detections.size();

  std::vector<int> classes;
  for (const auto& labels : gt_labels)
    for (int c : labels)
      if (std::find(classes.begin(), classes.end(), c) == classes.end())
        classes.push_back(c);
  std::sort(classes.begin(), classes.end());

  std::map<int, double> ap;
  for (int cls : classes) {
    struct Ref {
      int image;
      int order;
      double score;
      const Box* box;
    };
    std::vector<Ref> dets;
    std::vector<std::vector<const Box*>> gts(images);
    int total_gt = 0;
    for (size_t img = 0; img < images; ++img) {
      for (size_t d = 0; d < detections[img].size(); ++d)
        if (detections[img][d].class_id == cls)
          dets.push_back({static_cast<int>(img), static_cast<int>(d),
                          detections[img][d].score, &detections[img][d].box});
      for (size_t g = 0; g < gt_labels[img].size(); ++g)
        if (gt_labels[img][g] == cls) {
          gts[img].push_back(&gt_boxes[img][g]);
          ++total_gt;
        }
    }
    std::sort(dets.begin(), dets.end(), [](const Ref& a, const Ref& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image != b.image) return a.image < b.image;
      return a.order < b.order;
    });

    std::vector<std::vector<char>> matched(images);
    for (size_t img = 0; img < images; ++img) matched[img].assign(gts[img].size(), 0);

    const size_t nd = dets.size();
    std::vector<char> is_tp(nd, 0);
    for (size_t d = 0; d < nd; ++d) {
      const Ref& ref = dets[d];
      double best = 0.0;
      int best_g = -1;
      for (size_t g = 0; g < gts[ref.image].size(); ++g) {
        if (matched[ref.image][g]) continue;
        const double v = iou(*ref.box, *gts[ref.image][g]);
        if (v >= iou_threshold && v > best) {
          best = v;
          best_g = static_cast<int>(g);
        }
      }
      if (best_g >= 0) {
        matched[ref.image][best_g] = 1;
        is_tp[d] = 1;
      }
    }

    std::vector<double> precision(nd), recall(nd);
    int tp = 0;
    for (size_t d = 0; d < nd; ++d) {
      tp += is_tp[d];
      precision[d] = static_cast<double>(tp) / static_cast<double>(d + 1);
      recall[d] = static_cast<double>(tp) / total_gt;
    }

    double area = 0.0;
    if (voc11) {
      for (int r = 0; r <= 10; ++r) {
        const double level = r / 10.0;
        double pmax = 0.0;
        for (size_t d = 0; d < nd; ++d)
          if (recall[d] >= level) pmax = std::max(pmax, precision[d]);
        area += pmax / 11.0;
      }
    } else {
      std::vector<double> envelope(nd);
      double m = 0.0;
      for (size_t d = nd; d-- > 0;) {
        m = std::max(m, precision[d]);
        envelope[d] = m;
      }
      double prev_recall = 0.0;
      for (size_t d = 0; d < nd; ++d) {
        if (!is_tp[d]) continue;
        area += (recall[d] - prev_recall) * envelope[d];
        prev_recall = recall[d];
      }
    }
    ap[cls] = area;
  }
  return ap;
}

double mean_ap(const std::map<int, double>& ap_per_class) {
  if (ap_per_class.empty()) return 0.0;
  double s = 0.0;
  for (const auto& [cls, v] : ap_per_class) s += v;
  return s / ap_per_class.size();
}

double eval_map50(const DetectorModel& model, const std::vector<Scene>& scenes) {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Box>> boxes;
  std::vector<std::vector<int>> labels;
  dets.reserve(scenes.size());
  for (const Scene& s : scenes) {
    dets.push_back(infer(model, s.image));
    boxes.push_back(s.gt_boxes);
    labels.push_back(s.gt_labels);
  }
  return mean_ap(average_precision(dets, boxes, labels, 0.5));
}

EvalReport evaluate(const DetectorModel& model, const std::vector<Scene>& scenes,
                    bool voc11) {
  EvalReport report;
  report.parameter_count = model.parameter_count();

  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Box>> boxes;
  std::vector<std::vector<int>> labels;
  dets.reserve(scenes.size());
  const size_t timed = std::min<size_t>(scenes.size(), 100);
  const auto t0 = std::chrono::steady_clock::now();
  for (size_t i = 0; i < scenes.size(); ++i) {
    dets.push_back(infer(model, scenes[i].image));
    if (i + 1 == timed) {
      const auto t1 = std::chrono::steady_clock::now();
      const double sec = std::chrono::duration<double>(t1 - t0).count();
      report.images_per_second = sec > 0 ? static_cast<double>(timed) / sec : 0.0;
    }
    boxes.push_back(scenes[i].gt_boxes);
    labels.push_back(scenes[i].gt_labels);
  }

  report.ap_per_class = average_precision(dets, boxes, labels, 0.5, voc11);
  report.map50 = mean_ap(report.ap_per_class);
  double sum = 0.0;
  for (int t = 0; t < 10; ++t)
    sum += mean_ap(average_precision(dets, boxes, labels, 0.5 + 0.05 * t, voc11));
  report.map5095 = sum / 10.0;
  return report;
}

// ---- ablation ------------------------------------------------------------------------

std::vector<AblationRow> table1_grid(const DistillConfig& base) {
  auto with = [&base](bool bk, bool cls, bool reg, bool decay) {
    DistillConfig c = base;
    c.enable_backbone = bk;
    c.enable_cls = cls;
    c.enable_reg = reg;
    c.decay_enabled = decay;
    return c;
  };
  std::vector<AblationRow> grid;
  grid.push_back({"baseline", std::nullopt, false});
  grid.push_back({"backbone", with(true, false, false, false), false});
  grid.push_back({"cls", with(false, true, false, false), false});
  grid.push_back({"reg", with(false, false, true, false), false});
  grid.push_back({"all", with(true, true, true, false), false});
  grid.push_back({"all+decay", with(true, true, true, true), false});
  grid.push_back({"teacher", std::nullopt, true});
  return grid;
}

std::vector<AblationRow> table2_grid(const DistillConfig& base) {
  auto masked = [&base](MaskMode mode, double sigma_sq) {
    DistillConfig c = base;
    c.enable_backbone = true;
    c.enable_cls = false;
    c.enable_reg = false;
    c.decay_enabled = false;
    c.mask.mode = mode;
    c.mask.sigma_x_sq = sigma_sq;
    c.mask.sigma_y_sq = sigma_sq;
    return c;
  };
  std::vector<AblationRow> grid;
  grid.push_back({"gauss_s1", masked(MaskMode::gaussian, 1.0), false});
  grid.push_back({"gauss_s2", masked(MaskMode::gaussian, 2.0), false});
  grid.push_back({"gauss_s4", masked(MaskMode::gaussian, 4.0), false});
  grid.push_back({"rectangle", masked(MaskMode::rectangle, 2.0), false});
  grid.push_back({"all_features", masked(MaskMode::all, 2.0), false});
  return grid;
}

std::vector<AblationResult> run_ablation(const std::vector<Scene>& train_scenes,
                                         const std::vector<Scene>& val_scenes,
                                         const std::vector<Scene>& test_scenes,
                                         const DetectorConfig& student_config,
                                         const TrainConfig& base_config,
                                         const DetectorModel& teacher,
                                         const std::vector<AblationRow>& grid,
                                         int jobs) {
  std::vector<AblationResult> results(grid.size());
  if (grid.empty()) return results;
  std::atomic<size_t> next{0};
  std::vector<std::string> errors(grid.size());

  auto worker = [&]() {
    for (size_t i; (i = next.fetch_add(1)) < grid.size();) {
      const AblationRow& row = grid[i];
      try {
        if (row.eval_teacher_only) {
          results[i].name = row.name;
          results[i].map50 = evaluate(teacher, test_scenes).map50;
          continue;
        }
        TrainConfig tc = base_config;
        tc.distill = row.distill;
        TrainResult res = train_detector(train_scenes, val_scenes, student_config, tc,
                                         row.distill ? &teacher : nullptr);
        results[i].name = row.name;
        results[i].map50 = evaluate(res.model, test_scenes).map50;
        results[i].record = std::move(res.record);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };

  const int nthreads = std::max(1, std::min<int>(jobs, static_cast<int>(grid.size())));
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (size_t i = 0; i < grid.size(); ++i)
    if (!errors[i].empty())
      throw std::runtime_error("run_ablation: row '" + grid[i].name + "' failed: " + errors[i]);
  return results;
}

// ---- progressive distillation ------------------------------------------------------

std::vector<StageResult> progressive_distill(
    const std::vector<Scene>& train_scenes, const std::vector<Scene>& val_scenes,
    const std::vector<Scene>& test_scenes,
    const std::vector<DetectorConfig>& capacities, const TrainConfig& base_config) {
  if (capacities.size() < 2)
    throw std::runtime_error("progressive_distill: need at least two capacities");
  std::vector<int64_t> sizes;
  for (const DetectorConfig& cfg : capacities) {
    DetectorConfig c = cfg;
    if (c.anchors.empty()) c.anchors = default_anchor_specs();
    Rng rng(0);
    sizes.push_back(DetectorModel::init(c, rng).parameter_count());
  }
  for (size_t i = 1; i < capacities.size(); ++i) {
    if (sizes[i] >= sizes[i - 1])
      throw std::runtime_error(
          "progressive_distill: capacities must be strictly decreasing (stage " +
          std::to_string(i) + " has " + std::to_string(sizes[i]) + " params, previous " +
          std::to_string(sizes[i - 1]) + ")");
    if (capacities[i].backbone_out_channels != capacities[0].backbone_out_channels)
      throw std::runtime_error(
          "progressive_distill: all stages must share backbone_out_channels");
  }

  std::vector<StageResult> stages;
  for (size_t k = 0; k < capacities.size(); ++k) {
    TrainConfig tc = base_config;
    const DetectorModel* teacher = nullptr;
    if (k == 0) {
      tc.distill.reset();
    } else {
      if (!tc.distill) tc.distill = DistillConfig{};
      teacher = &stages[k - 1].model;
    }
    TrainResult res = train_detector(train_scenes, val_scenes, capacities[k], tc, teacher);
    StageResult stage;
    stage.model = std::move(res.model);
    stage.record = std::move(res.record);
    stage.eval = evaluate(stage.model, test_scenes);
    stage.record.final_eval = stage.eval;
    stage.model.set_frozen(true);
    stages.push_back(std::move(stage));
  }
  return stages;
}

}  // namespace tadkd
