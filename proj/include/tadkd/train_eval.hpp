#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tadkd/detector.hpp"
#include "tadkd/distill.hpp"
#include "tadkd/synth_data.hpp"

namespace tadkd {

struct TrainConfig {
  int epochs = 12;
  int batch_size = 8;
  double learning_rate = 0.01;  // x0.1 step at epoch ceil(2T/3)
  double momentum = 0.9;
  double weight_decay = 1e-4;
  uint64_t seed = 1;
  std::optional<DistillConfig> distill;

  void validate() const;
  int lr_drop_epoch() const { return (2 * epochs + 2) / 3; }
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
};

struct EvalReport {
  std::map<int, double> ap_per_class;  // at IoU 0.5
  double map50 = 0.0;
  double map5095 = 0.0;
  int64_t parameter_count = 0;
  double images_per_second = 0.0;
};

struct EpochStats {
  int epoch = 0;                // 1-based
  std::optional<double> gamma;  // absent on undistilled runs
  double l_total = 0, l_bk = 0, l_cls = 0, l_reg = 0, l_rpn = 0;
  double det_loss = 0;  // hard CE + hard smooth-L1 + RPN, without distill terms
  double val_map50 = 0;
};

struct RunRecord {
  std::vector<EpochStats> epochs;
  std::optional<EvalReport> final_eval;
};

struct TrainResult {
  DetectorModel model;
  RunRecord record;
};

/// Momentum-SGD training loop over whole scenes, batch-mean loss, one
/// optimizer step per batch. Deterministic for a fixed seed: the data order
/// of epoch e and all sampling derive from mix_seed(seed, e). With a teacher
/// present, distillation runs per config.distill with per-epoch decay.
TrainResult train_detector(const std::vector<Scene>& train_scenes,
                           const std::vector<Scene>& val_scenes,
                           const DetectorConfig& student_config,
                           const TrainConfig& config,
                           const DetectorModel* teacher = nullptr,
                           const std::function<void(const EpochStats&)>& on_epoch = {});

std::vector<Detection> infer(const DetectorModel& model, const Tensor& image,
                             double score_threshold = 0.05, double nms_iou = 0.5,
                             int max_detections = 20);

/// COCO-style continuous-area AP per class (all-points interpolation), or
/// the VOC 11-point variant. Classes with zero ground truth are excluded.
std::map<int, double> average_precision(
    const std::vector<std::vector<Detection>>& detections,
    const std::vector<std::vector<Box>>& gt_boxes,
    const std::vector<std::vector<int>>& gt_labels, double iou_threshold,
    bool voc11 = false);

double mean_ap(const std::map<int, double>& ap_per_class);

double eval_map50(const DetectorModel& model, const std::vector<Scene>& scenes);
EvalReport evaluate(const DetectorModel& model, const std::vector<Scene>& scenes,
                    bool voc11 = false);

// ---- per-scene loss assembly ---------------------------------------------------

/// Frozen discrete structure of one training step: proposals, assignments,
/// sampled RPN anchors, the foreground mask and the teacher responses.
/// Reusing a filled plan makes the loss a smooth function of the student
/// parameters, which is what the finite-difference suite checks.
struct ScenePlan {
  bool filled = false;
  ProposalBatch proposals;
  RpnSample rpn_sample;
  ForegroundMask mask;
  SharedHeadOutputs shared;
  bool distill_backbone = false;
  bool distill_heads = false;
  double gamma = 1.0;
};

struct SceneLossParts {
  Tensor total, bk, cls, reg, rpn;
  double det_value = 0;  // plain detection-loss value on the same forward
};

SceneLossParts scene_loss(const DetectorModel& student, const Scene& scene,
                          const DetectorModel* teacher,
                          const Tensor* teacher_features,
                          const DistillConfig* distill, double gamma, Rng& rng,
                          ScenePlan* plan = nullptr);

// ---- ablation & progressive ------------------------------------------------------

struct AblationRow {
  std::string name;
  std::optional<DistillConfig> distill;
  bool eval_teacher_only = false;
};

struct AblationResult {
  std::string name;
  double map50 = 0.0;
  RunRecord record;
};

// The component-analysis grid: baseline, each module alone, all three, all
// three plus decay, and the teacher itself.
std::vector<AblationRow> table1_grid(const DistillConfig& base);
// The mask-mode sweep: gaussian sigma^2 in {1,2,4}, rectangle, all-features,
// each as backbone-only distillation.
std::vector<AblationRow> table2_grid(const DistillConfig& base);

std::vector<AblationResult> run_ablation(const std::vector<Scene>& train_scenes,
                                         const std::vector<Scene>& val_scenes,
                                         const std::vector<Scene>& test_scenes,
                                         const DetectorConfig& student_config,
                                         const TrainConfig& base_config,
                                         const DetectorModel& teacher,
                                         const std::vector<AblationRow>& grid,
                                         int jobs = 1);

struct StageResult {
  DetectorModel model;
  RunRecord record;
  EvalReport eval;
};

/// Chained distillation: stage 0 trains the largest capacity from scratch;
/// stage k distills capacities[k] from the frozen stage k-1 model.
std::vector<StageResult> progressive_distill(
    const std::vector<Scene>& train_scenes, const std::vector<Scene>& val_scenes,
    const std::vector<Scene>& test_scenes,
    const std::vector<DetectorConfig>& capacities, const TrainConfig& base_config);

}  // namespace tadkd
