#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tadkd/geometry.hpp"
#include "tadkd/tensor.hpp"

namespace tadkd {

struct AnchorSpec {
  double scale = 0;
  double aspect = 1.0;  // width / height
};

struct DetectorConfig {
  std::vector<int> backbone_channels = {32, 64, 128};
  int backbone_out_channels = 64;
  int stride = 8;
  std::vector<AnchorSpec> anchors;  // defaults to scales {12,20,28} x aspects {1,0.5,2}
  int proposal_count = 64;          // N
  double positive_iou = 0.5;
  int roi_size = 3;
  int num_classes = 3;  // C'
  int rpn_hidden = 32;
  int head_hidden = 64;

  static DetectorConfig teacher_default(int num_classes = 3);
  static DetectorConfig student_default(int num_classes = 3);
  void validate() const;
  int anchor_count() const { return static_cast<int>(anchors.size()); }
};

std::vector<AnchorSpec> default_anchor_specs();

/// Parameters of the miniature two-stage detector. Backbone: one 3x3
/// stride-2 conv + relu per stage, then a 1x1 projection to
/// backbone_out_channels. Proposal stage: shared 3x3 conv + relu, 1x1 convs
/// to per-anchor objectness and deltas. Heads: two hidden linear layers, a
/// class-logits layer (C'+1) and a per-class delta layer (4*C').
struct DetectorModel {
  DetectorConfig config;
  bool frozen = false;

  std::vector<Tensor> stage_w, stage_b;
  Tensor proj_w, proj_b;
  Tensor rpn_w, rpn_b, rpn_obj_w, rpn_obj_b, rpn_delta_w, rpn_delta_b;
  Tensor fc1_w, fc1_b, fc2_w, fc2_b;
  Tensor cls_w, cls_b, reg_w, reg_b;

  static DetectorModel init(const DetectorConfig& config, Rng& rng);
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  std::vector<Tensor> params() const;
  int64_t parameter_count() const;
  void set_frozen(bool frozen);
};

Tensor backbone_forward(const DetectorModel& model, const Tensor& image);

struct RpnOut {
  Tensor shared;      // {rpn_hidden, fh, fw}
  Tensor objectness;  // {A, fh, fw} logits
  Tensor deltas;      // {4A, fh, fw}
  int fh = 0, fw = 0;
};

RpnOut rpn_forward(const DetectorModel& model, const Tensor& features);

// Anchor boxes in image coordinates; index (a*fh + i)*fw + j matches the
// channel-major layout of the proposal-stage outputs.
std::vector<Box> make_anchors(const DetectorConfig& config, int fh, int fw);

struct ProposalBatch {
  std::vector<Box> boxes;            // N, image coordinates
  std::vector<double> objectness;    // N
  std::vector<int> assignment;       // N, 0 = background, else class id
  std::vector<int> matched_gt;       // N, -1 for background
  std::vector<int> positive_indices; // N_p
};

/// Decodes per-anchor proposals, clips to the image, applies NMS at IoU 0.7
/// and keeps the top-N by objectness, reusing suppressed boxes in score order
/// when fewer than N survive. In train mode, ground-truth boxes take the
/// leading slots so at least one positive always exists.
ProposalBatch propose(const RpnOut& rpn, const std::vector<Box>& anchors,
                      const DetectorConfig& config, int image_w, int image_h,
                      bool train_mode, const std::vector<Box>& gt_boxes = {});

void assign_proposals(ProposalBatch& batch, const std::vector<Box>& gt_boxes,
                      const std::vector<int>& gt_labels, double positive_iou);

struct RpnSample {
  std::vector<int> anchor_indices;            // sampled positives then negatives
  std::vector<double> labels;                 // 1/0 per sampled anchor
  std::vector<int> positive_anchor_indices;   // subset with regression targets
  std::vector<std::array<double, 4>> targets; // encode(anchor, matched gt)
};

/// Anchor sampling for the proposal-stage loss: positive if IoU >= 0.7 with
/// some GT or argmax anchor for a GT, negative if max IoU <= 0.3; up to 32
/// anchors at a 1:1 ratio (positives capped at 16, negatives fill the rest).
RpnSample sample_rpn_targets(const std::vector<Box>& anchors,
                             const std::vector<Box>& gt_boxes, Rng& rng);

Tensor rpn_loss(const RpnOut& rpn, const RpnSample& sample);

/// Average-pools a box region into a roi_size x roi_size grid per channel.
/// The box is scaled by 1/stride, snapped outward to cell boundaries and
/// partitioned into bins; sub-cell boxes expand to their containing cell.
Tensor roi_pool(const Tensor& features, const Box& box, int stride, int roi_size);

struct HeadOut {
  Tensor class_logits;  // {N, C'+1}
  Tensor deltas;        // {N, 4*C'}
};

// roi_rows: {N, roi_size*roi_size*C} stacked pooled features.
HeadOut heads_forward(const DetectorModel& model, const Tensor& roi_rows);

// Stacks roi_pool outputs for a list of boxes into {N, roi*roi*C}.
Tensor pool_rois(const Tensor& features, const std::vector<Box>& boxes,
                 int stride, int roi_size);

void save_checkpoint(const DetectorModel& model, const std::string& path);
// Loaded models come back frozen (no parameter requires grad).
DetectorModel load_checkpoint(const std::string& path);

}  // namespace tadkd
