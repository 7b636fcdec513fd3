#pragma once

#include <vector>

#include "tadkd/detector.hpp"
#include "tadkd/geometry.hpp"
#include "tadkd/tensor.hpp"

namespace tadkd {

enum class BceOn { sigmoid, softmax_probs };

struct DistillConfig {
  double beta1 = 10.0;
  double beta2 = 3.0;
  double lambda = 0.6;
  MaskConfig mask;  // gaussian, sigma^2 = 2
  bool decay_enabled = true;
  bool enable_backbone = true;
  bool enable_cls = true;
  bool enable_reg = true;
  double temperature = 1.0;
  BceOn bce_on = BceOn::sigmoid;

  void validate() const;
};

/// gamma(t) = 1 - t/T for t in [0, T]. The per-epoch coefficients are
/// beta1*gamma, beta2*gamma and lambda*gamma, so supervision fades to zero
/// by the final epoch.
double decay_gamma(int t, int total_epochs);

struct DecaySchedule {
  int total_epochs = 12;
  bool enabled = true;
  double gamma(int t) const { return enabled ? decay_gamma(t, total_epochs) : 1.0; }
};

/// Teacher responses on the student's positive proposals.
struct SharedHeadOutputs {
  std::vector<std::vector<double>> teacher_soft_labels;  // N_p x (C'+1), each sums to 1
  std::vector<Box> teacher_boxes;                        // r_t
  std::vector<Box> proposal_boxes;                       // r_p
  std::vector<Box> gt_boxes;                             // r_gt
  size_t size() const { return proposal_boxes.size(); }
};

/// Masked feature imitation: (1/(2*N_a)) * sum M*(F_s - F_t)^2 with the mask
/// broadcast across channels and N_a the mask sum over all positions and
/// channels. Returns a constant 0 when the mask is all zero. Gradients flow
/// into F_s only.
Tensor backbone_distill_loss(const Tensor& student_features,
                             const Tensor& teacher_features,
                             const ForegroundMask& mask);

/// Runs the frozen teacher's RoI pipeline on the student's positive
/// proposals. No gradients are recorded through the teacher.
SharedHeadOutputs share_proposals(const DetectorModel& teacher,
                                  const Tensor& teacher_features,
                                  const ProposalBatch& batch,
                                  const std::vector<Box>& scene_gt_boxes,
                                  double temperature = 1.0);

/// Hard-label cross-entropy over all N proposals (mean over N) plus
/// beta1_eff times the soft-label binary cross-entropy on the positives
/// (summed over classes, mean over N_p). beta1_eff = gamma(t) * beta1.
Tensor cls_distill_loss(const Tensor& student_logits,
                        const std::vector<int>& hard_labels,
                        const std::vector<std::vector<double>>& teacher_soft_labels,
                        const std::vector<int>& positive_indices, double beta1_eff,
                        BceOn bce_on = BceOn::sigmoid);

/// True iff the teacher's regressed box beats the raw proposal against the
/// ground truth (strict inequality).
bool reg_distill_gate(const Box& r_p, const Box& r_t, const Box& r_gt);

/// Smooth-L1 regression in delta space: hard term against encode(r_p, r_gt)
/// plus beta2_eff times the gated term against encode(r_p, r_t); both sums
/// averaged over N_p. positive_deltas: {N_p, 4} student deltas at the
/// matched class. Empty teacher_boxes disables the distillation term.
Tensor reg_distill_loss(const Tensor& positive_deltas,
                        const std::vector<Box>& proposal_boxes,
                        const std::vector<Box>& teacher_boxes,
                        const std::vector<Box>& gt_boxes, double beta2_eff);

/// L = lambda_eff * L_bk + L_cls + L_reg + L_rpn. An undefined L_bk or a
/// zero lambda_eff drops the backbone term from the graph entirely so the
/// decayed-out loss is structurally identical to the plain detection loss.
Tensor total_loss(const Tensor& l_bk, const Tensor& l_cls, const Tensor& l_reg,
                  const Tensor& l_rpn, double lambda_eff);

}  // namespace tadkd
