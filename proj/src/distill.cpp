#include "tadkd/distill.hpp"

#include <cmath>
#include <stdexcept>

namespace tadkd {

void DistillConfig::validate() const {
  if (beta1 < 0 || beta2 < 0 || lambda < 0)
    throw std::runtime_error("distill config: beta1, beta2, lambda must be >= 0");
  if (temperature <= 0) throw std::runtime_error("distill config: temperature must be > 0");
  if (mask.mode == MaskMode::gaussian && (mask.sigma_x_sq <= 0 || mask.sigma_y_sq <= 0))
    throw std::runtime_error("distill config: sigma values must be > 0");
}

double decay_gamma(int t, int total_epochs) {
  if (total_epochs < 1) throw std::runtime_error("decay_gamma: total_epochs must be >= 1");
  if (t < 0 || t > total_epochs)
    throw std::runtime_error("decay_gamma: epoch " + std::to_string(t) + " outside [0," +
                             std::to_string(total_epochs) + "]");
  return 1.0 - static_cast<double>(t) / total_epochs;
}

Tensor backbone_distill_loss(const Tensor& student_features,
                             const Tensor& teacher_features,
                             const ForegroundMask& mask) {
  if (student_features.shape() != teacher_features.shape())
    throw std::runtime_error("backbone_distill_loss: student/teacher feature shape mismatch");
  if (student_features.shape().size() != 3 || student_features.dim(1) != mask.h ||
      student_features.dim(2) != mask.w)
    throw std::runtime_error("backbone_distill_loss: mask does not match feature grid");

  const int channels = student_features.dim(0);
  const double n_active = channels * mask.sum();
  if (n_active == 0.0) return Tensor::scalar(0.0);

  // detached copy: gradients must never reach the teacher
  Tensor teacher = Tensor::from_data(teacher_features.shape(),
                                     teacher_features.data_vec());
  Tensor mask_t = Tensor::from_data({mask.h, mask.w}, mask.values);
  Tensor diff = sub(student_features, teacher);
  Tensor weighted = mul_mask_chw(mul(diff, diff), mask_t);
  return scale(reduce_sum(weighted), 1.0 / (2.0 * n_active));
}

SharedHeadOutputs share_proposals(const DetectorModel& teacher,
                                  const Tensor& teacher_features,
                                  const ProposalBatch& batch,
                                  const std::vector<Box>& scene_gt_boxes,
                                  double temperature) {
  if (!teacher.frozen)
    throw std::runtime_error("share_proposals: teacher must be frozen");
  SharedHeadOutputs out;
  if (batch.positive_indices.empty()) return out;

  std::vector<Box> boxes;
  for (int i : batch.positive_indices) boxes.push_back(batch.boxes[i]);
  Tensor rows = pool_rois(teacher_features, boxes, teacher.config.stride,
                          teacher.config.roi_size);
  HeadOut heads = heads_forward(teacher, rows);

  const int k = teacher.config.num_classes + 1;
  const double* logits = heads.class_logits.data();
  const double* deltas = heads.deltas.data();
  for (size_t r = 0; r < boxes.size(); ++r) {
    const int prop_idx = batch.positive_indices[r];
    const int cls = batch.assignment[prop_idx];
    std::vector<double> probs(k);
    double mx = -1e300;
    for (int c = 0; c < k; ++c) mx = std::max(mx, logits[r * k + c] / temperature);
    double sum = 0.0;
    for (int c = 0; c < k; ++c) {
      probs[c] = std::exp(logits[r * k + c] / temperature - mx);
      sum += probs[c];
    }
    for (double& p : probs) p /= sum;
    out.teacher_soft_labels.push_back(std::move(probs));

    std::array<double, 4> d;
    for (int c = 0; c < 4; ++c)
      d[c] = deltas[r * 4 * teacher.config.num_classes + (cls - 1) * 4 + c];
    out.teacher_boxes.push_back(decode_deltas(d, batch.boxes[prop_idx]));
    out.proposal_boxes.push_back(batch.boxes[prop_idx]);
    out.gt_boxes.push_back(scene_gt_boxes.at(batch.matched_gt[prop_idx]));
  }
  return out;
}

Tensor cls_distill_loss(const Tensor& student_logits,
                        const std::vector<int>& hard_labels,
                        const std::vector<std::vector<double>>& teacher_soft_labels,
                        const std::vector<int>& positive_indices, double beta1_eff,
                        BceOn bce_on) {
  Tensor ce = reduce_mean(softmax_cross_entropy(student_logits, hard_labels));
  if (beta1_eff == 0.0 || positive_indices.empty()) return ce;
  if (teacher_soft_labels.size() != positive_indices.size())
    throw std::runtime_error("cls_distill_loss: soft label count vs positive indices");

  const int k = student_logits.dim(1);
  for (int i : positive_indices)
    if (i < 0 || i >= student_logits.dim(0))
      throw std::runtime_error("cls_distill_loss: positive index " + std::to_string(i) +
                               " out of range");
  std::vector<double> targets;
  targets.reserve(positive_indices.size() * k);
  for (const auto& y : teacher_soft_labels) {
    if (static_cast<int>(y.size()) != k)
      throw std::runtime_error("cls_distill_loss: soft label width mismatch");
    targets.insert(targets.end(), y.begin(), y.end());
  }
  Tensor pos_logits = gather_rows(student_logits, positive_indices);
  Tensor bce;
  if (bce_on == BceOn::sigmoid) {
    bce = reduce_mean(bce_with_logits(pos_logits, targets));
  } else {
    // binary cross-entropy against the student's softmax probabilities
    Tensor probs = softmax(pos_logits);
    const int n = pos_logits.dim(0);
    std::vector<double> per_row_cache;
    Tensor probs_in = probs;
    auto targ = targets;
    std::vector<double> vals(n, 0.0);
    const double* pd = probs.data();
    const double eps = 1e-12;
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < k; ++c) {
        const double p = std::min(std::max(pd[static_cast<size_t>(r) * k + c], eps), 1.0 - eps);
        const double y = targ[static_cast<size_t>(r) * k + c];
        vals[r] += -y * std::log(p) - (1.0 - y) * std::log(1.0 - p);
      }
    Tensor rowloss = make_op("bce_on_probs", {n}, std::move(vals), {probs},
                             [probs_in, targ, n, k, eps](const double* g) mutable {
                               if (!probs_in.requires_grad()) return;
                               double* gp = probs_in.grad();
                               const double* pd = probs_in.data();
                               for (int r = 0; r < n; ++r)
                                 for (int c = 0; c < k; ++c) {
                                   const size_t o = static_cast<size_t>(r) * k + c;
                                   const double p = std::min(std::max(pd[o], eps), 1.0 - eps);
                                   const double y = targ[o];
                                   gp[o] += g[r] * (-y / p + (1.0 - y) / (1.0 - p));
                                 }
                             });
    bce = reduce_mean(rowloss);
  }
  return add(ce, scale(bce, beta1_eff));
}

bool reg_distill_gate(const Box& r_p, const Box& r_t, const Box& r_gt) {
  return iou(r_t, r_gt) > iou(r_p, r_gt);
}

Tensor reg_distill_loss(const Tensor& positive_deltas,
                        const std::vector<Box>& proposal_boxes,
                        const std::vector<Box>& teacher_boxes,
                        const std::vector<Box>& gt_boxes, double beta2_eff) {
  const size_t np = proposal_boxes.size();
  if (np == 0) return Tensor::scalar(0.0);
  if (positive_deltas.shape().size() != 2 || positive_deltas.dim(0) != static_cast<int>(np) ||
      positive_deltas.dim(1) != 4)
    throw std::runtime_error("reg_distill_loss: expected {N_p,4} student deltas");
  if (gt_boxes.size() != np)
    throw std::runtime_error("reg_distill_loss: gt box count mismatch");

  std::vector<double> hard_targets;
  hard_targets.reserve(np * 4);
  for (size_t i = 0; i < np; ++i) {
    const auto t = encode_deltas(proposal_boxes[i], gt_boxes[i]);
    hard_targets.insert(hard_targets.end(), t.begin(), t.end());
  }
  Tensor loss = reduce_mean(smooth_l1_rows(positive_deltas, hard_targets));

  if (beta2_eff == 0.0 || teacher_boxes.empty()) return loss;
  if (teacher_boxes.size() != np)
    throw std::runtime_error("reg_distill_loss: teacher box count mismatch");

  std::vector<int> gated;
  std::vector<double> distill_targets;
  for (size_t i = 0; i < np; ++i) {
    if (!reg_distill_gate(proposal_boxes[i], teacher_boxes[i], gt_boxes[i])) continue;
    gated.push_back(static_cast<int>(i));
    const auto t = encode_deltas(proposal_boxes[i], teacher_boxes[i]);
    distill_targets.insert(distill_targets.end(), t.begin(), t.end());
  }
  if (gated.empty()) return loss;

  Tensor gated_deltas = gather_rows(positive_deltas, gated);
  Tensor dist = scale(reduce_sum(smooth_l1_rows(gated_deltas, distill_targets)),
                      1.0 / static_cast<double>(np));
  return add(loss, scale(dist, beta2_eff));
}

Tensor total_loss(const Tensor& l_bk, const Tensor& l_cls, const Tensor& l_reg,
                  const Tensor& l_rpn, double lambda_eff) {
  Tensor sum = add(add(l_cls, l_reg), l_rpn);
  if (!l_bk.defined() || lambda_eff == 0.0) return sum;
  return add(scale(l_bk, lambda_eff), sum);
}

}  // namespace tadkd
