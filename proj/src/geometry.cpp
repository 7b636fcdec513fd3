#include "tadkd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tadkd {

double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double iy = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

std::array<double, 4> encode_deltas(const Box& proposal, const Box& target) {
  return {(target.cx() - proposal.cx()) / proposal.w(),
          (target.cy() - proposal.cy()) / proposal.h(),
          std::log(target.w() / proposal.w()),
          std::log(target.h() / proposal.h())};
}

Box decode_deltas(const std::array<double, 4>& deltas, const Box& proposal) {
  const double tw = std::min(deltas[2], 4.0);
  const double th = std::min(deltas[3], 4.0);
  const double cx = proposal.cx() + deltas[0] * proposal.w();
  const double cy = proposal.cy() + deltas[1] * proposal.h();
  const double w = proposal.w() * std::exp(tw);
  const double h = proposal.h() * std::exp(th);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<int> nms(const std::vector<Box>& boxes,
                     const std::vector<double>& scores, double iou_threshold) {
  if (boxes.size() != scores.size())
    throw std::runtime_error("nms: boxes/scores length mismatch");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  std::vector<int> kept;
  std::vector<char> suppressed(boxes.size(), 0);
  for (int i : order) {
    if (suppressed[i]) continue;
    kept.push_back(i);
    for (int j : order)
      if (!suppressed[j] && j != i && iou(boxes[i], boxes[j]) > iou_threshold)
        suppressed[j] = 1;
  }
  return kept;
}

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double smooth_l1_sum(const std::array<double, 4>& residual) {
  double s = 0.0;
  for (double r : residual) s += smooth_l1(r);
  return s;
}

MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "gaussian") return MaskMode::gaussian;
  if (s == "rectangle") return MaskMode::rectangle;
  if (s == "all") return MaskMode::all;
  throw std::runtime_error("unknown mask mode: " + s);
}

std::string mask_mode_to_string(MaskMode m) {
  switch (m) {
    case MaskMode::gaussian: return "gaussian";
    case MaskMode::rectangle: return "rectangle";
    default: return "all";
  }
}

double ForegroundMask::sum() const {
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

double gaussian_mask_value(const Box& box, double x, double y, double sigma_x_sq,
                           double sigma_y_sq) {
  if (x < box.x0 || x > box.x1 || y < box.y0 || y > box.y1) return 0.0;
  const double dx = x - box.cx();
  const double dy = y - box.cy();
  const double hx = 0.5 * box.w();
  const double hy = 0.5 * box.h();
  return std::exp(-dx * dx / (sigma_x_sq * hx * hx) -
                  dy * dy / (sigma_y_sq * hy * hy));
}

ForegroundMask build_mask(const std::vector<Box>& gt_boxes, int w, int h,
                          const MaskConfig& config) {
  if (w < 1 || h < 1) throw std::runtime_error("build_mask: empty grid");
  if (config.mode == MaskMode::gaussian &&
      (config.sigma_x_sq <= 0.0 || config.sigma_y_sq <= 0.0))
    throw std::runtime_error("build_mask: sigma values must be positive");
  ForegroundMask mask;
  mask.w = w;
  mask.h = h;
  mask.values.assign(static_cast<size_t>(w) * h, 0.0);
  if (config.mode == MaskMode::all) {
    std::fill(mask.values.begin(), mask.values.end(), 1.0);
    return mask;
  }
  for (const Box& box : gt_boxes) {
    for (int y = 0; y < h; ++y) {
      const double cy = y + 0.5;
      if (cy < box.y0 || cy >= box.y1) continue;
      for (int x = 0; x < w; ++x) {
        const double cx = x + 0.5;
        if (cx < box.x0 || cx >= box.x1) continue;
        double v = 1.0;
        if (config.mode == MaskMode::gaussian)
          v = gaussian_mask_value(box, cx, cy, config.sigma_x_sq, config.sigma_y_sq);
        double& cell = mask.values[static_cast<size_t>(y) * w + x];
        cell = std::max(cell, v);
      }
    }
  }
  return mask;
}

}  // namespace tadkd
