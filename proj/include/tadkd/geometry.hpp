#pragma once

#include <array>
#include <string>
#include <vector>

namespace tadkd {

/// Axis-aligned rectangle in continuous pixel coordinates, x1 > x0, y1 > y0.
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double w() const { return x1 - x0; }
  double h() const { return y1 - y0; }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }
  double area() const { return w() * h(); }
  bool valid() const { return x1 > x0 && y1 > y0; }
};

double iou(const Box& a, const Box& b);

// Standard box parameterization relative to a proposal:
// tx = (cx_t - cx_p) / w_p, ty = (cy_t - cy_p) / h_p,
// tw = log(w_t / w_p),      th = log(h_t / h_p).
std::array<double, 4> encode_deltas(const Box& proposal, const Box& target);
// Inverse of encode_deltas; tw and th are clamped to <= 4 before exp.
Box decode_deltas(const std::array<double, 4>& deltas, const Box& proposal);

// Greedy descending-score suppression. Kept indices come back in descending
// score order; ties break toward the lower input index.
std::vector<int> nms(const std::vector<Box>& boxes,
                     const std::vector<double>& scores, double iou_threshold);

// 0.5*x^2 for |x| < 1, |x| - 0.5 otherwise.
double smooth_l1(double x);
double smooth_l1_sum(const std::array<double, 4>& residual);

enum class MaskMode { gaussian, rectangle, all };

struct MaskConfig {
  MaskMode mode = MaskMode::gaussian;
  double sigma_x_sq = 2.0;
  double sigma_y_sq = 2.0;
};

MaskMode mask_mode_from_string(const std::string& s);
std::string mask_mode_to_string(MaskMode m);

/// Per-cell foreground weights on the feature-map grid, each in [0,1].
struct ForegroundMask {
  int w = 0, h = 0;
  std::vector<double> values;  // row-major, values[y*w + x]

  double at(int x, int y) const { return values[static_cast<size_t>(y) * w + x]; }
  double sum() const;
};

// The raw per-box mask value at a point: exp(-(x-cx)^2/(sx2*(w/2)^2)
// - (y-cy)^2/(sy2*(h/2)^2)) when (x,y) lies in the closed box, 0 outside.
double gaussian_mask_value(const Box& box, double x, double y, double sigma_x_sq,
                           double sigma_y_sq);

// Builds the foreground mask on a WxH grid sampled at cell centers
// (x+0.5, y+0.5). Boxes must already be in feature-map coordinates.
// Overlapping boxes combine by per-cell maximum. Cell membership uses the
// half-open box [x0,x1) x [y0,y1).
ForegroundMask build_mask(const std::vector<Box>& gt_boxes, int w, int h,
                          const MaskConfig& config);

}  // namespace tadkd
