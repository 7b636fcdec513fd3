#pragma once

// Brute-force average precision, independent of the library implementation:
// the greedy matching is recomputed from scratch for every prefix of the
// score-sorted detection list, and the precision envelope is evaluated with a
// direct max scan instead of a suffix array.

#include <algorithm>
#include <map>
#include <vector>

#include "tadkd/train_eval.hpp"

namespace tadkd_test {

inline std::map<int, double> oracle_ap(
    const std::vector<std::vector<tadkd::Detection>>& dets,
    const std::vector<std::vector<tadkd::Box>>& gt_boxes,
    const std::vector<std::vector<int>>& gt_labels, double thr) {
  using tadkd::Box;
  std::map<int, double> out;
  std::vector<int> classes;
  for (const auto& labels : gt_labels)
    for (int c : labels)
      if (std::find(classes.begin(), classes.end(), c) == classes.end())
        classes.push_back(c);

  for (int cls : classes) {
    struct Ref {
      int image, order;
      double score;
      Box box;
    };
    std::vector<Ref> refs;
    int total_gt = 0;
    for (size_t img = 0; img < dets.size(); ++img) {
      for (size_t d = 0; d < dets[img].size(); ++d)
        if (dets[img][d].class_id == cls)
          refs.push_back({static_cast<int>(img), static_cast<int>(d),
                          dets[img][d].score, dets[img][d].box});
      for (int l : gt_labels[img]) total_gt += l == cls ? 1 : 0;
    }
    std::sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image != b.image) return a.image < b.image;
      return a.order < b.order;
    });

    const size_t n = refs.size();
    std::vector<double> prec(n), rec(n);
    for (size_t k = 1; k <= n; ++k) {
      std::vector<std::vector<char>> used(dets.size());
      for (size_t img = 0; img < dets.size(); ++img)
        used[img].assign(gt_labels[img].size(), 0);
      int tp = 0;
      for (size_t d = 0; d < k; ++d) {
        const Ref& r = refs[d];
        double best = 0;
        int best_g = -1;
        for (size_t g = 0; g < gt_labels[r.image].size(); ++g) {
          if (gt_labels[r.image][g] != cls || used[r.image][g]) continue;
          const double v = tadkd::iou(r.box, gt_boxes[r.image][g]);
          if (v >= thr && v > best) {
            best = v;
            best_g = static_cast<int>(g);
          }
        }
        if (best_g >= 0) {
          used[r.image][best_g] = 1;
          ++tp;
        }
      }
      prec[k - 1] = static_cast<double>(tp) / k;
      rec[k - 1] = total_gt > 0 ? static_cast<double>(tp) / total_gt : 0.0;
    }

    double ap = 0.0;
    double prev = 0.0;
    for (size_t k = 0; k < n; ++k) {
      if (rec[k] <= prev) continue;
      double pmax = 0.0;
      for (size_t j = k; j < n; ++j) pmax = std::max(pmax, prec[j]);
      ap += (rec[k] - prev) * pmax;
      prev = rec[k];
    }
    out[cls] = ap;
  }
  return out;
}

}  // namespace tadkd_test
