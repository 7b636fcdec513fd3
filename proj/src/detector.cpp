#include "tadkd/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "tadkd/config_io.hpp"

using nlohmann::json;

namespace tadkd {

namespace {

constexpr char kCheckpointMagic[8] = {'T', 'A', 'D', 'K', 'D', '0', '0', '1'};
constexpr int kCheckpointVersion = 1;
constexpr double kRpnNmsIou = 0.7;
constexpr double kRpnPositiveIou = 0.7;
constexpr double kRpnNegativeIou = 0.3;
constexpr int kRpnSampleCount = 32;
constexpr double kMinBoxSize = 1e-3;

Tensor he_conv(int oc, int ic, int k, Rng& rng) {
  std::vector<double> w(static_cast<size_t>(oc) * ic * k * k);
  const double std = std::sqrt(2.0 / (ic * k * k));
  for (double& v : w) v = normal(rng, 0.0, std);
  return Tensor::from_data({oc, ic, k, k}, std::move(w), true);
}

Tensor he_linear(int in, int out, Rng& rng) {
  std::vector<double> w(static_cast<size_t>(in) * out);
  const double std = std::sqrt(2.0 / in);
  for (double& v : w) v = normal(rng, 0.0, std);
  return Tensor::from_data({in, out}, std::move(w), true);
}

Tensor small_conv(int oc, int ic, int k, Rng& rng) {
  std::vector<double> w(static_cast<size_t>(oc) * ic * k * k);
  for (double& v : w) v = normal(rng, 0.0, 0.01);
  return Tensor::from_data({oc, ic, k, k}, std::move(w), true);
}

Tensor small_linear(int in, int out, Rng& rng) {
  std::vector<double> w(static_cast<size_t>(in) * out);
  for (double& v : w) v = normal(rng, 0.0, 0.01);
  return Tensor::from_data({in, out}, std::move(w), true);
}

Tensor zero_bias(int n, double fill = 0.0) {
  return Tensor::from_data({n}, std::vector<double>(n, fill), true);
}

Box clip_box(Box b, double w, double h) {
  b.x0 = std::clamp(b.x0, 0.0, w - kMinBoxSize);
  b.y0 = std::clamp(b.y0, 0.0, h - kMinBoxSize);
  b.x1 = std::clamp(b.x1, b.x0 + kMinBoxSize, w);
  b.y1 = std::clamp(b.y1, b.y0 + kMinBoxSize, h);
  return b;
}

}  // namespace

std::vector<AnchorSpec> default_anchor_specs() {
  std::vector<AnchorSpec> specs;
  for (double scale : {12.0, 20.0, 28.0})
    for (double aspect : {1.0, 0.5, 2.0}) specs.push_back({scale, aspect});
  return specs;
}

DetectorConfig DetectorConfig::teacher_default(int num_classes) {
  DetectorConfig c;
  c.backbone_channels = {32, 64, 128};
  c.anchors = default_anchor_specs();
  c.num_classes = num_classes;
  return c;
}

DetectorConfig DetectorConfig::student_default(int num_classes) {
  DetectorConfig c;
  c.backbone_channels = {16, 32, 64};
  c.anchors = default_anchor_specs();
  c.num_classes = num_classes;
  return c;
}

void DetectorConfig::validate() const {
  if (backbone_channels.empty()) throw std::runtime_error("detector config: no backbone stages");
  int s = 1;
  for (size_t i = 0; i < backbone_channels.size(); ++i) s *= 2;
  if (s != stride)
    throw std::runtime_error("detector config: stride " + std::to_string(stride) +
                             " does not match " + std::to_string(backbone_channels.size()) +
                             " stride-2 stages");
  if (anchors.empty()) throw std::runtime_error("detector config: no anchors");
  if (proposal_count < 1) throw std::runtime_error("detector config: proposal_count < 1");
  if (positive_iou <= 0.0 || positive_iou >= 1.0)
    throw std::runtime_error("detector config: positive_iou must be in (0,1)");
  if (roi_size < 1 || num_classes < 1 || head_hidden < 1 || rpn_hidden < 1)
    throw std::runtime_error("detector config: bad sizes");
}

DetectorModel DetectorModel::init(const DetectorConfig& config, Rng& rng) {
  DetectorConfig cfg = config;
  if (cfg.anchors.empty()) cfg.anchors = default_anchor_specs();
  cfg.validate();
  DetectorModel m;
  m.config = cfg;
  int in = 3;
  for (int out : cfg.backbone_channels) {
    m.stage_w.push_back(he_conv(out, in, 3, rng));
    m.stage_b.push_back(zero_bias(out));
    in = out;
  }
  m.proj_w = he_conv(cfg.backbone_out_channels, in, 1, rng);
  m.proj_b = zero_bias(cfg.backbone_out_channels);

  const int a = cfg.anchor_count();
  m.rpn_w = he_conv(cfg.rpn_hidden, cfg.backbone_out_channels, 3, rng);
  m.rpn_b = zero_bias(cfg.rpn_hidden);
  m.rpn_obj_w = small_conv(a, cfg.rpn_hidden, 1, rng);
  m.rpn_obj_b = zero_bias(a, -2.0);  // background prior
  m.rpn_delta_w = small_conv(4 * a, cfg.rpn_hidden, 1, rng);
  m.rpn_delta_b = zero_bias(4 * a);

  const int d = cfg.roi_size * cfg.roi_size * cfg.backbone_out_channels;
  m.fc1_w = he_linear(d, cfg.head_hidden, rng);
  m.fc1_b = zero_bias(cfg.head_hidden);
  m.fc2_w = he_linear(cfg.head_hidden, cfg.head_hidden, rng);
  m.fc2_b = zero_bias(cfg.head_hidden);
  m.cls_w = small_linear(cfg.head_hidden, cfg.num_classes + 1, rng);
  m.cls_b = zero_bias(cfg.num_classes + 1);
  m.reg_w = small_linear(cfg.head_hidden, 4 * cfg.num_classes, rng);
  m.reg_b = zero_bias(4 * cfg.num_classes);
  return m;
}

std::vector<std::pair<std::string, Tensor>> DetectorModel::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (size_t i = 0; i < stage_w.size(); ++i) {
    out.emplace_back("backbone.stage" + std::to_string(i) + ".w", stage_w[i]);
    out.emplace_back("backbone.stage" + std::to_string(i) + ".b", stage_b[i]);
  }
  out.emplace_back("backbone.proj.w", proj_w);
  out.emplace_back("backbone.proj.b", proj_b);
  out.emplace_back("rpn.shared.w", rpn_w);
  out.emplace_back("rpn.shared.b", rpn_b);
  out.emplace_back("rpn.obj.w", rpn_obj_w);
  out.emplace_back("rpn.obj.b", rpn_obj_b);
  out.emplace_back("rpn.delta.w", rpn_delta_w);
  out.emplace_back("rpn.delta.b", rpn_delta_b);
  out.emplace_back("head.fc1.w", fc1_w);
  out.emplace_back("head.fc1.b", fc1_b);
  out.emplace_back("head.fc2.w", fc2_w);
  out.emplace_back("head.fc2.b", fc2_b);
  out.emplace_back("head.cls.w", cls_w);
  out.emplace_back("head.cls.b", cls_b);
  out.emplace_back("head.reg.w", reg_w);
  out.emplace_back("head.reg.b", reg_b);
  return out;
}

std::vector<Tensor> DetectorModel::params() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

int64_t DetectorModel::parameter_count() const {
  int64_t n = 0;
  for (const auto& t : params()) n += t.size();
  return n;
}

void DetectorModel::set_frozen(bool f) {
  frozen = f;
  for (auto& t : params()) {
    Tensor tt = t;
    tt.set_requires_grad(!f);
  }
}

Tensor backbone_forward(const DetectorModel& model, const Tensor& image) {
  if (image.shape().size() != 3 || image.dim(0) != 3)
    throw std::runtime_error("backbone_forward: expected {3,H,W} image");
  if (image.dim(1) % model.config.stride != 0 || image.dim(2) % model.config.stride != 0)
    throw std::runtime_error("backbone_forward: image " + std::to_string(image.dim(1)) + "x" +
                             std::to_string(image.dim(2)) + " not divisible by stride " +
                             std::to_string(model.config.stride));
  Tensor x = image;
  for (size_t i = 0; i < model.stage_w.size(); ++i)
    x = relu(conv2d(x, model.stage_w[i], model.stage_b[i], 2, 1));
  return conv2d(x, model.proj_w, model.proj_b, 1, 0);
}

RpnOut rpn_forward(const DetectorModel& model, const Tensor& features) {
  RpnOut out;
  out.shared = relu(conv2d(features, model.rpn_w, model.rpn_b, 1, 1));
  out.objectness = conv2d(out.shared, model.rpn_obj_w, model.rpn_obj_b, 1, 0);
  out.deltas = conv2d(out.shared, model.rpn_delta_w, model.rpn_delta_b, 1, 0);
  out.fh = features.dim(1);
  out.fw = features.dim(2);
  return out;
}

std::vector<Box> make_anchors(const DetectorConfig& config, int fh, int fw) {
  std::vector<Box> anchors;
  anchors.reserve(static_cast<size_t>(config.anchor_count()) * fh * fw);
  for (const AnchorSpec& spec : config.anchors) {
    const double w = spec.scale * std::sqrt(spec.aspect);
    const double h = spec.scale / std::sqrt(spec.aspect);
    for (int i = 0; i < fh; ++i) {
      for (int j = 0; j < fw; ++j) {
        const double cx = (j + 0.5) * config.stride;
        const double cy = (i + 0.5) * config.stride;
        anchors.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
      }
    }
  }
  return anchors;
}

ProposalBatch propose(const RpnOut& rpn, const std::vector<Box>& anchors,
                      const DetectorConfig& config, int image_w, int image_h,
                      bool train_mode, const std::vector<Box>& gt_boxes) {
  const int a = config.anchor_count();
  const int cells = rpn.fh * rpn.fw;
  if (static_cast<int>(anchors.size()) != a * cells)
    throw std::runtime_error("propose: anchor list does not match feature grid");

  const double* obj = rpn.objectness.data();
  const double* del = rpn.deltas.data();
  std::vector<Box> decoded(anchors.size());
  std::vector<double> scores(anchors.size());
  for (int k = 0; k < static_cast<int>(anchors.size()); ++k) {
    const int ai = k / cells;
    const int cell = k % cells;
    scores[k] = 1.0 / (1.0 + std::exp(-obj[k]));
    std::array<double, 4> d;
    for (int c = 0; c < 4; ++c) d[c] = del[static_cast<size_t>(4 * ai + c) * cells + cell];
    decoded[k] = clip_box(decode_deltas(d, anchors[k]), image_w, image_h);
  }

  const std::vector<int> kept = nms(decoded, scores, kRpnNmsIou);
  std::vector<char> is_kept(anchors.size(), 0);
  for (int k : kept) is_kept[k] = 1;
  std::vector<int> rest;
  rest.reserve(anchors.size() - kept.size());
  {
    std::vector<int> order(anchors.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int x, int y) {
      if (scores[x] != scores[y]) return scores[x] > scores[y];
      return x < y;
    });
    for (int k : order)
      if (!is_kept[k]) rest.push_back(k);
  }

  ProposalBatch batch;
  const int n = config.proposal_count;
  if (train_mode) {
    for (const Box& g : gt_boxes) {
      if (static_cast<int>(batch.boxes.size()) >= n) break;
      batch.boxes.push_back(clip_box(g, image_w, image_h));
      batch.objectness.push_back(1.0);
    }
  }
  size_t ki = 0, ri = 0;
  while (static_cast<int>(batch.boxes.size()) < n) {
    int src = -1;
    if (ki < kept.size()) {
      src = kept[ki++];
    } else if (ri < rest.size()) {
      src = rest[ri++];
    } else {
      ki = 0;  // degenerate tiny grids: recycle candidates to honor the fixed N
      src = kept[ki++];
    }
    batch.boxes.push_back(decoded[src]);
    batch.objectness.push_back(scores[src]);
  }
  return batch;
}

void assign_proposals(ProposalBatch& batch, const std::vector<Box>& gt_boxes,
                      const std::vector<int>& gt_labels, double positive_iou) {
  const size_t n = batch.boxes.size();
  batch.assignment.assign(n, 0);
  batch.matched_gt.assign(n, -1);
  batch.positive_indices.clear();
  if (gt_boxes.size() != gt_labels.size())
    throw std::runtime_error("assign_proposals: gt box/label mismatch");
  for (size_t i = 0; i < n; ++i) {
    double best = 0.0;
    int best_gt = -1;
    for (size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(batch.boxes[i], gt_boxes[g]);
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0 && best >= positive_iou) {
      batch.assignment[i] = gt_labels[best_gt];
      batch.matched_gt[i] = best_gt;
      batch.positive_indices.push_back(static_cast<int>(i));
    }
  }
}

RpnSample sample_rpn_targets(const std::vector<Box>& anchors,
                             const std::vector<Box>& gt_boxes, Rng& rng) {
  const int n = static_cast<int>(anchors.size());
  std::vector<double> max_iou(n, 0.0);
  std::vector<int> argmax_gt(n, -1);
  std::vector<int> gt_best_anchor(gt_boxes.size(), -1);
  std::vector<double> gt_best_iou(gt_boxes.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    for (size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(anchors[i], gt_boxes[g]);
      if (v > max_iou[i]) {
        max_iou[i] = v;
        argmax_gt[i] = static_cast<int>(g);
      }
      if (v > gt_best_iou[g]) {
        gt_best_iou[g] = v;
        gt_best_anchor[g] = i;
      }
    }
  }
  std::vector<char> is_pos(n, 0);
  for (int i = 0; i < n; ++i)
    if (max_iou[i] >= kRpnPositiveIou) is_pos[i] = 1;
  for (size_t g = 0; g < gt_boxes.size(); ++g)
    if (gt_best_anchor[g] >= 0 && gt_best_iou[g] > 0.0) {
      is_pos[gt_best_anchor[g]] = 1;
      if (argmax_gt[gt_best_anchor[g]] < 0) argmax_gt[gt_best_anchor[g]] = static_cast<int>(g);
    }
  std::vector<int> pos, neg;
  for (int i = 0; i < n; ++i) {
    if (is_pos[i])
      pos.push_back(i);
    else if (max_iou[i] <= kRpnNegativeIou)
      neg.push_back(i);
  }
  auto shuffle = [&rng](std::vector<int>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i)
      std::swap(v[i], v[uniform_int(rng, 0, i)]);
  };
  shuffle(pos);
  shuffle(neg);
  const int pos_take = std::min<int>(kRpnSampleCount / 2, static_cast<int>(pos.size()));
  const int neg_take = std::min<int>(kRpnSampleCount - pos_take, static_cast<int>(neg.size()));

  RpnSample sample;
  for (int i = 0; i < pos_take; ++i) {
    sample.anchor_indices.push_back(pos[i]);
    sample.labels.push_back(1.0);
    sample.positive_anchor_indices.push_back(pos[i]);
    sample.targets.push_back(encode_deltas(anchors[pos[i]], gt_boxes[argmax_gt[pos[i]]]));
  }
  for (int i = 0; i < neg_take; ++i) {
    sample.anchor_indices.push_back(neg[i]);
    sample.labels.push_back(0.0);
  }
  return sample;
}

Tensor rpn_loss(const RpnOut& rpn, const RpnSample& sample) {
  if (sample.anchor_indices.empty())
    throw std::runtime_error("rpn_loss: empty anchor sample");
  const int cells = rpn.fh * rpn.fw;
  Tensor obj_flat = reshape(rpn.objectness, {rpn.objectness.size()});
  Tensor picked = gather_elements(obj_flat, sample.anchor_indices);
  Tensor logits = reshape(picked, {static_cast<int>(sample.anchor_indices.size()), 1});
  Tensor cls = reduce_mean(bce_with_logits(logits, sample.labels));
  if (sample.positive_anchor_indices.empty()) return cls;

  std::vector<int> delta_idx;
  delta_idx.reserve(sample.positive_anchor_indices.size() * 4);
  for (int k : sample.positive_anchor_indices) {
    const int ai = k / cells;
    const int cell = k % cells;
    for (int c = 0; c < 4; ++c) delta_idx.push_back((4 * ai + c) * cells + cell);
  }
  Tensor deltas_flat = reshape(rpn.deltas, {rpn.deltas.size()});
  Tensor pred = reshape(gather_elements(deltas_flat, delta_idx),
                        {static_cast<int>(sample.positive_anchor_indices.size()), 4});
  std::vector<double> targets;
  targets.reserve(sample.targets.size() * 4);
  for (const auto& t : sample.targets) targets.insert(targets.end(), t.begin(), t.end());
  Tensor reg = reduce_mean(smooth_l1_rows(pred, targets));
  return add(cls, reg);
}

Tensor roi_pool(const Tensor& features, const Box& box, int stride, int roi_size) {
  if (features.shape().size() != 3) throw std::runtime_error("roi_pool: expected {C,H,W}");
  const int c = features.dim(0), fh = features.dim(1), fw = features.dim(2);

  int x0 = static_cast<int>(std::floor(box.x0 / stride));
  int x1 = static_cast<int>(std::ceil(box.x1 / stride));
  int y0 = static_cast<int>(std::floor(box.y0 / stride));
  int y1 = static_cast<int>(std::ceil(box.y1 / stride));
  x0 = std::clamp(x0, 0, fw - 1);
  y0 = std::clamp(y0, 0, fh - 1);
  x1 = std::clamp(x1, x0 + 1, fw);
  y1 = std::clamp(y1, y0 + 1, fh);
  const int wc = x1 - x0, hc = y1 - y0;

  auto bin_range = [roi_size](int lo, int extent, int bin, int* s, int* e) {
    *s = lo + (bin * extent) / roi_size;
    *e = lo + ((bin + 1) * extent) / roi_size;
    if (*e <= *s) *e = *s + 1;
  };

  std::vector<double> out(static_cast<size_t>(c) * roi_size * roi_size);
  const double* fd = features.data();
  for (int by = 0; by < roi_size; ++by) {
    int ys, ye;
    bin_range(y0, hc, by, &ys, &ye);
    for (int bx = 0; bx < roi_size; ++bx) {
      int xs, xe;
      bin_range(x0, wc, bx, &xs, &xe);
      const double inv = 1.0 / ((ye - ys) * (xe - xs));
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int y = ys; y < ye; ++y)
          for (int x = xs; x < xe; ++x) acc += fd[(static_cast<size_t>(ch) * fh + y) * fw + x];
        out[(static_cast<size_t>(ch) * roi_size + by) * roi_size + bx] = acc * inv;
      }
    }
  }

  Tensor fin = features;
  return make_op("roi_pool", {c, roi_size, roi_size}, std::move(out), {features},
                 [fin, x0, x1, y0, y1, wc, hc, c, fh, fw, roi_size, bin_range](const double* g) mutable {
                   if (!fin.requires_grad()) return;
                   double* gf = fin.grad();
                   for (int by = 0; by < roi_size; ++by) {
                     int ys, ye;
                     bin_range(y0, hc, by, &ys, &ye);
                     for (int bx = 0; bx < roi_size; ++bx) {
                       int xs, xe;
                       bin_range(x0, wc, bx, &xs, &xe);
                       const double inv = 1.0 / ((ye - ys) * (xe - xs));
                       for (int ch = 0; ch < c; ++ch) {
                         const double gv =
                             g[(static_cast<size_t>(ch) * roi_size + by) * roi_size + bx] * inv;
                         for (int y = ys; y < ye; ++y)
                           for (int x = xs; x < xe; ++x)
                             gf[(static_cast<size_t>(ch) * fh + y) * fw + x] += gv;
                       }
                     }
                   }
                 });
}

Tensor pool_rois(const Tensor& features, const std::vector<Box>& boxes, int stride,
                 int roi_size) {
  const int d = features.dim(0) * roi_size * roi_size;
  std::vector<Tensor> rows;
  rows.reserve(boxes.size());
  for (const Box& b : boxes) rows.push_back(reshape(roi_pool(features, b, stride, roi_size), {1, d}));
  return concat(rows);
}

HeadOut heads_forward(const DetectorModel& model, const Tensor& roi_rows) {
  const int d = model.config.roi_size * model.config.roi_size *
                model.config.backbone_out_channels;
  if (roi_rows.shape().size() != 2 || roi_rows.dim(1) != d)
    throw std::runtime_error("heads_forward: expected {N," + std::to_string(d) + "} pooled rows");
  Tensor h1 = relu(linear(roi_rows, model.fc1_w, model.fc1_b));
  Tensor h2 = relu(linear(h1, model.fc2_w, model.fc2_b));
  HeadOut out;
  out.class_logits = linear(h2, model.cls_w, model.cls_b);
  out.deltas = linear(h2, model.reg_w, model.reg_b);
  return out;
}

// ---- checkpoint io ------------------------------------------------------------

void save_checkpoint(const DetectorModel& model, const std::string& path) {
  const auto named = model.named_params();
  json manifest = json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : named) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += static_cast<uint64_t>(t.size()) * sizeof(double);
  }
  const json header{{"version", kCheckpointVersion},
                    {"config", detector_config_to_json(model.config)},
                    {"manifest", manifest}};
  const std::string hdr = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write(kCheckpointMagic, 8);
  const uint32_t hlen = static_cast<uint32_t>(hdr.size());
  unsigned char lb[4] = {static_cast<unsigned char>(hlen), static_cast<unsigned char>(hlen >> 8),
                         static_cast<unsigned char>(hlen >> 16),
                         static_cast<unsigned char>(hlen >> 24)};
  f.write(reinterpret_cast<const char*>(lb), 4);
  f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  for (const auto& [name, t] : named)
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

DetectorModel load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: missing file " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  unsigned char lb[4];
  f.read(reinterpret_cast<char*>(lb), 4);
  const uint32_t hlen = static_cast<uint32_t>(lb[0]) | (static_cast<uint32_t>(lb[1]) << 8) |
                        (static_cast<uint32_t>(lb[2]) << 16) | (static_cast<uint32_t>(lb[3]) << 24);
  if (!f || hlen == 0 || hlen > (1u << 24))
    throw std::runtime_error("load_checkpoint: bad header length");
  std::string hdr(hlen, '\0');
  f.read(hdr.data(), hlen);
  if (!f) throw std::runtime_error("load_checkpoint: truncated header");
  json header;
  try {
    header = json::parse(hdr);
  } catch (const json::exception& e) {
    throw std::runtime_error("load_checkpoint: corrupt header: " + std::string(e.what()));
  }
  if (header.at("version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: version mismatch");

  Rng rng(0);
  DetectorModel model = DetectorModel::init(detector_config_from_json(header.at("config")), rng);
  std::vector<std::pair<std::string, Tensor>> named = model.named_params();

  const auto payload_start = f.tellg();
  f.seekg(0, std::ios::end);
  const uint64_t payload_size = static_cast<uint64_t>(f.tellg() - payload_start);

  uint64_t expected = 0;
  for (const auto& entry : header.at("manifest")) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int>>();
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    auto it = std::find_if(named.begin(), named.end(),
                           [&](const auto& p) { return p.first == name; });
    if (it == named.end())
      throw std::runtime_error("load_checkpoint: unknown tensor " + name);
    Tensor t = it->second;
    if (shape != t.shape())
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
    if (offset != expected)
      throw std::runtime_error("load_checkpoint: manifest offsets not contiguous at " + name);
    const uint64_t bytes = static_cast<uint64_t>(t.size()) * sizeof(double);
    if (offset + bytes > payload_size)
      throw std::runtime_error("load_checkpoint: truncated payload at " + name);
    f.seekg(payload_start + static_cast<std::streamoff>(offset));
    f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(bytes));
    if (!f) throw std::runtime_error("load_checkpoint: read failed for " + name);
    expected = offset + bytes;
    named.erase(it);
  }
  if (!named.empty())
    throw std::runtime_error("load_checkpoint: manifest missing tensor " + named.front().first);
  if (expected != payload_size)
    throw std::runtime_error("load_checkpoint: payload size mismatch");
  model.set_frozen(true);
  return model;
}

}  // namespace tadkd
