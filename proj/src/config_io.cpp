#include "tadkd/config_io.hpp"

using nlohmann::json;

namespace tadkd {

json scene_config_to_json(const SceneConfig& c) {
  return json{{"image_size", c.image_size},
              {"num_classes", c.num_classes},
              {"objects_min", c.objects_min},
              {"objects_max", c.objects_max},
              {"object_scale_min", c.object_scale_min},
              {"object_scale_max", c.object_scale_max},
              {"noise_std", c.noise_std},
              {"color_jitter", c.color_jitter}};
}

SceneConfig scene_config_from_json(const json& j) {
  SceneConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.objects_min = j.value("objects_min", c.objects_min);
  c.objects_max = j.value("objects_max", c.objects_max);
  c.object_scale_min = j.value("object_scale_min", c.object_scale_min);
  c.object_scale_max = j.value("object_scale_max", c.object_scale_max);
  c.noise_std = j.value("noise_std", c.noise_std);
  c.color_jitter = j.value("color_jitter", c.color_jitter);
  return c;
}

json detector_config_to_json(const DetectorConfig& c) {
  json anchors = json::array();
  for (const auto& a : c.anchors) anchors.push_back({a.scale, a.aspect});
  return json{{"backbone_channels", c.backbone_channels},
              {"backbone_out_channels", c.backbone_out_channels},
              {"stride", c.stride},
              {"anchors", anchors},
              {"proposal_count", c.proposal_count},
              {"positive_iou", c.positive_iou},
              {"roi_size", c.roi_size},
              {"num_classes", c.num_classes},
              {"rpn_hidden", c.rpn_hidden},
              {"head_hidden", c.head_hidden}};
}

DetectorConfig detector_config_from_json(const json& j) {
  DetectorConfig c;
  c.backbone_channels = j.value("backbone_channels", c.backbone_channels);
  c.backbone_out_channels = j.value("backbone_out_channels", c.backbone_out_channels);
  c.stride = j.value("stride", c.stride);
  if (j.contains("anchors")) {
    c.anchors.clear();
    for (const auto& a : j.at("anchors"))
      c.anchors.push_back({a.at(0).get<double>(), a.at(1).get<double>()});
  } else {
    c.anchors = default_anchor_specs();
  }
  c.proposal_count = j.value("proposal_count", c.proposal_count);
  c.positive_iou = j.value("positive_iou", c.positive_iou);
  c.roi_size = j.value("roi_size", c.roi_size);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.rpn_hidden = j.value("rpn_hidden", c.rpn_hidden);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  return c;
}

json distill_config_to_json(const DistillConfig& c) {
  return json{{"beta1", c.beta1},
              {"beta2", c.beta2},
              {"lambda", c.lambda},
              {"mask_mode", mask_mode_to_string(c.mask.mode)},
              {"sigma_x_sq", c.mask.sigma_x_sq},
              {"sigma_y_sq", c.mask.sigma_y_sq},
              {"decay_enabled", c.decay_enabled},
              {"enable_backbone", c.enable_backbone},
              {"enable_cls", c.enable_cls},
              {"enable_reg", c.enable_reg},
              {"temperature", c.temperature},
              {"bce_on", c.bce_on == BceOn::sigmoid ? "sigmoid" : "softmax"}};
}

DistillConfig distill_config_from_json(const json& j) {
  DistillConfig c;
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.lambda = j.value("lambda", c.lambda);
  c.mask.mode = mask_mode_from_string(j.value("mask_mode", std::string("gaussian")));
  c.mask.sigma_x_sq = j.value("sigma_x_sq", c.mask.sigma_x_sq);
  c.mask.sigma_y_sq = j.value("sigma_y_sq", c.mask.sigma_y_sq);
  c.decay_enabled = j.value("decay_enabled", c.decay_enabled);
  c.enable_backbone = j.value("enable_backbone", c.enable_backbone);
  c.enable_cls = j.value("enable_cls", c.enable_cls);
  c.enable_reg = j.value("enable_reg", c.enable_reg);
  c.temperature = j.value("temperature", c.temperature);
  const std::string bce = j.value("bce_on", std::string("sigmoid"));
  if (bce != "sigmoid" && bce != "softmax")
    throw std::runtime_error("distill config: bce_on must be sigmoid or softmax");
  c.bce_on = bce == "sigmoid" ? BceOn::sigmoid : BceOn::softmax_probs;
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  json j{{"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"momentum", c.momentum},
         {"weight_decay", c.weight_decay},
         {"seed", c.seed}};
  j["distill"] = c.distill ? distill_config_to_json(*c.distill) : json(nullptr);
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  if (j.contains("distill") && !j.at("distill").is_null())
    c.distill = distill_config_from_json(j.at("distill"));
  return c;
}

json eval_report_to_json(const EvalReport& r) {
  json per_class = json::object();
  for (const auto& [cls, ap] : r.ap_per_class) per_class[std::to_string(cls)] = ap;
  return json{{"ap_per_class", per_class},
              {"map50", r.map50},
              {"map5095", r.map5095},
              {"parameter_count", r.parameter_count},
              {"images_per_second", r.images_per_second}};
}

}  // namespace tadkd
