#pragma once

#include <json.hpp>

#include "tadkd/detector.hpp"
#include "tadkd/distill.hpp"
#include "tadkd/synth_data.hpp"
#include "tadkd/train_eval.hpp"

namespace tadkd {

nlohmann::json scene_config_to_json(const SceneConfig& c);
SceneConfig scene_config_from_json(const nlohmann::json& j);

nlohmann::json detector_config_to_json(const DetectorConfig& c);
DetectorConfig detector_config_from_json(const nlohmann::json& j);

nlohmann::json distill_config_to_json(const DistillConfig& c);
DistillConfig distill_config_from_json(const nlohmann::json& j);

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

nlohmann::json eval_report_to_json(const EvalReport& r);

}  // namespace tadkd
