#include "tadkd/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "tadkd/config_io.hpp"
#include "tadkd/detector.hpp"
#include "tadkd/distill.hpp"
#include "tadkd/synth_data.hpp"
#include "tadkd/train_eval.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tadkd {

namespace {

struct CliError : std::runtime_error {
  std::string category;
  CliError(std::string cat, const std::string& detail)
      : std::runtime_error(detail), category(std::move(cat)) {}
};

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

uint64_t resolve_seed(std::optional<uint64_t> flag, const json& config) {
  if (flag) return *flag;
  if (config.contains("seed")) return config.at("seed").get<uint64_t>();
  if (const char* env = std::getenv("TADKD_SEED")) return std::strtoull(env, nullptr, 10);
  return 1;
}

json load_json_file(const std::string& path, const char* what) {
  std::ifstream f(path);
  if (!f) throw CliError("missing-file", std::string(what) + " not found: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw CliError("bad-config", std::string(what) + " is not valid JSON: " + e.what());
  }
  return j;
}

std::vector<Scene> load_split(const std::string& data_dir, const std::string& split) {
  const fs::path dir = fs::path(data_dir) / split;
  if (!fs::exists(dir / "index.json"))
    throw CliError("missing-file", "dataset split not found: " + dir.string());
  return read_dataset(dir.string()).scenes;
}

void prepare_out_dir(const std::string& out, bool force) {
  const fs::path dir(out);
  if (fs::exists(dir / "record.csv") || fs::exists(dir / "eval.json") ||
      fs::exists(dir / "summary.csv")) {
    if (!force)
      throw CliError("run-exists",
                     "output directory " + out + " holds a completed run (use --force)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

void write_record_csv(const RunRecord& record, const std::string& path) {
  std::ofstream f(path);
  f << "epoch,gamma,L_total,L_bk,L_cls,L_reg,L_rpn,val_map50\n";
  for (const EpochStats& e : record.epochs) {
    f << e.epoch << ',' << (e.gamma ? fmt_double(*e.gamma) : "") << ','
      << fmt_double(e.l_total) << ',' << fmt_double(e.l_bk) << ',' << fmt_double(e.l_cls)
      << ',' << fmt_double(e.l_reg) << ',' << fmt_double(e.l_rpn) << ','
      << fmt_double(e.val_map50) << '\n';
  }
  if (!f) throw CliError("runtime", "cannot write " + path);
}

void print_epoch(const EpochStats& e, int total) {
  std::printf("epoch %d/%d", e.epoch, total);
  if (e.gamma) std::printf(" gamma=%.4f", *e.gamma);
  std::printf(" loss=%.4f bk=%.4f cls=%.4f reg=%.4f rpn=%.4f val_mAP50=%.4f\n", e.l_total,
              e.l_bk, e.l_cls, e.l_reg, e.l_rpn, e.val_map50);
  std::fflush(stdout);
}

// ---- gen-data -------------------------------------------------------------------

int cmd_gen_data(const std::string& out, int train_n, int val_n, int test_n,
                 uint64_t seed, const SceneConfig& scfg) {
  scfg.validate();
  fs::create_directories(out);
  struct Split {
    const char* name;
    int count;
    uint64_t tag;
  };
  const Split splits[] = {{"train", train_n, 0}, {"val", val_n, 1}, {"test", test_n, 2}};
  for (const Split& sp : splits) {
    std::vector<Scene> scenes;
    scenes.reserve(sp.count);
    for (int i = 0; i < sp.count; ++i)
      scenes.push_back(generate_scene(mix_seed(seed, sp.tag * 1000000 + i), scfg));
    write_dataset(scenes, scfg, (fs::path(out) / sp.name).string());
    std::printf("wrote %d scenes to %s/%s\n", sp.count, out.c_str(), sp.name);
  }
  json config{{"command", "gen-data"},
              {"out", out},
              {"seed", seed},
              {"train", train_n},
              {"val", val_n},
              {"test", test_n},
              {"scene", scene_config_to_json(scfg)}};
  std::ofstream f(fs::path(out) / "config.json");
  f << config.dump(2) << "\n";
  return 0;
}

// ---- train / distill -------------------------------------------------------------

int run_training(const json& resolved) {
  const std::string out = resolved.at("out").get<std::string>();
  const std::string data = resolved.at("data").get<std::string>();
  const bool force = resolved.value("force", false);
  prepare_out_dir(out, force);

  const std::vector<Scene> train_scenes = load_split(data, "train");
  const std::vector<Scene> val_scenes = load_split(data, "val");
  const std::vector<Scene> test_scenes = load_split(data, "test");

  DetectorConfig student = detector_config_from_json(resolved.at("detector"));
  TrainConfig tc = train_config_from_json(resolved.at("train"));

  std::optional<DetectorModel> teacher;
  if (resolved.contains("teacher") && !resolved.at("teacher").is_null()) {
    const std::string tpath = resolved.at("teacher").get<std::string>();
    if (!fs::exists(tpath)) throw CliError("missing-file", "teacher checkpoint not found: " + tpath);
    teacher = load_checkpoint(tpath);
  }

  {
    json to_write = resolved;
    to_write.erase("force");
    std::ofstream f(fs::path(out) / "config.json");
    f << to_write.dump(2) << "\n";
  }

  TrainResult result =
      train_detector(train_scenes, val_scenes, student, tc,
                     teacher ? &*teacher : nullptr,
                     [&](const EpochStats& e) { print_epoch(e, tc.epochs); });

  write_record_csv(result.record, (fs::path(out) / "record.csv").string());
  save_checkpoint(result.model, (fs::path(out) / "model.ckpt").string());
  const EvalReport report = evaluate(result.model, test_scenes);
  {
    std::ofstream f(fs::path(out) / "eval.json");
    f << eval_report_to_json(report).dump(2) << "\n";
  }
  std::printf("test mAP@0.5=%.4f mAP@[.5:.95]=%.4f params=%lld speed=%.1f img/s\n",
              report.map50, report.map5095,
              static_cast<long long>(report.parameter_count), report.images_per_second);
  return 0;
}

json resolve_training_config(const std::string& command, const std::string& config_path,
                             const std::string& data, const std::string& out,
                             const std::string& teacher, std::optional<uint64_t> seed,
                             std::optional<int> epochs, const std::string& model_kind,
                             bool force) {
  json resolved;
  if (!config_path.empty()) resolved = load_json_file(config_path, "config file");
  if (!resolved.contains("command")) resolved["command"] = command;
  if (!data.empty()) resolved["data"] = data;
  if (!out.empty()) resolved["out"] = out;
  if (!teacher.empty()) resolved["teacher"] = teacher;
  if (!resolved.contains("teacher")) resolved["teacher"] = nullptr;
  if (!resolved.contains("data")) throw CliError("bad-config", "--data is required");
  if (!resolved.contains("out")) throw CliError("bad-config", "--out is required");

  const uint64_t s = resolve_seed(seed, resolved);
  resolved["seed"] = s;

  if (model_kind != "student" && model_kind != "teacher")
    throw CliError("bad-config", "--model must be student or teacher");
  DetectorConfig det = resolved.contains("detector")
                           ? detector_config_from_json(resolved.at("detector"))
                           : (model_kind == "teacher" ? DetectorConfig::teacher_default()
                                                      : DetectorConfig::student_default());
  TrainConfig tc = resolved.contains("train") ? train_config_from_json(resolved.at("train"))
                                              : TrainConfig{};
  tc.seed = s;
  if (epochs) tc.epochs = *epochs;
  const bool has_teacher = !resolved.at("teacher").is_null();
  if (resolved.at("command") == "distill" && !has_teacher)
    throw CliError("bad-config", "distill requires --teacher");
  if (has_teacher && !tc.distill) tc.distill = DistillConfig{};
  if (!has_teacher) tc.distill.reset();

  resolved["detector"] = detector_config_to_json(det);
  resolved["train"] = train_config_to_json(tc);
  resolved["force"] = force;
  return resolved;
}

// ---- eval -------------------------------------------------------------------------

int cmd_eval(const std::string& model_path, const std::string& data,
             const std::string& split, bool voc11) {
  if (!fs::exists(model_path))
    throw CliError("missing-file", "model checkpoint not found: " + model_path);
  const DetectorModel model = load_checkpoint(model_path);
  const std::vector<Scene> scenes = load_split(data, split);
  const EvalReport report = evaluate(model, scenes, voc11);
  std::printf("%s\n", eval_report_to_json(report).dump(2).c_str());
  return 0;
}

// ---- ablate ------------------------------------------------------------------------

int cmd_ablate(const std::string& data, const std::string& teacher_path,
               const std::string& grid_name, const std::string& out,
               std::optional<uint64_t> seed, std::optional<int> epochs, int jobs,
               bool force) {
  if (!fs::exists(teacher_path))
    throw CliError("missing-file", "teacher checkpoint not found: " + teacher_path);
  if (grid_name != "table1" && grid_name != "table2")
    throw CliError("bad-config", "unknown grid '" + grid_name + "' (use table1 or table2)");
  prepare_out_dir(out, force);

  const std::vector<Scene> train_scenes = load_split(data, "train");
  const std::vector<Scene> val_scenes = load_split(data, "val");
  const std::vector<Scene> test_scenes = load_split(data, "test");
  const DetectorModel teacher = load_checkpoint(teacher_path);

  TrainConfig tc;
  tc.seed = resolve_seed(seed, json::object());
  if (epochs) tc.epochs = *epochs;
  const DistillConfig base;
  const std::vector<AblationRow> grid =
      grid_name == "table1" ? table1_grid(base) : table2_grid(base);
  DetectorConfig student = DetectorConfig::student_default();

  json config{{"command", "ablate"}, {"data", data},          {"teacher", teacher_path},
              {"grid", grid_name},   {"out", out},            {"seed", tc.seed},
              {"jobs", jobs},        {"train", train_config_to_json(tc)},
              {"detector", detector_config_to_json(student)}};
  {
    std::ofstream f(fs::path(out) / "config.json");
    f << config.dump(2) << "\n";
  }

  const std::vector<AblationResult> results =
      run_ablation(train_scenes, val_scenes, test_scenes, student, tc, teacher, grid, jobs);

  std::ofstream csv(fs::path(out) / "summary.csv");
  csv << "name,map50\n";
  std::printf("%-14s %s\n", "row", "mAP@0.5");
  for (const AblationResult& r : results) {
    csv << r.name << ',' << fmt_double(r.map50) << '\n';
    std::printf("%-14s %.4f\n", r.name.c_str(), r.map50);
  }
  return 0;
}

// ---- progressive ---------------------------------------------------------------------

int cmd_progressive(const std::string& data, const std::string& out, int stages,
                    std::optional<uint64_t> seed, std::optional<int> epochs, bool force) {
  if (stages < 2 || stages > 3)
    throw CliError("bad-config", "--stages must be 2 or 3");
  prepare_out_dir(out, force);
  const std::vector<Scene> train_scenes = load_split(data, "train");
  const std::vector<Scene> val_scenes = load_split(data, "val");
  const std::vector<Scene> test_scenes = load_split(data, "test");

  std::vector<DetectorConfig> capacities;
  capacities.push_back(DetectorConfig::teacher_default());
  if (stages == 3) {
    DetectorConfig mid = DetectorConfig::teacher_default();
    mid.backbone_channels = {24, 48, 96};
    capacities.push_back(mid);
  }
  capacities.push_back(DetectorConfig::student_default());

  TrainConfig tc;
  tc.seed = resolve_seed(seed, json::object());
  if (epochs) tc.epochs = *epochs;
  tc.distill = DistillConfig{};

  json config{{"command", "progressive"},
              {"data", data},
              {"out", out},
              {"stages", stages},
              {"seed", tc.seed},
              {"train", train_config_to_json(tc)}};
  {
    std::ofstream f(fs::path(out) / "config.json");
    f << config.dump(2) << "\n";
  }

  const std::vector<StageResult> results =
      progressive_distill(train_scenes, val_scenes, test_scenes, capacities, tc);
  for (size_t k = 0; k < results.size(); ++k) {
    const fs::path dir = fs::path(out) / ("stage" + std::to_string(k));
    fs::create_directories(dir);
    write_record_csv(results[k].record, (dir / "record.csv").string());
    save_checkpoint(results[k].model, (dir / "model.ckpt").string());
    std::ofstream f(dir / "eval.json");
    f << eval_report_to_json(results[k].eval).dump(2) << "\n";
    std::printf("stage %zu: params=%lld test mAP@0.5=%.4f\n", k,
                static_cast<long long>(results[k].eval.parameter_count),
                results[k].eval.map50);
  }
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Task-adaptive detector distillation laboratory"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic detection dataset");
  std::string gen_out;
  int gen_train = 2000, gen_val = 200, gen_test = 500;
  std::optional<uint64_t> gen_seed;
  SceneConfig scene_cfg;
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  gen->add_option("--train", gen_train, "Training scenes");
  gen->add_option("--val", gen_val, "Validation scenes");
  gen->add_option("--test", gen_test, "Test scenes");
  gen->add_option("--seed", gen_seed, "Generation seed");
  gen->add_option("--image-size", scene_cfg.image_size, "Square image size");
  gen->add_option("--noise-std", scene_cfg.noise_std, "Background noise stddev");

  // train / distill
  std::string tr_data, tr_out, tr_config, tr_teacher;
  std::string tr_model = "student";
  std::optional<uint64_t> tr_seed;
  std::optional<int> tr_epochs;
  bool tr_force = false;
  auto add_training_flags = [&](CLI::App* cmd) {
    cmd->add_option("--data", tr_data, "Dataset directory (train/ val/ test/)");
    cmd->add_option("--out", tr_out, "Run output directory");
    cmd->add_option("--config", tr_config, "Resolved config JSON to rerun");
    cmd->add_option("--seed", tr_seed, "Training seed");
    cmd->add_option("--epochs", tr_epochs, "Training epochs");
    cmd->add_option("--model", tr_model, "Capacity preset: student or teacher");
    cmd->add_flag("--force", tr_force, "Overwrite a completed run");
  };
  auto* train_cmd = app.add_subcommand("train", "Train a detector without a teacher");
  add_training_flags(train_cmd);
  auto* distill_cmd = app.add_subcommand("distill", "Train a student under a frozen teacher");
  add_training_flags(distill_cmd);
  distill_cmd->add_option("--teacher", tr_teacher, "Teacher checkpoint");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  std::string ev_model, ev_data, ev_split = "test";
  bool ev_voc11 = false;
  eval_cmd->add_option("--model", ev_model, "Model checkpoint")->required();
  eval_cmd->add_option("--data", ev_data, "Dataset directory")->required();
  eval_cmd->add_option("--split", ev_split, "Split name (train/val/test)");
  eval_cmd->add_flag("--voc11", ev_voc11, "Use VOC 11-point AP");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "Run a distillation ablation grid");
  std::string ab_data, ab_teacher, ab_grid = "table1", ab_out;
  std::optional<uint64_t> ab_seed;
  std::optional<int> ab_epochs;
  int ab_jobs = 1;
  bool ab_force = false;
  ablate_cmd->add_option("--data", ab_data, "Dataset directory")->required();
  ablate_cmd->add_option("--teacher", ab_teacher, "Teacher checkpoint")->required();
  ablate_cmd->add_option("--grid", ab_grid, "Grid name: table1 or table2");
  ablate_cmd->add_option("--out", ab_out, "Output directory")->required();
  ablate_cmd->add_option("--seed", ab_seed, "Training seed");
  ablate_cmd->add_option("--epochs", ab_epochs, "Training epochs per row");
  ablate_cmd->add_option("--jobs", ab_jobs, "Parallel grid rows");
  ablate_cmd->add_flag("--force", ab_force, "Overwrite a completed run");

  // progressive
  auto* prog_cmd = app.add_subcommand("progressive", "Chained teacher-student distillation");
  std::string pg_data, pg_out;
  int pg_stages = 3;
  std::optional<uint64_t> pg_seed;
  std::optional<int> pg_epochs;
  bool pg_force = false;
  prog_cmd->add_option("--data", pg_data, "Dataset directory")->required();
  prog_cmd->add_option("--out", pg_out, "Output directory")->required();
  prog_cmd->add_option("--stages", pg_stages, "Chain length (2 or 3)");
  prog_cmd->add_option("--seed", pg_seed, "Training seed");
  prog_cmd->add_option("--epochs", pg_epochs, "Training epochs per stage");
  prog_cmd->add_flag("--force", pg_force, "Overwrite a completed run");

  try {
    if (argc > 1 && argv[1][0] != '-') {
      const std::string first = argv[1];
      bool known = false;
      for (const CLI::App* sub : app.get_subcommands({}))
        if (sub->get_name() == first) known = true;
      if (!known) throw CliError("unknown-command", "no such command: " + first);
    }
    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) return app.exit(e);  // --help
      throw CliError("bad-config", e.what());
    }

    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_train, gen_val, gen_test,
                          resolve_seed(gen_seed, json::object()), scene_cfg);
    if (train_cmd->parsed() || distill_cmd->parsed()) {
      const std::string command = distill_cmd->parsed() ? "distill" : "train";
      const json resolved = resolve_training_config(command, tr_config, tr_data, tr_out,
                                                    tr_teacher, tr_seed, tr_epochs,
                                                    tr_model, tr_force);
      return run_training(resolved);
    }
    if (eval_cmd->parsed()) return cmd_eval(ev_model, ev_data, ev_split, ev_voc11);
    if (ablate_cmd->parsed())
      return cmd_ablate(ab_data, ab_teacher, ab_grid, ab_out, ab_seed, ab_epochs, ab_jobs,
                        ab_force);
    if (prog_cmd->parsed())
      return cmd_progressive(pg_data, pg_out, pg_stages, pg_seed, pg_epochs, pg_force);
    throw CliError("unknown-command", "no command given");
  } catch (const CliError& e) {
    std::fprintf(stderr, "error: %s: %s\n", e.category.c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: runtime: %s\n", e.what());
    return 1;
  }
}

}  // namespace tadkd
