#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ptpa/config.hpp"
#include "ptpa/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ptpa;

namespace {

std::vector<data::PointCloud> load_scene_dir(const std::string& dir) {
  if (dir.empty()) throw ConfigError("no scene directory configured");
  if (!fs::is_directory(dir)) throw ConfigError("scene directory \"" + dir + "\" does not exist");
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".ptbin") files.push_back(entry.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no .ptbin scenes in \"" + dir + "\"");
  std::vector<data::PointCloud> scenes;
  scenes.reserve(files.size());
  for (const auto& f : files) scenes.push_back(data::read_ptbin(f));
  return scenes;
}

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

void require_backbone_loaded(const Model& model, const LoadReport& report) {
  std::string missing;
  for (const auto& name : report.missing_from_file) {
    if (model.is_backbone_param(name)) missing += "\n  " + name;
  }
  if (!missing.empty()) {
    throw ConfigError("checkpoint is missing backbone parameters:" + missing);
  }
}

json metrics_report(const data::Metrics& m, const data::ConfusionMatrix& cm) {
  json per_class = json::array();
  for (Index c = 0; c < m.per_class_iou.size(); ++c) {
    if (std::isnan(m.per_class_iou[c])) {
      per_class.push_back(nullptr);
    } else {
      per_class.push_back(m.per_class_iou[c]);
    }
  }
  json confusion = json::array();
  for (int r = 0; r < cm.num_classes(); ++r) {
    json row = json::array();
    for (int c = 0; c < cm.num_classes(); ++c) row.push_back(cm.counts(r, c));
    confusion.push_back(row);
  }
  return json{{"miou", m.miou},
              {"macc", m.macc},
              {"allacc", m.allacc},
              {"per_class_iou", per_class},
              {"confusion", confusion}};
}

int run_gen(const std::string& spec_path, const std::string& preset, const std::string& out_dir,
            int count, std::uint64_t seed) {
  data::SceneSpec spec;
  if (!spec_path.empty()) {
    spec = load_scene_spec(spec_path);
  } else if (preset == "pretrain") {
    spec = data::SceneSpec::pretrain_default();
  } else if (preset == "downstream") {
    spec = data::SceneSpec::downstream_default();
  } else {
    throw ConfigError("gen needs --spec <file> or --preset pretrain|downstream");
  }
  if (count < 1) throw ConfigError("--count must be >= 1");
  fs::create_directories(out_dir);

  json manifest;
  manifest["seed"] = seed;
  manifest["count"] = count;
  json files = json::array();
  std::vector<std::int64_t> totals(spec.classes.size(), 0);
  for (int i = 0; i < count; ++i) {
    const data::PointCloud cloud = data::generate_scene(spec, seed + static_cast<std::uint64_t>(i));
    char name[64];
    std::snprintf(name, sizeof(name), "scene_%04d.ptbin", i);
    const std::string path = (fs::path(out_dir) / name).string();
    data::write_ptbin(cloud, path);
    std::vector<std::int64_t> counts(spec.classes.size(), 0);
    for (int l : cloud.labels) {
      counts[static_cast<std::size_t>(l)] += 1;
      totals[static_cast<std::size_t>(l)] += 1;
    }
    files.push_back({{"file", name}, {"points", cloud.size()}, {"class_counts", counts}});
  }
  json class_names = json::array();
  for (const auto& c : spec.classes) class_names.push_back(c.name);
  manifest["files"] = files;
  manifest["total_class_counts"] = totals;
  manifest["classes"] = class_names;
  std::ofstream mf((fs::path(out_dir) / "manifest.json").string());
  if (!mf) throw IoError("cannot write manifest in \"" + out_dir + "\"");
  mf << manifest.dump(2) << "\n";
  std::cout << "wrote " << count << " scenes to " << out_dir << "\n";
  return 0;
}

int run_pretrain(const std::string& config_path, const std::string& out_override) {
  const RunConfig cfg = config_or_default(config_path);
  const auto scenes = load_scene_dir(cfg.data.pretrain_dir);
  LossLog log;
  Model model = pretrain_backbone(cfg.backbone, scenes, cfg.train.pretrain_epochs,
                                  cfg.train.pretrain_lr, cfg.train.momentum, cfg.train.seed, &log);
  const std::string out = out_override.empty() ? cfg.io.checkpoint : out_override;
  save_checkpoint(model.params, out,
                  [&](const ad::Parameter& p) { return model.is_backbone_param(p.name); });
  if (!cfg.io.loss_log.empty()) save_loss_log(log, cfg.io.loss_log);
  std::cout << "pretrained on " << scenes.size() << " scenes for " << cfg.train.pretrain_epochs
            << " epochs; final loss " << (log.losses.empty() ? 0.0 : log.losses.back())
            << "; checkpoint " << out << "\n";
  return 0;
}

int run_train(const std::string& config_path, const std::string& ckpt_in,
              const std::string& out_override, int steps_override) {
  const RunConfig cfg = config_or_default(config_path);
  const auto scenes = load_scene_dir(cfg.data.train_dir);
  Model model = Model::build(cfg.backbone, cfg.peft, cfg.train.seed, /*frozen_backbone=*/true);
  const LoadReport report = apply_checkpoint(model.params, load_checkpoint(ckpt_in));
  require_backbone_loaded(model, report);

  const int steps = steps_override >= 0 ? steps_override : cfg.train.steps;
  const LossLog log =
      finetune(model, scenes, steps, cfg.train.lr, cfg.train.momentum, cfg.train.seed);
  const std::string out = out_override.empty() ? cfg.io.checkpoint : out_override;
  save_checkpoint(model.params, out);
  if (!cfg.io.loss_log.empty()) save_loss_log(log, cfg.io.loss_log);
  std::cout << "fine-tuned " << steps << " steps on " << scenes.size() << " scenes; final loss "
            << (log.losses.empty() ? 0.0 : log.losses.back()) << "; checkpoint " << out << "\n";
  return 0;
}

int run_eval(const std::string& config_path, const std::string& ckpt_in,
             const std::string& data_override, const std::string& out_override) {
  const RunConfig cfg = config_or_default(config_path);
  Model model = Model::build(cfg.backbone, cfg.peft, cfg.train.seed, /*frozen_backbone=*/true);
  const LoadReport report = apply_checkpoint(model.params, load_checkpoint(ckpt_in));
  if (!report.missing_from_file.empty()) {
    std::string msg = "checkpoint does not cover the configured model; missing:";
    for (const auto& n : report.missing_from_file) msg += "\n  " + n;
    throw ConfigError(msg);
  }
  const auto scenes = load_scene_dir(data_override.empty() ? cfg.data.eval_dir : data_override);
  const auto cm = evaluate_confusion(model, scenes, env_thread_cap());
  const auto m = data::metrics(cm);
  const std::string out = out_override.empty() ? cfg.io.report : out_override;
  std::ofstream f(out);
  if (!f) throw IoError("cannot open \"" + out + "\" for writing");
  f << metrics_report(m, cm).dump(2) << "\n";
  std::printf("miou %.4f  macc %.4f  allacc %.4f  (%zu scenes) -> %s\n", m.miou, m.macc, m.allacc,
              scenes.size(), out.c_str());
  return 0;
}

int run_gradcheck(const std::string& config_path, std::uint64_t seed) {
  const RunConfig cfg = config_or_default(config_path);
  // Miniature model: the finite-difference sweep revisits every trainable
  // scalar, so widths stay small regardless of the configured backbone. The
  // peft knobs (strategy, temperature, scale, position, curves) carry over.
  BackboneConfig bb;
  bb.stages = {{6, 2, 4, 2, 3}, {8, 2, 4, 2, 2}};
  bb.num_classes = 3;
  bb.order_bits = 6;
  PeftConfig peft = cfg.peft;
  peft.hidden_dim = 2;
  peft.bases = {2, 2};
  if (peft.strategy == InsertionStrategy::None) peft.strategy = InsertionStrategy::LastBlockPerStage;
  Model model = Model::build(bb, peft, seed, /*frozen_backbone=*/true);

  data::SceneSpec spec = data::SceneSpec::pretrain_default();
  spec.points_min = 18;
  spec.points_max = 18;
  data::PointCloud cloud = data::generate_scene(spec, seed);
  for (auto& l : cloud.labels) l = l % bb.num_classes;

  randomize_for_gradcheck(model, cloud, seed ^ 0xabcde12345ULL);
  const auto report = model_gradcheck(model, cloud);
  bool ok = true;
  std::printf("%-40s %14s  %s\n", "parameter", "max rel err", "status");
  for (const auto& [name, err] : report.max_rel_err) {
    const bool pass = err < 1e-4;
    ok = ok && pass;
    std::printf("%-40s %14.3e  %s\n", name.c_str(), err, pass ? "ok" : "FAIL");
  }
  std::printf("gradcheck %s (worst %.3e over %zu parameters)\n", ok ? "passed" : "FAILED",
              report.worst(), report.max_rel_err.size());
  return ok ? 0 : 2;
}

int run_inspect(const std::string& config_path, const std::string& scene_path, int stage,
                int site_override, const std::string& out_path) {
  const RunConfig cfg = config_or_default(config_path);
  if (stage < 1 || stage > static_cast<int>(cfg.backbone.stages.size())) {
    throw ConfigError("stage must be in [1, " + std::to_string(cfg.backbone.stages.size()) + "]");
  }
  const data::PointCloud cloud = data::read_ptbin(scene_path);

  // Coarsen coordinates down to the requested stage.
  MatrixX coords = cloud.coords;
  int bits = cfg.backbone.order_bits;
  {
    const sfc::Bbox bbox = sfc::Bbox::of(cloud.coords);
    std::vector<sfc::GridCoord> cells = sfc::quantize(coords, bits, bbox);
    for (int s = 1; s < stage; ++s) {
      const int factor = cfg.backbone.stages[static_cast<std::size_t>(s - 1)].pool;
      PoolMap pm = make_pool_map(cells, coords, factor);
      coords = pm.coarse_coords;
      cells = pm.coarse_cells;
      int k = 0;
      while ((1 << k) < factor) ++k;
      bits -= k;
    }
  }

  const int site = site_override >= 0 ? site_override : stage - 1;
  const sfc::CurveKind curve = cfg.peft.curve_for_site(site);
  const auto order = sfc::serialize(coords, curve, bits);
  const auto codes = sfc::point_codes(coords, curve, bits, sfc::Bbox::of(coords));
  const sng::GroupPlan plan =
      (cfg.peft.group_mode == sng::GroupMode::FixedPointsPerGroup)
          ? sng::plan_groups_by_size(coords.rows(), cfg.peft.points_per_group)
          : sng::plan_groups(coords.rows(),
                             cfg.backbone.stages[static_cast<std::size_t>(stage - 1)].groups);

  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    if (!file) throw IoError("cannot open \"" + out_path + "\" for writing");
    out = &file;
  }
  *out << "point_index,group_index,slot_index,curve_code\n";
  for (Index p = 0; p < coords.rows(); ++p) {
    const Index k = order.inv_perm[static_cast<std::size_t>(p)];
    *out << p << "," << (k / plan.capacity) << "," << (k % plan.capacity) << ","
         << codes[static_cast<std::size_t>(p)] << "\n";
  }
  return 0;
}

int run_weights_sim(const std::string& config_path, const std::string& ckpt_in,
                    const std::string& scene_path, int stage, const std::string& out_path) {
  const RunConfig cfg = config_or_default(config_path);
  Model model = Model::build(cfg.backbone, cfg.peft, cfg.train.seed, /*frozen_backbone=*/true);
  const LoadReport report = apply_checkpoint(model.params, load_checkpoint(ckpt_in));
  if (!report.missing_from_file.empty()) {
    throw ConfigError("checkpoint does not cover the configured model (" +
                      std::to_string(report.missing_from_file.size()) + " parameters missing)");
  }
  const data::PointCloud cloud = data::read_ptbin(scene_path);

  ForwardCapture capture;
  capture.stage = stage;
  model.logits(cloud, &capture);
  if (!capture.filled) {
    throw ConfigError("no dynamic site at stage " + std::to_string(stage));
  }

  // Cosine similarity of the per-group dynamic weights.
  const MatrixX& w = capture.weights;
  const Index m = w.rows();
  MatrixX sim(m, m);
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < m; ++j) {
      const Scalar ni = w.row(i).norm();
      const Scalar nj = w.row(j).norm();
      sim(i, j) = (ni == 0.0 || nj == 0.0) ? 0.0 : w.row(i).dot(w.row(j)) / (ni * nj);
    }
  }

  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    if (!file) throw IoError("cannot open \"" + out_path + "\" for writing");
    out = &file;
  }
  char buf[32];
  for (Index j = 0; j < m; ++j) *out << (j ? "," : "") << j;
  *out << "\n";
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < m; ++j) {
      std::snprintf(buf, sizeof(buf), "%.9f", sim(i, j));
      *out << (j ? "," : "") << buf;
    }
    *out << "\n";
  }
  const VectorX entropy = routing_entropy(capture.routing);
  for (Index g = 0; g < entropy.size(); ++g) {
    std::printf("entropy,%lld,%.9f\n", static_cast<long long>(g), entropy[g]);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ptpa: test-time parameter adaptation for point-cloud encoders"};
  app.require_subcommand(1);

  std::string spec_path, preset, out_dir, config_path, ckpt_in, out_path, data_dir, scene_path;
  int count = 1, steps_override = -1, stage = 1, site_override = -1;
  std::uint64_t seed = 1;

  auto* gen = app.add_subcommand("gen", "generate synthetic scenes");
  gen->add_option("--spec", spec_path, "scene spec JSON");
  gen->add_option("--preset", preset, "builtin spec: pretrain or downstream");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--count", count, "number of scenes")->required();
  gen->add_option("--seed", seed, "base seed");

  auto* pretrain = app.add_subcommand("pretrain", "train and freeze the backbone");
  pretrain->add_option("--config", config_path, "run config JSON");
  pretrain->add_option("--out", out_path, "checkpoint path override");

  auto* train = app.add_subcommand("train", "fine-tune the PEFT overlay and head");
  train->add_option("--config", config_path, "run config JSON");
  train->add_option("--ckpt", ckpt_in, "input checkpoint")->required();
  train->add_option("--out", out_path, "output checkpoint override");
  train->add_option("--steps", steps_override, "step count override");

  auto* eval = app.add_subcommand("eval", "evaluate segmentation metrics");
  eval->add_option("--config", config_path, "run config JSON");
  eval->add_option("--ckpt", ckpt_in, "checkpoint")->required();
  eval->add_option("--data", data_dir, "scene directory override");
  eval->add_option("--out", out_path, "metrics JSON path override");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gradcheck->add_option("--config", config_path, "run config JSON");
  gradcheck->add_option("--seed", seed, "seed");

  auto* inspect = app.add_subcommand("inspect", "emit group assignments as CSV");
  inspect->add_option("--scene", scene_path, "scene .ptbin")->required();
  inspect->add_option("--stage", stage, "stage index (1-based)")->required();
  inspect->add_option("--config", config_path, "run config JSON");
  inspect->add_option("--site", site_override, "curve-schedule site override");
  inspect->add_option("--out", out_path, "CSV path (stdout if absent)");

  auto* wsim = app.add_subcommand("weights-sim", "dynamic-weight similarity matrix CSV");
  wsim->add_option("--ckpt", ckpt_in, "checkpoint")->required();
  wsim->add_option("--scene", scene_path, "scene .ptbin")->required();
  wsim->add_option("--site", stage, "stage of the dynamic site (1-based)")->required();
  wsim->add_option("--config", config_path, "run config JSON");
  wsim->add_option("--out", out_path, "CSV path (stdout if absent)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return run_gen(spec_path, preset, out_dir, count, seed);
    if (pretrain->parsed()) return run_pretrain(config_path, out_path);
    if (train->parsed()) return run_train(config_path, ckpt_in, out_path, steps_override);
    if (eval->parsed()) return run_eval(config_path, ckpt_in, data_dir, out_path);
    if (gradcheck->parsed()) return run_gradcheck(config_path, seed);
    if (inspect->parsed()) return run_inspect(config_path, scene_path, stage, site_override, out_path);
    if (wsim->parsed()) return run_weights_sim(config_path, ckpt_in, scene_path, stage, out_path);
  } catch (const NumericError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
