#pragma once

#include <string>

#include <json.hpp>

#include "ptpa/backbone.hpp"
#include "ptpa/data.hpp"

namespace ptpa {

struct TrainParams {
  Scalar lr = 0.05;
  Scalar momentum = 0.9;
  int steps = 1000;
  int batch = 1;
  std::uint64_t seed = 1;
  int pretrain_epochs = 3;
  Scalar pretrain_lr = 0.05;
};

struct DataParams {
  std::string pretrain_dir;
  std::string train_dir;
  std::string eval_dir;
};

struct IoParams {
  std::string checkpoint = "model.ptpk";
  std::string report = "metrics.json";
  std::string loss_log = "loss.csv";
};

/// The whole run configuration. Every key has a default (the ablation-winning
/// settings); unknown keys are rejected.
struct RunConfig {
  BackboneConfig backbone = BackboneConfig::toy_default();
  PeftConfig peft;
  TrainParams train;
  DataParams data;
  IoParams io;
};

RunConfig parse_run_config(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);

data::SceneSpec parse_scene_spec(const nlohmann::json& j);
nlohmann::json to_json(const data::SceneSpec& spec);
data::SceneSpec load_scene_spec(const std::string& path);
void save_scene_spec(const data::SceneSpec& spec, const std::string& path);

}  // namespace ptpa
