#include "ptpa/config.hpp"

#include <fstream>
#include <set>

namespace ptpa {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw ConfigError("unknown key \"" + where + "." + it.key() + "\"");
    }
  }
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

void get_scalar(const json& j, const char* key, Scalar& out) {
  if (j.contains(key)) out = j.at(key).get<Scalar>();
}

}  // namespace

RunConfig parse_run_config(const json& j) {
  reject_unknown(j, {"backbone", "peft", "train", "data", "io"}, "config");
  RunConfig cfg;

  if (j.contains("backbone")) {
    const json& b = j.at("backbone");
    reject_unknown(b, {"in_channels", "num_classes", "order_bits", "stages"}, "backbone");
    get_to(b, "in_channels", cfg.backbone.in_channels);
    get_to(b, "num_classes", cfg.backbone.num_classes);
    get_to(b, "order_bits", cfg.backbone.order_bits);
    if (b.contains("stages")) {
      if (!b.at("stages").is_array() || b.at("stages").empty()) {
        throw ConfigError("backbone.stages must be a non-empty array");
      }
      cfg.backbone.stages.clear();
      for (const json& s : b.at("stages")) {
        reject_unknown(s, {"channels", "blocks", "patch", "pool", "groups"}, "backbone.stages[]");
        StageSpec spec;
        get_to(s, "channels", spec.channels);
        get_to(s, "blocks", spec.blocks);
        get_to(s, "patch", spec.patch);
        get_to(s, "pool", spec.pool);
        get_to(s, "groups", spec.groups);
        cfg.backbone.stages.push_back(spec);
      }
    }
  }

  if (j.contains("peft")) {
    const json& p = j.at("peft");
    reject_unknown(p,
                   {"strategy", "bases", "hidden_dim", "hidden_ratio", "temperature", "scale",
                    "group_mode", "points_per_group", "curves", "dplayer_position",
                    "router_hidden", "stage_overrides"},
                   "peft");
    if (p.contains("strategy")) cfg.peft.strategy = strategy_from_string(p.at("strategy"));
    if (p.contains("bases")) {
      cfg.peft.bases = p.at("bases").get<std::vector<int>>();
      if (cfg.peft.bases.empty()) throw ConfigError("peft.bases must not be empty");
    }
    get_to(p, "hidden_dim", cfg.peft.hidden_dim);
    get_to(p, "hidden_ratio", cfg.peft.hidden_ratio);
    get_scalar(p, "temperature", cfg.peft.temperature);
    get_scalar(p, "scale", cfg.peft.scale);
    if (p.contains("group_mode")) {
      const std::string mode = p.at("group_mode");
      if (mode == "fixed-group-count") {
        cfg.peft.group_mode = sng::GroupMode::FixedGroupCount;
      } else if (mode == "fixed-points-per-group") {
        cfg.peft.group_mode = sng::GroupMode::FixedPointsPerGroup;
      } else {
        throw ConfigError("unknown peft.group_mode \"" + mode + "\"");
      }
    }
    get_to(p, "points_per_group", cfg.peft.points_per_group);
    if (p.contains("curves")) {
      cfg.peft.curves.clear();
      for (const json& c : p.at("curves")) {
        cfg.peft.curves.push_back(sfc::curve_from_string(c.get<std::string>()));
      }
      if (cfg.peft.curves.empty()) throw ConfigError("peft.curves must not be empty");
    }
    if (p.contains("dplayer_position")) {
      cfg.peft.position = dplayer_from_string(p.at("dplayer_position"));
    }
    get_to(p, "router_hidden", cfg.peft.router_hidden);
    if (p.contains("stage_overrides")) {
      cfg.peft.stage_overrides.clear();
      for (const json& row : p.at("stage_overrides")) {
        std::vector<BlockTag> tags;
        if (!row.is_null()) {
          for (const json& t : row) tags.push_back(tag_from_string(t.get<std::string>()));
        }
        cfg.peft.stage_overrides.push_back(std::move(tags));
      }
    }
    if (!(cfg.peft.temperature > 0.0)) throw ConfigError("peft.temperature must be > 0");
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    reject_unknown(t, {"lr", "momentum", "steps", "batch", "seed", "pretrain_epochs", "pretrain_lr"},
                   "train");
    get_scalar(t, "lr", cfg.train.lr);
    get_scalar(t, "momentum", cfg.train.momentum);
    get_to(t, "steps", cfg.train.steps);
    get_to(t, "batch", cfg.train.batch);
    get_to(t, "seed", cfg.train.seed);
    get_to(t, "pretrain_epochs", cfg.train.pretrain_epochs);
    get_scalar(t, "pretrain_lr", cfg.train.pretrain_lr);
    if (cfg.train.steps < 0) throw ConfigError("train.steps must be >= 0");
  }

  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d, {"pretrain_dir", "train_dir", "eval_dir"}, "data");
    get_to(d, "pretrain_dir", cfg.data.pretrain_dir);
    get_to(d, "train_dir", cfg.data.train_dir);
    get_to(d, "eval_dir", cfg.data.eval_dir);
  }

  if (j.contains("io")) {
    const json& io = j.at("io");
    reject_unknown(io, {"checkpoint", "report", "loss_log"}, "io");
    get_to(io, "checkpoint", cfg.io.checkpoint);
    get_to(io, "report", cfg.io.report);
    get_to(io, "loss_log", cfg.io.loss_log);
  }

  cfg.backbone.validate();
  return cfg;
}

json to_json(const RunConfig& cfg) {
  json stages = json::array();
  for (const StageSpec& s : cfg.backbone.stages) {
    stages.push_back({{"channels", s.channels},
                      {"blocks", s.blocks},
                      {"patch", s.patch},
                      {"pool", s.pool},
                      {"groups", s.groups}});
  }
  json curves = json::array();
  for (const auto& c : cfg.peft.curves) curves.push_back(sfc::to_string(c));
  json overrides = json::array();
  for (const auto& row : cfg.peft.stage_overrides) {
    if (row.empty()) {
      overrides.push_back(nullptr);
    } else {
      json tags = json::array();
      for (BlockTag t : row) tags.push_back(to_string(t));
      overrides.push_back(tags);
    }
  }
  return json{
      {"backbone",
       {{"in_channels", cfg.backbone.in_channels},
        {"num_classes", cfg.backbone.num_classes},
        {"order_bits", cfg.backbone.order_bits},
        {"stages", stages}}},
      {"peft",
       {{"strategy", to_string(cfg.peft.strategy)},
        {"bases", cfg.peft.bases},
        {"hidden_dim", cfg.peft.hidden_dim},
        {"hidden_ratio", cfg.peft.hidden_ratio},
        {"temperature", cfg.peft.temperature},
        {"scale", cfg.peft.scale},
        {"group_mode", cfg.peft.group_mode == sng::GroupMode::FixedGroupCount
                           ? "fixed-group-count"
                           : "fixed-points-per-group"},
        {"points_per_group", cfg.peft.points_per_group},
        {"curves", curves},
        {"dplayer_position", to_string(cfg.peft.position)},
        {"router_hidden", cfg.peft.router_hidden},
        {"stage_overrides", overrides}}},
      {"train",
       {{"lr", cfg.train.lr},
        {"momentum", cfg.train.momentum},
        {"steps", cfg.train.steps},
        {"batch", cfg.train.batch},
        {"seed", cfg.train.seed},
        {"pretrain_epochs", cfg.train.pretrain_epochs},
        {"pretrain_lr", cfg.train.pretrain_lr}}},
      {"data",
       {{"pretrain_dir", cfg.data.pretrain_dir},
        {"train_dir", cfg.data.train_dir},
        {"eval_dir", cfg.data.eval_dir}}},
      {"io",
       {{"checkpoint", cfg.io.checkpoint},
        {"report", cfg.io.report},
        {"loss_log", cfg.io.loss_log}}}};
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config \"" + path + "\"");
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in \"" + path + "\": " + e.what());
  }
  return parse_run_config(j);
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open \"" + path + "\" for writing");
  f << to_json(cfg).dump(2) << "\n";
}

data::SceneSpec parse_scene_spec(const json& j) {
  reject_unknown(j,
                 {"room", "classes", "jitter", "color_noise", "points_min", "points_max", "seed"},
                 "scene");
  data::SceneSpec spec;
  spec.classes.clear();
  if (j.contains("room")) {
    auto v = j.at("room").get<std::vector<Scalar>>();
    if (v.size() != 3) throw ConfigError("scene.room must have 3 entries");
    spec.room = Vector3(v[0], v[1], v[2]);
  }
  get_scalar(j, "jitter", spec.jitter);
  get_scalar(j, "color_noise", spec.color_noise);
  if (j.contains("points_min")) spec.points_min = j.at("points_min").get<Index>();
  if (j.contains("points_max")) spec.points_max = j.at("points_max").get<Index>();
  if (j.contains("seed")) spec.seed = j.at("seed").get<std::uint64_t>();
  if (!j.contains("classes")) throw ConfigError("scene spec needs a classes array");
  for (const json& c : j.at("classes")) {
    reject_unknown(c,
                   {"name", "kind", "frequency", "color", "size_min", "size_max", "instances_min",
                    "instances_max"},
                   "scene.classes[]");
    data::ClassRecipe r;
    get_to(c, "name", r.name);
    if (c.contains("kind")) r.kind = data::primitive_from_string(c.at("kind"));
    get_scalar(c, "frequency", r.frequency);
    if (c.contains("color")) {
      auto v = c.at("color").get<std::vector<Scalar>>();
      if (v.size() != 3) throw ConfigError("class color must have 3 entries");
      r.color = Vector3(v[0], v[1], v[2]);
    }
    get_scalar(c, "size_min", r.size_min);
    get_scalar(c, "size_max", r.size_max);
    get_to(c, "instances_min", r.instances_min);
    get_to(c, "instances_max", r.instances_max);
    spec.classes.push_back(std::move(r));
  }
  return spec;
}

json to_json(const data::SceneSpec& spec) {
  json classes = json::array();
  for (const auto& r : spec.classes) {
    classes.push_back({{"name", r.name},
                       {"kind", data::to_string(r.kind)},
                       {"frequency", r.frequency},
                       {"color", {r.color.x(), r.color.y(), r.color.z()}},
                       {"size_min", r.size_min},
                       {"size_max", r.size_max},
                       {"instances_min", r.instances_min},
                       {"instances_max", r.instances_max}});
  }
  return json{{"room", {spec.room.x(), spec.room.y(), spec.room.z()}},
              {"classes", classes},
              {"jitter", spec.jitter},
              {"color_noise", spec.color_noise},
              {"points_min", spec.points_min},
              {"points_max", spec.points_max},
              {"seed", spec.seed}};
}

data::SceneSpec load_scene_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open scene spec \"" + path + "\"");
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in \"" + path + "\": " + e.what());
  }
  return parse_scene_spec(j);
}

void save_scene_spec(const data::SceneSpec& spec, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open \"" + path + "\" for writing");
  f << to_json(spec).dump(2) << "\n";
}

}  // namespace ptpa
