#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ptpa/data.hpp"

#ifndef PTPA_CLI_PATH
#error "PTPA_CLI_PATH must point at the built ptpa binary"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kWork = "/tmp/ptpa_cli_work";

int run(const std::string& args, const std::string& stdout_file = "") {
  std::string cmd = std::string(PTPA_CLI_PATH) + " " + args;
  if (!stdout_file.empty()) {
    cmd += " > " + stdout_file + " 2>/dev/null";
  } else {
    cmd += " > /dev/null 2>/dev/null";
  }
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_mini_config(const std::string& path, int steps, const std::string& bases = "[2, 2]",
                       double lr = 0.05, const std::string& strategy = "last-block-per-stage") {
  std::ofstream f(path);
  f << R"({
  "backbone": {
    "order_bits": 8,
    "stages": [
      {"channels": 8,  "blocks": 2, "patch": 8, "pool": 2, "groups": 8},
      {"channels": 16, "blocks": 2, "patch": 8, "pool": 2, "groups": 4}
    ]
  },
  "peft": { "bases": )"
    << bases << R"(, "strategy": ")" << strategy << R"(" },
  "train": { "lr": )"
    << lr << R"(, "momentum": 0.9, "steps": )" << steps
    << R"(, "seed": 3, "pretrain_epochs": 2, "pretrain_lr": 0.02 },
  "data": { "pretrain_dir": ")"
    << kWork << R"(/a", "train_dir": ")" << kWork << R"(/b", "eval_dir": ")" << kWork
    << R"(/b" },
  "io": { "checkpoint": ")"
    << kWork << R"(/backbone.ptpk", "report": ")" << kWork << R"(/metrics.json", "loss_log": ")"
    << kWork << R"(/loss.csv" }
})";
}

struct Workspace {
  Workspace() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    REQUIRE(run("gen --preset pretrain --out " + kWork + "/a --count 6 --seed 50") == 0);
    REQUIRE(run("gen --preset downstream --out " + kWork + "/b --count 4 --seed 60") == 0);
    write_mini_config(kWork + "/config.json", 6);
    REQUIRE(run("pretrain --config " + kWork + "/config.json") == 0);
    REQUIRE(run("train --config " + kWork + "/config.json --ckpt " + kWork +
                "/backbone.ptpk --out " + kWork + "/tuned.ptpk") == 0);
  }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("gen writes exactly count scenes plus a manifest whose histogram recounts") {
  workspace();
  const std::string dir = kWork + "/single";
  REQUIRE(run("gen --preset pretrain --out " + dir + " --count 1 --seed 9") == 0);
  int ptbins = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".ptbin") ++ptbins;
  }
  CHECK(ptbins == 1);

  const json manifest = json::parse(slurp(dir + "/manifest.json"));
  const auto cloud = ptpa::data::read_ptbin(dir + "/scene_0000.ptbin");
  std::vector<std::int64_t> recount(manifest["classes"].size(), 0);
  for (int l : cloud.labels) recount[static_cast<std::size_t>(l)] += 1;
  CHECK(manifest["total_class_counts"].get<std::vector<std::int64_t>>() == recount);
  CHECK(manifest["files"].size() == 1);
}

TEST_CASE("gen is seed-deterministic down to manifest bytes") {
  workspace();
  REQUIRE(run("gen --preset downstream --out " + kWork + "/d1 --count 3 --seed 77") == 0);
  REQUIRE(run("gen --preset downstream --out " + kWork + "/d2 --count 3 --seed 77") == 0);
  CHECK(slurp(kWork + "/d1/manifest.json") == slurp(kWork + "/d2/manifest.json"));
  CHECK(slurp(kWork + "/d1/scene_0002.ptbin") == slurp(kWork + "/d2/scene_0002.ptbin"));
}

TEST_CASE("usage and config errors exit with code 1") {
  workspace();
  CHECK(run("gen --out /tmp/x") == 1);  // missing required --count
  std::ofstream bad(kWork + "/bad.json");
  bad << R"({"train": {"warmup": 10}})";
  bad.close();
  CHECK(run("pretrain --config " + kWork + "/bad.json") == 1);
  CHECK(run("eval --config " + kWork + "/config.json --ckpt " + kWork + "/no_such.ptpk") == 1);
  // eval on a backbone-only checkpoint: the overlay/head are missing
  CHECK(run("eval --config " + kWork + "/config.json --ckpt " + kWork + "/backbone.ptpk") == 1);
}

TEST_CASE("eval writes the metrics report") {
  workspace();
  REQUIRE(run("eval --config " + kWork + "/config.json --ckpt " + kWork + "/tuned.ptpk") == 0);
  const json report = json::parse(slurp(kWork + "/metrics.json"));
  CHECK(report.contains("miou"));
  CHECK(report.contains("per_class_iou"));
  CHECK(report["confusion"].size() == 6);
  const double miou = report["miou"].get<double>();
  CHECK(miou >= 0.0);
  CHECK(miou <= 1.0);
}

TEST_CASE("train --steps 0 reproduces the input checkpoint byte for byte") {
  workspace();
  write_mini_config(kWork + "/config0.json", 0);
  REQUIRE(run("train --config " + kWork + "/config0.json --ckpt " + kWork +
              "/tuned.ptpk --out " + kWork + "/zero.ptpk") == 0);
  CHECK(slurp(kWork + "/zero.ptpk") == slurp(kWork + "/tuned.ptpk"));
}

TEST_CASE("divergence is reported as a numerical failure (exit 2)") {
  workspace();
  write_mini_config(kWork + "/hot.json", 8, "[2, 2]", 1e9);
  CHECK(run("train --config " + kWork + "/hot.json --ckpt " + kWork + "/backbone.ptpk --out " +
            kWork + "/diverged.ptpk") == 2);
}

TEST_CASE("weights-sim: symmetric unit-diagonal CSV; K=1 gives all ones") {
  workspace();
  const std::string scene = kWork + "/b/scene_0000.ptbin";
  REQUIRE(run("weights-sim --config " + kWork + "/config.json --ckpt " + kWork +
              "/tuned.ptpk --scene " + scene + " --site 2 --out " + kWork + "/sim.csv",
              kWork + "/entropy.txt") == 0);
  std::ifstream f(kWork + "/sim.csv");
  std::string header;
  std::getline(f, header);
  std::vector<std::vector<double>> sim;
  for (std::string line; std::getline(f, line);) {
    std::vector<double> row;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) row.push_back(std::stod(cell));
    sim.push_back(row);
  }
  REQUIRE(!sim.empty());
  REQUIRE(sim.size() == sim[0].size());
  for (std::size_t i = 0; i < sim.size(); ++i) {
    CHECK(sim[i][i] == doctest::Approx(1.0).epsilon(1e-9));
    for (std::size_t j = 0; j < sim.size(); ++j) {
      CHECK(sim[i][j] == doctest::Approx(sim[j][i]).epsilon(1e-9));
    }
  }

  // a stage without a dynamic site is a config error (last-block-only leaves
  // stage 1 with static adapters exclusively)
  write_mini_config(kWork + "/lbo.json", 2, "[2, 2]", 0.05, "last-block-only");
  REQUIRE(run("train --config " + kWork + "/lbo.json --ckpt " + kWork + "/backbone.ptpk --out " +
              kWork + "/lbo.ptpk") == 0);
  CHECK(run("weights-sim --config " + kWork + "/lbo.json --ckpt " + kWork + "/lbo.ptpk --scene " +
            scene + " --site 1 --out " + kWork + "/nosite.csv") == 1);

  // K=1 degenerates to an all-ones matrix
  write_mini_config(kWork + "/k1.json", 4, "[1, 1]");
  REQUIRE(run("train --config " + kWork + "/k1.json --ckpt " + kWork + "/backbone.ptpk --out " +
              kWork + "/k1.ptpk") == 0);
  REQUIRE(run("weights-sim --config " + kWork + "/k1.json --ckpt " + kWork + "/k1.ptpk --scene " +
              scene + " --site 2 --out " + kWork + "/sim1.csv") == 0);
  std::ifstream f1(kWork + "/sim1.csv");
  std::getline(f1, header);
  for (std::string line; std::getline(f1, line);) {
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) {
      CHECK(std::stod(cell) == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("routing entropy profiles differ between structurally different scenes") {
  workspace();
  REQUIRE(run("weights-sim --config " + kWork + "/config.json --ckpt " + kWork +
              "/tuned.ptpk --scene " + kWork + "/b/scene_0000.ptbin --site 2 --out " + kWork +
              "/s0.csv",
              kWork + "/e0.txt") == 0);
  REQUIRE(run("weights-sim --config " + kWork + "/config.json --ckpt " + kWork +
              "/tuned.ptpk --scene " + kWork + "/b/scene_0001.ptbin --site 2 --out " + kWork +
              "/s1.csv",
              kWork + "/e1.txt") == 0);
  const std::string e0 = slurp(kWork + "/e0.txt");
  const std::string e1 = slurp(kWork + "/e1.txt");
  CHECK(e0.find("entropy,0,") != std::string::npos);
  CHECK(e0 != e1);
}

TEST_CASE("inspect emits a valid grouping CSV") {
  workspace();
  REQUIRE(run("inspect --config " + kWork + "/config.json --scene " + kWork +
              "/b/scene_0000.ptbin --stage 2 --out " + kWork + "/groups.csv") == 0);
  std::ifstream f(kWork + "/groups.csv");
  std::string header;
  std::getline(f, header);
  CHECK(header == "point_index,group_index,slot_index,curve_code");
  int rows = 0;
  long long prev_point = -1;
  for (std::string line; std::getline(f, line);) {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    const long long point = std::stoll(cell);
    CHECK(point == prev_point + 1);
    prev_point = point;
    std::getline(ss, cell, ',');
    CHECK(std::stoll(cell) >= 0);
    ++rows;
  }
  CHECK(rows > 1);
}
