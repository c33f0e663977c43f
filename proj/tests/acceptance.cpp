// Acceptance suite: runs every criterion end to end and prints one PASS/FAIL
// line per criterion. Exit code 0 only if all pass.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <vector>

#include "ptpa/config.hpp"
#include "ptpa/train.hpp"

using namespace ptpa;

namespace {

struct CheckFailure : std::runtime_error {
  explicit CheckFailure(const std::string& what) : std::runtime_error(what) {}
};

void require(bool cond, const std::string& what) {
  if (!cond) throw CheckFailure(what);
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

MatrixX random_matrix(Rng& rng, Index r, Index c, Scalar lo = -1.0, Scalar hi = 1.0) {
  MatrixX m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------------------
// Shared transfer-experiment fixture (criteria 8, 10, 11, 12)
// ---------------------------------------------------------------------------

BackboneConfig experiment_backbone() {
  BackboneConfig bb;
  bb.order_bits = 9;
  bb.stages = {
      {16, 2, 16, 2, 16},
      {32, 2, 16, 2, 8},
      {64, 2, 16, 2, 4},
  };
  return bb;
}

PeftConfig experiment_peft(InsertionStrategy strategy) {
  PeftConfig peft;  // defaults: bases [4,4,2], C_d = C/8, tau 4, s 1, mixed curves
  peft.strategy = strategy;
  return peft;
}

std::vector<data::PointCloud> make_scenes(const data::SceneSpec& base, int count,
                                          std::uint64_t seed0) {
  data::SceneSpec spec = base;
  spec.points_min = 256;
  spec.points_max = 384;
  std::vector<data::PointCloud> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(data::generate_scene(spec, seed0 + static_cast<std::uint64_t>(i)));
  }
  return out;
}

struct Experiment {
  std::vector<data::PointCloud> pretrain_scenes = make_scenes(data::SceneSpec::pretrain_default(), 32, 1000);
  std::vector<data::PointCloud> train_scenes = make_scenes(data::SceneSpec::downstream_default(), 12, 2000);
  std::vector<data::PointCloud> eval_scenes = make_scenes(data::SceneSpec::downstream_default(), 16, 3000);
  Model pretrained = pretrain_backbone(experiment_backbone(), pretrain_scenes, /*epochs=*/3,
                                       /*lr=*/0.02, /*momentum=*/0.9, /*seed=*/11, nullptr);

  Model finetuned(InsertionStrategy strategy, std::uint64_t seed, int steps) const {
    Model model = Model::build(experiment_backbone(), experiment_peft(strategy), seed, true);
    for (const auto& p : pretrained.params.all()) {
      if (model.is_backbone_param(p->name)) model.params.at(p->name).value = p->value;
    }
    finetune(model, train_scenes, steps, /*lr=*/0.05, /*momentum=*/0.9, seed);
    return model;
  }
};

Experiment& experiment() {
  static Experiment exp;
  return exp;
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

void criterion_1_sfc_exhaustive() {
  const auto t0 = std::chrono::steady_clock::now();
  for (int b = 1; b <= 4; ++b) {
    const std::uint64_t total = std::uint64_t{1} << (3 * b);
    const std::uint32_t side = 1u << b;
    sfc::GridCoord prev{};
    for (std::uint64_t code = 0; code < total; ++code) {
      const sfc::GridCoord mc = sfc::morton_decode(code, b);
      require(sfc::morton_encode(mc, b) == code, "morton decode/encode mismatch");
      const sfc::GridCoord hc = sfc::hilbert_decode(code, b);
      require(sfc::hilbert_encode(hc, b) == code, "hilbert decode/encode mismatch");
      if (code > 0) {
        const int d = std::abs(int(hc.x) - int(prev.x)) + std::abs(int(hc.y) - int(prev.y)) +
                      std::abs(int(hc.z) - int(prev.z));
        require(d == 1, "hilbert consecutive codes not L1-adjacent at b=" + std::to_string(b));
      }
      prev = hc;
    }
    for (std::uint32_t x = 0; x < side; ++x) {
      for (std::uint32_t y = 0; y < side; ++y) {
        for (std::uint32_t z = 0; z < side; ++z) {
          const sfc::GridCoord c{x, y, z};
          require(sfc::morton_decode(sfc::morton_encode(c, b), b) == c,
                  "morton encode/decode mismatch");
          require(sfc::hilbert_decode(sfc::hilbert_encode(c, b), b) == c,
                  "hilbert encode/decode mismatch");
        }
      }
    }
  }
  require(seconds_since(t0) < 5.0, "sfc exhaustive suite exceeded 5 s");
}

void criterion_2_round_trip() {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(500));
    const Index m = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    const Index c = 1 + static_cast<Index>(rng.below(12));
    MatrixX x = random_matrix(rng, n, c);
    MatrixX coords = random_matrix(rng, n, 3, 0.0, 4.0);
    const auto curve = (trial % 2) ? sfc::CurveKind::hilbert() : sfc::CurveKind::zorder_permuted();
    const auto order = sfc::serialize(coords, curve, 10);
    const sng::GroupedTokens g = sng::sng_group(x, order, sng::plan_groups(n, m));
    const MatrixX back = sng::sng_inverse(g);
    require(back.rows() == n, "round trip changed the row count");
    require(std::memcmp(back.data(), x.data(), sizeof(Scalar) * static_cast<std::size_t>(x.size())) == 0,
            "round trip is not bit-exact");
  }
}

void criterion_3_routing_normalization() {
  Rng rng(3000);
  ad::ParameterStore store;
  DppOptions opts;
  opts.bases = 4;
  opts.hidden = 4;
  const DppSite site = make_dpp_site(store, "site", 8, opts, rng);
  int rows_checked = 0;
  for (int input = 0; input < 1000; ++input) {
    const Index n = 8 + static_cast<Index>(rng.below(48));
    const Index m = 1 + static_cast<Index>(rng.below(8));
    MatrixX x = random_matrix(rng, n, 8, -3.0, 3.0);
    MatrixX coords = random_matrix(rng, n, 3, 0.0, 4.0);
    const auto order = sfc::serialize(coords, sfc::CurveKind::hilbert(), 8);
    const sng::GroupedTokens g = sng::sng_group(x, order, sng::plan_groups(n, m));
    const MatrixX o = dpp_route(g, site);
    for (Index i = 0; i < o.rows(); ++i) {
      require(std::abs(o.row(i).sum() - 1.0) < 1e-9, "routing row does not sum to 1");
      for (Index k = 0; k < o.cols(); ++k) {
        require(o(i, k) > 0.0 && o(i, k) < 1.0, "routing entry outside (0,1)");
      }
      ++rows_checked;
    }
  }
  require(rows_checked >= 1000, "not enough routing rows exercised");
}

void criterion_4_degeneracy() {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    ad::ParameterStore store;
    DppOptions opts;
    opts.bases = 1;
    opts.hidden = 4;
    DppSite site = make_dpp_site(store, "site", 8, opts, rng);
    site.up->value.data = random_matrix(rng, 4, 8).reshaped<Eigen::RowMajor>();
    site.up_bias->value.data = random_matrix(rng, 1, 8).row(0).transpose();

    ad::ParameterStore astore;
    StaticAdapter adapter = make_static_adapter(astore, "a", 8, {4, 1.0}, rng);
    adapter.ln_gamma->value = site.ln_gamma->value;
    adapter.ln_beta->value = site.ln_beta->value;
    adapter.down->value.data = site.bases->value.data;
    adapter.up->value.data = site.up->value.data;
    adapter.up_bias->value.data = site.up_bias->value.data;

    const Index n = 23;
    MatrixX x = random_matrix(rng, n, 8);
    MatrixX coords = random_matrix(rng, n, 3, 0.0, 4.0);
    const auto order = sfc::serialize(coords, sfc::CurveKind::hilbert(), 10);
    const MatrixX from_dpp = dpp_forward(x, order, sng::plan_groups(n, 4), site);
    const MatrixX from_adapter = adapter_forward(x, adapter);
    require((from_dpp - from_adapter).cwiseAbs().maxCoeff() <= 1e-12,
            "K=1 dpp differs from the matched static adapter beyond 1e-12");
  }
}

void criterion_5_identity_at_init() {
  const data::PointCloud cloud = make_scenes(data::SceneSpec::pretrain_default(), 1, 555)[0];
  const BackboneConfig bb = BackboneConfig::toy_default();
  PeftConfig none;
  none.strategy = InsertionStrategy::None;

  for (std::uint64_t seed : {5ull, 6ull}) {
    Model bare = Model::build(bb, none, seed, false);
    Model overlaid = Model::build(bb, experiment_peft(InsertionStrategy::LastBlockPerStage), seed,
                                  true);
    const MatrixX a = bare.logits(cloud);
    const MatrixX b = overlaid.logits(cloud);
    require(a.rows() == b.rows() && a.cols() == b.cols(), "logit shapes differ");
    for (Index i = 0; i < a.size(); ++i) {
      require(a.data()[i] == b.data()[i], "fresh overlay changed a logit");
    }

    // s = 0 with nonzero overlay weights must also be exact.
    PeftConfig zero_scale = experiment_peft(InsertionStrategy::LastBlockPerStage);
    zero_scale.scale = 0.0;
    Model scaled = Model::build(bb, zero_scale, seed, true);
    randomize_trainable(scaled.params, seed + 100, 0.5);
    for (const auto& p : bare.params.all()) {
      if (scaled.params.find(p->name) && scaled.is_backbone_param(p->name)) {
        scaled.params.at(p->name).value = p->value;
      }
    }
    scaled.params.at("head.w").value = bare.params.at("head.w").value;
    scaled.params.at("head.b").value = bare.params.at("head.b").value;
    const MatrixX c = scaled.logits(cloud);
    for (Index i = 0; i < a.size(); ++i) {
      require(a.data()[i] == c.data()[i], "s=0 overlay changed a logit");
    }
  }
}

void criterion_6_padding_invariance() {
  Rng rng(66);
  ad::ParameterStore store;
  DppOptions opts;
  opts.bases = 3;
  opts.hidden = 4;
  DppSite site = make_dpp_site(store, "site", 8, opts, rng);
  site.up->value.data = random_matrix(rng, 4, 8).reshaped<Eigen::RowMajor>();

  const Index n = 37;
  MatrixX x = random_matrix(rng, n, 8);
  MatrixX coords = random_matrix(rng, n, 3, 0.0, 4.0);
  const auto order = sfc::serialize(coords, sfc::CurveKind::hilbert(), 10);
  const sng::GroupPlan plan = sng::plan_groups(n, 5);
  require(plan.padded_rows() > n, "plan has no padded slots to poison");

  ad::Tape tape(false);
  ad::Var normed = tape.layernorm(tape.constant(x),
                                  tape.leaf(ad::Tensor::from_vec(site.ln_gamma->value.data)),
                                  tape.leaf(ad::Tensor::from_vec(site.ln_beta->value.data)));
  sng::GroupedTokens g = sng::sng_group(MatrixX(tape.mat(normed)), order, plan);

  const MatrixX clean_branch = dpp_branch_from_grouped(g, site);
  const MatrixX clean_inverse = sng::sng_inverse(g);
  for (Index r = 0; r < plan.padded_rows(); ++r) {
    if (!g.mask[static_cast<std::size_t>(r)]) g.values.row(r).setConstant(999.0);
  }
  const MatrixX poisoned_branch = dpp_branch_from_grouped(g, site);
  const MatrixX poisoned_inverse = sng::sng_inverse(g);
  require(std::memcmp(clean_branch.data(), poisoned_branch.data(),
                      sizeof(Scalar) * static_cast<std::size_t>(clean_branch.size())) == 0,
          "padded-slot mutation leaked into the dynamic branch");
  require(std::memcmp(clean_inverse.data(), poisoned_inverse.data(),
                      sizeof(Scalar) * static_cast<std::size_t>(clean_inverse.size())) == 0,
          "padded-slot mutation leaked through sng_inverse");
}

void criterion_7_gradcheck() {
  const auto t0 = std::chrono::steady_clock::now();
  BackboneConfig bb;
  bb.stages = {{6, 2, 4, 2, 3}, {8, 2, 4, 2, 2}};
  bb.num_classes = 3;
  bb.order_bits = 6;
  PeftConfig peft = experiment_peft(InsertionStrategy::LastBlockPerStage);
  peft.hidden_dim = 2;
  peft.bases = {2, 2};
  Model model = Model::build(bb, peft, 7, true);

  data::SceneSpec spec = data::SceneSpec::pretrain_default();
  spec.points_min = 18;
  spec.points_max = 18;
  data::PointCloud cloud = data::generate_scene(spec, 7);
  for (auto& l : cloud.labels) l = l % bb.num_classes;

  randomize_for_gradcheck(model, cloud, 7);
  const auto report = model_gradcheck(model, cloud, 1e-5);
  bool has_dpp = false, has_adapter = false, has_router = false, has_ln = false, has_head = false;
  for (const auto& [name, err] : report.max_rel_err) {
    require(err < 1e-4, name + " failed: rel err " + std::to_string(err));
    has_dpp = has_dpp || name.find(".dpp.") != std::string::npos;
    has_adapter = has_adapter || name.find(".adapter.") != std::string::npos;
    has_router = has_router || name.find(".router.") != std::string::npos;
    has_ln = has_ln || name.find(".ln.") != std::string::npos;
    has_head = has_head || name.rfind("head.", 0) == 0;
  }
  require(has_dpp && has_adapter && has_router && has_ln && has_head,
          "gradcheck did not cover all required parameter kinds");
  require(seconds_since(t0) < 60.0, "gradient check exceeded 60 s");
}

void criterion_8_frozen_backbone() {
  Experiment& exp = experiment();
  const std::string before = "/tmp/ptpa_accept_backbone_before.ptpk";
  const std::string after = "/tmp/ptpa_accept_backbone_after.ptpk";
  save_checkpoint(exp.pretrained.params, before, [&](const ad::Parameter& p) {
    return exp.pretrained.is_backbone_param(p.name);
  });

  Model model = exp.finetuned(InsertionStrategy::LastBlockPerStage, 1, /*steps=*/50);
  save_checkpoint(model.params, after,
                  [&](const ad::Parameter& p) { return model.is_backbone_param(p.name); });
  const std::string a = slurp(before);
  const std::string b = slurp(after);
  require(!a.empty() && a == b, "backbone blob changed during fine-tuning");
}

void criterion_9_parameter_budget() {
  // Paper-proportional widths: C_d = C/16, K = [4,4,2]. The spec's router
  // width rule (H = C/2) forces the deeper census stages; see the ledger.
  BackboneConfig bb;
  bb.order_bits = 10;
  bb.stages = {
      {32, 4, 16, 2, 32},
      {64, 6, 16, 2, 16},
      {128, 10, 16, 2, 8},
  };
  PeftConfig peft = experiment_peft(InsertionStrategy::LastBlockPerStage);
  peft.hidden_ratio = 16;
  Model model = Model::build(bb, peft, 1, true);

  const Index census = closed_form_trainable_census(bb, peft);
  const Index trainable = model.params.trainable_size();
  const Index total = model.params.total_size();
  require(trainable == census, "registry count " + std::to_string(trainable) +
                                   " != closed-form census " + std::to_string(census));
  const Scalar ratio = static_cast<Scalar>(trainable) / static_cast<Scalar>(total);
  std::printf("        budget: %lld trainable / %lld total = %.3f%%\n",
              static_cast<long long>(trainable), static_cast<long long>(total), 100.0 * ratio);
  require(ratio < 0.02, "trainable ratio " + std::to_string(ratio) + " is not < 2%");
}

void criterion_10_directional_transfer() {
  const auto t0 = std::chrono::steady_clock::now();
  Experiment& exp = experiment();
  Scalar lin = 0, ada = 0, tpa = 0;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    const Scalar l =
        evaluate(exp.finetuned(InsertionStrategy::None, seed, 1000), exp.eval_scenes, 1).miou;
    const Scalar a = evaluate(exp.finetuned(InsertionStrategy::AdaptersOnly, seed, 1000),
                              exp.eval_scenes, 1)
                         .miou;
    const Scalar t = evaluate(exp.finetuned(InsertionStrategy::LastBlockPerStage, seed, 1000),
                              exp.eval_scenes, 1)
                         .miou;
    std::printf("        seed %llu: linear %.4f, adapters-only %.4f, dynamic %.4f\n",
                static_cast<unsigned long long>(seed), l, a, t);
    lin += l;
    ada += a;
    tpa += t;
  }
  lin /= 3.0;
  ada /= 3.0;
  tpa /= 3.0;
  std::printf("        transfer mIoU: linear %.4f, adapters-only %.4f, dynamic %.4f (%.0f s)\n",
              lin, ada, tpa, seconds_since(t0));
  require(tpa >= lin + 0.02, "dynamic overlay does not beat linear probing by 2.0 points");
  require(tpa >= ada, "dynamic overlay does not match the static-adapter-only configuration");
  require(seconds_since(t0) < 600.0, "transfer experiment exceeded 10 minutes");
}

void criterion_11_weight_similarity() {
  Experiment& exp = experiment();
  Model model = exp.finetuned(InsertionStrategy::LastBlockPerStage, 4, /*steps=*/300);

  ForwardCapture capture;
  capture.stage = 2;
  model.logits(exp.eval_scenes[0], &capture);
  require(capture.filled, "no dynamic site captured at stage 2");
  const MatrixX& w = capture.weights;
  const Index m = w.rows();
  require(m >= 3, "too few groups for an off-diagonal spread");
  MatrixX sim(m, m);
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < m; ++j) {
      const Scalar ni = w.row(i).norm(), nj = w.row(j).norm();
      sim(i, j) = (ni == 0.0 || nj == 0.0) ? 0.0 : w.row(i).dot(w.row(j)) / (ni * nj);
    }
  }
  Scalar off_min = 2.0, off_max = -2.0;
  for (Index i = 0; i < m; ++i) {
    require(std::abs(sim(i, i) - 1.0) < 1e-9, "similarity diagonal is not 1");
    for (Index j = 0; j < m; ++j) {
      require(sim(i, j) == sim(j, i), "similarity matrix is not symmetric");
      if (i != j) {
        off_min = std::min(off_min, sim(i, j));
        off_max = std::max(off_max, sim(i, j));
      }
    }
  }
  require(off_max - off_min > 0.0, "off-diagonal similarities are constant");
}

void criterion_12_determinism() {
  Experiment& exp = experiment();
  const std::string a = "/tmp/ptpa_accept_det_a.ptpk";
  const std::string b = "/tmp/ptpa_accept_det_b.ptpk";
  Model m1 = exp.finetuned(InsertionStrategy::LastBlockPerStage, 7, /*steps=*/60);
  save_checkpoint(m1.params, a);
  Model m2 = exp.finetuned(InsertionStrategy::LastBlockPerStage, 7, /*steps=*/60);
  save_checkpoint(m2.params, b);
  const std::string ba = slurp(a), bb = slurp(b);
  require(!ba.empty() && ba == bb, "identical train runs produced different checkpoints");
}

}  // namespace

int main() {
  struct Entry {
    int id;
    const char* name;
    std::function<void()> run;
  };
  const std::vector<Entry> criteria = {
      {1, "space-filling-curve exhaustive bijection and adjacency", criterion_1_sfc_exhaustive},
      {2, "serialize/group/ungroup bit-exact round trip", criterion_2_round_trip},
      {3, "routing rows are stochastic", criterion_3_routing_normalization},
      {4, "K=1 degeneracy equals a static adapter", criterion_4_degeneracy},
      {5, "fresh overlay and s=0 are exact identities", criterion_5_identity_at_init},
      {6, "padded slots are inert downstream", criterion_6_padding_invariance},
      {7, "finite-difference gradient check", criterion_7_gradcheck},
      {8, "frozen backbone blob is byte-identical after fine-tuning", criterion_8_frozen_backbone},
      {9, "trainable parameter budget below 2%", criterion_9_parameter_budget},
      {10, "directional transfer ordering", criterion_10_directional_transfer},
      {11, "dynamic-weight similarity matrix", criterion_11_weight_similarity},
      {12, "fine-tuning is bit-deterministic", criterion_12_determinism},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run();
      std::printf("[PASS] criterion %2d: %s (%.1f s)\n", c.id, c.name, seconds_since(t0));
    } catch (const std::exception& e) {
      ++failures;
      std::printf("[FAIL] criterion %2d: %s: %s\n", c.id, c.name, e.what());
    }
    std::fflush(stdout);
  }
  if (failures == 0) {
    std::printf("all 12 acceptance criteria passed\n");
  } else {
    std::printf("%d acceptance criteria FAILED\n", failures);
  }
  return failures == 0 ? 0 : 1;
}
