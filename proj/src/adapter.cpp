#include "ptpa/adapter.hpp"

#include <cmath>

namespace ptpa {

StaticAdapter make_static_adapter(ad::ParameterStore& store, const std::string& prefix,
                                  int channels, const AdapterOptions& opts, Rng& rng) {
  if (opts.hidden < 1) throw Error("adapter hidden dim must be >= 1");
  StaticAdapter a;
  a.channels = channels;
  a.hidden = opts.hidden;
  a.scale = opts.scale;
  const Index c = channels, cd = opts.hidden;
  const Scalar bound = 1.0 / std::sqrt(static_cast<Scalar>(c));

  a.ln_gamma = &store.add(prefix + ".ln.gamma", ad::Tensor::from_vec(VectorX::Ones(c)));
  a.ln_beta = &store.add(prefix + ".ln.beta", ad::Tensor::zeros({c}));
  ad::Tensor down = ad::Tensor::zeros({c, cd});
  for (Index i = 0; i < down.size(); ++i) down.data[i] = rng.uniform(-bound, bound);
  a.down = &store.add(prefix + ".down", std::move(down));
  a.up = &store.add(prefix + ".up", ad::Tensor::zeros({cd, c}));
  a.up_bias = &store.add(prefix + ".up_bias", ad::Tensor::zeros({c}));
  return a;
}

ad::Var adapter_branch_t(ad::Tape& tape, ad::Var x, const StaticAdapter& a) {
  ad::Var normed = tape.layernorm(x, tape.param(*a.ln_gamma), tape.param(*a.ln_beta));
  ad::Var act = tape.relu(tape.matmul(normed, tape.param(*a.down)));
  ad::Var upped = tape.add_rowvec(tape.matmul(act, tape.param(*a.up)), tape.param(*a.up_bias));
  return tape.mul_scalar(upped, a.scale);
}

ad::Var adapter_forward_t(ad::Tape& tape, ad::Var x, const StaticAdapter& a) {
  return tape.add(x, adapter_branch_t(tape, x, a));
}

MatrixX adapter_forward(const MatrixX& x, const StaticAdapter& a) {
  ad::Tape tape(false);
  return tape.mat(adapter_forward_t(tape, tape.constant(x), a));
}

InsertionStrategy strategy_from_string(const std::string& name) {
  if (name == "none") return InsertionStrategy::None;
  if (name == "adapters-only") return InsertionStrategy::AdaptersOnly;
  if (name == "dense") return InsertionStrategy::Dense;
  if (name == "every-two") return InsertionStrategy::EveryTwo;
  if (name == "every-three") return InsertionStrategy::EveryThree;
  if (name == "last-block-only") return InsertionStrategy::LastBlockOnly;
  if (name == "first-block-per-stage") return InsertionStrategy::FirstBlockPerStage;
  if (name == "last-block-per-stage") return InsertionStrategy::LastBlockPerStage;
  throw ConfigError("unknown insertion strategy \"" + name + "\"");
}

std::string to_string(InsertionStrategy strategy) {
  switch (strategy) {
    case InsertionStrategy::None: return "none";
    case InsertionStrategy::AdaptersOnly: return "adapters-only";
    case InsertionStrategy::Dense: return "dense";
    case InsertionStrategy::EveryTwo: return "every-two";
    case InsertionStrategy::EveryThree: return "every-three";
    case InsertionStrategy::LastBlockOnly: return "last-block-only";
    case InsertionStrategy::FirstBlockPerStage: return "first-block-per-stage";
    case InsertionStrategy::LastBlockPerStage: return "last-block-per-stage";
  }
  throw Error("unreachable insertion strategy");
}

BlockTag tag_from_string(const std::string& name) {
  if (name == "none") return BlockTag::None;
  if (name == "adapter") return BlockTag::Adapter;
  if (name == "dpp") return BlockTag::Dpp;
  throw ConfigError("unknown block tag \"" + name + "\" (expected none, adapter, dpp)");
}

std::string to_string(BlockTag tag) {
  switch (tag) {
    case BlockTag::None: return "none";
    case BlockTag::Adapter: return "adapter";
    case BlockTag::Dpp: return "dpp";
  }
  throw Error("unreachable block tag");
}

Index InsertionPlan::block_count() const {
  Index n = 0;
  for (const auto& s : tags) n += static_cast<Index>(s.size());
  return n;
}

Index InsertionPlan::dpp_count() const {
  Index n = 0;
  for (const auto& s : tags)
    for (BlockTag t : s) n += (t == BlockTag::Dpp) ? 1 : 0;
  return n;
}

Index InsertionPlan::adapter_count() const {
  Index n = 0;
  for (const auto& s : tags)
    for (BlockTag t : s) n += (t == BlockTag::Adapter) ? 1 : 0;
  return n;
}

InsertionPlan build_insertion_plan(const std::vector<int>& blocks_per_stage,
                                   InsertionStrategy strategy) {
  if (blocks_per_stage.empty()) throw Error("insertion plan needs at least one stage");
  for (int b : blocks_per_stage) {
    if (b < 1) throw Error("block counts must be >= 1");
  }
  InsertionPlan plan;
  plan.strategy = strategy;
  const std::size_t n_stages = blocks_per_stage.size();
  int global = 0;  // 1-based across all blocks, in network order
  for (std::size_t s = 0; s < n_stages; ++s) {
    std::vector<BlockTag> row;
    for (int b = 0; b < blocks_per_stage[s]; ++b) {
      ++global;
      const bool last_in_stage = (b == blocks_per_stage[s] - 1);
      const bool first_in_stage = (b == 0);
      const bool very_last = (s == n_stages - 1) && last_in_stage;
      bool dyn = false;
      switch (strategy) {
        case InsertionStrategy::None:
        case InsertionStrategy::AdaptersOnly: dyn = false; break;
        case InsertionStrategy::Dense: dyn = true; break;
        case InsertionStrategy::EveryTwo: dyn = (global % 2 == 0); break;
        case InsertionStrategy::EveryThree: dyn = (global % 3 == 0); break;
        case InsertionStrategy::LastBlockOnly: dyn = very_last; break;
        case InsertionStrategy::FirstBlockPerStage: dyn = first_in_stage; break;
        case InsertionStrategy::LastBlockPerStage: dyn = last_in_stage; break;
      }
      if (strategy == InsertionStrategy::None) {
        row.push_back(BlockTag::None);
      } else {
        row.push_back(dyn ? BlockTag::Dpp : BlockTag::Adapter);
      }
    }
    plan.tags.push_back(std::move(row));
  }
  return plan;
}

InsertionPlan build_insertion_plan(const std::vector<int>& blocks_per_stage,
                                   InsertionStrategy strategy,
                                   const std::vector<std::vector<BlockTag>>& stage_overrides) {
  InsertionPlan plan = build_insertion_plan(blocks_per_stage, strategy);
  if (stage_overrides.empty()) return plan;
  if (stage_overrides.size() > blocks_per_stage.size()) {
    throw ConfigError("more stage overrides than stages");
  }
  for (std::size_t s = 0; s < stage_overrides.size(); ++s) {
    if (stage_overrides[s].empty()) continue;
    if (stage_overrides[s].size() != static_cast<std::size_t>(blocks_per_stage[s])) {
      throw ConfigError("stage " + std::to_string(s + 1) + " override lists " +
                        std::to_string(stage_overrides[s].size()) + " tags for " +
                        std::to_string(blocks_per_stage[s]) + " blocks");
    }
    plan.tags[s] = stage_overrides[s];
  }
  return plan;
}

}  // namespace ptpa
