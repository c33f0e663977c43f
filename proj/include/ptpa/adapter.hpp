#pragma once

#include <string>
#include <vector>

#include "ptpa/autodiff.hpp"

namespace ptpa {

struct AdapterOptions {
  int hidden = 16;     // C_d
  Scalar scale = 1.0;  // s_a
};

/// Static bottleneck adapter: x + s_a * (ReLU(LN(x) down) up + b). Owns its
/// layernorm; the up projection is zero-initialized so a fresh adapter is the
/// identity map.
struct StaticAdapter {
  ad::Parameter* ln_gamma = nullptr;
  ad::Parameter* ln_beta = nullptr;
  ad::Parameter* down = nullptr;     // {C, C_d}
  ad::Parameter* up = nullptr;       // {C_d, C}, zero-init
  ad::Parameter* up_bias = nullptr;  // {C}, zero-init
  int channels = 0;
  int hidden = 0;
  Scalar scale = 1.0;
};

StaticAdapter make_static_adapter(ad::ParameterStore& store, const std::string& prefix,
                                  int channels, const AdapterOptions& opts, Rng& rng);

ad::Var adapter_branch_t(ad::Tape& tape, ad::Var x, const StaticAdapter& a);
ad::Var adapter_forward_t(ad::Tape& tape, ad::Var x, const StaticAdapter& a);
MatrixX adapter_forward(const MatrixX& x, const StaticAdapter& a);

// ---------------------------------------------------------------------------
// Insertion planning
// ---------------------------------------------------------------------------

enum class BlockTag { None, Adapter, Dpp };

/// The named strategies tag dynamic sites among the blocks; None and
/// AdaptersOnly are the baseline overlays (linear probing keeps every block
/// bare; AdaptersOnly is the purely static configuration).
enum class InsertionStrategy {
  None,
  AdaptersOnly,
  Dense,
  EveryTwo,
  EveryThree,
  LastBlockOnly,
  FirstBlockPerStage,
  LastBlockPerStage,  // default
};

InsertionStrategy strategy_from_string(const std::string& name);
std::string to_string(InsertionStrategy strategy);
BlockTag tag_from_string(const std::string& name);
std::string to_string(BlockTag tag);

struct InsertionPlan {
  InsertionStrategy strategy = InsertionStrategy::LastBlockPerStage;
  std::vector<std::vector<BlockTag>> tags;  // per stage, per block

  Index block_count() const;
  Index dpp_count() const;
  Index adapter_count() const;
};

InsertionPlan build_insertion_plan(const std::vector<int>& blocks_per_stage,
                                   InsertionStrategy strategy);

/// Same, then replaces the tag row of any stage with a non-empty override
/// (which must list one tag per block of that stage).
InsertionPlan build_insertion_plan(const std::vector<int>& blocks_per_stage,
                                   InsertionStrategy strategy,
                                   const std::vector<std::vector<BlockTag>>& stage_overrides);

}  // namespace ptpa
