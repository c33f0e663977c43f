#pragma once

#include <string>

#include "ptpa/autodiff.hpp"
#include "ptpa/sng.hpp"

namespace ptpa {

/// Which projection of the bottleneck gets dynamically synthesized weights.
/// Down is the default; Up and Both exist for ablation replay.
enum class DpLayerPos { Down, Up, Both };

DpLayerPos dplayer_from_string(const std::string& name);
std::string to_string(DpLayerPos pos);

struct DppOptions {
  int bases = 4;             // K
  int hidden = 16;           // C_d
  Scalar temperature = 4.0;  // router softmax temperature
  Scalar scale = 1.0;        // residual scale s (fixed hyperparameter)
  int router_hidden = 0;     // explicit H; 0 applies the max(K, C/2) rule
  DpLayerPos position = DpLayerPos::Down;
};

/// Router hidden width rule: max(K, C/2).
int dpp_router_hidden(int channels, int bases);

/// One dynamic-projection insertion site. Parameters live in a ParameterStore;
/// the struct only holds typed handles. At initialization the forward map is
/// exactly the identity (zero-initialized up path).
struct DppSite {
  ad::Parameter* ln_gamma = nullptr;
  ad::Parameter* ln_beta = nullptr;
  ad::Parameter* bases = nullptr;     // {K, C, C_d}, dynamic down bases (Down/Both)
  ad::Parameter* down = nullptr;      // {C, C_d}, static down (Up only)
  ad::Parameter* bases_up = nullptr;  // {K, C_d, C}, dynamic up bases (Up/Both), zero-init
  ad::Parameter* up = nullptr;        // {C_d, C}, static up (Down only), zero-init
  ad::Parameter* up_bias = nullptr;   // {C}, zero-init
  ad::Parameter* router_w1 = nullptr; // {C, H}
  ad::Parameter* router_b1 = nullptr; // {H}
  ad::Parameter* router_w2 = nullptr; // {H, K}
  ad::Parameter* router_b2 = nullptr; // {K}
  int channels = 0;
  int base_count = 0;
  int hidden = 0;
  int router_hidden = 0;
  DppOptions opts;
};

DppSite make_dpp_site(ad::ParameterStore& store, const std::string& prefix, int channels,
                      const DppOptions& opts, Rng& rng);

// --- tape-level pieces -------------------------------------------------------

/// Mask-aware average pooling of each group, then the two-layer router and the
/// temperature softmax; returns the m x K routing coefficients.
ad::Var dpp_route_t(ad::Tape& tape, ad::Var grouped, const sng::GroupPlan& plan,
                    const DppSite& site);

/// W_p = O P: per-group mixture of the base set. bases is a {K, d_in, d_out}
/// parameter leaf; result is m x (d_in*d_out), one flattened matrix per group.
ad::Var dpp_synthesize_t(ad::Tape& tape, ad::Var routing, ad::Var bases_leaf);

/// The residual branch s * phi[ReLU(ungroup(W_p^T x_g))] computed from
/// already-normalized, grouped tokens.
ad::Var dpp_branch_from_grouped_t(ad::Tape& tape, ad::Var grouped,
                                  const sfc::SerializedOrder& order, const sng::GroupPlan& plan,
                                  const DppSite& site);

/// Full site forward: x + branch(layernorm -> serialize -> group -> ...).
ad::Var dpp_forward_t(ad::Tape& tape, ad::Var x, const sfc::SerializedOrder& order,
                      const sng::GroupPlan& plan, const DppSite& site);

// --- value-level API (runs a scratch non-recording tape) ---------------------

MatrixX dpp_route(const sng::GroupedTokens& g, const DppSite& site);
MatrixX dpp_synthesize(const MatrixX& routing, const ad::Tensor& bases);
MatrixX dpp_branch_from_grouped(const sng::GroupedTokens& g, const DppSite& site);
MatrixX dpp_forward(const MatrixX& x, const sfc::SerializedOrder& order,
                    const sng::GroupPlan& plan, const DppSite& site);

/// Cosine similarity of the flattened per-group dynamic weights (m x m).
/// A zero-norm weight makes its pairs 0 by definition.
MatrixX weight_similarity(const DppSite& site, const sng::GroupedTokens& g);

/// Shannon entropy of each routing row.
VectorX routing_entropy(const MatrixX& routing);

}  // namespace ptpa
