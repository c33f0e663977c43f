#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ptpa/adapter.hpp"
#include "ptpa/data.hpp"
#include "ptpa/dpp.hpp"
#include "ptpa/sng.hpp"

namespace ptpa {

struct StageSpec {
  int channels = 32;
  int blocks = 2;
  int patch = 16;   // serialized-patch attention window
  int pool = 2;     // grid coarsening factor into the next stage (power of two)
  int groups = 32;  // SNG group count for dynamic sites at this stage
};

struct BackboneConfig {
  int in_channels = 6;
  int num_classes = 6;
  int order_bits = 10;  // stage-1 quantization bits; drops by log2(pool) per stage
  std::vector<StageSpec> stages;

  void validate() const;
  /// 3-stage desk-scale default: C=[32,64,128], B=[2,2,2], patch 16, pool 2,
  /// groups [32,16,8].
  static BackboneConfig toy_default();
};

struct PeftConfig {
  InsertionStrategy strategy = InsertionStrategy::LastBlockPerStage;
  std::vector<int> bases = {4, 4, 2};  // per-stage K (last entry repeats if short)
  int hidden_dim = 0;                  // explicit C_d; 0 derives from hidden_ratio
  int hidden_ratio = 8;                // C_d = max(2, C / hidden_ratio)
  Scalar temperature = 4.0;
  Scalar scale = 1.0;
  sng::GroupMode group_mode = sng::GroupMode::FixedGroupCount;
  int points_per_group = 200;
  std::vector<sfc::CurveKind> curves = {
      sfc::CurveKind::hilbert(), sfc::CurveKind::hilbert_permuted(), sfc::CurveKind::zorder(),
      sfc::CurveKind::zorder_permuted()};
  DpLayerPos position = DpLayerPos::Down;
  int router_hidden = 0;  // explicit router width H; 0 applies max(K, C/2)
  /// Per-stage tag overrides on top of the strategy (empty row = no override).
  std::vector<std::vector<BlockTag>> stage_overrides;

  int hidden_for(int channels) const;
  int bases_for(std::size_t stage) const;
  int router_hidden_for(int channels, int bases) const;
  const sfc::CurveKind& curve_for_site(int site_index) const;
};

InsertionPlan plan_for_model(const BackboneConfig& bb, const PeftConfig& peft);

/// Surjection of finer-level points onto coarser grid cells, with centroids.
struct PoolMap {
  std::vector<Index> order;                       // fine rows sorted by coarse cell
  std::vector<std::pair<Index, Index>> runs;      // cell segments in sorted order
  std::vector<Index> cell_of_fine;                // fine row -> coarse cell index
  MatrixX coarse_coords;                          // cell centroids
  std::vector<sfc::GridCoord> coarse_cells;

  Index coarse_count() const { return static_cast<Index>(runs.size()); }
};

PoolMap make_pool_map(const std::vector<sfc::GridCoord>& fine_cells, const MatrixX& fine_coords,
                      int factor);

struct GridPoolResult {
  MatrixX features;
  MatrixX coords;
  PoolMap map;
};

/// Mean-pools points that share a coarsened grid cell; coords become centroids.
GridPoolResult grid_pool(const MatrixX& features, const MatrixX& coords, int factor,
                         int order_bits = 10);

struct BlockParams {
  ad::Parameter *ln1_gamma, *ln1_beta;
  ad::Parameter *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  ad::Parameter *ln2_gamma, *ln2_beta;
  ad::Parameter *ffn_w1, *ffn_b1, *ffn_w2, *ffn_b2;
};

struct BlockOverlay {
  BlockTag tag = BlockTag::None;
  std::optional<StaticAdapter> adapter;
  std::optional<DppSite> dpp;
  int site_index = -1;  // running index over dynamic sites, drives the curve schedule
};

struct StageModel {
  StageSpec spec;
  std::vector<BlockParams> blocks;
  std::vector<BlockOverlay> overlay;
  ad::Parameter* lift_w = nullptr;  // widen to the next stage (absent on the last)
  ad::Parameter* lift_b = nullptr;
};

/// Instrumentation hook: captures the grouped tokens, routing coefficients,
/// and synthesized weights of the dynamic site at one stage during a forward.
struct ForwardCapture {
  int stage = 1;  // 1-based
  bool filled = false;
  sng::GroupedTokens grouped;
  MatrixX routing;
  MatrixX weights;  // m x (d_in * d_out), flattened per group
};

/// Frozen multi-stage point encoder with a PEFT overlay and a linear head.
/// Trainable set = overlay + head; everything else is frozen after
/// pretraining.
class Model {
 public:
  BackboneConfig backbone;
  PeftConfig peft;
  InsertionPlan plan;
  ad::ParameterStore params;

  ad::Parameter* embed_w = nullptr;
  ad::Parameter* embed_b = nullptr;
  ad::Parameter* head_w = nullptr;
  ad::Parameter* head_b = nullptr;
  std::vector<StageModel> stages;

  static Model build(const BackboneConfig& bb, const PeftConfig& peft, std::uint64_t seed,
                     bool frozen_backbone);

  /// Backbone = embedding, blocks, lifts; overlay and head are excluded.
  bool is_backbone_param(const std::string& name) const;
  void freeze_backbone();

  ad::Var forward_t(ad::Tape& tape, const data::PointCloud& cloud,
                    ForwardCapture* capture = nullptr) const;
  MatrixX logits(const data::PointCloud& cloud, ForwardCapture* capture = nullptr) const;
  std::vector<int> predict(const data::PointCloud& cloud) const;
};

/// Closed-form count of trainable parameters (overlay sites + head) for a
/// given configuration; the model registry must match it exactly.
Index closed_form_trainable_census(const BackboneConfig& bb, const PeftConfig& peft);

}  // namespace ptpa
