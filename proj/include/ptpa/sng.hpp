#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "ptpa/autodiff.hpp"
#include "ptpa/sfc.hpp"
#include "ptpa/types.hpp"

namespace ptpa::sng {

enum class GroupMode { FixedGroupCount, FixedPointsPerGroup };

/// Grouping configuration. In FixedGroupCount mode the stage-1 group count is
/// halved per stage; the curve schedule cycles across insertion sites.
struct SngConfig {
  GroupMode mode = GroupMode::FixedGroupCount;
  int group_count_stage1 = 200;
  int points_per_group = 200;
  std::vector<sfc::CurveKind> curve_schedule = {
      sfc::CurveKind::hilbert(), sfc::CurveKind::hilbert_permuted(), sfc::CurveKind::zorder(),
      sfc::CurveKind::zorder_permuted()};
  int order_bits_stage1 = 10;
  int order_bits_step = 1;  // bits dropped per stage as resolution coarsens
};

/// m_i = max(1, round(m_1 / 2^(i-1))), stage 1-based.
int group_count_for_stage(const SngConfig& cfg, int stage);
int order_bits_for_stage(const SngConfig& cfg, int stage);
const sfc::CurveKind& curve_for_site(const SngConfig& cfg, int site_index);

/// Contiguous ceil-partition of a serialized sequence: capacity n = ceil(N/m),
/// every group but the last is full, trailing empty chunks are dropped (so the
/// effective group count is ceil(N/n) and no group is ever empty). In the flat
/// group-major layout all padding therefore sits at the tail.
struct GroupPlan {
  Index total = 0;        // N real tokens
  Index group_count = 0;  // effective m
  Index capacity = 0;     // n

  Index padded_rows() const { return group_count * capacity; }
  Index count(Index g) const;  // real tokens in group g (>= 1)
  /// Flat row range [begin, end) of the real tokens of each group.
  std::vector<std::pair<Index, Index>> real_segments() const;
};

GroupPlan plan_groups(Index n_tokens, Index requested_groups);
GroupPlan plan_groups_by_size(Index n_tokens, Index points_per_group);
GroupPlan plan_for(const SngConfig& cfg, Index n_tokens, int stage);

/// The m x n x C padded, masked partition of a serialized token sequence,
/// stored flat group-major as (m*n) x C with exact zeros in padded slots.
struct GroupedTokens {
  MatrixX values;
  std::vector<std::uint8_t> mask;  // m*n entries, 1 = real token
  sfc::SerializedOrder order;
  GroupPlan plan;

  Index channels() const { return values.cols(); }
  void check_consistent() const;
};

/// Serialize + partition, no normalization (the pure data path).
GroupedTokens sng_group(const MatrixX& tokens, const sfc::SerializedOrder& order,
                        const GroupPlan& plan);

/// Full forward: layernorm with the supplied affine parameters, then
/// serialize by the scheduled curve for (stage, site), then group.
GroupedTokens sng_forward(const MatrixX& tokens, const MatrixX& coords, const SngConfig& cfg,
                          int stage, int site_index, const VectorX& gamma, const VectorX& beta);

/// Drops padded slots, concatenates groups, and restores original point order.
/// Exact inverse of the group step for any channel count.
MatrixX sng_ungroup(const MatrixX& grouped_values, const sfc::SerializedOrder& order,
                    const GroupPlan& plan);
MatrixX sng_inverse(const GroupedTokens& g);

// Tape-level composition (shares the plan/order logic above).
ad::Var group_t(ad::Tape& tape, ad::Var x, const sfc::SerializedOrder& order,
                const GroupPlan& plan);
ad::Var ungroup_t(ad::Tape& tape, ad::Var grouped, const sfc::SerializedOrder& order,
                  const GroupPlan& plan);

}  // namespace ptpa::sng
