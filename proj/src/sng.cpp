#include "ptpa/sng.hpp"

#include <cmath>

namespace ptpa::sng {

int group_count_for_stage(const SngConfig& cfg, int stage) {
  if (stage < 1) throw Error("stage index is 1-based");
  const Scalar m = static_cast<Scalar>(cfg.group_count_stage1) / std::pow(2.0, stage - 1);
  return std::max(1, static_cast<int>(std::llround(m)));
}

int order_bits_for_stage(const SngConfig& cfg, int stage) {
  if (stage < 1) throw Error("stage index is 1-based");
  return std::max(2, cfg.order_bits_stage1 - cfg.order_bits_step * (stage - 1));
}

const sfc::CurveKind& curve_for_site(const SngConfig& cfg, int site_index) {
  if (cfg.curve_schedule.empty()) throw Error("empty curve schedule");
  return cfg.curve_schedule[static_cast<std::size_t>(site_index) % cfg.curve_schedule.size()];
}

Index GroupPlan::count(Index g) const {
  if (g < 0 || g >= group_count) throw Error("group index out of range");
  return std::min(capacity, total - g * capacity);
}

std::vector<std::pair<Index, Index>> GroupPlan::real_segments() const {
  std::vector<std::pair<Index, Index>> segs;
  segs.reserve(static_cast<std::size_t>(group_count));
  for (Index g = 0; g < group_count; ++g) {
    segs.push_back({g * capacity, g * capacity + count(g)});
  }
  return segs;
}

GroupPlan plan_groups(Index n_tokens, Index requested_groups) {
  if (n_tokens < 1) throw Error("empty point cloud");
  if (requested_groups < 1) throw Error("group count must be >= 1");
  GroupPlan plan;
  plan.total = n_tokens;
  plan.capacity = (n_tokens + requested_groups - 1) / requested_groups;
  plan.group_count = (n_tokens + plan.capacity - 1) / plan.capacity;
  return plan;
}

GroupPlan plan_groups_by_size(Index n_tokens, Index points_per_group) {
  if (n_tokens < 1) throw Error("empty point cloud");
  if (points_per_group < 1) throw Error("points per group must be >= 1");
  GroupPlan plan;
  plan.total = n_tokens;
  plan.capacity = points_per_group;
  plan.group_count = (n_tokens + points_per_group - 1) / points_per_group;
  return plan;
}

GroupPlan plan_for(const SngConfig& cfg, Index n_tokens, int stage) {
  if (cfg.mode == GroupMode::FixedPointsPerGroup) {
    return plan_groups_by_size(n_tokens, cfg.points_per_group);
  }
  return plan_groups(n_tokens, group_count_for_stage(cfg, stage));
}

void GroupedTokens::check_consistent() const {
  if (values.rows() != plan.padded_rows()) throw Error("grouped values row count mismatch");
  if (static_cast<Index>(mask.size()) != plan.padded_rows()) throw Error("mask size mismatch");
  Index real = 0;
  for (auto m : mask) real += m ? 1 : 0;
  if (real != plan.total || static_cast<Index>(order.perm.size()) != plan.total) {
    throw Error("mask/order inconsistency: " + std::to_string(real) + " real slots vs " +
                std::to_string(order.perm.size()) + " serialized points");
  }
}

GroupedTokens sng_group(const MatrixX& tokens, const sfc::SerializedOrder& order,
                        const GroupPlan& plan) {
  if (tokens.rows() != plan.total || tokens.rows() != static_cast<Index>(order.perm.size())) {
    throw Error("token count does not match serialization order");
  }
  GroupedTokens g;
  g.order = order;
  g.plan = plan;
  g.values = MatrixX::Zero(plan.padded_rows(), tokens.cols());
  // Contiguous chunks of the serialized sequence: flat row k holds serialized
  // token k, so padding occupies exactly the tail rows.
  for (Index k = 0; k < plan.total; ++k) {
    g.values.row(k) = tokens.row(order.perm[static_cast<std::size_t>(k)]);
  }
  g.mask.assign(static_cast<std::size_t>(plan.padded_rows()), 0);
  for (Index k = 0; k < plan.total; ++k) g.mask[static_cast<std::size_t>(k)] = 1;
  return g;
}

GroupedTokens sng_forward(const MatrixX& tokens, const MatrixX& coords, const SngConfig& cfg,
                          int stage, int site_index, const VectorX& gamma, const VectorX& beta) {
  if (tokens.rows() < 1) throw Error("empty point cloud");
  if (tokens.rows() != coords.rows()) throw Error("tokens and coords are not row-aligned");
  ad::Tape tape(false);
  ad::Var x = tape.constant(tokens);
  ad::Var normed = tape.layernorm(x, tape.leaf(ad::Tensor::from_vec(gamma)),
                                  tape.leaf(ad::Tensor::from_vec(beta)));
  const auto order =
      sfc::serialize(coords, curve_for_site(cfg, site_index), order_bits_for_stage(cfg, stage));
  return sng_group(MatrixX(tape.mat(normed)), order, plan_for(cfg, tokens.rows(), stage));
}

MatrixX sng_ungroup(const MatrixX& grouped_values, const sfc::SerializedOrder& order,
                    const GroupPlan& plan) {
  if (grouped_values.rows() != plan.padded_rows()) {
    throw Error("grouped values row count mismatch");
  }
  MatrixX out(plan.total, grouped_values.cols());
  for (Index i = 0; i < plan.total; ++i) {
    out.row(i) = grouped_values.row(order.inv_perm[static_cast<std::size_t>(i)]);
  }
  return out;
}

MatrixX sng_inverse(const GroupedTokens& g) {
  g.check_consistent();
  return sng_ungroup(g.values, g.order, g.plan);
}

ad::Var group_t(ad::Tape& tape, ad::Var x, const sfc::SerializedOrder& order,
                const GroupPlan& plan) {
  if (tape.value(x).rows() != plan.total) throw Error("token count does not match group plan");
  ad::Var serialized = tape.select_rows(x, order.perm);
  return tape.pad_rows(serialized, plan.padded_rows());
}

ad::Var ungroup_t(ad::Tape& tape, ad::Var grouped, const sfc::SerializedOrder& order,
                  const GroupPlan& plan) {
  if (tape.value(grouped).rows() != plan.padded_rows()) {
    throw Error("grouped row count does not match group plan");
  }
  return tape.select_rows(grouped, order.inv_perm);
}

}  // namespace ptpa::sng
