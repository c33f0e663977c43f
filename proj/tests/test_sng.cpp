#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <numeric>

#include "ptpa/sng.hpp"

using namespace ptpa;
using namespace ptpa::sng;

namespace {

MatrixX random_matrix(Rng& rng, Index r, Index c, Scalar lo = -1.0, Scalar hi = 1.0) {
  MatrixX m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

MatrixX random_coords(Rng& rng, Index n) { return random_matrix(rng, n, 3, 0.0, 4.0); }

// Max pairwise L1 grid distance within each group, averaged over groups.
Scalar mean_group_diameter(const std::vector<sfc::GridCoord>& cells,
                           const std::vector<Index>& order, const GroupPlan& plan) {
  Scalar total = 0.0;
  for (Index g = 0; g < plan.group_count; ++g) {
    Scalar diam = 0.0;
    const Index begin = g * plan.capacity;
    const Index cnt = plan.count(g);
    for (Index a = 0; a < cnt; ++a) {
      for (Index b = a + 1; b < cnt; ++b) {
        const auto& ca = cells[static_cast<std::size_t>(order[static_cast<std::size_t>(begin + a)])];
        const auto& cb = cells[static_cast<std::size_t>(order[static_cast<std::size_t>(begin + b)])];
        const Scalar d = std::abs(static_cast<Scalar>(ca.x) - static_cast<Scalar>(cb.x)) +
                         std::abs(static_cast<Scalar>(ca.y) - static_cast<Scalar>(cb.y)) +
                         std::abs(static_cast<Scalar>(ca.z) - static_cast<Scalar>(cb.z));
        diam = std::max(diam, d);
      }
    }
    total += diam;
  }
  return total / static_cast<Scalar>(plan.group_count);
}

}  // namespace

TEST_CASE("ceil partition arithmetic") {
  GroupPlan p = plan_groups(10, 3);
  CHECK(p.capacity == 4);
  CHECK(p.group_count == 3);
  CHECK(p.count(0) == 4);
  CHECK(p.count(1) == 4);
  CHECK(p.count(2) == 2);  // two padded slots in group 3

  GroupPlan q = plan_groups(4, 4);
  CHECK(q.capacity == 1);
  CHECK(q.group_count == 4);
  CHECK(q.padded_rows() == 4);  // no padding

  // Requesting more groups than the ceil partition can fill drops the empty
  // trailing chunks; every remaining group is non-empty.
  GroupPlan r = plan_groups(9, 4);
  CHECK(r.capacity == 3);
  CHECK(r.group_count == 3);
  for (Index g = 0; g < r.group_count; ++g) CHECK(r.count(g) >= 1);

  CHECK_THROWS_WITH_AS(plan_groups(0, 3), doctest::Contains("empty point cloud"), Error);
  CHECK_THROWS_AS(plan_groups(5, 0), Error);

  GroupPlan s = plan_groups_by_size(10, 4);
  CHECK(s.group_count == 3);  // m = ceil(N / N_pts)
  CHECK(s.capacity == 4);
}

TEST_CASE("stage schedules") {
  SngConfig cfg;
  cfg.group_count_stage1 = 200;
  CHECK(group_count_for_stage(cfg, 1) == 200);
  CHECK(group_count_for_stage(cfg, 2) == 100);
  CHECK(group_count_for_stage(cfg, 3) == 50);
  cfg.group_count_stage1 = 1;
  CHECK(group_count_for_stage(cfg, 5) == 1);

  SngConfig bits;
  CHECK(order_bits_for_stage(bits, 1) == 10);
  CHECK(order_bits_for_stage(bits, 3) == 8);

  CHECK(curve_for_site(bits, 0).is_hilbert());
  CHECK(curve_for_site(bits, 4).is_hilbert());  // schedule cycles with period 4
  CHECK_FALSE(curve_for_site(bits, 2).is_hilbert());
}

TEST_CASE("single-group forward is the serialized input under identity norm") {
  // Rows pre-normalized to zero mean / unit variance so that layernorm with
  // gamma=1, beta=0 reproduces them (up to the eps in the denominator).
  Rng rng(3);
  const Index n = 7, c = 8;
  MatrixX x = random_matrix(rng, n, c);
  for (Index i = 0; i < n; ++i) {
    RowVectorX row = x.row(i);
    const Scalar mu = row.mean();
    const Scalar sd = std::sqrt((row.array() - mu).square().sum() / static_cast<Scalar>(c));
    x.row(i) = ((row.array() - mu) / sd).matrix();
  }
  MatrixX coords = random_coords(rng, n);
  SngConfig cfg;
  cfg.group_count_stage1 = 1;
  GroupedTokens g = sng_forward(x, coords, cfg, 1, 0, VectorX::Ones(c), VectorX::Zero(c));
  CHECK(g.plan.group_count == 1);
  for (Index k = 0; k < n; ++k) {
    const Index src = g.order.perm[static_cast<std::size_t>(k)];
    CHECK(g.values.row(k).isApprox(x.row(src), 1e-4));
  }
}

TEST_CASE("round-trip identity, bit-exact") {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(500));
    const Index m = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    const Index c = 1 + static_cast<Index>(rng.below(16));
    MatrixX x = random_matrix(rng, n, c);
    MatrixX coords = random_coords(rng, n);
    const auto order = sfc::serialize(coords, sfc::CurveKind::hilbert(), 10);
    GroupedTokens g = sng_group(x, order, plan_groups(n, m));
    MatrixX back = sng_inverse(g);
    REQUIRE(back.rows() == n);
    REQUIRE(std::memcmp(back.data(), x.data(), sizeof(Scalar) * static_cast<std::size_t>(n * c)) == 0);
  }
}

TEST_CASE("m=1 inverse is the inverse-permutation gather") {
  Rng rng(9);
  const Index n = 23;
  MatrixX x = random_matrix(rng, n, 4);
  MatrixX coords = random_coords(rng, n);
  const auto order = sfc::serialize(coords, sfc::CurveKind::zorder(), 10);
  GroupedTokens g = sng_group(x, order, plan_groups(n, 1));
  MatrixX back = sng_inverse(g);
  for (Index i = 0; i < n; ++i) {
    CHECK(back.row(i) == x.row(i));
    CHECK(g.values.row(order.inv_perm[static_cast<std::size_t>(i)]) == x.row(i));
  }
}

TEST_CASE("padded slots are inert: poison never reaches the output") {
  Rng rng(11);
  const Index n = 37, m = 5, c = 6;
  MatrixX x = random_matrix(rng, n, c);
  MatrixX coords = random_coords(rng, n);
  const auto order = sfc::serialize(coords, sfc::CurveKind::hilbert(), 10);
  GroupedTokens g = sng_group(x, order, plan_groups(n, m));
  REQUIRE(g.plan.padded_rows() > n);

  MatrixX clean = sng_inverse(g);
  GroupedTokens poisoned = g;
  for (Index r = 0; r < poisoned.plan.padded_rows(); ++r) {
    if (!poisoned.mask[static_cast<std::size_t>(r)]) poisoned.values.row(r).setConstant(999.0);
  }
  MatrixX after = sng_inverse(poisoned);
  CHECK(std::memcmp(clean.data(), after.data(),
                    sizeof(Scalar) * static_cast<std::size_t>(clean.size())) == 0);
}

TEST_CASE("mask/order inconsistency is an error") {
  Rng rng(13);
  const Index n = 12;
  MatrixX x = random_matrix(rng, n, 3);
  MatrixX coords = random_coords(rng, n);
  const auto order = sfc::serialize(coords, sfc::CurveKind::zorder(), 8);
  GroupedTokens g = sng_group(x, order, plan_groups(n, 3));
  g.mask[0] = 0;
  CHECK_THROWS_WITH_AS(sng_inverse(g), doctest::Contains("mask/order"), Error);
}

TEST_CASE("group locality: hilbert beats random ordering") {
  // Mean intra-group L1 diameter under the hilbert order must be strictly
  // smaller than under a random order, for every tested seed.
  const Index n = 1000;
  const Index m = 50;
  int hilbert_wins = 0;
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed) + 100);
    MatrixX coords = random_coords(rng, n);
    const auto bbox = sfc::Bbox::of(coords);
    const auto cells = sfc::quantize(coords, 10, bbox);
    const auto order = sfc::serialize(coords, sfc::CurveKind::hilbert(), 10);
    const GroupPlan plan = plan_groups(n, m);

    std::vector<Index> random_order(static_cast<std::size_t>(n));
    std::iota(random_order.begin(), random_order.end(), Index{0});
    for (Index i = n - 1; i > 0; --i) {
      std::swap(random_order[static_cast<std::size_t>(i)],
                random_order[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
    }
    const Scalar d_hilbert = mean_group_diameter(cells, order.perm, plan);
    const Scalar d_random = mean_group_diameter(cells, random_order, plan);
    if (d_hilbert < d_random) ++hilbert_wins;
  }
  CHECK(hilbert_wins == 20);
}

TEST_CASE("permutation equivariance of group + ungroup") {
  Rng rng(17);
  const Index n = 64, c = 5;
  MatrixX coords = random_coords(rng, n);
  // Nudge any co-located cells apart: distinct codes are the precondition.
  MatrixX x = random_matrix(rng, n, c);
  const GroupPlan plan = plan_groups(n, 7);

  auto run = [&](const MatrixX& xs, const MatrixX& cs) {
    const auto order = sfc::serialize(cs, sfc::CurveKind::hilbert(), 10);
    return sng_ungroup(sng_group(xs, order, plan).values * 2.0, order, plan);
  };
  const MatrixX base = run(x, coords);

  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  for (Index i = n - 1; i > 0; --i) {
    std::swap(perm[static_cast<std::size_t>(i)],
              perm[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
  }
  MatrixX xp(n, c), cp(n, 3);
  for (Index i = 0; i < n; ++i) {
    xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
    cp.row(i) = coords.row(perm[static_cast<std::size_t>(i)]);
  }
  const MatrixX permuted = run(xp, cp);
  for (Index i = 0; i < n; ++i) {
    CHECK(permuted.row(i) == base.row(perm[static_cast<std::size_t>(i)]));
  }
}

TEST_CASE("tape-level group/ungroup matches the value-level path") {
  Rng rng(19);
  const Index n = 29, c = 4;
  MatrixX x = random_matrix(rng, n, c);
  MatrixX coords = random_coords(rng, n);
  const auto order = sfc::serialize(coords, sfc::CurveKind::zorder_permuted(), 9);
  const GroupPlan plan = plan_groups(n, 4);

  ad::Tape tape(false);
  ad::Var grouped = group_t(tape, tape.constant(x), order, plan);
  ad::Var back = ungroup_t(tape, grouped, order, plan);

  GroupedTokens g = sng_group(x, order, plan);
  CHECK(MatrixX(tape.mat(grouped)) == g.values);
  CHECK(MatrixX(tape.mat(back)) == x);
}
