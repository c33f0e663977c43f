#include "ptpa/sfc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ptpa::sfc {

namespace {

constexpr int kMaxBits = 20;  // 3*20 = 60 code bits, fits in u64

void check_bits(int order_bits) {
  if (order_bits < 1 || order_bits > kMaxBits) {
    throw Error("order_bits must be in [1, " + std::to_string(kMaxBits) + "], got " +
                std::to_string(order_bits));
  }
}

void check_coord(const GridCoord& c, int order_bits) {
  const std::uint32_t limit = 1u << order_bits;
  if (c.x >= limit || c.y >= limit || c.z >= limit) {
    throw Error("coordinate out of range for order_bits=" + std::to_string(order_bits));
  }
}

void check_code(std::uint64_t code, int order_bits) {
  if (code >= (std::uint64_t{1} << (3 * order_bits))) {
    throw Error("curve code out of range for order_bits=" + std::to_string(order_bits));
  }
}

void check_perm(const std::array<int, 3>& perm) {
  std::array<bool, 3> seen = {false, false, false};
  for (int a : perm) {
    if (a < 0 || a > 2 || seen[a]) throw Error("axis_perm is not a permutation of {0,1,2}");
    seen[a] = true;
  }
}

// Skilling's transpose form: the Hilbert index is carried as b-bit words
// X[0..2]; word 0 supplies the most significant bit of each 3-bit level.
void axes_to_transpose(std::uint32_t* X, int b) {
  std::uint32_t M = 1u << (b - 1), P, Q, t;
  for (Q = M; Q > 1; Q >>= 1) {
    P = Q - 1;
    for (int i = 0; i < 3; i++) {
      if (X[i] & Q) {
        X[0] ^= P;
      } else {
        t = (X[0] ^ X[i]) & P;
        X[0] ^= t;
        X[i] ^= t;
      }
    }
  }
  for (int i = 1; i < 3; i++) X[i] ^= X[i - 1];
  t = 0;
  for (Q = M; Q > 1; Q >>= 1) {
    if (X[2] & Q) t ^= Q - 1;
  }
  for (int i = 0; i < 3; i++) X[i] ^= t;
}

void transpose_to_axes(std::uint32_t* X, int b) {
  std::uint32_t N = 2u << (b - 1), P, Q, t;
  t = X[2] >> 1;
  for (int i = 2; i > 0; i--) X[i] ^= X[i - 1];
  X[0] ^= t;
  for (Q = 2; Q != N; Q <<= 1) {
    P = Q - 1;
    for (int i = 2; i >= 0; i--) {
      if (X[i] & Q) {
        X[0] ^= P;
      } else {
        t = (X[0] ^ X[i]) & P;
        X[0] ^= t;
        X[i] ^= t;
      }
    }
  }
}

GridCoord apply_perm(const GridCoord& c, const std::array<int, 3>& perm) {
  const std::uint32_t in[3] = {c.x, c.y, c.z};
  return {in[perm[0]], in[perm[1]], in[perm[2]]};
}

}  // namespace

CurveKind CurveKind::zorder_permuted(std::array<int, 3> perm) {
  check_perm(perm);
  return {CurveVariant::ZorderPermuted, perm};
}

CurveKind CurveKind::hilbert_permuted(std::array<int, 3> perm) {
  check_perm(perm);
  return {CurveVariant::HilbertPermuted, perm};
}

std::string to_string(const CurveKind& curve) {
  switch (curve.variant) {
    case CurveVariant::Zorder: return "zorder";
    case CurveVariant::ZorderPermuted: return "zorder-permuted";
    case CurveVariant::Hilbert: return "hilbert";
    case CurveVariant::HilbertPermuted: return "hilbert-permuted";
  }
  throw Error("unreachable curve variant");
}

CurveKind curve_from_string(const std::string& name) {
  if (name == "zorder") return CurveKind::zorder();
  if (name == "zorder-permuted") return CurveKind::zorder_permuted();
  if (name == "hilbert") return CurveKind::hilbert();
  if (name == "hilbert-permuted") return CurveKind::hilbert_permuted();
  throw ConfigError("unknown curve \"" + name +
                    "\" (expected zorder, zorder-permuted, hilbert, hilbert-permuted)");
}

Bbox Bbox::of(const MatrixX& coords) {
  if (coords.rows() == 0 || coords.cols() != 3) throw Error("bbox requires an N x 3 matrix, N >= 1");
  Bbox b;
  b.min = coords.colwise().minCoeff().transpose();
  b.max = coords.colwise().maxCoeff().transpose();
  return b;
}

std::vector<GridCoord> quantize(const MatrixX& coords, int order_bits, const Bbox& bbox) {
  check_bits(order_bits);
  if (coords.cols() != 3) throw Error("quantize expects N x 3 coordinates");
  const Scalar cells = static_cast<Scalar>(std::uint64_t{1} << order_bits);
  const std::uint32_t hi = (1u << order_bits) - 1;
  Vector3 extent = bbox.max - bbox.min;

  std::vector<GridCoord> out(static_cast<std::size_t>(coords.rows()));
  for (Index i = 0; i < coords.rows(); ++i) {
    std::uint32_t q[3];
    for (int a = 0; a < 3; ++a) {
      const Scalar v = coords(i, a);
      if (!std::isfinite(v)) {
        throw Error("invalid coordinate at row " + std::to_string(i));
      }
      if (extent[a] <= 0.0) {
        q[a] = 0;
        continue;
      }
      Scalar t = std::floor((v - bbox.min[a]) / extent[a] * cells);
      if (t < 0.0) t = 0.0;
      std::uint32_t cell = static_cast<std::uint32_t>(t);
      q[a] = std::min(cell, hi);
    }
    out[i] = {q[0], q[1], q[2]};
  }
  return out;
}

std::uint64_t morton_encode(const GridCoord& c, int order_bits) {
  check_bits(order_bits);
  check_coord(c, order_bits);
  std::uint64_t code = 0;
  for (int j = 0; j < order_bits; ++j) {
    code |= (std::uint64_t{(c.x >> j) & 1u}) << (3 * j);
    code |= (std::uint64_t{(c.y >> j) & 1u}) << (3 * j + 1);
    code |= (std::uint64_t{(c.z >> j) & 1u}) << (3 * j + 2);
  }
  return code;
}

GridCoord morton_decode(std::uint64_t code, int order_bits) {
  check_bits(order_bits);
  check_code(code, order_bits);
  GridCoord c;
  for (int j = 0; j < order_bits; ++j) {
    c.x |= static_cast<std::uint32_t>((code >> (3 * j)) & 1u) << j;
    c.y |= static_cast<std::uint32_t>((code >> (3 * j + 1)) & 1u) << j;
    c.z |= static_cast<std::uint32_t>((code >> (3 * j + 2)) & 1u) << j;
  }
  return c;
}

std::uint64_t hilbert_encode(const GridCoord& c, int order_bits) {
  check_bits(order_bits);
  check_coord(c, order_bits);
  std::uint32_t X[3] = {c.x, c.y, c.z};
  axes_to_transpose(X, order_bits);
  // Interleave transpose words, X[0] contributing the MSB of each level.
  std::uint64_t code = 0;
  for (int j = 0; j < order_bits; ++j) {
    code |= (std::uint64_t{(X[0] >> j) & 1u}) << (3 * j + 2);
    code |= (std::uint64_t{(X[1] >> j) & 1u}) << (3 * j + 1);
    code |= (std::uint64_t{(X[2] >> j) & 1u}) << (3 * j);
  }
  return code;
}

GridCoord hilbert_decode(std::uint64_t code, int order_bits) {
  check_bits(order_bits);
  check_code(code, order_bits);
  std::uint32_t X[3] = {0, 0, 0};
  for (int j = 0; j < order_bits; ++j) {
    X[0] |= static_cast<std::uint32_t>((code >> (3 * j + 2)) & 1u) << j;
    X[1] |= static_cast<std::uint32_t>((code >> (3 * j + 1)) & 1u) << j;
    X[2] |= static_cast<std::uint32_t>((code >> (3 * j)) & 1u) << j;
  }
  transpose_to_axes(X, order_bits);
  return {X[0], X[1], X[2]};
}

std::uint64_t curve_code(const GridCoord& c, const CurveKind& curve, int order_bits) {
  const GridCoord p = apply_perm(c, curve.axis_perm);
  return curve.is_hilbert() ? hilbert_encode(p, order_bits) : morton_encode(p, order_bits);
}

std::vector<std::uint64_t> point_codes(const MatrixX& coords, const CurveKind& curve,
                                       int order_bits, const Bbox& bbox) {
  const auto cells = quantize(coords, order_bits, bbox);
  std::vector<std::uint64_t> codes(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) codes[i] = curve_code(cells[i], curve, order_bits);
  return codes;
}

SerializedOrder serialize(const MatrixX& coords, const CurveKind& curve, int order_bits,
                          const Bbox& bbox) {
  if (coords.rows() < 1) throw Error("serialize requires at least one point");
  const auto codes = point_codes(coords, curve, order_bits, bbox);

  SerializedOrder order;
  order.curve = curve;
  order.order_bits = order_bits;
  order.perm.resize(codes.size());
  std::iota(order.perm.begin(), order.perm.end(), Index{0});
  // Ties on equal codes break by ascending original index.
  std::sort(order.perm.begin(), order.perm.end(), [&](Index a, Index b) {
    if (codes[static_cast<std::size_t>(a)] != codes[static_cast<std::size_t>(b)]) {
      return codes[static_cast<std::size_t>(a)] < codes[static_cast<std::size_t>(b)];
    }
    return a < b;
  });
  order.inv_perm.resize(codes.size());
  for (std::size_t k = 0; k < order.perm.size(); ++k) {
    order.inv_perm[static_cast<std::size_t>(order.perm[k])] = static_cast<Index>(k);
  }
  return order;
}

SerializedOrder serialize(const MatrixX& coords, const CurveKind& curve, int order_bits) {
  return serialize(coords, curve, order_bits, Bbox::of(coords));
}

}  // namespace ptpa::sfc
