#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ptpa/types.hpp"

namespace ptpa::sfc {

/// Integer cell on the 2^b x 2^b x 2^b serialization grid.
struct GridCoord {
  std::uint32_t x = 0, y = 0, z = 0;

  friend bool operator==(const GridCoord&, const GridCoord&) = default;
};

enum class CurveVariant { Zorder, ZorderPermuted, Hilbert, HilbertPermuted };

/// A space-filling curve choice. Permuted variants feed the base codec with
/// axes reordered by axis_perm (out axis i reads in axis axis_perm[i]).
struct CurveKind {
  CurveVariant variant = CurveVariant::Zorder;
  std::array<int, 3> axis_perm = {0, 1, 2};

  static CurveKind zorder() { return {CurveVariant::Zorder, {0, 1, 2}}; }
  static CurveKind hilbert() { return {CurveVariant::Hilbert, {0, 1, 2}}; }
  static CurveKind zorder_permuted(std::array<int, 3> perm = {1, 0, 2});
  static CurveKind hilbert_permuted(std::array<int, 3> perm = {1, 0, 2});

  bool is_hilbert() const {
    return variant == CurveVariant::Hilbert || variant == CurveVariant::HilbertPermuted;
  }
};

std::string to_string(const CurveKind& curve);
CurveKind curve_from_string(const std::string& name);

/// Total order over a point set induced by a space-filling curve.
/// perm[k] = original index of the k-th serialized token; inv_perm inverts it.
struct SerializedOrder {
  std::vector<Index> perm;
  std::vector<Index> inv_perm;
  CurveKind curve;
  int order_bits = 0;
};

struct Bbox {
  Vector3 min = Vector3::Zero();
  Vector3 max = Vector3::Zero();

  static Bbox of(const MatrixX& coords);
};

/// Maps real coordinates onto the integer grid: per axis
/// floor((c - min) / extent * 2^b) clamped to [0, 2^b - 1]. A degenerate axis
/// (zero extent) maps every point to cell 0 on that axis.
std::vector<GridCoord> quantize(const MatrixX& coords, int order_bits, const Bbox& bbox);

/// Bit-interleaved Z-order code; x occupies the least-significant bit of each
/// 3-bit triad, then y, then z.
std::uint64_t morton_encode(const GridCoord& c, int order_bits);
GridCoord morton_decode(std::uint64_t code, int order_bits);

/// Hilbert code with code 0 at the origin cell; consecutive codes are always
/// L1-adjacent on the grid.
std::uint64_t hilbert_encode(const GridCoord& c, int order_bits);
GridCoord hilbert_decode(std::uint64_t code, int order_bits);

/// Code of a cell under any curve variant (applies axis_perm, then the base codec).
std::uint64_t curve_code(const GridCoord& c, const CurveKind& curve, int order_bits);

/// Orders points by (curve code of quantized coordinate, original index).
SerializedOrder serialize(const MatrixX& coords, const CurveKind& curve, int order_bits);
SerializedOrder serialize(const MatrixX& coords, const CurveKind& curve, int order_bits,
                          const Bbox& bbox);

/// Curve codes of all points, in original row order (exposed for inspection).
std::vector<std::uint64_t> point_codes(const MatrixX& coords, const CurveKind& curve,
                                       int order_bits, const Bbox& bbox);

}  // namespace ptpa::sfc
