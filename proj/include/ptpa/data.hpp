#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ptpa/types.hpp"

namespace ptpa::data {

/// Raw scene: per-point coordinates (meters), feature channels, and integer
/// labels (-1 = unlabeled).
struct PointCloud {
  MatrixX coords;              // N x 3
  MatrixX features;            // N x C_in
  std::vector<int> labels;     // N, in [0, num_classes) or -1

  Index size() const { return coords.rows(); }
  void validate() const;
};

enum class PrimitiveKind { Floor, Wall, Box, Sphere, Cylinder };

PrimitiveKind primitive_from_string(const std::string& name);
std::string to_string(PrimitiveKind kind);

/// One semantic class: a surface primitive, its target share of the points,
/// a palette color, and per-scene instance/size ranges.
struct ClassRecipe {
  std::string name;
  PrimitiveKind kind = PrimitiveKind::Box;
  Scalar frequency = 0.0;      // target share of scene points
  Vector3 color = Vector3::Zero();
  Scalar size_min = 0.3, size_max = 0.8;
  int instances_min = 1, instances_max = 2;
};

/// Synthetic-scene recipe. Class 0 is conventionally the floor and carries the
/// dominant share of points (heavily imbalanced by design).
struct SceneSpec {
  Vector3 room = Vector3(4.0, 4.0, 2.5);
  std::vector<ClassRecipe> classes;   // label = index
  Scalar jitter = 0.01;               // Gaussian surface noise, meters
  Scalar color_noise = 0.05;
  Index points_min = 384;
  Index points_max = 512;
  std::uint64_t seed = 1;

  /// "Pretrain-style" distribution: palette/object mix A.
  static SceneSpec pretrain_default();
  /// "Downstream-style" distribution: shifted palette, different mix.
  static SceneSpec downstream_default();
};

PointCloud generate_scene(const SceneSpec& spec);
PointCloud generate_scene(const SceneSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Segmentation metrics
// ---------------------------------------------------------------------------

/// Rows = ground truth, columns = prediction.
struct ConfusionMatrix {
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts;

  explicit ConfusionMatrix(int num_classes = 0);
  void add(int truth, int prediction);  // ignores truth < 0
  void merge(const ConfusionMatrix& other);
  std::int64_t total() const { return counts.sum(); }
  int num_classes() const { return static_cast<int>(counts.rows()); }
};

struct Metrics {
  Scalar miou = 0.0;
  Scalar macc = 0.0;
  Scalar allacc = 0.0;
  VectorX per_class_iou;  // NaN for classes absent from ground truth
};

/// IoU_c = TP/(TP+FP+FN); means run over classes present in ground truth.
Metrics metrics(const ConfusionMatrix& cm);

// ---------------------------------------------------------------------------
// Point-cloud file I/O
// ---------------------------------------------------------------------------

/// Text format (.ptxt): header "PTPA-TEXT 1 <N> <C_in>", then one line per
/// point: x y z f1 ... fC label.
void write_ptxt(const PointCloud& cloud, const std::string& path);
PointCloud read_ptxt(const std::string& path);

/// Binary format (.ptbin), little-endian: magic "PTPA", u32 version=1, u32 N,
/// u32 C_in, then N records of (3 f64 coords, C_in f64 features, i32 label).
void write_ptbin(const PointCloud& cloud, const std::string& path);
PointCloud read_ptbin(const std::string& path);

}  // namespace ptpa::data
