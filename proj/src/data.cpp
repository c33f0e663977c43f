#include "ptpa/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace ptpa::data {

void PointCloud::validate() const {
  const Index n = coords.rows();
  if (n < 1) throw Error("point cloud is empty");
  if (coords.cols() != 3) throw Error("coords must be N x 3");
  if (features.rows() != n) throw Error("features row count does not match coords");
  if (static_cast<Index>(labels.size()) != n) throw Error("label count does not match coords");
  if (!coords.allFinite()) throw Error("non-finite coordinates");
}

PrimitiveKind primitive_from_string(const std::string& name) {
  if (name == "floor") return PrimitiveKind::Floor;
  if (name == "wall") return PrimitiveKind::Wall;
  if (name == "box") return PrimitiveKind::Box;
  if (name == "sphere") return PrimitiveKind::Sphere;
  if (name == "cylinder") return PrimitiveKind::Cylinder;
  throw ConfigError("unknown primitive \"" + name + "\"");
}

std::string to_string(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::Floor: return "floor";
    case PrimitiveKind::Wall: return "wall";
    case PrimitiveKind::Box: return "box";
    case PrimitiveKind::Sphere: return "sphere";
    case PrimitiveKind::Cylinder: return "cylinder";
  }
  throw Error("unreachable primitive kind");
}

namespace {

ClassRecipe recipe(std::string name, PrimitiveKind kind, Scalar freq, Vector3 color,
                   Scalar smin, Scalar smax, int imin, int imax) {
  ClassRecipe r;
  r.name = std::move(name);
  r.kind = kind;
  r.frequency = freq;
  r.color = color;
  r.size_min = smin;
  r.size_max = smax;
  r.instances_min = imin;
  r.instances_max = imax;
  return r;
}

Vector3 sphere_dir(Rng& rng) {
  Vector3 d;
  do {
    d = Vector3(rng.normal(), rng.normal(), rng.normal());
  } while (d.norm() < 1e-9);
  return d / d.norm();
}

}  // namespace

SceneSpec SceneSpec::pretrain_default() {
  SceneSpec s;
  s.classes = {
      recipe("floor", PrimitiveKind::Floor, 0.45, Vector3(0.55, 0.45, 0.35), 0, 0, 1, 1),
      recipe("wall", PrimitiveKind::Wall, 0.25, Vector3(0.85, 0.85, 0.80), 0, 0, 1, 1),
      recipe("table", PrimitiveKind::Box, 0.10, Vector3(0.45, 0.25, 0.10), 0.6, 1.1, 1, 2),
      recipe("crate", PrimitiveKind::Box, 0.08, Vector3(0.20, 0.45, 0.70), 0.25, 0.5, 1, 3),
      recipe("ball", PrimitiveKind::Sphere, 0.06, Vector3(0.80, 0.15, 0.15), 0.3, 0.6, 1, 2),
      recipe("column", PrimitiveKind::Cylinder, 0.06, Vector3(0.25, 0.65, 0.30), 0.5, 1.0, 1, 2),
  };
  s.seed = 1;
  return s;
}

SceneSpec SceneSpec::downstream_default() {
  SceneSpec s;
  // Shifted palette and a different object mix, with deliberately ambiguous
  // colors: crate/ball share one palette entry and table/column another, so
  // pointwise color cannot separate them and local geometric context has to.
  s.classes = {
      recipe("floor", PrimitiveKind::Floor, 0.42, Vector3(0.30, 0.50, 0.55), 0, 0, 1, 1),
      recipe("wall", PrimitiveKind::Wall, 0.20, Vector3(0.60, 0.70, 0.85), 0, 0, 1, 1),
      recipe("table", PrimitiveKind::Box, 0.08, Vector3(0.70, 0.60, 0.30), 0.8, 1.3, 1, 1),
      recipe("crate", PrimitiveKind::Box, 0.11, Vector3(0.55, 0.30, 0.50), 0.2, 0.45, 2, 4),
      recipe("ball", PrimitiveKind::Sphere, 0.10, Vector3(0.55, 0.30, 0.50), 0.35, 0.7, 1, 3),
      recipe("column", PrimitiveKind::Cylinder, 0.09, Vector3(0.70, 0.60, 0.30), 0.6, 1.2, 1, 2),
  };
  s.color_noise = 0.08;
  s.seed = 1;
  return s;
}

PointCloud generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  if (spec.classes.empty()) throw Error("scene spec has an empty recipe list");
  Rng rng(seed);

  const Index n_total =
      spec.points_min + static_cast<Index>(rng.below(
                            static_cast<std::uint64_t>(spec.points_max - spec.points_min + 1)));

  // Largest-remainder apportionment of points to classes: shares are exact up
  // to rounding, making the imbalance target directly testable.
  Scalar freq_sum = 0.0;
  for (const auto& c : spec.classes) freq_sum += c.frequency;
  if (freq_sum <= 0.0) throw Error("scene spec frequencies sum to zero");
  const std::size_t k = spec.classes.size();
  std::vector<Index> counts(k, 0);
  std::vector<std::pair<Scalar, std::size_t>> remainders;
  Index assigned = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const Scalar exact = spec.classes[c].frequency / freq_sum * static_cast<Scalar>(n_total);
    counts[c] = static_cast<Index>(std::floor(exact));
    assigned += counts[c];
    remainders.push_back({exact - std::floor(exact), c});
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (Index i = 0; i < n_total - assigned; ++i) {
    counts[remainders[static_cast<std::size_t>(i) % k].second] += 1;
  }

  PointCloud cloud;
  cloud.coords.resize(n_total, 3);
  cloud.features.resize(n_total, 6);
  cloud.labels.resize(static_cast<std::size_t>(n_total));

  const Vector3 room = spec.room;
  Index row = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const ClassRecipe& rc = spec.classes[c];
    if (counts[c] == 0) continue;
    int instances = 1;
    if (rc.kind == PrimitiveKind::Box || rc.kind == PrimitiveKind::Sphere ||
        rc.kind == PrimitiveKind::Cylinder) {
      instances = rc.instances_min +
                  static_cast<int>(rng.below(
                      static_cast<std::uint64_t>(rc.instances_max - rc.instances_min + 1)));
    }
    for (int inst = 0; inst < instances; ++inst) {
      const Index quota = counts[c] / instances + ((inst < counts[c] % instances) ? 1 : 0);
      if (quota == 0) continue;

      // Per-instance geometry.
      Scalar size = rng.uniform(rc.size_min, rc.size_max);
      Vector3 half(rng.uniform(rc.size_min, rc.size_max) * 0.5, size * 0.5,
                   rng.uniform(rc.size_min, rc.size_max) * 0.5);
      Vector3 center(rng.uniform(0.3, room.x() - 0.3), rng.uniform(0.3, room.y() - 0.3), 0.0);
      const Scalar radius = size * 0.5;
      const Scalar height = rng.uniform(rc.size_min, rc.size_max);

      for (Index p = 0; p < quota; ++p) {
        Vector3 pt;
        switch (rc.kind) {
          case PrimitiveKind::Floor:
            pt = Vector3(rng.uniform(0.0, room.x()), rng.uniform(0.0, room.y()), 0.0);
            break;
          case PrimitiveKind::Wall: {
            const int side = static_cast<int>(rng.below(4));
            const Scalar u = rng.uniform(0.0, 1.0);
            const Scalar v = rng.uniform(0.0, room.z());
            switch (side) {
              case 0: pt = Vector3(0.0, u * room.y(), v); break;
              case 1: pt = Vector3(room.x(), u * room.y(), v); break;
              case 2: pt = Vector3(u * room.x(), 0.0, v); break;
              default: pt = Vector3(u * room.x(), room.y(), v); break;
            }
            break;
          }
          case PrimitiveKind::Box: {
            const int face = static_cast<int>(rng.below(6));
            Vector3 local(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
            local[face % 3] = (face < 3) ? 1.0 : -1.0;
            pt = center + Vector3(local.x() * half.x(), local.y() * half.y(),
                                  half.z() + local.z() * half.z());
            break;
          }
          case PrimitiveKind::Sphere:
            pt = center + Vector3(0, 0, radius + 0.1) + radius * sphere_dir(rng);
            break;
          case PrimitiveKind::Cylinder: {
            const Scalar ang = rng.uniform(0.0, 2.0 * 3.141592653589793);
            pt = center + Vector3(radius * 0.5 * std::cos(ang), radius * 0.5 * std::sin(ang),
                                  rng.uniform(0.0, height));
            break;
          }
        }
        pt += spec.jitter * Vector3(rng.normal(), rng.normal(), rng.normal());
        Vector3 color = rc.color + spec.color_noise * Vector3(rng.normal(), rng.normal(), rng.normal());
        cloud.coords.row(row) = pt.transpose();
        cloud.features(row, 0) = pt.x();
        cloud.features(row, 1) = pt.y();
        cloud.features(row, 2) = pt.z();
        cloud.features(row, 3) = color.x();
        cloud.features(row, 4) = color.y();
        cloud.features(row, 5) = color.z();
        cloud.labels[static_cast<std::size_t>(row)] = static_cast<int>(c);
        ++row;
      }
    }
  }
  cloud.coords.conservativeResize(row, 3);
  cloud.features.conservativeResize(row, 6);
  cloud.labels.resize(static_cast<std::size_t>(row));
  cloud.validate();
  return cloud;
}

PointCloud generate_scene(const SceneSpec& spec) { return generate_scene(spec, spec.seed); }

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(int num_classes) {
  counts.setZero(num_classes, num_classes);
}

void ConfusionMatrix::add(int truth, int prediction) {
  if (truth < 0) return;
  if (truth >= num_classes() || prediction < 0 || prediction >= num_classes()) {
    throw Error("confusion matrix index out of range");
  }
  counts(truth, prediction) += 1;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes() != num_classes()) throw Error("confusion matrix size mismatch");
  counts += other.counts;
}

Metrics metrics(const ConfusionMatrix& cm) {
  const std::int64_t total = cm.total();
  if (total == 0) throw Error("metrics require a non-empty confusion matrix");
  const int k = cm.num_classes();
  Metrics out;
  out.per_class_iou = VectorX::Constant(k, std::numeric_limits<Scalar>::quiet_NaN());

  std::int64_t tp_sum = 0;
  Scalar iou_sum = 0.0, acc_sum = 0.0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    const std::int64_t tp = cm.counts(c, c);
    const std::int64_t row = cm.counts.row(c).sum();  // present in ground truth
    const std::int64_t col = cm.counts.col(c).sum();
    tp_sum += tp;
    if (row == 0) continue;  // absent from ground truth: excluded from means
    const std::int64_t fn = row - tp;
    const std::int64_t fp = col - tp;
    const Scalar iou = static_cast<Scalar>(tp) / static_cast<Scalar>(tp + fp + fn);
    out.per_class_iou[c] = iou;
    iou_sum += iou;
    acc_sum += static_cast<Scalar>(tp) / static_cast<Scalar>(row);
    ++present;
  }
  if (present == 0) throw Error("metrics: no class present in ground truth");
  out.miou = iou_sum / static_cast<Scalar>(present);
  out.macc = acc_sum / static_cast<Scalar>(present);
  out.allacc = static_cast<Scalar>(tp_sum) / static_cast<Scalar>(total);
  return out;
}

// ---------------------------------------------------------------------------
// I/O
// ---------------------------------------------------------------------------

void write_ptxt(const PointCloud& cloud, const std::string& path) {
  cloud.validate();
  std::ofstream f(path);
  if (!f) throw IoError("cannot open \"" + path + "\" for writing");
  const Index n = cloud.size();
  const Index c_in = cloud.features.cols();
  f << "PTPA-TEXT 1 " << n << " " << c_in << "\n";
  char buf[64];
  for (Index i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) {
      std::snprintf(buf, sizeof(buf), "%.17g", cloud.coords(i, a));
      f << (a ? " " : "") << buf;
    }
    for (Index j = 0; j < c_in; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", cloud.features(i, j));
      f << " " << buf;
    }
    f << " " << cloud.labels[static_cast<std::size_t>(i)] << "\n";
  }
  if (!f) throw IoError("write failed for \"" + path + "\"");
}

PointCloud read_ptxt(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open \"" + path + "\"");
  std::string magic;
  int version = 0;
  Index n = -1, c_in = -1;
  f >> magic >> version >> n >> c_in;
  if (magic != "PTPA-TEXT") throw IoError("bad magic in \"" + path + "\" (line 1)");
  if (version != 1) throw IoError("unsupported version " + std::to_string(version));
  if (!f || n < 1 || c_in < 0) throw IoError("malformed header in \"" + path + "\"");
  PointCloud cloud;
  cloud.coords.resize(n, 3);
  cloud.features.resize(n, c_in);
  cloud.labels.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) f >> cloud.coords(i, a);
    for (Index j = 0; j < c_in; ++j) f >> cloud.features(i, j);
    f >> cloud.labels[static_cast<std::size_t>(i)];
    if (!f) throw IoError("truncated record at point " + std::to_string(i) + " in \"" + path + "\"");
  }
  cloud.validate();
  return cloud;
}

namespace {

void put_u32(std::ofstream& f, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  f.write(b, 4);
}

void put_f64(std::ofstream& f, double v) {
  char b[8];
  std::memcpy(b, &v, 8);
  f.write(b, 8);
}

void put_i32(std::ofstream& f, std::int32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  f.write(b, 4);
}

struct ByteReader {
  std::ifstream f;
  std::size_t offset = 0;
  std::string path;

  void read(char* dst, std::size_t n) {
    f.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(f.gcount()) != n) {
      throw IoError("unexpected end of file at byte " + std::to_string(offset) + " in \"" + path +
                    "\"");
    }
    offset += n;
  }
  std::uint32_t u32() {
    char b[4];
    read(b, 4);
    std::uint32_t v;
    std::memcpy(&v, b, 4);
    return v;
  }
  double f64() {
    char b[8];
    read(b, 8);
    double v;
    std::memcpy(&v, b, 8);
    return v;
  }
  std::int32_t i32() {
    char b[4];
    read(b, 4);
    std::int32_t v;
    std::memcpy(&v, b, 4);
    return v;
  }
};

}  // namespace

void write_ptbin(const PointCloud& cloud, const std::string& path) {
  cloud.validate();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open \"" + path + "\" for writing");
  f.write("PTPA", 4);
  put_u32(f, 1);
  put_u32(f, static_cast<std::uint32_t>(cloud.size()));
  put_u32(f, static_cast<std::uint32_t>(cloud.features.cols()));
  for (Index i = 0; i < cloud.size(); ++i) {
    for (int a = 0; a < 3; ++a) put_f64(f, cloud.coords(i, a));
    for (Index j = 0; j < cloud.features.cols(); ++j) put_f64(f, cloud.features(i, j));
    put_i32(f, cloud.labels[static_cast<std::size_t>(i)]);
  }
  if (!f) throw IoError("write failed for \"" + path + "\"");
}

PointCloud read_ptbin(const std::string& path) {
  ByteReader r;
  r.path = path;
  r.f.open(path, std::ios::binary);
  if (!r.f) throw IoError("cannot open \"" + path + "\"");
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, "PTPA", 4) != 0) throw IoError("bad magic at byte 0 in \"" + path + "\"");
  const std::uint32_t version = r.u32();
  if (version != 1) {
    throw IoError("unsupported version " + std::to_string(version) + " at byte 4 in \"" + path +
                  "\"");
  }
  const std::uint32_t n = r.u32();
  const std::uint32_t c_in = r.u32();
  if (n < 1) throw IoError("empty cloud in \"" + path + "\"");
  PointCloud cloud;
  cloud.coords.resize(n, 3);
  cloud.features.resize(n, c_in);
  cloud.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) cloud.coords(i, a) = r.f64();
    for (std::uint32_t j = 0; j < c_in; ++j) cloud.features(i, j) = r.f64();
    cloud.labels[i] = r.i32();
  }
  cloud.validate();
  return cloud;
}

}  // namespace ptpa::data
