#pragma once

#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ptpa/types.hpp"

namespace ptpa::ad {

using Shape = std::vector<Index>;

std::string shape_str(const Shape& s);

/// Dense double-precision tensor, flat row-major storage. The last dimension
/// is the channel/column axis; all leading dimensions collapse into rows.
struct Tensor {
  Shape shape;
  VectorX data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, VectorX d, bool rg = false);

  Index size() const { return data.size(); }
  Index rows() const;
  Index cols() const;
  bool is_scalar() const { return data.size() == 1; }

  Eigen::Map<MatrixX> mat() { return {data.data(), rows(), cols()}; }
  Eigen::Map<const MatrixX> mat() const { return {data.data(), rows(), cols()}; }

  static Tensor zeros(Shape s);
  static Tensor scalar(Scalar v);
  static Tensor from(const MatrixX& m, bool requires_grad = false);
  static Tensor from_vec(const VectorX& v, bool requires_grad = false);
};

/// A named model weight. Gradient is populated by Tape::backward; frozen
/// (trainable=false) parameters always report a zero gradient.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
  VectorX grad;  // same length as value.data once populated

  void zero_grad() { grad = VectorX::Zero(value.size()); }
};

/// Registry of parameters in deterministic registration order; names unique.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor value, bool trainable = true);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);

  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
  Index total_size() const;
  Index trainable_size() const;
  void zero_grads();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, Parameter*> by_name_;
};

/// Handle to a node on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

using GradientMap = std::map<std::string, Tensor>;

/// Define-by-run reverse-mode tape. Values are computed eagerly; when
/// recording, each operation also stores the closure that propagates adjoints
/// to its inputs. A non-recording tape evaluates the same forward code with no
/// backward state (inference mode). A tape is confined to one thread for the
/// duration of a forward/backward pass.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  Var leaf(Tensor t);
  Var constant(const MatrixX& m);
  Var param(Parameter& p);

  Var add(Var a, Var b);
  Var add_rowvec(Var x, Var v);
  Var mul_scalar(Var a, Scalar s);
  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var relu(Var a);
  Var softmax_rows(Var a, Scalar tau);
  Var layernorm(Var x, Var gamma, Var beta, Scalar eps = 1e-5);
  Var select_rows(Var x, std::vector<Index> idx);
  Var pad_rows(Var x, Index new_rows);
  Var slice_rows(Var x, Index begin, Index count);
  Var concat_rows(const std::vector<Var>& parts);
  /// Per-segment mean over row ranges [begin, end); an empty segment yields a
  /// zero row (the all-masked case is defined, not an error).
  Var segment_mean(Var x, std::vector<std::pair<Index, Index>> segments);
  /// Block-diagonal matmul: rows [i*cap, (i+1)*cap) of x are multiplied by the
  /// in_c x out_c matrix stored flat in row i of w.
  Var grouped_matmul(Var x, Var w, Index groups, Index cap, Index in_c, Index out_c);
  Var reshape(Var x, Shape shape);
  Var sum(Var a);
  /// Mean negative log-likelihood over rows whose label is >= 0.
  Var cross_entropy(Var logits, std::vector<int> labels);

  /// Reverse sweep from a scalar loss. Fills Parameter::grad for every bound
  /// parameter (zeros for frozen or unreached ones) and returns the map.
  GradientMap backward(Var loss);

  const Tensor& value(Var v) const;
  Eigen::Map<const MatrixX> mat(Var v) const;
  /// Gradient of the last backward() w.r.t. this node (zeros if unreached).
  VectorX grad(Var v) const;

  /// Smallest |x| over nonzero relu inputs seen on this tape (+inf if none).
  /// Finite differencing is only trustworthy when this clears the step size;
  /// exact zeros are stationary under parameter perturbation and don't count.
  Scalar relu_kink_margin() const { return relu_margin_; }

 private:
  struct Node {
    Tensor value;
    VectorX grad;
    bool needs_grad = false;
    Parameter* bound = nullptr;
    std::function<void(Tape&)> backprop;
  };

  Var push(Tensor value, bool needs_grad, std::function<void(Tape&)> backprop,
           const char* op_name);
  Node& node(Var v);
  const Node& node(Var v) const;
  Eigen::Map<MatrixX> grad_mat(Var v);
  bool has_grad(Var v) const;

  std::vector<Node> nodes_;
  bool recording_ = true;
  Scalar relu_margin_ = std::numeric_limits<Scalar>::infinity();
};

struct GradCheckResult {
  std::map<std::string, Scalar> max_rel_err;  // per trainable parameter
  bool all_below(Scalar tol) const;
  Scalar worst() const;
};

/// Compares analytic gradients of a scalar loss against central finite
/// differences for every trainable parameter the builder touches. The builder
/// must reconstruct the graph from current parameter values on each call.
/// Relative error per element: |a - f| / max(|a|, |f|, 1e-8).
GradCheckResult gradcheck_params(ParameterStore& store,
                                 const std::function<Var(Tape&)>& build_loss, Scalar h = 1e-5);

}  // namespace ptpa::ad
