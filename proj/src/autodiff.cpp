#include "ptpa/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ptpa::ad {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += " x ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape s, VectorX d, bool rg) : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
  Index n = 1;
  for (Index dim : shape) {
    if (dim <= 0) throw Error("tensor dimensions must be positive, got " + shape_str(shape));
    n *= dim;
  }
  if (n != data.size()) {
    throw Error("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                shape_str(shape));
  }
}

Index Tensor::rows() const {
  Index r = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
  return r;
}

Index Tensor::cols() const { return shape.empty() ? 1 : shape.back(); }

Tensor Tensor::zeros(Shape s) {
  Index n = 1;
  for (Index dim : s) n *= dim;
  return Tensor(std::move(s), VectorX::Zero(n));
}

Tensor Tensor::scalar(Scalar v) { return Tensor({1}, VectorX::Constant(1, v)); }

Tensor Tensor::from(const MatrixX& m, bool requires_grad) {
  VectorX d(m.size());
  Eigen::Map<MatrixX>(d.data(), m.rows(), m.cols()) = m;
  return Tensor({m.rows(), m.cols()}, std::move(d), requires_grad);
}

Tensor Tensor::from_vec(const VectorX& v, bool requires_grad) {
  return Tensor({v.size()}, v, requires_grad);
}

Parameter& ParameterStore::add(const std::string& name, Tensor value, bool trainable) {
  if (by_name_.count(name)) throw Error("duplicate parameter name \"" + name + "\"");
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = std::move(value);
  p->trainable = trainable;
  p->zero_grad();
  Parameter& ref = *p;
  by_name_[name] = p.get();
  params_.push_back(std::move(p));
  return ref;
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

Parameter& ParameterStore::at(const std::string& name) {
  Parameter* p = find(name);
  if (!p) throw Error("unknown parameter \"" + name + "\"");
  return *p;
}

Index ParameterStore::total_size() const {
  Index n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

Index ParameterStore::trainable_size() const {
  Index n = 0;
  for (const auto& p : params_) {
    if (p->trainable) n += p->value.size();
  }
  return n;
}

void ParameterStore::zero_grads() {
  for (auto& p : params_) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Node& Tape::node(Var v) {
  if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) throw Error("invalid tape var");
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) throw Error("invalid tape var");
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

Eigen::Map<const MatrixX> Tape::mat(Var v) const { return node(v).value.mat(); }

VectorX Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.size() == 0) return VectorX::Zero(n.value.size());
  return n.grad;
}

Eigen::Map<MatrixX> Tape::grad_mat(Var v) {
  Node& n = node(v);
  if (n.grad.size() == 0) n.grad = VectorX::Zero(n.value.size());
  return {n.grad.data(), n.value.rows(), n.value.cols()};
}

bool Tape::has_grad(Var v) const { return node(v).grad.size() != 0; }

Var Tape::push(Tensor value, bool needs_grad, std::function<void(Tape&)> backprop,
               const char* op_name) {
  if (!value.data.allFinite()) {
    throw NumericError(std::string("non-finite values produced by ") + op_name);
  }
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (recording_ && needs_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor t) {
  const bool rg = t.requires_grad;
  return push(std::move(t), rg, nullptr, "leaf");
}

Var Tape::constant(const MatrixX& m) { return leaf(Tensor::from(m, false)); }

Var Tape::param(Parameter& p) {
  Var v = push(p.value, p.trainable, nullptr, "param");
  node(v).bound = &p;
  return v;
}

Var Tape::add(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.shape != tb.shape) {
    throw Error("add shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  }
  Tensor out(ta.shape, ta.data + tb.data);
  const bool ng = node(a).needs_grad || node(b).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), ng,
              [a, b, o](Tape& t) {
                if (t.node(a).needs_grad) t.grad_mat(a) += t.grad_mat(o);
                if (t.node(b).needs_grad) t.grad_mat(b) += t.grad_mat(o);
              },
              "add");
}

Var Tape::add_rowvec(Var x, Var v) {
  const Tensor& tx = value(x);
  const Tensor& tv = value(v);
  if (tv.shape.size() != 1 || tv.size() != tx.cols()) {
    throw Error("add_rowvec shape mismatch " + shape_str(tx.shape) + " vs " + shape_str(tv.shape));
  }
  Tensor out = tx;
  out.requires_grad = false;
  out.mat().rowwise() += tv.data.transpose();
  const bool ng = node(x).needs_grad || node(v).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), ng,
              [x, v, o](Tape& t) {
                if (t.node(x).needs_grad) t.grad_mat(x) += t.grad_mat(o);
                if (t.node(v).needs_grad) {
                  t.grad_mat(v) += t.grad_mat(o).colwise().sum();
                }
              },
              "add_rowvec");
}

Var Tape::mul_scalar(Var a, Scalar s) {
  const Tensor& ta = value(a);
  Tensor out(ta.shape, (ta.data * s).eval());
  const bool ng = node(a).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), ng,
              [a, s, o](Tape& t) { t.grad_mat(a) += s * t.grad_mat(o); }, "mul_scalar");
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.cols() != tb.rows()) {
    throw Error("matmul shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  }
  Tensor out = Tensor::from(ta.mat() * tb.mat());
  const bool ng = node(a).needs_grad || node(b).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), ng,
              [a, b, o](Tape& t) {
                auto g = t.grad_mat(o);
                if (t.node(a).needs_grad) t.grad_mat(a) += g * t.mat(b).transpose();
                if (t.node(b).needs_grad) t.grad_mat(b) += t.mat(a).transpose() * g;
              },
              "matmul");
}

Var Tape::matmul_nt(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.cols() != tb.cols()) {
    throw Error("matmul_nt shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  }
  Tensor out = Tensor::from(ta.mat() * tb.mat().transpose());
  const bool ng = node(a).needs_grad || node(b).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), ng,
              [a, b, o](Tape& t) {
                auto g = t.grad_mat(o);
                if (t.node(a).needs_grad) t.grad_mat(a) += g * t.mat(b);
                if (t.node(b).needs_grad) t.grad_mat(b) += g.transpose() * t.mat(a);
              },
              "matmul_nt");
}

Var Tape::relu(Var a) {
  const Tensor& ta = value(a);
  for (Index i = 0; i < ta.data.size(); ++i) {
    const Scalar x = std::abs(ta.data[i]);
    if (x != 0.0 && x < relu_margin_) relu_margin_ = x;
  }
  Tensor out(ta.shape, ta.data.cwiseMax(0.0));
  const bool ng = node(a).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), ng,
              [a, o](Tape& t) {
                const VectorX& x = t.value(a).data;
                Eigen::Map<MatrixX> ga = t.grad_mat(a);
                Eigen::Map<MatrixX> go = t.grad_mat(o);
                Eigen::Map<VectorX> gav(ga.data(), ga.size());
                Eigen::Map<const VectorX> gov(go.data(), go.size());
                gav.array() += gov.array() * (x.array() > 0.0).cast<Scalar>();
              },
              "relu");
}

Var Tape::softmax_rows(Var a, Scalar tau) {
  if (!(tau > 0.0)) throw Error("softmax temperature must be > 0");
  const Tensor& ta = value(a);
  Tensor out = ta;
  out.requires_grad = false;
  auto m = out.mat();
  for (Index r = 0; r < m.rows(); ++r) {
    const Scalar zmax = m.row(r).maxCoeff();
    m.row(r) = (((m.row(r).array() - zmax) / tau).exp()).matrix();
    m.row(r) /= m.row(r).sum();
  }
  const bool ng = node(a).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), ng,
              [a, o, tau](Tape& t) {
                auto y = t.mat(o);
                auto g = t.grad_mat(o);
                auto ga = t.grad_mat(a);
                for (Index r = 0; r < y.rows(); ++r) {
                  const Scalar dot = g.row(r).dot(y.row(r));
                  ga.row(r) += (y.row(r).array() * (g.row(r).array() - dot) / tau).matrix();
                }
              },
              "softmax_rows");
}

Var Tape::layernorm(Var x, Var gamma, Var beta, Scalar eps) {
  const Tensor& tx = value(x);
  const Tensor& tg = value(gamma);
  const Tensor& tb = value(beta);
  const Index c = tx.cols();
  if (tg.size() != c || tb.size() != c) {
    throw Error("layernorm affine size mismatch " + shape_str(tx.shape) + " vs gamma " +
                shape_str(tg.shape) + ", beta " + shape_str(tb.shape));
  }
  Tensor out = tx;
  out.requires_grad = false;
  auto m = out.mat();
  for (Index r = 0; r < m.rows(); ++r) {
    const Scalar mu = m.row(r).mean();
    const Scalar var = (m.row(r).array() - mu).square().sum() / static_cast<Scalar>(c);
    const Scalar inv_s = 1.0 / std::sqrt(var + eps);
    m.row(r) = ((((m.row(r).array() - mu) * inv_s) * tg.data.transpose().array()) +
                tb.data.transpose().array())
                   .matrix();
  }
  const bool ng = node(x).needs_grad || node(gamma).needs_grad || node(beta).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), ng,
              [x, gamma, beta, o, eps](Tape& t) {
                auto xm = t.mat(x);
                const VectorX& gvec = t.value(gamma).data;
                auto g = t.grad_mat(o);
                const Index c = xm.cols();
                const Scalar cn = static_cast<Scalar>(c);
                const bool need_x = t.node(x).needs_grad;
                const bool need_g = t.node(gamma).needs_grad;
                const bool need_b = t.node(beta).needs_grad;
                for (Index r = 0; r < xm.rows(); ++r) {
                  const Scalar mu = xm.row(r).mean();
                  const Scalar var = (xm.row(r).array() - mu).square().sum() / cn;
                  const Scalar inv_s = 1.0 / std::sqrt(var + eps);
                  const RowVectorX xhat = (xm.row(r).array() - mu).matrix() * inv_s;
                  if (need_g) {
                    t.grad_mat(gamma) += (g.row(r).array() * xhat.array()).matrix();
                  }
                  if (need_b) t.grad_mat(beta) += g.row(r);
                  if (need_x) {
                    const RowVectorX gh = (g.row(r).array() * gvec.transpose().array()).matrix();
                    const Scalar mean_gh = gh.mean();
                    const Scalar mean_ghxh = gh.dot(xhat) / cn;
                    t.grad_mat(x).row(r) +=
                        ((gh.array() - mean_gh - xhat.array() * mean_ghxh) * inv_s).matrix();
                  }
                }
              },
              "layernorm");
}

Var Tape::select_rows(Var x, std::vector<Index> idx) {
  const Tensor& tx = value(x);
  const Index rows = tx.rows();
  const Index c = tx.cols();
  MatrixX out(static_cast<Index>(idx.size()), c);
  auto xm = tx.mat();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= rows) {
      throw Error("select_rows index " + std::to_string(idx[r]) + " out of range [0, " +
                  std::to_string(rows) + ")");
    }
    out.row(static_cast<Index>(r)) = xm.row(idx[r]);
  }
  const bool ng = node(x).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(Tensor::from(out), ng,
              [x, o, idx = std::move(idx)](Tape& t) {
                auto g = t.grad_mat(o);
                auto gx = t.grad_mat(x);
                for (std::size_t r = 0; r < idx.size(); ++r) {
                  gx.row(idx[r]) += g.row(static_cast<Index>(r));
                }
              },
              "select_rows");
}

Var Tape::pad_rows(Var x, Index new_rows) {
  const Tensor& tx = value(x);
  const Index rows = tx.rows();
  if (new_rows < rows) throw Error("pad_rows cannot shrink from " + std::to_string(rows));
  MatrixX out = MatrixX::Zero(new_rows, tx.cols());
  out.topRows(rows) = tx.mat();
  const bool ng = node(x).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(Tensor::from(out), ng,
              [x, o, rows](Tape& t) { t.grad_mat(x) += t.grad_mat(o).topRows(rows); }, "pad_rows");
}

Var Tape::slice_rows(Var x, Index begin, Index count) {
  const Tensor& tx = value(x);
  if (begin < 0 || count < 0 || begin + count > tx.rows()) {
    throw Error("slice_rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                ") out of range for " + std::to_string(tx.rows()) + " rows");
  }
  MatrixX out = tx.mat().middleRows(begin, count);
  const bool ng = node(x).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(Tensor::from(out), ng,
              [x, o, begin, count](Tape& t) {
                t.grad_mat(x).middleRows(begin, count) += t.grad_mat(o);
              },
              "slice_rows");
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_rows of nothing");
  const Index c = value(parts[0]).cols();
  Index rows = 0;
  bool ng = false;
  for (Var p : parts) {
    if (value(p).cols() != c) {
      throw Error("concat_rows column mismatch " + shape_str(value(parts[0]).shape) + " vs " +
                  shape_str(value(p).shape));
    }
    rows += value(p).rows();
    ng = ng || node(p).needs_grad;
  }
  MatrixX out(rows, c);
  Index at = 0;
  for (Var p : parts) {
    out.middleRows(at, value(p).rows()) = mat(p);
    at += value(p).rows();
  }
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(Tensor::from(out), ng,
              [parts, o](Tape& t) {
                auto g = t.grad_mat(o);
                Index at = 0;
                for (Var p : parts) {
                  const Index r = t.value(p).rows();
                  if (t.node(p).needs_grad) t.grad_mat(p) += g.middleRows(at, r);
                  at += r;
                }
              },
              "concat_rows");
}

Var Tape::segment_mean(Var x, std::vector<std::pair<Index, Index>> segments) {
  const Tensor& tx = value(x);
  const Index rows = tx.rows();
  MatrixX out = MatrixX::Zero(static_cast<Index>(segments.size()), tx.cols());
  auto xm = tx.mat();
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto [b, e] = segments[s];
    if (b < 0 || e < b || e > rows) {
      throw Error("segment_mean range [" + std::to_string(b) + ", " + std::to_string(e) +
                  ") out of range for " + std::to_string(rows) + " rows");
    }
    if (e > b) {
      out.row(static_cast<Index>(s)) =
          xm.middleRows(b, e - b).colwise().sum() / static_cast<Scalar>(e - b);
    }
  }
  const bool ng = node(x).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(Tensor::from(out), ng,
              [x, o, segments = std::move(segments)](Tape& t) {
                auto g = t.grad_mat(o);
                auto gx = t.grad_mat(x);
                for (std::size_t s = 0; s < segments.size(); ++s) {
                  const auto [b, e] = segments[s];
                  if (e > b) {
                    gx.middleRows(b, e - b).rowwise() +=
                        g.row(static_cast<Index>(s)) / static_cast<Scalar>(e - b);
                  }
                }
              },
              "segment_mean");
}

Var Tape::grouped_matmul(Var x, Var w, Index groups, Index cap, Index in_c, Index out_c) {
  const Tensor& tx = value(x);
  const Tensor& tw = value(w);
  if (tx.rows() != groups * cap || tx.cols() != in_c) {
    throw Error("grouped_matmul input shape " + shape_str(tx.shape) + " does not match " +
                std::to_string(groups) + " groups of " + std::to_string(cap) + " x " +
                std::to_string(in_c));
  }
  if (tw.rows() != groups || tw.cols() != in_c * out_c) {
    throw Error("grouped_matmul weight shape " + shape_str(tw.shape) + " does not match " +
                std::to_string(groups) + " x (" + std::to_string(in_c) + "*" +
                std::to_string(out_c) + ")");
  }
  MatrixX out(groups * cap, out_c);
  auto xm = tx.mat();
  for (Index i = 0; i < groups; ++i) {
    Eigen::Map<const MatrixX> wi(tw.data.data() + i * in_c * out_c, in_c, out_c);
    out.middleRows(i * cap, cap).noalias() = xm.middleRows(i * cap, cap) * wi;
  }
  const bool ng = node(x).needs_grad || node(w).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(Tensor::from(out), ng,
              [x, w, o, groups, cap, in_c, out_c](Tape& t) {
                auto g = t.grad_mat(o);
                auto xm = t.mat(x);
                const VectorX& wd = t.value(w).data;
                const bool need_x = t.node(x).needs_grad;
                const bool need_w = t.node(w).needs_grad;
                for (Index i = 0; i < groups; ++i) {
                  Eigen::Map<const MatrixX> wi(wd.data() + i * in_c * out_c, in_c, out_c);
                  auto gi = g.middleRows(i * cap, cap);
                  if (need_x) {
                    t.grad_mat(x).middleRows(i * cap, cap).noalias() += gi * wi.transpose();
                  }
                  if (need_w) {
                    Eigen::Map<MatrixX> gwi(t.grad_mat(w).data() + i * in_c * out_c, in_c, out_c);
                    gwi.noalias() += xm.middleRows(i * cap, cap).transpose() * gi;
                  }
                }
              },
              "grouped_matmul");
}

Var Tape::reshape(Var x, Shape shape) {
  const Tensor& tx = value(x);
  Index n = 1;
  for (Index d : shape) n *= d;
  if (n != tx.size()) {
    throw Error("reshape " + shape_str(tx.shape) + " to " + shape_str(shape) +
                " changes element count");
  }
  Tensor out(std::move(shape), tx.data);
  const bool ng = node(x).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), ng,
              [x, o](Tape& t) {
                t.grad_mat(x);  // ensure allocated
                t.node(x).grad += t.node(o).grad;
              },
              "reshape");
}

Var Tape::sum(Var a) {
  const Tensor& ta = value(a);
  Tensor out = Tensor::scalar(ta.data.sum());
  const bool ng = node(a).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), ng,
              [a, o](Tape& t) {
                const Scalar g = t.node(o).grad[0];
                t.grad_mat(a).array() += g;
              },
              "sum");
}

Var Tape::cross_entropy(Var logits, std::vector<int> labels) {
  const Tensor& tl = value(logits);
  const Index n = tl.rows();
  const Index k = tl.cols();
  if (static_cast<Index>(labels.size()) != n) {
    throw Error("cross_entropy label count " + std::to_string(labels.size()) +
                " does not match " + std::to_string(n) + " rows");
  }
  auto lm = tl.mat();
  Scalar loss = 0.0;
  Index labeled = 0;
  for (Index r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0) continue;
    if (y >= k) throw Error("label " + std::to_string(y) + " out of range for " +
                            std::to_string(k) + " classes");
    const Scalar zmax = lm.row(r).maxCoeff();
    const Scalar lse = std::log((lm.row(r).array() - zmax).exp().sum()) + zmax;
    loss += lse - lm(r, y);
    ++labeled;
  }
  if (labeled == 0) throw Error("cross_entropy: no labeled rows");
  loss /= static_cast<Scalar>(labeled);
  const bool ng = node(logits).needs_grad;
  Var o{static_cast<std::int32_t>(nodes_.size())};
  return push(Tensor::scalar(loss), ng,
              [logits, o, labels = std::move(labels), labeled](Tape& t) {
                const Scalar g = t.node(o).grad[0] / static_cast<Scalar>(labeled);
                auto lm = t.mat(logits);
                auto gl = t.grad_mat(logits);
                for (Index r = 0; r < lm.rows(); ++r) {
                  const int y = labels[static_cast<std::size_t>(r)];
                  if (y < 0) continue;
                  const Scalar zmax = lm.row(r).maxCoeff();
                  RowVectorX p = (lm.row(r).array() - zmax).exp();
                  p /= p.sum();
                  p[y] -= 1.0;
                  gl.row(r) += g * p;
                }
              },
              "cross_entropy");
}

GradientMap Tape::backward(Var loss) {
  if (!recording_) throw Error("backward on a non-recording tape");
  if (!value(loss).is_scalar()) {
    throw Error("backward requires a scalar loss, got " + shape_str(value(loss).shape));
  }
  // Zero grads of every parameter bound on this tape, then accumulate.
  for (Node& n : nodes_) {
    n.grad.resize(0);
    if (n.bound) n.bound->zero_grad();
  }
  node(loss).grad = VectorX::Constant(1, 1.0);
  for (std::int32_t i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backprop) n.backprop(*this);
    if (n.bound && n.bound->trainable) n.bound->grad += n.grad;
  }
  GradientMap map;
  for (Node& n : nodes_) {
    if (!n.bound) continue;
    Tensor g = Tensor(n.bound->value.shape, n.bound->grad);
    map[n.bound->name] = std::move(g);
  }
  return map;
}

bool GradCheckResult::all_below(Scalar tol) const {
  for (const auto& [name, err] : max_rel_err) {
    if (!(err < tol)) return false;
  }
  return true;
}

Scalar GradCheckResult::worst() const {
  Scalar w = 0.0;
  for (const auto& [name, err] : max_rel_err) w = std::max(w, err);
  return w;
}

GradCheckResult gradcheck_params(ParameterStore& store,
                                 const std::function<Var(Tape&)>& build_loss, Scalar h) {
  // Analytic pass.
  {
    Tape tape;
    Var loss = build_loss(tape);
    tape.backward(loss);
  }

  GradCheckResult result;
  for (const auto& p : store.all()) {
    if (!p->trainable) continue;
    const VectorX analytic = p->grad;
    Scalar worst = 0.0;
    for (Index i = 0; i < p->value.size(); ++i) {
      const Scalar orig = p->value.data[i];
      p->value.data[i] = orig + h;
      Tape tp(false);
      const Scalar fp = tp.value(build_loss(tp)).data[0];
      p->value.data[i] = orig - h;
      Tape tm(false);
      const Scalar fm = tm.value(build_loss(tm)).data[0];
      p->value.data[i] = orig;
      const Scalar fd = (fp - fm) / (2.0 * h);
      const Scalar denom = std::max({std::abs(analytic[i]), std::abs(fd), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - fd) / denom);
    }
    result.max_rel_err[p->name] = worst;
  }
  return result;
}

}  // namespace ptpa::ad
