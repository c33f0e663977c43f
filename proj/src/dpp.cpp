#include "ptpa/dpp.hpp"

#include <cmath>

namespace ptpa {

namespace {

ad::Tensor uniform_tensor(ad::Shape shape, Scalar bound, Rng& rng) {
  ad::Tensor t = ad::Tensor::zeros(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.data[i] = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

DpLayerPos dplayer_from_string(const std::string& name) {
  if (name == "down") return DpLayerPos::Down;
  if (name == "up") return DpLayerPos::Up;
  if (name == "both") return DpLayerPos::Both;
  throw ConfigError("unknown dplayer position \"" + name + "\" (expected down, up, both)");
}

std::string to_string(DpLayerPos pos) {
  switch (pos) {
    case DpLayerPos::Down: return "down";
    case DpLayerPos::Up: return "up";
    case DpLayerPos::Both: return "both";
  }
  throw Error("unreachable dplayer position");
}

int dpp_router_hidden(int channels, int bases) { return std::max(bases, channels / 2); }

DppSite make_dpp_site(ad::ParameterStore& store, const std::string& prefix, int channels,
                      const DppOptions& opts, Rng& rng) {
  if (opts.bases < 1) throw Error("base count K must be >= 1");
  if (opts.hidden < 1) throw Error("hidden dim C_d must be >= 1");
  if (!(opts.temperature > 0.0)) throw Error("temperature must be > 0");

  DppSite site;
  site.channels = channels;
  site.base_count = opts.bases;
  site.hidden = opts.hidden;
  site.router_hidden =
      opts.router_hidden > 0 ? opts.router_hidden : dpp_router_hidden(channels, opts.bases);
  site.opts = opts;

  const Index c = channels, cd = opts.hidden, k = opts.bases, h = site.router_hidden;
  const Scalar fan_c = 1.0 / std::sqrt(static_cast<Scalar>(c));
  const Scalar fan_h = 1.0 / std::sqrt(static_cast<Scalar>(h));

  site.ln_gamma = &store.add(prefix + ".ln.gamma", ad::Tensor::from_vec(VectorX::Ones(c)));
  site.ln_beta = &store.add(prefix + ".ln.beta", ad::Tensor::zeros({c}));
  if (opts.position != DpLayerPos::Up) {
    site.bases = &store.add(prefix + ".bases", uniform_tensor({k, c, cd}, fan_c, rng));
  }
  if (opts.position == DpLayerPos::Up) {
    site.down = &store.add(prefix + ".down", uniform_tensor({c, cd}, fan_c, rng));
    site.bases_up = &store.add(prefix + ".bases_up", ad::Tensor::zeros({k, cd, c}));
  }
  if (opts.position == DpLayerPos::Both) {
    site.bases_up = &store.add(prefix + ".bases_up", ad::Tensor::zeros({k, cd, c}));
  }
  if (opts.position == DpLayerPos::Down) {
    site.up = &store.add(prefix + ".up", ad::Tensor::zeros({cd, c}));
  }
  site.up_bias = &store.add(prefix + ".up_bias", ad::Tensor::zeros({c}));
  site.router_w1 = &store.add(prefix + ".router.w1", uniform_tensor({c, h}, fan_c, rng));
  site.router_b1 = &store.add(prefix + ".router.b1", ad::Tensor::zeros({h}));
  site.router_w2 = &store.add(prefix + ".router.w2", uniform_tensor({h, k}, fan_h, rng));
  site.router_b2 = &store.add(prefix + ".router.b2", ad::Tensor::zeros({k}));
  return site;
}

ad::Var dpp_route_t(ad::Tape& tape, ad::Var grouped, const sng::GroupPlan& plan,
                    const DppSite& site) {
  for (Index g = 0; g < plan.group_count; ++g) {
    if (plan.count(g) < 1) throw Error("group " + std::to_string(g) + " has no real tokens");
  }
  ad::Var pooled = tape.segment_mean(grouped, plan.real_segments());
  ad::Var h1 = tape.relu(
      tape.add_rowvec(tape.matmul(pooled, tape.param(*site.router_w1)), tape.param(*site.router_b1)));
  ad::Var logits =
      tape.add_rowvec(tape.matmul(h1, tape.param(*site.router_w2)), tape.param(*site.router_b2));
  return tape.softmax_rows(logits, site.opts.temperature);
}

ad::Var dpp_synthesize_t(ad::Tape& tape, ad::Var routing, ad::Var bases_leaf) {
  const ad::Shape& bs = tape.value(bases_leaf).shape;
  if (bs.size() != 3) throw Error("bases must be a rank-3 {K, d_in, d_out} tensor");
  ad::Var flat = tape.reshape(bases_leaf, {bs[0], bs[1] * bs[2]});
  return tape.matmul(routing, flat);
}

ad::Var dpp_branch_from_grouped_t(ad::Tape& tape, ad::Var grouped,
                                  const sfc::SerializedOrder& order, const sng::GroupPlan& plan,
                                  const DppSite& site) {
  const Index m = plan.group_count, n = plan.capacity;
  const Index c = site.channels, cd = site.hidden;
  ad::Var routing = dpp_route_t(tape, grouped, plan, site);

  ad::Var result;
  switch (site.opts.position) {
    case DpLayerPos::Down: {
      ad::Var wp = dpp_synthesize_t(tape, routing, tape.param(*site.bases));
      ad::Var proj = tape.grouped_matmul(grouped, wp, m, n, c, cd);
      ad::Var restored = sng::ungroup_t(tape, proj, order, plan);
      ad::Var act = tape.relu(restored);
      result = tape.add_rowvec(tape.matmul(act, tape.param(*site.up)), tape.param(*site.up_bias));
      break;
    }
    case DpLayerPos::Up: {
      ad::Var proj = tape.matmul(grouped, tape.param(*site.down));
      ad::Var act = tape.relu(proj);  // padded rows stay exactly zero
      ad::Var wp_up = dpp_synthesize_t(tape, routing, tape.param(*site.bases_up));
      ad::Var upped = tape.grouped_matmul(act, wp_up, m, n, cd, c);
      ad::Var restored = sng::ungroup_t(tape, upped, order, plan);
      result = tape.add_rowvec(restored, tape.param(*site.up_bias));
      break;
    }
    case DpLayerPos::Both: {
      ad::Var wp = dpp_synthesize_t(tape, routing, tape.param(*site.bases));
      ad::Var proj = tape.grouped_matmul(grouped, wp, m, n, c, cd);
      ad::Var act = tape.relu(proj);
      ad::Var wp_up = dpp_synthesize_t(tape, routing, tape.param(*site.bases_up));
      ad::Var upped = tape.grouped_matmul(act, wp_up, m, n, cd, c);
      ad::Var restored = sng::ungroup_t(tape, upped, order, plan);
      result = tape.add_rowvec(restored, tape.param(*site.up_bias));
      break;
    }
  }
  return tape.mul_scalar(result, site.opts.scale);
}

ad::Var dpp_forward_t(ad::Tape& tape, ad::Var x, const sfc::SerializedOrder& order,
                      const sng::GroupPlan& plan, const DppSite& site) {
  ad::Var normed =
      tape.layernorm(x, tape.param(*site.ln_gamma), tape.param(*site.ln_beta));
  ad::Var grouped = sng::group_t(tape, normed, order, plan);
  ad::Var branch = dpp_branch_from_grouped_t(tape, grouped, order, plan, site);
  return tape.add(x, branch);
}

// --- value-level wrappers -----------------------------------------------------

MatrixX dpp_route(const sng::GroupedTokens& g, const DppSite& site) {
  ad::Tape tape(false);
  ad::Var grouped = tape.constant(g.values);
  return tape.mat(dpp_route_t(tape, grouped, g.plan, site));
}

MatrixX dpp_synthesize(const MatrixX& routing, const ad::Tensor& bases) {
  ad::Tape tape(false);
  ad::Tensor b = bases;
  b.requires_grad = false;
  return tape.mat(dpp_synthesize_t(tape, tape.constant(routing), tape.leaf(std::move(b))));
}

MatrixX dpp_branch_from_grouped(const sng::GroupedTokens& g, const DppSite& site) {
  ad::Tape tape(false);
  ad::Var grouped = tape.constant(g.values);
  return tape.mat(dpp_branch_from_grouped_t(tape, grouped, g.order, g.plan, site));
}

MatrixX dpp_forward(const MatrixX& x, const sfc::SerializedOrder& order,
                    const sng::GroupPlan& plan, const DppSite& site) {
  ad::Tape tape(false);
  return tape.mat(dpp_forward_t(tape, tape.constant(x), order, plan, site));
}

MatrixX weight_similarity(const DppSite& site, const sng::GroupedTokens& g) {
  const ad::Parameter* dynamic = site.bases ? site.bases : site.bases_up;
  if (!dynamic) throw Error("site has no dynamic base set");
  const MatrixX routing = dpp_route(g, site);
  const MatrixX w = dpp_synthesize(routing, dynamic->value);
  const Index m = w.rows();
  VectorX norms(m);
  for (Index i = 0; i < m; ++i) norms[i] = w.row(i).norm();
  MatrixX sim(m, m);
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < m; ++j) {
      sim(i, j) = (norms[i] == 0.0 || norms[j] == 0.0)
                      ? 0.0
                      : w.row(i).dot(w.row(j)) / (norms[i] * norms[j]);
    }
  }
  return sim;
}

VectorX routing_entropy(const MatrixX& routing) {
  VectorX h(routing.rows());
  for (Index i = 0; i < routing.rows(); ++i) {
    Scalar e = 0.0;
    for (Index k = 0; k < routing.cols(); ++k) {
      const Scalar p = routing(i, k);
      if (p > 0.0) e -= p * std::log(p);
    }
    h[i] = e;
  }
  return h;
}

}  // namespace ptpa
