#include "ptpa/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ptpa {

namespace {

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

int log2i(int v) {
  int k = 0;
  while ((1 << k) < v) ++k;
  return k;
}

ad::Tensor uniform_tensor(ad::Shape shape, Scalar bound, Rng& rng) {
  ad::Tensor t = ad::Tensor::zeros(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.data[i] = rng.uniform(-bound, bound);
  return t;
}

std::vector<Index> canonical_order(const std::vector<std::uint64_t>& codes) {
  std::vector<Index> idx(codes.size());
  std::iota(idx.begin(), idx.end(), Index{0});
  std::sort(idx.begin(), idx.end(), [&](Index a, Index b) {
    const auto ca = codes[static_cast<std::size_t>(a)];
    const auto cb = codes[static_cast<std::size_t>(b)];
    if (ca != cb) return ca < cb;
    return a < b;
  });
  return idx;
}

}  // namespace

void BackboneConfig::validate() const {
  if (stages.empty()) throw ConfigError("backbone needs at least one stage");
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (order_bits < 2 || order_bits > 20) throw ConfigError("order_bits must be in [2, 20]");
  int bits = order_bits;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StageSpec& s = stages[i];
    if (s.channels < 2) throw ConfigError("stage channels must be >= 2");
    if (s.blocks < 1) throw ConfigError("stage blocks must be >= 1");
    if (s.patch < 1) throw ConfigError("stage patch must be >= 1");
    if (s.groups < 1) throw ConfigError("stage groups must be >= 1");
    if (i > 0 && s.channels < stages[i - 1].channels) {
      throw ConfigError("stage channels must be nondecreasing");
    }
    if (i + 1 < stages.size()) {
      if (s.pool < 2 || !is_pow2(s.pool)) {
        throw ConfigError("stage pool factor must be a power of two >= 2");
      }
      bits -= log2i(s.pool);
      if (bits < 1) throw ConfigError("order_bits too small for the pooling schedule");
    }
  }
}

BackboneConfig BackboneConfig::toy_default() {
  BackboneConfig cfg;
  cfg.stages = {
      {32, 2, 16, 2, 32},
      {64, 2, 16, 2, 16},
      {128, 2, 16, 2, 8},
  };
  return cfg;
}

int PeftConfig::hidden_for(int channels) const {
  if (hidden_dim > 0) return hidden_dim;
  return std::max(2, channels / hidden_ratio);
}

int PeftConfig::bases_for(std::size_t stage) const {
  if (bases.empty()) throw ConfigError("peft.bases must not be empty");
  return stage < bases.size() ? bases[stage] : bases.back();
}

int PeftConfig::router_hidden_for(int channels, int bases) const {
  return router_hidden > 0 ? router_hidden : dpp_router_hidden(channels, bases);
}

const sfc::CurveKind& PeftConfig::curve_for_site(int site_index) const {
  if (curves.empty()) throw ConfigError("peft.curves must not be empty");
  return curves[static_cast<std::size_t>(site_index) % curves.size()];
}

InsertionPlan plan_for_model(const BackboneConfig& bb, const PeftConfig& peft) {
  std::vector<int> blocks_per_stage;
  for (const auto& s : bb.stages) blocks_per_stage.push_back(s.blocks);
  return build_insertion_plan(blocks_per_stage, peft.strategy, peft.stage_overrides);
}

PoolMap make_pool_map(const std::vector<sfc::GridCoord>& fine_cells, const MatrixX& fine_coords,
                      int factor) {
  if (factor < 2) throw Error("pool factor must be >= 2");
  const std::size_t n = fine_cells.size();
  if (n == 0 || fine_coords.rows() != static_cast<Index>(n)) {
    throw Error("pool map inputs are not row-aligned");
  }
  const std::uint32_t f = static_cast<std::uint32_t>(factor);
  std::vector<std::uint64_t> keys(n);
  std::vector<sfc::GridCoord> coarse(n);
  for (std::size_t i = 0; i < n; ++i) {
    coarse[i] = {fine_cells[i].x / f, fine_cells[i].y / f, fine_cells[i].z / f};
    keys[i] = sfc::morton_encode(coarse[i], 20);
  }

  PoolMap map;
  map.order = canonical_order(keys);
  map.cell_of_fine.resize(n);
  Index run_begin = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const Index fine = map.order[k];
    if (k > 0 && keys[static_cast<std::size_t>(fine)] !=
                     keys[static_cast<std::size_t>(map.order[k - 1])]) {
      map.runs.push_back({run_begin, static_cast<Index>(k)});
      run_begin = static_cast<Index>(k);
    }
  }
  map.runs.push_back({run_begin, static_cast<Index>(n)});

  const Index cells = static_cast<Index>(map.runs.size());
  map.coarse_coords = MatrixX::Zero(cells, 3);
  map.coarse_cells.resize(static_cast<std::size_t>(cells));
  for (Index c = 0; c < cells; ++c) {
    const auto [b, e] = map.runs[static_cast<std::size_t>(c)];
    for (Index k = b; k < e; ++k) {
      const Index fine = map.order[static_cast<std::size_t>(k)];
      map.cell_of_fine[static_cast<std::size_t>(fine)] = c;
      map.coarse_coords.row(c) += fine_coords.row(fine);
    }
    map.coarse_coords.row(c) /= static_cast<Scalar>(e - b);
    map.coarse_cells[static_cast<std::size_t>(c)] =
        coarse[static_cast<std::size_t>(map.order[static_cast<std::size_t>(b)])];
  }
  return map;
}

GridPoolResult grid_pool(const MatrixX& features, const MatrixX& coords, int factor,
                         int order_bits) {
  if (features.rows() != coords.rows()) throw Error("features and coords are not row-aligned");
  const auto cells = sfc::quantize(coords, order_bits, sfc::Bbox::of(coords));
  GridPoolResult out;
  out.map = make_pool_map(cells, coords, factor);
  out.coords = out.map.coarse_coords;
  out.features = MatrixX::Zero(out.map.coarse_count(), features.cols());
  for (Index c = 0; c < out.map.coarse_count(); ++c) {
    const auto [b, e] = out.map.runs[static_cast<std::size_t>(c)];
    for (Index k = b; k < e; ++k) {
      out.features.row(c) += features.row(out.map.order[static_cast<std::size_t>(k)]);
    }
    out.features.row(c) /= static_cast<Scalar>(e - b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model construction
// ---------------------------------------------------------------------------

Model Model::build(const BackboneConfig& bb, const PeftConfig& peft, std::uint64_t seed,
                   bool frozen_backbone) {
  bb.validate();
  Model model;
  model.backbone = bb;
  model.peft = peft;
  model.plan = plan_for_model(bb, peft);

  Rng rng(seed);
  auto& store = model.params;
  const bool bt = !frozen_backbone;  // backbone trainability

  // Backbone: embedding, blocks, lifts. Registration order fixes the rng
  // draw sequence, so identical seeds give identical weights.
  {
    const int c1 = bb.stages[0].channels;
    const Scalar bound = 1.0 / std::sqrt(static_cast<Scalar>(bb.in_channels));
    model.embed_w = &store.add("embed.w", uniform_tensor({bb.in_channels, c1}, bound, rng), bt);
    model.embed_b = &store.add("embed.b", ad::Tensor::zeros({c1}), bt);
  }
  for (std::size_t si = 0; si < bb.stages.size(); ++si) {
    const StageSpec& spec = bb.stages[si];
    const Index c = spec.channels;
    const Index hidden = 4 * c;
    const Scalar bc = 1.0 / std::sqrt(static_cast<Scalar>(c));
    const Scalar bh = 1.0 / std::sqrt(static_cast<Scalar>(hidden));
    StageModel stage;
    stage.spec = spec;
    const std::string sp = "stage" + std::to_string(si + 1);
    for (int bi = 0; bi < spec.blocks; ++bi) {
      const std::string bp = sp + ".block" + std::to_string(bi + 1);
      BlockParams blk;
      blk.ln1_gamma = &store.add(bp + ".ln1.gamma", ad::Tensor::from_vec(VectorX::Ones(c)), bt);
      blk.ln1_beta = &store.add(bp + ".ln1.beta", ad::Tensor::zeros({c}), bt);
      blk.wq = &store.add(bp + ".attn.wq", uniform_tensor({c, c}, bc, rng), bt);
      blk.bq = &store.add(bp + ".attn.bq", ad::Tensor::zeros({c}), bt);
      blk.wk = &store.add(bp + ".attn.wk", uniform_tensor({c, c}, bc, rng), bt);
      blk.bk = &store.add(bp + ".attn.bk", ad::Tensor::zeros({c}), bt);
      blk.wv = &store.add(bp + ".attn.wv", uniform_tensor({c, c}, bc, rng), bt);
      blk.bv = &store.add(bp + ".attn.bv", ad::Tensor::zeros({c}), bt);
      blk.wo = &store.add(bp + ".attn.wo", uniform_tensor({c, c}, bc, rng), bt);
      blk.bo = &store.add(bp + ".attn.bo", ad::Tensor::zeros({c}), bt);
      blk.ln2_gamma = &store.add(bp + ".ln2.gamma", ad::Tensor::from_vec(VectorX::Ones(c)), bt);
      blk.ln2_beta = &store.add(bp + ".ln2.beta", ad::Tensor::zeros({c}), bt);
      blk.ffn_w1 = &store.add(bp + ".ffn.w1", uniform_tensor({c, hidden}, bc, rng), bt);
      blk.ffn_b1 = &store.add(bp + ".ffn.b1", ad::Tensor::zeros({hidden}), bt);
      blk.ffn_w2 = &store.add(bp + ".ffn.w2", uniform_tensor({hidden, c}, bh, rng), bt);
      blk.ffn_b2 = &store.add(bp + ".ffn.b2", ad::Tensor::zeros({c}), bt);
      stage.blocks.push_back(blk);
    }
    if (si + 1 < bb.stages.size()) {
      const Index cn = bb.stages[si + 1].channels;
      stage.lift_w = &store.add(sp + ".lift.w", uniform_tensor({c, cn}, bc, rng), bt);
      stage.lift_b = &store.add(sp + ".lift.b", ad::Tensor::zeros({cn}), bt);
    }
    model.stages.push_back(std::move(stage));
  }

  // Head before the overlay: a model with and without an overlay then shares
  // identical backbone and head draws for the same seed.
  {
    const Index cl = bb.stages.back().channels;
    const Scalar bound = 1.0 / std::sqrt(static_cast<Scalar>(cl));
    model.head_w = &store.add("head.w", uniform_tensor({cl, bb.num_classes}, bound, rng), true);
    model.head_b = &store.add("head.b", ad::Tensor::zeros({bb.num_classes}), true);
  }

  // PEFT overlay.
  int site_counter = 0;
  for (std::size_t si = 0; si < bb.stages.size(); ++si) {
    StageModel& stage = model.stages[si];
    const int c = stage.spec.channels;
    const int cd = peft.hidden_for(c);
    for (int bi = 0; bi < stage.spec.blocks; ++bi) {
      const std::string bp = "stage" + std::to_string(si + 1) + ".block" + std::to_string(bi + 1);
      BlockOverlay ov;
      ov.tag = model.plan.tags[si][static_cast<std::size_t>(bi)];
      if (ov.tag == BlockTag::Adapter) {
        AdapterOptions aopts;
        aopts.hidden = cd;
        aopts.scale = peft.scale;
        ov.adapter = make_static_adapter(store, bp + ".adapter", c, aopts, rng);
      } else if (ov.tag == BlockTag::Dpp) {
        DppOptions dopts;
        dopts.bases = peft.bases_for(si);
        dopts.hidden = cd;
        dopts.temperature = peft.temperature;
        dopts.scale = peft.scale;
        dopts.router_hidden = peft.router_hidden;
        dopts.position = peft.position;
        ov.dpp = make_dpp_site(store, bp + ".dpp", c, dopts, rng);
        ov.site_index = site_counter++;
      }
      stage.overlay.push_back(std::move(ov));
    }
  }
  return model;
}

bool Model::is_backbone_param(const std::string& name) const {
  if (name.rfind("head.", 0) == 0) return false;
  if (name.find(".adapter.") != std::string::npos) return false;
  if (name.find(".dpp.") != std::string::npos) return false;
  return true;
}

void Model::freeze_backbone() {
  for (const auto& p : params.all()) {
    if (is_backbone_param(p->name)) {
      p->trainable = false;
      p->zero_grad();
    }
  }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

ad::Var patch_attention(ad::Tape& tape, ad::Var normed, const BlockParams& blk, int patch,
                        Index channels) {
  ad::Var q = tape.add_rowvec(tape.matmul(normed, tape.param(*blk.wq)), tape.param(*blk.bq));
  ad::Var k = tape.add_rowvec(tape.matmul(normed, tape.param(*blk.wk)), tape.param(*blk.bk));
  ad::Var v = tape.add_rowvec(tape.matmul(normed, tape.param(*blk.wv)), tape.param(*blk.bv));
  const Index n = tape.value(normed).rows();
  const Scalar inv_sqrt_d = 1.0 / std::sqrt(static_cast<Scalar>(channels));

  std::vector<ad::Var> outs;
  for (Index at = 0; at < n; at += patch) {
    const Index len = std::min<Index>(patch, n - at);
    ad::Var qs = tape.slice_rows(q, at, len);
    ad::Var ks = tape.slice_rows(k, at, len);
    ad::Var vs = tape.slice_rows(v, at, len);
    ad::Var scores = tape.mul_scalar(tape.matmul_nt(qs, ks), inv_sqrt_d);
    ad::Var attn = tape.softmax_rows(scores, 1.0);
    outs.push_back(tape.matmul(attn, vs));
  }
  ad::Var merged = outs.size() == 1 ? outs[0] : tape.concat_rows(outs);
  return tape.add_rowvec(tape.matmul(merged, tape.param(*blk.wo)), tape.param(*blk.bo));
}

}  // namespace

ad::Var Model::forward_t(ad::Tape& tape, const data::PointCloud& cloud,
                         ForwardCapture* capture) const {
  cloud.validate();
  if (cloud.features.cols() != backbone.in_channels) {
    throw Error("feature width " + std::to_string(cloud.features.cols()) +
                " does not match embedding width " + std::to_string(backbone.in_channels));
  }

  const sfc::Bbox bbox = sfc::Bbox::of(cloud.coords);
  int cur_bits = backbone.order_bits;
  std::vector<sfc::GridCoord> cur_cells = sfc::quantize(cloud.coords, cur_bits, bbox);
  std::vector<std::uint64_t> codes(cur_cells.size());
  for (std::size_t i = 0; i < cur_cells.size(); ++i) {
    codes[i] = sfc::morton_encode(cur_cells[i], cur_bits);
  }
  const std::vector<Index> canon = canonical_order(codes);
  std::vector<Index> inv_canon(canon.size());
  for (std::size_t k = 0; k < canon.size(); ++k) {
    inv_canon[static_cast<std::size_t>(canon[k])] = static_cast<Index>(k);
  }

  // Embed, then keep every stage in its serialized (canonical) row order:
  // patches are contiguous row ranges and pooling cells are contiguous runs.
  ad::Var x = tape.add_rowvec(tape.matmul(tape.constant(cloud.features), tape.param(*embed_w)),
                              tape.param(*embed_b));
  x = tape.select_rows(x, canon);

  MatrixX cur_coords(canon.size(), 3);
  {
    std::vector<sfc::GridCoord> reordered(cur_cells.size());
    for (std::size_t k = 0; k < canon.size(); ++k) {
      cur_coords.row(static_cast<Index>(k)) = cloud.coords.row(canon[k]);
      reordered[k] = cur_cells[static_cast<std::size_t>(canon[k])];
    }
    cur_cells = std::move(reordered);
  }

  std::vector<std::vector<Index>> unpool;
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const StageModel& stage = stages[si];
    const Index c = stage.spec.channels;
    const Index n_stage = tape.value(x).rows();

    for (std::size_t bi = 0; bi < stage.blocks.size(); ++bi) {
      const BlockParams& blk = stage.blocks[bi];
      // Attention sublayer.
      ad::Var n1 = tape.layernorm(x, tape.param(*blk.ln1_gamma), tape.param(*blk.ln1_beta));
      ad::Var h = tape.add(x, patch_attention(tape, n1, blk, stage.spec.patch, c));
      // FFN sublayer; the PEFT branch runs in parallel, reading the FFN input.
      ad::Var n2 = tape.layernorm(h, tape.param(*blk.ln2_gamma), tape.param(*blk.ln2_beta));
      ad::Var f1 = tape.relu(
          tape.add_rowvec(tape.matmul(n2, tape.param(*blk.ffn_w1)), tape.param(*blk.ffn_b1)));
      ad::Var f2 =
          tape.add_rowvec(tape.matmul(f1, tape.param(*blk.ffn_w2)), tape.param(*blk.ffn_b2));
      ad::Var y = tape.add(h, f2);

      const BlockOverlay& ov = stage.overlay[bi];
      if (ov.tag == BlockTag::Adapter) {
        y = tape.add(y, adapter_branch_t(tape, h, *ov.adapter));
      } else if (ov.tag == BlockTag::Dpp) {
        const DppSite& site = *ov.dpp;
        const auto order = sfc::serialize(cur_coords, peft.curve_for_site(ov.site_index),
                                          cur_bits);
        const sng::GroupPlan plan =
            (peft.group_mode == sng::GroupMode::FixedPointsPerGroup)
                ? sng::plan_groups_by_size(n_stage, peft.points_per_group)
                : sng::plan_groups(n_stage, stage.spec.groups);
        ad::Var normed =
            tape.layernorm(h, tape.param(*site.ln_gamma), tape.param(*site.ln_beta));
        ad::Var grouped = sng::group_t(tape, normed, order, plan);
        if (capture && capture->stage == static_cast<int>(si + 1) && !capture->filled) {
          capture->grouped = sng::sng_group(MatrixX(tape.mat(normed)), order, plan);
          capture->routing = tape.mat(dpp_route_t(tape, grouped, plan, site));
          const ad::Parameter* dyn = site.bases ? site.bases : site.bases_up;
          capture->weights = dpp_synthesize(capture->routing, dyn->value);
          capture->filled = true;
        }
        y = tape.add(y, dpp_branch_from_grouped_t(tape, grouped, order, plan, site));
      }
      x = y;
    }

    if (si + 1 < stages.size()) {
      PoolMap pm = make_pool_map(cur_cells, cur_coords, stage.spec.pool);
      ad::Var sorted = tape.select_rows(x, pm.order);
      ad::Var pooled = tape.segment_mean(sorted, pm.runs);
      x = tape.add_rowvec(tape.matmul(pooled, tape.param(*stage.lift_w)),
                          tape.param(*stage.lift_b));
      unpool.push_back(pm.cell_of_fine);
      cur_coords = pm.coarse_coords;
      cur_cells = pm.coarse_cells;
      cur_bits -= log2i(stage.spec.pool);
    }
  }

  // Broadcast coarse features back to full resolution through the composed
  // pool maps, then classify per point and restore the original row order.
  for (auto it = unpool.rbegin(); it != unpool.rend(); ++it) {
    x = tape.select_rows(x, *it);
  }
  ad::Var logits = tape.add_rowvec(tape.matmul(x, tape.param(*head_w)), tape.param(*head_b));
  return tape.select_rows(logits, inv_canon);
}

MatrixX Model::logits(const data::PointCloud& cloud, ForwardCapture* capture) const {
  ad::Tape tape(false);
  return tape.mat(forward_t(tape, cloud, capture));
}

std::vector<int> Model::predict(const data::PointCloud& cloud) const {
  const MatrixX l = logits(cloud);
  std::vector<int> out(static_cast<std::size_t>(l.rows()));
  for (Index i = 0; i < l.rows(); ++i) {
    Index best = 0;
    l.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

Index closed_form_trainable_census(const BackboneConfig& bb, const PeftConfig& peft) {
  bb.validate();
  const InsertionPlan plan = plan_for_model(bb, peft);

  Index census = 0;
  for (std::size_t si = 0; si < bb.stages.size(); ++si) {
    const Index c = bb.stages[si].channels;
    const Index cd = peft.hidden_for(static_cast<int>(c));
    const Index k = peft.bases_for(si);
    const Index h = peft.router_hidden_for(static_cast<int>(c), static_cast<int>(k));
    for (BlockTag tag : plan.tags[si]) {
      if (tag == BlockTag::Adapter) {
        census += 2 * c + c * cd + cd * c + c;
      } else if (tag == BlockTag::Dpp) {
        census += 2 * c;                  // layernorm
        census += c * h + h + h * k + k;  // router
        census += c;                      // up-projection bias
        switch (peft.position) {
          case DpLayerPos::Down: census += k * c * cd + cd * c; break;
          case DpLayerPos::Up: census += c * cd + k * cd * c; break;
          case DpLayerPos::Both: census += k * c * cd + k * cd * c; break;
        }
      }
    }
  }
  census += bb.stages.back().channels * bb.num_classes + bb.num_classes;  // head
  return census;
}

}  // namespace ptpa
