#include "ptpa/train.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <thread>

namespace ptpa {

void Sgd::step(ad::ParameterStore& store) {
  for (const auto& p : store.all()) {
    if (!p->trainable) continue;
    if (momentum != 0.0) {
      auto it = velocity.find(p->name);
      if (it == velocity.end()) {
        it = velocity.emplace(p->name, VectorX::Zero(p->value.size())).first;
      }
      it->second = momentum * it->second + p->grad;
      p->value.data -= lr * it->second;
    } else {
      p->value.data -= lr * p->grad;
    }
  }
}

void save_loss_log(const LossLog& log, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open \"" + path + "\" for writing");
  f << "step,loss\n";
  char buf[32];
  for (std::size_t i = 0; i < log.losses.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.9f", log.losses[i]);
    f << i << "," << buf << "\n";
  }
}

Scalar train_step(Model& model, const data::PointCloud& cloud, Sgd& opt) {
  ad::Tape tape;
  ad::Var logits = model.forward_t(tape, cloud);
  ad::Var loss = tape.cross_entropy(logits, cloud.labels);
  const Scalar value = tape.value(loss).data[0];
  tape.backward(loss);
  opt.step(model.params);
  return value;
}

namespace {

std::vector<Index> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<Index> idx(n);
  std::iota(idx.begin(), idx.end(), Index{0});
  for (std::size_t i = n; i > 1; --i) {
    std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.below(i))]);
  }
  return idx;
}

Scalar guarded_step(Model& model, const data::PointCloud& cloud, Sgd& opt, Scalar last_finite,
                    std::size_t step) {
  try {
    return train_step(model, cloud, opt);
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " (diverged at step " + std::to_string(step) +
                       "; last finite loss " + std::to_string(last_finite) + ")");
  }
}

}  // namespace

Model pretrain_backbone(const BackboneConfig& bb, const std::vector<data::PointCloud>& scenes,
                        int epochs, Scalar lr, Scalar momentum, std::uint64_t seed, LossLog* log) {
  if (scenes.empty()) throw Error("pretraining needs at least one scene");
  PeftConfig none;
  none.strategy = InsertionStrategy::None;
  Model model = Model::build(bb, none, seed, /*frozen_backbone=*/false);

  Sgd opt;
  opt.lr = lr;
  opt.momentum = momentum;
  Rng order_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Scalar last = 0.0;
  std::size_t step = 0;
  for (int e = 0; e < epochs; ++e) {
    for (Index i : shuffled_indices(scenes.size(), order_rng)) {
      last = guarded_step(model, scenes[static_cast<std::size_t>(i)], opt, last, step);
      if (log) log->losses.push_back(last);
      ++step;
    }
  }
  model.freeze_backbone();
  return model;
}

LossLog finetune(Model& model, const std::vector<data::PointCloud>& scenes, int steps, Scalar lr,
                 Scalar momentum, std::uint64_t seed) {
  if (scenes.empty()) throw Error("fine-tuning needs at least one scene");
  Sgd opt;
  opt.lr = lr;
  opt.momentum = momentum;
  Rng order_rng(seed ^ 0x94d049bb133111ebULL);
  LossLog log;
  std::vector<Index> order;
  std::size_t at = 0;
  Scalar last = 0.0;
  for (int s = 0; s < steps; ++s) {
    if (at == order.size()) {
      order = shuffled_indices(scenes.size(), order_rng);
      at = 0;
    }
    last = guarded_step(model, scenes[static_cast<std::size_t>(order[at++])], opt, last,
                        static_cast<std::size_t>(s));
    log.losses.push_back(last);
  }
  return log;
}

int env_thread_cap() {
  const char* env = std::getenv("PTPA_THREADS");
  if (!env) return 1;
  const int v = std::atoi(env);
  return v < 1 ? 1 : v;
}

data::ConfusionMatrix evaluate_confusion(const Model& model,
                                         const std::vector<data::PointCloud>& scenes,
                                         int max_threads) {
  if (scenes.empty()) throw Error("evaluation needs at least one scene");
  const int classes = model.backbone.num_classes;
  const std::size_t n = scenes.size();
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(std::max(1, max_threads)), n);

  std::vector<data::ConfusionMatrix> partial(workers, data::ConfusionMatrix(classes));
  auto run = [&](std::size_t w) {
    for (std::size_t i = w; i < n; i += workers) {
      const auto pred = model.predict(scenes[i]);
      for (std::size_t p = 0; p < pred.size(); ++p) {
        partial[w].add(scenes[i].labels[p], pred[p]);
      }
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  data::ConfusionMatrix cm(classes);
  for (const auto& part : partial) cm.merge(part);  // integer merge: order-free
  return cm;
}

data::Metrics evaluate(const Model& model, const std::vector<data::PointCloud>& scenes,
                       int max_threads) {
  return data::metrics(evaluate_confusion(model, scenes, max_threads));
}

ad::GradCheckResult model_gradcheck(Model& model, const data::PointCloud& cloud, Scalar h) {
  auto build = [&](ad::Tape& tape) -> ad::Var {
    return tape.cross_entropy(model.forward_t(tape, cloud), cloud.labels);
  };
  return ad::gradcheck_params(model.params, build, h);
}

void randomize_trainable(ad::ParameterStore& store, std::uint64_t seed, Scalar bound) {
  Rng rng(seed);
  for (const auto& p : store.all()) {
    if (!p->trainable) continue;
    for (Index i = 0; i < p->value.size(); ++i) p->value.data[i] = rng.uniform(-bound, bound);
  }
}

std::uint64_t randomize_for_gradcheck(Model& model, const data::PointCloud& cloud,
                                      std::uint64_t seed, Scalar margin, int attempts) {
  std::uint64_t best_seed = seed;
  Scalar best_margin = -1.0;
  for (int a = 0; a < attempts; ++a) {
    const std::uint64_t s = seed + static_cast<std::uint64_t>(a);
    randomize_trainable(model.params, s);
    ad::Tape tape(false);
    model.forward_t(tape, cloud);
    const Scalar got = tape.relu_kink_margin();
    if (got >= margin) return s;
    if (got > best_margin) {
      best_margin = got;
      best_seed = s;
    }
  }
  randomize_trainable(model.params, best_seed);
  return best_seed;
}

}  // namespace ptpa
