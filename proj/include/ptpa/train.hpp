#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "ptpa/backbone.hpp"
#include "ptpa/checkpoint.hpp"

namespace ptpa {

/// Plain SGD with a fixed learning rate; momentum optional (0 disables it).
struct Sgd {
  Scalar lr = 0.05;
  Scalar momentum = 0.0;
  std::unordered_map<std::string, VectorX> velocity;

  void step(ad::ParameterStore& store);
};

struct LossLog {
  std::vector<Scalar> losses;  // index = step
};

void save_loss_log(const LossLog& log, const std::string& path);

/// One forward/backward/update on a single scene; returns the loss. Only
/// trainable parameters move.
Scalar train_step(Model& model, const data::PointCloud& cloud, Sgd& opt);

/// Full supervised training of backbone + temporary head on the pretraining
/// distribution, then the backbone is frozen. The head stays trainable (and is
/// discarded by callers that save backbone-only checkpoints).
Model pretrain_backbone(const BackboneConfig& bb, const std::vector<data::PointCloud>& scenes,
                        int epochs, Scalar lr, Scalar momentum, std::uint64_t seed,
                        LossLog* log = nullptr);

/// Fine-tunes the trainable set (overlay + head) for a number of steps,
/// sampling scenes in a seeded shuffled order per epoch.
LossLog finetune(Model& model, const std::vector<data::PointCloud>& scenes, int steps, Scalar lr,
                 Scalar momentum, std::uint64_t seed);

data::ConfusionMatrix evaluate_confusion(const Model& model,
                                         const std::vector<data::PointCloud>& scenes,
                                         int max_threads = 1);
data::Metrics evaluate(const Model& model, const std::vector<data::PointCloud>& scenes,
                       int max_threads = 1);

/// Analytic-vs-finite-difference check of the training loss gradient for
/// every trainable parameter of the model on one scene.
ad::GradCheckResult model_gradcheck(Model& model, const data::PointCloud& cloud,
                                    Scalar h = 1e-5);

void randomize_trainable(ad::ParameterStore& store, std::uint64_t seed, Scalar bound = 1.0);

/// Randomizes the trainable set to a point where every nonzero relu input
/// clears the given kink margin (zero-initialized projections would otherwise
/// make half the gradients vacuously zero, and a pre-activation inside the
/// finite-difference step invalidates the comparison). Tries consecutive
/// seeds; returns the one used.
std::uint64_t randomize_for_gradcheck(Model& model, const data::PointCloud& cloud,
                                      std::uint64_t seed, Scalar margin = 1e-4,
                                      int attempts = 32);

/// Scene-level parallelism cap from PTPA_THREADS (defaults to 1).
int env_thread_cap();

}  // namespace ptpa
