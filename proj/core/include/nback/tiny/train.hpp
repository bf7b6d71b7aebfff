#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "nback/tiny/model.hpp"

namespace nback::tiny {

struct TrainConfig {
  double lr = 3e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch = 128;
  int epochs = 100;
  int warmup_epochs = 5;
  int trials_per_epoch = 10000;
  int eval_trials_per_load = 200;
  int turns = kDefaultTurns;
  std::uint64_t seed = 1;
  // Stop once every load is at 1.0 held-out accuracy for this many consecutive epochs (0 = never).
  int early_stop_patience = 3;
  // Sequences per gradient chunk; fixed so results do not depend on the worker count.
  int chunk = 16;
  int workers = 1;

  void validate() const;
  int steps_per_epoch() const { return (trials_per_epoch + batch - 1) / batch; }
  int total_steps() const { return epochs * steps_per_epoch(); }
  int warmup_steps() const { return warmup_epochs * steps_per_epoch(); }
};

// Linear warmup from 0 to the peak, then cosine decay to 0 at total_steps.
double lr_at(long step, const TrainConfig& config);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double lr = 0.0;
  std::map<int, double> eval_accuracy;  // load -> held-out top-1 accuracy
  double seconds = 0.0;
};

struct TrainResult {
  Params<float> params;
  std::vector<EpochStats> curve;
  int epochs_run = 0;
  bool stopped_early = false;
};

// Fixed held-out set: eval_trials_per_load uniform26 trials per load.
struct HeldOut {
  std::map<int, std::vector<TokenSequence>> by_load;
};
HeldOut make_heldout(const ModelConfig& mconfig, const TrainConfig& tconfig);

// Per-load top-1 accuracy on positions t >= n (evaluation mode, no dropout).
std::map<int, double> evaluate(const ModelConfig& mconfig, const Params<float>& params,
                               const HeldOut& testset, int workers = 1);

using EpochCallback = std::function<void(const EpochStats&)>;

// Trains from scratch. Throws NumericalError when the loss becomes non-finite.
TrainResult train(const ModelConfig& mconfig, const TrainConfig& tconfig,
                  const EpochCallback& on_epoch = nullptr);

}  // namespace nback::tiny
