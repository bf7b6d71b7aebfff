#include "nback/tiny/train.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

#include "nback/error.hpp"
#include "nback/parallel.hpp"

namespace nback::tiny {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ParameterError("lr must be > 0");
  if (weight_decay < 0.0) throw ParameterError("weight_decay must be >= 0");
  if (batch < 1) throw ParameterError("batch must be >= 1");
  if (epochs < 1) throw ParameterError("epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) {
    throw ParameterError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs");
  }
  if (trials_per_epoch < 1) throw ParameterError("trials_per_epoch must be >= 1");
  if (eval_trials_per_load < 1) throw ParameterError("eval_trials_per_load must be >= 1");
  if (chunk < 1) throw ParameterError("chunk must be >= 1");
  if (turns < 2) throw ParameterError("turns must be >= 2");
}

double lr_at(long step, const TrainConfig& config) {
  if (step < 0) throw ParameterError("step must be >= 0");
  const long warmup = config.warmup_steps();
  const long total = config.total_steps();
  if (step < warmup) return config.lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= total) return 0.0;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

HeldOut make_heldout(const ModelConfig& mconfig, const TrainConfig& tconfig) {
  HeldOut out;
  const std::uint64_t root = derive_seed(tconfig.seed, label_hash("heldout"));
  for (int n : mconfig.loads) {
    auto trials = make_trial_set(Condition::uniform26(), n, tconfig.eval_trials_per_load,
                                 derive_seed(root, static_cast<std::uint64_t>(n)), "", tconfig.turns);
    auto& seqs = out.by_load[n];
    for (const auto& t : trials) seqs.push_back(encode_trial(mconfig, t.sequence, n));
  }
  return out;
}

std::map<int, double> evaluate(const ModelConfig& mconfig, const Params<float>& params,
                               const HeldOut& testset, int workers) {
  std::map<int, double> acc;
  constexpr int kChunk = 32;
  for (const auto& [n, seqs] : testset.by_load) {
    const int chunks = static_cast<int>((seqs.size() + kChunk - 1) / kChunk);
    std::vector<std::pair<long, long>> tallies(static_cast<std::size_t>(chunks));
    parallel_for(chunks, workers, [&](int c) {
      const std::size_t begin = static_cast<std::size_t>(c) * kChunk;
      const std::size_t end = std::min(seqs.size(), begin + kChunk);
      const std::span<const TokenSequence> part(seqs.data() + begin, end - begin);
      const Mat<float> logits = forward_batch(mconfig, params, part);
      long correct = 0, total = 0;
      const int len = part.front().length();
      for (std::size_t s = 0; s < part.size(); ++s) {
        for (int i = 1; i < len; ++i) {
          const int t = i - 1;
          if (t < n) continue;
          Eigen::Index arg = 0;
          logits.row(static_cast<Eigen::Index>(s) * len + i).maxCoeff(&arg);
          correct += static_cast<int>(arg) == part[s].targets[static_cast<std::size_t>(i)];
          ++total;
        }
      }
      tallies[static_cast<std::size_t>(c)] = {correct, total};
    });
    long correct = 0, total = 0;
    for (const auto& [c, t] : tallies) {
      correct += c;
      total += t;
    }
    if (total == 0) throw UndefinedValueError("no evaluable positions in held-out set");
    acc[n] = static_cast<double>(correct) / static_cast<double>(total);
  }
  return acc;
}

TrainResult train(const ModelConfig& mconfig, const TrainConfig& tconfig,
                  const EpochCallback& on_epoch) {
  mconfig.validate();
  tconfig.validate();
  TrainResult result;
  result.params = init_params<float>(mconfig, tconfig.seed);
  Params<float>& params = result.params;
  const auto& layout = *params.layout;
  const std::size_t np = layout.total();

  // Decay applies to matrices and embeddings, not to norm gains or biases.
  std::vector<float> decay_mask(np, 0.0f);
  for (const auto& t : layout.tensors()) {
    if (t.rows > 1) std::fill_n(decay_mask.begin() + static_cast<long>(t.offset), t.size(), 1.0f);
  }
  std::vector<float> m(np, 0.0f), v(np, 0.0f);

  const HeldOut heldout = make_heldout(mconfig, tconfig);
  const Stream dropout_root(tconfig.seed, "dropout");
  const int nloads = static_cast<int>(mconfig.loads.size());
  long step = 0;
  int perfect_streak = 0;

  for (int epoch = 0; epoch < tconfig.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // Fresh trials every epoch, loads mixed uniformly.
    Stream data_rng = Stream(tconfig.seed, "train").child(static_cast<std::uint64_t>(epoch));
    std::vector<TokenSequence> data;
    data.reserve(static_cast<std::size_t>(tconfig.trials_per_epoch));
    for (int i = 0; i < tconfig.trials_per_epoch; ++i) {
      const int n = mconfig.loads[data_rng.uniform_below(static_cast<std::uint32_t>(nloads))];
      const std::uint64_t seed = data_rng.next_u64();
      data.push_back(encode_trial(mconfig, gen_sequence(Condition::uniform26(), seed, tconfig.turns), n));
    }
    std::vector<std::uint64_t> global_index(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) global_index[i] = i;

    double epoch_loss = 0.0;
    std::size_t epoch_count = 0;
    double last_lr = 0.0;
    for (int b0 = 0; b0 < tconfig.trials_per_epoch; b0 += tconfig.batch) {
      const int b1 = std::min(tconfig.trials_per_epoch, b0 + tconfig.batch);
      std::size_t positions = 0;
      for (int i = b0; i < b1; ++i) {
        for (int tg : data[static_cast<std::size_t>(i)].targets) positions += tg != kIgnore;
      }
      const double scale = 1.0 / static_cast<double>(positions);
      const int nchunks = (b1 - b0 + tconfig.chunk - 1) / tconfig.chunk;
      std::vector<Params<float>> grads(static_cast<std::size_t>(nchunks));
      std::vector<LossResult> losses(static_cast<std::size_t>(nchunks));
      const DropoutSource dropout{dropout_root.child(static_cast<std::uint64_t>(step)),
                                  std::span<const std::uint64_t>(global_index)};
      parallel_for(nchunks, tconfig.workers, [&](int c) {
        const int s0 = b0 + c * tconfig.chunk;
        const int s1 = std::min(b1, s0 + tconfig.chunk);
        auto& g = grads[static_cast<std::size_t>(c)];
        g = Params<float>(params.layout);
        const std::span<const TokenSequence> part(data.data() + s0, static_cast<std::size_t>(s1 - s0));
        const DropoutSource local{dropout.stream, dropout.global_index.subspan(static_cast<std::size_t>(s0))};
        losses[static_cast<std::size_t>(c)] = loss_and_grads<float>(mconfig, params, part, scale, g, &local);
      });
      auto& gsum = grads.front().data;
      for (std::size_t c = 1; c < grads.size(); ++c) {
        const auto& gc = grads[c].data;
        for (std::size_t i = 0; i < np; ++i) gsum[i] += gc[i];
      }
      double batch_loss = 0.0;
      for (const auto& l : losses) {
        batch_loss += l.loss_sum;
        epoch_count += l.count;
      }
      if (!std::isfinite(batch_loss)) {
        throw NumericalError("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                             ", step " + std::to_string(step));
      }
      epoch_loss += batch_loss;

      const double lr = lr_at(step, tconfig);
      last_lr = lr;
      ++step;
      const double bc1 = 1.0 - std::pow(tconfig.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(tconfig.beta2, static_cast<double>(step));
      const auto b1f = static_cast<float>(tconfig.beta1), b2f = static_cast<float>(tconfig.beta2);
      const auto lrf = static_cast<float>(lr), wdf = static_cast<float>(tconfig.weight_decay);
      const auto epsf = static_cast<float>(tconfig.eps);
      const auto ibc1 = static_cast<float>(1.0 / bc1), ibc2 = static_cast<float>(1.0 / bc2);
      for (std::size_t i = 0; i < np; ++i) {
        const float g = gsum[i];
        m[i] = b1f * m[i] + (1.0f - b1f) * g;
        v[i] = b2f * v[i] + (1.0f - b2f) * g * g;
        float p = params.data[i];
        p -= lrf * wdf * decay_mask[i] * p;
        p -= lrf * (m[i] * ibc1) / (std::sqrt(v[i] * ibc2) + epsf);
        params.data[i] = p;
      }
    }

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.train_loss = epoch_loss / static_cast<double>(epoch_count);
    stats.lr = last_lr;
    stats.eval_accuracy = evaluate(mconfig, params, heldout, tconfig.workers);
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.curve.push_back(stats);
    result.epochs_run = epoch + 1;
    if (on_epoch) on_epoch(stats);

    bool perfect = true;
    for (const auto& [n, a] : stats.eval_accuracy) perfect = perfect && a == 1.0;
    perfect_streak = perfect ? perfect_streak + 1 : 0;
    if (tconfig.early_stop_patience > 0 && perfect_streak >= tconfig.early_stop_patience) {
      result.stopped_early = epoch + 1 < tconfig.epochs;
      break;
    }
  }
  return result;
}

}  // namespace nback::tiny
