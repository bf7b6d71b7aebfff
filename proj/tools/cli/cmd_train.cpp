#include <iomanip>
#include <iostream>

#include "app.hpp"
#include "nback/tiny/checkpoint.hpp"

namespace nback::app {

int cmd_train(const TrainArgs& args, std::ostream& log) {
  tiny::ModelConfig model;
  model.loads = args.loads;
  model.validate();
  tiny::TrainConfig train;
  train.seed = args.seed;
  train.epochs = args.epochs;
  train.warmup_epochs = args.warmup_epochs;
  train.batch = args.batch;
  train.trials_per_epoch = args.trials_per_epoch;
  train.lr = args.lr;
  train.weight_decay = args.weight_decay;
  train.early_stop_patience = args.patience;
  train.eval_trials_per_load = args.eval_trials;
  train.workers = resolve_workers(args.workers);
  train.validate();

  const auto result = tiny::train(model, train, [&](const tiny::EpochStats& s) {
    log << "epoch " << s.epoch << " loss " << std::setprecision(5) << s.train_loss << " lr " << s.lr << " |";
    for (const auto& [n, a] : s.eval_accuracy) log << ' ' << n << ':' << a;
    log << " (" << std::setprecision(3) << s.seconds << " s)\n" << std::flush;
  });

  namespace fs = std::filesystem;
  const fs::path dir(args.out);
  fs::create_directories(dir);
  tiny::Checkpoint ckpt{model, train, result.params, result.curve, result.epochs_run};
  tiny::save_checkpoint(dir / "model.ckpt", ckpt);

  std::vector<std::string> header = {"epoch", "train_loss", "lr"};
  for (int n : args.loads) header.push_back("acc_n" + std::to_string(n));
  {
    CsvWriter w(dir / "train_curve.csv", header);
    for (const auto& s : result.curve) {
      w.cell(s.epoch).cell(s.train_loss).cell(s.lr);
      for (int n : args.loads) w.cell(s.eval_accuracy.at(n));
      w.end_row();
    }
  }
  write_manifest(dir, "train-tiny", to_json(args), {"model.ckpt", "train_curve.csv"});
  log << "trained " << result.epochs_run << " epochs" << (result.stopped_early ? " (early stop)" : "") << " -> "
      << (dir / "model.ckpt").string() << '\n';
  return kExitOk;
}

}  // namespace nback::app
