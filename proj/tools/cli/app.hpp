#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "common.hpp"

namespace nback::app {

struct GenArgs {
  int n = 2;
  std::string condition = "uniform26";
  int trials = 200;
  std::uint64_t seed = 0;
  int turns = kDefaultTurns;
  std::string out;  // trial JSONL path; stdout when empty
};

struct RunArgs {
  std::string subject;
  std::vector<std::string> conditions = {"uniform26"};
  std::vector<int> loads = {1, 2, 3, 4};
  int trials = 200;
  std::vector<std::string> modes = {"tf"};
  std::uint64_t seed = 0;
  std::string trials_file;  // evaluate these trials instead of generating
  std::vector<std::string> hidden;
  bool batch_tf = false;
  std::string out;
  int workers = 0;
};

struct TrainArgs {
  std::uint64_t seed = 1;
  int epochs = 100;
  int warmup_epochs = 5;
  int batch = 128;
  int trials_per_epoch = 10000;
  double lr = 3e-4;
  double weight_decay = 0.01;
  int patience = 3;
  int eval_trials = 200;
  std::vector<int> loads = {1, 2, 3, 4, 6, 8};
  std::string out;
  int workers = 0;
};

struct ProbeArgs {
  std::string hidden;
  std::string transcripts;
  int n = 0;  // inferred from the transcripts when 0
  std::string subject;  // source of identity states and readout directions
  int min_samples = 5;
  std::string out;
};

struct InterveneArgs {
  std::string subject;
  std::vector<int> loads = {1, 2, 3, 4};
  std::vector<double> alphas = {0.3, 0.5, 1.0};
  int max_directions = 5;
  int k = 25;
  bool no_singles = false;
  bool no_prefixes = false;
  int trials = 50;
  std::uint64_t seed = 0;
  std::string mode = "tf";
  std::string condition = "uniform26";
  std::string layer;   // defaults to the subject's intervention site
  std::string family;  // identity family; the family average when empty
  std::string subspace;  // precomputed subspace file
  std::string out;
  int workers = 0;
};

struct HumanArgs {
  std::string studies;
  std::vector<int> levels = {1, 2, 3, 4};
  int resamples = 2000;
  std::uint64_t seed = 0;
  std::optional<double> human_chance;
  std::string out;
  int workers = 0;
};

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
};

struct ServeArgs {
  std::string subject;
  int http_port = -1;
  std::string host = "127.0.0.1";
};

json to_json(const GenArgs& a);
json to_json(const RunArgs& a);
json to_json(const TrainArgs& a);
json to_json(const ProbeArgs& a);
json to_json(const InterveneArgs& a);
json to_json(const HumanArgs& a);
json to_json(const ReportArgs& a);

int cmd_gen(const GenArgs& args, std::ostream& out, std::ostream& log);
int cmd_run(const RunArgs& args, std::ostream& log);
int cmd_train(const TrainArgs& args, std::ostream& log);
int cmd_probe(const ProbeArgs& args, std::ostream& log);
int cmd_intervene(const InterveneArgs& args, std::ostream& log);
int cmd_human(const HumanArgs& args, std::ostream& log);
int cmd_report(const ReportArgs& args, std::ostream& log);
int cmd_serve(const ServeArgs& args, std::istream& in, std::ostream& out, std::ostream& log);

// Parses argv (without the program name), dispatches, and maps errors to exit codes.
int main_entry(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace nback::app
