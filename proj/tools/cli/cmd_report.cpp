#include <iostream>

#include "app.hpp"
#include "nback/error.hpp"

namespace nback::app {

namespace {

struct Table {
  const char* source;
  const char* target;
};

constexpr Table kTables[] = {
    {"capacity_by_condition.csv", "capacity_plot.csv"},
    {"kernel_by_condition.csv", "kernel_plot.csv"},
    {"frontier.csv", "frontier_plot.csv"},
    {"contrasts.csv", "contrasts_table.csv"},
    {"probes.csv", "probes_plot.csv"},
    {"correlations.csv", "correlations_table.csv"},
    {"sweep_summary.csv", "intervention_plot.csv"},
    {"human_reference.csv", "human_plot.csv"},
    {"human_reference_cc.csv", "human_cc_plot.csv"},
};

}  // namespace

int cmd_report(const ReportArgs& args, std::ostream& log) {
  namespace fs = std::filesystem;
  for (const auto& in : args.inputs) {
    if (!fs::is_directory(in)) throw ParameterError("report: input " + in + " is not a directory");
  }
  const fs::path dir(args.out);
  fs::create_directories(dir);
  std::vector<std::string> artifacts;
  for (const auto& table : kTables) {
    std::vector<std::string> header;
    std::vector<std::pair<std::string, CsvTable>> parts;
    for (const auto& in : args.inputs) {
      const fs::path p = fs::path(in) / table.source;
      if (!fs::exists(p)) continue;
      auto t = read_csv(p);
      if (header.empty()) {
        header = t.header;
      } else if (t.header != header) {
        throw ParameterError("report: " + p.string() + " has a different header from earlier inputs");
      }
      parts.emplace_back(fs::path(in).lexically_normal().filename().string(), std::move(t));
    }
    if (parts.empty()) continue;
    std::vector<std::string> out_header = {"source"};
    out_header.insert(out_header.end(), header.begin(), header.end());
    CsvWriter w(dir / table.target, out_header);
    for (const auto& [source, t] : parts) {
      for (const auto& row : t.rows) {
        w.cell(source);
        for (std::size_t i = 0; i < header.size(); ++i) w.cell(i < row.size() ? row[i] : std::string{});
        w.end_row();
      }
    }
    artifacts.emplace_back(table.target);
  }
  if (artifacts.empty()) throw ParameterError("report: no known tables found in the inputs");
  write_manifest(dir, "report", to_json(args), artifacts);
  log << "report: " << artifacts.size() << " tables -> " << dir.string() << '\n';
  return kExitOk;
}

}  // namespace nback::app
