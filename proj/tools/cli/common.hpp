#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nback/stimgen.hpp"

namespace nback::app {

using nlohmann::json;

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitSubject = 3, kExitNumerical = 4 };

// Trial set of a (condition, n) cell under a master seed; shared by gen, run and report.
std::vector<TrialSpec> trial_set_for(const Condition& condition, int n, int trials, std::uint64_t seed);

// Worker count: explicit flag, else NBACK_WORKERS, else 1.
int resolve_workers(int flag_value);

// Writes the manifest (manifest.json unless named) into dir: command, version, resolved config, artifact digests.
// Worker counts and output locations are left out so reruns produce identical manifests.
void write_manifest(const std::filesystem::path& dir, const std::string& command, const json& config,
                    const std::vector<std::string>& artifacts, const std::string& manifest_name = "manifest.json");

std::ofstream open_output(const std::filesystem::path& path);

// Full-precision text for CSV cells; NaN becomes an empty cell.
std::string num(double v);

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);
  CsvWriter& cell(const std::string& v);
  CsvWriter& cell(double v);
  CsvWriter& cell(int v);
  CsvWriter& cell(std::size_t v);
  CsvWriter& empty();
  void end_row();

 private:
  std::ofstream out_;
  bool first_ = true;
};

// RFC 4180 quoting: cells holding commas, quotes or line breaks are wrapped in double quotes.
std::string csv_quote(const std::string& v);
std::vector<std::string> split_csv_line(const std::string& line);

// Reads a single-line-per-record CSV into header + rows.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  int column(const std::string& name) const;
};
CsvTable read_csv(const std::filesystem::path& path);

std::string safe_name(const std::string& text);

}  // namespace nback::app
