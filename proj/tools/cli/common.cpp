#include "common.hpp"

#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <limits>

#include "nback/blobfile.hpp"
#include "nback/error.hpp"
#include "nback/rng.hpp"

#ifndef NBACK_VERSION
#define NBACK_VERSION "unknown"
#endif

namespace nback::app {

std::vector<TrialSpec> trial_set_for(const Condition& condition, int n, int trials, std::uint64_t seed) {
  const std::uint64_t master = derive_seed(derive_seed(seed, label_hash(condition.name())), static_cast<std::uint64_t>(n));
  return make_trial_set(condition, n, trials, master);
}

int resolve_workers(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("NBACK_WORKERS")) {
    try {
      const int v = std::stoi(env);
      if (v > 0) return v;
    } catch (const std::exception&) {
    }
    throw ParameterError(std::string("NBACK_WORKERS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

void write_manifest(const std::filesystem::path& dir, const std::string& command, const json& config,
                    const std::vector<std::string>& artifacts, const std::string& manifest_name) {
  json digests = json::object();
  for (const auto& a : artifacts) digests[a] = "fnv1a64:" + file_digest(dir / a);
  const json manifest = {{"tool", "nback"},
                         {"version", NBACK_VERSION},
                         {"command", command},
                         {"config", config},
                         {"artifacts", digests}};
  auto out = open_output(dir / manifest_name);
  out << manifest.dump(2) << '\n';
}

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParameterError("cannot write " + path.string());
  return out;
}

std::string num(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream s;
  s << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return s.str();
}

CsvWriter::CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
    : out_(open_output(path)) {
  for (const auto& h : header) cell(h);
  end_row();
}

CsvWriter& CsvWriter::cell(const std::string& v) {
  if (!first_) out_ << ',';
  out_ << csv_quote(v);
  first_ = false;
  return *this;
}

CsvWriter& CsvWriter::cell(double v) { return cell(num(v)); }
CsvWriter& CsvWriter::cell(int v) { return cell(std::to_string(v)); }
CsvWriter& CsvWriter::cell(std::size_t v) { return cell(std::to_string(v)); }
CsvWriter& CsvWriter::empty() { return cell(std::string{}); }

void CsvWriter::end_row() {
  out_ << '\n';
  first_ = true;
}

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return static_cast<int>(i);
  }
  return -1;
}

std::string csv_quote(const std::string& v) {
  if (v.find_first_of(",\"\r\n") == std::string::npos) return v;
  std::string q = "\"";
  for (char c : v) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + '"';
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cells.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cells.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.emplace_back();
    } else {
      cells.back() += c;
    }
  }
  return cells;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot read " + path.string());
  CsvTable t;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (header) {
      t.header = std::move(cells);
      header = false;
    } else {
      t.rows.push_back(std::move(cells));
    }
  }
  return t;
}

std::string safe_name(const std::string& text) {
  std::string s;
  for (char c : text) s += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
  return s;
}

}  // namespace nback::app
