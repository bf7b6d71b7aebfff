#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "nback/stimgen.hpp"
#include "nback/subjects.hpp"
#include "nback/trial_engine.hpp"

namespace nback::testing {

inline std::vector<Transcript> run_set(const std::string& subject_spec, const Condition& condition, int n, int trials,
                                       std::uint64_t seed, EvalMode mode = EvalMode::teacher_forced) {
  auto subject = make_builtin_subject(BuiltinSpec::parse(subject_spec));
  std::vector<Transcript> out;
  for (const auto& t : make_trial_set(condition, n, trials, seed)) out.push_back(run_trial(*subject, t, mode).transcript);
  return out;
}

inline std::vector<Letter> letters(const std::string& s) { return letters_from_string(s); }

// Scratch directory under NBACK_TMPDIR (or the system temp dir), removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    const char* base = std::getenv("NBACK_TMPDIR");
    std::filesystem::path root = base ? std::filesystem::path(base) : std::filesystem::temp_directory_path();
    std::random_device rd;
    path_ = root / ("nback-test-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

}  // namespace nback::testing
