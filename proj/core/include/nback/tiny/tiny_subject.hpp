#pragma once

#include <memory>
#include <string>

#include <Eigen/Core>

#include "nback/subject.hpp"
#include "nback/tiny/model.hpp"

namespace nback::tiny {

// Residual site shared by interventions and the leakage control: input of block index 1.
inline constexpr int kInterventionBlock = 1;
inline const std::string kInterventionLayer = "block1";

struct TinySubjectOptions {
  std::string label = "tiny";
  // Constructed-leakage control: adds leak_scale * (s_c - mean_c s_c) for the current letter c at
  // the intervention site, before any removal. s rows default to the model's own identity
  // states at that site.
  double leak_scale = 0.0;
  std::shared_ptr<const Eigen::MatrixXd> leak_vectors;
};

// Identity states at every capture point from the minimal context [task_token(1), c], read
// at the letter position. Returned as capture id -> 26 x d.
std::map<std::string, Eigen::MatrixXd> minimal_identity_states(const ModelConfig& config,
                                                               const std::shared_ptr<const Params<float>>& params);

std::unique_ptr<Subject> make_tiny_subject(const ModelConfig& config, std::shared_ptr<const Params<float>> params,
                                           TinySubjectOptions options = {});

}  // namespace nback::tiny
