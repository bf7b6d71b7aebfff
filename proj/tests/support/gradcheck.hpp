#pragma once

// Central finite-difference oracle for the tinyformer gradients, fully in double precision.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "nback/stimgen.hpp"
#include "nback/tiny/model.hpp"

namespace nback::testing {

struct FamilyCheck {
  std::string name;
  double relative_l2 = 0.0;    // ||fd - analytic|| / max(||fd||, ||analytic||)
  double worst_entry = 0.0;    // max entry relative error among entries above the absolute floor
  std::size_t entries = 0;
};

struct GradCheckReport {
  std::vector<FamilyCheck> families;
  double loss = 0.0;
  bool passed(double tol) const {
    return std::all_of(families.begin(), families.end(), [&](const FamilyCheck& f) { return f.relative_l2 <= tol; });
  }
  bool entries_passed(double tol) const {
    return std::all_of(families.begin(), families.end(), [&](const FamilyCheck& f) { return f.worst_entry <= tol; });
  }
};

// A d_model = 8 model with unit-variance embeddings and weights large enough that every family
// carries gradient signal.
// Entries whose finite-difference and analytic values agree to within abs_floor count as exact.
inline GradCheckReport gradient_check(double dropout, double step = 1e-3, double abs_floor = 1e-8) {
  tiny::ModelConfig c;
  c.d_model = 8;
  c.mlp_hidden = 32;
  c.loads = {1, 2};
  c.dropout = dropout;
  auto p = tiny::init_params<double>(c, 3);
  Stream rr(9, "gradcheck-weights");
  for (const auto& t : p.layout->tensors()) {
    const bool gain = t.name.ends_with(".g");
    const double sd = t.name == "tok_emb" ? 1.0 : 0.5 / std::sqrt(double(t.rows));
    for (std::size_t i = 0; i < t.size(); ++i) p.data[t.offset + i] = gain ? 1.0 + 0.1 * rr.normal() : sd * rr.normal();
  }
  std::vector<tiny::TokenSequence> batch;
  for (int i = 0; i < 3; ++i) {
    batch.push_back(tiny::encode_trial(c, gen_sequence(Condition::uniform26(), 10 + i, 10), 1 + (i % 2)));
  }
  const std::vector<std::uint64_t> index = {0, 1, 2};
  const tiny::DropoutSource src{Stream(5, "gradcheck-dropout"), index};
  const tiny::DropoutSource* dsrc = dropout > 0 ? &src : nullptr;

  tiny::Params<double> g(p.layout);
  std::size_t count = 0;
  for (const auto& s : batch) {
    for (int i = 0; i < s.length(); ++i) count += s.loss_mask(i) ? 1 : 0;
  }
  const auto r = tiny::loss_and_grads<double>(c, p, batch, 1.0 / double(count), g, dsrc);

  GradCheckReport rep;
  rep.loss = r.loss_sum / double(r.count);
  for (const auto& t : p.layout->tensors()) {
    FamilyCheck f;
    f.name = t.name;
    f.entries = t.size();
    double diff2 = 0, fd2 = 0, an2 = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const std::size_t k = t.offset + i;
      const double orig = p.data[k];
      p.data[k] = orig + step;
      const double lp = tiny::mean_loss<double>(c, p, batch, dsrc);
      p.data[k] = orig - step;
      const double lm = tiny::mean_loss<double>(c, p, batch, dsrc);
      p.data[k] = orig;
      const double fd = (lp - lm) / (2 * step);
      const double an = g.data[k];
      diff2 += (fd - an) * (fd - an);
      fd2 += fd * fd;
      an2 += an * an;
      if (std::abs(fd - an) > abs_floor) {
        f.worst_entry = std::max(f.worst_entry, std::abs(fd - an) / std::max(std::abs(fd), std::abs(an)));
      }
    }
    const double scale = std::sqrt(std::max(fd2, an2));
    f.relative_l2 = scale > 0 ? std::sqrt(diff2) / scale : 0.0;
    rep.families.push_back(f);
  }
  return rep;
}

}  // namespace nback::testing
