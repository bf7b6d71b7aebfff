#include "nback/tiny/tiny_subject.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "nback/error.hpp"
#include "nback/intervention.hpp"

namespace nback::tiny {

std::map<std::string, Eigen::MatrixXd> minimal_identity_states(const ModelConfig& config,
                                                               const std::shared_ptr<const Params<float>>& params) {
  const auto names = config.capture_names();
  std::map<std::string, Eigen::MatrixXd> out;
  for (const auto& n : names) out[n] = Eigen::MatrixXd(kLetterCount, config.d_model);
  Session session(config, params);
  std::vector<RowVec<float>> caps;
  for (int c = 0; c < kLetterCount; ++c) {
    session.reset();
    session.step(config.task_token(1));
    session.step(c, Letter::from_index(c), &caps);
    for (std::size_t i = 0; i < names.size(); ++i) out[names[i]].row(c) = caps[i].cast<double>();
  }
  return out;
}

namespace {

class TinySubject final : public Subject {
 public:
  TinySubject(const ModelConfig& config, std::shared_ptr<const Params<float>> params, TinySubjectOptions options)
      : config_(config), params_(std::move(params)), options_(std::move(options)), session_(config_, params_) {
    if (options_.leak_scale != 0.0 && !options_.leak_vectors) {
      auto ids = minimal_identity_states(config_, params_);
      options_.leak_vectors = std::make_shared<const Eigen::MatrixXd>(ids.at(kInterventionLayer));
    }
    if (options_.leak_vectors) {
      Eigen::MatrixXd centered = *options_.leak_vectors;
      centered.rowwise() -= centered.colwise().mean();
      leak_rows_ = std::move(centered);
    }
    install_hook();
  }

  std::string name() const override {
    std::string n = "tiny:" + options_.label;
    if (options_.leak_scale != 0.0) {
      std::ostringstream s;
      s << options_.leak_scale;
      n += "?leak=" + s.str();
    }
    return n;
  }

  Capabilities capabilities() const override {
    Capabilities c;
    c.dist = true;
    c.hidden = true;
    c.readout = true;
    c.intervene = true;
    c.layer_count = config_.layers;
    c.d_model = config_.d_model;
    c.layer_ids = config_.capture_names();
    return c;
  }

  void open_session(const SessionInfo& info) override {
    if (!config_.supports_load(info.n)) {
      throw ParameterError("tinyformer was not trained for n=" + std::to_string(info.n));
    }
    session_.reset();
    session_.step(config_.task_token(info.n));
    n_ = info.n;
  }

  TurnReply respond(const ConversationContext& ctx, const std::vector<std::string>& want_hidden) override {
    if (ctx.turn != session_.position() - 1) {
      throw SequencingError("tinyformer session expects turn " + std::to_string(session_.position() - 1));
    }
    if (ctx.n != n_) throw SequencingError("context load differs from the session load");
    std::vector<RowVec<float>> caps;
    const RowVec<float> logits = session_.step(ctx.current_stimulus.index(), ctx.current_stimulus,
                                               want_hidden.empty() ? nullptr : &caps);
    TurnReply reply;
    const double mx = static_cast<double>(logits.maxCoeff());
    double total = 0.0;
    for (int i = 0; i < kSymbolCount; ++i) {
      reply.raw[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(logits(i)) - mx);
      total += reply.raw[static_cast<std::size_t>(i)];
    }
    for (auto& p : reply.raw) p /= total;
    if (!want_hidden.empty()) {
      const auto names = config_.capture_names();
      for (const auto& id : want_hidden) {
        auto it = std::find(names.begin(), names.end(), id);
        if (it == names.end()) throw CapabilityError("tinyformer has no capture point '" + id + "'");
        const auto& v = caps[static_cast<std::size_t>(it - names.begin())];
        reply.states[id] = std::vector<float>(v.data(), v.data() + v.size());
      }
    }
    return reply;
  }

  void set_intervention(std::optional<Intervention> intervention) override {
    if (intervention) {
      if (!intervention->subspace) throw ParameterError("intervention without a subspace");
      if (intervention->subspace->d() != config_.d_model) {
        throw ParameterError("intervention subspace dimension does not match the model");
      }
    }
    intervention_ = std::move(intervention);
    install_hook();
  }

  IdentityStates identity_states() override {
    IdentityStates s;
    s["minimal"] = minimal_identity_states(config_, params_);
    return s;
  }

  Eigen::MatrixXd readout_directions() override {
    const auto w = params_->tensor("out.w");
    return w.topRows(kLetterCount).cast<double>();
  }

 private:
  void install_hook() {
    const bool leak = options_.leak_scale != 0.0;
    const bool remove = intervention_ && intervention_->alpha != 0.0;
    if (!leak && !remove) {
      session_.clear_hook();
      return;
    }
    session_.set_hook(
        [this, leak, remove](Eigen::Ref<RowVec<float>> h, Letter current) {
          Eigen::RowVectorXd x = h.cast<double>();
          if (leak) x += options_.leak_scale * leak_rows_.row(current.index());
          if (remove) x = apply_removal(x, *intervention_->subspace, intervention_->alpha);
          h = x.cast<float>();
        },
        kInterventionBlock);
  }

  ModelConfig config_;
  std::shared_ptr<const Params<float>> params_;
  TinySubjectOptions options_;
  Eigen::MatrixXd leak_rows_;
  Session session_;
  std::optional<Intervention> intervention_;
  int n_ = 0;
};

}  // namespace

std::unique_ptr<Subject> make_tiny_subject(const ModelConfig& config, std::shared_ptr<const Params<float>> params,
                                           TinySubjectOptions options) {
  return std::make_unique<TinySubject>(config, std::move(params), std::move(options));
}

}  // namespace nback::tiny
