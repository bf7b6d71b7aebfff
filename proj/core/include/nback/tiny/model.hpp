#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/StdVector>

#include "nback/rng.hpp"
#include "nback/stimgen.hpp"
#include "nback/symbols.hpp"

namespace nback::tiny {

inline constexpr int kOutputVocab = kSymbolCount;  // logits over A..Z and dash
inline constexpr int kIgnore = -1;

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// Parameter storage aligned for the widest vector unit, with every tensor starting on an
// aligned boundary, so Eigen's vectorized loops split identically on every allocation.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;
inline constexpr std::size_t kTensorAlignment = 16;  // elements

struct ModelConfig {
  int layers = 2;
  int heads = 1;
  int d_model = 48;
  int mlp_hidden = 192;
  double dropout = 0.1;
  int max_seq = 64;
  std::vector<int> loads = {1, 2, 3, 4, 6, 8};
  double rope_base = 10000.0;

  void validate() const;
  // Input tokens: 0..25 letters, 26 dash (unused as input), then one task token per load.
  int input_vocab() const { return kSymbolCount + static_cast<int>(loads.size()); }
  int task_token(int n) const;  // throws ParameterError for loads the model was not built for
  bool supports_load(int n) const;
  // Capture points: embedding output and the output of every block.
  int capture_count() const { return layers + 1; }
  std::vector<std::string> capture_names() const;  // "emb", "block1", "block2", ...
};

// [task_token(n), x_0, ..., x_{T-1}] with targets [ignore, y_0, ..., y_{T-1}].
struct TokenSequence {
  std::vector<int> tokens;
  std::vector<int> targets;
  int length() const { return static_cast<int>(tokens.size()); }
  bool loss_mask(int pos) const { return targets[static_cast<std::size_t>(pos)] != kIgnore; }
};

TokenSequence encode_trial(const ModelConfig& config, const StimulusSequence& seq, int n);

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

// Named views into one flat parameter vector.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& config);

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& at(const std::string& name) const;
  std::size_t total() const { return total_; }

  // Offsets of frequently used tensors.
  struct Block {
    std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::size_t tok_emb = 0, lnf_g = 0, lnf_b = 0, out_w = 0, out_b = 0;
  std::vector<Block> blocks;

 private:
  std::size_t add(const std::string& name, int rows, int cols);
  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

template <typename T>
struct Params {
  std::shared_ptr<const ParamLayout> layout;
  AlignedVector<T> data;

  Params() = default;
  explicit Params(std::shared_ptr<const ParamLayout> l) : layout(std::move(l)), data(layout->total(), T(0)) {}

  Eigen::Map<Mat<T>> mat(std::size_t offset, int rows, int cols) {
    return Eigen::Map<Mat<T>>(data.data() + offset, rows, cols);
  }
  Eigen::Map<const Mat<T>> mat(std::size_t offset, int rows, int cols) const {
    return Eigen::Map<const Mat<T>>(data.data() + offset, rows, cols);
  }
  Eigen::Map<RowVec<T>> vec(std::size_t offset, int n) {
    return Eigen::Map<RowVec<T>>(data.data() + offset, n);
  }
  Eigen::Map<const RowVec<T>> vec(std::size_t offset, int n) const {
    return Eigen::Map<const RowVec<T>>(data.data() + offset, n);
  }
  Eigen::Map<const Mat<T>> tensor(const std::string& name) const {
    const auto& info = layout->at(name);
    return mat(info.offset, info.rows, info.cols);
  }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  template <typename U>
  Params<U> cast() const {
    Params<U> out(layout);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

// GPT-style initialization: N(0, 0.02) weights, residual output projections scaled by
// 1/sqrt(2 * layers), unit norm gains, zero biases.
template <typename T>
Params<T> init_params(const ModelConfig& config, std::uint64_t seed);

// Dropout source for one training step. Masks for sequence i are drawn from
// stream.child(global_index[i]), so they do not depend on how a batch is chunked.
struct DropoutSource {
  Stream stream;
  std::span<const std::uint64_t> global_index;
};

struct LossResult {
  double loss_sum = 0.0;  // summed cross-entropy over unmasked positions
  std::size_t count = 0;  // unmasked positions
};

// Forward plus reverse-mode gradients for sequences of equal length.
// grads accumulates d(loss_sum * loss_scale)/d(params). Passing dropout enables training mode.
template <typename T>
LossResult loss_and_grads(const ModelConfig& config, const Params<T>& params,
                          std::span<const TokenSequence> batch, double loss_scale,
                          Params<T>& grads, const DropoutSource* dropout = nullptr);

// Mean cross-entropy over the batch; throws UndefinedValueError when no position is unmasked.
template <typename T>
double mean_loss(const ModelConfig& config, const Params<T>& params,
                 std::span<const TokenSequence> batch, const DropoutSource* dropout = nullptr);

// Evaluation-mode logits for one sequence: length x 27. Optional captures (one
// length x d matrix per capture point) are written when captures != nullptr.
template <typename T>
Mat<T> forward(const ModelConfig& config, const Params<T>& params, const TokenSequence& seq,
               std::vector<Mat<T>>* captures = nullptr);

// Evaluation-mode logits for sequences of equal length: (batch * length) x 27, row s * length + i.
template <typename T>
Mat<T> forward_batch(const ModelConfig& config, const Params<T>& params,
                     std::span<const TokenSequence> batch);

// Rotates coordinate pairs (2i, 2i+1) of row vector x by angle pos * base^(-2i/d).
template <typename T>
void apply_rope(Eigen::Ref<RowVec<T>> x, int pos, double base, bool inverse = false);

// Edit applied to the residual stream at the current answer position only.
using StateHook = std::function<void(Eigen::Ref<RowVec<float>> state, Letter current)>;

// Incremental evaluation-mode decoder: one token per step with cached keys and values.
// A hook edits the input of block `hook_block` at the position being scored; cached keys and
// values keep the unedited state, so later positions see an unmodified past.
class Session {
 public:
  Session(const ModelConfig& config, std::shared_ptr<const Params<float>> params);

  void reset();
  void set_hook(StateHook hook, int hook_block);
  void clear_hook();

  // Appends a token and returns its 27 output logits. captures receives one d-vector per
  // capture point (post-edit at the hooked site).
  RowVec<float> step(int token, std::optional<Letter> current_letter = std::nullopt,
                     std::vector<RowVec<float>>* captures = nullptr);
  int position() const { return pos_; }

 private:
  const ModelConfig config_;
  std::shared_ptr<const Params<float>> params_;
  std::vector<Mat<float>> k_cache_, v_cache_;
  int pos_ = 0;
  StateHook hook_;
  int hook_block_ = -1;
};

}  // namespace nback::tiny
