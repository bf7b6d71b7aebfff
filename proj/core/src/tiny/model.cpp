#include "nback/tiny/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "nback/error.hpp"

namespace nback::tiny {

void ModelConfig::validate() const {
  if (layers < 1) throw ParameterError("layers must be >= 1");
  if (heads != 1) throw ParameterError("only single-head attention is supported");
  if (d_model < 2 || d_model % (2 * heads) != 0) {
    throw ParameterError("head dimension must be even for rotary pairing");
  }
  if (mlp_hidden < 1) throw ParameterError("mlp_hidden must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("dropout must lie in [0, 1)");
  if (max_seq < 2) throw ParameterError("max_seq must be >= 2");
  if (loads.empty()) throw ParameterError("at least one load is required");
  for (std::size_t i = 0; i < loads.size(); ++i) {
    if (loads[i] < 1) throw ParameterError("loads must be >= 1");
    for (std::size_t j = 0; j < i; ++j) {
      if (loads[i] == loads[j]) throw ParameterError("duplicate load");
    }
  }
}

bool ModelConfig::supports_load(int n) const {
  return std::find(loads.begin(), loads.end(), n) != loads.end();
}

int ModelConfig::task_token(int n) const {
  const auto it = std::find(loads.begin(), loads.end(), n);
  if (it == loads.end()) throw ParameterError("model has no task token for load " + std::to_string(n));
  return kSymbolCount + static_cast<int>(it - loads.begin());
}

std::vector<std::string> ModelConfig::capture_names() const {
  std::vector<std::string> names{"emb"};
  for (int l = 1; l <= layers; ++l) names.push_back("block" + std::to_string(l));
  return names;
}

TokenSequence encode_trial(const ModelConfig& config, const StimulusSequence& seq, int n) {
  const GroundTruth gt = ground_truth(seq, n);
  TokenSequence out;
  out.tokens.reserve(seq.letters.size() + 1);
  out.targets.reserve(seq.letters.size() + 1);
  out.tokens.push_back(config.task_token(n));
  out.targets.push_back(kIgnore);
  for (std::size_t t = 0; t < seq.letters.size(); ++t) {
    out.tokens.push_back(seq.letters[t].index());
    out.targets.push_back(gt.answers[t].index());
  }
  if (out.length() > config.max_seq) throw ParameterError("sequence longer than max_seq");
  return out;
}

ParamLayout::ParamLayout(const ModelConfig& c) {
  c.validate();
  const int d = c.d_model;
  tok_emb = add("tok_emb", c.input_vocab(), d);
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Block b{};
    b.ln1_g = add(p + "ln1.g", 1, d);
    b.ln1_b = add(p + "ln1.b", 1, d);
    b.wq = add(p + "attn.wq", d, d);
    b.wk = add(p + "attn.wk", d, d);
    b.wv = add(p + "attn.wv", d, d);
    b.wo = add(p + "attn.wo", d, d);
    b.ln2_g = add(p + "ln2.g", 1, d);
    b.ln2_b = add(p + "ln2.b", 1, d);
    b.w1 = add(p + "mlp.w1", d, c.mlp_hidden);
    b.b1 = add(p + "mlp.b1", 1, c.mlp_hidden);
    b.w2 = add(p + "mlp.w2", c.mlp_hidden, d);
    b.b2 = add(p + "mlp.b2", 1, d);
    blocks.push_back(b);
  }
  lnf_g = add("lnf.g", 1, d);
  lnf_b = add("lnf.b", 1, d);
  out_w = add("out.w", kOutputVocab, d);
  out_b = add("out.b", 1, kOutputVocab);
}

std::size_t ParamLayout::add(const std::string& name, int rows, int cols) {
  TensorInfo info{name, rows, cols, total_};
  total_ += (info.size() + kTensorAlignment - 1) / kTensorAlignment * kTensorAlignment;
  tensors_.push_back(std::move(info));
  return tensors_.back().offset;
}

const TensorInfo& ParamLayout::at(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw ParameterError("unknown tensor: " + name);
}

template <typename T>
Params<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  auto layout = std::make_shared<const ParamLayout>(config);
  Params<T> p(layout);
  Stream rng(seed, "init");
  const double resid_scale = 1.0 / std::sqrt(2.0 * config.layers);
  for (const auto& t : layout->tensors()) {
    const bool is_gain = t.name.ends_with(".g");
    const bool is_bias = t.name.ends_with(".b") || t.name.ends_with(".b1") || t.name.ends_with(".b2");
    const bool is_resid_out = t.name.ends_with("attn.wo") || t.name.ends_with("mlp.w2");
    for (std::size_t i = 0; i < t.size(); ++i) {
      double v = 0.0;
      if (is_gain) {
        v = 1.0;
      } else if (!is_bias) {
        v = 0.02 * rng.normal() * (is_resid_out ? resid_scale : 1.0);
      }
      p.data[t.offset + i] = static_cast<T>(v);
    }
  }
  return p;
}

template <typename T>
void apply_rope(Eigen::Ref<RowVec<T>> x, int pos, double base, bool inverse) {
  const Eigen::Index d = x.size();
  for (Eigen::Index i = 0; i < d / 2; ++i) {
    const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const double angle = (inverse ? -1.0 : 1.0) * pos * freq;
    const T c = static_cast<T>(std::cos(angle));
    const T s = static_cast<T>(std::sin(angle));
    const T a = x(2 * i), b = x(2 * i + 1);
    x(2 * i) = a * c - b * s;
    x(2 * i + 1) = a * s + b * c;
  }
}

namespace {

constexpr double kLnEps = 1e-5;

template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// cos/sin tables for positions [0, len) and pairs [0, d/2).
template <typename T>
struct RopeTable {
  Mat<T> cos, sin;
  RopeTable(int len, int d, double base) : cos(len, d / 2), sin(len, d / 2) {
    for (int p = 0; p < len; ++p) {
      for (int i = 0; i < d / 2; ++i) {
        const double freq = std::pow(base, -2.0 * i / static_cast<double>(d));
        cos(p, i) = static_cast<T>(std::cos(p * freq));
        sin(p, i) = static_cast<T>(std::sin(p * freq));
      }
    }
  }
  // Rotates row r of m as position pos; inverse rotates by the negative angle.
  template <typename Row>
  void rotate(Row&& row, int pos, bool inverse) const {
    const Eigen::Index half = cos.cols();
    for (Eigen::Index i = 0; i < half; ++i) {
      const T c = cos(pos, i);
      const T s = inverse ? -sin(pos, i) : sin(pos, i);
      const T a = row(2 * i), b = row(2 * i + 1);
      row(2 * i) = a * c - b * s;
      row(2 * i + 1) = a * s + b * c;
    }
  }
};

template <typename T>
void layer_norm(const Mat<T>& x, const Eigen::Map<const RowVec<T>>& g,
                const Eigen::Map<const RowVec<T>>& b, Mat<T>& xhat, ColVec<T>& rstd, Mat<T>& y) {
  const Eigen::Index rows = x.rows();
  const T inv_d = T(1) / static_cast<T>(x.cols());
  xhat.resize(rows, x.cols());
  y.resize(rows, x.cols());
  rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mu = x.row(r).sum() * inv_d;
    const auto centered = (x.row(r).array() - mu).matrix();
    const T var = centered.squaredNorm() * inv_d;
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    rstd(r) = rs;
    xhat.row(r) = centered * rs;
    y.row(r) = (xhat.row(r).array() * g.array() + b.array()).matrix();
  }
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const ColVec<T>& rstd,
                           const Eigen::Map<const RowVec<T>>& g, Eigen::Map<RowVec<T>> dg,
                           Eigen::Map<RowVec<T>> db) {
  dg += (dy.array() * xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const RowVec<T> dxhat = (dy.row(r).array() * g.array()).matrix();
    const T mean_dxhat = dxhat.sum() * inv_d;
    const T mean_dxhat_xhat = dxhat.dot(xhat.row(r)) * inv_d;
    dx.row(r) = rstd(r) * (dxhat.array() - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

template <typename T>
T gelu(T u) {
  return T(0.5) * u * (T(1) + std::erf(u * static_cast<T>(std::numbers::sqrt2 / 2.0)));
}

template <typename T>
T gelu_grad(T u) {
  const T cdf = T(0.5) * (T(1) + std::erf(u * static_cast<T>(std::numbers::sqrt2 / 2.0)));
  const T pdf = std::exp(T(-0.5) * u * u) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + u * pdf;
}

template <typename T>
struct LayerCache {
  Mat<T> x_in, xhat1, n1, q, k, v, attn, xhat2, n2, u, g, h;
  ColVec<T> rstd1, rstd2;
  std::vector<Mat<T>> probs, probs_dropped, attn_mask;
  Mat<T> res1_mask, res2_mask;
};

template <typename T>
struct Pass {
  const ModelConfig& cfg;
  const Params<T>& P;
  const ParamLayout& L;
  int batch;
  int len;
  int d;
  bool train;
  RopeTable<T> rope;
  std::vector<LayerCache<T>> layers;
  Mat<T> xf, xhatf, nf, logits;
  ColVec<T> rstdf;

  Pass(const ModelConfig& c, const Params<T>& p, int b, int l, bool tr)
      : cfg(c), P(p), L(*p.layout), batch(b), len(l), d(c.d_model), train(tr),
        rope(l, c.d_model, c.rope_base), layers(static_cast<std::size_t>(c.layers)) {}

  auto gvec(std::size_t off, int n) const { return P.vec(off, n); }

  void make_masks(const DropoutSource& src) {
    const double p = cfg.dropout;
    const auto threshold = static_cast<std::uint32_t>(std::min(p * 4294967296.0, 4294967295.0));
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    const std::size_t rows = static_cast<std::size_t>(batch) * static_cast<std::size_t>(len);
    for (auto& lc : layers) {
      lc.attn_mask.assign(static_cast<std::size_t>(batch), Mat<T>(len, len));
      lc.res1_mask.resize(static_cast<Eigen::Index>(rows), d);
      lc.res2_mask.resize(static_cast<Eigen::Index>(rows), d);
    }
    auto draw = [&](Stream& rng) { return rng.next_u32() >= threshold ? keep_scale : T(0); };
    for (int s = 0; s < batch; ++s) {
      Stream rng = src.stream.child(src.global_index[static_cast<std::size_t>(s)]);
      for (auto& lc : layers) {
        auto& am = lc.attn_mask[static_cast<std::size_t>(s)];
        for (int i = 0; i < len; ++i)
          for (int j = 0; j < len; ++j) am(i, j) = draw(rng);
        for (int i = 0; i < len; ++i)
          for (int j = 0; j < d; ++j) lc.res1_mask(s * len + i, j) = draw(rng);
        for (int i = 0; i < len; ++i)
          for (int j = 0; j < d; ++j) lc.res2_mask(s * len + i, j) = draw(rng);
      }
    }
  }

  void run_forward(std::span<const TokenSequence> seqs, std::vector<Mat<T>>* captures) {
    const int rows = batch * len;
    const auto emb = P.mat(L.tok_emb, cfg.input_vocab(), d);
    Mat<T> x(rows, d);
    for (int s = 0; s < batch; ++s) {
      for (int i = 0; i < len; ++i) x.row(s * len + i) = emb.row(seqs[static_cast<std::size_t>(s)].tokens[static_cast<std::size_t>(i)]);
    }
    if (captures) captures->push_back(x);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    const int hdim = cfg.mlp_hidden;

    for (int l = 0; l < cfg.layers; ++l) {
      const auto& B = L.blocks[static_cast<std::size_t>(l)];
      auto& c = layers[static_cast<std::size_t>(l)];
      c.x_in = x;
      layer_norm<T>(x, gvec(B.ln1_g, d), gvec(B.ln1_b, d), c.xhat1, c.rstd1, c.n1);
      c.q.noalias() = c.n1 * P.mat(B.wq, d, d);
      c.k.noalias() = c.n1 * P.mat(B.wk, d, d);
      c.v.noalias() = c.n1 * P.mat(B.wv, d, d);
      for (int r = 0; r < rows; ++r) {
        rope.rotate(c.q.row(r), r % len, false);
        rope.rotate(c.k.row(r), r % len, false);
      }
      c.attn.resize(rows, d);
      c.probs.assign(static_cast<std::size_t>(batch), Mat<T>());
      c.probs_dropped.assign(static_cast<std::size_t>(batch), Mat<T>());
      for (int s = 0; s < batch; ++s) {
        const auto qs = c.q.middleRows(s * len, len);
        const auto ks = c.k.middleRows(s * len, len);
        Mat<T> sc(len, len);
        sc.noalias() = qs * ks.transpose();
        Mat<T>& pr = c.probs[static_cast<std::size_t>(s)];
        pr.setZero(len, len);
        for (int i = 0; i < len; ++i) {
          T mx = sc(i, 0) * scale;
          for (int j = 1; j <= i; ++j) mx = std::max(mx, sc(i, j) * scale);
          T sum = 0;
          for (int j = 0; j <= i; ++j) {
            const T e = std::exp(sc(i, j) * scale - mx);
            pr(i, j) = e;
            sum += e;
          }
          const T inv = T(1) / sum;
          for (int j = 0; j <= i; ++j) pr(i, j) *= inv;
        }
        Mat<T>& pd = c.probs_dropped[static_cast<std::size_t>(s)];
        pd = train ? Mat<T>(pr.cwiseProduct(c.attn_mask[static_cast<std::size_t>(s)])) : pr;
        c.attn.middleRows(s * len, len).noalias() = pd * c.v.middleRows(s * len, len);
      }
      Mat<T> a = c.attn * P.mat(B.wo, d, d);
      if (train) a = a.cwiseProduct(c.res1_mask);
      c.h = x + a;
      layer_norm<T>(c.h, gvec(B.ln2_g, d), gvec(B.ln2_b, d), c.xhat2, c.rstd2, c.n2);
      c.u.noalias() = c.n2 * P.mat(B.w1, d, hdim);
      c.u.rowwise() += gvec(B.b1, hdim);
      c.g = c.u.unaryExpr([](T v) { return gelu(v); });
      Mat<T> m = c.g * P.mat(B.w2, hdim, d);
      m.rowwise() += gvec(B.b2, d);
      if (train) m = m.cwiseProduct(c.res2_mask);
      x = c.h + m;
      if (captures) captures->push_back(x);
    }
    xf = x;
    layer_norm<T>(xf, gvec(L.lnf_g, d), gvec(L.lnf_b, d), xhatf, rstdf, nf);
    logits.noalias() = nf * P.mat(L.out_w, kOutputVocab, d).transpose();
    logits.rowwise() += gvec(L.out_b, kOutputVocab);
  }

  // Returns loss; fills dlogits (scaled by loss_scale) when requested.
  LossResult loss(std::span<const TokenSequence> seqs, double loss_scale, Mat<T>* dlogits) const {
    LossResult res;
    if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
    for (int s = 0; s < batch; ++s) {
      const auto& tg = seqs[static_cast<std::size_t>(s)].targets;
      for (int i = 0; i < len; ++i) {
        const int target = tg[static_cast<std::size_t>(i)];
        if (target == kIgnore) continue;
        const int r = s * len + i;
        const T mx = logits.row(r).maxCoeff();
        double sum = 0.0;
        for (int j = 0; j < kOutputVocab; ++j) sum += std::exp(static_cast<double>(logits(r, j) - mx));
        const double lse = static_cast<double>(mx) + std::log(sum);
        res.loss_sum += lse - static_cast<double>(logits(r, target));
        ++res.count;
        if (dlogits) {
          for (int j = 0; j < kOutputVocab; ++j) {
            const double pj = std::exp(static_cast<double>(logits(r, j)) - lse);
            (*dlogits)(r, j) = static_cast<T>((pj - (j == target ? 1.0 : 0.0)) * loss_scale);
          }
        }
      }
    }
    return res;
  }

  void backward(std::span<const TokenSequence> seqs, const Mat<T>& dlogits, Params<T>& G) const {
    const int rows = batch * len;
    const int hdim = cfg.mlp_hidden;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));

    G.mat(L.out_w, kOutputVocab, d).noalias() += dlogits.transpose() * nf;
    G.vec(L.out_b, kOutputVocab) += dlogits.colwise().sum();
    Mat<T> dnf = dlogits * P.mat(L.out_w, kOutputVocab, d);
    Mat<T> dx = layer_norm_backward<T>(dnf, xhatf, rstdf, gvec(L.lnf_g, d), G.vec(L.lnf_g, d), G.vec(L.lnf_b, d));

    for (int l = cfg.layers - 1; l >= 0; --l) {
      const auto& B = L.blocks[static_cast<std::size_t>(l)];
      const auto& c = layers[static_cast<std::size_t>(l)];
      // Feed-forward branch.
      Mat<T> dm = train ? Mat<T>(dx.cwiseProduct(c.res2_mask)) : dx;
      G.mat(B.w2, hdim, d).noalias() += c.g.transpose() * dm;
      G.vec(B.b2, d) += dm.colwise().sum();
      Mat<T> dg = dm * P.mat(B.w2, hdim, d).transpose();
      Mat<T> du = dg.cwiseProduct(c.u.unaryExpr([](T v) { return gelu_grad(v); }));
      G.mat(B.w1, d, hdim).noalias() += c.n2.transpose() * du;
      G.vec(B.b1, hdim) += du.colwise().sum();
      Mat<T> dn2 = du * P.mat(B.w1, d, hdim).transpose();
      Mat<T> dh = dx + layer_norm_backward<T>(dn2, c.xhat2, c.rstd2, gvec(B.ln2_g, d), G.vec(B.ln2_g, d), G.vec(B.ln2_b, d));

      // Attention branch.
      Mat<T> da = train ? Mat<T>(dh.cwiseProduct(c.res1_mask)) : dh;
      G.mat(B.wo, d, d).noalias() += c.attn.transpose() * da;
      Mat<T> dattn = da * P.mat(B.wo, d, d).transpose();
      Mat<T> dq(rows, d), dk(rows, d), dv(rows, d);
      for (int s = 0; s < batch; ++s) {
        const auto& pr = c.probs[static_cast<std::size_t>(s)];
        const auto& pd = c.probs_dropped[static_cast<std::size_t>(s)];
        const auto d_o = dattn.middleRows(s * len, len);
        dv.middleRows(s * len, len).noalias() = pd.transpose() * d_o;
        Mat<T> dpd = d_o * c.v.middleRows(s * len, len).transpose();
        Mat<T> dp = train ? Mat<T>(dpd.cwiseProduct(c.attn_mask[static_cast<std::size_t>(s)])) : dpd;
        Mat<T> ds(len, len);
        for (int i = 0; i < len; ++i) {
          T dot = 0;
          for (int j = 0; j <= i; ++j) dot += dp(i, j) * pr(i, j);
          for (int j = 0; j < len; ++j) ds(i, j) = j <= i ? pr(i, j) * (dp(i, j) - dot) * scale : T(0);
        }
        dq.middleRows(s * len, len).noalias() = ds * c.k.middleRows(s * len, len);
        dk.middleRows(s * len, len).noalias() = ds.transpose() * c.q.middleRows(s * len, len);
      }
      for (int r = 0; r < rows; ++r) {
        rope.rotate(dq.row(r), r % len, true);
        rope.rotate(dk.row(r), r % len, true);
      }
      G.mat(B.wq, d, d).noalias() += c.n1.transpose() * dq;
      G.mat(B.wk, d, d).noalias() += c.n1.transpose() * dk;
      G.mat(B.wv, d, d).noalias() += c.n1.transpose() * dv;
      Mat<T> dn1 = dq * P.mat(B.wq, d, d).transpose();
      dn1.noalias() += dk * P.mat(B.wk, d, d).transpose();
      dn1.noalias() += dv * P.mat(B.wv, d, d).transpose();
      dx = dh + layer_norm_backward<T>(dn1, c.xhat1, c.rstd1, gvec(B.ln1_g, d), G.vec(B.ln1_g, d), G.vec(B.ln1_b, d));
    }
    auto demb = G.mat(L.tok_emb, cfg.input_vocab(), d);
    for (int s = 0; s < batch; ++s) {
      for (int i = 0; i < len; ++i) demb.row(seqs[static_cast<std::size_t>(s)].tokens[static_cast<std::size_t>(i)]) += dx.row(s * len + i);
    }
  }
};

int common_length(const ModelConfig& cfg, std::span<const TokenSequence> batch) {
  if (batch.empty()) throw ParameterError("empty batch");
  const int len = batch.front().length();
  for (const auto& s : batch) {
    if (s.length() != len) throw ParameterError("sequences in a batch must share one length");
    if (static_cast<int>(s.targets.size()) != len) throw ParameterError("targets/tokens length mismatch");
  }
  if (len > cfg.max_seq) throw ParameterError("sequence longer than max_seq");
  if (len < 1) throw ParameterError("empty sequence");
  return len;
}

}  // namespace

template <typename T>
LossResult loss_and_grads(const ModelConfig& config, const Params<T>& params,
                          std::span<const TokenSequence> batch, double loss_scale, Params<T>& grads,
                          const DropoutSource* dropout) {
  const int len = common_length(config, batch);
  const bool train = dropout != nullptr && config.dropout > 0.0;
  Pass<T> pass(config, params, static_cast<int>(batch.size()), len, train);
  if (train) pass.make_masks(*dropout);
  pass.run_forward(batch, nullptr);
  Mat<T> dlogits;
  const LossResult res = pass.loss(batch, loss_scale, &dlogits);
  if (res.count > 0) pass.backward(batch, dlogits, grads);
  return res;
}

template <typename T>
double mean_loss(const ModelConfig& config, const Params<T>& params,
                 std::span<const TokenSequence> batch, const DropoutSource* dropout) {
  const int len = common_length(config, batch);
  const bool train = dropout != nullptr && config.dropout > 0.0;
  Pass<T> pass(config, params, static_cast<int>(batch.size()), len, train);
  if (train) pass.make_masks(*dropout);
  pass.run_forward(batch, nullptr);
  const LossResult res = pass.loss(batch, 1.0, nullptr);
  if (res.count == 0) throw UndefinedValueError("batch has no unmasked positions");
  return res.loss_sum / static_cast<double>(res.count);
}

template <typename T>
Mat<T> forward(const ModelConfig& config, const Params<T>& params, const TokenSequence& seq,
               std::vector<Mat<T>>* captures) {
  const std::span<const TokenSequence> one(&seq, 1);
  const int len = common_length(config, one);
  Pass<T> pass(config, params, 1, len, false);
  if (captures) captures->clear();
  pass.run_forward(one, captures);
  return pass.logits;
}

template <typename T>
Mat<T> forward_batch(const ModelConfig& config, const Params<T>& params,
                     std::span<const TokenSequence> batch) {
  const int len = common_length(config, batch);
  Pass<T> pass(config, params, static_cast<int>(batch.size()), len, false);
  pass.run_forward(batch, nullptr);
  return pass.logits;
}

template Mat<float> forward_batch<float>(const ModelConfig&, const Params<float>&, std::span<const TokenSequence>);
template Mat<double> forward_batch<double>(const ModelConfig&, const Params<double>&, std::span<const TokenSequence>);
template Params<float> init_params<float>(const ModelConfig&, std::uint64_t);
template Params<double> init_params<double>(const ModelConfig&, std::uint64_t);
template void apply_rope<float>(Eigen::Ref<RowVec<float>>, int, double, bool);
template void apply_rope<double>(Eigen::Ref<RowVec<double>>, int, double, bool);
template LossResult loss_and_grads<float>(const ModelConfig&, const Params<float>&, std::span<const TokenSequence>, double, Params<float>&, const DropoutSource*);
template LossResult loss_and_grads<double>(const ModelConfig&, const Params<double>&, std::span<const TokenSequence>, double, Params<double>&, const DropoutSource*);
template double mean_loss<float>(const ModelConfig&, const Params<float>&, std::span<const TokenSequence>, const DropoutSource*);
template double mean_loss<double>(const ModelConfig&, const Params<double>&, std::span<const TokenSequence>, const DropoutSource*);
template Mat<float> forward<float>(const ModelConfig&, const Params<float>&, const TokenSequence&, std::vector<Mat<float>>*);
template Mat<double> forward<double>(const ModelConfig&, const Params<double>&, const TokenSequence&, std::vector<Mat<double>>*);

// ---------------------------------------------------------------------------
// Incremental decoder

Session::Session(const ModelConfig& config, std::shared_ptr<const Params<float>> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  reset();
}

void Session::reset() {
  pos_ = 0;
  k_cache_.assign(static_cast<std::size_t>(config_.layers), Mat<float>(config_.max_seq, config_.d_model));
  v_cache_.assign(static_cast<std::size_t>(config_.layers), Mat<float>(config_.max_seq, config_.d_model));
}

void Session::set_hook(StateHook hook, int hook_block) {
  if (hook_block < 0 || hook_block >= config_.layers) throw ParameterError("hook block out of range");
  hook_ = std::move(hook);
  hook_block_ = hook_block;
}

void Session::clear_hook() {
  hook_ = nullptr;
  hook_block_ = -1;
}

namespace {

RowVec<float> ln_row(const RowVec<float>& x, const Eigen::Map<const RowVec<float>>& g,
                     const Eigen::Map<const RowVec<float>>& b) {
  const float inv_d = 1.0f / static_cast<float>(x.size());
  const float mu = x.sum() * inv_d;
  const RowVec<float> centered = (x.array() - mu).matrix();
  const float rs = 1.0f / std::sqrt(centered.squaredNorm() * inv_d + static_cast<float>(kLnEps));
  return ((centered * rs).array() * g.array() + b.array()).matrix();
}

}  // namespace

RowVec<float> Session::step(int token, std::optional<Letter> current_letter,
                            std::vector<RowVec<float>>* captures) {
  if (pos_ >= config_.max_seq) throw ParameterError("sequence longer than max_seq");
  if (token < 0 || token >= config_.input_vocab()) throw ParameterError("token out of range");
  const auto& P = *params_;
  const auto& L = *P.layout;
  const int d = config_.d_model;
  const int hdim = config_.mlp_hidden;
  const float scale = 1.0f / std::sqrt(static_cast<float>(d));

  RowVec<float> x = P.mat(L.tok_emb, config_.input_vocab(), d).row(token);
  if (captures) {
    captures->clear();
    captures->push_back(x);
  }
  std::optional<RowVec<float>> edited;

  auto attend = [&](int layer, const RowVec<float>& q, const RowVec<float>& k_self,
                    const RowVec<float>& v_self) {
    const auto& kc = k_cache_[static_cast<std::size_t>(layer)];
    const auto& vc = v_cache_[static_cast<std::size_t>(layer)];
    std::vector<float> sc(static_cast<std::size_t>(pos_ + 1));
    for (int j = 0; j < pos_; ++j) sc[static_cast<std::size_t>(j)] = q.dot(kc.row(j)) * scale;
    sc[static_cast<std::size_t>(pos_)] = q.dot(k_self) * scale;
    const float mx = *std::max_element(sc.begin(), sc.end());
    float sum = 0.0f;
    for (auto& s : sc) {
      s = std::exp(s - mx);
      sum += s;
    }
    RowVec<float> o = RowVec<float>::Zero(d);
    for (int j = 0; j < pos_; ++j) o += (sc[static_cast<std::size_t>(j)] / sum) * vc.row(j);
    o += (sc[static_cast<std::size_t>(pos_)] / sum) * v_self;
    return o;
  };

  auto block_rest = [&](const ParamLayout::Block& B, const RowVec<float>& x_in, const RowVec<float>& o) {
    RowVec<float> h = x_in + o * P.mat(B.wo, d, d);
    const RowVec<float> n2 = ln_row(h, P.vec(B.ln2_g, d), P.vec(B.ln2_b, d));
    RowVec<float> u = n2 * P.mat(B.w1, d, hdim) + P.vec(B.b1, hdim);
    u = u.unaryExpr([](float v) { return gelu(v); });
    return RowVec<float>(h + u * P.mat(B.w2, hdim, d) + P.vec(B.b2, d));
  };

  for (int l = 0; l < config_.layers; ++l) {
    const auto& B = L.blocks[static_cast<std::size_t>(l)];
    if (l == hook_block_ && hook_ && current_letter) {
      edited = x;
      hook_(*edited, *current_letter);
      if (captures) captures->back() = *edited;
    }
    const RowVec<float> n1 = ln_row(x, P.vec(B.ln1_g, d), P.vec(B.ln1_b, d));
    RowVec<float> q = n1 * P.mat(B.wq, d, d);
    RowVec<float> k = n1 * P.mat(B.wk, d, d);
    const RowVec<float> v = n1 * P.mat(B.wv, d, d);
    apply_rope<float>(q, pos_, config_.rope_base);
    apply_rope<float>(k, pos_, config_.rope_base);

    if (edited) {
      const RowVec<float> ne = ln_row(*edited, P.vec(B.ln1_g, d), P.vec(B.ln1_b, d));
      RowVec<float> qe = ne * P.mat(B.wq, d, d);
      RowVec<float> ke = ne * P.mat(B.wk, d, d);
      const RowVec<float> ve = ne * P.mat(B.wv, d, d);
      apply_rope<float>(qe, pos_, config_.rope_base);
      apply_rope<float>(ke, pos_, config_.rope_base);
      edited = block_rest(B, *edited, attend(l, qe, ke, ve));
    }
    // The clean stream is needed for the caches of this and later layers.
    const bool need_clean = !edited || l + 1 < config_.layers;
    if (need_clean) x = block_rest(B, x, attend(l, q, k, v));
    k_cache_[static_cast<std::size_t>(l)].row(pos_) = k;
    v_cache_[static_cast<std::size_t>(l)].row(pos_) = v;
    if (captures) captures->push_back(edited ? *edited : x);
  }
  ++pos_;
  const RowVec<float>& final_state = edited ? *edited : x;
  const RowVec<float> nf = ln_row(final_state, P.vec(L.lnf_g, d), P.vec(L.lnf_b, d));
  return nf * P.mat(L.out_w, kOutputVocab, d).transpose() + P.vec(L.out_b, kOutputVocab);
}

}  // namespace nback::tiny
