#include "nback/tiny/checkpoint.hpp"

#include <algorithm>

#include "nback/blobfile.hpp"
#include "nback/error.hpp"

namespace nback::tiny {

nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"layers", c.layers},     {"heads", c.heads},         {"d_model", c.d_model},
          {"mlp_hidden", c.mlp_hidden}, {"dropout", c.dropout}, {"max_seq", c.max_seq},
          {"loads", c.loads},       {"rope_base", c.rope_base}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.mlp_hidden = j.at("mlp_hidden").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.max_seq = j.at("max_seq").get<int>();
  c.loads = j.at("loads").get<std::vector<int>>();
  c.rope_base = j.at("rope_base").get<double>();
  c.validate();
  return c;
}

nlohmann::json train_config_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"batch", c.batch},
          {"epochs", c.epochs},
          {"warmup_epochs", c.warmup_epochs},
          {"trials_per_epoch", c.trials_per_epoch},
          {"eval_trials_per_load", c.eval_trials_per_load},
          {"turns", c.turns},
          {"seed", c.seed},
          {"early_stop_patience", c.early_stop_patience},
          {"chunk", c.chunk},
          {"schedule", "linear-warmup+cosine"}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  c.batch = j.at("batch").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.warmup_epochs = j.at("warmup_epochs").get<int>();
  c.trials_per_epoch = j.at("trials_per_epoch").get<int>();
  c.eval_trials_per_load = j.at("eval_trials_per_load").get<int>();
  c.turns = j.at("turns").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.early_stop_patience = j.at("early_stop_patience").get<int>();
  c.chunk = j.at("chunk").get<int>();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format"] = "nback-tiny-checkpoint/1";
  header["model"] = model_config_json(ckpt.model);
  header["train"] = train_config_json(ckpt.train);
  header["seed"] = ckpt.train.seed;
  header["epoch"] = ckpt.epoch;
  auto curve = nlohmann::json::array();
  for (const auto& e : ckpt.curve) {
    nlohmann::json acc = nlohmann::json::object();
    for (const auto& [n, a] : e.eval_accuracy) acc[std::to_string(n)] = a;
    curve.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"lr", e.lr}, {"eval_accuracy", acc}});
  }
  header["curve"] = std::move(curve);
  auto index = nlohmann::json::array();
  for (const auto& t : ckpt.params.layout->tensors()) {
    index.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", t.offset}});
  }
  header["tensors"] = std::move(index);
  write_blob_file(path, std::move(header), ckpt.params.data);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  BlobFile f = read_blob_file(path);
  const auto& h = f.header;
  if (h.value("format", "") != "nback-tiny-checkpoint/1") {
    throw ParameterError("not a tiny-transformer checkpoint: " + path.string());
  }
  Checkpoint ckpt;
  ckpt.model = model_config_from_json(h.at("model"));
  ckpt.train = train_config_from_json(h.at("train"));
  ckpt.epoch = h.at("epoch").get<int>();
  for (const auto& e : h.at("curve")) {
    EpochStats s;
    s.epoch = e.at("epoch").get<int>();
    s.train_loss = e.at("train_loss").get<double>();
    s.lr = e.at("lr").get<double>();
    for (const auto& [k, v] : e.at("eval_accuracy").items()) s.eval_accuracy[std::stoi(k)] = v.get<double>();
    ckpt.curve.push_back(std::move(s));
  }
  auto layout = std::make_shared<const ParamLayout>(ckpt.model);
  const auto& index = h.at("tensors");
  if (index.size() != layout->tensors().size()) throw ParameterError("tensor index does not match model config");
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto& t = layout->tensors()[i];
    if (index[i].at("name").get<std::string>() != t.name ||
        index[i].at("offset").get<std::size_t>() != t.offset) {
      throw ParameterError("tensor index mismatch at " + t.name);
    }
  }
  if (f.blob.size() != layout->total()) throw ParameterError("parameter blob size mismatch");
  ckpt.params = Params<float>(layout);
  std::copy(f.blob.begin(), f.blob.end(), ckpt.params.data.begin());
  return ckpt;
}

}  // namespace nback::tiny
