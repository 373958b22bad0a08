#include <fstream>
#include <iterator>

#include "json.hpp"
#include "regionmir/binary_io.hpp"
#include "regionmir/trainer.hpp"

namespace regionmir {

namespace {

using json = nlohmann::json;

constexpr std::string_view kCheckpointMagic = "RMIR";

std::string positive_mode_name(PositiveMode mode) { return mode == PositiveMode::kPaired ? "paired" : "all_pairs"; }

PositiveMode parse_positive_mode(const std::string& name) {
  if (name == "paired") return PositiveMode::kPaired;
  if (name == "all_pairs") return PositiveMode::kAllPairs;
  throw FormatError("checkpoint: unknown positive_mode '" + name + "'");
}

json model_config_json(const ModelConfig& config) {
  json layers = json::array();
  for (const auto& layer : config.encoder.layers) layers.push_back({layer.out_channels, layer.stride});
  return {{"encoder", {{"in_channels", config.encoder.in_channels}, {"layers", layers}}},
          {"hidden_dim", config.hidden_dim},
          {"embed_dim", config.embed_dim},
          {"num_classes", config.num_classes}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig config;
  config.encoder.in_channels = j.at("encoder").at("in_channels").get<Index>();
  config.encoder.layers.clear();
  for (const auto& layer : j.at("encoder").at("layers")) {
    config.encoder.layers.push_back({layer.at(0).get<Index>(), layer.at(1).get<Index>()});
  }
  config.hidden_dim = j.at("hidden_dim").get<Index>();
  config.embed_dim = j.at("embed_dim").get<Index>();
  config.num_classes = j.at("num_classes").get<int>();
  return config;
}

json train_config_json(const TrainConfig& c) {
  return {{"stage", to_string(c.stage)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"tau", c.tau},
          {"lambda_cotrain", c.lambda_cotrain},
          {"positive_mode", positive_mode_name(c.positive_mode)},
          {"include_self", c.include_self},
          {"image_size", {c.image_size.height, c.image_size.width}},
          {"seed", c.seed},
          {"kmeans_k", c.kmeans_k}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.stage = parse_stage(j.at("stage").get<std::string>());
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.tau = j.at("tau").get<double>();
  c.lambda_cotrain = j.at("lambda_cotrain").get<double>();
  c.positive_mode = parse_positive_mode(j.at("positive_mode").get<std::string>());
  c.include_self = j.at("include_self").get<bool>();
  c.image_size = {j.at("image_size").at(0).get<int>(), j.at("image_size").at(1).get<int>()};
  c.seed = j.at("seed").get<std::uint64_t>();
  c.kmeans_k = j.at("kmeans_k").get<int>();
  return c;
}

}  // namespace

std::string read_binary_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_binary_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  json tensors = json::array();
  std::uint64_t offset = 0;
  const auto named = ckpt.params.named_tensors();
  for (const auto& [name, tensor] : named) {
    tensors.push_back({{"name", name}, {"shape", tensor->shape()}, {"offset", offset}});
    offset += std::uint64_t(tensor->size()) * sizeof(double);
  }
  const json header = {{"model", model_config_json(ckpt.params.config())},
                       {"train_config", train_config_json(ckpt.train_config)},
                       {"epoch", ckpt.epoch},
                       {"rng_state", ckpt.rng_state},
                       {"loss_history", ckpt.loss_history},
                       {"tensors", tensors}};

  ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(ckpt.version);
  w.string(header.dump());
  for (const auto& [name, tensor] : named) {
    for (Index i = 0; i < tensor->size(); ++i) w.f64((*tensor)[i]);
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  ByteReader r(bytes, "checkpoint");
  r.expect_magic(kCheckpointMagic);
  Checkpoint ckpt;
  ckpt.version = r.u32();
  if (ckpt.version != kCheckpointVersion) {
    throw VersionError("checkpoint: unsupported version " + std::to_string(ckpt.version) + " (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  json header;
  try {
    header = json::parse(r.string());
    const ModelConfig config = model_config_from_json(header.at("model"));
    config.validate();
    // Shapes come from the config; the tensor manifest must agree with them.
    ckpt.params = zeros_like(model_init(config, 0));
    ckpt.train_config = train_config_from_json(header.at("train_config"));
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.rng_state = header.at("rng_state").get<std::string>();
    ckpt.loss_history = header.at("loss_history").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid model config: ") + e.what());
  }

  const auto& manifest = header.at("tensors");
  auto named = ckpt.params.named_tensors();
  if (manifest.size() != named.size()) {
    throw FormatError("checkpoint: tensor manifest lists " + std::to_string(manifest.size()) + " tensors, expected " +
                      std::to_string(named.size()));
  }
  const std::size_t payload_start = r.position();
  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& [name, tensor] = named[i];
    const auto& entry = manifest[i];
    if (entry.at("name").get<std::string>() != name) {
      throw FormatError("checkpoint: expected tensor '" + name + "', found '" + entry.at("name").get<std::string>() + "'");
    }
    if (entry.at("shape").get<Shape>() != tensor->shape()) {
      throw FormatError("checkpoint: tensor '" + name + "' has shape inconsistent with the model config");
    }
    if (entry.at("offset").get<std::uint64_t>() != expected_offset ||
        r.position() - payload_start != expected_offset) {
      throw FormatError("checkpoint: tensor '" + name + "' has an unexpected byte offset");
    }
    for (Index j = 0; j < tensor->size(); ++j) (*tensor)[j] = r.f64();
    expected_offset += std::uint64_t(tensor->size()) * sizeof(double);
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes after tensor payload");
  return ckpt;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_binary_file(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_binary_file(path)); }

}  // namespace regionmir
