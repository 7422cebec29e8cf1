#include "advdet/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "advdet/errors.hpp"

namespace advdet {

namespace {

constexpr std::size_t kPredictChunk = 256;
constexpr char kCheckpointMagic[8] = {'A', 'D', 'V', 'D', 'E', 'T', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::string layer_name(const char* kind, std::size_t i) {
  return std::string(kind) + std::to_string(i);
}

}  // namespace

std::string to_string(Architecture arch) {
  return arch == Architecture::kMlp ? "mlp" : "small-cnn";
}

Architecture parse_architecture(const std::string& text) {
  if (text == "mlp") return Architecture::kMlp;
  if (text == "small-cnn") return Architecture::kSmallCnn;
  throw ConfigError("unknown architecture '" + text + "' (expected mlp or small-cnn)");
}

void ModelConfig::validate() const {
  if (num_classes < 2) throw ConfigError("model needs at least 2 classes");
  if (input_shape.empty() || shape_size(input_shape) == 0) {
    throw ConfigError("model input shape must be non-empty");
  }
  if (std::find(hidden.begin(), hidden.end(), 0u) != hidden.end()) {
    throw ConfigError("hidden layer widths must be positive");
  }
  if (!std::isfinite(input_scale) || !std::isfinite(input_shift)) {
    throw ConfigError("input scale/shift must be finite");
  }
  if (architecture == Architecture::kSmallCnn) {
    if (input_shape.size() != 3) throw ConfigError("small-cnn expects input shape [C, H, W]");
    if (channels.empty() || kernel == 0 || kernel % 2 == 0) {
      throw ConfigError("small-cnn needs conv channels and an odd kernel size");
    }
    std::size_t h = input_shape[1], w = input_shape[2];
    for (std::size_t c : channels) {
      if (c == 0) throw ConfigError("conv channel widths must be positive");
      h /= 2;
      w /= 2;
      if (h == 0 || w == 0) throw ConfigError("input too small for the pooling stack");
    }
  }
}

Classifier::Classifier(ModelConfig config, TensorMap parameters)
    : config_(std::move(config)), parameters_(std::move(parameters)) {
  config_.validate();
}

Shape Classifier::batch_shape(std::size_t batch) const {
  Shape s{batch};
  s.insert(s.end(), config_.input_shape.begin(), config_.input_shape.end());
  return s;
}

NodeId Classifier::emit(Graph& graph, NodeId input) const {
  const Shape& in_shape = graph.shape(input);
  if (in_shape.empty() || Shape(in_shape.begin() + 1, in_shape.end()) != config_.input_shape) {
    throw ShapeError("classifier input " + shape_string(in_shape) + " does not match [n, " +
                     shape_string(config_.input_shape) + "]");
  }
  const std::size_t batch = in_shape[0];
  auto param = [&](const std::string& name) {
    auto it = parameters_.find(name);
    if (it == parameters_.end()) throw ContractError("missing parameter '" + name + "'");
    return graph.parameter(name, it->second.shape());
  };

  NodeId x = graph.shift(graph.scale(input, config_.input_scale), config_.input_shift);
  if (config_.architecture == Architecture::kSmallCnn) {
    for (std::size_t i = 0; i < config_.channels.size(); ++i) {
      const std::string name = layer_name("conv", i);
      x = graph.conv2d(x, param(name + ".weight"), param(name + ".bias"), config_.kernel / 2);
      x = graph.max_pool2d(graph.relu(x), 2);
    }
  }
  x = graph.reshape(x, {batch, shape_size(graph.shape(x)) / batch});
  for (std::size_t i = 0; i < config_.hidden.size(); ++i) {
    const std::string name = layer_name("dense", i);
    x = graph.relu(graph.affine(x, param(name + ".weight"), param(name + ".bias")));
  }
  return graph.affine(x, param("out.weight"), param("out.bias"));
}

Tensor Classifier::predict(const Tensor& inputs) const {
  if (inputs.rank() == 0 || inputs.shape() != batch_shape(inputs.dim(0))) {
    throw ShapeError("predict: input " + shape_string(inputs.shape()) +
                     " does not match [n, " + shape_string(config_.input_shape) + "]");
  }
  const std::size_t n = inputs.dim(0);
  Tensor out({n, config_.num_classes});
  // Rows are computed independently, so chunking does not change any value.
  for (std::size_t begin = 0; begin < n; begin += kPredictChunk) {
    const std::size_t end = std::min(n, begin + kPredictChunk);
    Graph graph;
    const NodeId x = graph.input("x", batch_shape(end - begin));
    emit(graph, x);
    TensorMap bindings = parameters_;
    bindings["x"] = inputs.slice_rows(begin, end);
    const Execution run = forward(graph, bindings);
    std::copy(run.output().values().begin(), run.output().values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(begin * config_.num_classes));
  }
  return out;
}

Classifier build_classifier(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  TensorMap params;
  auto he_layer = [&](const std::string& name, Shape weight_shape, std::size_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor w(weight_shape);
    for (double& v : w.values()) v = dist(rng);
    params[name + ".weight"] = std::move(w);
    params[name + ".bias"] = Tensor({weight_shape[0]});
  };

  std::size_t features = shape_size(config.input_shape);
  if (config.architecture == Architecture::kSmallCnn) {
    std::size_t c = config.input_shape[0], h = config.input_shape[1], w = config.input_shape[2];
    const std::size_t k = config.kernel;
    for (std::size_t i = 0; i < config.channels.size(); ++i) {
      he_layer(layer_name("conv", i), {config.channels[i], c, k, k}, c * k * k);
      c = config.channels[i];
      h /= 2;
      w /= 2;
    }
    features = c * h * w;
  }
  for (std::size_t i = 0; i < config.hidden.size(); ++i) {
    he_layer(layer_name("dense", i), {config.hidden[i], features}, features);
    features = config.hidden[i];
  }
  // Zero output layer: every initial logit is exactly 0.
  params["out.weight"] = Tensor({config.num_classes, features});
  params["out.bias"] = Tensor({config.num_classes});
  return Classifier(config, std::move(params));
}

std::size_t argmax_class(std::span<const double> row) {
  if (row.empty()) throw ContractError("argmax of an empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

Labels predicted_classes(const Tensor& logits) {
  Labels out(logits.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = argmax_class(logits.row(i));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"architecture", to_string(c.architecture)},
          {"input_shape", c.input_shape},
          {"num_classes", c.num_classes},
          {"hidden", c.hidden},
          {"channels", c.channels},
          {"kernel", c.kernel},
          {"input_scale_bits", std::bit_cast<std::uint64_t>(c.input_scale)},
          {"input_shift_bits", std::bit_cast<std::uint64_t>(c.input_shift)},
          {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.architecture = parse_architecture(j.at("architecture").get<std::string>());
  c.input_shape = j.at("input_shape").get<Shape>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  c.channels = j.at("channels").get<std::vector<std::size_t>>();
  c.kernel = j.at("kernel").get<std::size_t>();
  c.input_scale = std::bit_cast<double>(j.at("input_scale_bits").get<std::uint64_t>());
  c.input_shift = std::bit_cast<double>(j.at("input_shift_bits").get<std::uint64_t>());
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

void put_u64(std::ostream& os, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(bytes, 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char bytes[8];
  if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw FormatError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

}  // namespace

void save_checkpoint(const Classifier& model, const std::filesystem::path& path) {
  nlohmann::json header;
  header["config"] = config_to_json(model.config());
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : model.parameters()) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
  }
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u64(os, kCheckpointVersion);
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : model.parameters()) {
    for (double v : t.values()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw FormatError("error writing checkpoint " + path.string());
}

Classifier load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  if (!is.read(magic, sizeof(magic)) ||
      !std::equal(magic, magic + sizeof(magic), kCheckpointMagic)) {
    throw FormatError(path.string() + " is not a checkpoint");
  }
  if (get_u64(is) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  const std::uint64_t header_len = get_u64(is);
  std::string text(header_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw FormatError("checkpoint header truncated");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  TensorMap params;
  for (const auto& entry : header.at("tensors")) {
    Tensor t(entry.at("shape").get<Shape>());
    for (double& v : t.values()) v = std::bit_cast<double>(get_u64(is));
    params[entry.at("name").get<std::string>()] = std::move(t);
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes in checkpoint " + path.string());
  }
  return Classifier(config_from_json(header.at("config")), std::move(params));
}

}  // namespace advdet
