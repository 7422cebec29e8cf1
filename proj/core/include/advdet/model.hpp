#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "advdet/graph.hpp"
#include "advdet/tensor.hpp"

namespace advdet {

using Labels = std::vector<std::size_t>;

enum class Architecture { kMlp, kSmallCnn };

std::string to_string(Architecture arch);
Architecture parse_architecture(const std::string& text);

struct ModelConfig {
  Architecture architecture = Architecture::kMlp;
  // Per-sample input shape: anything for kMlp (flattened), [C, H, W] for
  // kSmallCnn.
  Shape input_shape;
  std::size_t num_classes = 10;
  // Widths of the hidden dense layers (both architectures).
  std::vector<std::size_t> hidden;
  // Conv widths for kSmallCnn; each conv is followed by relu and 2x2 pooling.
  std::vector<std::size_t> channels{8, 16};
  std::size_t kernel = 3;
  // First layer computes x * input_scale + input_shift, so inputs stay in raw
  // pixel units outside the model.
  double input_scale = 1.0 / 255.0;
  double input_shift = 0.0;
  std::uint64_t seed = 0;

  // Throws ConfigError when the config cannot describe a valid model.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Feed-forward classifier producing raw outputs (logits) of shape
// [batch, num_classes]. Immutable during prediction.
class Classifier {
 public:
  Classifier(ModelConfig config, TensorMap parameters);

  const ModelConfig& config() const { return config_; }
  std::size_t num_classes() const { return config_.num_classes; }
  const TensorMap& parameters() const { return parameters_; }
  TensorMap& parameters() { return parameters_; }

  // [batch, ...input_shape]
  Shape batch_shape(std::size_t batch) const;

  // Appends the network to `graph` with parameters as named leaves; `input`
  // must have batch_shape(n) for some n. Returns the logits node.
  NodeId emit(Graph& graph, NodeId input) const;

  // Raw outputs for a batch shaped [n, ...input_shape].
  Tensor predict(const Tensor& inputs) const;

  friend bool operator==(const Classifier&, const Classifier&) = default;

 private:
  ModelConfig config_;
  TensorMap parameters_;
};

// Seeded He-style (fan-in) normal init for hidden layers; the final affine
// layer's weight and bias start at exactly zero.
Classifier build_classifier(const ModelConfig& config);

// Index of the largest value; ties go to the smallest index.
std::size_t argmax_class(std::span<const double> row);
Labels predicted_classes(const Tensor& logits);

// Binary checkpoint: magic, JSON header (config + tensor table), then raw
// little-endian doubles. Round-trips bit-exactly.
void save_checkpoint(const Classifier& model, const std::filesystem::path& path);
Classifier load_checkpoint(const std::filesystem::path& path);

}  // namespace advdet
