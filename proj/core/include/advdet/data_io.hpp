#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "advdet/attacks.hpp"
#include "advdet/model.hpp"
#include "advdet/tensor.hpp"

namespace advdet {

// Inputs in raw units (0..255) with one class label per sample.
struct Dataset {
  Tensor inputs;  // [n, ...sample shape]
  Labels labels;
  std::size_t num_classes = 0;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;

  Dataset subset(std::span<const std::size_t> indices) const;
  Dataset slice(std::size_t begin, std::size_t end) const;
  // Same samples viewed with a different per-sample shape of equal size.
  Dataset reshaped(const Shape& sample_shape) const;

  // Throws FormatError on label/input count mismatch, out-of-range labels
  // or inputs outside `range`.
  void validate(InputRange range = {}) const;
};

// ----- IDX -------------------------------------------------------------------

enum class IdxType : std::uint8_t {
  kUnsignedByte = 0x08,
  kSignedByte = 0x09,
  kShort = 0x0B,
  kInt = 0x0C,
  kFloat = 0x0D,
  kDouble = 0x0E,
};

// Reads an IDX file (big-endian header: two zero bytes, type code, rank,
// then one 32-bit size per dimension, then the payload).
Tensor load_idx(const std::filesystem::path& path);
// kDouble preserves every value bit-exactly; integer types require integral
// values in range.
void write_idx(const std::filesystem::path& path, const Tensor& tensor, IdxType type);

// Images + labels pair, e.g. MNIST. Images get a leading channel axis
// ([n, 1, H, W]) when the file is rank 3.
Dataset load_idx_dataset(const std::filesystem::path& images,
                         const std::filesystem::path& labels, std::size_t num_classes = 10);

// ----- CIFAR-10 binary ---------------------------------------------------------

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;

enum class CifarSplit { kTrain, kTest };

// One binary batch file: records of 1 label byte + 3072 channel-first pixels.
Dataset load_cifar10_file(const std::filesystem::path& file);
// data_batch_1..5.bin (train) or test_batch.bin (test) under `directory`.
Dataset load_cifar10(const std::filesystem::path& directory, CifarSplit split);

// ----- synthetic ---------------------------------------------------------------

// Gaussian blobs, one per class, with class means drawn at scale
// `separation` and unit within-class noise; labels round-robin; the whole set
// is affinely rescaled into [0, 255]. Deterministic per seed.
Dataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t num_classes,
                      std::size_t input_dim, double separation);

// ----- filtering -------------------------------------------------------------

// Samples whose predicted class equals the label, in original order.
std::vector<std::size_t> correct_indices(const Classifier& model, const Dataset& data);
Dataset filter_correct(const Classifier& model, const Dataset& data);

// ----- container -------------------------------------------------------------
//
// <stem>.inputs.idx (doubles), <stem>.labels.idx (bytes) and a sidecar
// <stem>.json with fields source, n, classes, attack (optional), seed.

struct ContainerManifest {
  std::string source;
  std::size_t n = 0;
  std::size_t classes = 0;
  std::optional<AttackConfig> attack;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const AttackConfig& config);
AttackConfig attack_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ContainerManifest& manifest);
ContainerManifest container_manifest_from_json(const nlohmann::json& j);

struct ContainerPaths {
  std::filesystem::path inputs, labels, manifest;
};
ContainerPaths container_paths(const std::filesystem::path& stem);

void write_container(const std::filesystem::path& stem, const Dataset& data,
                     const ContainerManifest& manifest);
Dataset read_container(const std::filesystem::path& stem,
                       ContainerManifest* manifest = nullptr);

}  // namespace advdet
