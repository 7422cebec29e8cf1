#include "advdet/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include <nlohmann/json.hpp>

#include "advdet/errors.hpp"

namespace advdet {

namespace fs = std::filesystem;

Shape Dataset::sample_shape() const {
  const Shape& s = inputs.shape();
  return s.empty() ? Shape{} : Shape(s.begin() + 1, s.end());
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.inputs = inputs.gather_rows(indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(labels.at(i));
  out.num_classes = num_classes;
  out.provenance = provenance;
  return out;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  Dataset out;
  out.inputs = inputs.slice_rows(begin, end);
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(end));
  out.num_classes = num_classes;
  out.provenance = provenance;
  return out;
}

Dataset Dataset::reshaped(const Shape& sample_shape) const {
  Shape full{size()};
  full.insert(full.end(), sample_shape.begin(), sample_shape.end());
  Dataset out = *this;
  out.inputs = inputs.reshaped(std::move(full));
  return out;
}

void Dataset::validate(InputRange range) const {
  if (inputs.rank() == 0 || inputs.dim(0) != labels.size()) {
    throw FormatError("dataset has " + std::to_string(labels.size()) + " labels for inputs " +
                      shape_string(inputs.shape()));
  }
  for (std::size_t l : labels) {
    if (l >= num_classes) {
      throw FormatError("label " + std::to_string(l) + " outside " +
                        std::to_string(num_classes) + " classes");
    }
  }
  for (double v : inputs.values()) {
    if (!(v >= range.min && v <= range.max)) {
      throw FormatError("input value " + std::to_string(v) + " outside the valid range");
    }
  }
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), {});
}

std::uint64_t read_be(const unsigned char* p, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < bytes; ++i) v = (v << 8) | p[i];
  return v;
}

void write_be(std::vector<unsigned char>& out, std::uint64_t v, std::size_t bytes) {
  for (std::size_t i = bytes; i-- > 0;) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::size_t idx_width(IdxType t) {
  switch (t) {
    case IdxType::kUnsignedByte:
    case IdxType::kSignedByte: return 1;
    case IdxType::kShort: return 2;
    case IdxType::kInt:
    case IdxType::kFloat: return 4;
    case IdxType::kDouble: return 8;
  }
  throw FormatError("unknown IDX type");
}

bool known_idx_type(unsigned char code) {
  return code == 0x08 || code == 0x09 || code == 0x0B || code == 0x0C || code == 0x0D ||
         code == 0x0E;
}

void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError("error writing " + path.string());
}

}  // namespace

Tensor load_idx(const fs::path& path) {
  const std::vector<unsigned char> bytes = read_file(path);
  if (bytes.size() < 4 || bytes[0] != 0 || bytes[1] != 0 || !known_idx_type(bytes[2])) {
    throw FormatError(path.string() + ": bad IDX magic");
  }
  const auto type = static_cast<IdxType>(bytes[2]);
  const std::size_t rank = bytes[3];
  if (rank == 0 || bytes.size() < 4 + 4 * rank) {
    throw FormatError(path.string() + ": truncated IDX header");
  }
  Shape shape(rank);
  for (std::size_t d = 0; d < rank; ++d) shape[d] = read_be(&bytes[4 + 4 * d], 4);
  const std::size_t width = idx_width(type);
  const std::size_t count = shape_size(shape);
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() - header != count * width) {
    throw FormatError(path.string() + ": payload has " + std::to_string(bytes.size() - header) +
                      " bytes, header declares " + std::to_string(count * width));
  }
  Tensor t(shape);
  const unsigned char* p = bytes.data() + header;
  for (std::size_t i = 0; i < count; ++i, p += width) {
    const std::uint64_t raw = read_be(p, width);
    switch (type) {
      case IdxType::kUnsignedByte: t[i] = static_cast<double>(raw); break;
      case IdxType::kSignedByte: t[i] = static_cast<std::int8_t>(raw); break;
      case IdxType::kShort: t[i] = static_cast<std::int16_t>(raw); break;
      case IdxType::kInt: t[i] = static_cast<std::int32_t>(raw); break;
      case IdxType::kFloat: t[i] = std::bit_cast<float>(static_cast<std::uint32_t>(raw)); break;
      case IdxType::kDouble: t[i] = std::bit_cast<double>(raw); break;
    }
  }
  return t;
}

void write_idx(const fs::path& path, const Tensor& tensor, IdxType type) {
  if (tensor.rank() == 0 || tensor.rank() > 255) throw FormatError("IDX needs rank 1..255");
  std::vector<unsigned char> out{0, 0, static_cast<unsigned char>(type),
                                 static_cast<unsigned char>(tensor.rank())};
  for (std::size_t d : tensor.shape()) write_be(out, d, 4);
  const std::size_t width = idx_width(type);
  out.reserve(out.size() + tensor.size() * width);
  for (double v : tensor.values()) {
    std::uint64_t raw = 0;
    if (type == IdxType::kDouble) {
      raw = std::bit_cast<std::uint64_t>(v);
    } else if (type == IdxType::kFloat) {
      raw = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    } else {
      const double lo = type == IdxType::kUnsignedByte ? 0.0
                        : type == IdxType::kSignedByte ? -128.0
                        : type == IdxType::kShort      ? -32768.0
                                                       : -2147483648.0;
      const double hi = type == IdxType::kUnsignedByte ? 255.0
                        : type == IdxType::kSignedByte ? 127.0
                        : type == IdxType::kShort      ? 32767.0
                                                       : 2147483647.0;
      if (v != std::floor(v) || v < lo || v > hi) {
        throw ContractError("value " + std::to_string(v) + " not representable in IDX type");
      }
      raw = static_cast<std::uint64_t>(static_cast<std::int64_t>(v));
    }
    write_be(out, raw, width);
  }
  write_bytes(path, out);
}

Dataset load_idx_dataset(const fs::path& images, const fs::path& labels,
                         std::size_t num_classes) {
  Dataset d;
  d.inputs = load_idx(images);
  const Tensor lab = load_idx(labels);
  if (lab.rank() != 1 || lab.dim(0) != d.inputs.dim(0)) {
    throw FormatError("label file " + labels.string() + " does not match " + images.string());
  }
  if (d.inputs.rank() == 3) {
    d.inputs = d.inputs.reshaped({d.inputs.dim(0), 1, d.inputs.dim(1), d.inputs.dim(2)});
  }
  d.labels.reserve(lab.size());
  for (double v : lab.values()) {
    if (v < 0 || v != std::floor(v)) throw FormatError("non-integral label in " + labels.string());
    d.labels.push_back(static_cast<std::size_t>(v));
  }
  d.num_classes = num_classes;
  d.provenance = "idx:" + images.string();
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// CIFAR-10

Dataset load_cifar10_file(const fs::path& file) {
  const std::vector<unsigned char> bytes = read_file(file);
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError(file.string() + ": corrupt CIFAR-10 file (" +
                      std::to_string(bytes.size()) + " bytes is not a multiple of " +
                      std::to_string(kCifarRecordBytes) + ")");
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Dataset d;
  d.inputs = Tensor({n, 3, 32, 32});
  d.labels.resize(n);
  d.num_classes = 10;
  d.provenance = "cifar10:" + file.string();
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw FormatError(file.string() + ": label " + std::to_string(rec[0]) + " in record " +
                        std::to_string(i));
    }
    d.labels[i] = rec[0];
    auto row = d.inputs.row(i);
    for (std::size_t k = 0; k < kCifarRecordBytes - 1; ++k) row[k] = rec[1 + k];
  }
  return d;
}

Dataset load_cifar10(const fs::path& directory, CifarSplit split) {
  std::vector<fs::path> files;
  if (split == CifarSplit::kTest) {
    files.push_back(directory / "test_batch.bin");
  } else {
    for (int i = 1; i <= 5; ++i) {
      files.push_back(directory / ("data_batch_" + std::to_string(i) + ".bin"));
    }
  }
  std::vector<Dataset> parts;
  std::size_t total = 0;
  for (const fs::path& f : files) {
    parts.push_back(load_cifar10_file(f));
    total += parts.back().size();
  }
  Dataset d;
  d.inputs = Tensor({total, 3, 32, 32});
  d.num_classes = 10;
  d.provenance = "cifar10:" + directory.string();
  std::size_t pos = 0;
  for (const Dataset& p : parts) {
    std::copy(p.inputs.values().begin(), p.inputs.values().end(),
              d.inputs.values().begin() + static_cast<std::ptrdiff_t>(pos));
    pos += p.inputs.size();
    d.labels.insert(d.labels.end(), p.labels.begin(), p.labels.end());
  }
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic

Dataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t num_classes,
                      std::size_t input_dim, double separation) {
  if (num_classes < 2 || n < num_classes || input_dim == 0) {
    throw ContractError("synth_dataset needs n >= classes >= 2 and input_dim >= 1");
  }
  if (!(separation > 0.0)) throw ContractError("synth_dataset separation must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> means(num_classes * input_dim);
  for (double& m : means) m = separation * normal(rng);

  Dataset d;
  d.inputs = Tensor({n, input_dim});
  d.labels.resize(n);
  d.num_classes = num_classes;
  d.provenance = "synthetic:seed=" + std::to_string(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % num_classes;
    d.labels[i] = c;
    auto row = d.inputs.row(i);
    for (std::size_t k = 0; k < input_dim; ++k) row[k] = means[c * input_dim + k] + normal(rng);
  }
  const auto [lo, hi] = std::minmax_element(d.inputs.values().begin(), d.inputs.values().end());
  const double low = *lo, span = *hi - *lo;
  for (double& v : d.inputs.values()) {
    v = span > 0.0 ? std::clamp((v - low) / span * 255.0, 0.0, 255.0) : 0.0;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Filtering

std::vector<std::size_t> correct_indices(const Classifier& model, const Dataset& data) {
  if (model.num_classes() != data.num_classes) {
    throw ContractError("model has " + std::to_string(model.num_classes()) +
                        " classes, dataset has " + std::to_string(data.num_classes));
  }
  std::vector<std::size_t> keep;
  if (data.size() == 0) return keep;
  const Labels pred = predicted_classes(model.predict(data.inputs));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == data.labels[i]) keep.push_back(i);
  }
  return keep;
}

Dataset filter_correct(const Classifier& model, const Dataset& data) {
  const std::vector<std::size_t> keep = correct_indices(model, data);
  return data.subset(keep);
}

// ---------------------------------------------------------------------------
// Container

nlohmann::json to_json(const AttackConfig& c) {
  nlohmann::json j{{"family", to_string(c.family)},
                   {"step", c.step},
                   {"iterations", c.iterations},
                   {"random_start", c.random_start},
                   {"restarts", c.restarts},
                   {"seed", c.seed},
                   {"range_min", c.range.min},
                   {"range_max", c.range.max}};
  j["epsilon"] = c.epsilon ? nlohmann::json(*c.epsilon) : nlohmann::json(nullptr);
  j["unconstrained"] = !c.epsilon.has_value();
  if (c.overshoot) j["overshoot"] = *c.overshoot;
  if (c.target_class) j["target_class"] = *c.target_class;
  return j;
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.family = parse_attack_family(j.at("family").get<std::string>());
  c.epsilon.reset();
  if (!j.at("epsilon").is_null()) c.epsilon = j.at("epsilon").get<double>();
  c.step = j.at("step").get<double>();
  c.iterations = j.at("iterations").get<std::size_t>();
  c.random_start = j.at("random_start").get<bool>();
  c.restarts = j.at("restarts").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.range = {j.at("range_min").get<double>(), j.at("range_max").get<double>()};
  if (j.contains("overshoot")) c.overshoot = j.at("overshoot").get<double>();
  if (j.contains("target_class")) c.target_class = j.at("target_class").get<std::size_t>();
  return c;
}

nlohmann::json to_json(const ContainerManifest& m) {
  nlohmann::json j{{"source", m.source}, {"n", m.n}, {"classes", m.classes}, {"seed", m.seed}};
  j["attack"] = m.attack ? to_json(*m.attack) : nlohmann::json(nullptr);
  return j;
}

ContainerManifest container_manifest_from_json(const nlohmann::json& j) {
  ContainerManifest m;
  m.source = j.at("source").get<std::string>();
  m.n = j.at("n").get<std::size_t>();
  m.classes = j.at("classes").get<std::size_t>();
  m.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("attack") && !j.at("attack").is_null()) {
    m.attack = attack_config_from_json(j.at("attack"));
  }
  return m;
}

ContainerPaths container_paths(const fs::path& stem) {
  const std::string base = stem.string();
  return {base + ".inputs.idx", base + ".labels.idx", base + ".json"};
}

void write_container(const fs::path& stem, const Dataset& data,
                     const ContainerManifest& manifest) {
  if (manifest.n != data.size() || manifest.classes != data.num_classes) {
    throw ContractError("container manifest does not describe the dataset");
  }
  const ContainerPaths paths = container_paths(stem);
  write_idx(paths.inputs, data.inputs, IdxType::kDouble);
  Tensor labels({data.size()});
  for (std::size_t i = 0; i < data.size(); ++i) labels[i] = static_cast<double>(data.labels[i]);
  write_idx(paths.labels, labels, IdxType::kUnsignedByte);
  std::ofstream os(paths.manifest, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + paths.manifest.string());
  os << to_json(manifest).dump(2) << '\n';
}

Dataset read_container(const fs::path& stem, ContainerManifest* manifest) {
  const ContainerPaths paths = container_paths(stem);
  std::ifstream is(paths.manifest);
  if (!is) throw FormatError("cannot open " + paths.manifest.string());
  ContainerManifest m;
  try {
    m = container_manifest_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(paths.manifest.string() + ": " + e.what());
  }
  Dataset d;
  d.inputs = load_idx(paths.inputs);
  const Tensor lab = load_idx(paths.labels);
  if (lab.rank() != 1 || lab.dim(0) != d.inputs.dim(0) || m.n != lab.dim(0)) {
    throw FormatError("container " + stem.string() + " has inconsistent sample counts");
  }
  for (double v : lab.values()) d.labels.push_back(static_cast<std::size_t>(v));
  d.num_classes = m.classes;
  d.provenance = m.source;
  d.validate(m.attack ? m.attack->range : InputRange{});
  if (manifest) *manifest = std::move(m);
  return d;
}

}  // namespace advdet
