#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "advdet/errors.hpp"
#include "advdet/losses.hpp"
#include "advdet/model.hpp"

using namespace advdet;

namespace {

ModelConfig mlp_config() {
  ModelConfig c;
  c.architecture = Architecture::kMlp;
  c.input_shape = {6};
  c.num_classes = 4;
  c.hidden = {5};
  c.seed = 11;
  return c;
}

ModelConfig cnn_config() {
  ModelConfig c;
  c.architecture = Architecture::kSmallCnn;
  c.input_shape = {1, 8, 8};
  c.num_classes = 3;
  c.hidden = {6};
  c.channels = {2, 3};
  c.seed = 12;
  return c;
}

Tensor random_inputs(std::mt19937_64& rng, Shape shape) {
  std::uniform_real_distribution<double> u(0.0, 255.0);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Gives the zero-initialised output layer some weight so that predictions
// depend on the input.
void randomize_output(Classifier& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : m.parameters().at("out.weight").values()) v = n(rng);
  for (double& v : m.parameters().at("out.bias").values()) v = n(rng);
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("advdet_test_" + name);
}

}  // namespace

TEST(BuildClassifier, DeterministicPerSeed) {
  for (const ModelConfig& c : {mlp_config(), cnn_config()}) {
    EXPECT_EQ(build_classifier(c), build_classifier(c));
    ModelConfig other = c;
    other.seed += 1;
    EXPECT_NE(build_classifier(c).parameters(), build_classifier(other).parameters());
  }
}

TEST(BuildClassifier, FinalLayerStartsAtZero) {
  std::mt19937_64 rng(1);
  for (const ModelConfig& c : {mlp_config(), cnn_config()}) {
    const Classifier m = build_classifier(c);
    for (double v : m.parameters().at("out.weight").values()) EXPECT_EQ(v, 0.0);
    for (double v : m.parameters().at("out.bias").values()) EXPECT_EQ(v, 0.0);
    const Tensor logits = m.predict(random_inputs(rng, m.batch_shape(5)));
    EXPECT_EQ(logits, Tensor({5, c.num_classes}));
  }
}

TEST(BuildClassifier, InitialSoftmaxIsUniform) {
  std::mt19937_64 rng(2);
  const Classifier m = build_classifier(mlp_config());
  Graph g;
  const NodeId x = g.input("x", m.batch_shape(3));
  const NodeId s = g.softmax(m.emit(g, x), 1);
  TensorMap bind = m.parameters();
  bind["x"] = random_inputs(rng, m.batch_shape(3));
  const Execution run = forward(g, bind);
  for (double v : run.value(s).values()) EXPECT_EQ(v, 0.25);
}

TEST(BuildClassifier, ConfigErrors) {
  ModelConfig c = mlp_config();
  c.num_classes = 1;
  EXPECT_THROW(build_classifier(c), ConfigError);
  c = mlp_config();
  c.input_shape = {};
  EXPECT_THROW(build_classifier(c), ConfigError);
  c = cnn_config();
  c.input_shape = {8, 8};
  EXPECT_THROW(build_classifier(c), ConfigError);
  EXPECT_THROW(parse_architecture("resnet"), ConfigError);
}

TEST(BuildClassifier, ZeroInitFalseLossGradientIsFiniteAndNonzero) {
  std::mt19937_64 rng(3);
  const Classifier m = build_classifier(mlp_config());
  Graph g;
  const NodeId x = g.input("x", m.batch_shape(6));
  const Labels y{0, 1, 2, 3, 0, 1};
  const NodeId loss = false_output_loss(g, m.emit(g, x), y);
  TensorMap bind = m.parameters();
  bind["x"] = random_inputs(rng, m.batch_shape(6));
  const Execution run = forward(g, bind);
  EXPECT_EQ(run.value(loss).item(), 0.0);
  const TensorMap grads = backward(g, run, loss);
  for (const auto& [name, t] : grads) EXPECT_TRUE(t.all_finite()) << name;

  // Once the output layer is nonzero the gradient is nonzero too.
  Classifier moved = m;
  randomize_output(moved, 4);
  TensorMap bind2 = moved.parameters();
  bind2["x"] = bind["x"];
  const TensorMap g2 = backward(g, forward(g, bind2), loss);
  double norm = 0.0;
  for (const auto& [name, t] : g2) {
    EXPECT_TRUE(t.all_finite()) << name;
    for (double v : t.values()) norm += v * v;
  }
  EXPECT_GT(norm, 0.0);
  // At zero init the output-layer weight gradient already carries signal.
  double out_norm = 0.0;
  const TensorMap true_grads = [&] {
    Graph h;
    const NodeId xi = h.input("x", m.batch_shape(6));
    const auto t = true_output_loss(h, m.emit(h, xi), y, 3.0);
    return backward(h, forward(h, bind), *t);
  }();
  for (double v : true_grads.at("out.weight").values()) out_norm += v * v;
  EXPECT_GT(out_norm, 0.0);
}

TEST(Predict, ShapeAndRowIndependence) {
  std::mt19937_64 rng(5);
  for (const ModelConfig& c : {mlp_config(), cnn_config()}) {
    Classifier m = build_classifier(c);
    randomize_output(m, 6);
    const Tensor one = m.predict(random_inputs(rng, m.batch_shape(1)));
    EXPECT_EQ(one.shape(), (Shape{1, c.num_classes}));

    const Tensor x = random_inputs(rng, m.batch_shape(7));
    const Tensor y = m.predict(x);
    const std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};
    EXPECT_EQ(m.predict(x.gather_rows(perm)), y.gather_rows(perm));
    EXPECT_THROW(m.predict(Tensor({2, 3})), ShapeError);
  }
}

TEST(Predict, ChunkingDoesNotChangeValues) {
  std::mt19937_64 rng(6);
  Classifier m = build_classifier(mlp_config());
  randomize_output(m, 7);
  const Tensor x = random_inputs(rng, m.batch_shape(600));
  const Tensor all = m.predict(x);
  for (std::size_t i : {0u, 255u, 256u, 599u}) {
    EXPECT_EQ(m.predict(x.slice_rows(i, i + 1)), all.slice_rows(i, i + 1));
  }
}

TEST(ArgmaxClass, Examples) {
  EXPECT_EQ(argmax_class(std::vector<double>{0.1, 5.0, 0.2}), 1u);
  EXPECT_EQ(argmax_class(std::vector<double>{3, 3, 1}), 0u);
  EXPECT_EQ(argmax_class(std::vector<double>{-1, -2, -0.5}), 2u);
}

TEST(Checkpoint, RoundTripsBitExactly) {
  for (const ModelConfig& c : {mlp_config(), cnn_config()}) {
    Classifier m = build_classifier(c);
    randomize_output(m, 8);
    m.parameters().at("out.bias")[0] = -0.0;
    m.parameters().at("out.bias")[1] = 1e-310;
    const auto path = temp_file("ckpt.bin");
    save_checkpoint(m, path);
    const Classifier back = load_checkpoint(path);
    EXPECT_EQ(back.config(), m.config());
    for (const auto& [name, t] : m.parameters()) {
      const Tensor& u = back.parameters().at(name);
      ASSERT_EQ(u.shape(), t.shape());
      EXPECT_EQ(0, std::memcmp(u.data(), t.data(), t.size() * sizeof(double))) << name;
    }
    std::filesystem::remove(path);
  }
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto path = temp_file("bad.bin");
  {
    std::ofstream os(path, std::ios::binary);
    os << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint(path), FormatError);

  const Classifier m = build_classifier(mlp_config());
  save_checkpoint(m, path);
  {
    std::ofstream os(path, std::ios::binary | std::ios::app);
    os << 'x';
  }
  EXPECT_THROW(load_checkpoint(path), FormatError);

  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 9);
  EXPECT_THROW(load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), FormatError);
}
