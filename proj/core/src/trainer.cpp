#include "advdet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>

#include "advdet/errors.hpp"

namespace advdet {

namespace {

void check_schedule(const Schedule& s, const char* what, bool allow_zero) {
  if (s.empty() || s.front().epoch != 0) {
    throw ConfigError(std::string(what) + " schedule must start at epoch 0");
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i > 0 && s[i].epoch <= s[i - 1].epoch) {
      throw ConfigError(std::string(what) + " schedule epochs must increase");
    }
    const double v = s[i].value;
    if (!std::isfinite(v) || v < 0.0 || (!allow_zero && v == 0.0)) {
      throw ConfigError(std::string(what) + " schedule value out of range");
    }
  }
}

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t epoch, std::uint64_t batch,
                       std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(batch),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

std::string diverged(std::size_t epoch, std::size_t batch) {
  return "training diverged at epoch " + std::to_string(epoch) + ", batch " +
         std::to_string(batch);
}

}  // namespace

double schedule_value(const Schedule& schedule, std::size_t epoch) {
  if (schedule.empty()) throw ConfigError("empty schedule");
  double v = schedule.front().value;
  for (const SchedulePoint& p : schedule) {
    if (p.epoch > epoch) break;
    v = p.value;
  }
  return v;
}

double lr_schedule(std::size_t epoch) { return TrainConfig{}.lr_at(epoch); }
double false_weight_schedule(std::size_t epoch) { return TrainConfig{}.w_false_at(epoch); }

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(adv_fraction >= 0.0 && adv_fraction <= 1.0)) {
    throw ConfigError("train.adv_fraction must lie in [0, 1]");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must lie in [0, 1)");
  if (!std::isfinite(w_true) || w_true < 0.0) throw ConfigError("train.w_true must be >= 0");
  check_schedule(lr, "learning-rate", false);
  check_schedule(w_false, "w_false", true);
  if (!std::isfinite(n_ref)) throw ConfigError("train.n_ref must be finite");
  if (checkpoint_every > 0 && checkpoint_dir.empty()) {
    throw ConfigError("checkpoint_every needs a checkpoint directory");
  }
  if (adv_fraction > 0.0) attack.validate();
}

std::size_t TrainConfig::adversarial_count(std::size_t batch) const {
  // The slack keeps products like 0.29 * 100 from rounding down a whole unit.
  return static_cast<std::size_t>(std::floor(adv_fraction * static_cast<double>(batch) + 1e-9));
}

// ---------------------------------------------------------------------------

Trainer::Trainer(TrainConfig config) : config_(std::move(config)) { config_.validate(); }

void Trainer::apply_update(TensorMap& parameters, const TensorMap& grads, double lr) {
  const double m = config_.momentum;
  for (auto& [name, p] : parameters) {
    const Tensor& g = grads.at(name);
    auto [it, fresh] = velocity_.try_emplace(name, Tensor(p.shape()));
    Tensor& v = it->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = m * v[i] - lr * g[i];
      p[i] += v[i];
    }
  }
}

EpochMetrics Trainer::train_epoch(Classifier& model, const Dataset& data, std::size_t epoch) {
  if (data.size() == 0) throw ContractError("cannot train on an empty dataset");
  if (data.num_classes != model.num_classes()) {
    throw ContractError("dataset has " + std::to_string(data.num_classes) +
                        " classes, model has " + std::to_string(model.num_classes()));
  }
  if (model.batch_shape(data.size()) != data.inputs.shape()) {
    throw ShapeError("dataset inputs " + shape_string(data.inputs.shape()) +
                     " do not match model input " + shape_string(model.batch_shape(data.size())));
  }

  const double lr = config_.lr_at(epoch);
  TrainingLossSpec spec;
  spec.weights = {config_.w_true, config_.w_false_at(epoch)};
  spec.true_kind = config_.true_kind;
  spec.n_ref = config_.n_ref;
  spec.reading = config_.reading;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  auto shuffle_rng = stream(config_.seed, epoch, 0, 1);
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  EpochMetrics metrics;
  metrics.epoch = epoch;
  metrics.lr = lr;
  metrics.w_false = spec.weights.w_false;
  double true_sum = 0.0, false_sum = 0.0;
  std::size_t true_batches = 0, batches = 0, clean_seen = 0, clean_right = 0;

  for (std::size_t start = 0, batch = 0; start < order.size();
       start += config_.batch_size, ++batch) {
    const std::size_t end = std::min(order.size(), start + config_.batch_size);
    const std::span<const std::size_t> ids(order.data() + start, end - start);
    const std::size_t b = ids.size();
    Tensor x = data.inputs.gather_rows(ids);
    Labels y(b);
    for (std::size_t i = 0; i < b; ++i) y[i] = data.labels[ids[i]];

    // Attacked copies replace a random subset of the batch.
    std::vector<bool> adversarial(b, false);
    const std::size_t n_adv = config_.adversarial_count(b);
    if (n_adv > 0) {
      std::vector<std::size_t> slots(b);
      std::iota(slots.begin(), slots.end(), 0);
      auto pick_rng = stream(config_.seed, epoch, batch, 2);
      std::shuffle(slots.begin(), slots.end(), pick_rng);
      slots.resize(n_adv);
      std::sort(slots.begin(), slots.end());
      Labels y_adv(n_adv);
      for (std::size_t k = 0; k < n_adv; ++k) y_adv[k] = y[slots[k]];
      AdversarialBatch adv;
      try {
        adv = run_attack(model, x.gather_rows(slots), y_adv, config_.attack);
      } catch (const NumericError& e) {
        throw DivergenceError(diverged(epoch, batch) + " while attacking: " + e.what());
      }
      for (std::size_t k = 0; k < n_adv; ++k) {
        const auto src = adv.perturbed.row(k);
        std::copy(src.begin(), src.end(), x.row(slots[k]).begin());
        adversarial[slots[k]] = true;
      }
    }

    Graph graph;
    const NodeId in = graph.input("x", x.shape());
    const NodeId logits = model.emit(graph, in);
    const TrainingLossNodes loss = combined_training_loss(graph, logits, y, adversarial, spec);

    TensorMap bindings = model.parameters();
    bindings.emplace("x", std::move(x));
    std::vector<NodeId> wrt;
    for (const auto& [name, p] : model.parameters()) wrt.push_back(*graph.find_leaf(name));

    TensorMap grads;
    Execution run;
    try {
      run = forward(graph, bindings);
      grads = backward(graph, run, loss.total, wrt);
    } catch (const NumericError& e) {
      throw DivergenceError(diverged(epoch, batch) + ": " + e.what());
    }
    for (const auto& [name, g] : grads) {
      if (!g.all_finite()) {
        throw DivergenceError("non-finite gradient for " + name + " at epoch " +
                              std::to_string(epoch) + ", batch " + std::to_string(batch));
      }
    }

    const Tensor& out = run.value(logits);
    for (std::size_t i = 0; i < b; ++i) {
      if (adversarial[i]) continue;
      ++clean_seen;
      if (argmax_class(out.row(i)) == y[i]) ++clean_right;
    }
    if (loss.true_term) {
      true_sum += run.value(*loss.true_term).item();
      ++true_batches;
    }
    false_sum += run.value(loss.false_term).item();
    ++batches;

    apply_update(model.parameters(), grads, lr);
  }

  metrics.true_loss = true_batches ? true_sum / static_cast<double>(true_batches) : 0.0;
  metrics.false_loss = false_sum / static_cast<double>(batches);
  metrics.clean_acc =
      clean_seen ? static_cast<double>(clean_right) / static_cast<double>(clean_seen) : 0.0;
  return metrics;
}

TrainResult train(Classifier model, const Dataset& data, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  Trainer trainer(config);
  TrainResult result{std::move(model), {}};
  if (config.checkpoint_every > 0) std::filesystem::create_directories(config.checkpoint_dir);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    result.metrics.push_back(trainer.train_epoch(result.model, data, epoch));
    if (on_epoch) on_epoch(result.metrics.back());
    if (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch-%04zu.ckpt", epoch + 1);
      save_checkpoint(result.model, config.checkpoint_dir / name);
    }
  }
  return result;
}

std::string metrics_row(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g", m.epoch, m.true_loss,
                m.false_loss, m.clean_acc, m.lr, m.w_false);
  return buf;
}

void write_metrics_csv(std::ostream& os, const TrainMetrics& metrics) {
  os << kMetricsHeader << '\n';
  for (const EpochMetrics& m : metrics) os << metrics_row(m) << '\n';
}

}  // namespace advdet
