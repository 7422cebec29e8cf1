#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <vector>

#include "advdet/attacks.hpp"
#include "advdet/data_io.hpp"
#include "advdet/losses.hpp"
#include "advdet/model.hpp"

namespace advdet {

// Piecewise-constant schedule: the value of the last point whose epoch is
// <= the queried epoch. The first point must be at epoch 0.
struct SchedulePoint {
  std::size_t epoch = 0;
  double value = 0.0;
  friend bool operator==(const SchedulePoint&, const SchedulePoint&) = default;
};
using Schedule = std::vector<SchedulePoint>;

double schedule_value(const Schedule& schedule, std::size_t epoch);

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 128;
  // Share of every batch replaced by attacked copies (floor of the product).
  double adv_fraction = 0.10;
  double momentum = 0.9;
  Schedule lr{{0, 0.1}, {50, 0.01}};
  Schedule w_false{{0, 0.2}, {5, 1.0}};
  double w_true = 1.0;
  TrueLossKind true_kind = TrueLossKind::kMultiHot;
  double n_ref = 0.0;  // <= 0 means N_C - 1
  ColumnReading reading = ColumnReading::kColumn;
  AttackConfig attack = AttackConfig::training_default();
  std::uint64_t seed = 0;

  // Writes <checkpoint_dir>/epoch-NNNN.ckpt every `checkpoint_every` epochs
  // (0 disables).
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;

  void validate() const;
  std::size_t adversarial_count(std::size_t batch) const;
  double lr_at(std::size_t epoch) const { return schedule_value(lr, epoch); }
  double w_false_at(std::size_t epoch) const { return schedule_value(w_false, epoch); }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Defaults: 0.1 for epochs [0, 50), 0.01 afterwards.
double lr_schedule(std::size_t epoch);
// Defaults: 0.2 for epochs [0, 5), 1.0 afterwards.
double false_weight_schedule(std::size_t epoch);

struct EpochMetrics {
  std::size_t epoch = 0;
  double true_loss = 0.0;   // mean over batches, unweighted
  double false_loss = 0.0;  // mean over batches, unweighted
  double clean_acc = 0.0;   // accuracy on the clean rows as they were trained on
  double lr = 0.0;
  double w_false = 0.0;
  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};
using TrainMetrics = std::vector<EpochMetrics>;

// Owns the momentum state across epochs.
class Trainer {
 public:
  explicit Trainer(TrainConfig config);

  const TrainConfig& config() const { return config_; }
  const TensorMap& velocity() const { return velocity_; }

  // One pass over `data` in a seeded shuffle. Throws DivergenceError naming
  // the batch if the loss or a gradient stops being finite.
  EpochMetrics train_epoch(Classifier& model, const Dataset& data, std::size_t epoch);

  // One SGD-with-momentum step: v <- m v - lr g; p <- p + v.
  void apply_update(TensorMap& parameters, const TensorMap& grads, double lr);

 private:
  TrainConfig config_;
  TensorMap velocity_;
};

struct TrainResult {
  Classifier model;
  TrainMetrics metrics;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

TrainResult train(Classifier model, const Dataset& data, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

inline constexpr const char* kMetricsHeader = "epoch,true_loss,false_loss,clean_acc,lr,w_false";
std::string metrics_row(const EpochMetrics& m);
void write_metrics_csv(std::ostream& os, const TrainMetrics& metrics);

}  // namespace advdet
