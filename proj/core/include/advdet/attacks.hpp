#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "advdet/model.hpp"
#include "advdet/tensor.hpp"

namespace advdet {

enum class AttackFamily { kFgsm, kBim, kPgd, kDeepFool, kSuppressTrue, kRaiseFalse };

std::string to_string(AttackFamily family);
// Accepts fgsm, bim, pgd, deepfool, suppress-true, raise-false.
AttackFamily parse_attack_family(const std::string& text);

struct InputRange {
  double min = 0.0;
  double max = 255.0;
  friend bool operator==(const InputRange&, const InputRange&) = default;
};

struct AttackConfig {
  AttackFamily family = AttackFamily::kPgd;
  // L-infinity bound in input units. Absent only for unconstrained DeepFool.
  std::optional<double> epsilon = 8.0;
  double step = 2.0;
  std::size_t iterations = 10;
  bool random_start = false;               // pgd
  std::optional<double> overshoot;         // deepfool
  std::size_t restarts = 1;                // pgd
  std::optional<std::size_t> target_class; // raise-false
  std::uint64_t seed = 0;
  InputRange range;

  // Sensible per-family defaults with the family-specific fields filled in.
  static AttackConfig defaults(AttackFamily family);
  // The in-training attack: suppress-true, eps 8, step 2, 5 iterations.
  static AttackConfig training_default();

  // Throws ConfigError if a value is out of range or a family-specific field
  // is set for another family.
  void validate() const;
  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

struct AdversarialBatch {
  Tensor originals;
  Tensor perturbed;
  AttackConfig config;
  // Final prediction differs from the reference label (the given label, or
  // the clean prediction when no labels were given).
  std::vector<bool> success;
  // The attack objective had an identically zero input gradient; the sample
  // was returned unchanged.
  std::vector<bool> zero_gradient;

  double success_rate() const;
};

AdversarialBatch fgsm(const Classifier& model, const Tensor& x, const Labels& y,
                      double epsilon, InputRange range = {});

AdversarialBatch bim(const Classifier& model, const Tensor& x, const Labels& y,
                     double epsilon, double step, std::size_t iterations,
                     InputRange range = {});

// With restarts > 1 each sample keeps the restart with the highest final
// cross-entropy. Random starts draw from a stream seeded by
// (seed, sample index, restart).
AdversarialBatch pgd(const Classifier& model, const Tensor& x, const Labels& y,
                     double epsilon, double step, std::size_t iterations, bool random_start,
                     std::size_t restarts, std::uint64_t seed, InputRange range = {});

// Multi-class DeepFool. Without `labels` the clean prediction is the class
// to move away from; samples already misclassified w.r.t. `labels` are left
// untouched. With `epsilon_clip` the final perturbation is projected onto
// the L-infinity ball.
AdversarialBatch deepfool(const Classifier& model, const Tensor& x, std::size_t max_iterations,
                          double overshoot, std::optional<double> epsilon_clip = std::nullopt,
                          const Labels* labels = nullptr, InputRange range = {});

// Signed-gradient descent on the true raw output.
AdversarialBatch suppress_true_logit(const Classifier& model, const Tensor& x,
                                     const Labels& y, double epsilon, double step,
                                     std::size_t iterations, InputRange range = {});

// Signed-gradient ascent on raw output `target_class`, which must differ
// from every sample's label.
AdversarialBatch raise_false_logit(const Classifier& model, const Tensor& x, const Labels& y,
                                   std::size_t target_class, double epsilon, double step,
                                   std::size_t iterations, InputRange range = {});

AdversarialBatch run_attack(const Classifier& model, const Tensor& x, const Labels& y,
                            const AttackConfig& config);

}  // namespace advdet
