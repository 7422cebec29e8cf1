#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "advdet/data_io.hpp"
#include "advdet/model.hpp"
#include "advdet/tensor.hpp"

namespace advdet {

// Element at 1-based rank ceil(p/100 * N) of the ascending sort.
// p in (0, 100]; throws ContractError on empty input.
double percentile_nearest_rank(std::span<const double> values, double p);

struct DetectorThresholds {
  double t_max = 0.0;
  double t_min = 0.0;
  std::size_t calibration_size = 0;  // number of false outputs used
  double percentile = 99.0;
  friend bool operator==(const DetectorThresholds&, const DetectorThresholds&) = default;
};

// t_max = nearest-rank percentile, t_min = minimum, both over `false_outputs`.
DetectorThresholds calibrate_from_false_outputs(std::span<const double> false_outputs,
                                                double percentile = 99.0);
DetectorThresholds calibrate(const Tensor& logits, const Labels& labels,
                             double percentile = 99.0);
DetectorThresholds calibrate(const Classifier& model, const Dataset& calibration,
                             double percentile = 99.0);

// max(row) < t_max or min(row) < t_min.
bool detect(std::span<const double> row, const DetectorThresholds& thresholds);
// max(row) < t_max.
bool detect_max_only(std::span<const double> row, double t_max);

// P(clean score > adversarial score) with ties counted as 1/2; exact.
double auroc(std::span<const double> clean_scores, std::span<const double> adversarial_scores);

// Whether TPR counts every attacked sample or only those whose prediction
// the attack changed.
enum class TprMode { kAll, kSuccessful };
std::string to_string(TprMode mode);
TprMode parse_tpr_mode(const std::string& text);

struct RuleResult {
  std::size_t clean_total = 0, clean_flagged = 0;
  std::size_t adv_total = 0, adv_flagged = 0;          // per the report's TPR mode
  std::size_t adv_all_flagged = 0, adv_successful_flagged = 0;
  double tpr = 0.0, fpr = 0.0;
  double tpr_all = 0.0, tpr_successful = 0.0;
  std::vector<bool> clean_flags, adv_flags;
};

struct DetectionReport {
  DetectorThresholds thresholds;
  TprMode mode = TprMode::kAll;
  std::size_t adv_successful = 0;
  RuleResult with_min_threshold;
  RuleResult max_only;
  // Score = max raw output; over the adversarial samples counted by `mode`.
  double auroc = 0.0;
  std::vector<double> clean_max, clean_min, adv_max, adv_min;
  std::vector<bool> adv_success;
};

// `adv_labels` are the labels of the originals; an attacked sample succeeded
// when its prediction differs from that label.
DetectionReport evaluate(const Tensor& clean_logits, const Tensor& adv_logits,
                         const Labels& adv_labels, const DetectorThresholds& thresholds,
                         TprMode mode = TprMode::kAll);
DetectionReport evaluate(const Classifier& model, const Dataset& clean,
                         const Dataset& adversarial, const DetectorThresholds& thresholds,
                         TprMode mode = TprMode::kAll);

nlohmann::json to_json(const DetectorThresholds& t);
nlohmann::json to_json(const DetectionReport& report);

// sample_id,max_logit,min_logit,flagged (flags from the two-threshold rule).
void write_sample_csv(std::ostream& os, std::span<const double> max_logit,
                      std::span<const double> min_logit, const std::vector<bool>& flagged);

}  // namespace advdet
