#include "advdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include <nlohmann/json.hpp>

#include "advdet/errors.hpp"
#include "advdet/losses.hpp"

namespace advdet {

double percentile_nearest_rank(std::span<const double> values, double p) {
  if (values.empty()) throw ContractError("percentile of an empty set");
  if (!(p > 0.0 && p <= 100.0)) throw ContractError("percentile must lie in (0, 100]");
  const double n = static_cast<double>(values.size());
  std::size_t rank = static_cast<std::size_t>(std::ceil(p * n / 100.0));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  std::vector<double> sorted(values.begin(), values.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(rank - 1),
                   sorted.end());
  return sorted[rank - 1];
}

DetectorThresholds calibrate_from_false_outputs(std::span<const double> false_outputs,
                                                double percentile) {
  if (false_outputs.empty()) throw ContractError("calibration needs at least one false output");
  DetectorThresholds t;
  t.t_max = percentile_nearest_rank(false_outputs, percentile);
  t.t_min = *std::min_element(false_outputs.begin(), false_outputs.end());
  t.calibration_size = false_outputs.size();
  t.percentile = percentile;
  return t;
}

DetectorThresholds calibrate(const Tensor& logits, const Labels& labels, double percentile) {
  return calibrate_from_false_outputs(false_output_set(logits, labels).values, percentile);
}

DetectorThresholds calibrate(const Classifier& model, const Dataset& calibration,
                             double percentile) {
  if (calibration.size() == 0) throw ContractError("empty calibration set");
  if (calibration.num_classes != model.num_classes()) {
    throw ShapeError("calibration set has " + std::to_string(calibration.num_classes) +
                     " classes, model has " + std::to_string(model.num_classes()));
  }
  return calibrate(model.predict(calibration.inputs), calibration.labels, percentile);
}

bool detect(std::span<const double> row, const DetectorThresholds& t) {
  const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
  return *hi < t.t_max || *lo < t.t_min;
}

bool detect_max_only(std::span<const double> row, double t_max) {
  return *std::max_element(row.begin(), row.end()) < t_max;
}

double auroc(std::span<const double> clean, std::span<const double> adv) {
  if (clean.empty() || adv.empty()) throw ContractError("AUROC needs two nonempty score sets");
  std::vector<double> a(adv.begin(), adv.end());
  std::sort(a.begin(), a.end());
  // Integer pair counts keep the result identical to the pairwise count.
  unsigned long long twice_wins = 0;
  for (double c : clean) {
    const auto lo = std::lower_bound(a.begin(), a.end(), c);
    const auto hi = std::upper_bound(lo, a.end(), c);
    twice_wins += 2ULL * static_cast<unsigned long long>(lo - a.begin()) +
                  static_cast<unsigned long long>(hi - lo);
  }
  return static_cast<double>(twice_wins) /
         (2.0 * static_cast<double>(clean.size()) * static_cast<double>(adv.size()));
}

std::string to_string(TprMode mode) { return mode == TprMode::kAll ? "all" : "successful"; }

TprMode parse_tpr_mode(const std::string& text) {
  if (text == "all") return TprMode::kAll;
  if (text == "successful") return TprMode::kSuccessful;
  throw ConfigError("unknown TPR mode '" + text + "' (expected all or successful)");
}

namespace {

double ratio(std::size_t a, std::size_t b) {
  return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0;
}

template <typename Rule>
RuleResult apply_rule(const Tensor& clean, const Tensor& adv, const std::vector<bool>& success,
                      TprMode mode, Rule&& rule) {
  RuleResult r;
  r.clean_total = clean.dim(0);
  for (std::size_t i = 0; i < clean.dim(0); ++i) {
    r.clean_flags.push_back(rule(clean.row(i)));
    r.clean_flagged += r.clean_flags.back();
  }
  std::size_t n_success = 0;
  for (std::size_t i = 0; i < adv.dim(0); ++i) {
    const bool f = rule(adv.row(i));
    r.adv_flags.push_back(f);
    r.adv_all_flagged += f;
    n_success += success[i];
    r.adv_successful_flagged += f && success[i];
  }
  r.fpr = ratio(r.clean_flagged, r.clean_total);
  r.tpr_all = ratio(r.adv_all_flagged, adv.dim(0));
  r.tpr_successful = ratio(r.adv_successful_flagged, n_success);
  if (mode == TprMode::kAll) {
    r.adv_total = adv.dim(0);
    r.adv_flagged = r.adv_all_flagged;
    r.tpr = r.tpr_all;
  } else {
    r.adv_total = n_success;
    r.adv_flagged = r.adv_successful_flagged;
    r.tpr = r.tpr_successful;
  }
  return r;
}

nlohmann::json to_json(const RuleResult& r) {
  return {{"tpr", r.tpr},
          {"fpr", r.fpr},
          {"tpr_all", r.tpr_all},
          {"tpr_successful", r.tpr_successful},
          {"clean_total", r.clean_total},
          {"clean_flagged", r.clean_flagged},
          {"adv_total", r.adv_total},
          {"adv_flagged", r.adv_flagged}};
}

}  // namespace

DetectionReport evaluate(const Tensor& clean_logits, const Tensor& adv_logits,
                         const Labels& adv_labels, const DetectorThresholds& thresholds,
                         TprMode mode) {
  if (clean_logits.rank() != 2 || adv_logits.rank() != 2 ||
      clean_logits.dim(1) != adv_logits.dim(1)) {
    throw ShapeError("evaluate needs [n, N_C] logits with matching class counts, got " +
                     shape_string(clean_logits.shape()) + " and " +
                     shape_string(adv_logits.shape()));
  }
  if (clean_logits.dim(0) == 0 || adv_logits.dim(0) == 0) {
    throw ContractError("evaluate needs nonempty clean and adversarial sets");
  }
  if (adv_labels.size() != adv_logits.dim(0)) {
    throw ShapeError("adversarial labels do not match the adversarial logits");
  }

  DetectionReport rep;
  rep.thresholds = thresholds;
  rep.mode = mode;
  for (std::size_t i = 0; i < adv_logits.dim(0); ++i) {
    rep.adv_success.push_back(argmax_class(adv_logits.row(i)) != adv_labels[i]);
    rep.adv_successful += rep.adv_success.back();
  }
  auto both = [&](std::span<const double> row) { return detect(row, thresholds); };
  auto max_only = [&](std::span<const double> row) {
    return detect_max_only(row, thresholds.t_max);
  };
  rep.with_min_threshold = apply_rule(clean_logits, adv_logits, rep.adv_success, mode, both);
  rep.max_only = apply_rule(clean_logits, adv_logits, rep.adv_success, mode, max_only);

  auto extremes = [](const Tensor& t, std::vector<double>& mx, std::vector<double>& mn) {
    for (std::size_t i = 0; i < t.dim(0); ++i) {
      const auto row = t.row(i);
      const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
      mx.push_back(*hi);
      mn.push_back(*lo);
    }
  };
  extremes(clean_logits, rep.clean_max, rep.clean_min);
  extremes(adv_logits, rep.adv_max, rep.adv_min);

  std::vector<double> counted;
  for (std::size_t i = 0; i < rep.adv_max.size(); ++i) {
    if (mode == TprMode::kAll || rep.adv_success[i]) counted.push_back(rep.adv_max[i]);
  }
  rep.auroc = counted.empty() ? 0.0 : auroc(rep.clean_max, counted);
  return rep;
}

DetectionReport evaluate(const Classifier& model, const Dataset& clean,
                         const Dataset& adversarial, const DetectorThresholds& thresholds,
                         TprMode mode) {
  if (clean.size() == 0 || adversarial.size() == 0) {
    throw ContractError("evaluate needs nonempty clean and adversarial sets");
  }
  return evaluate(model.predict(clean.inputs), model.predict(adversarial.inputs),
                  adversarial.labels, thresholds, mode);
}

nlohmann::json to_json(const DetectorThresholds& t) {
  return {{"t_max", t.t_max},
          {"t_min", t.t_min},
          {"calibration_size", t.calibration_size},
          {"percentile", t.percentile}};
}

nlohmann::json to_json(const DetectionReport& r) {
  return {{"thresholds", to_json(r.thresholds)},
          {"tpr_mode", to_string(r.mode)},
          {"adv_successful", r.adv_successful},
          {"with_min_threshold", to_json(r.with_min_threshold)},
          {"max_only", to_json(r.max_only)},
          {"auroc", r.auroc}};
}

void write_sample_csv(std::ostream& os, std::span<const double> max_logit,
                      std::span<const double> min_logit, const std::vector<bool>& flagged) {
  os << "sample_id,max_logit,min_logit,flagged\n";
  char buf[128];
  for (std::size_t i = 0; i < max_logit.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%d\n", i, max_logit[i], min_logit[i],
                  flagged[i] ? 1 : 0);
    os << buf;
  }
}

}  // namespace advdet
