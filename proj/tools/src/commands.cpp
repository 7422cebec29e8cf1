#include "commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "advdet/data_io.hpp"
#include "advdet/detector.hpp"
#include "advdet/errors.hpp"
#include "advdet/trainer.hpp"
#include "artifacts.hpp"
#include "config.hpp"

namespace advdet::cli {

namespace fs = std::filesystem;

namespace {

struct Run {
  std::string command;
  Config config;
  fs::path out;
  std::uint64_t seed = 0;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
  std::ostream& summary;
  std::ostream& log;
};

// ----- configuration pieces -------------------------------------------------

// Where a dataset comes from, resolved from `<prefix>format` and friends.
struct DataSpec {
  std::string format;
  fs::path images, labels, dir, container;
  std::size_t classes = 10;
  CifarSplit split = CifarSplit::kTest;
  std::size_t synth_n = 0, synth_dim = 0;
  double separation = 0.0;
  std::uint64_t synth_seed = 0;
  std::optional<std::size_t> limit;

  Dataset load() const {
    Dataset d;
    if (format == "idx") {
      d = load_idx_dataset(images, labels, classes);
    } else if (format == "cifar10") {
      d = load_cifar10(dir, split);
    } else if (format == "synthetic") {
      d = synth_dataset(synth_seed, synth_n, classes, synth_dim, separation);
    } else {
      d = read_container(container);
    }
    if (limit && *limit < d.size()) d = d.slice(0, *limit);
    d.validate();
    return d;
  }
};

DataSpec data_spec(Run& r, const std::string& p) {
  const Config& c = r.config;
  DataSpec s;
  s.format = c.text(p + "format");
  if (s.format == "idx") {
    s.images = c.existing_path(p + "images");
    s.labels = c.existing_path(p + "labels");
    s.classes = c.count_or(p + "classes", 10);
    r.inputs.insert(r.inputs.end(), {s.images, s.labels});
  } else if (s.format == "cifar10") {
    s.dir = c.existing_path(p + "dir");
    const std::string split = c.text_or(p + "split", "test");
    if (split != "train" && split != "test") {
      throw ConfigError(p + "split: expected train or test, got '" + split + "'");
    }
    s.split = split == "train" ? CifarSplit::kTrain : CifarSplit::kTest;
    r.inputs.push_back(s.dir);
  } else if (s.format == "synthetic") {
    s.synth_n = c.count(p + "n");
    s.classes = c.count_or(p + "classes", 10);
    s.synth_dim = c.count(p + "dim");
    s.separation = c.real_or(p + "separation", 3.0);
    s.synth_seed = c.u64_or(p + "seed", r.seed);
  } else if (s.format == "container") {
    s.container = c.text(p + "path");
    const ContainerPaths paths = container_paths(s.container);
    for (const fs::path& f : {paths.inputs, paths.labels, paths.manifest}) {
      if (!fs::exists(f)) throw ConfigError(p + "path: no such file " + f.string());
      r.inputs.push_back(f);
    }
  } else {
    throw ConfigError(p + "format: expected idx, cifar10, synthetic or container, got '" +
                      s.format + "'");
  }
  s.limit = c.optional_count(p + "limit");
  return s;
}

AttackConfig attack_spec(const Config& c, const std::string& p, const AttackConfig& base,
                         std::uint64_t seed) {
  const AttackFamily family = parse_attack_family(c.text_or(p + "family", to_string(base.family)));
  AttackConfig a = family == base.family ? base : AttackConfig::defaults(family);
  if (family == AttackFamily::kDeepFool) {
    a.epsilon = c.optional_real(p + "epsilon");
    a.overshoot = c.real_or(p + "overshoot", a.overshoot.value_or(0.02));
  } else {
    a.epsilon = c.real_or(p + "epsilon", a.epsilon.value_or(8.0));
  }
  if (family != AttackFamily::kFgsm) a.iterations = c.count_or(p + "iterations", a.iterations);
  if (family != AttackFamily::kFgsm && family != AttackFamily::kDeepFool) {
    a.step = c.real_or(p + "step", a.step);
  }
  if (family == AttackFamily::kPgd) {
    a.random_start = c.flag_or(p + "random_start", a.random_start);
    a.restarts = c.count_or(p + "restarts", a.restarts);
  }
  if (family == AttackFamily::kRaiseFalse) {
    a.target_class = c.count_or(p + "target_class", a.target_class.value_or(0));
  }
  a.seed = seed;
  a.validate();
  return a;
}

TrueLossKind parse_true_loss(const std::string& s) {
  if (s == "multi-hot") return TrueLossKind::kMultiHot;
  if (s == "ce") return TrueLossKind::kCrossEntropy;
  throw ConfigError("train.true_loss: expected multi-hot or ce, got '" + s + "'");
}

ColumnReading parse_reading(const std::string& s) {
  if (s == "column") return ColumnReading::kColumn;
  if (s == "row") return ColumnReading::kRowConcat;
  throw ConfigError("train.reading: expected column or row, got '" + s + "'");
}

// ----- shared steps -----------------------------------------------------------

void check_compatible(const Classifier& model, const Dataset& data) {
  if (model.num_classes() != data.num_classes) {
    throw DataError("model has " + std::to_string(model.num_classes()) + " classes, data has " +
                    std::to_string(data.num_classes));
  }
  if (data.size() > 0 && model.batch_shape(data.size()) != data.inputs.shape()) {
    throw DataError("data samples " + shape_string(data.sample_shape()) +
                    " do not fit the model input " +
                    shape_string(Shape(model.config().input_shape)));
  }
}

Dataset filtered(const Classifier& model, const Dataset& data, bool filter) {
  if (!filter) return data;
  Dataset kept = filter_correct(model, data);
  if (kept.size() == 0) throw DataError("no correctly classified samples left after filtering");
  kept.provenance = data.provenance + ";correct-only";
  return kept;
}

fs::path emit(Run& r, const std::string& name, const std::string& text) {
  const fs::path p = r.out / name;
  write_text_atomically(p, text);
  r.outputs.push_back(p);
  return p;
}

fs::path emit_container(Run& r, const std::string& stem, const Dataset& data,
                        const ContainerManifest& manifest) {
  const fs::path final_stem = r.out / stem;
  const fs::path staging = r.out / (stem + ".partial");
  write_container(staging, data, manifest);
  const ContainerPaths from = container_paths(staging), to = container_paths(final_stem);
  fs::rename(from.inputs, to.inputs);
  fs::rename(from.labels, to.labels);
  fs::rename(from.manifest, to.manifest);
  r.outputs.insert(r.outputs.end(), {to.inputs, to.labels, to.manifest});
  return final_stem;
}

std::string json_text(const nlohmann::json& j) { return j.dump(2) + "\n"; }

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * v);
  return buf;
}

// ----- commands ---------------------------------------------------------------

void cmd_train(Run& r) {
  const Config& c = r.config;
  const DataSpec spec = data_spec(r, "data.");
  ModelConfig mc;
  mc.architecture = parse_architecture(c.text_or("model.architecture", "small-cnn"));
  mc.hidden = c.sizes_or("model.hidden", {64});
  if (mc.architecture == Architecture::kSmallCnn) {
    mc.channels = c.sizes_or("model.channels", mc.channels);
    mc.kernel = c.count_or("model.kernel", mc.kernel);
  }
  mc.seed = r.seed;

  TrainConfig tc;
  tc.epochs = c.count_or("train.epochs", 20);
  tc.batch_size = c.count_or("train.batch_size", tc.batch_size);
  tc.adv_fraction = c.real_or("train.adv_fraction", tc.adv_fraction);
  tc.momentum = c.real_or("train.momentum", tc.momentum);
  tc.lr = c.schedule_or("train.lr", tc.lr);
  tc.w_false = c.schedule_or("train.w_false", tc.w_false);
  tc.w_true = c.real_or("train.w_true", tc.w_true);
  tc.true_kind = parse_true_loss(c.text_or("train.true_loss", "multi-hot"));
  tc.n_ref = c.real_or("train.n_ref", tc.n_ref);
  tc.reading = parse_reading(c.text_or("train.reading", "column"));
  tc.attack = attack_spec(c, "train.attack.", AttackConfig::training_default(), r.seed);
  tc.checkpoint_every = c.count_or("train.checkpoint_every", 0);
  if (tc.checkpoint_every > 0) tc.checkpoint_dir = r.out / "checkpoints";
  tc.seed = r.seed;
  c.reject_unread(r.command);
  tc.validate();

  const Dataset data = spec.load();
  mc.input_shape = data.sample_shape();
  mc.num_classes = data.num_classes;
  const TrainResult result = train(build_classifier(mc), data, tc, [&](const EpochMetrics& m) {
    r.log << "epoch " << m.epoch << " true_loss " << m.true_loss << " false_loss "
          << m.false_loss << " clean_acc " << m.clean_acc << '\n';
  });

  const fs::path model = r.out / "model.ckpt";
  write_atomically(model, [&](const fs::path& tmp) { save_checkpoint(result.model, tmp); });
  r.outputs.push_back(model);
  std::ostringstream csv;
  write_metrics_csv(csv, result.metrics);
  emit(r, "metrics.csv", csv.str());
  if (tc.checkpoint_every > 0) {
    for (const auto& entry : fs::directory_iterator(tc.checkpoint_dir)) {
      r.outputs.push_back(entry.path());
    }
  }

  const double acc = result.metrics.empty() ? 0.0 : result.metrics.back().clean_acc;
  r.summary << "train: " << result.metrics.size() << " epochs, final clean accuracy "
            << percent(acc) << ", model " << model.string() << '\n';
}

void cmd_attack(Run& r) {
  const Config& c = r.config;
  const DataSpec spec = data_spec(r, "data.");
  const fs::path ckpt = c.existing_path("model.checkpoint");
  r.inputs.push_back(ckpt);
  const AttackConfig attack =
      attack_spec(c, "attack.", AttackConfig::defaults(parse_attack_family(c.text("attack.family"))),
                  r.seed);
  const bool filter = c.flag_or("attack.filter_correct", true);
  c.reject_unread(r.command);

  const Classifier model = load_checkpoint(ckpt);
  const Dataset raw = spec.load();
  check_compatible(model, raw);
  const Dataset data = filtered(model, raw, filter);
  const AdversarialBatch adv = run_attack(model, data.inputs, data.labels, attack);

  Dataset out = data;
  out.inputs = adv.perturbed;
  out.provenance = data.provenance + ";attack=" + to_string(attack.family);
  const ContainerManifest manifest{out.provenance, out.size(), out.num_classes, attack, r.seed};
  const fs::path stem = emit_container(r, "adversarial", out, manifest);

  std::size_t successes = 0, zero_grad = 0;
  double linf = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    successes += adv.success[i];
    zero_grad += adv.zero_gradient[i];
  }
  for (std::size_t i = 0; i < out.inputs.size(); ++i) {
    linf = std::max(linf, std::abs(out.inputs[i] - data.inputs[i]));
  }
  const nlohmann::json summary = {{"attack", to_json(attack)},
                                  {"samples", out.size()},
                                  {"successes", successes},
                                  {"success_rate", adv.success_rate()},
                                  {"zero_gradient", zero_grad},
                                  {"max_linf", linf},
                                  {"filtered_correct", filter},
                                  {"source_samples", raw.size()}};
  emit(r, "attack_summary.json", json_text(summary));
  r.summary << "attack: " << to_string(attack.family) << " on " << out.size()
            << " samples, success rate " << percent(adv.success_rate()) << ", set "
            << stem.string() << '\n';
}

void cmd_calibrate(Run& r) {
  const Config& c = r.config;
  const DataSpec spec = data_spec(r, "data.");
  const fs::path ckpt = c.existing_path("model.checkpoint");
  r.inputs.push_back(ckpt);
  const double pct = c.real_or("calibrate.percentile", 99.0);
  const bool filter = c.flag_or("calibrate.filter_correct", true);
  c.reject_unread(r.command);

  const Classifier model = load_checkpoint(ckpt);
  const Dataset raw = spec.load();
  check_compatible(model, raw);
  const Dataset data = filtered(model, raw, filter);
  const DetectorThresholds t = calibrate(model, data, pct);
  nlohmann::json j = to_json(t);
  j["samples"] = data.size();
  emit(r, "thresholds.json", json_text(j));
  r.summary << "calibrate: t_max " << format_real(t.t_max) << ", t_min " << format_real(t.t_min)
            << " from " << t.calibration_size << " false outputs\n";
}

// The adversarial set must line up with either the filtered or the raw clean
// set (same labels in the same order).
Dataset aligned_adversarial(const Dataset& adv, const Dataset& raw, const Dataset& pool,
                            const std::vector<std::size_t>& keep) {
  if (adv.num_classes != pool.num_classes) {
    throw DataError("adversarial set has " + std::to_string(adv.num_classes) +
                    " classes, clean set has " + std::to_string(pool.num_classes));
  }
  if (adv.labels == pool.labels && adv.inputs.shape() == pool.inputs.shape()) return adv;
  if (adv.labels == raw.labels && adv.inputs.shape() == raw.inputs.shape()) {
    return adv.subset(keep);
  }
  throw DataError("adversarial set does not line up with the clean set (" +
                  std::to_string(adv.size()) + " samples vs " + std::to_string(pool.size()) +
                  " filtered / " + std::to_string(raw.size()) + " total)");
}

void cmd_evaluate(Run& r) {
  const Config& c = r.config;
  const DataSpec spec = data_spec(r, "data.");
  const fs::path ckpt = c.existing_path("model.checkpoint");
  r.inputs.push_back(ckpt);
  const fs::path adv_stem = c.text("evaluate.adversarial");
  for (const fs::path& f : {container_paths(adv_stem).inputs, container_paths(adv_stem).labels,
                            container_paths(adv_stem).manifest}) {
    if (!fs::exists(f)) throw ConfigError("evaluate.adversarial: no such file " + f.string());
    r.inputs.push_back(f);
  }
  const TprMode mode = parse_tpr_mode(c.text_or("evaluate.tpr_mode", "all"));
  const std::string calibration = c.text_or("evaluate.calibration", "pool");
  if (calibration != "pool" && calibration != "split") {
    throw ConfigError("evaluate.calibration: expected pool or split, got '" + calibration + "'");
  }
  const double fraction = c.real_or("evaluate.calibration_fraction", 0.5);
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ConfigError("evaluate.calibration_fraction must lie in (0, 1)");
  }
  const double pct = c.real_or("evaluate.percentile", 99.0);
  c.reject_unread(r.command);

  const Classifier model = load_checkpoint(ckpt);
  const Dataset raw = spec.load();
  check_compatible(model, raw);
  const std::vector<std::size_t> keep = correct_indices(model, raw);
  if (keep.empty()) throw DataError("no correctly classified clean samples left after filtering");
  const Dataset pool = raw.subset(keep);
  const Dataset adv = aligned_adversarial(read_container(adv_stem), raw, pool, keep);

  const Tensor clean_logits = model.predict(pool.inputs);
  const Tensor adv_logits = model.predict(adv.inputs);

  // Pool: calibrate and evaluate on the whole filtered set. Split: calibrate
  // on the leading fraction, evaluate on the rest.
  const DetectionReport pool_report =
      evaluate(clean_logits, adv_logits, adv.labels, calibrate(clean_logits, pool.labels, pct), mode);
  std::optional<DetectionReport> split_report;
  const auto n_cal = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(pool.size())));
  if (n_cal >= 1 && n_cal < pool.size()) {
    const Labels cal_labels(pool.labels.begin(), pool.labels.begin() + static_cast<long>(n_cal));
    const Labels rest_labels(adv.labels.begin() + static_cast<long>(n_cal), adv.labels.end());
    split_report = evaluate(clean_logits.slice_rows(n_cal, pool.size()),
                            adv_logits.slice_rows(n_cal, pool.size()), rest_labels,
                            calibrate(clean_logits.slice_rows(0, n_cal), cal_labels, pct), mode);
  } else if (calibration == "split") {
    throw DataError("too few filtered samples for a calibration split");
  }

  const DetectionReport& primary = calibration == "pool" ? pool_report : *split_report;
  auto block = [&](const DetectionReport& rep, const std::string& name, std::size_t cal_n,
                   std::size_t eval_n) {
    nlohmann::json j = to_json(rep);
    j["calibration"] = name;
    j["calibration_samples"] = cal_n;
    j["evaluation_samples"] = eval_n;
    return j;
  };
  nlohmann::json report =
      calibration == "pool" ? block(pool_report, "pool", pool.size(), pool.size())
                            : block(*split_report, "split", n_cal, pool.size() - n_cal);
  report["clean_total"] = raw.size();
  report["clean_filtered"] = pool.size();
  if (calibration == "pool") {
    report["alternate"] = split_report ? block(*split_report, "split", n_cal, pool.size() - n_cal)
                                       : nlohmann::json(nullptr);
  } else {
    report["alternate"] = block(pool_report, "pool", pool.size(), pool.size());
  }
  emit(r, "report.json", json_text(report));

  std::ostringstream clean_csv, adv_csv;
  write_sample_csv(clean_csv, primary.clean_max, primary.clean_min,
                   primary.with_min_threshold.clean_flags);
  write_sample_csv(adv_csv, primary.adv_max, primary.adv_min, primary.with_min_threshold.adv_flags);
  emit(r, "clean_samples.csv", clean_csv.str());
  emit(r, "adversarial_samples.csv", adv_csv.str());

  r.summary << "evaluate (" << calibration << " calibration): TPR "
            << percent(primary.with_min_threshold.tpr) << ", FPR "
            << percent(primary.with_min_threshold.fpr) << ", max-only TPR "
            << percent(primary.max_only.tpr) << ", AUROC " << format_real(primary.auroc) << '\n';
}

void cmd_histogram(Run& r) {
  const Config& c = r.config;
  const DataSpec spec = data_spec(r, "data.");
  const fs::path ckpt = c.existing_path("model.checkpoint");
  r.inputs.push_back(ckpt);
  const double width = c.real_or("histogram.bin_width", 0.5);
  if (!(width > 0.0)) throw ConfigError("histogram.bin_width must be positive");
  const bool filter = c.flag_or("histogram.filter_correct", true);
  const std::optional<std::size_t> false_class = c.optional_count("histogram.false_class");
  std::optional<fs::path> adv_stem;
  std::optional<AttackConfig> attack;
  if (c.has("histogram.adversarial")) {
    adv_stem = c.text("histogram.adversarial");
    const ContainerPaths paths = container_paths(*adv_stem);
    for (const fs::path& f : {paths.inputs, paths.labels, paths.manifest}) {
      if (!fs::exists(f)) throw ConfigError("histogram.adversarial: no such file " + f.string());
      r.inputs.push_back(f);
    }
  } else if (c.has("attack.family")) {
    attack = attack_spec(c, "attack.", AttackConfig::defaults(parse_attack_family(c.text("attack.family"))),
                         r.seed);
  }
  c.reject_unread(r.command);

  const Classifier model = load_checkpoint(ckpt);
  const Dataset raw = spec.load();
  check_compatible(model, raw);
  if (false_class && *false_class >= raw.num_classes) {
    throw ConfigError("histogram.false_class is not a class index");
  }
  const Dataset data = filtered(model, raw, filter);

  std::optional<Dataset> attacked;
  if (adv_stem) {
    std::vector<std::size_t> keep(raw.size());
    std::iota(keep.begin(), keep.end(), 0);
    if (filter) keep = correct_indices(model, raw);
    attacked = aligned_adversarial(read_container(*adv_stem), raw, data, keep);
  } else if (attack) {
    // A raise-false probe only makes sense where the target is a false output.
    std::vector<std::size_t> probe;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!attack->target_class || data.labels[i] != *attack->target_class) probe.push_back(i);
    }
    attacked = data.subset(probe);
    attacked->inputs = run_attack(model, attacked->inputs, attacked->labels, *attack).perturbed;
  }

  // Splits raw outputs into true and false values; false values are limited
  // to one class column when requested.
  auto split_outputs = [&](const Dataset& d, std::vector<double>& t, std::vector<double>& f) {
    const Tensor logits = model.predict(d.inputs);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto row = logits.row(i);
      for (std::size_t k = 0; k < row.size(); ++k) {
        if (k == d.labels[i]) {
          t.push_back(row[k]);
        } else if (!false_class || k == *false_class) {
          f.push_back(row[k]);
        }
      }
    }
  };
  std::map<std::string, std::vector<double>> series;
  split_outputs(data, series["true_clean"], series["false_clean"]);
  series["true_attacked"];
  series["false_attacked"];
  if (attacked) split_outputs(*attacked, series["true_attacked"], series["false_attacked"]);

  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (const auto& [name, values] : series) {
    for (double v : values) {
      lo = any ? std::min(lo, v) : v;
      hi = any ? std::max(hi, v) : v;
      any = true;
    }
  }
  const auto first = static_cast<long long>(std::floor(lo / width));
  const auto last = static_cast<long long>(std::floor(hi / width));
  if (last - first >= 1'000'000) throw ConfigError("histogram.bin_width gives too many bins");

  std::string csv = "series,bin_left,bin_right,count\n";
  for (const char* name : {"true_clean", "false_clean", "true_attacked", "false_attacked"}) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(last - first + 1), 0);
    for (double v : series[name]) {
      ++counts[static_cast<std::size_t>(static_cast<long long>(std::floor(v / width)) - first)];
    }
    for (std::size_t b = 0; b < counts.size(); ++b) {
      const double left = static_cast<double>(first + static_cast<long long>(b)) * width;
      csv += std::string(name) + ',' + format_real(left) + ',' + format_real(left + width) + ',' +
             std::to_string(counts[b]) + '\n';
    }
  }
  emit(r, "histogram.csv", csv);
  r.summary << "histogram: " << series["true_clean"].size() << " clean samples, "
            << series["true_attacked"].size() << " attacked, " << (last - first + 1)
            << " bins of width " << format_real(width) << '\n';
}

using CommandFn = void (*)(Run&);

const std::map<std::string, CommandFn>& table() {
  static const std::map<std::string, CommandFn> t{{"train", cmd_train},
                                                  {"attack", cmd_attack},
                                                  {"evaluate", cmd_evaluate},
                                                  {"histogram", cmd_histogram},
                                                  {"calibrate", cmd_calibrate}};
  return t;
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"train", "attack", "evaluate", "histogram",
                                              "calibrate"};
  return names;
}

int run(const Invocation& inv, std::ostream& summary, std::ostream& log) {
  const auto started = std::chrono::steady_clock::now();
  try {
    const auto it = table().find(inv.command);
    if (it == table().end()) throw ConfigError("unknown command " + inv.command);
    Config config = Config::load(inv.config);
    if (inv.seed) config.set("seed", std::to_string(*inv.seed));
    if (inv.out) config.set("out", inv.out->string());
    Run r{inv.command, std::move(config), {}, 0, {}, {}, summary, log};
    r.seed = r.config.u64_or("seed", 0);
    r.out = r.config.text("out");
    r.inputs.push_back(inv.config);
    fs::create_directories(r.out);

    it->second(r);

    RunManifest m;
    m.command = r.command;
    m.config = r.config.resolved();
    m.seed = r.seed;
    m.inputs = r.inputs;
    m.outputs = r.outputs;
    m.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    write_run_manifest(r.out, m);
    return kExitOk;
  } catch (const ConfigError& e) {
    log << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace advdet::cli
