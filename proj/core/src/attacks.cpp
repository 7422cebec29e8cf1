#include "advdet/attacks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>

#include "advdet/errors.hpp"
#include "advdet/graph.hpp"

namespace advdet {

std::string to_string(AttackFamily family) {
  switch (family) {
    case AttackFamily::kFgsm: return "fgsm";
    case AttackFamily::kBim: return "bim";
    case AttackFamily::kPgd: return "pgd";
    case AttackFamily::kDeepFool: return "deepfool";
    case AttackFamily::kSuppressTrue: return "suppress-true";
    case AttackFamily::kRaiseFalse: return "raise-false";
  }
  return "?";
}

AttackFamily parse_attack_family(const std::string& text) {
  for (AttackFamily f : {AttackFamily::kFgsm, AttackFamily::kBim, AttackFamily::kPgd,
                         AttackFamily::kDeepFool, AttackFamily::kSuppressTrue,
                         AttackFamily::kRaiseFalse}) {
    if (to_string(f) == text) return f;
  }
  throw ConfigError("unknown attack family '" + text + "'");
}

AttackConfig AttackConfig::defaults(AttackFamily family) {
  AttackConfig c;
  c.family = family;
  switch (family) {
    case AttackFamily::kFgsm:
      c.step = 8.0;
      c.iterations = 1;
      break;
    case AttackFamily::kDeepFool:
      c.epsilon.reset();
      c.iterations = 50;
      c.overshoot = 0.02;
      break;
    case AttackFamily::kSuppressTrue:
      c.iterations = 5;
      break;
    case AttackFamily::kRaiseFalse:
      c.target_class = 0;
      break;
    default:
      break;
  }
  return c;
}

AttackConfig AttackConfig::training_default() {
  AttackConfig c = defaults(AttackFamily::kSuppressTrue);
  c.epsilon = 8.0;
  c.step = 2.0;
  c.iterations = 5;
  return c;
}

void AttackConfig::validate() const {
  const std::string name = to_string(family);
  if (!(range.min < range.max)) throw ConfigError("attack input range is empty");
  if (iterations < 1) throw ConfigError(name + ": iterations must be >= 1");
  if (epsilon && !(*epsilon >= 0.0 && std::isfinite(*epsilon))) {
    throw ConfigError(name + ": epsilon must be finite and >= 0");
  }
  if (!epsilon && family != AttackFamily::kDeepFool) {
    throw ConfigError(name + ": epsilon is required");
  }
  if (family != AttackFamily::kDeepFool && family != AttackFamily::kFgsm &&
      !(step > 0.0 && std::isfinite(step))) {
    throw ConfigError(name + ": step must be positive");
  }
  if (random_start && family != AttackFamily::kPgd) {
    throw ConfigError(name + ": random start applies to pgd only");
  }
  if (restarts < 1) throw ConfigError(name + ": restarts must be >= 1");
  if (restarts > 1 && family != AttackFamily::kPgd) {
    throw ConfigError(name + ": restarts apply to pgd only");
  }
  if (overshoot.has_value() != (family == AttackFamily::kDeepFool)) {
    throw ConfigError(name + ": overshoot is set exactly for deepfool");
  }
  if (overshoot && !(*overshoot >= 0.0)) throw ConfigError("deepfool overshoot must be >= 0");
  if (target_class.has_value() != (family == AttackFamily::kRaiseFalse)) {
    throw ConfigError(name + ": target class is set exactly for raise-false");
  }
}

double AdversarialBatch::success_rate() const {
  if (success.empty()) return 0.0;
  return static_cast<double>(std::count(success.begin(), success.end(), true)) /
         static_cast<double>(success.size());
}

namespace {

constexpr std::size_t kAttackChunk = 128;

enum class Objective {
  kCrossEntropy,   // ascend per-sample CE at the label
  kTrueLogitDown,  // ascend -y[label]
  kClassLogitUp,   // ascend y[cls]
};

struct ObjectiveGrad {
  Tensor grad;                 // ascent direction, same shape as x
  std::vector<double> values;  // per-sample objective
};

void check_batch(const Classifier& model, const Tensor& x, const Labels* y) {
  if (x.rank() == 0 || x.shape() != model.batch_shape(x.dim(0))) {
    throw ShapeError("attack input " + shape_string(x.shape()) + " does not match model input");
  }
  if (y) {
    if (y->size() != x.dim(0)) throw ContractError("attack: label count does not match batch");
    for (std::size_t l : *y) {
      if (l >= model.num_classes()) throw ContractError("attack: label out of range");
    }
  }
}

// Gradient of sum_i objective_i with respect to x. Samples never interact,
// so chunking leaves every per-sample value unchanged.
ObjectiveGrad objective_gradient(const Classifier& model, const Tensor& x, const Labels& y,
                                 Objective objective, std::size_t cls = 0) {
  const std::size_t n = x.dim(0), classes = model.num_classes();
  ObjectiveGrad out{Tensor(x.shape()), std::vector<double>(n)};
  for (std::size_t begin = 0; begin < n; begin += kAttackChunk) {
    const std::size_t end = std::min(n, begin + kAttackChunk);
    Graph graph;
    const NodeId input = graph.input("x", model.batch_shape(end - begin));
    const NodeId logits = model.emit(graph, input);
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t c = objective == Objective::kClassLogitUp ? cls : y[i];
      idx.push_back((i - begin) * classes + c);
    }
    NodeId picked;
    if (objective == Objective::kCrossEntropy) {
      picked = graph.neg(graph.gather(graph.log_softmax(logits, 1), idx));
    } else if (objective == Objective::kTrueLogitDown) {
      picked = graph.neg(graph.gather(logits, idx));
    } else {
      picked = graph.gather(logits, idx);
    }
    const NodeId total = graph.sum(picked);

    TensorMap bindings = model.parameters();
    bindings["x"] = x.slice_rows(begin, end);
    const Execution run = forward(graph, bindings);
    const NodeId wrt[] = {input};
    const TensorMap grads = backward(graph, run, total, wrt);
    const Tensor& g = grads.at("x");
    std::copy(g.values().begin(), g.values().end(),
              out.grad.values().begin() + static_cast<std::ptrdiff_t>(begin * x.row_size()));
    for (std::size_t i = begin; i < end; ++i) out.values[i] = run.value(picked)[i - begin];
  }
  return out;
}

inline double sign(double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); }

void project(const Tensor& origin, std::optional<double> epsilon, InputRange range,
             Tensor& x) {
  for (std::size_t k = 0; k < x.size(); ++k) {
    double v = x[k];
    if (epsilon) v = std::clamp(v, origin[k] - *epsilon, origin[k] + *epsilon);
    x[k] = std::clamp(v, range.min, range.max);
  }
}

std::vector<bool> zero_rows(const Tensor& grad) {
  std::vector<bool> out(grad.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto r = grad.row(i);
    out[i] = std::all_of(r.begin(), r.end(), [](double v) { return v == 0.0; });
  }
  return out;
}

std::vector<bool> differs(const Labels& predicted, const Labels& reference) {
  std::vector<bool> out(predicted.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = predicted[i] != reference[i];
  return out;
}

// Iterated signed-gradient ascent with projection after every step; the
// shared core of fgsm/bim/pgd and the raw-output attacks.
Tensor signed_gradient_ascent(const Classifier& model, const Tensor& origin, Tensor start,
                              const Labels& y, Objective objective, std::size_t cls,
                              double epsilon, double step, std::size_t iterations,
                              InputRange range, std::vector<bool>* zero_gradient) {
  Tensor x = std::move(start);
  for (std::size_t it = 0; it < iterations; ++it) {
    const ObjectiveGrad og = objective_gradient(model, x, y, objective, cls);
    if (it == 0 && zero_gradient) *zero_gradient = zero_rows(og.grad);
    for (std::size_t k = 0; k < x.size(); ++k) x[k] += step * sign(og.grad[k]);
    project(origin, epsilon, range, x);
  }
  return x;
}

AdversarialBatch finish(const Classifier& model, const Tensor& x, Tensor perturbed,
                        const Labels& reference, AttackConfig config,
                        std::vector<bool> zero_gradient) {
  AdversarialBatch out;
  out.success = differs(predicted_classes(model.predict(perturbed)), reference);
  out.originals = x;
  out.perturbed = std::move(perturbed);
  out.config = std::move(config);
  out.zero_gradient = zero_gradient.empty() ? std::vector<bool>(x.dim(0), false)
                                            : std::move(zero_gradient);
  return out;
}

std::uint64_t stream_seed(std::uint64_t seed, std::size_t sample, std::size_t restart) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(sample), static_cast<std::uint32_t>(restart)};
  std::array<std::uint32_t, 2> words{};
  seq.generate(words.begin(), words.end());
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

// Logits and the input gradient of every logit, one forward per chunk.
struct ClassGradients {
  Tensor logits;
  std::vector<Tensor> grads;  // per class, shaped like x
};

ClassGradients class_logit_gradients(const Classifier& model, const Tensor& x) {
  const std::size_t n = x.dim(0), classes = model.num_classes();
  ClassGradients out{Tensor({n, classes}), std::vector<Tensor>(classes, Tensor(x.shape()))};
  for (std::size_t begin = 0; begin < n; begin += kAttackChunk) {
    const std::size_t end = std::min(n, begin + kAttackChunk);
    Graph graph;
    const NodeId input = graph.input("x", model.batch_shape(end - begin));
    const NodeId logits = model.emit(graph, input);
    std::vector<NodeId> per_class;
    for (std::size_t k = 0; k < classes; ++k) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < end - begin; ++i) idx.push_back(i * classes + k);
      per_class.push_back(graph.sum(graph.gather(logits, std::move(idx))));
    }
    TensorMap bindings = model.parameters();
    bindings["x"] = x.slice_rows(begin, end);
    const Execution run = forward(graph, bindings);
    const auto& lv = run.value(logits).values();
    std::copy(lv.begin(), lv.end(),
              out.logits.values().begin() + static_cast<std::ptrdiff_t>(begin * classes));
    const NodeId wrt[] = {input};
    for (std::size_t k = 0; k < classes; ++k) {
      const Tensor g = backward(graph, run, per_class[k], wrt).at("x");
      std::copy(g.values().begin(), g.values().end(),
                out.grads[k].values().begin() +
                    static_cast<std::ptrdiff_t>(begin * x.row_size()));
    }
  }
  return out;
}

}  // namespace

AdversarialBatch fgsm(const Classifier& model, const Tensor& x, const Labels& y,
                      double epsilon, InputRange range) {
  AttackConfig cfg = AttackConfig::defaults(AttackFamily::kFgsm);
  cfg.epsilon = epsilon;
  cfg.step = epsilon;
  cfg.range = range;
  cfg.validate();
  check_batch(model, x, &y);
  std::vector<bool> zero;
  Tensor adv = signed_gradient_ascent(model, x, x, y, Objective::kCrossEntropy, 0, epsilon,
                                      epsilon, 1, range, &zero);
  return finish(model, x, std::move(adv), y, cfg, std::move(zero));
}

AdversarialBatch bim(const Classifier& model, const Tensor& x, const Labels& y,
                     double epsilon, double step, std::size_t iterations, InputRange range) {
  AttackConfig cfg = AttackConfig::defaults(AttackFamily::kBim);
  cfg.epsilon = epsilon;
  cfg.step = step;
  cfg.iterations = iterations;
  cfg.range = range;
  cfg.validate();
  check_batch(model, x, &y);
  std::vector<bool> zero;
  Tensor adv = signed_gradient_ascent(model, x, x, y, Objective::kCrossEntropy, 0, epsilon,
                                      step, iterations, range, &zero);
  return finish(model, x, std::move(adv), y, cfg, std::move(zero));
}

AdversarialBatch pgd(const Classifier& model, const Tensor& x, const Labels& y,
                     double epsilon, double step, std::size_t iterations, bool random_start,
                     std::size_t restarts, std::uint64_t seed, InputRange range) {
  AttackConfig cfg = AttackConfig::defaults(AttackFamily::kPgd);
  cfg.epsilon = epsilon;
  cfg.step = step;
  cfg.iterations = iterations;
  cfg.random_start = random_start;
  cfg.restarts = restarts;
  cfg.seed = seed;
  cfg.range = range;
  cfg.validate();
  check_batch(model, x, &y);

  const std::size_t n = x.dim(0), row = x.row_size();
  Tensor best;
  std::vector<double> best_loss(n, -std::numeric_limits<double>::infinity());
  std::vector<bool> zero;
  for (std::size_t r = 0; r < restarts; ++r) {
    Tensor start = x;
    if (random_start) {
      for (std::size_t i = 0; i < n; ++i) {
        std::mt19937_64 rng(stream_seed(seed, i, r));
        std::uniform_real_distribution<double> noise(-epsilon, epsilon);
        for (double& v : start.row(i)) v += noise(rng);
      }
      project(x, epsilon, range, start);
    }
    std::vector<bool> zero_r;
    Tensor adv = signed_gradient_ascent(model, x, std::move(start), y, Objective::kCrossEntropy,
                                        0, epsilon, step, iterations, range, &zero_r);
    if (restarts == 1) return finish(model, x, std::move(adv), y, cfg, std::move(zero_r));

    const std::vector<double> loss =
        objective_gradient(model, adv, y, Objective::kCrossEntropy).values;
    if (r == 0) {
      best = adv;
      zero = zero_r;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (loss[i] > best_loss[i]) {
        best_loss[i] = loss[i];
        std::copy_n(adv.row(i).begin(), row, best.row(i).begin());
        zero[i] = zero_r[i];
      }
    }
  }
  return finish(model, x, std::move(best), y, cfg, std::move(zero));
}

AdversarialBatch deepfool(const Classifier& model, const Tensor& x, std::size_t max_iterations,
                          double overshoot, std::optional<double> epsilon_clip,
                          const Labels* labels, InputRange range) {
  AttackConfig cfg = AttackConfig::defaults(AttackFamily::kDeepFool);
  cfg.epsilon = epsilon_clip;
  cfg.iterations = max_iterations;
  cfg.overshoot = overshoot;
  cfg.range = range;
  cfg.validate();
  check_batch(model, x, labels);

  const std::size_t n = x.dim(0), row = x.row_size(), classes = model.num_classes();
  const Labels clean_pred = predicted_classes(model.predict(x));
  const Labels reference = labels ? *labels : clean_pred;

  Tensor total_step(x.shape());  // accumulated r_tot
  Tensor current = x;
  std::vector<bool> active(n), zero(n, false);
  for (std::size_t i = 0; i < n; ++i) active[i] = clean_pred[i] == reference[i];

  for (std::size_t it = 0; it < max_iterations; ++it) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < n; ++i) {
      if (active[i]) rows.push_back(i);
    }
    if (rows.empty()) break;
    const ClassGradients cg = class_logit_gradients(model, current.gather_rows(rows));
    const Tensor& logits = cg.logits;
    const std::vector<Tensor>& class_grads = cg.grads;

    for (std::size_t j = 0; j < rows.size(); ++j) {
      const std::size_t i = rows[j];
      const auto f = logits.row(j);
      const std::size_t k0 = reference[i];
      if (argmax_class(f) != k0) {
        active[i] = false;
        continue;
      }
      const auto g0 = class_grads[k0].row(j);
      double best_dist = std::numeric_limits<double>::infinity();
      std::size_t best_k = classes;
      double best_norm2 = 0.0;
      for (std::size_t k = 0; k < classes; ++k) {
        if (k == k0) continue;
        const auto gk = class_grads[k].row(j);
        double norm2 = 0.0;
        for (std::size_t d = 0; d < row; ++d) {
          const double w = gk[d] - g0[d];
          norm2 += w * w;
        }
        if (norm2 == 0.0) continue;
        const double dist = std::abs(f[k] - f[k0]) / std::sqrt(norm2);
        if (dist < best_dist) {
          best_dist = dist;
          best_k = k;
          best_norm2 = norm2;
        }
      }
      if (best_k == classes) {
        // Flat in every direction: no boundary to step toward.
        zero[i] = true;
        active[i] = false;
        std::fill(total_step.row(i).begin(), total_step.row(i).end(), 0.0);
        continue;
      }
      const auto gl = class_grads[best_k].row(j);
      const double scale = std::abs(f[best_k] - f[k0]) / best_norm2;
      auto r = total_step.row(i);
      auto cur = current.row(i);
      const auto orig = x.row(i);
      for (std::size_t d = 0; d < row; ++d) {
        r[d] += scale * (gl[d] - g0[d]);
        cur[d] = std::clamp(orig[d] + (1.0 + overshoot) * r[d], range.min, range.max);
      }
    }
  }

  Tensor adv = x;
  for (std::size_t i = 0; i < n; ++i) {
    if (zero[i]) continue;
    auto a = adv.row(i);
    const auto r = total_step.row(i);
    for (std::size_t d = 0; d < row; ++d) a[d] += (1.0 + overshoot) * r[d];
  }
  project(x, epsilon_clip, range, adv);
  return finish(model, x, std::move(adv), reference, cfg, std::move(zero));
}

AdversarialBatch suppress_true_logit(const Classifier& model, const Tensor& x,
                                     const Labels& y, double epsilon, double step,
                                     std::size_t iterations, InputRange range) {
  AttackConfig cfg = AttackConfig::defaults(AttackFamily::kSuppressTrue);
  cfg.epsilon = epsilon;
  cfg.step = step;
  cfg.iterations = iterations;
  cfg.range = range;
  cfg.validate();
  check_batch(model, x, &y);
  std::vector<bool> zero;
  Tensor adv = signed_gradient_ascent(model, x, x, y, Objective::kTrueLogitDown, 0, epsilon,
                                      step, iterations, range, &zero);
  return finish(model, x, std::move(adv), y, cfg, std::move(zero));
}

AdversarialBatch raise_false_logit(const Classifier& model, const Tensor& x, const Labels& y,
                                   std::size_t target_class, double epsilon, double step,
                                   std::size_t iterations, InputRange range) {
  AttackConfig cfg = AttackConfig::defaults(AttackFamily::kRaiseFalse);
  cfg.epsilon = epsilon;
  cfg.step = step;
  cfg.iterations = iterations;
  cfg.target_class = target_class;
  cfg.range = range;
  cfg.validate();
  check_batch(model, x, &y);
  if (target_class >= model.num_classes()) throw ContractError("target class out of range");
  for (std::size_t l : y) {
    if (l == target_class) {
      throw ContractError("raise-false target class equals a sample's label");
    }
  }
  std::vector<bool> zero;
  Tensor adv = signed_gradient_ascent(model, x, x, y, Objective::kClassLogitUp, target_class,
                                      epsilon, step, iterations, range, &zero);
  return finish(model, x, std::move(adv), y, cfg, std::move(zero));
}

AdversarialBatch run_attack(const Classifier& model, const Tensor& x, const Labels& y,
                            const AttackConfig& config) {
  config.validate();
  AdversarialBatch out;
  switch (config.family) {
    case AttackFamily::kFgsm:
      out = fgsm(model, x, y, *config.epsilon, config.range);
      break;
    case AttackFamily::kBim:
      out = bim(model, x, y, *config.epsilon, config.step, config.iterations, config.range);
      break;
    case AttackFamily::kPgd:
      out = pgd(model, x, y, *config.epsilon, config.step, config.iterations,
                config.random_start, config.restarts, config.seed, config.range);
      break;
    case AttackFamily::kDeepFool:
      out = deepfool(model, x, config.iterations, *config.overshoot, config.epsilon, &y,
                     config.range);
      break;
    case AttackFamily::kSuppressTrue:
      out = suppress_true_logit(model, x, y, *config.epsilon, config.step, config.iterations,
                                config.range);
      break;
    case AttackFamily::kRaiseFalse:
      out = raise_false_logit(model, x, y, *config.target_class, *config.epsilon, config.step,
                              config.iterations, config.range);
      break;
  }
  out.config = config;
  return out;
}

}  // namespace advdet
