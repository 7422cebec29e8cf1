#include "advdet/losses.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "advdet/errors.hpp"

namespace advdet {

namespace {

struct LogitsShape {
  std::size_t batch;
  std::size_t classes;
};

LogitsShape check_logits(const Shape& shape, const Labels& labels) {
  if (shape.size() != 2 || shape[0] == 0) {
    throw ShapeError("loss expects [batch, classes] logits with batch >= 1, got " +
                     shape_string(shape));
  }
  if (labels.size() != shape[0]) {
    throw ContractError("loss: " + std::to_string(labels.size()) + " labels for batch of " +
                        std::to_string(shape[0]));
  }
  for (std::size_t l : labels) {
    if (l >= shape[1]) {
      throw ContractError("label " + std::to_string(l) + " out of range for " +
                          std::to_string(shape[1]) + " classes");
    }
  }
  return {shape[0], shape[1]};
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

// KL(U || softmax(values)) for U uniform over the entries of a 1-D node.
NodeId uniform_kl(Graph& graph, NodeId values) {
  const double n = static_cast<double>(shape_size(graph.shape(values)));
  // -mean(log p + log n): exactly 0 when every entry is equal.
  return graph.neg(graph.mean(graph.shift(graph.log_softmax(values, 0), std::log(n))));
}

double evaluate(const Tensor& logits, const std::function<NodeId(Graph&, NodeId)>& build) {
  Graph graph;
  const NodeId in = graph.input("logits", logits.shape());
  const NodeId out = build(graph, in);
  return forward(graph, {{"logits", logits}}).value(out).item();
}

}  // namespace

FalseOutputSet false_output_set(const Tensor& logits, const Labels& labels) {
  const LogitsShape s = check_logits(logits.shape(), labels);
  FalseOutputSet set;
  set.values.reserve(s.batch * (s.classes - 1));
  set.sources.reserve(s.batch * (s.classes - 1));
  for (std::size_t i = 0; i < s.batch; ++i) {
    for (std::size_t c = 0; c < s.classes; ++c) {
      if (c == labels[i]) continue;
      set.values.push_back(logits[i * s.classes + c]);
      set.sources.emplace_back(i, c);
    }
  }
  return set;
}

Tensor ClassColumn::bias_vector(double bias) const {
  Tensor b({flat_indices.size()});
  for (std::size_t k = 0; k < true_mask.size(); ++k) {
    if (true_mask[k]) b[k] = bias;
  }
  return b;
}

std::vector<ClassColumn> class_columns(const Labels& labels, std::size_t num_classes,
                                       std::span<const std::size_t> rows,
                                       ColumnReading reading) {
  std::vector<std::size_t> owned;
  if (rows.empty()) {
    owned = all_rows(labels.size());
    rows = owned;
  }
  std::vector<ClassColumn> columns;
  for (std::size_t c = 0; c < num_classes; ++c) {
    ClassColumn col;
    col.class_index = c;
    for (std::size_t i : rows) {
      if (i >= labels.size()) throw ContractError("row index out of range");
      const bool is_true = labels[i] == c;
      if (reading == ColumnReading::kColumn) {
        col.flat_indices.push_back(i * num_classes + c);
        col.true_mask.push_back(is_true);
        (is_true ? col.n_true : col.n_false) += 1;
      } else if (is_true) {
        for (std::size_t k = 0; k < num_classes; ++k) {
          col.flat_indices.push_back(i * num_classes + k);
          col.true_mask.push_back(k == c);
          (k == c ? col.n_true : col.n_false) += 1;
        }
      }
    }
    if (col.n_true > 0) columns.push_back(std::move(col));
  }
  return columns;
}

double compute_bias(std::size_t n_true, std::size_t n_false, double n_ref) {
  if (n_true == 0 || n_false == 0 || !(n_ref >= 1.0)) {
    throw ContractError("compute_bias needs n_true, n_false, n_ref >= 1");
  }
  return std::log(static_cast<double>(n_false) / static_cast<double>(n_true)) -
         std::log(n_ref);
}

// ---------------------------------------------------------------------------
// Graph builders

NodeId false_output_loss(Graph& graph, NodeId logits, const Labels& labels) {
  const LogitsShape s = check_logits(graph.shape(logits), labels);
  if (s.classes < 2) throw ContractError("false-output loss needs at least 2 classes");
  std::vector<std::size_t> idx;
  idx.reserve(s.batch * (s.classes - 1));
  for (std::size_t i = 0; i < s.batch; ++i) {
    for (std::size_t c = 0; c < s.classes; ++c) {
      if (c != labels[i]) idx.push_back(i * s.classes + c);
    }
  }
  const NodeId false_logits = graph.gather(logits, std::move(idx));
  // Averaging over +Y_F and -Y_F penalises outliers on both sides.
  const NodeId upper = uniform_kl(graph, false_logits);
  const NodeId lower = uniform_kl(graph, graph.neg(false_logits));
  return graph.scale(graph.add(upper, lower), 0.5);
}

NodeId class_column_loss(Graph& graph, NodeId logits, const ClassColumn& column,
                         double n_ref, LossWarnings* warnings) {
  if (column.n_true == 0) throw ContractError("class column without true entries");
  NodeId values = graph.gather(logits, column.flat_indices);
  if (column.n_false > 0) {
    const double bias = compute_bias(column.n_true, column.n_false, n_ref);
    values = graph.add(values, graph.constant(column.bias_vector(bias)));
  } else if (warnings) {
    warnings->push_back("class " + std::to_string(column.class_index) +
                        ": every sample in the batch has this label; bias skipped");
  }
  std::vector<std::size_t> true_positions;
  for (std::size_t k = 0; k < column.true_mask.size(); ++k) {
    if (column.true_mask[k]) true_positions.push_back(k);
  }
  // KL(M || p) with M = 1/n_t on true slots: -mean_true(log p + log n_t).
  const NodeId log_probs = graph.log_softmax(values, 0);
  const NodeId true_log_probs = graph.gather(log_probs, std::move(true_positions));
  return graph.neg(graph.mean(
      graph.shift(true_log_probs, std::log(static_cast<double>(column.n_true)))));
}

std::optional<NodeId> true_output_loss(Graph& graph, NodeId logits, const Labels& labels,
                                       double n_ref, std::span<const std::size_t> rows,
                                       ColumnReading reading, LossWarnings* warnings) {
  const LogitsShape s = check_logits(graph.shape(logits), labels);
  if (!(n_ref >= 1.0)) throw ContractError("true-output loss needs n_ref >= 1");
  std::vector<std::size_t> owned;
  if (rows.empty()) {
    owned = all_rows(s.batch);
    rows = owned;
  }
  std::vector<NodeId> terms;
  for (const ClassColumn& col : class_columns(labels, s.classes, rows, reading)) {
    terms.push_back(class_column_loss(graph, logits, col, n_ref, warnings));
  }
  if (terms.empty()) return std::nullopt;
  // Divided by N_C, not by the number of classes present.
  return graph.scale(graph.sum(graph.concat(terms)), 1.0 / static_cast<double>(s.classes));
}

NodeId ce_loss(Graph& graph, NodeId logits, const Labels& labels,
               std::span<const std::size_t> rows) {
  const LogitsShape s = check_logits(graph.shape(logits), labels);
  std::vector<std::size_t> owned;
  if (rows.empty()) {
    owned = all_rows(s.batch);
    rows = owned;
  }
  std::vector<std::size_t> idx;
  idx.reserve(rows.size());
  for (std::size_t i : rows) idx.push_back(i * s.classes + labels.at(i));
  const NodeId log_probs = graph.log_softmax(logits, 1);
  return graph.neg(graph.mean(graph.gather(log_probs, std::move(idx))));
}

TrainingLossNodes combined_training_loss(Graph& graph, NodeId logits, const Labels& labels,
                                         const std::vector<bool>& adversarial,
                                         const TrainingLossSpec& spec,
                                         LossWarnings* warnings) {
  const LogitsShape s = check_logits(graph.shape(logits), labels);
  if (adversarial.size() != s.batch) {
    throw ContractError("adversarial mask length " + std::to_string(adversarial.size()) +
                        " does not match batch " + std::to_string(s.batch));
  }
  std::vector<std::size_t> clean;
  for (std::size_t i = 0; i < s.batch; ++i) {
    if (!adversarial[i]) clean.push_back(i);
  }

  TrainingLossNodes nodes{};
  nodes.false_term = false_output_loss(graph, logits, labels);
  if (!clean.empty()) {
    if (spec.true_kind == TrueLossKind::kCrossEntropy) {
      nodes.true_term = ce_loss(graph, logits, labels, clean);
    } else {
      const double n_ref =
          spec.n_ref > 0.0 ? spec.n_ref : static_cast<double>(s.classes - 1);
      nodes.true_term =
          true_output_loss(graph, logits, labels, n_ref, clean, spec.reading, warnings);
    }
  }
  const NodeId weighted_false = graph.scale(nodes.false_term, spec.weights.w_false);
  nodes.total = nodes.true_term
                    ? graph.add(graph.scale(*nodes.true_term, spec.weights.w_true),
                                weighted_false)
                    : weighted_false;
  return nodes;
}

// ---------------------------------------------------------------------------
// Tensor evaluators

double false_output_loss(const Tensor& logits, const Labels& labels) {
  return evaluate(logits, [&](Graph& g, NodeId in) { return false_output_loss(g, in, labels); });
}

double true_output_loss(const Tensor& logits, const Labels& labels, double n_ref,
                        LossWarnings* warnings) {
  Graph graph;
  const NodeId in = graph.input("logits", logits.shape());
  const auto out = true_output_loss(graph, in, labels, n_ref, {}, ColumnReading::kColumn,
                                    warnings);
  if (!out) return 0.0;
  return forward(graph, {{"logits", logits}}).value(*out).item();
}

double class_column_loss(const Tensor& logits, const ClassColumn& column, double n_ref,
                         LossWarnings* warnings) {
  return evaluate(logits, [&](Graph& g, NodeId in) {
    return class_column_loss(g, in, column, n_ref, warnings);
  });
}

double ce_loss(const Tensor& logits, const Labels& labels) {
  return evaluate(logits, [&](Graph& g, NodeId in) { return ce_loss(g, in, labels); });
}

double combined_training_loss(const Tensor& logits, const Labels& labels,
                              const std::vector<bool>& adversarial,
                              const TrainingLossSpec& spec) {
  return evaluate(logits, [&](Graph& g, NodeId in) {
    return combined_training_loss(g, in, labels, adversarial, spec).total;
  });
}

}  // namespace advdet
