#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "advdet/graph.hpp"
#include "advdet/model.hpp"
#include "advdet/tensor.hpp"

namespace advdet {

// Every logit y[i][c] with c != label(i), in row-major order.
struct FalseOutputSet {
  std::vector<double> values;
  std::vector<std::pair<std::size_t, std::size_t>> sources;  // (sample, class)
};

FalseOutputSet false_output_set(const Tensor& logits, const Labels& labels);

// How the per-class set Y_c of the true-output loss is assembled.
//  kColumn:    the c-th logit of every sample in the batch.
//  kRowConcat: the full logit rows of the samples labelled c.
enum class ColumnReading { kColumn, kRowConcat };

struct ClassColumn {
  std::size_t class_index = 0;
  std::vector<std::size_t> flat_indices;  // into the flattened [B, N_C] logits
  std::vector<bool> true_mask;            // parallel to flat_indices
  std::size_t n_true = 0;
  std::size_t n_false = 0;

  // B_c: `bias` on true positions, 0 elsewhere.
  Tensor bias_vector(double bias) const;
};

// Columns for every class with at least one true entry among `rows`
// (all rows when empty), in class order.
std::vector<ClassColumn> class_columns(const Labels& labels, std::size_t num_classes,
                                       std::span<const std::size_t> rows,
                                       ColumnReading reading = ColumnReading::kColumn);

// log(n_false / n_true) - log(n_ref). Makes the true-slot softmax with
// n_false false entries match the one with n_ref false entries per true
// entry.
double compute_bias(std::size_t n_true, std::size_t n_false, double n_ref);

struct LossWeights {
  double w_true = 1.0;
  double w_false = 1.0;
};

enum class TrueLossKind { kMultiHot, kCrossEntropy };

struct TrainingLossSpec {
  LossWeights weights;
  TrueLossKind true_kind = TrueLossKind::kMultiHot;
  double n_ref = 0.0;  // <= 0 means N_C - 1
  ColumnReading reading = ColumnReading::kColumn;
};

// Non-fatal notes raised while assembling a loss (e.g. a single-class batch).
using LossWarnings = std::vector<std::string>;

// ----- graph builders -----------------------------------------------------
// `logits` must be a [B, N_C] node. Builders validate labels eagerly.

// 1/2 [KL(U || softmax(Y_F)) + KL(U || softmax(-Y_F))] over the flattened set
// of false logits of the whole batch.
NodeId false_output_loss(Graph& graph, NodeId logits, const Labels& labels);

// Multi-hot KL per class column with bias correction, summed and divided by
// N_C. Only `rows` take part (all rows when empty). Returns nullopt when no
// row takes part.
std::optional<NodeId> true_output_loss(Graph& graph, NodeId logits, const Labels& labels,
                                       double n_ref, std::span<const std::size_t> rows = {},
                                       ColumnReading reading = ColumnReading::kColumn,
                                       LossWarnings* warnings = nullptr);

// KL(M_c || softmax(Y_c + B_c)) for one column.
NodeId class_column_loss(Graph& graph, NodeId logits, const ClassColumn& column,
                         double n_ref, LossWarnings* warnings = nullptr);

// Mean cross-entropy over `rows` (all rows when empty).
NodeId ce_loss(Graph& graph, NodeId logits, const Labels& labels,
               std::span<const std::size_t> rows = {});

struct TrainingLossNodes {
  NodeId total;
  std::optional<NodeId> true_term;  // absent when every sample is adversarial
  NodeId false_term;
};

// w_true * true term over clean rows + w_false * false-output loss over all
// rows. Adversarial rows reach only the false term.
TrainingLossNodes combined_training_loss(Graph& graph, NodeId logits, const Labels& labels,
                                         const std::vector<bool>& adversarial,
                                         const TrainingLossSpec& spec,
                                         LossWarnings* warnings = nullptr);

// ----- tensor evaluators ---------------------------------------------------

double false_output_loss(const Tensor& logits, const Labels& labels);
double true_output_loss(const Tensor& logits, const Labels& labels, double n_ref,
                        LossWarnings* warnings = nullptr);
double class_column_loss(const Tensor& logits, const ClassColumn& column, double n_ref,
                         LossWarnings* warnings = nullptr);
double ce_loss(const Tensor& logits, const Labels& labels);
double combined_training_loss(const Tensor& logits, const Labels& labels,
                              const std::vector<bool>& adversarial,
                              const TrainingLossSpec& spec);

// Scalar value and gradient with respect to the logits of a loss assembled
// by `build` on a [B, N_C] logits input.
struct ValueAndGrad {
  double value = 0.0;
  Tensor grad;
};

template <typename Build>
ValueAndGrad loss_value_and_grad(const Tensor& logits, Build&& build) {
  Graph graph;
  const NodeId in = graph.input("logits", logits.shape());
  const NodeId out = build(graph, in);
  const Execution run = forward(graph, {{"logits", logits}});
  TensorMap grads = backward(graph, run, out);
  return {run.value(out).item(), std::move(grads.at("logits"))};
}

}  // namespace advdet
