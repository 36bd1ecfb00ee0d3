#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowhmm/hmm.hpp"
#include "flowhmm/rng.hpp"

namespace flowhmm {

// ---------------------------------------------------------------------------
// Maximum-likelihood classification over per-class models, majority-vote
// fusion across model families, and the evaluation metrics.
// ---------------------------------------------------------------------------

struct ClassifierBank {
  std::vector<AnyHmm> models;  // one per class
  std::vector<std::string> class_labels;
};

inline void validate_bank(const ClassifierBank& bank) {
  if (bank.models.empty()) throw std::invalid_argument("ClassifierBank: no models");
  if (bank.models.size() != bank.class_labels.size())
    throw std::invalid_argument("ClassifierBank: label count does not match model count");
  const std::size_t dim = any_dim(bank.models.front());
  for (const auto& m : bank.models)
    if (any_dim(m) != dim) throw std::invalid_argument("ClassifierBank: mixed feature dims");
  for (std::size_t i = 0; i < bank.class_labels.size(); ++i)
    for (std::size_t j = i + 1; j < bank.class_labels.size(); ++j)
      if (bank.class_labels[i] == bank.class_labels[j])
        throw std::invalid_argument("ClassifierBank: duplicate label " + bank.class_labels[i]);
}

struct Prediction {
  std::vector<double> log_likelihoods;  // one per class
  std::size_t label = 0;
  bool tie = false;
};

/// Scores the sequence under every class model and takes the argmax; exact
/// ties go to the lowest class index and are flagged.
inline Prediction classify(const ClassifierBank& bank, const Matrix& seq) {
  validate_bank(bank);
  Prediction pred;
  pred.log_likelihoods.reserve(bank.models.size());
  for (const auto& m : bank.models) pred.log_likelihoods.push_back(any_log_likelihood(m, seq));
  pred.label = 0;
  for (std::size_t c = 1; c < pred.log_likelihoods.size(); ++c) {
    if (pred.log_likelihoods[c] > pred.log_likelihoods[pred.label]) {
      pred.label = c;
      pred.tie = false;
    } else if (pred.log_likelihoods[c] == pred.log_likelihoods[pred.label]) {
      pred.tie = true;
    }
  }
  return pred;
}

/// Majority vote across model families: any label with at least two votes
/// wins; full disagreement picks uniformly among the distinct labels.
inline std::size_t vote(const std::vector<std::size_t>& labels, RngStream& rng) {
  if (labels.size() < 2) throw std::invalid_argument("vote: need at least two predictions");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < labels.size(); ++j)
      if (labels[j] == labels[i]) ++count;
    if (count >= 2) return labels[i];
  }
  return labels[rng.uniform_index(labels.size())];
}

/// Each class's training count divided by the largest class's count.
inline std::vector<double> sample_ratio(const std::vector<std::size_t>& class_counts) {
  if (class_counts.empty()) throw std::invalid_argument("sample_ratio: no classes");
  const std::size_t max_count = *std::max_element(class_counts.begin(), class_counts.end());
  if (max_count == 0) throw std::invalid_argument("sample_ratio: all classes empty");
  std::vector<double> out(class_counts.size());
  for (std::size_t c = 0; c < class_counts.size(); ++c)
    out[c] = static_cast<double>(class_counts[c]) / static_cast<double>(max_count);
  return out;
}

struct EvalReport {
  double accuracy = 0.0;
  std::vector<std::size_t> support;
  std::vector<double> precision, recall, f1;
  double weighted_precision = 0.0, weighted_recall = 0.0, weighted_f1 = 0.0;
  Matrix confusion;  // rows: truth, cols: predicted
};

/// Standard classification metrics; weighted averages use class support,
/// classes absent from the truth contribute zero weight.
inline EvalReport evaluate(const std::vector<std::size_t>& predicted,
                           const std::vector<std::size_t>& truth, std::size_t num_classes) {
  if (predicted.size() != truth.size())
    throw std::invalid_argument("evaluate: prediction/truth length mismatch");
  if (predicted.empty()) throw std::invalid_argument("evaluate: nothing to evaluate");
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (predicted[i] >= num_classes || truth[i] >= num_classes)
      throw std::invalid_argument("evaluate: label out of range at index " + std::to_string(i));

  EvalReport rep;
  rep.confusion = Matrix(num_classes, num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) rep.confusion(truth[i], predicted[i]) += 1.0;

  rep.support.resize(num_classes);
  rep.precision.assign(num_classes, 0.0);
  rep.recall.assign(num_classes, 0.0);
  rep.f1.assign(num_classes, 0.0);
  double correct = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    double tp = rep.confusion(c, c), row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < num_classes; ++j) {
      row += rep.confusion(c, j);
      col += rep.confusion(j, c);
    }
    rep.support[c] = static_cast<std::size_t>(row);
    correct += tp;
    rep.precision[c] = col > 0.0 ? tp / col : 0.0;
    rep.recall[c] = row > 0.0 ? tp / row : 0.0;
    rep.f1[c] = (rep.precision[c] + rep.recall[c]) > 0.0
                    ? 2.0 * rep.precision[c] * rep.recall[c] / (rep.precision[c] + rep.recall[c])
                    : 0.0;
  }
  const double total = static_cast<double>(truth.size());
  rep.accuracy = correct / total;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double w = static_cast<double>(rep.support[c]) / total;
    rep.weighted_precision += w * rep.precision[c];
    rep.weighted_recall += w * rep.recall[c];
    rep.weighted_f1 += w * rep.f1[c];
  }
  return rep;
}

}  // namespace flowhmm
