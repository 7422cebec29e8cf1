#pragma once

// Straight-from-the-definition reference implementations. Nothing here calls
// into the library's numerics, so agreement with it is meaningful.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

namespace oracle {

inline std::vector<double> softmax(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  std::vector<double> e(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) z += e[i] = std::exp(v[i] - m);
  for (double& x : e) x /= z;
  return e;
}

// KL(p || q) with 0 log 0 = 0.
inline double kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

inline double uniform_kl(const std::vector<double>& v) {
  return kl(std::vector<double>(v.size(), 1.0 / static_cast<double>(v.size())), softmax(v));
}

// logits: row-major [b, k].
inline double false_loss(const std::vector<double>& logits, std::size_t k,
                         const std::vector<std::size_t>& labels) {
  std::vector<double> f, nf;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      if (c == labels[i]) continue;
      f.push_back(logits[i * k + c]);
      nf.push_back(-logits[i * k + c]);
    }
  }
  return 0.5 * (uniform_kl(f) + uniform_kl(nf));
}

// Column reading: column c of every sample, bias on true slots, KL from the
// multi-hot target; summed over present classes and divided by k.
inline double true_loss(const std::vector<double>& logits, std::size_t k,
                        const std::vector<std::size_t>& labels, double n_ref) {
  const std::size_t b = labels.size();
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t nt = 0;
    for (std::size_t l : labels) nt += l == c;
    if (nt == 0) continue;
    const std::size_t nf = b - nt;
    const double bias = nf ? std::log(double(nf) / double(nt)) - std::log(n_ref) : 0.0;
    std::vector<double> col(b), target(b);
    for (std::size_t i = 0; i < b; ++i) {
      const bool t = labels[i] == c || nf == 0;
      col[i] = logits[i * k + c] + (labels[i] == c && nf ? bias : 0.0);
      target[i] = t ? 1.0 / double(nf ? nt : b) : 0.0;
    }
    total += kl(target, softmax(col));
  }
  return total / static_cast<double>(k);
}

inline double ce(const std::vector<double>& logits, std::size_t k,
                 const std::vector<std::size_t>& labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::vector<double> row(logits.begin() + i * k, logits.begin() + (i + 1) * k);
    s -= std::log(softmax(row)[labels[i]]);
  }
  return s / static_cast<double>(labels.size());
}

inline double auroc_pairwise(const std::vector<double>& clean, const std::vector<double>& adv) {
  double wins = 0.0;
  for (double c : clean) {
    for (double a : adv) wins += c > a ? 1.0 : c == a ? 0.5 : 0.0;
  }
  return wins / (static_cast<double>(clean.size()) * static_cast<double>(adv.size()));
}

inline double percentile_sorted(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  std::size_t rank = 1;
  while (static_cast<double>(rank) * 100.0 < p * static_cast<double>(v.size())) ++rank;
  return v[rank - 1];
}

}  // namespace oracle
