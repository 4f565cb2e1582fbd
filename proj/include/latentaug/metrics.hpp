#pragma once

// Per-class F1, grouped task metrics (Base/Novel, Middle/Out) with their
// harmonic mean, and normal-approximation confidence intervals.

#include "latentaug/common.hpp"

#include <cmath>
#include <map>
#include <set>

namespace latentaug {

struct TaskScore {
  std::map<ClassId, double> f1;
  std::map<ClassId, int> support;  // true count per class
  int task_index = 0;
};

/// One-vs-rest F1 per class. A class with precision + recall = 0 scores 0.
inline TaskScore f1_per_class(const Labels& pred, const Labels& truth, const std::vector<ClassId>& classes,
                              int task_index = 0) {
  if (pred.size() != truth.size()) throw Error("metrics", "prediction and truth lengths differ");
  std::map<ClassId, int> tp, fp, fn;
  const std::set<ClassId> cls(classes.begin(), classes.end());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!cls.count(truth[i])) throw Error("metrics", "truth label " + std::to_string(truth[i]) + " not in class set");
    if (pred[i] == truth[i]) {
      ++tp[truth[i]];
    } else {
      ++fn[truth[i]];
      ++fp[pred[i]];
    }
  }
  TaskScore s;
  s.task_index = task_index;
  for (ClassId c : cls) {
    const double t = tp[c], p = fp[c], n = fn[c];
    const double precision = t + p > 0 ? t / (t + p) : 0.0;
    const double recall = t + n > 0 ? t / (t + n) : 0.0;
    s.f1[c] = precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    s.support[c] = static_cast<int>(t + n);
  }
  return s;
}

/// 2 / (1/a + 1/b), defined as 0 when either argument is 0.
inline double harmonic_mean(double a, double b) {
  if (a <= 0.0 || b <= 0.0) return 0.0;
  return 2.0 / (1.0 / a + 1.0 / b);
}

struct GroupMetrics {
  double first = 0.0;   // Base or Middle
  double second = 0.0;  // Novel or Out
  double hmean = 0.0;
};

/// Means over two disjoint class groups and their harmonic mean.
inline GroupMetrics group_task_metrics(const TaskScore& score, const std::vector<ClassId>& first,
                                       const std::vector<ClassId>& second) {
  if (first.empty() || second.empty()) throw Error("metrics", "metric groups must be non-empty");
  auto mean_of = [&](const std::vector<ClassId>& ids) {
    double acc = 0.0;
    for (auto c : ids) {
      auto it = score.f1.find(c);
      if (it == score.f1.end()) throw Error("metrics", "class " + std::to_string(c) + " missing from task score");
      acc += it->second;
    }
    return acc / static_cast<double>(ids.size());
  };
  GroupMetrics g;
  g.first = mean_of(first);
  g.second = mean_of(second);
  g.hmean = harmonic_mean(g.first, g.second);
  return g;
}

/// Base = mean F1 over classes other than novel_class, Novel = F1(novel_class).
inline GroupMetrics gfsl_task_metrics(const TaskScore& score, ClassId novel_class) {
  if (!score.f1.count(novel_class)) throw Error("metrics", "novel class " + std::to_string(novel_class) + " missing from score");
  std::vector<ClassId> base;
  for (auto& [c, f] : score.f1)
    if (c != novel_class) base.push_back(c);
  return group_task_metrics(score, base, {novel_class});
}

/// Middle/Out grouping. The two id sets must partition the scored classes.
inline GroupMetrics mixture_task_metrics(const TaskScore& score, const std::vector<ClassId>& middle,
                                         const std::vector<ClassId>& out) {
  std::set<ClassId> all;
  for (auto c : middle) all.insert(c);
  for (auto c : out)
    if (!all.insert(c).second) throw Error("metrics", "class " + std::to_string(c) + " in both groups");
  std::set<ClassId> scored;
  for (auto& [c, f] : score.f1) scored.insert(c);
  if (all != scored) throw Error("metrics", "middle/out ids do not partition the task classes");
  return group_task_metrics(score, middle, out);
}

struct MeanCi {
  double mean = 0.0;
  double ci95 = 0.0;  // half-width
};

/// Arithmetic mean and 1.96 * s / sqrt(I) with the (I - 1) sample deviation.
inline MeanCi aggregate(const std::vector<double>& values) {
  if (values.size() < 2) throw Error("metrics", "aggregate needs at least 2 values");
  const double n = static_cast<double>(values.size());
  // Shift by the first value; a constant series then has exactly zero spread.
  const double shift = values.front();
  double sum = 0.0;
  for (double v : values) sum += v - shift;
  const double centered_mean = sum / n;
  double ss = 0.0;
  for (double v : values) ss += (v - shift - centered_mean) * (v - shift - centered_mean);
  return {shift + centered_mean, 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

}  // namespace latentaug
