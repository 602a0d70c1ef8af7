#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace normkit {

// One-vs-rest tallies: tp/tn/fp/fn sum to the number of scored samples.
struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

// Tally with `positive` as the positive class; every label must lie in
// [0, classes).
ConfusionCounts confusion(std::span<const std::size_t> preds, std::span<const std::size_t> truth,
                          std::size_t positive, std::size_t classes);

// All four return an empty optional when their denominator is zero;
// undefined is a value here, never silently 0 or 1.
std::optional<double> sensitivity(const ConfusionCounts& c);  // tp / (tp + fn)
std::optional<double> specificity(const ConfusionCounts& c);  // tn / (tn + fp)
std::optional<double> accuracy(const ConfusionCounts& c);     // (tp + tn) / total

// The standard Matthews correlation uses all four marginals under the
// root. The paper form drops the (tn + fp) factor, which breaks the
// [-1, 1] bound; it is kept for fidelity experiments only.
enum class MccForm { Standard, Paper };

std::optional<double> mcc(const ConfusionCounts& c, MccForm form = MccForm::Standard);

struct ClassMetrics {
  std::size_t label = 0;
  ConfusionCounts counts;
  std::optional<double> sen, spe, acc, mcc;
};

struct MetricReport {
  std::vector<ClassMetrics> per_class;
  std::optional<double> macro_sen, macro_spe, macro_acc, macro_mcc;
  std::size_t skipped_sen = 0, skipped_spe = 0, skipped_acc = 0, skipped_mcc = 0;

  std::string table() const;  // aligned plain-text summary
};

// Per-class one-vs-rest metrics plus macro averages; undefined per-class
// entries are skipped from the averages and counted.
MetricReport macro_report(std::span<const std::size_t> preds, std::span<const std::size_t> truth,
                          std::size_t classes, MccForm form = MccForm::Standard);

}  // namespace normkit
