#include "normkit/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace normkit {

ConfusionCounts confusion(std::span<const std::size_t> preds, std::span<const std::size_t> truth,
                          std::size_t positive, std::size_t classes) {
  if (preds.size() != truth.size()) {
    throw std::invalid_argument("confusion: " + std::to_string(preds.size()) +
                                " predictions for " + std::to_string(truth.size()) + " truths");
  }
  if (positive >= classes) {
    throw std::invalid_argument("confusion: positive class " + std::to_string(positive) +
                                " out of range [0," + std::to_string(classes) + ")");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= classes || truth[i] >= classes) {
      throw std::invalid_argument("confusion: unknown label " +
                                  std::to_string(std::max(preds[i], truth[i])) + " at sample " +
                                  std::to_string(i) + " (classes " + std::to_string(classes) +
                                  ")");
    }
    const bool pred_pos = preds[i] == positive;
    const bool true_pos = truth[i] == positive;
    if (pred_pos && true_pos) {
      ++c.tp;
    } else if (!pred_pos && !true_pos) {
      ++c.tn;
    } else if (pred_pos) {
      ++c.fp;
    } else {
      ++c.fn;
    }
  }
  return c;
}

std::optional<double> sensitivity(const ConfusionCounts& c) {
  const std::uint64_t den = c.tp + c.fn;
  if (den == 0) return std::nullopt;
  return static_cast<double>(c.tp) / static_cast<double>(den);
}

std::optional<double> specificity(const ConfusionCounts& c) {
  const std::uint64_t den = c.tn + c.fp;
  if (den == 0) return std::nullopt;
  return static_cast<double>(c.tn) / static_cast<double>(den);
}

std::optional<double> accuracy(const ConfusionCounts& c) {
  const std::uint64_t den = c.total();
  if (den == 0) return std::nullopt;
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(den);
}

std::optional<double> mcc(const ConfusionCounts& c, MccForm form) {
  const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  // Counts stay far below 2^53, so these products are exact in doubles.
  const double num = tp * tn - fp * fn;
  double den;
  if (form == MccForm::Standard) {
    den = std::sqrt(tp + fp) * std::sqrt(tp + fn) * std::sqrt(tn + fp) * std::sqrt(tn + fn);
  } else {
    den = std::sqrt(tp + fp) * std::sqrt(tp + fn) * std::sqrt(tn + fn);
  }
  if (den == 0.0) return std::nullopt;
  return num / den;
}

namespace {

void fold(std::optional<double>& sum_slot, std::size_t& defined, std::size_t& skipped,
          const std::optional<double>& value) {
  if (value.has_value()) {
    sum_slot = sum_slot.value_or(0.0) + *value;
    ++defined;
  } else {
    ++skipped;
  }
}

std::string cell(const std::optional<double>& v) {
  if (!v.has_value()) return "undef";
  std::ostringstream out;
  out << std::fixed << std::setprecision(4) << *v;
  return out.str();
}

}  // namespace

MetricReport macro_report(std::span<const std::size_t> preds, std::span<const std::size_t> truth,
                          std::size_t classes, MccForm form) {
  if (classes < 2) throw std::invalid_argument("macro_report: need at least 2 classes");
  MetricReport report;
  std::optional<double> sum_sen, sum_spe, sum_acc, sum_mcc;
  std::size_t n_sen = 0, n_spe = 0, n_acc = 0, n_mcc = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    ClassMetrics m;
    m.label = k;
    m.counts = confusion(preds, truth, k, classes);
    m.sen = sensitivity(m.counts);
    m.spe = specificity(m.counts);
    m.acc = accuracy(m.counts);
    m.mcc = mcc(m.counts, form);
    fold(sum_sen, n_sen, report.skipped_sen, m.sen);
    fold(sum_spe, n_spe, report.skipped_spe, m.spe);
    fold(sum_acc, n_acc, report.skipped_acc, m.acc);
    fold(sum_mcc, n_mcc, report.skipped_mcc, m.mcc);
    report.per_class.push_back(std::move(m));
  }
  if (n_sen > 0) report.macro_sen = *sum_sen / static_cast<double>(n_sen);
  if (n_spe > 0) report.macro_spe = *sum_spe / static_cast<double>(n_spe);
  if (n_acc > 0) report.macro_acc = *sum_acc / static_cast<double>(n_acc);
  if (n_mcc > 0) report.macro_mcc = *sum_mcc / static_cast<double>(n_mcc);
  return report;
}

std::string MetricReport::table() const {
  std::ostringstream out;
  out << std::left << std::setw(8) << "class" << std::right << std::setw(8) << "tp"
      << std::setw(8) << "tn" << std::setw(8) << "fp" << std::setw(8) << "fn" << std::setw(10)
      << "sen" << std::setw(10) << "spe" << std::setw(10) << "acc" << std::setw(10) << "mcc"
      << "\n";
  for (const ClassMetrics& m : per_class) {
    out << std::left << std::setw(8) << m.label << std::right << std::setw(8) << m.counts.tp
        << std::setw(8) << m.counts.tn << std::setw(8) << m.counts.fp << std::setw(8)
        << m.counts.fn << std::setw(10) << cell(m.sen) << std::setw(10) << cell(m.spe)
        << std::setw(10) << cell(m.acc) << std::setw(10) << cell(m.mcc) << "\n";
  }
  out << std::left << std::setw(8) << "macro" << std::right << std::setw(32) << ""
      << std::setw(10) << cell(macro_sen) << std::setw(10) << cell(macro_spe) << std::setw(10)
      << cell(macro_acc) << std::setw(10) << cell(macro_mcc) << "\n";
  const std::size_t skipped = skipped_sen + skipped_spe + skipped_acc + skipped_mcc;
  if (skipped > 0) {
    out << "skipped undefined: sen " << skipped_sen << ", spe " << skipped_spe << ", acc "
        << skipped_acc << ", mcc " << skipped_mcc << "\n";
  }
  return out.str();
}

}  // namespace normkit
