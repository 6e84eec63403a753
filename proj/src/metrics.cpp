#include "ofit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ofit/nn.hpp"

namespace ofit {

std::string curve_kind_name(CurveKind kind) {
  switch (kind) {
    case CurveKind::pmv: return "pmv";
    case CurveKind::ptv: return "ptv";
    case CurveKind::fgsm: return "fgsm";
    case CurveKind::spatial: return "spatial";
    case CurveKind::gaussian: return "gaussian";
    case CurveKind::corruption: return "corruption";
  }
  return "unknown";
}

AccuracyCurve::AccuracyCurve(std::vector<double> lv, std::vector<double> acc,
                             CurveKind k)
    : levels(std::move(lv)), accuracies(std::move(acc)), kind(k) {
  if (levels.size() != accuracies.size()) {
    throw std::invalid_argument("AccuracyCurve: " + std::to_string(levels.size()) +
                                " levels vs " + std::to_string(accuracies.size()) +
                                " accuracies");
  }
  if (levels.size() < 2) {
    throw std::invalid_argument("AccuracyCurve: need at least two points");
  }
  for (size_t i = 1; i < levels.size(); ++i) {
    if (!(levels[i] > levels[i - 1])) {
      throw std::invalid_argument("AccuracyCurve: levels must be strictly increasing");
    }
  }
  for (double a : accuracies) {
    if (!(a >= 0.0 && a <= 1.0) || !std::isfinite(a)) {
      throw std::invalid_argument("AccuracyCurve: accuracy " + std::to_string(a) +
                                  " outside [0,1]");
    }
  }
}

double slope_metric(const AccuracyCurve& curve) {
  const size_t n = curve.points();
  double mean_r = 0.0, mean_a = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mean_r += curve.levels[i];
    mean_a += curve.accuracies[i];
  }
  mean_r /= static_cast<double>(n);
  mean_a /= static_cast<double>(n);
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double dr = curve.levels[i] - mean_r;
    num += dr * (curve.accuracies[i] - mean_a);
    den += dr * dr;
  }
  if (den == 0.0) {
    throw std::invalid_argument("slope_metric: all perturbation levels equal");
  }
  return std::fabs(num / den);
}

double ptv_slope(const AccuracyCurve& curve) { return slope_metric(curve); }

double max_decrease(const AccuracyCurve& curve) {
  double best = 0.0;
  for (size_t r = 1; r < curve.points(); ++r) {
    best = std::max(best, std::fabs(curve.accuracies[r] - curve.accuracies[r - 1]));
  }
  return best;
}

double sse_metric(const AccuracyCurve& curve) {
  const size_t n = curve.points();
  if (n < 2) throw std::invalid_argument("sse_metric: need at least two points");
  // One-parameter least squares through the anchored intercept acc[0]:
  // k = sum r*(acc_r - acc_0) / sum r^2 over r = 1..p.
  const double a0 = curve.accuracies[0];
  double num = 0.0, den = 0.0;
  for (size_t r = 1; r < n; ++r) {
    const double rr = static_cast<double>(r);
    num += rr * (curve.accuracies[r] - a0);
    den += rr * rr;
  }
  const double k = num / den;
  double sse = 0.0;
  for (size_t r = 1; r < n; ++r) {
    const double resid = curve.accuracies[r] - (a0 + k * static_cast<double>(r));
    sse += resid * resid;
  }
  return sse;
}

double generalization_gap(double acc_train, double acc_val) {
  return acc_train - acc_val;
}

double adversarial_error_rate(Model& model, const Dataset& perturbed_set) {
  if (perturbed_set.size() < 1) {
    throw std::invalid_argument("adversarial_error_rate: empty set");
  }
  const std::vector<int> preds = predict(model, perturbed_set.images);
  int64_t mismatches = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] != perturbed_set.labels[i]) ++mismatches;
  }
  return static_cast<double>(mismatches) /
         static_cast<double>(perturbed_set.size());
}

namespace {

double metric_for(const OverfitReport& report, RankMetric metric,
                  const std::string& method) {
  switch (metric) {
    case RankMetric::pmv_slope:
      if (!report.pmv_slope) {
        throw std::invalid_argument("rank_models: model " + report.model_id +
                                    " has no pmv slope");
      }
      return *report.pmv_slope;
    case RankMetric::ptv_slope:
      if (!report.ptv_slope_value) {
        throw std::invalid_argument("rank_models: model " + report.model_id +
                                    " has no ptv slope");
      }
      return *report.ptv_slope_value;
    case RankMetric::max_decrease:
    case RankMetric::sse: {
      auto it = report.method_metrics.find(method);
      if (it == report.method_metrics.end()) {
        throw std::invalid_argument("rank_models: model " + report.model_id +
                                    " has no metrics for method '" + method + "'");
      }
      return metric == RankMetric::max_decrease ? it->second.first
                                                : it->second.second;
    }
  }
  throw std::invalid_argument("rank_models: unknown metric");
}

}  // namespace

std::vector<std::string> rank_models(const std::vector<OverfitReport>& reports,
                                     RankMetric metric, const std::string& method) {
  if (reports.size() < 2) {
    throw std::invalid_argument("rank_models: need at least two reports");
  }
  std::vector<std::pair<double, std::string>> keyed;
  for (const OverfitReport& r : reports) {
    keyed.push_back({metric_for(r, metric, method), r.model_id});
  }
  const bool descending = metric == RankMetric::pmv_slope;
  std::sort(keyed.begin(), keyed.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return descending ? a.first > b.first : a.first < b.first;
    return a.second < b.second;
  });
  std::vector<std::string> out;
  out.reserve(keyed.size());
  for (auto& [v, id] : keyed) out.push_back(id);
  return out;
}

}  // namespace ofit
