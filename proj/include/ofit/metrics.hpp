#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ofit {

enum class CurveKind { pmv, ptv, fgsm, spatial, gaussian, corruption };

std::string curve_kind_name(CurveKind kind);

/// Ordered (perturbation level, empirical accuracy) pairs. Levels are
/// strictly increasing and the first one is the unperturbed point.
struct AccuracyCurve {
  std::vector<double> levels;
  std::vector<double> accuracies;
  CurveKind kind = CurveKind::pmv;

  AccuracyCurve() = default;
  AccuracyCurve(std::vector<double> levels, std::vector<double> accuracies,
                CurveKind kind);

  size_t points() const { return levels.size(); }
};

/// Magnitude of the ordinary-least-squares slope of accuracy against level,
/// fitted over all points including the unperturbed one.
double slope_metric(const AccuracyCurve& curve);

/// Same fit applied to a clean-training-set curve; large values indicate
/// overfitting rather than a good fit.
double ptv_slope(const AccuracyCurve& curve);

/// Largest accuracy drop between consecutive curve points.
double max_decrease(const AccuracyCurve& curve);

/// Residual sum of squares against the best line through the unperturbed
/// accuracy, with consecutive points one index unit apart. The unperturbed
/// residual is identically zero and excluded from the sum.
double sse_metric(const AccuracyCurve& curve);

/// Signed difference between training and validation accuracy.
double generalization_gap(double acc_train, double acc_val);

class Model;
struct Dataset;

/// Importance-weighted adversarial error rate with unit weights: the
/// fraction of perturbed samples whose prediction disagrees with the
/// original label.
double adversarial_error_rate(Model& model, const Dataset& perturbed_set);

/// Per-model scalar metrics plus the raw curves behind them.
struct OverfitReport {
  std::string model_id;
  uint64_t seed = 0;
  double gap = 0.0;
  std::optional<double> pmv_slope;
  std::optional<double> ptv_slope_value;
  std::optional<double> fgsm_error_rate;  // at the strongest scheduled eps
  /// Method name -> (max decrease, SSE). Corruption methods are recorded
  /// but not comparable across severities (spacings are calibrated, not
  /// metric).
  std::map<std::string, std::pair<double, double>> method_metrics;
  std::vector<std::pair<std::string, AccuracyCurve>> curves;
};

enum class RankMetric { pmv_slope, ptv_slope, max_decrease, sse };

/// Orders model ids best-fit first: pmv slope descending, everything else
/// ascending; ties broken by model id. `method` selects the curve family
/// for max-decrease/SSE.
std::vector<std::string> rank_models(const std::vector<OverfitReport>& reports,
                                     RankMetric metric,
                                     const std::string& method = "spatial");

}  // namespace ofit
