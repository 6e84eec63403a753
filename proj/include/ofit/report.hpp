#pragma once

#include <string>
#include <vector>

#include "ofit/harness.hpp"
#include "ofit/metrics.hpp"

namespace ofit {

// CSV round-trip for curve rows (results.csv schema:
// model_id,method,level,accuracy,seed). Rows are sorted before writing and
// doubles are printed with enough digits to re-read exactly.
void write_rows_csv(const std::string& path, std::vector<CurveRow> rows);
std::vector<CurveRow> read_rows_csv(const std::string& path);

void write_baseline_csv(const std::string& path, std::vector<BaselineRow> rows);
std::vector<BaselineRow> read_baseline_csv(const std::string& path);

void write_failures_csv(const std::string& path,
                        const std::vector<CellFailure>& failures);

/// Groups rows into per-(model, seed) curves, computes every scalar, and
/// reduces across seeds by median into one report per model.
std::vector<OverfitReport> assemble_reports(
    const std::vector<CurveRow>& rows, const std::vector<BaselineRow>& baselines);

struct EmittedReport {
  std::vector<std::string> files;
};

/// Writes results.csv, metrics.csv, one SVG per method (plus a normalized
/// variant), and the run manifest. Returns the file list.
EmittedReport emit_report(const std::vector<OverfitReport>& reports,
                          const std::vector<CurveRow>& rows,
                          const std::string& out_dir,
                          const std::string& config_json);

/// Human-readable metrics table; accuracies and gaps rendered as percent.
std::string render_metrics_table(const std::vector<OverfitReport>& reports);

/// Reads metrics.csv back into reports (scalar columns only).
std::vector<OverfitReport> read_metrics_csv(const std::string& path);

std::string format_double(double v);

}  // namespace ofit
