#include "ofit/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ofit/common.hpp"

namespace ofit {

namespace fs = std::filesystem;

std::string format_double(double v) {
  // Shortest decimal form that parses back to the same bits.
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return buf;
}

namespace {

void sort_rows(std::vector<CurveRow>& rows) {
  std::sort(rows.begin(), rows.end(), [](const CurveRow& a, const CurveRow& b) {
    if (a.model_id != b.model_id) return a.model_id < b.model_id;
    if (a.method != b.method) return a.method < b.method;
    if (a.level != b.level) return a.level < b.level;
    return a.seed < b.seed;
  });
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  out.push_back(field);
  return out;
}

std::ofstream open_for_write(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write file: " + path);
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) {
    throw std::invalid_argument("median: empty input");
  }
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

void write_rows_csv(const std::string& path, std::vector<CurveRow> rows) {
  sort_rows(rows);
  std::ofstream out = open_for_write(path);
  out << "model_id,method,level,accuracy,seed\n";
  for (const CurveRow& r : rows) {
    out << r.model_id << ',' << r.method << ',' << format_double(r.level) << ','
        << format_double(r.accuracy) << ',' << r.seed << '\n';
  }
  if (!out) throw DataError("failed writing " + path);
}

std::vector<CurveRow> read_rows_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty csv: " + path);
  std::vector<CurveRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 5) throw DataError("malformed row in " + path + ": " + line);
    rows.push_back({f[0], f[1], std::strtod(f[2].c_str(), nullptr),
                    std::strtod(f[3].c_str(), nullptr),
                    std::strtoull(f[4].c_str(), nullptr, 10)});
  }
  return rows;
}

void write_baseline_csv(const std::string& path, std::vector<BaselineRow> rows) {
  std::sort(rows.begin(), rows.end(),
            [](const BaselineRow& a, const BaselineRow& b) {
              if (a.model_id != b.model_id) return a.model_id < b.model_id;
              return a.seed < b.seed;
            });
  std::ofstream out = open_for_write(path);
  out << "model_id,seed,acc_train,acc_val\n";
  for (const BaselineRow& r : rows) {
    out << r.model_id << ',' << r.seed << ',' << format_double(r.acc_train)
        << ',' << format_double(r.acc_val) << '\n';
  }
}

std::vector<BaselineRow> read_baseline_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty csv: " + path);
  std::vector<BaselineRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 4) throw DataError("malformed row in " + path + ": " + line);
    rows.push_back({f[0], std::strtoull(f[1].c_str(), nullptr, 10),
                    std::strtod(f[2].c_str(), nullptr),
                    std::strtod(f[3].c_str(), nullptr)});
  }
  return rows;
}

void write_failures_csv(const std::string& path,
                        const std::vector<CellFailure>& failures) {
  std::ofstream out = open_for_write(path);
  out << "model_id,method,level,seed,message\n";
  for (const CellFailure& f : failures) {
    std::string msg = f.message;
    for (char& c : msg) {
      if (c == ',' || c == '\n') c = ';';
    }
    out << f.model_id << ',' << f.method << ',' << format_double(f.level) << ','
        << f.seed << ',' << msg << '\n';
  }
}

// ---------------------------------------------------------------------------
// Report assembly

namespace {

struct SeedCurve {
  std::vector<std::pair<double, double>> points;  // (level, accuracy)
};

using CurveTable =
    std::map<std::string, std::map<std::string, std::map<uint64_t, SeedCurve>>>;

CurveTable group_rows(const std::vector<CurveRow>& rows) {
  CurveTable table;
  for (const CurveRow& r : rows) {
    table[r.model_id][r.method][r.seed].points.push_back({r.level, r.accuracy});
  }
  for (auto& [model, methods] : table) {
    for (auto& [method, seeds] : methods) {
      for (auto& [seed, curve] : seeds) {
        std::sort(curve.points.begin(), curve.points.end());
      }
    }
  }
  return table;
}

AccuracyCurve to_curve(const SeedCurve& sc, CurveKind kind) {
  std::vector<double> levels, accs;
  for (auto [l, a] : sc.points) {
    levels.push_back(l);
    accs.push_back(a);
  }
  return AccuracyCurve(std::move(levels), std::move(accs), kind);
}

CurveKind kind_for_method(const std::string& method) {
  if (method == "pmv") return CurveKind::pmv;
  if (method == "ptv") return CurveKind::ptv;
  if (method == "fgsm") return CurveKind::fgsm;
  if (method == "spatial") return CurveKind::spatial;
  if (method == "gaussian") return CurveKind::gaussian;
  return CurveKind::corruption;
}

/// Median accuracy per level across seeds; levels must agree across seeds.
SeedCurve median_curve(const std::map<uint64_t, SeedCurve>& seeds) {
  SeedCurve out;
  const SeedCurve& first = seeds.begin()->second;
  for (size_t i = 0; i < first.points.size(); ++i) {
    std::vector<double> accs;
    for (const auto& [seed, sc] : seeds) {
      if (i < sc.points.size()) accs.push_back(sc.points[i].second);
    }
    out.points.push_back({first.points[i].first, median(std::move(accs))});
  }
  return out;
}

}  // namespace

std::vector<OverfitReport> assemble_reports(
    const std::vector<CurveRow>& rows,
    const std::vector<BaselineRow>& baselines) {
  CurveTable table = group_rows(rows);

  std::map<std::string, std::vector<double>> gaps;
  for (const BaselineRow& b : baselines) {
    gaps[b.model_id].push_back(generalization_gap(b.acc_train, b.acc_val));
  }

  std::set<std::string> model_ids;
  for (const auto& [model, methods] : table) model_ids.insert(model);
  for (const auto& [model, g] : gaps) model_ids.insert(model);

  std::vector<OverfitReport> reports;
  for (const std::string& model : model_ids) {
    OverfitReport report;
    report.model_id = model;
    if (auto it = gaps.find(model); it != gaps.end()) {
      report.gap = median(it->second);
    }
    auto mt = table.find(model);
    if (mt != table.end()) {
      for (const auto& [method, seeds] : mt->second) {
        const CurveKind kind = kind_for_method(method);
        std::vector<double> slopes, maxdecs, sses, advrates;
        for (const auto& [seed, sc] : seeds) {
          if (sc.points.size() < 2) continue;
          AccuracyCurve curve = to_curve(sc, kind);
          if (method == "pmv") {
            slopes.push_back(slope_metric(curve));
          } else if (method == "ptv") {
            slopes.push_back(ptv_slope(curve));
          } else {
            maxdecs.push_back(max_decrease(curve));
            sses.push_back(sse_metric(curve));
            if (method == "fgsm") {
              advrates.push_back(1.0 - curve.accuracies.back());
            }
          }
        }
        if (method == "pmv" && !slopes.empty()) {
          report.pmv_slope = median(slopes);
        } else if (method == "ptv" && !slopes.empty()) {
          report.ptv_slope_value = median(slopes);
        } else if (!maxdecs.empty()) {
          report.method_metrics[method] = {median(maxdecs), median(sses)};
          if (!advrates.empty()) report.fgsm_error_rate = median(advrates);
        }
        report.curves.push_back({method, to_curve(median_curve(seeds), kind)});
      }
    }
    reports.push_back(std::move(report));
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Emission

namespace {

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                          "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                          "#bcbd22", "#17becf"};

/// Minimal SVG line plot: one polyline per model.
void write_svg_plot(const std::string& path, const std::string& title,
                    const std::map<std::string, SeedCurve>& per_model,
                    double y_max) {
  const double width = 640, height = 440;
  const double ml = 60, mr = 150, mt = 36, mb = 44;
  const double pw = width - ml - mr, ph = height - mt - mb;

  double x_min = 0.0, x_max = 1.0;
  bool first = true;
  for (const auto& [model, curve] : per_model) {
    for (auto [l, a] : curve.points) {
      if (first) {
        x_min = x_max = l;
        first = false;
      } else {
        x_min = std::min(x_min, l);
        x_max = std::max(x_max, l);
      }
    }
  }
  if (x_max == x_min) x_max = x_min + 1.0;

  auto sx = [&](double x) { return ml + (x - x_min) / (x_max - x_min) * pw; };
  auto sy = [&](double y) { return mt + (1.0 - y / y_max) * ph; };

  std::ofstream out = open_for_write(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << width
      << ' ' << height << "\">\n";
  out << "<text x=\"" << ml << "\" y=\"20\" font-size=\"14\">" << title
      << "</text>\n";
  // Axes.
  out << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw
      << "\" y2=\"" << mt + ph << "\" stroke=\"#333\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
      << "\" y2=\"" << mt + ph << "\" stroke=\"#333\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = y_max * t / 4.0;
    out << "<text x=\"" << ml - 8 << "\" y=\"" << sy(v) + 4
        << "\" font-size=\"10\" text-anchor=\"end\">" << format_double(v)
        << "</text>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << sy(v) << "\" x2=\"" << ml + pw
        << "\" y2=\"" << sy(v) << "\" stroke=\"#ddd\"/>\n";
  }
  size_t color = 0;
  for (const auto& [model, curve] : per_model) {
    std::ostringstream points;
    for (auto [l, a] : curve.points) {
      points << sx(l) << ',' << sy(std::min(a, y_max)) << ' ';
    }
    const char* stroke = kPalette[color % 10];
    out << "<polyline fill=\"none\" stroke=\"" << stroke
        << "\" stroke-width=\"1.5\" points=\"" << points.str() << "\"/>\n";
    const double ly = mt + 14 + 16 * static_cast<double>(color);
    out << "<line x1=\"" << ml + pw + 8 << "\" y1=\"" << ly - 4 << "\" x2=\""
        << ml + pw + 28 << "\" y2=\"" << ly - 4 << "\" stroke=\"" << stroke
        << "\" stroke-width=\"1.5\"/>\n";
    out << "<text x=\"" << ml + pw + 32 << "\" y=\"" << ly
        << "\" font-size=\"11\">" << model << "</text>\n";
    ++color;
  }
  // X tick labels at every distinct level of the first model.
  if (!per_model.empty()) {
    for (auto [l, a] : per_model.begin()->second.points) {
      out << "<text x=\"" << sx(l) << "\" y=\"" << mt + ph + 14
          << "\" font-size=\"10\" text-anchor=\"middle\">" << format_double(l)
          << "</text>\n";
    }
  }
  out << "</svg>\n";
}

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {
      "model_id",
      "gap",
      "pmv_slope",
      "ptv_slope",
      "spatial_max_decrease",
      "spatial_sse",
      "fgsm_max_decrease",
      "fgsm_sse",
      "gaussian_max_decrease",
      "gaussian_sse",
      "fgsm_adv_error_rate",
      "corruption_gaussian_noise_max_decrease",
      "corruption_gaussian_noise_sse",
      "corruption_defocus_blur_max_decrease",
      "corruption_defocus_blur_sse",
      "corruption_fog_max_decrease",
      "corruption_fog_sse",
      "corruption_contrast_max_decrease",
      "corruption_contrast_sse",
  };
  return cols;
}

std::string metric_cell(const OverfitReport& r, const std::string& column) {
  auto pair_cell = [&](const std::string& method, bool sse) -> std::string {
    auto it = r.method_metrics.find(method);
    if (it == r.method_metrics.end()) return "";
    return format_double(sse ? it->second.second : it->second.first);
  };
  if (column == "model_id") return r.model_id;
  if (column == "gap") return format_double(r.gap);
  if (column == "pmv_slope") {
    return r.pmv_slope ? format_double(*r.pmv_slope) : "";
  }
  if (column == "ptv_slope") {
    return r.ptv_slope_value ? format_double(*r.ptv_slope_value) : "";
  }
  if (column == "fgsm_adv_error_rate") {
    return r.fgsm_error_rate ? format_double(*r.fgsm_error_rate) : "";
  }
  const bool sse = column.ends_with("_sse");
  std::string method = column.substr(
      0, column.size() - (sse ? 4 : std::string("_max_decrease").size()));
  return pair_cell(method, sse);
}

}  // namespace

std::string render_metrics_table(const std::vector<OverfitReport>& reports) {
  std::ostringstream out;
  out << "model    gap%     k_S      k_PTV    spat_kmax spat_sse  fgsm_kmax "
         "fgsm_sse  gaus_kmax gaus_sse\n";
  for (const OverfitReport& r : reports) {
    char line[256];
    auto pair_or = [&](const char* m, bool sse) {
      auto it = r.method_metrics.find(m);
      if (it == r.method_metrics.end()) return -1.0;
      return sse ? it->second.second : it->second.first;
    };
    std::snprintf(line, sizeof line,
                  "%-8s %7.2f  %7.4f  %7.4f  %8.4f  %8.4f  %8.4f  %8.4f  "
                  "%8.4f  %8.4f\n",
                  r.model_id.c_str(), 100.0 * r.gap,
                  r.pmv_slope.value_or(-1.0), r.ptv_slope_value.value_or(-1.0),
                  pair_or("spatial", false), pair_or("spatial", true),
                  pair_or("fgsm", false), pair_or("fgsm", true),
                  pair_or("gaussian", false), pair_or("gaussian", true));
    out << line;
  }
  out << "(gap in percent; -1 marks a metric that was not measured; "
         "corruption metrics are reported in metrics.csv but severities are "
         "calibrated, not equidistant, so they are not comparable across "
         "methods)\n";
  return out.str();
}

std::vector<OverfitReport> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty csv: " + path);
  const std::vector<std::string> header = split_fields(line);

  std::vector<OverfitReport> reports;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != header.size()) {
      throw DataError("malformed row in " + path + ": " + line);
    }
    OverfitReport r;
    std::map<std::string, double> pending_max, pending_sse;
    for (size_t i = 0; i < header.size(); ++i) {
      const std::string& col = header[i];
      const std::string& cell = f[i];
      if (col == "model_id") {
        r.model_id = cell;
        continue;
      }
      if (cell.empty()) continue;
      const double v = std::strtod(cell.c_str(), nullptr);
      if (col == "gap") {
        r.gap = v;
      } else if (col == "pmv_slope") {
        r.pmv_slope = v;
      } else if (col == "ptv_slope") {
        r.ptv_slope_value = v;
      } else if (col == "fgsm_adv_error_rate") {
        r.fgsm_error_rate = v;
      } else if (col.ends_with("_max_decrease")) {
        pending_max[col.substr(0, col.size() -
                                      std::string("_max_decrease").size())] = v;
      } else if (col.ends_with("_sse")) {
        pending_sse[col.substr(0, col.size() - 4)] = v;
      }
    }
    for (const auto& [method, v] : pending_max) {
      const auto s = pending_sse.find(method);
      r.method_metrics[method] = {v, s != pending_sse.end() ? s->second : 0.0};
    }
    reports.push_back(std::move(r));
  }
  return reports;
}

EmittedReport emit_report(const std::vector<OverfitReport>& reports,
                          const std::vector<CurveRow>& rows,
                          const std::string& out_dir,
                          const std::string& config_json) {
  fs::create_directories(out_dir);
  EmittedReport emitted;

  // (a) results.csv
  const std::string results_path = out_dir + "/results.csv";
  write_rows_csv(results_path, rows);
  emitted.files.push_back(results_path);

  // Normalized variant: accuracy divided by the level-0 accuracy of its
  // (model, method, seed) group.
  {
    CurveTable table = group_rows(rows);
    std::vector<CurveRow> normalized;
    for (auto& [model, methods] : table) {
      for (auto& [method, seeds] : methods) {
        for (auto& [seed, sc] : seeds) {
          if (sc.points.empty()) continue;
          const double base = sc.points.front().second;
          for (auto [l, a] : sc.points) {
            normalized.push_back({model, method, l, base > 0.0 ? a / base : 0.0,
                                  seed});
          }
        }
      }
    }
    const std::string path = out_dir + "/results_normalized.csv";
    write_rows_csv(path, std::move(normalized));
    emitted.files.push_back(path);
  }

  // (b) metrics.csv
  {
    const std::string path = out_dir + "/metrics.csv";
    std::ofstream out = open_for_write(path);
    const auto& cols = metrics_columns();
    for (size_t i = 0; i < cols.size(); ++i) {
      out << cols[i] << (i + 1 < cols.size() ? "," : "\n");
    }
    std::vector<OverfitReport> sorted = reports;
    std::sort(sorted.begin(), sorted.end(),
              [](const OverfitReport& a, const OverfitReport& b) {
                return a.model_id < b.model_id;
              });
    for (const OverfitReport& r : sorted) {
      for (size_t i = 0; i < cols.size(); ++i) {
        out << metric_cell(r, cols[i]) << (i + 1 < cols.size() ? "," : "\n");
      }
    }
    emitted.files.push_back(path);
  }

  // (c) one SVG per method, raw and normalized.
  {
    CurveTable table = group_rows(rows);
    std::set<std::string> methods;
    for (const auto& [model, per_method] : table) {
      for (const auto& [method, seeds] : per_method) methods.insert(method);
    }
    for (const std::string& method : methods) {
      std::map<std::string, SeedCurve> raw, norm;
      for (const auto& [model, per_method] : table) {
        auto it = per_method.find(method);
        if (it == per_method.end()) continue;
        SeedCurve med = median_curve(it->second);
        raw[model] = med;
        SeedCurve n;
        const double base =
            med.points.empty() ? 0.0 : med.points.front().second;
        for (auto [l, a] : med.points) {
          n.points.push_back({l, base > 0.0 ? a / base : 0.0});
        }
        norm[model] = std::move(n);
      }
      const std::string raw_path = out_dir + "/" + method + ".svg";
      write_svg_plot(raw_path, "accuracy vs level: " + method, raw, 1.0);
      emitted.files.push_back(raw_path);
      const std::string norm_path = out_dir + "/" + method + "_normalized.svg";
      write_svg_plot(norm_path, "normalized accuracy vs level: " + method, norm,
                     1.2);
      emitted.files.push_back(norm_path);
    }
  }

  // (d) run manifest.
  {
    nlohmann::json manifest;
    manifest["code_version"] = kVersion;
    manifest["config"] = nlohmann::json::parse(config_json);
    manifest["files"] = emitted.files;
    manifest["notes"] = {
        "accuracies and levels are fractions; see metrics.csv for scalars",
        "corruption severities are calibrated steps, not equidistant "
        "strengths; their max-decrease/SSE values are recorded but not "
        "comparable with the other methods"};
    const std::string path = out_dir + "/manifest.json";
    std::ofstream out = open_for_write(path);
    out << manifest.dump(2) << '\n';
    emitted.files.push_back(path);
  }
  return emitted;
}

}  // namespace ofit
