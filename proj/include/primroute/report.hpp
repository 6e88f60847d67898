#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "primroute/elicitation.hpp"
#include "primroute/evaluation.hpp"

namespace primroute {

/// Long-format CSV: one row per (result, family). Header:
/// label,condition,seed,config_hash,family,accuracy,mean_tokens,strength
/// where strength is ';'-joined per-primitive means (empty when unsteered).
/// Numbers use round-trip precision.
std::string results_to_csv(const std::vector<EvalResult>& results);
/// Inverse of results_to_csv. Throws FormatError on malformed input.
std::vector<EvalResult> results_from_csv(std::string_view text);

/// Per-label means over seeds with the delta against the "base" label and the
/// base/label token ratio: label,seeds,<family...>,mean,delta_vs_base,mean_tokens,token_ratio.
std::string summary_csv(const std::vector<EvalResult>& results);

std::string sweep_to_csv(const std::vector<SweepRow>& rows);
std::string matrix_to_csv(const std::vector<std::vector<double>>& m, const std::vector<std::string>& row_labels,
                          const std::vector<std::string>& col_labels);

struct Series {
  std::string name;
  std::vector<double> x, y;
};

/// Self-contained SVG documents.
std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series);
std::string svg_scatter(const std::string& title, const std::vector<std::array<double, 2>>& points,
                        const std::vector<int>& groups);
std::string svg_heatmap(const std::string& title, const std::vector<std::vector<double>>& m,
                        const std::vector<std::string>& row_labels, const std::vector<std::string>& col_labels);

struct ReportBundle {
  /// JSON manifest text (config, seeds, fingerprints); always written.
  std::string manifest;
  std::vector<EvalResult> results;
  std::vector<EvalResult> ablation;
  std::vector<SweepRow> sweep;
  std::vector<std::array<double, 2>> pca_projection;
  std::vector<int> pca_groups;
  std::vector<std::vector<double>> cosine;
  std::vector<std::vector<double>> routing;
};

/// Writes manifest.json plus whichever tables and plots the bundle has data
/// for. Returns the written file names in order. Throws std::runtime_error
/// naming the path on I/O failure.
std::vector<std::string> emit_reports(const ReportBundle& bundle, const std::filesystem::path& outdir);

}  // namespace primroute
