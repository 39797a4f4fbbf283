#pragma once
// SPDX-License-Identifier: Apache-2.0

/**
 * Correlation analysis over run metrics: staleness, within-group importance
 * weight variance, exact learner/sampler KL, and the advantage-expectation
 * estimation error. All pairwise Pearson coefficients are reported with
 * Fisher-z confidence intervals; constant series are flagged degenerate
 * rather than given a fabricated coefficient.
 */

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "asyncrl/csv.hpp"
#include "asyncrl/errors.hpp"
#include "asyncrl/stats.hpp"
#include "asyncrl/variance.hpp"

namespace asyncrl::analysis {

/// Plot-ready CSV rows for the variance sweeps.
inline io::CsvTable sweep_table(const std::vector<variance::SweepRow>& rows) {
  io::CsvTable table({"a", "b", "kl", "var_std", "var_new", "delta", "region_flag"});
  for (const auto& row : rows) {
    table.add_row({row.a, row.b, row.kl, row.var_std, row.var_new, row.delta,
                   row.region_flag ? 1.0 : 0.0});
  }
  return table;
}

inline const std::vector<std::string>& correlation_variables() {
  static const std::vector<std::string> vars = {"staleness", "weight_variance", "kl_exact",
                                                "adv_expectation_error"};
  return vars;
}

enum class Granularity { PerStep, PerRun };

struct VariableSeries {
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;  // one series per name
  std::size_t run_count = 0;
};

/// Collects the correlation variables from every metrics.csv under run_dir
/// (sorted path order). PerStep keeps one point per learner step; PerRun
/// collapses each file to its column means.
inline VariableSeries collect_series(const std::string& run_dir,
                                     Granularity granularity = Granularity::PerStep) {
  std::vector<std::filesystem::path> files;
  if (!std::filesystem::exists(run_dir)) throw ResourceError("no such run dir: " + run_dir);
  for (const auto& entry : std::filesystem::recursive_directory_iterator(run_dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "metrics.csv") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ResourceError("no metrics.csv under " + run_dir);

  VariableSeries out;
  out.names = correlation_variables();
  out.values.resize(out.names.size());
  out.run_count = files.size();
  for (const auto& file : files) {
    const auto table = io::CsvTable::load(file.string());
    for (std::size_t v = 0; v < out.names.size(); ++v) {
      const auto column = table.column(out.names[v]);  // SchemaError if missing
      if (column.empty()) continue;
      if (granularity == Granularity::PerStep) {
        out.values[v].insert(out.values[v].end(), column.begin(), column.end());
      } else {
        out.values[v].push_back(stats::mean(column));
      }
    }
  }
  return out;
}

/// All pairwise correlations among the collected variables.
inline std::vector<stats::CorrelationReport> correlation_table(const VariableSeries& series,
                                                               double alpha = 0.05) {
  std::vector<stats::CorrelationReport> reports;
  for (std::size_t i = 0; i < series.names.size(); ++i) {
    for (std::size_t j = i + 1; j < series.names.size(); ++j) {
      reports.push_back(stats::pearson_ci_report(series.values[i], series.values[j], alpha,
                                                 series.names[i], series.names[j]));
    }
  }
  return reports;
}

inline std::string correlation_csv(const std::vector<stats::CorrelationReport>& reports) {
  std::string out = "x,y,pearson_r,ci_low,ci_high,n,degenerate\n";
  for (const auto& r : reports) {
    out += r.x_name + "," + r.y_name + ",";
    if (r.degenerate) {
      out += ",,," + std::to_string(r.n) + ",1\n";
    } else {
      out += io::format_double(r.pearson_r) + "," + io::format_double(r.ci_low) + "," +
             io::format_double(r.ci_high) + "," + std::to_string(r.n) + ",0\n";
    }
  }
  return out;
}

inline void save_correlations(const std::vector<stats::CorrelationReport>& reports,
                              const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ResourceError("cannot open " + path + " for writing");
  f << correlation_csv(reports);
}

}  // namespace asyncrl::analysis
