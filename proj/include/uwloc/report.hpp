#pragma once

// Report files: metrics.json, predictions.csv and plot.csv.

#include "uwloc/learn.hpp"

#include <filesystem>
#include <string>

namespace uwloc {

std::string metrics_to_json(const MetricsReport& report);
MetricsReport metrics_from_json(const std::string& text);
MetricsReport read_metrics_json(const std::filesystem::path& path);

/// Writes metrics.json, predictions.csv and plot.csv (every 10th test
/// segment in report order, starting with the first) into `dir`, creating it
/// if needed.
void emit_report(const MetricsReport& report, const std::filesystem::path& dir);

}  // namespace uwloc
