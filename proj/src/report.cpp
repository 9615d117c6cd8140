#include "uwloc/report.hpp"

#include "uwloc/error.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace uwloc {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write " + path.string());
  out << text;
  if (!out) throw data_error("failed writing " + path.string());
}

std::string predictions_csv(const MetricsReport& report, bool plot_only) {
  std::ostringstream out;
  out.precision(9);
  out << "index,y_km,yhat_km\n";
  for (std::size_t k = 0; k < report.predictions.size(); ++k) {
    if (plot_only && k % 10 != 0) continue;
    const auto& p = report.predictions[k];
    out << p.index << ',' << p.y_km << ',' << p.yhat_km << '\n';
  }
  return out.str();
}

}  // namespace

std::string metrics_to_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["mae_km"] = report.mae_km;
  j["mse_km2"] = report.mse_km2;
  j["pcl5_percent"] = report.pcl5_percent;
  j["predictions"] = nlohmann::ordered_json::array();
  for (const auto& p : report.predictions) j["predictions"].push_back({p.index, p.y_km, p.yhat_km});
  return j.dump(2) + "\n";
}

MetricsReport metrics_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MetricsReport r;
    r.mae_km = j.at("mae_km").get<double>();
    r.mse_km2 = j.at("mse_km2").get<double>();
    r.pcl5_percent = j.at("pcl5_percent").get<double>();
    for (const auto& row : j.at("predictions")) {
      if (!row.is_array() || row.size() != 3) throw data_error("prediction rows must be [index, y, yhat]");
      r.predictions.push_back({row[0].get<std::uint32_t>(), row[1].get<double>(), row[2].get<double>()});
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw data_error(std::string("malformed metrics json: ") + e.what());
  }
}

MetricsReport read_metrics_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return metrics_from_json(buf.str());
}

void emit_report(const MetricsReport& report, const std::filesystem::path& dir) {
  if (report.predictions.empty()) throw data_error("report has no predictions");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw data_error("cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "metrics.json", metrics_to_json(report));
  write_text(dir / "predictions.csv", predictions_csv(report, false));
  write_text(dir / "plot.csv", predictions_csv(report, true));
}

}  // namespace uwloc
