#include "learngene/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "learngene/tensor.hpp"

namespace lg {

namespace {

namespace fs = std::filesystem;

std::string g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void require_plain(const std::string& field, const std::string& value) {
  if (value.find_first_of(",\n\r\"") != std::string::npos)
    throw InvalidArgument("metrics: " + field + " '" + value + "' contains a separator");
}

}  // namespace

std::string format_csv_row(const MetricsRow& r) {
  require_plain("run_id", r.run_id);
  require_plain("phase", r.phase);
  require_plain("split", r.split);
  return r.run_id + "," + r.phase + "," + std::to_string(r.iter) + "," + r.split + "," + g6(r.loss) + "," +
         g6(r.accuracy) + "," + g6(r.seconds) + "," + std::to_string(r.seed);
}

MetricsRow parse_csv_row(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) f.push_back(cell);
  if (f.size() != 8) throw IoError("metrics: expected 8 fields in '" + line + "'");
  try {
    return {f[0], f[1], std::stoull(f[2]), f[3], std::stod(f[4]), std::stod(f[5]), std::stod(f[6]), std::stoull(f[7])};
  } catch (const std::exception&) {
    throw IoError("metrics: malformed row '" + line + "'");
  }
}

void emit_metrics(std::span<const MetricsRow> rows, const fs::path& csv, const fs::path& jsonl) {
  if (rows.empty()) return;
  std::string csv_text, json_text;
  for (const auto& r : rows) {
    csv_text += format_csv_row(r) + "\n";
    nlohmann::ordered_json j = {{"run_id", r.run_id}, {"phase", r.phase},     {"iter", r.iter},
                                {"split", r.split},   {"loss", r.loss},       {"accuracy", r.accuracy},
                                {"seconds", r.seconds}, {"seed", r.seed}};
    json_text += j.dump() + "\n";
  }
  std::error_code ec;
  const bool fresh = !fs::exists(csv, ec) || fs::file_size(csv, ec) == 0;
  std::ofstream c(csv, std::ios::app);
  if (!c) throw IoError("metrics: cannot open " + csv.string());
  if (fresh) c << kMetricsHeader << "\n";
  c << csv_text;
  if (!c) throw IoError("metrics: write failed for " + csv.string());
  std::ofstream j(jsonl, std::ios::app);
  if (!j) throw IoError("metrics: cannot open " + jsonl.string());
  j << json_text;
  if (!j) throw IoError("metrics: write failed for " + jsonl.string());
}

std::vector<MetricsRow> read_metrics_csv(const fs::path& csv) {
  std::ifstream in(csv);
  if (!in) throw IoError("metrics: cannot open " + csv.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw IoError("metrics: bad header in " + csv.string());
  std::vector<MetricsRow> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(parse_csv_row(line));
  return rows;
}

MetricsLog::MetricsLog(fs::path dir) : dir_(std::move(dir)) {}

void MetricsLog::reset_files() {
  if (dir_.empty()) return;
  std::error_code ec;
  fs::remove(dir_ / "metrics.csv", ec);
  fs::remove(dir_ / "metrics.jsonl", ec);
}

void MetricsLog::append(std::vector<MetricsRow> rows) {
  for (const auto& r : rows) {
    auto [it, inserted] = last_iter_.try_emplace({r.run_id, r.phase}, r.iter);
    if (!inserted) {
      if (r.iter < it->second)
        throw InvalidArgument("metrics: iteration " + std::to_string(r.iter) + " goes backwards in " + r.run_id +
                              "/" + r.phase);
      it->second = r.iter;
    }
  }
  if (!dir_.empty()) {
    try {
      emit_metrics(rows, dir_ / "metrics.csv", dir_ / "metrics.jsonl");
    } catch (const IoError& e) {
      errors_.push_back(e.what());
    }
  }
  rows_.insert(rows_.end(), std::make_move_iterator(rows.begin()), std::make_move_iterator(rows.end()));
}

}  // namespace lg
