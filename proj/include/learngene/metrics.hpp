#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace lg {

struct MetricsRow {
  std::string run_id;
  std::string phase;
  std::size_t iter = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double seconds = 0.0;
  std::uint64_t seed = 0;
  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

inline constexpr const char* kMetricsHeader = "run_id,phase,iter,split,loss,accuracy,seconds,seed";

/// One CSV line, numbers with 6 significant digits.
std::string format_csv_row(const MetricsRow& row);
MetricsRow parse_csv_row(const std::string& line);

/// Appends to `csv` (header written when the file is new or empty) and to
/// `jsonl`. An empty row list leaves both files untouched. Throws IoError.
void emit_metrics(std::span<const MetricsRow> rows, const std::filesystem::path& csv,
                  const std::filesystem::path& jsonl);

/// Rows of a CSV written by emit_metrics.
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& csv);

/// In-memory log for one output directory. Keeps every row even when the
/// files cannot be written, and enforces a non-decreasing iteration index
/// per (run, phase).
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(std::filesystem::path dir);

  /// Removes existing metrics files so a rerun produces identical bytes.
  void reset_files();
  void append(std::vector<MetricsRow> rows);

  const std::vector<MetricsRow>& rows() const { return rows_; }
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::filesystem::path dir_;
  std::vector<MetricsRow> rows_;
  std::vector<std::string> errors_;
  std::map<std::pair<std::string, std::string>, std::size_t> last_iter_;
};

}  // namespace lg
