#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vara/losses.hpp"
#include "vara/numerics.hpp"

namespace vara {

struct TelemetryRecord {
  int step = 0;
  LossBreakdown loss;
  double wall_seconds = 0.0;
};

// Columns: step, speed, recon, kl_total, gain, total, kl_0..kl_N, wall_s.
void write_telemetry_csv(const std::filesystem::path& path, const std::vector<TelemetryRecord>& rows);
std::vector<TelemetryRecord> read_telemetry_csv(const std::filesystem::path& path);

// Generic numeric table with a header row; values written with round-trip precision.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};
void write_csv(const std::filesystem::path& path, const CsvTable& table, const std::string& comment = "");
CsvTable read_csv(const std::filesystem::path& path);

// "T,L,layer" header, one line with those values, then T rows of L values.
void write_alignment_csv(const std::filesystem::path& path, const Tensor& a, int layer);
std::pair<Tensor, int> read_alignment_csv(const std::filesystem::path& path);

// 8-bit binary PGM with linear min-max scaling; the range is recorded in a comment.
void write_pgm(const std::filesystem::path& path, const Tensor& m);
struct PgmImage {
  std::size_t width = 0, height = 0;
  std::vector<unsigned char> pixels;
  double min_value = 0.0, max_value = 0.0;
};
PgmImage read_pgm(const std::filesystem::path& path);

// INI-like grid: "[name]" starts a config, following "key = value" lines are its deltas.
struct GridEntry {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;
};
std::vector<GridEntry> parse_grid(const std::string& text, const std::string& origin = "<grid>");
std::vector<GridEntry> load_grid(const std::filesystem::path& path);

// Fails when the path exists and force is false.
void ensure_writable(const std::filesystem::path& path, bool force);

}  // namespace vara
