#include "vara/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "vara/errors.hpp"

namespace vara {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

double to_double(const std::string& s, const fs::path& path) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    // stod rejects "inf"/"nan" spellings produced by some printers.
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    if (s == "nan" || s == "-nan") return NAN;
    throw FormatError(path.string(), "not a number: '" + s + "'");
  }
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

void write_csv(const fs::path& path, const CsvTable& table, const std::string& comment) {
  auto out = open_out(path);
  if (!comment.empty()) out << "# " << comment << '\n';
  for (std::size_t i = 0; i < table.header.size(); ++i) out << (i ? "," : "") << table.header[i];
  out << '\n';
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << fmt(row[i]);
    out << '\n';
  }
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto cells = split(line, ',');
    if (!have_header) {
      t.header = cells;
      have_header = true;
      continue;
    }
    if (cells.size() != t.header.size())
      throw FormatError(path.string(), "row has " + std::to_string(cells.size()) + " cells, header has " +
                                           std::to_string(t.header.size()));
    std::vector<double> row;
    for (auto& c : cells) row.push_back(to_double(c, path));
    t.rows.push_back(std::move(row));
  }
  if (!have_header) throw FormatError(path.string(), "missing header");
  return t;
}

void write_telemetry_csv(const fs::path& path, const std::vector<TelemetryRecord>& rows) {
  CsvTable t;
  t.header = {"step", "speed", "recon", "kl_total", "gain", "total"};
  const std::size_t n_layers = rows.empty() ? 0 : rows.front().loss.kl_per_layer.size();
  for (std::size_t i = 0; i < n_layers; ++i) t.header.push_back("kl_" + std::to_string(i));
  t.header.push_back("wall_s");
  for (const auto& r : rows) {
    std::vector<double> row{static_cast<double>(r.step), r.loss.speed, r.loss.recon, r.loss.kl_total, r.loss.gain,
                            r.loss.total};
    if (r.loss.kl_per_layer.size() != n_layers) throw InvalidArgument("telemetry rows disagree on layer count");
    row.insert(row.end(), r.loss.kl_per_layer.begin(), r.loss.kl_per_layer.end());
    row.push_back(r.wall_seconds);
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

std::vector<TelemetryRecord> read_telemetry_csv(const fs::path& path) {
  CsvTable t = read_csv(path);
  if (t.header.size() < 7 || t.header[0] != "step" || t.header.back() != "wall_s")
    throw FormatError(path.string(), "not a telemetry file");
  const std::size_t n_layers = t.header.size() - 7;
  std::vector<TelemetryRecord> out;
  for (const auto& row : t.rows) {
    TelemetryRecord r;
    r.step = static_cast<int>(row[0]);
    r.loss.speed = row[1];
    r.loss.recon = row[2];
    r.loss.kl_total = row[3];
    r.loss.gain = row[4];
    r.loss.total = row[5];
    r.loss.kl_per_layer.assign(row.begin() + 6, row.begin() + 6 + static_cast<long>(n_layers));
    r.wall_seconds = row.back();
    out.push_back(std::move(r));
  }
  return out;
}

void write_alignment_csv(const fs::path& path, const Tensor& a, int layer) {
  auto out = open_out(path);
  out << "T,L,layer\n" << a.rows() << ',' << a.cols() << ',' << layer << '\n';
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) out << (c ? "," : "") << fmt(a.at(r, c));
    out << '\n';
  }
}

std::pair<Tensor, int> read_alignment_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line) != "T,L,layer") throw FormatError(path.string(), "missing T,L,layer header");
  if (!std::getline(in, line)) throw FormatError(path.string(), "missing dimensions");
  auto dims = split(trim(line), ',');
  if (dims.size() != 3) throw FormatError(path.string(), "bad dimension line");
  const auto T = static_cast<std::size_t>(to_double(dims[0], path));
  const auto L = static_cast<std::size_t>(to_double(dims[1], path));
  const int layer = static_cast<int>(to_double(dims[2], path));
  std::vector<double> v;
  v.reserve(T * L);
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    for (auto& c : split(line, ',')) v.push_back(to_double(c, path));
  }
  if (v.size() != T * L) throw FormatError(path.string(), "expected " + std::to_string(T * L) + " values");
  return {Tensor(Shape{T, L}, std::move(v)), layer};
}

void write_pgm(const fs::path& path, const Tensor& m) {
  if (m.rank() != 2) throw InvalidArgument("write_pgm: matrix expected");
  auto vals = m.values();
  const auto [lo_it, hi_it] = std::minmax_element(vals.begin(), vals.end());
  const double lo = *lo_it, hi = *hi_it;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  // Rows of the image are text positions, columns are frames.
  const std::size_t W = m.rows(), H = m.cols();
  out << "P5\n# min=" << fmt(lo) << " max=" << fmt(hi) << "\n" << W << ' ' << H << "\n255\n";
  std::vector<unsigned char> px(W * H);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double v = m.at(x, y);
      const double u = hi > lo ? (v - lo) / (hi - lo) : 0.0;
      px[y * W + x] = static_cast<unsigned char>(std::lround(std::clamp(u, 0.0, 1.0) * 255.0));
    }
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

PgmImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  PgmImage img;
  std::string magic, comment;
  std::getline(in, magic);
  if (magic != "P5") throw FormatError(path.string(), "not a binary PGM");
  std::getline(in, comment);
  if (std::sscanf(comment.c_str(), "# min=%lf max=%lf", &img.min_value, &img.max_value) != 2)
    throw FormatError(path.string(), "missing range comment");
  int maxval = 0;
  in >> img.width >> img.height >> maxval;
  in.get();
  if (!in || maxval != 255) throw FormatError(path.string(), "bad PGM header");
  img.pixels.resize(img.width * img.height);
  if (!in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size())))
    throw FormatError(path.string(), "truncated PGM payload");
  return img;
}

std::vector<GridEntry> parse_grid(const std::string& text, const std::string& origin) {
  std::vector<GridEntry> grid;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
      std::string name = trim(line.substr(1, line.size() - 2));
      // Names become output directories.
      if (name.empty() || name.find_first_of("/\\") != std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": bad configuration name '" + name + "'");
      for (const auto& g : grid)
        if (g.name == name) throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate name '" + name + "'");
      grid.push_back({std::move(name), {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos || grid.empty())
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected [name] or key=value");
    grid.back().overrides.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return grid;
}

std::vector<GridEntry> load_grid(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open grid " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_grid(ss.str(), path.string());
}

void ensure_writable(const fs::path& path, bool force) {
  if (fs::exists(path) && !force)
    throw IoError(path.string() + " already exists (pass --force to overwrite)");
}

}  // namespace vara
