#include "ncdpo/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "ncdpo/config.hpp"

namespace ncdpo {

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {
      "iteration",  "env_steps",  "mean_return",   "success_rate", "actor_loss", "value_loss",
      "bc_loss",    "mean_ratio", "clip_fraction", "entropy",      "wall_time_s"};
  return cols;
}

std::string metrics_header() {
  std::string out;
  for (const auto& c : metrics_columns()) out += (out.empty() ? "" : ",") + c;
  return out;
}

std::string metrics_row(const IterationMetrics& m) {
  std::string out = std::to_string(m.iteration) + "," + std::to_string(m.env_steps);
  for (double v : {m.mean_return, m.success_rate, m.actor_loss, m.value_loss, m.bc_loss,
                   m.mean_ratio, m.clip_fraction, m.entropy, m.wall_time_s}) {
    out += "," + format_double(v);
  }
  return out;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path)
    : out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot write " + path.string());
  out_ << metrics_header() << "\n";
  out_.flush();
}

void MetricsWriter::write(const IterationMetrics& m) {
  out_ << metrics_row(m) << "\n";
  out_.flush();
}

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw CsvError("csv has no column '" + name + "'");
  return static_cast<std::size_t>(it - columns.begin());
}

std::vector<double> CsvTable::values(const std::string& name) const {
  const std::size_t c = column(name);
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r[c]);
  return out;
}

CsvTable parse_csv(const std::string& text, const std::string& source) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  auto fail = [&](const std::string& what) {
    throw CsvError(source + ":" + std::to_string(n) + ": " + what);
  };
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(s);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (t.columns.empty()) {
      if (line.empty()) fail("missing header");
      t.columns = split(line);
      continue;
    }
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != t.columns.size()) {
      fail("expected " + std::to_string(t.columns.size()) + " fields, got " +
           std::to_string(cells.size()));
    }
    std::vector<double> row;
    for (const auto& c : cells) {
      double v = 0.0;
      const char* end = c.data() + c.size();
      auto [ptr, ec] = std::from_chars(c.data(), end, v);
      if (c.empty() || ec != std::errc{} || ptr != end) fail("not a number: '" + c + "'");
      row.push_back(v);
    }
    t.rows.push_back(std::move(row));
  }
  if (t.columns.empty()) throw CsvError(source + ":1: empty file");
  return t;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CsvError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), path.string());
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  if (std::abs(v) >= 1e4 || (v != 0.0 && std::abs(v) < 1e-2)) {
    std::snprintf(buf, sizeof buf, "%.3g", v);
  } else {
    std::snprintf(buf, sizeof buf, "%.4g", v);
  }
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Band {
  std::vector<double> x, mean, lo, hi;
};

Band band(const PlotSeries& s, const std::string& y) {
  Band b;
  if (s.runs.empty()) return b;
  std::size_t n = s.runs.front().rows.size();
  for (const auto& r : s.runs) n = std::min(n, r.rows.size());
  std::vector<std::vector<double>> xs, ys;
  for (const auto& r : s.runs) {
    xs.push_back(r.values("env_steps"));
    ys.push_back(r.values(y));
  }
  const double R = static_cast<double>(s.runs.size());
  for (std::size_t i = 0; i < n; ++i) {
    double sx = 0.0, sy = 0.0;
    for (std::size_t j = 0; j < s.runs.size(); ++j) {
      sx += xs[j][i];
      sy += ys[j][i];
    }
    const double my = sy / R;
    double var = 0.0;
    for (std::size_t j = 0; j < s.runs.size(); ++j) var += (ys[j][i] - my) * (ys[j][i] - my);
    const double sd = std::sqrt(var / R);
    b.x.push_back(sx / R);
    b.mean.push_back(my);
    b.lo.push_back(my - sd);
    b.hi.push_back(my + sd);
  }
  return b;
}

}  // namespace

std::string render_svg(const std::vector<PlotSeries>& series, const std::string& y_column,
                       const std::string& title) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                 "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
  const double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  std::vector<Band> bands;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    bands.push_back(band(s, y_column));
    const Band& b = bands.back();
    for (std::size_t i = 0; i < b.x.size(); ++i) {
      x0 = std::min(x0, b.x[i]);
      x1 = std::max(x1, b.x[i]);
      y0 = std::min(y0, b.lo[i]);
      y1 = std::max(y1, b.hi[i]);
    }
  }
  if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << fmt(W / 2) << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       "font-size=\"15\">"
    << escape(title) << "</text>\n";
  o << "<g stroke=\"black\" fill=\"none\"><line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\""
    << W - R << "\" y2=\"" << H - B << "\"/><line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L
    << "\" y2=\"" << H - B << "\"/></g>\n";
  o << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    o << "<text x=\"" << fmt(px(xv)) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">"
      << tick_label(xv) << "</text>\n";
    o << "<text x=\"" << L - 6 << "\" y=\"" << fmt(py(yv) + 4) << "\" text-anchor=\"end\">"
      << tick_label(yv) << "</text>\n";
  }
  o << "<text x=\"" << fmt((L + W - R) / 2) << "\" y=\"" << H - 12
    << "\" text-anchor=\"middle\">env_steps</text>\n";
  o << "<text x=\"16\" y=\"" << fmt((T + H - B) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << fmt((T + H - B) / 2) << ")\">" << escape(y_column) << "</text>\n";
  o << "</g>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const Band& b = bands[s];
    const char* color = colors[s % 8];
    if (!b.x.empty()) {
      o << "<polygon fill=\"" << color << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
      for (std::size_t i = 0; i < b.x.size(); ++i) o << fmt(px(b.x[i])) << "," << fmt(py(b.hi[i])) << " ";
      for (std::size_t i = b.x.size(); i-- > 0;) o << fmt(px(b.x[i])) << "," << fmt(py(b.lo[i])) << " ";
      o << "\"/>\n";
      o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < b.x.size(); ++i) {
        o << fmt(px(b.x[i])) << "," << fmt(py(b.mean[i])) << (i + 1 < b.x.size() ? " " : "");
      }
      o << "\"/>\n";
    }
    const double ly = T + 14 + 18.0 * static_cast<double>(s);
    o << "<line x1=\"" << W - R + 10 << "\" y1=\"" << fmt(ly) << "\" x2=\"" << W - R + 30
      << "\" y2=\"" << fmt(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << W - R + 36 << "\" y=\"" << fmt(ly + 4)
      << "\" font-family=\"sans-serif\" font-size=\"11\">" << escape(series[s].label) << " (n="
      << series[s].runs.size() << ")</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace ncdpo
