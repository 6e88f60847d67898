#include "primroute/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "primroute/binary_io.hpp"
#include "primroute/errors.hpp"

namespace primroute {

namespace {

/// Shortest representation that parses back to the same double.
std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_num(std::string_view s, std::size_t line) {
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw FormatError("csv line " + std::to_string(line) + ": bad number '" + std::string(s) + "'");
  }
  return v;
}

std::uint64_t parse_u64(std::string_view s, std::size_t line, int base = 10) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw FormatError("csv line " + std::to_string(line) + ": bad integer '" + std::string(s) + "'");
  }
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string xml_escape(std::string_view s) {
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

/// Fixed-precision coordinate for SVG output.
std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

constexpr std::array<const char*, 12> kPalette = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
                                                  "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939"};

struct Frame {
  double width = 640, height = 420, left = 70, right = 170, top = 40, bottom = 60;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  double sx(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
  double sy(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }
};

std::string svg_open(double w, double h, const std::string& title) {
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + px(w) + "\" height=\"" + px(h) + "\" viewBox=\"0 0 " +
       px(w) + " " + px(h) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"" + px(w) + "\" height=\"" + px(h) + "\" fill=\"white\"/>\n";
  s += "<text x=\"" + px(w / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" + xml_escape(title) + "</text>\n";
  return s;
}

std::string axes(const Frame& f, const std::string& x_label, const std::string& y_label) {
  std::string s;
  const double xa = f.sx(f.x0), xb = f.sx(f.x1), ya = f.sy(f.y0), yb = f.sy(f.y1);
  s += "<line x1=\"" + px(xa) + "\" y1=\"" + px(ya) + "\" x2=\"" + px(xb) + "\" y2=\"" + px(ya) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + px(xa) + "\" y1=\"" + px(ya) + "\" x2=\"" + px(xa) + "\" y2=\"" + px(yb) + "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0, yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    s += "<text x=\"" + px(f.sx(xv)) + "\" y=\"" + px(ya + 16) + "\" text-anchor=\"middle\">" + num(std::round(xv * 100) / 100) + "</text>\n";
    s += "<text x=\"" + px(xa - 6) + "\" y=\"" + px(f.sy(yv) + 4) + "\" text-anchor=\"end\">" + num(std::round(yv * 100) / 100) + "</text>\n";
  }
  s += "<text x=\"" + px((xa + xb) / 2) + "\" y=\"" + px(f.height - 18) + "\" text-anchor=\"middle\">" + xml_escape(x_label) + "</text>\n";
  s += "<text x=\"18\" y=\"" + px((ya + yb) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " + px((ya + yb) / 2) +
       ")\">" + xml_escape(y_label) + "</text>\n";
  return s;
}

void range_of(const std::vector<double>& v, double& lo, double& hi) {
  for (double x : v) {
    if (!std::isfinite(x)) continue;
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
}

void pad_range(double& lo, double& hi) {
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

std::string results_to_csv(const std::vector<EvalResult>& results) {
  std::string s = "label,condition,seed,config_hash,family,accuracy,mean_tokens,strength\n";
  for (const auto& r : results) {
    for (Skill skill : kAllSkills) {
      const int f = skill_index(skill);
      s += r.label + "," + std::string(condition_name(r.condition)) + "," + std::to_string(r.seed) + "," +
           hex64(r.config_hash) + "," + std::string(skill_name(skill)) + "," + num(r.accuracy[f]) + "," +
           num(r.mean_tokens[f]) + ",";
      if (!r.strength.empty()) {
        for (std::size_t i = 0; i < r.strength[f].size(); ++i) s += (i ? ";" : "") + num(r.strength[f][i]);
      }
      s += "\n";
    }
  }
  return s;
}

std::vector<EvalResult> results_from_csv(std::string_view text) {
  auto lines = split(text, '\n');
  if (lines.empty() || lines[0] != "label,condition,seed,config_hash,family,accuracy,mean_tokens,strength") {
    throw FormatError("csv: missing or unexpected header");
  }
  std::vector<EvalResult> out;
  std::size_t rows = 0;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    if (lines[ln].empty()) continue;
    const auto cells = split(lines[ln], ',');
    if (cells.size() != 8) throw FormatError("csv line " + std::to_string(ln + 1) + ": expected 8 fields");
    const std::size_t f = rows % kNumSkills;
    if (f == 0) {
      EvalResult r;
      r.label = std::string(cells[0]);
      r.condition = condition_from_name(cells[1]);
      r.seed = parse_u64(cells[2], ln + 1);
      r.config_hash = parse_u64(cells[3], ln + 1, 16);
      out.push_back(std::move(r));
    }
    auto& r = out.back();
    if (cells[0] != r.label || skill_from_name(cells[4]) != kAllSkills[f]) {
      throw FormatError("csv line " + std::to_string(ln + 1) + ": rows out of family order");
    }
    r.accuracy[f] = parse_num(cells[5], ln + 1);
    r.mean_tokens[f] = parse_num(cells[6], ln + 1);
    if (!cells[7].empty()) {
      if (r.strength.empty()) r.strength.resize(kNumSkills);
      for (auto part : split(cells[7], ';')) r.strength[f].push_back(parse_num(part, ln + 1));
    }
    ++rows;
  }
  if (rows % kNumSkills != 0) throw FormatError("csv: truncated result block");
  return out;
}

std::string summary_csv(const std::vector<EvalResult>& results) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const EvalResult*>> by_label;
  for (const auto& r : results) {
    if (!by_label.count(r.label)) order.push_back(r.label);
    by_label[r.label].push_back(&r);
  }
  auto mean_of = [&](const std::string& label, auto getter) {
    const auto& rs = by_label.at(label);
    double s = 0;
    for (const auto* r : rs) s += getter(*r);
    return s / static_cast<double>(rs.size());
  };
  const bool has_base = by_label.count("base") > 0;
  const double base_acc = has_base ? mean_of("base", [](const EvalResult& r) { return r.mean_accuracy(); }) : 0.0;
  const double base_tok = has_base ? mean_of("base", [](const EvalResult& r) { return r.mean_token_count(); }) : 0.0;
  std::string s = "label,seeds";
  for (Skill k : kAllSkills) s += "," + std::string(skill_name(k));
  s += ",mean,delta_vs_base,mean_tokens,token_ratio\n";
  for (const auto& label : order) {
    s += label + "," + std::to_string(by_label[label].size());
    for (Skill k : kAllSkills) {
      const int f = skill_index(k);
      s += "," + num(mean_of(label, [f](const EvalResult& r) { return r.accuracy[f]; }));
    }
    const double acc = mean_of(label, [](const EvalResult& r) { return r.mean_accuracy(); });
    const double tok = mean_of(label, [](const EvalResult& r) { return r.mean_token_count(); });
    s += "," + num(acc) + "," + (has_base ? num(acc - base_acc) : "") + "," + num(tok) + "," +
         (has_base && tok > 0 ? num(base_tok / tok) : "") + "\n";
  }
  return s;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::string s = "vector,alpha,family,accuracy,mean_tokens\n";
  for (const auto& r : rows) {
    s += std::to_string(r.vector_index) + "," + num(r.alpha) + "," + std::string(skill_name(r.skill)) + "," +
         num(r.accuracy) + "," + num(r.mean_tokens) + "\n";
  }
  return s;
}

std::string matrix_to_csv(const std::vector<std::vector<double>>& m, const std::vector<std::string>& row_labels,
                          const std::vector<std::string>& col_labels) {
  std::string s = "row";
  for (const auto& c : col_labels) s += "," + c;
  s += "\n";
  for (std::size_t i = 0; i < m.size(); ++i) {
    s += i < row_labels.size() ? row_labels[i] : std::to_string(i);
    for (double v : m[i]) s += "," + num(v);
    s += "\n";
  }
  return s;
}

std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series) {
  Frame f;
  double xl = INFINITY, xh = -INFINITY, yl = INFINITY, yh = -INFINITY;
  for (const auto& s : series) {
    range_of(s.x, xl, xh);
    range_of(s.y, yl, yh);
  }
  if (!std::isfinite(xl)) xl = 0, xh = 1, yl = 0, yh = 1;
  pad_range(xl, xh);
  pad_range(yl, yh);
  f.x0 = xl, f.x1 = xh, f.y0 = std::min(0.0, yl), f.y1 = std::max(1.0, yh);
  std::string s = svg_open(f.width, f.height, title) + axes(f, x_label, y_label);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& se = series[i];
    const char* color = kPalette[i % kPalette.size()];
    std::string pts;
    for (std::size_t j = 0; j < std::min(se.x.size(), se.y.size()); ++j) {
      pts += (j ? " " : "") + px(f.sx(se.x[j])) + "," + px(f.sy(se.y[j]));
    }
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    const double ly = f.top + 16.0 * static_cast<double>(i) + 10;
    s += "<rect x=\"" + px(f.width - f.right + 12) + "\" y=\"" + px(ly - 8) + "\" width=\"10\" height=\"10\" fill=\"" + color + "\"/>\n";
    s += "<text x=\"" + px(f.width - f.right + 26) + "\" y=\"" + px(ly + 1) + "\">" + xml_escape(se.name) + "</text>\n";
  }
  return s + "</svg>\n";
}

std::string svg_scatter(const std::string& title, const std::vector<std::array<double, 2>>& points,
                        const std::vector<int>& groups) {
  Frame f;
  f.right = 40;
  std::vector<double> xs, ys;
  for (const auto& p : points) xs.push_back(p[0]), ys.push_back(p[1]);
  double xl = INFINITY, xh = -INFINITY, yl = INFINITY, yh = -INFINITY;
  range_of(xs, xl, xh);
  range_of(ys, yl, yh);
  if (!std::isfinite(xl)) xl = 0, xh = 1, yl = 0, yh = 1;
  pad_range(xl, xh);
  pad_range(yl, yh);
  f.x0 = xl, f.x1 = xh, f.y0 = yl, f.y1 = yh;
  std::string s = svg_open(f.width, f.height, title) + axes(f, "PC1", "PC2");
  for (std::size_t i = 0; i < points.size(); ++i) {
    const int g = i < groups.size() ? groups[i] : 0;
    s += "<circle cx=\"" + px(f.sx(points[i][0])) + "\" cy=\"" + px(f.sy(points[i][1])) + "\" r=\"2.5\" fill=\"" +
         kPalette[static_cast<std::size_t>(std::max(g, 0)) % kPalette.size()] + "\" fill-opacity=\"0.7\"/>\n";
  }
  return s + "</svg>\n";
}

std::string svg_heatmap(const std::string& title, const std::vector<std::vector<double>>& m,
                        const std::vector<std::string>& row_labels, const std::vector<std::string>& col_labels) {
  const double cell = 44, left = 110, top = 50;
  const std::size_t rows = m.size(), cols = rows ? m[0].size() : 0;
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& r : m) range_of(r, lo, hi);
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  pad_range(lo, hi);
  const double w = left + cell * static_cast<double>(cols) + 20, h = top + cell * static_cast<double>(rows) + 60;
  std::string s = svg_open(w, h, title);
  for (std::size_t i = 0; i < rows; ++i) {
    const double y = top + cell * static_cast<double>(i);
    s += "<text x=\"" + px(left - 6) + "\" y=\"" + px(y + cell / 2 + 4) + "\" text-anchor=\"end\">" +
         xml_escape(i < row_labels.size() ? row_labels[i] : std::to_string(i)) + "</text>\n";
    for (std::size_t j = 0; j < m[i].size(); ++j) {
      const double t = (m[i][j] - lo) / (hi - lo);
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - std::clamp(t, 0.0, 1.0))));
      char color[16];
      std::snprintf(color, sizeof color, "#%02x%02xff", shade, shade);
      const double x = left + cell * static_cast<double>(j);
      s += "<rect x=\"" + px(x) + "\" y=\"" + px(y) + "\" width=\"" + px(cell) + "\" height=\"" + px(cell) +
           "\" fill=\"" + color + "\" stroke=\"white\"/>\n";
      char val[16];
      std::snprintf(val, sizeof val, "%.2f", m[i][j]);
      s += "<text x=\"" + px(x + cell / 2) + "\" y=\"" + px(y + cell / 2 + 4) + "\" text-anchor=\"middle\" font-size=\"10\">" +
           val + "</text>\n";
    }
  }
  for (std::size_t j = 0; j < cols; ++j) {
    const double x = left + cell * (static_cast<double>(j) + 0.5);
    s += "<text x=\"" + px(x) + "\" y=\"" + px(top + cell * static_cast<double>(rows) + 18) + "\" text-anchor=\"middle\">" +
         xml_escape(j < col_labels.size() ? col_labels[j] : std::to_string(j)) + "</text>\n";
  }
  return s + "</svg>\n";
}

std::vector<std::string> emit_reports(const ReportBundle& bundle, const std::filesystem::path& outdir) {
  std::error_code ec;
  std::filesystem::create_directories(outdir, ec);
  if (ec) throw std::runtime_error("cannot create " + outdir.string() + ": " + ec.message());
  std::vector<std::string> written;
  auto put = [&](const std::string& name, const std::string& text) {
    write_text(outdir / name, text);
    written.push_back(name);
  };
  put("manifest.json", bundle.manifest);
  std::vector<std::string> families;
  for (Skill k : kAllSkills) families.emplace_back(skill_name(k));
  if (!bundle.results.empty()) {
    put("results.csv", results_to_csv(bundle.results));
    put("summary.csv", summary_csv(bundle.results));
  }
  if (!bundle.ablation.empty()) {
    put("ablation.csv", results_to_csv(bundle.ablation));
    put("ablation_summary.csv", summary_csv(bundle.ablation));
  }
  if (!bundle.sweep.empty()) {
    put("sweep.csv", sweep_to_csv(bundle.sweep));
    std::map<std::size_t, std::map<double, std::pair<double, int>>> agg;
    for (const auto& r : bundle.sweep) {
      auto& cell = agg[r.vector_index][r.alpha];
      cell.first += r.accuracy;
      cell.second += 1;
    }
    std::vector<Series> series;
    for (const auto& [v, by_alpha] : agg) {
      Series se;
      se.name = "v" + std::to_string(v + 1);
      for (const auto& [a, c] : by_alpha) {
        se.x.push_back(a);
        se.y.push_back(c.first / c.second);
      }
      series.push_back(std::move(se));
    }
    put("sweep.svg", svg_line_plot("Static sweep: mean accuracy vs strength", "alpha", "accuracy", series));
  }
  if (!bundle.pca_projection.empty()) {
    put("pca.svg", svg_scatter("Difference vectors on the top two components", bundle.pca_projection, bundle.pca_groups));
  }
  std::vector<std::string> prim;
  const std::size_t k = !bundle.cosine.empty() ? bundle.cosine.size() : (!bundle.routing.empty() ? bundle.routing[0].size() : 0);
  for (std::size_t i = 0; i < k; ++i) prim.push_back("v" + std::to_string(i + 1));
  if (!bundle.cosine.empty()) {
    put("cosine.csv", matrix_to_csv(bundle.cosine, prim, prim));
    put("cosine.svg", svg_heatmap("Primitive cosine similarity", bundle.cosine, prim, prim));
  }
  if (!bundle.routing.empty()) {
    put("routing.csv", matrix_to_csv(bundle.routing, families, prim));
    put("routing.svg", svg_heatmap("Mean routed strength per family", bundle.routing, families, prim));
  }
  return written;
}

}  // namespace primroute
