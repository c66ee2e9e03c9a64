#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "priorfuse/core/error.hpp"

namespace priorfuse::report {

namespace fs = std::filesystem;

// One (method, dataset, image) evaluation. Metrics are optional: a missing
// prediction or an unavailable IQA provider leaves them empty.
struct PerImageRecord {
  std::string method;
  std::string dataset;
  std::string id;
  bool prediction_found{true};
  std::optional<double> psnr;
  std::optional<double> ssim;
  std::optional<double> iqa;
  // Fidelity columns, relative to the degraded input / ground truth.
  std::optional<double> aspect_ratio_delta;
  std::optional<int> shift_dy;
  std::optional<int> shift_dx;
  std::optional<double> shift_confidence;
  std::optional<bool> divergence_flag;
  std::string notes;
};

struct AggregateRow {
  std::string method;
  std::string dataset;
  std::optional<double> psnr;
  std::optional<double> ssim;
  std::optional<double> iqa;
  std::size_t n_images{0};
  std::size_t n_psnr{0};
  std::size_t n_ssim{0};
  std::size_t n_iqa{0};
};

struct EvalReport {
  std::vector<AggregateRow> rows;
  std::vector<PerImageRecord> per_image;

  const AggregateRow* find(const std::string& method, const std::string& dataset) const {
    for (const auto& r : rows)
      if (r.method == method && r.dataset == dataset) return &r;
    return nullptr;
  }
};

// Per-(method, dataset) means in first-appearance order. Absent values are
// left out of the mean; the per-metric counts record how many went in.
inline EvalReport aggregate(const std::vector<PerImageRecord>& per_image) {
  if (per_image.empty()) throw InvalidArgument("aggregate: no per-image records");
  EvalReport rep;
  rep.per_image = per_image;
  struct Acc {
    double psnr = 0, ssim = 0, iqa = 0;
  };
  std::vector<Acc> acc;
  for (const auto& r : per_image) {
    auto it = std::find_if(rep.rows.begin(), rep.rows.end(),
                           [&](const AggregateRow& a) { return a.method == r.method && a.dataset == r.dataset; });
    if (it == rep.rows.end()) {
      rep.rows.push_back({r.method, r.dataset});
      acc.emplace_back();
      it = rep.rows.end() - 1;
    }
    auto& a = acc[static_cast<std::size_t>(it - rep.rows.begin())];
    ++it->n_images;
    if (r.psnr) a.psnr += *r.psnr, ++it->n_psnr;
    if (r.ssim) a.ssim += *r.ssim, ++it->n_ssim;
    if (r.iqa) a.iqa += *r.iqa, ++it->n_iqa;
  }
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    auto& row = rep.rows[i];
    if (row.n_psnr) row.psnr = acc[i].psnr / static_cast<double>(row.n_psnr);
    if (row.n_ssim) row.ssim = acc[i].ssim / static_cast<double>(row.n_ssim);
    if (row.n_iqa) row.iqa = acc[i].iqa / static_cast<double>(row.n_iqa);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Rendering

enum class Format { csv, markdown };

inline Format parse_format(const std::string& s) {
  if (s == "csv") return Format::csv;
  if (s == "markdown" || s == "md") return Format::markdown;
  throw InvalidArgument("unknown table format '" + s + "' (csv|markdown)");
}

// Absent-metric placeholder, U+2014.
inline constexpr const char* kAbsent = "\xE2\x80\x94";

inline std::string fixed(const std::optional<double>& v, int decimals) {
  if (!v) return kAbsent;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, *v);
  return buf;
}

namespace detail {

template <class F>
std::vector<std::string> unique_in_order(const std::vector<AggregateRow>& rows, F key) {
  std::vector<std::string> out;
  for (const auto& r : rows)
    if (std::find(out.begin(), out.end(), key(r)) == out.end()) out.push_back(key(r));
  return out;
}

}  // namespace detail

// Both formats share the same rounding (PSNR 2 decimals, SSIM and CLIP-IQA 3).
// CSV is long form, one row per (method, dataset); markdown puts methods on
// rows and groups the three metric columns by dataset.
inline std::string render_table(const EvalReport& rep, Format format) {
  std::ostringstream out;
  if (format == Format::csv) {
    out << "method,dataset,psnr,ssim,clip_iqa,n_images\n";
    for (const auto& r : rep.rows) {
      out << r.method << "," << r.dataset << "," << fixed(r.psnr, 2) << "," << fixed(r.ssim, 3) << ","
          << fixed(r.iqa, 3) << "," << r.n_images << "\n";
    }
    return out.str();
  }
  const auto methods = detail::unique_in_order(rep.rows, [](const AggregateRow& r) { return r.method; });
  const auto datasets = detail::unique_in_order(rep.rows, [](const AggregateRow& r) { return r.dataset; });
  out << "| Method |";
  for (const auto& d : datasets) out << " " << d << " PSNR↑ | " << d << " SSIM↑ | " << d << " CLIP-IQA↑ |";
  out << "\n|---|";
  for (std::size_t i = 0; i < datasets.size(); ++i) out << "---:|---:|---:|";
  out << "\n";
  for (const auto& m : methods) {
    out << "| " << m << " |";
    for (const auto& d : datasets) {
      const auto* r = rep.find(m, d);
      out << " " << (r ? fixed(r->psnr, 2) : kAbsent) << " | " << (r ? fixed(r->ssim, 3) : kAbsent) << " | "
          << (r ? fixed(r->iqa, 3) : kAbsent) << " |";
    }
    out << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// CSV I/O

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += (c == '"') ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline std::string full(const std::optional<double>& v) {
  if (!v) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

inline std::optional<double> parse_opt(const std::string& s) {
  if (s.empty() || s == kAbsent) return std::nullopt;
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw InvalidArgument("not a number: '" + s + "'");
  return v;
}

// Non-comment, non-empty lines split into fields, header first.
inline std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line[0] == '#' || line == "\r") continue;
    rows.push_back(split_csv(line));
  }
  return rows;
}

inline std::size_t column(const std::vector<std::string>& header, const std::string& name) {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw InvalidArgument("CSV has no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

}  // namespace detail

inline constexpr const char* kPerImageHeader =
    "method,dataset,id,prediction_found,psnr,ssim,clip_iqa,aspect_ratio_delta,shift_dy,shift_dx,shift_confidence,"
    "divergence_flag,notes";

// Full precision, so aggregates can be recomputed from the file.
inline std::string per_image_csv(const std::vector<PerImageRecord>& recs) {
  std::ostringstream out;
  out << kPerImageHeader << "\n";
  auto opt_int = [](const std::optional<int>& v) { return v ? std::to_string(*v) : std::string(); };
  for (const auto& r : recs) {
    out << detail::csv_field(r.method) << "," << detail::csv_field(r.dataset) << "," << detail::csv_field(r.id) << ","
        << (r.prediction_found ? "1" : "0") << "," << detail::full(r.psnr) << "," << detail::full(r.ssim) << ","
        << detail::full(r.iqa) << "," << detail::full(r.aspect_ratio_delta) << "," << opt_int(r.shift_dy) << ","
        << opt_int(r.shift_dx) << "," << detail::full(r.shift_confidence) << ","
        << (r.divergence_flag ? (*r.divergence_flag ? "1" : "0") : "") << "," << detail::csv_field(r.notes) << "\n";
  }
  return out.str();
}

inline std::vector<PerImageRecord> read_per_image_csv(const fs::path& path) {
  const auto rows = detail::read_csv(path);
  if (rows.empty()) throw InvalidArgument("per-image CSV " + path.string() + " is empty");
  const auto& h = rows[0];
  const auto c_method = detail::column(h, "method"), c_dataset = detail::column(h, "dataset"), c_id = detail::column(h, "id");
  const auto c_found = detail::column(h, "prediction_found"), c_psnr = detail::column(h, "psnr");
  const auto c_ssim = detail::column(h, "ssim"), c_iqa = detail::column(h, "clip_iqa");
  std::vector<PerImageRecord> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f.size() != h.size()) throw InvalidArgument("per-image CSV row " + std::to_string(i) + " has wrong field count");
    PerImageRecord r;
    r.method = f[c_method];
    r.dataset = f[c_dataset];
    r.id = f[c_id];
    r.prediction_found = f[c_found] == "1";
    r.psnr = detail::parse_opt(f[c_psnr]);
    r.ssim = detail::parse_opt(f[c_ssim]);
    r.iqa = detail::parse_opt(f[c_iqa]);
    out.push_back(std::move(r));
  }
  return out;
}

// Reads an aggregate table (method,dataset,psnr,ssim,clip_iqa[,n_images]).
// Lines starting with '#' are comments.
inline EvalReport read_table_csv(const fs::path& path) {
  const auto rows = detail::read_csv(path);
  if (rows.empty()) throw InvalidArgument("table CSV " + path.string() + " is empty");
  const auto& h = rows[0];
  const auto c_method = detail::column(h, "method"), c_dataset = detail::column(h, "dataset");
  const auto c_psnr = detail::column(h, "psnr"), c_ssim = detail::column(h, "ssim"), c_iqa = detail::column(h, "clip_iqa");
  const auto n_it = std::find(h.begin(), h.end(), "n_images");
  EvalReport rep;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f.size() < h.size()) throw InvalidArgument("table CSV row " + std::to_string(i) + " has too few fields");
    AggregateRow r;
    r.method = f[c_method];
    r.dataset = f[c_dataset];
    r.psnr = detail::parse_opt(f[c_psnr]);
    r.ssim = detail::parse_opt(f[c_ssim]);
    r.iqa = detail::parse_opt(f[c_iqa]);
    if (n_it != h.end()) {
      const auto& n = f[static_cast<std::size_t>(n_it - h.begin())];
      if (!n.empty()) r.n_images = std::stoul(n);
    }
    rep.rows.push_back(std::move(r));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Plots: one static SVG per dataset, three panels (PSNR, SSIM, CLIP-IQA) with
// one bar per method. Absent values get no bar.

inline std::string render_bar_chart_svg(const EvalReport& rep, const std::string& dataset) {
  std::vector<const AggregateRow*> rows;
  for (const auto& r : rep.rows)
    if (r.dataset == dataset) rows.push_back(&r);
  static const char* kColors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};
  const int panel_w = 220, panel_h = 200, top = 40, bottom = 50, left = 20;
  const int width = left + 3 * panel_w + 20;
  const int height = top + panel_h + bottom + 20 * static_cast<int>(rows.size());
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << dataset << "</text>\n";
  struct Panel {
    const char* label;
    std::optional<double> AggregateRow::*field;
    int decimals;
  };
  const Panel panels[] = {{"PSNR (dB)", &AggregateRow::psnr, 2}, {"SSIM", &AggregateRow::ssim, 3}, {"CLIP-IQA", &AggregateRow::iqa, 3}};
  for (int p = 0; p < 3; ++p) {
    const int x0 = left + p * panel_w;
    double vmax = 0.0;
    for (const auto* r : rows)
      if (r->*panels[p].field) vmax = std::max(vmax, *(r->*panels[p].field));
    if (vmax <= 0.0) vmax = 1.0;
    svg << "<text x=\"" << x0 + 10 << "\" y=\"" << top - 5 << "\">" << panels[p].label << "</text>\n";
    svg << "<line x1=\"" << x0 + 10 << "\" y1=\"" << top + panel_h << "\" x2=\"" << x0 + panel_w - 20 << "\" y2=\""
        << top + panel_h << "\" stroke=\"#333\"/>\n";
    const int n = std::max<int>(1, static_cast<int>(rows.size()));
    const double bw = (panel_w - 40.0) / n;
    for (int i = 0; i < static_cast<int>(rows.size()); ++i) {
      const auto& v = rows[i]->*panels[p].field;
      if (!v) continue;
      const double bh = std::max(0.0, *v / vmax) * (panel_h - 20);
      char buf[256];
      std::snprintf(buf, sizeof buf, "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"%s\"/>\n",
                    x0 + 15 + i * bw, top + panel_h - bh, bw * 0.8, bh, kColors[i % 6]);
      svg << buf;
      svg << "<text x=\"" << static_cast<int>(x0 + 15 + i * bw) << "\" y=\"" << static_cast<int>(top + panel_h - bh - 3)
          << "\" font-size=\"9\">" << fixed(v, panels[p].decimals) << "</text>\n";
    }
  }
  for (int i = 0; i < static_cast<int>(rows.size()); ++i) {
    const int y = top + panel_h + 25 + 20 * i;
    svg << "<rect x=\"" << left << "\" y=\"" << y - 10 << "\" width=\"12\" height=\"12\" fill=\"" << kColors[i % 6] << "\"/>";
    svg << "<text x=\"" << left + 18 << "\" y=\"" << y << "\">" << rows[i]->method << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

inline std::string plot_file_name(const std::string& dataset) {
  std::string s;
  for (char c : dataset) s += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return s + ".svg";
}

inline void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << text;
  }
  fs::rename(tmp, path);
}

// report.csv, report.md and plots/<dataset>.svg; per_image.csv when there are records.
inline void write_report(const EvalReport& rep, const fs::path& out_dir) {
  write_file(out_dir / "report.csv", render_table(rep, Format::csv));
  write_file(out_dir / "report.md", render_table(rep, Format::markdown));
  if (!rep.per_image.empty()) write_file(out_dir / "per_image.csv", per_image_csv(rep.per_image));
  for (const auto& d : detail::unique_in_order(rep.rows, [](const AggregateRow& r) { return r.dataset; }))
    write_file(out_dir / "plots" / plot_file_name(d), render_bar_chart_svg(rep, d));
}

}  // namespace priorfuse::report
