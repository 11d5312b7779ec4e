#include "dadet/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace dadet {

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 420;
constexpr int kLeft = 70;
constexpr int kRight = 610;
constexpr int kTop = 50;
constexpr int kBottom = 360;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c",
                          "#9467bd", "#ff7f0e", "#8c564b"};
constexpr int kPaletteSize = 6;

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

std::string num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

struct Range {
  double lo = 0, hi = 1;
  double scale(double v, double out_lo, double out_hi) const {
    return out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo);
  }
};

Range padded_range(double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("empty value range");
  if (lo == hi) {
    lo -= 1.0;
    hi += 1.0;
  }
  double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

void open_svg(std::string& s, const std::string& title) {
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
       std::to_string(kWidth) + "\" height=\"" + std::to_string(kHeight) +
       "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + std::to_string(kWidth / 2) +
       "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" + escape(title) +
       "</text>\n";
}

void draw_axes(std::string& s, const Range& xr, const Range& yr,
               const std::string& x_label, const std::string& y_label) {
  for (int t = 0; t <= 4; ++t) {
    double fx = xr.lo + (xr.hi - xr.lo) * t / 4.0;
    double fy = yr.lo + (yr.hi - yr.lo) * t / 4.0;
    double px = xr.scale(fx, kLeft, kRight);
    double py = yr.scale(fy, kBottom, kTop);
    s += "<line x1=\"" + num(px) + "\" y1=\"" + std::to_string(kTop) +
         "\" x2=\"" + num(px) + "\" y2=\"" + std::to_string(kBottom) +
         "\" stroke=\"#e0e0e0\"/>\n";
    s += "<line x1=\"" + std::to_string(kLeft) + "\" y1=\"" + num(py) +
         "\" x2=\"" + std::to_string(kRight) + "\" y2=\"" + num(py) +
         "\" stroke=\"#e0e0e0\"/>\n";
    s += "<text x=\"" + num(px) + "\" y=\"" + std::to_string(kBottom + 18) +
         "\" text-anchor=\"middle\">" + num(fx) + "</text>\n";
    s += "<text x=\"" + std::to_string(kLeft - 8) + "\" y=\"" + num(py + 4) +
         "\" text-anchor=\"end\">" + num(fy) + "</text>\n";
  }
  s += "<line x1=\"" + std::to_string(kLeft) + "\" y1=\"" +
       std::to_string(kBottom) + "\" x2=\"" + std::to_string(kRight) +
       "\" y2=\"" + std::to_string(kBottom) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + std::to_string(kLeft) + "\" y1=\"" +
       std::to_string(kTop) + "\" x2=\"" + std::to_string(kLeft) +
       "\" y2=\"" + std::to_string(kBottom) + "\" stroke=\"black\"/>\n";
  s += "<text x=\"" + std::to_string((kLeft + kRight) / 2) + "\" y=\"" +
       std::to_string(kBottom + 38) + "\" text-anchor=\"middle\">" +
       escape(x_label) + "</text>\n";
  s += "<text x=\"18\" y=\"" + std::to_string((kTop + kBottom) / 2) +
       "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " +
       std::to_string((kTop + kBottom) / 2) + ")\">" + escape(y_label) +
       "</text>\n";
}

void draw_legend(std::string& s, const std::vector<std::string>& labels) {
  int y = kTop + 14;
  int x = kRight - 150;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const char* color = kPalette[i % kPaletteSize];
    s += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y - 9) +
         "\" width=\"14\" height=\"10\" fill=\"" + color + "\"/>\n";
    s += "<text x=\"" + std::to_string(x + 20) + "\" y=\"" +
         std::to_string(y) + "\">" + escape(labels[i]) + "</text>\n";
    y += 18;
  }
}

}  // namespace

std::string line_chart(const std::string& title, const std::string& x_label,
                       const std::string& y_label,
                       const std::vector<ChartSeries>& series) {
  if (series.empty()) throw std::invalid_argument("no series to plot");
  double xlo = 0, xhi = 0, ylo = 0, yhi = 0;
  bool first = true;
  for (const ChartSeries& sr : series) {
    if (sr.xs.size() != sr.ys.size() || sr.xs.empty()) {
      throw std::invalid_argument("series needs equal-length non-empty x/y");
    }
    for (std::size_t i = 0; i < sr.xs.size(); ++i) {
      if (first) {
        xlo = xhi = sr.xs[i];
        ylo = yhi = sr.ys[i];
        first = false;
      } else {
        xlo = std::min<double>(xlo, sr.xs[i]);
        xhi = std::max<double>(xhi, sr.xs[i]);
        ylo = std::min<double>(ylo, sr.ys[i]);
        yhi = std::max<double>(yhi, sr.ys[i]);
      }
    }
  }
  Range xr = padded_range(xlo, xhi);
  Range yr = padded_range(ylo, yhi);

  std::string s;
  open_svg(s, title);
  draw_axes(s, xr, yr, x_label, y_label);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % kPaletteSize];
    std::string pts;
    for (std::size_t j = 0; j < series[i].xs.size(); ++j) {
      if (j) pts += " ";
      pts += num(xr.scale(series[i].xs[j], kLeft, kRight)) + "," +
             num(yr.scale(series[i].ys[j], kBottom, kTop));
    }
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
         "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    for (std::size_t j = 0; j < series[i].xs.size(); ++j) {
      s += "<circle cx=\"" + num(xr.scale(series[i].xs[j], kLeft, kRight)) +
           "\" cy=\"" + num(yr.scale(series[i].ys[j], kBottom, kTop)) +
           "\" r=\"3\" fill=\"" + color + "\"/>\n";
    }
  }
  std::vector<std::string> labels;
  for (const ChartSeries& sr : series) labels.push_back(sr.label);
  draw_legend(s, labels);
  s += "</svg>\n";
  return s;
}

std::string stacked_bar_chart(const std::string& title,
                              const std::string& y_label,
                              const std::vector<std::string>& bar_labels,
                              const std::vector<std::string>& segment_labels,
                              const std::vector<std::vector<float>>& values) {
  if (bar_labels.empty() || values.size() != bar_labels.size()) {
    throw std::invalid_argument("one value row per bar required");
  }
  double max_sum = 0.0;
  for (const auto& row : values) {
    if (row.size() != segment_labels.size()) {
      throw std::invalid_argument("one value per segment required");
    }
    double sum = 0.0;
    for (float v : row) {
      if (v < 0.0f) throw std::invalid_argument("bar segments must be >= 0");
      sum += v;
    }
    max_sum = std::max(max_sum, sum);
  }
  if (max_sum == 0.0) max_sum = 1.0;
  Range yr = padded_range(0.0, max_sum);
  yr.lo = 0.0;

  std::string s;
  open_svg(s, title);
  for (int t = 0; t <= 4; ++t) {
    double fy = yr.hi * t / 4.0;
    double py = yr.scale(fy, kBottom, kTop);
    s += "<line x1=\"" + std::to_string(kLeft) + "\" y1=\"" + num(py) +
         "\" x2=\"" + std::to_string(kRight) + "\" y2=\"" + num(py) +
         "\" stroke=\"#e0e0e0\"/>\n";
    s += "<text x=\"" + std::to_string(kLeft - 8) + "\" y=\"" + num(py + 4) +
         "\" text-anchor=\"end\">" + num(fy) + "</text>\n";
  }
  s += "<line x1=\"" + std::to_string(kLeft) + "\" y1=\"" +
       std::to_string(kBottom) + "\" x2=\"" + std::to_string(kRight) +
       "\" y2=\"" + std::to_string(kBottom) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + std::to_string(kLeft) + "\" y1=\"" +
       std::to_string(kTop) + "\" x2=\"" + std::to_string(kLeft) +
       "\" y2=\"" + std::to_string(kBottom) + "\" stroke=\"black\"/>\n";
  s += "<text x=\"18\" y=\"" + std::to_string((kTop + kBottom) / 2) +
       "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " +
       std::to_string((kTop + kBottom) / 2) + ")\">" + escape(y_label) +
       "</text>\n";

  const double slot =
      static_cast<double>(kRight - kLeft) / static_cast<double>(bar_labels.size());
  for (std::size_t b = 0; b < bar_labels.size(); ++b) {
    double x0 = kLeft + slot * (static_cast<double>(b) + 0.2);
    double w = slot * 0.6;
    double base = kBottom;
    for (std::size_t g = 0; g < segment_labels.size(); ++g) {
      double h = yr.scale(0.0, kBottom, kTop) -
                 yr.scale(static_cast<double>(values[b][g]), kBottom, kTop);
      base -= h;
      s += "<rect x=\"" + num(x0) + "\" y=\"" + num(base) + "\" width=\"" +
           num(w) + "\" height=\"" + num(h) + "\" fill=\"" +
           kPalette[g % kPaletteSize] + "\"/>\n";
    }
    s += "<text x=\"" + num(x0 + w / 2) + "\" y=\"" +
         std::to_string(kBottom + 18) + "\" text-anchor=\"middle\">" +
         escape(bar_labels[b]) + "</text>\n";
  }
  draw_legend(s, segment_labels);
  s += "</svg>\n";
  return s;
}

}  // namespace dadet
