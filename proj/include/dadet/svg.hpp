#pragma once

#include <string>
#include <vector>

namespace dadet {

struct ChartSeries {
  std::string label;
  std::vector<float> xs;
  std::vector<float> ys;
};

// Static line plot: axes with ticks, light gridlines, one polyline per
// series, legend. Self-contained SVG, deterministic output.
std::string line_chart(const std::string& title, const std::string& x_label,
                       const std::string& y_label,
                       const std::vector<ChartSeries>& series);

// Vertical stacked bars; values[bar][segment] are absolute heights, stacked
// bottom-up in segment order. One legend entry per segment label.
std::string stacked_bar_chart(const std::string& title,
                              const std::string& y_label,
                              const std::vector<std::string>& bar_labels,
                              const std::vector<std::string>& segment_labels,
                              const std::vector<std::vector<float>>& values);

}  // namespace dadet
