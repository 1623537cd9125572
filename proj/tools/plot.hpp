#pragma once

#include <string>
#include <vector>

namespace mea::plot {

struct Series {
  std::string label;
  std::vector<double> x, y;
  bool markers = false;  // dots instead of a polyline
  bool dashed = false;
  bool highlight = false;
};

struct LineChart {
  std::string title, x_label, y_label;
  bool log_x = false;
  std::vector<Series> series;
  std::vector<double> vlines;  // vertical guides in data coordinates
};

struct Bar {
  std::string label;
  double value = 0.0;
};

struct BarChart {
  std::string title, y_label;
  std::vector<Bar> bars;
};

std::string render(const LineChart& chart);
std::string render(const BarChart& chart);

}  // namespace mea::plot
