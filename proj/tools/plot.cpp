#include "plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace mea::plot {
namespace {

constexpr double kWidth = 760, kHeight = 460;
constexpr double kLeft = 70, kRight = 190, kTop = 40, kBottom = 56;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish(bool pad) {
    if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
    if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
    if (pad) {
      const double m = 0.05 * (hi - lo);
      lo -= m;
      hi += m;
    }
  }
};

// Round tick step: 1, 2 or 5 times a power of ten.
std::vector<double> ticks(double lo, double hi, int target = 6) {
  const double raw = (hi - lo) / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (m * mag >= raw) {
      step = m * mag;
      break;
    }
  std::vector<double> out;
  for (double t = std::ceil(lo / step) * step; t <= hi + 1e-9 * step; t += step) out.push_back(t);
  return out;
}

class Canvas {
 public:
  Canvas(const std::string& title) {
    s_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
       << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    text(kWidth / 2, 22, title, "middle", 15);
  }
  void text(double x, double y, const std::string& t, const char* anchor = "start", int size = 11,
            double rotate = 0.0) {
    s_ << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" font-size=\"" << size
       << "\" text-anchor=\"" << anchor << '"';
    if (rotate != 0.0) s_ << " transform=\"rotate(" << rotate << ' ' << num(x) << ' ' << num(y) << ")\"";
    s_ << '>' << escape(t) << "</text>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke, double width = 1.0,
            bool dashed = false) {
    s_ << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(x2) << "\" y2=\""
       << num(y2) << "\" stroke=\"" << stroke << "\" stroke-width=\"" << width << '"'
       << (dashed ? " stroke-dasharray=\"5,4\"" : "") << "/>\n";
  }
  void raw(const std::string& s) { s_ << s; }
  std::string done() {
    s_ << "</svg>\n";
    return s_.str();
  }

 private:
  std::ostringstream s_;
};

}  // namespace

std::string render(const LineChart& chart) {
  auto fx = [&](double v) { return chart.log_x ? std::log10(v) : v; };
  Range xr, yr;
  for (const auto& s : chart.series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (chart.log_x && !(s.x[i] > 0.0)) continue;
      xr.add(fx(s.x[i]));
      yr.add(s.y[i]);
    }
  for (double v : chart.vlines)
    if (!chart.log_x || v > 0.0) xr.add(fx(v));
  xr.finish(false);
  yr.finish(true);

  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double v) { return kLeft + (fx(v) - xr.lo) / (xr.hi - xr.lo) * pw; };
  auto py = [&](double v) { return kTop + (yr.hi - v) / (yr.hi - yr.lo) * ph; };

  Canvas c(chart.title);
  for (double t : ticks(yr.lo, yr.hi)) {
    c.line(kLeft, py(t), kLeft + pw, py(t), "#e6e6e6");
    c.text(kLeft - 6, py(t) + 4, num(t), "end");
  }
  for (double t : ticks(xr.lo, xr.hi)) {
    const double x = kLeft + (t - xr.lo) / (xr.hi - xr.lo) * pw;
    c.line(x, kTop, x, kTop + ph, "#e6e6e6");
    c.text(x, kTop + ph + 16, chart.log_x ? "1e" + num(t) : num(t), "middle");
  }
  c.line(kLeft, kTop + ph, kLeft + pw, kTop + ph, "black");
  c.line(kLeft, kTop, kLeft, kTop + ph, "black");
  c.text(kLeft + pw / 2, kHeight - 12, chart.x_label, "middle", 12);
  c.text(18, kTop + ph / 2, chart.y_label, "middle", 12, -90);
  for (double v : chart.vlines) c.line(px(v), kTop, px(v), kTop + ph, "#777777", 1.0, true);

  for (std::size_t k = 0; k < chart.series.size(); ++k) {
    const auto& s = chart.series[k];
    const std::string color = kPalette[k % std::size(kPalette)];
    std::ostringstream pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if ((chart.log_x && !(s.x[i] > 0.0)) || !std::isfinite(s.y[i])) continue;
      if (s.markers) {
        c.raw("<circle cx=\"" + num(px(s.x[i])) + "\" cy=\"" + num(py(s.y[i])) + "\" r=\"2.2\" fill=\"" +
              color + "\"/>\n");
      } else {
        pts << num(px(s.x[i])) << ',' << num(py(s.y[i])) << ' ';
      }
    }
    if (!s.markers)
      c.raw("<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"" +
            (s.highlight ? "2.6" : "1.4") + "\"" + (s.dashed ? " stroke-dasharray=\"6,4\"" : "") +
            " points=\"" + pts.str() + "\"/>\n");
    const double ly = kTop + 14 + 16.0 * static_cast<double>(k);
    c.line(kLeft + pw + 12, ly - 4, kLeft + pw + 30, ly - 4, color, s.highlight ? 2.6 : 1.4, s.dashed);
    c.text(kLeft + pw + 36, ly, s.label + (s.highlight ? " *" : ""));
  }
  return c.done();
}

std::string render(const BarChart& chart) {
  Range yr;
  yr.add(0.0);
  for (const auto& b : chart.bars) yr.add(b.value);
  yr.finish(true);
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto py = [&](double v) { return kTop + (yr.hi - v) / (yr.hi - yr.lo) * ph; };

  Canvas c(chart.title);
  for (double t : ticks(yr.lo, yr.hi)) {
    c.line(kLeft, py(t), kLeft + pw, py(t), "#e6e6e6");
    c.text(kLeft - 6, py(t) + 4, num(t), "end");
  }
  c.line(kLeft, py(0.0), kLeft + pw, py(0.0), "black");
  c.line(kLeft, kTop, kLeft, kTop + ph, "black");
  c.text(18, kTop + ph / 2, chart.y_label, "middle", 12, -90);

  const double slot = pw / static_cast<double>(std::max<std::size_t>(1, chart.bars.size()));
  for (std::size_t i = 0; i < chart.bars.size(); ++i) {
    const auto& b = chart.bars[i];
    const double x = kLeft + slot * (static_cast<double>(i) + 0.15);
    const double top = std::min(py(b.value), py(0.0));
    const double h = std::abs(py(b.value) - py(0.0));
    c.raw("<rect x=\"" + num(x) + "\" y=\"" + num(top) + "\" width=\"" + num(0.7 * slot) +
          "\" height=\"" + num(h) + "\" fill=\"" + kPalette[0] + "\"/>\n");
    c.text(x + 0.35 * slot, kTop + ph + 16, b.label, "middle");
    c.text(x + 0.35 * slot, top - 4, num(b.value), "middle", 10);
  }
  return c.done();
}

}  // namespace mea::plot
