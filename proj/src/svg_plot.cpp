// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed

#include "thzce/svg_plot.hpp"

#include "thzce/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace thzce {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

// Round-ish tick step covering the span with 4-8 ticks.
double tick_step(double span) {
    if (span <= 0) return 1.0;
    const double raw = span / 5.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    for (double m : {1.0, 2.0, 2.5, 5.0, 10.0})
        if (raw <= m * mag) return m * mag;
    return 10.0 * mag;
}

} // namespace

void write_svg_plot(const std::string& path, const std::string& title,
                    const std::string& xlabel, const std::string& ylabel,
                    const std::vector<PlotSeries>& series, int width, int height) {
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series) {
        for (double v : s.x) {
            xmin = std::min(xmin, v);
            xmax = std::max(xmax, v);
        }
        for (double v : s.y) {
            if (!std::isfinite(v)) continue;
            ymin = std::min(ymin, v);
            ymax = std::max(ymax, v);
        }
    }
    if (!(xmin < xmax)) {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if (!(ymin < ymax)) {
        ymin -= 0.5;
        ymax += 0.5;
    }
    const double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    const int ml = 64, mr = 150, mt = 36, mb = 48;
    const double pw = width - ml - mr, ph = height - mt - mb;
    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
    auto py = [&](double y) { return mt + (ymax - y) / (ymax - ymin) * ph; };

    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot write plot: " + path);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    f << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
      << title << "</text>\n";

    // grid + ticks
    const double xs = tick_step(xmax - xmin), ys = tick_step(ymax - ymin);
    for (double x = std::ceil(xmin / xs) * xs; x <= xmax + 1e-9; x += xs) {
        f << "<line x1=\"" << px(x) << "\" y1=\"" << mt << "\" x2=\"" << px(x)
          << "\" y2=\"" << mt + ph << "\" stroke=\"#e0e0e0\"/>\n";
        f << "<text x=\"" << px(x) << "\" y=\"" << mt + ph + 16
          << "\" text-anchor=\"middle\">" << fmt(x) << "</text>\n";
    }
    for (double y = std::ceil(ymin / ys) * ys; y <= ymax + 1e-9; y += ys) {
        f << "<line x1=\"" << ml << "\" y1=\"" << py(y) << "\" x2=\"" << ml + pw
          << "\" y2=\"" << py(y) << "\" stroke=\"#e0e0e0\"/>\n";
        f << "<text x=\"" << ml - 6 << "\" y=\"" << py(y) + 4
          << "\" text-anchor=\"end\">" << fmt(y) << "</text>\n";
    }
    f << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\""
      << ph << "\" fill=\"none\" stroke=\"black\"/>\n";
    f << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 10
      << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
    f << "<text x=\"16\" y=\"" << mt + ph / 2
      << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << mt + ph / 2 << ")\">"
      << ylabel << "</text>\n";

    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = kPalette[i % (sizeof(kPalette) / sizeof(kPalette[0]))];
        f << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t k = 0; k < series[i].x.size(); ++k) {
            if (!std::isfinite(series[i].y[k])) continue;
            f << px(series[i].x[k]) << "," << py(series[i].y[k]) << " ";
        }
        f << "\"/>\n";
        const double ly = mt + 16.0 * (i + 1);
        f << "<line x1=\"" << ml + pw + 8 << "\" y1=\"" << ly << "\" x2=\"" << ml + pw + 28
          << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        f << "<text x=\"" << ml + pw + 32 << "\" y=\"" << ly + 4 << "\">" << series[i].label
          << "</text>\n";
    }
    f << "</svg>\n";
}

} // namespace thzce
