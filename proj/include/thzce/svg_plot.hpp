// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed
//
// Minimal SVG line plots for the result curves. CSV files are the contract;
// these are a convenience for eyeballing runs.

#pragma once

#include <string>
#include <vector>

namespace thzce {

struct PlotSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

void write_svg_plot(const std::string& path, const std::string& title,
                    const std::string& xlabel, const std::string& ylabel,
                    const std::vector<PlotSeries>& series, int width = 720,
                    int height = 480);

} // namespace thzce
