// Self-contained scatter plot: target modes as outlined circles, samples as
// dots colored by condition. Byte output is deterministic for fixed input.
#pragma once

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "advdmd/flow.hpp"
#include "advdmd/mat.hpp"

namespace advdmd {

inline void emit_scatter_svg(const LabeledBatch& samples, const MixtureTarget& target, const std::string& path) {
    if (target.dim() != 2 || (samples.x.rows > 0 && samples.x.cols != 2)) {
        throw std::invalid_argument("emit_scatter_svg: needs 2-D data");
    }
    static const char* palette[] = {"#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4",
                                    "#46f0f0", "#f032e6", "#bcf60c", "#808000"};
    const int size = 640;
    double extent = 1.0;
    for (const auto& m : target.means) {
        extent = std::max({extent, std::abs(m[0]), std::abs(m[1])});
    }
    extent = 1.4 * extent + 3.0 * target.component_std;
    const double scale = size / (2.0 * extent);
    auto sx = [&](double x) { return size / 2.0 + scale * x; };
    auto sy = [&](double y) { return size / 2.0 - scale * y; };
    auto num = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2f", v);
        return std::string(buf);
    };

    std::string svg;
    svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(size) + "\" height=\"" +
           std::to_string(size) + "\" viewBox=\"0 0 " + std::to_string(size) + " " + std::to_string(size) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (const auto& m : target.means) {
        svg += "<circle cx=\"" + num(sx(m[0])) + "\" cy=\"" + num(sy(m[1])) + "\" r=\"" +
               num(scale * 3.0 * target.component_std) + "\" fill=\"none\" stroke=\"#888888\" stroke-width=\"1\"/>\n";
    }
    for (int i = 0; i < samples.x.rows; ++i) {
        const int c = samples.labels.empty() ? 0 : samples.labels[i];
        const char* color = palette[c % 9];
        svg += "<circle cx=\"" + num(sx(samples.x.at(i, 0))) + "\" cy=\"" + num(sy(samples.x.at(i, 1))) +
               "\" r=\"2\" fill=\"" + color + "\" fill-opacity=\"0.6\"/>\n";
    }
    svg += "</svg>\n";

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("svg: cannot write '" + path + "'");
    out << svg;
}

}  // namespace advdmd
