#pragma once

// Metrics and report assembly: codebook usage, reconstruction error,
// parameter counting, median-over-seeds series, JSON/CSV/SVG output.

#include "quantlab/error.hpp"
#include "quantlab/tensor.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace quantlab::analysis {

struct UsageReport {
    std::uint32_t codebook_size = 0;
    std::uint32_t used_count = 0;
    double usage_fraction = 0.0;
    std::vector<std::uint64_t> histogram;

    /// Folds another partial histogram over the same codebook into this one.
    void merge(const UsageReport& other) {
        if (other.codebook_size != codebook_size) throw DomainError("usage: cannot merge different codebook sizes");
        used_count = 0;
        for (std::size_t i = 0; i < histogram.size(); ++i) {
            histogram[i] += other.histogram[i];
            used_count += histogram[i] > 0;
        }
        usage_fraction = static_cast<double>(used_count) / codebook_size;
    }
};

/// Fraction of codewords used at least once, with the exact frequency histogram.
inline UsageReport codebook_usage(std::span<const std::uint32_t> tokens, std::uint32_t codebook_size) {
    if (codebook_size == 0) throw DomainError("usage: codebook size must be positive");
    UsageReport r{codebook_size, 0, 0.0, std::vector<std::uint64_t>(codebook_size, 0)};
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= codebook_size) {
            throw DomainError("usage: token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                              " is outside a codebook of size " + std::to_string(codebook_size));
        }
        r.used_count += r.histogram[tokens[i]]++ == 0;
    }
    r.usage_fraction = static_cast<double>(r.used_count) / codebook_size;
    return r;
}

struct ReconstructionError {
    double mse = 0.0;
    double rmse = 0.0;
};

inline ReconstructionError reconstruction_error(std::span<const double> x, std::span<const double> x_hat) {
    if (x.size() != x_hat.size()) {
        throw ShapeError("reconstruction_error: sizes " + std::to_string(x.size()) + " and " +
                         std::to_string(x_hat.size()) + " differ");
    }
    if (x.empty()) throw ShapeError("reconstruction_error: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - x_hat[i];
        acc += d * d;
    }
    const double mse = acc / static_cast<double>(x.size());
    return {mse, std::sqrt(mse)};
}

inline ReconstructionError reconstruction_error(const Tensor& x, const Tensor& x_hat) {
    if (x.shape() != x_hat.shape()) {
        throw ShapeError("reconstruction_error: shapes " + shape_string(x.shape()) + " and " +
                         shape_string(x_hat.shape()) + " differ");
    }
    return reconstruction_error(x.values(), x_hat.values());
}

// ---- parameter counting ---------------------------------------------------------

struct LayerParameters {
    std::string name;
    std::size_t count = 0;
    bool bottleneck = false;
};

struct ParameterReport {
    std::vector<LayerParameters> layers;

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.count;
        return n;
    }
    std::size_t bottleneck() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.bottleneck ? l.count : 0;
        return n;
    }
};

inline std::size_t dense_parameters(std::size_t in, std::size_t out, bool bias = true) {
    return in * out + (bias ? out : 0);
}

/// A learned codebook of |C| vectors of dimension d.
inline std::size_t vq_bottleneck_parameters(std::size_t codebook_size, std::size_t dim) { return codebook_size * dim; }

/// The FSQ grid is fixed; nothing is learned.
inline constexpr std::size_t fsq_bottleneck_parameters() { return 0; }

/// Any model exposing parameter_layers().
template <class Model>
ParameterReport parameter_count(const Model& model) {
    return ParameterReport{model.parameter_layers()};
}

// ---- sweep reports ----------------------------------------------------------------

struct RunSummary {
    std::string quantizer;
    std::uint32_t target_size = 0;
    std::uint32_t codebook_size = 0;
    std::string config;
    std::uint64_t seed = 0;
    double mse = 0.0;
    double usage = 0.0;
    double compression_cost = 0.0;
    double bits_per_token = 0.0;
    std::size_t parameters = 0;
    std::size_t bottleneck_parameters = 0;
};

struct SeriesPoint {
    std::uint32_t codebook_size = 0;
    double median = 0.0;
    double min = 0.0;
    double max = 0.0;
    std::size_t runs = 0;
};

struct Series {
    std::string quantizer;
    std::vector<SeriesPoint> points; // ascending codebook size
};

struct Report {
    /// metric name -> one series per quantizer
    std::map<std::string, std::vector<Series>> metrics;

    const Series& series(const std::string& metric, const std::string& quantizer) const {
        for (const auto& s : metrics.at(metric)) {
            if (s.quantizer == quantizer) return s;
        }
        throw DomainError("report: no series for " + quantizer + " in " + metric);
    }
};

inline double median(std::vector<double> v) {
    if (v.empty()) throw DomainError("median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline const std::vector<std::string>& report_metrics() {
    static const std::vector<std::string> names{"mse", "usage", "compression_cost", "bits_per_token", "parameters"};
    return names;
}

inline double metric_value(const RunSummary& r, const std::string& metric) {
    if (metric == "mse") return r.mse;
    if (metric == "usage") return r.usage;
    if (metric == "compression_cost") return r.compression_cost;
    if (metric == "bits_per_token") return r.bits_per_token;
    if (metric == "parameters") return static_cast<double>(r.parameters);
    throw DomainError("report: unknown metric " + metric);
}

/// Median over seeds (with min/max band) per (quantizer, target size).
inline Report report(std::span<const RunSummary> results) {
    if (results.empty()) throw DomainError("report: no results");
    Report out;
    for (const auto& metric : report_metrics()) {
        std::map<std::string, std::map<std::uint32_t, std::vector<double>>> grouped;
        for (const auto& r : results) grouped[r.quantizer][r.target_size].push_back(metric_value(r, metric));
        auto& series_list = out.metrics[metric];
        for (auto& [quantizer, by_size] : grouped) {
            Series s{quantizer, {}};
            for (auto& [size, values] : by_size) {
                const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
                s.points.push_back({size, median(values), *lo, *hi, values.size()});
            }
            series_list.push_back(std::move(s));
        }
    }
    return out;
}

inline nlohmann::json to_json(const Report& rep, std::span<const RunSummary> runs) {
    nlohmann::json j;
    j["runs"] = nlohmann::json::array();
    for (const auto& r : runs) {
        j["runs"].push_back({{"quantizer", r.quantizer},
                             {"target_size", r.target_size},
                             {"codebook_size", r.codebook_size},
                             {"config", r.config},
                             {"seed", r.seed},
                             {"mse", r.mse},
                             {"usage", r.usage},
                             {"compression_cost", r.compression_cost},
                             {"bits_per_token", r.bits_per_token},
                             {"parameters", r.parameters},
                             {"bottleneck_parameters", r.bottleneck_parameters}});
    }
    for (const auto& [metric, series_list] : rep.metrics) {
        auto& m = j["series"][metric];
        for (const auto& s : series_list) {
            auto& arr = m[s.quantizer];
            arr = nlohmann::json::array();
            for (const auto& p : s.points) {
                arr.push_back({{"codebook_size", p.codebook_size},
                               {"median", p.median},
                               {"min", p.min},
                               {"max", p.max},
                               {"runs", p.runs}});
            }
        }
    }
    return j;
}

inline std::string format_number(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

/// metric,quantizer,codebook_size,median,min,max,runs
inline std::string to_csv(const Report& rep) {
    std::ostringstream os;
    os << "metric,quantizer,codebook_size,median,min,max,runs\n";
    for (const auto& [metric, series_list] : rep.metrics) {
        for (const auto& s : series_list) {
            for (const auto& p : s.points) {
                os << metric << ',' << s.quantizer << ',' << p.codebook_size << ',' << format_number(p.median) << ','
                   << format_number(p.min) << ',' << format_number(p.max) << ',' << p.runs << '\n';
            }
        }
    }
    return os.str();
}

/// Static line chart of one metric: log2 codebook size on x, median on y,
/// min/max as a translucent band, one colored series per quantizer.
inline std::string svg_line_chart(const std::vector<Series>& series_list, const std::string& title) {
    constexpr double width = 640, height = 400, left = 70, right = 130, top = 40, bottom = 50;
    const double plot_w = width - left - right, plot_h = height - top - bottom;
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series_list) {
        for (const auto& p : s.points) {
            const double x = std::log2(static_cast<double>(p.codebook_size));
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, p.min);
            ymax = std::max(ymax, p.max);
        }
    }
    if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (xmax == xmin) xmin -= 1, xmax += 1;
    if (ymax == ymin) ymin -= 0.5, ymax += 0.5;
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
    auto sx = [&](double x) { return left + (x - xmin) / (xmax - xmin) * plot_w; };
    auto sy = [&](double y) { return top + (1.0 - (y - ymin) / (ymax - ymin)) * plot_h; };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

    std::ostringstream os;
    os << std::setprecision(6);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
       << title << "</text>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w << "\" y2=\""
       << top + plot_h << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h
       << "\" stroke=\"black\"/>\n";
    for (int e = static_cast<int>(std::ceil(xmin)); e <= static_cast<int>(std::floor(xmax)); ++e) {
        os << "<line x1=\"" << sx(e) << "\" y1=\"" << top + plot_h << "\" x2=\"" << sx(e) << "\" y2=\""
           << top + plot_h + 5 << "\" stroke=\"black\"/>\n";
        os << "<text x=\"" << sx(e) << "\" y=\"" << top + plot_h + 20
           << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">2^" << e << "</text>\n";
    }
    for (int t = 0; t <= 4; ++t) {
        const double y = ymin + (ymax - ymin) * t / 4.0;
        os << "<line x1=\"" << left - 5 << "\" y1=\"" << sy(y) << "\" x2=\"" << left << "\" y2=\"" << sy(y)
           << "\" stroke=\"black\"/>\n";
        os << "<text x=\"" << left - 8 << "\" y=\"" << sy(y) + 4
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << format_number(y) << "</text>\n";
    }
    os << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << height - 10
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">codebook size</text>\n";
    for (std::size_t i = 0; i < series_list.size(); ++i) {
        const auto& s = series_list[i];
        const char* color = colors[i % std::size(colors)];
        if (s.points.size() > 1) {
            os << "<polygon fill=\"" << color << "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
            for (const auto& p : s.points) os << sx(std::log2(double(p.codebook_size))) << ',' << sy(p.max) << ' ';
            for (auto it = s.points.rbegin(); it != s.points.rend(); ++it) {
                os << sx(std::log2(double(it->codebook_size))) << ',' << sy(it->min) << ' ';
            }
            os << "\"/>\n";
        }
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (const auto& p : s.points) os << sx(std::log2(double(p.codebook_size))) << ',' << sy(p.median) << ' ';
        os << "\"/>\n";
        for (const auto& p : s.points) {
            os << "<circle cx=\"" << sx(std::log2(double(p.codebook_size))) << "\" cy=\"" << sy(p.median)
               << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        }
        const double ly = top + 20 + 20.0 * static_cast<double>(i);
        os << "<line x1=\"" << left + plot_w + 15 << "\" y1=\"" << ly << "\" x2=\"" << left + plot_w + 35
           << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << left + plot_w + 40 << "\" y=\"" << ly + 4
           << "\" font-family=\"sans-serif\" font-size=\"12\">" << s.quantizer << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

} // namespace quantlab::analysis
