#include "quantlab/analysis.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace quantlab;
using namespace quantlab::analysis;

namespace {

RunSummary run(std::string q, std::uint32_t size, std::uint64_t seed, double mse, double usage) {
    RunSummary r;
    r.quantizer = std::move(q);
    r.target_size = size;
    r.codebook_size = size;
    r.seed = seed;
    r.mse = mse;
    r.usage = usage;
    r.compression_cost = size * 0.5;
    return r;
}

} // namespace

TEST(CodebookUsage, Examples) {
    EXPECT_DOUBLE_EQ(codebook_usage(std::vector<std::uint32_t>{0, 1, 1}, 4).usage_fraction, 0.5);
    EXPECT_EQ(codebook_usage(std::vector<std::uint32_t>{}, 4).usage_fraction, 0.0);
    std::vector<std::uint32_t> all(16);
    std::iota(all.begin(), all.end(), 0u);
    EXPECT_EQ(codebook_usage(all, 16).usage_fraction, 1.0);
    const auto r = codebook_usage(std::vector<std::uint32_t>{3, 3, 0}, 4);
    EXPECT_EQ(r.histogram, (std::vector<std::uint64_t>{1, 0, 0, 2}));
    EXPECT_EQ(r.used_count, 2u);
}

TEST(CodebookUsage, ErrorsAndMerge) {
    EXPECT_THROW((void)codebook_usage(std::vector<std::uint32_t>{4}, 4), DomainError);
    EXPECT_THROW((void)codebook_usage(std::vector<std::uint32_t>{}, 0), DomainError);
    std::mt19937_64 rng(1);
    std::vector<std::uint32_t> tokens(500);
    for (auto& t : tokens) t = static_cast<std::uint32_t>(rng() % 700);
    auto part = codebook_usage(std::span(tokens).first(200), 700);
    const auto before = part.used_count;
    part.merge(codebook_usage(std::span(tokens).subspan(200), 700));
    const auto whole = codebook_usage(tokens, 700);
    EXPECT_GE(part.used_count, before);
    EXPECT_EQ(part.histogram, whole.histogram);
    EXPECT_EQ(part.used_count, whole.used_count);
    EXPECT_EQ(part.usage_fraction, whole.usage_fraction);
    EXPECT_THROW(part.merge(codebook_usage(tokens, 701)), DomainError);
}

TEST(ReconstructionError, Examples) {
    const std::vector<double> x{0.1, -0.4, 2.0};
    EXPECT_EQ(reconstruction_error(x, x).mse, 0.0);
    const auto e = reconstruction_error(x, std::vector<double>{1.1, 0.6, 3.0});
    EXPECT_NEAR(e.mse, 1.0, 1e-15);
    EXPECT_NEAR(e.rmse, 1.0, 1e-15);
    EXPECT_THROW((void)reconstruction_error(x, std::vector<double>{1.0}), ShapeError);
    EXPECT_THROW((void)reconstruction_error(Tensor::from({3}, x), Tensor::from({3, 1}, x)), ShapeError);
}

TEST(ReconstructionError, MatchesCompensatedSummation) {
    const auto a = quantlab::testing::random_values(10001, -1, 1, 2);
    const auto b = quantlab::testing::random_values(10001, -1, 1, 3);
    // Compensated summation as the reference.
    double sum = 0.0, c = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double y = (a[i] - b[i]) * (a[i] - b[i]) - c;
        const double t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    const auto e = reconstruction_error(a, b);
    EXPECT_NEAR(e.mse, sum / a.size(), 1e-14);
    EXPECT_NEAR(e.rmse, std::sqrt(sum / a.size()), 1e-14);
}

TEST(ParameterCount, BottleneckFormulas) {
    EXPECT_EQ(vq_bottleneck_parameters(4096, 512), 2097152u);
    EXPECT_EQ(fsq_bottleneck_parameters(), 0u);
    EXPECT_EQ(dense_parameters(128, 10), 1290u);
    EXPECT_EQ(dense_parameters(128, 10, false), 1280u);
}

TEST(ParameterCount, ReportSplitsBottleneck) {
    const ParameterReport r{{{"enc", 100, false}, {"codebook", 64, true}, {"dec", 50, false}}};
    EXPECT_EQ(r.total(), 214u);
    EXPECT_EQ(r.bottleneck(), 64u);
}

TEST(Report, SingleRun) {
    const std::vector<RunSummary> runs{run("fsq", 16, 1, 0.1, 1.0)};
    const auto rep = report(runs);
    ASSERT_EQ(rep.series("mse", "fsq").points.size(), 1u);
    EXPECT_EQ(rep.series("mse", "fsq").points[0].median, 0.1);
    EXPECT_THROW((void)report(std::vector<RunSummary>{}), DomainError);
    EXPECT_THROW((void)rep.series("mse", "vq"), DomainError);
}

TEST(Report, MedianBandAndOrdering) {
    const std::vector<RunSummary> runs{run("vq", 256, 1, 0.3, 0.5), run("vq", 16, 1, 0.9, 1.0),
                                       run("vq", 256, 2, 0.1, 0.7), run("vq", 256, 3, 0.2, 0.6),
                                       run("fsq", 64, 1, 0.4, 1.0)};
    const auto rep = report(runs);
    const auto& s = rep.series("mse", "vq");
    ASSERT_EQ(s.points.size(), 2u);
    EXPECT_EQ(s.points[0].codebook_size, 16u);
    EXPECT_EQ(s.points[1].codebook_size, 256u);
    EXPECT_EQ(s.points[1].median, 0.2);
    EXPECT_EQ(s.points[1].min, 0.1);
    EXPECT_EQ(s.points[1].max, 0.3);
    EXPECT_EQ(s.points[1].runs, 3u);
    EXPECT_EQ(median({1.0, 4.0}), 2.5);

    const auto csv = to_csv(rep);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "metric,quantizer,codebook_size,median,min,max,runs");
    EXPECT_NE(csv.find("mse,vq,256,0.2,0.1,0.3,3"), std::string::npos);
    const auto j = to_json(rep, runs);
    EXPECT_EQ(j["runs"].size(), 5u);
    EXPECT_EQ(j["series"]["usage"]["vq"][1]["median"].get<double>(), 0.6);
}

TEST(Report, SvgChartHasSeriesAndLegend) {
    const std::vector<RunSummary> runs{run("vq", 16, 1, 0.3, 0.5), run("vq", 64, 1, 0.2, 0.5),
                                       run("fsq", 16, 1, 0.25, 1.0), run("fsq", 64, 1, 0.15, 1.0)};
    const auto svg = svg_line_chart(report(runs).metrics.at("mse"), "mse");
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
    EXPECT_NE(svg.find(">fsq<"), std::string::npos);
    EXPECT_NE(svg.find(">vq<"), std::string::npos);
    EXPECT_NE(svg.find("<polyline"), svg.rfind("<polyline"));
}
