// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include "quantlab/quantlab.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

using namespace quantlab;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

std::vector<double> uniform(std::size_t n, double lo, double hi, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

std::string fmt(double v, int digits = 4) {
    std::ostringstream os;
    os.precision(digits);
    os << v;
    return os.str();
}

const std::vector<std::vector<std::uint32_t>> kRecommended{{8, 6, 5}, {8, 5, 5, 5}, {7, 5, 5, 5, 5}, {8, 8, 8, 6, 5}, {8, 8, 8, 5, 5, 5}};
const std::vector<std::vector<std::uint32_t>> kTabulated{{5, 3}, {8, 8}, {8, 6, 5}, {8, 8, 8}, {8, 5, 5, 5},
                                                        {8, 8, 6, 5}, {7, 5, 5, 5}, {8, 8, 8, 6, 5}, {8, 8, 8, 5, 5, 5}};

Outcome bijection() {
    const auto t0 = std::chrono::steady_clock::now();
    auto specs = kRecommended;
    for (const auto& levels : kTabulated) {
        if (std::find(specs.begin(), specs.end(), levels) == specs.end()) specs.push_back(levels);
    }
    std::size_t codes = 0;
    for (const auto& levels : specs) {
        const fsq::LevelsSpec spec(levels);
        for (std::uint32_t i = 0; i < spec.codebook_size(); ++i) {
            if (fsq::codes_to_indexes(fsq::indexes_to_codes(i, spec), spec) != i) {
                return {false, spec.to_string() + " breaks at index " + std::to_string(i)};
            }
        }
        codes += spec.codebook_size();
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {s < 5.0, std::to_string(specs.size()) + " level sets, " + std::to_string(codes) + " codes, " + fmt(s, 3) + " s"};
}

Outcome size_approximation() {
    // Target size and the product stated for each recommendation.
    const std::vector<std::pair<std::uint64_t, std::uint64_t>> expected{
        {256, 240}, {1024, 1000}, {4096, 4375}, {16384, 15360}, {65536, 64000}};
    std::string detail;
    bool ok = true;
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto [target, product] = expected[i];
        const auto spec = fsq::recommend_levels(target);
        const std::uint64_t got = spec.codebook_size();
        const fsq::LevelsSpec table(kRecommended[i]);
        ok = ok && got == product && table.codebook_size() == product && got * 10 <= target * 11 && got * 10 >= target * 9;
        detail += (i ? ", " : "") + std::to_string(got) + " vs " + std::to_string(target);
    }
    return {ok, detail};
}

Outcome ste_correctness() {
    const fsq::LevelsSpec spec({8, 5, 5, 5});
    const Shape shape{250, 4};
    const auto x = uniform(1000, -3.0, 3.0, 101);
    const auto w = Tensor::from(shape, uniform(1000, -1.0, 1.0, 102));
    auto grad = [&](const std::function<Tensor(const Tensor&)>& f) {
        Tensor t = Tensor::from(shape, x, true);
        backward(sum(f(t) * w));
        return std::vector<double>(t.grad().begin(), t.grad().end());
    };
    const auto g_ste = grad([&](const Tensor& t) { return fsq::quantize(t, spec); });
    const auto g_ref = grad([&](const Tensor& t) { return fsq::bound_normalized(t, spec); });
    if (g_ste != g_ref) return {false, "fsq gradient differs from bound/half_width"};
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        auto at = [&](double delta) {
            auto v = x;
            v[i] += delta;
            return fsq::bound_normalized(Tensor::from(shape, std::move(v)), spec)[i] * w[i];
        };
        const double fd = (at(h) - at(-h)) / (2.0 * h);
        worst = std::max(worst, std::abs(fd - g_ref[i]) / std::max({std::abs(fd), std::abs(g_ref[i]), 1e-12}));
    }
    if (worst > 1e-4) return {false, "fsq finite-difference error " + fmt(worst, 3)};

    const vq::VqCodebook cb(64, 4, 103);
    const auto g_vq = grad([&](const Tensor& t) { return vq::vq_quantize(t, cb).quantized; });
    const auto g_id = grad([](const Tensor& t) { return t; });
    if (g_vq != g_id) return {false, "vq gradient differs from identity"};
    double worst_vq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double fd = ((x[i] + h) * w[i] - (x[i] - h) * w[i]) / (2.0 * h);
        worst_vq = std::max(worst_vq, std::abs(fd - g_id[i]) / std::max(std::abs(fd), 1e-12));
    }
    return {worst_vq <= 1e-4, "1000 inputs bit-exact for fsq and vq, max fd error " + fmt(worst, 3) + " / " + fmt(worst_vq, 3)};
}

Outcome channel_cardinality() {
    std::vector<double> z;
    for (int i = -200000; i <= 200000; ++i) z.push_back(i * 5e-5);
    std::string counts;
    for (std::uint32_t l = 2; l <= 9; ++l) {
        const fsq::LevelsSpec spec(std::vector<std::uint32_t>{l});
        const Tensor q = fsq::quantize(Tensor::from({z.size(), 1}, z), spec);
        std::vector<double> v(q.values().begin(), q.values().end());
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        if (v.size() != l || v.front() < -1.0 || v.back() > 1.0) {
            return {false, "L=" + std::to_string(l) + " gives " + std::to_string(v.size()) + " values"};
        }
        counts += (l > 2 ? "," : "") + std::to_string(v.size());
    }
    return {true, "values per channel for L=2..9: " + counts};
}

Outcome parameter_count() {
    const auto vq_params = analysis::vq_bottleneck_parameters(4096, 512);
    const auto fsq_params = analysis::fsq_bottleneck_parameters();
    bench::AutoencoderConfig v;
    v.bottleneck = bench::BottleneckKind::Vq;
    v.vq_size = 4096;
    v.vq_dim = 512;
    v.hidden = {16};
    bench::AutoencoderConfig f = v;
    f.bottleneck = bench::BottleneckKind::Fsq;
    f.levels = {7, 5, 5, 5, 5};
    const auto model_vq = analysis::parameter_count(bench::Autoencoder(v)).bottleneck();
    const auto model_fsq = analysis::parameter_count(bench::Autoencoder(f)).bottleneck();
    return {vq_params == 2097152 && fsq_params == 0 && model_vq == 2097152 && model_fsq == 0,
            "vq " + std::to_string(model_vq) + ", fsq " + std::to_string(model_fsq)};
}

Outcome codec_checks() {
    std::mt19937_64 rng(202);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto h = static_cast<std::uint32_t>(1 + rng() % 32), w = static_cast<std::uint32_t>(1 + rng() % 32);
        const auto vocab = static_cast<std::uint32_t>(2 + rng() % 4095);
        codec::TokenGrid grid(h, w);
        std::geometric_distribution<std::uint32_t> geo(std::uniform_real_distribution<double>(0.01, 0.5)(rng));
        for (auto& t : grid.tokens) t = std::min(geo(rng), vocab - 1);
        codec::Order0Model model(vocab);
        model.fit({{grid}, {}});
        const auto sched = codec::deterministic_schedule(h, w, std::min<std::uint32_t>(1 + rng() % 16, h * w));
        const auto bs = codec::compress(grid, model, sched);
        if (!(codec::decompress(codec::decode_bitstream(codec::encode_bitstream(bs)), model) == grid)) {
            return {false, "roundtrip failed on trial " + std::to_string(trial)};
        }
        const double cost = codec::compression_cost(grid, model, sched);
        const double gap = std::abs(static_cast<double>(bs.payload.size() * 8) - cost);
        if (gap > 0.01 * cost + 32.0) return {false, "payload off by " + fmt(gap) + " bits on trial " + std::to_string(trial)};
        worst = std::max(worst, gap - 0.01 * cost);
    }
    codec::TokenGrid g(16, 16);
    for (auto& t : g.tokens) t = static_cast<std::uint32_t>(rng() % 4096);
    const double uniform_cost = codec::compression_cost(g, codec::UniformModel(4096), codec::deterministic_schedule(16, 16, 12));
    const bool exact = std::abs(uniform_cost - 3072.0) < 1e-9;
    return {exact, "100 roundtrips, largest excess over 1% " + fmt(worst) + " bits, uniform cost " + fmt(uniform_cost, 10) +
                       " bits (expected 3072)"};
}

Outcome masking_bound() {
    std::mt19937_64 rng(303);
    std::uint32_t lowest = 256;
    for (int i = 0; i < 100000; ++i) lowest = std::min(lowest, codec::cosine_mask_count(codec::sample_masking_ratio(rng), 256));
    return {lowest >= 116, "minimum masked count " + std::to_string(lowest) + " of 256 over 1e5 samples"};
}

Outcome guidance() {
    std::mt19937_64 rng(404);
    std::normal_distribution<double> n(0.0, 3.0);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> c(32), u(32), out(32), shifted_out(32), cs(32), us(32);
        for (auto& x : c) x = n(rng);
        for (auto& x : u) x = n(rng);
        codec::cfg_logits(c, u, 0.0, out);
        if (out != c) return {false, "alpha 0 changed the logits"};
        const double alpha = std::uniform_real_distribution<double>(-1.0, 5.0)(rng);
        const double shift = n(rng) * 10.0;
        for (std::size_t i = 0; i < 32; ++i) cs[i] = c[i] + shift, us[i] = u[i] + shift;
        codec::cfg_logits(c, u, alpha, out);
        codec::cfg_logits(cs, us, alpha, shifted_out);
        if (std::max_element(out.begin(), out.end()) - out.begin() !=
            std::max_element(shifted_out.begin(), shifted_out.end()) - shifted_out.begin()) {
            return {false, "argmax moved under a shared shift on trial " + std::to_string(trial)};
        }
    }
    return {true, "1000 trials"};
}

std::size_t thread_count() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* cap = std::getenv("QUANTLAB_THREADS")) n = std::min<std::size_t>(n, std::max(1, std::atoi(cap)));
    return n;
}

// Desk-budget training shared by the two sweep criteria.
bench::SweepConfig desk_sweep() {
    bench::SweepConfig c;
    c.base.steps = 3000;
    c.base.batch = 128;
    c.base.hidden = {64, 64};
    c.base.adam.lr = 3e-3;
    c.base.eval_interval = 3000;
    c.base.vq_dim = 8;
    c.seeds = {1, 2, 3};
    c.train_samples = 50000;
    c.eval_samples = 100000;
    c.train_grids = 200;
    c.eval_grids = 20;
    c.threads = thread_count();
    return c;
}

Outcome trend_reproduction() {
    auto c = desk_sweep();
    c.dataset = bench::DatasetKind::SyntheticTextures;
    c.sizes = {16, 64, 256, 1024, 4096};
    const auto t0 = std::chrono::steady_clock::now();
    const auto runs = bench::sweep(c);
    const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
    std::vector<analysis::RunSummary> summaries;
    for (const auto& r : runs) summaries.push_back(r.summary);
    const auto rep = analysis::report(summaries);
    const auto& usage = rep.series("usage", "fsq").points;
    const auto& mse = rep.series("mse", "fsq").points;
    const auto& cost = rep.series("compression_cost", "fsq").points;
    const auto& vq_usage = rep.series("usage", "vq").points;

    bool a = true, c_ok = true, d = true;
    std::string table;
    for (std::size_t i = 0; i < usage.size(); ++i) {
        a = a && usage[i].median >= 0.9;
        if (i) {
            c_ok = c_ok && mse[i].median <= mse[i - 1].median;
            d = d && cost[i].median > cost[i - 1].median;
        }
        table += "\n      |C|=" + std::to_string(usage[i].codebook_size) + ": fsq usage " + fmt(usage[i].median) +
                 ", mse " + fmt(mse[i].median) + ", cost " + fmt(cost[i].median) + " bits; vq usage " +
                 fmt(vq_usage[i].median);
    }
    const bool b = vq_usage.back().median < usage.back().median;
    const bool time_ok = minutes <= 30.0;
    std::string detail = std::string("(a) ") + (a ? "ok" : "FAIL") + " (b) " + (b ? "ok" : "FAIL") + " (c) " +
                         (c_ok ? "ok" : "FAIL") + " (d) " + (d ? "ok" : "FAIL") + ", " + std::to_string(runs.size()) +
                         " runs in " + fmt(minutes, 3) + " min on " + std::to_string(c.threads) + " thread(s)" + table;
    return {a && b && c_ok && d && time_ok, detail};
}

Outcome splitting_ablation() {
    auto c = desk_sweep();
    c.dataset = bench::DatasetKind::GaussianMixture;
    c.sizes = {1024};
    c.quantizers = {bench::BottleneckKind::Vq};
    auto with_split = c;
    with_split.base.split_interval = 200;
    auto median_usage = [](const bench::SweepConfig& cfg) {
        std::vector<double> u;
        for (const auto& r : bench::sweep(cfg)) u.push_back(r.summary.usage);
        return analysis::median(u);
    };
    const double off = median_usage(c);
    const double on = median_usage(with_split);
    return {on >= 2.0 * off, "median usage " + fmt(on) + " with splitting vs " + fmt(off) + " without (" +
                                 fmt(on / off, 3) + "x)"};
}

} // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"bijection exactness", bijection},
        {"codebook-size approximation", size_approximation},
        {"straight-through gradients", ste_correctness},
        {"channel cardinality", channel_cardinality},
        {"bottleneck parameter count", parameter_count},
        {"codec roundtrip and cost", codec_checks},
        {"masking ratio bound", masking_bound},
        {"guidance logits", guidance},
        {"directional trends on textures", trend_reproduction},
        {"codebook splitting ablation", splitting_ablation}};
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.passed;
        std::printf("%s  %2zu %-32s %s\n", o.passed ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
    return failures == 0 ? 0 : 1;
}
