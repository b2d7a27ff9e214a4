#pragma once

// Fast invariant suite behind `quantlab selfcheck`.

#include "quantlab/codec.hpp"
#include "quantlab/fsq.hpp"
#include "quantlab/tensor.hpp"
#include "quantlab/token_models.hpp"
#include "quantlab/vq.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace quantlab::selfcheck {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

namespace detail {

inline std::vector<double> uniform_values(std::size_t n, double lo, double hi, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

inline std::vector<double> grad_of_sum(const std::function<Tensor(const Tensor&)>& f, const Shape& shape,
                                       const std::vector<double>& x) {
    Tensor t = Tensor::from(shape, x, true);
    backward(sum(f(t)));
    return {t.grad().begin(), t.grad().end()};
}

inline CheckResult bijection() {
    CheckResult r;
    std::size_t codes = 0;
    const std::vector<std::vector<std::uint32_t>> specs{{8, 6, 5},    {8, 5, 5, 5}, {7, 5, 5, 5, 5}, {8, 8, 8, 6, 5},
                                                        {8, 8, 8, 5, 5, 5}, {5, 3}, {8, 8}, {8, 8, 8}, {8, 8, 6, 5}, {7, 5, 5, 5}};
    for (const auto& levels : specs) {
        fsq::LevelsSpec spec(levels);
        for (std::uint32_t i = 0; i < spec.codebook_size(); ++i) {
            if (fsq::codes_to_indexes(fsq::indexes_to_codes(i, spec).values, spec) != i) {
                r.detail = spec.to_string() + " fails at index " + std::to_string(i);
                return r;
            }
        }
        codes += spec.codebook_size();
    }
    r.passed = true;
    r.detail = std::to_string(codes) + " codes";
    return r;
}

inline CheckResult fsq_gradients() {
    CheckResult r;
    fsq::LevelsSpec spec({8, 5, 5, 5});
    const auto x = uniform_values(1000, -3.0, 3.0, 7);
    const Shape shape{250, 4};
    const auto ste = grad_of_sum([&](const Tensor& t) { return fsq::quantize(t, spec); }, shape, x);
    const auto ref = grad_of_sum([&](const Tensor& t) { return fsq::bound_normalized(t, spec); }, shape, x);
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (ste[i] != ref[i]) {
            r.detail = "STE gradient differs at entry " + std::to_string(i);
            return r;
        }
    }
    auto shifted = [&](double delta) {
        std::vector<double> v(x);
        for (auto& e : v) e += delta;
        return fsq::bound_normalized(Tensor::from(shape, std::move(v)), spec);
    };
    const Tensor up = shifted(h), down = shifted(-h);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double fd = (up[i] - down[i]) / (2.0 * h);
        worst = std::max(worst, std::abs(fd - ref[i]) / std::max(std::abs(fd), std::abs(ref[i])));
    }
    r.passed = worst <= 1e-4;
    char buf[64];
    std::snprintf(buf, sizeof buf, "max relative finite-difference error %.2e", worst);
    r.detail = buf;
    return r;
}

inline CheckResult vq_gradients() {
    CheckResult r;
    vq::VqCodebook cb(64, 4, 3);
    const auto x = uniform_values(1000, -1.0, 1.0, 11);
    const auto g = grad_of_sum([&](const Tensor& t) { return vq::vq_quantize(t, cb).quantized; }, {250, 4}, x);
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (g[i] != 1.0) {
            r.detail = "gradient " + std::to_string(g[i]) + " at entry " + std::to_string(i);
            return r;
        }
    }
    r.passed = true;
    r.detail = "identity on 1000 entries";
    return r;
}

inline CheckResult codec_roundtrip() {
    CheckResult r;
    std::mt19937_64 rng(5);
    std::size_t bits = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto h = static_cast<std::uint32_t>(1 + rng() % 16);
        const auto w = static_cast<std::uint32_t>(1 + rng() % 16);
        const auto vocab = static_cast<std::uint32_t>(2 + rng() % 1024);
        std::vector<std::uint32_t> tokens(std::size_t{h} * w);
        // Skewed tokens so the fitted model is informative.
        std::geometric_distribution<std::uint32_t> geo(0.05);
        for (auto& t : tokens) t = std::min(geo(rng), vocab - 1);
        codec::TokenGrid grid(h, w, std::move(tokens));
        codec::Order0Model model(vocab, 0);
        model.fit({{grid}, {}});
        const auto sched = codec::deterministic_schedule(h, w, std::min<std::uint32_t>(8, h * w));
        const auto bs = codec::compress(grid, model, sched);
        const auto back = codec::decompress(codec::decode_bitstream(codec::encode_bitstream(bs)), model);
        if (!(back == grid)) {
            r.detail = "mismatch on trial " + std::to_string(trial);
            return r;
        }
        const double ideal = codec::compression_cost(grid, model, sched);
        if (static_cast<double>(bs.payload_bits()) > ideal * 1.01 + 32.0) {
            r.detail = "payload " + std::to_string(bs.payload_bits()) + " bits exceeds ideal " + std::to_string(ideal);
            return r;
        }
        bits += bs.payload_bits();
    }
    r.passed = true;
    r.detail = "20 grids, " + std::to_string(bits) + " payload bits";
    return r;
}

inline CheckResult uniform_cost() {
    CheckResult r;
    codec::UniformModel model(4096);
    codec::TokenGrid grid(16, 16, std::vector<std::uint32_t>(256, 17));
    const double cost = codec::compression_cost(grid, model, codec::deterministic_schedule(16, 16, 8));
    r.passed = std::abs(cost - 256.0 * 12.0) <= 1e-9 * 3072.0;
    r.detail = std::to_string(cost) + " bits";
    return r;
}

inline CheckResult masking_bound() {
    CheckResult r;
    std::mt19937_64 rng(9);
    std::uint32_t lowest = 256;
    for (int i = 0; i < 100000; ++i) lowest = std::min(lowest, codec::cosine_mask_count(codec::sample_masking_ratio(rng), 256));
    r.passed = lowest >= 116;
    r.detail = "minimum masked count " + std::to_string(lowest) + " of 256";
    return r;
}

inline CheckResult guidance_identity() {
    CheckResult r;
    const auto c = uniform_values(64, -5.0, 5.0, 1);
    const auto u = uniform_values(64, -5.0, 5.0, 2);
    std::vector<double> out(64);
    codec::cfg_logits(c, u, 0.0, out);
    r.passed = out == c;
    r.detail = r.passed ? "exact" : "differs";
    return r;
}

} // namespace detail

inline std::vector<CheckResult> run_all() {
    const std::vector<std::pair<std::string, std::function<CheckResult()>>> checks{
        {"fsq bijection over tabulated levels", detail::bijection},
        {"fsq straight-through gradient", detail::fsq_gradients},
        {"vq straight-through gradient", detail::vq_gradients},
        {"codec roundtrip", detail::codec_roundtrip},
        {"uniform model cost", detail::uniform_cost},
        {"masking ratio lower bound", detail::masking_bound},
        {"guidance at alpha 0", detail::guidance_identity}};
    std::vector<CheckResult> out;
    for (const auto& [name, check] : checks) {
        const auto t0 = std::chrono::steady_clock::now();
        CheckResult r;
        try {
            r = check();
        } catch (const std::exception& e) {
            r.passed = false;
            r.detail = std::string("exception: ") + e.what();
        }
        r.name = name;
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace quantlab::selfcheck
