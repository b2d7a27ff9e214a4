#include "quantlab/codec.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <set>

using namespace quantlab;
using namespace quantlab::codec;

namespace {

TokenGrid random_grid(std::uint32_t h, std::uint32_t w, std::uint32_t vocab, std::mt19937_64& rng) {
    TokenGrid g(h, w);
    for (auto& t : g.tokens) t = static_cast<std::uint32_t>(rng() % vocab);
    return g;
}

// Puts `boost` extra logit on the true token of a fixed grid.
class PeekingModel final : public TokenModel {
public:
    PeekingModel(TokenGrid truth, std::uint32_t vocab, double boost)
        : truth_(std::move(truth)), vocab_(vocab), boost_(boost) {}
    std::uint32_t vocab_size() const override { return vocab_; }
    void predict(const TokenGrid&, std::span<const std::uint8_t>, std::span<const std::uint32_t> positions,
                 std::optional<std::uint32_t>, std::span<double> logits) const override {
        std::fill(logits.begin(), logits.end(), 0.0);
        for (std::size_t i = 0; i < positions.size(); ++i) logits[i * vocab_ + truth_.tokens[positions[i]]] = boost_;
    }

private:
    TokenGrid truth_;
    std::uint32_t vocab_;
    double boost_;
};

// Logits that depend on the revealed tokens and the queried position.
class ContextModel final : public TokenModel {
public:
    explicit ContextModel(std::uint32_t vocab) : vocab_(vocab) {}
    std::uint32_t vocab_size() const override { return vocab_; }
    void predict(const TokenGrid& grid, std::span<const std::uint8_t> revealed, std::span<const std::uint32_t> positions,
                 std::optional<std::uint32_t>, std::span<double> logits) const override {
        std::uint64_t h = 1469598103934665603ull;
        for (std::size_t p = 0; p < grid.size(); ++p) {
            if (revealed[p]) h = (h ^ (grid.tokens[p] + 31 * p)) * 1099511628211ull;
        }
        for (std::size_t i = 0; i < positions.size(); ++i) {
            std::mt19937_64 rng(h ^ positions[i]);
            std::normal_distribution<double> n(0.0, 2.0);
            for (std::uint32_t k = 0; k < vocab_; ++k) logits[i * vocab_ + k] = n(rng);
        }
    }

private:
    std::uint32_t vocab_;
};

// One fixed logit table per position.
class PositionalModel final : public TokenModel {
public:
    PositionalModel(std::uint32_t n, std::uint32_t vocab, std::uint64_t seed) : vocab_(vocab), table_(n * vocab) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (auto& v : table_) v = normal(rng);
    }
    std::uint32_t vocab_size() const override { return vocab_; }
    std::uint32_t argmax(std::uint32_t p) const {
        auto row = table_.begin() + std::size_t{p} * vocab_;
        return static_cast<std::uint32_t>(std::max_element(row, row + vocab_) - row);
    }
    void predict(const TokenGrid&, std::span<const std::uint8_t>, std::span<const std::uint32_t> positions,
                 std::optional<std::uint32_t>, std::span<double> logits) const override {
        for (std::size_t i = 0; i < positions.size(); ++i) {
            std::copy_n(table_.begin() + std::size_t{positions[i]} * vocab_, vocab_, logits.begin() + i * vocab_);
        }
    }

private:
    std::uint32_t vocab_;
    std::vector<double> table_;
};

} // namespace

TEST(CosineMaskCount, Endpoints) {
    EXPECT_EQ(cosine_mask_count(1.0, 256), 256u);
    EXPECT_EQ(cosine_mask_count(0.0, 256), 0u);
    EXPECT_THROW((void)cosine_mask_count(1.5, 256), DomainError);
    EXPECT_THROW((void)cosine_mask_count(0.5, 0), DomainError);
}

TEST(CosineMaskCount, MinimumRatioGivesFortyFivePercent) {
    EXPECT_NEAR(kMinMaskRatio, 0.2971520, 1e-7);
    EXPECT_NEAR(1.0 - 2.0 / std::numbers::pi * std::acos(0.45), kMinMaskRatio, 1e-7);
    EXPECT_EQ(cosine_mask_count(kMinMaskRatio, 256), 116u);
}

TEST(CosineMaskCount, NondecreasingInRatio) {
    std::uint32_t prev = 0;
    for (int i = 0; i <= 10000; ++i) {
        const auto m = cosine_mask_count(i / 10000.0, 256);
        EXPECT_GE(m, prev);
        prev = m;
    }
}

TEST(MaskingRatio, SupportMeanAndBound) {
    std::mt19937_64 rng(5);
    double lo = 1.0, hi = 0.0, total = 0.0;
    for (int i = 0; i < 100000; ++i) {
        const double r = sample_masking_ratio(rng);
        lo = std::min(lo, r);
        hi = std::max(hi, r);
        total += r;
        ASSERT_GE(cosine_mask_count(r, 256), 116u);
    }
    EXPECT_GE(lo, kMinMaskRatio);
    EXPECT_LE(hi, 1.0);
    EXPECT_NEAR(total / 100000, (kMinMaskRatio + 1.0) / 2.0, 0.01);
}

TEST(CfgLogits, Examples) {
    const Tensor lc = Tensor::from({3}, {2.0, -1.0, 0.5});
    const Tensor ln = Tensor::from({3}, {1.0, 0.0, 0.5});
    EXPECT_EQ(cfg_logits(lc, ln, 0.0).values()[0], 2.0);
    EXPECT_EQ(cfg_logits(lc, ln, 1.0)[0], 3.0);
    const Tensor back = cfg_logits(lc, ln, -1.0);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(back[i], ln[i]);
    EXPECT_THROW((void)cfg_logits(lc, Tensor::from({2}, {1.0, 2.0}), 1.0), ShapeError);
}

TEST(CfgLogits, AffineInAlphaAndArgmaxInvariantWhenEqual) {
    const std::vector<double> lc{0.3, 1.7, -0.2}, ln{1.0, 0.1, 0.4};
    std::vector<double> a(3), b(3), c(3);
    cfg_logits(lc, ln, 0.5, a);
    cfg_logits(lc, ln, 1.5, b);
    cfg_logits(lc, ln, 2.5, c);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(b[i] - a[i], c[i] - b[i], 1e-15);
    cfg_logits(lc, lc, 7.0, a);
    EXPECT_EQ(std::max_element(a.begin(), a.end()) - a.begin(), 1);
}

TEST(Schedule, SingleGroup) {
    const auto s = deterministic_schedule(4, 5, 1);
    ASSERT_EQ(s.groups.size(), 1u);
    EXPECT_EQ(s.groups[0].size(), 20u);
}

TEST(Schedule, PartitionAndCosineSizes) {
    for (std::uint32_t n : {2u, 8u, 12u, 64u}) {
        const auto s = deterministic_schedule(8, 8, n);
        ASSERT_EQ(s.groups.size(), n);
        std::set<std::uint32_t> seen;
        std::size_t total = 0;
        for (const auto& g : s.groups) {
            EXPECT_FALSE(g.empty());
            total += g.size();
            seen.insert(g.begin(), g.end());
        }
        EXPECT_EQ(total, 64u);
        EXPECT_EQ(seen.size(), 64u);
        EXPECT_EQ(*seen.rbegin(), 63u);
    }
    // Eight groups over 64 tokens: masked counts ceil(cos(pi/2 k/8) 64).
    const auto s = deterministic_schedule(8, 8, 8);
    std::uint32_t masked = 64;
    for (std::uint32_t k = 1; k <= 8; ++k) {
        const auto next = static_cast<std::uint32_t>(k == 8 ? 0 : std::ceil(std::cos(std::numbers::pi / 2 * k / 8) * 64));
        EXPECT_EQ(s.groups[k - 1].size(), masked - next) << k;
        masked = next;
    }
}

TEST(Schedule, DeterministicAndValidated) {
    const auto a = deterministic_schedule(16, 16, 12);
    const auto b = deterministic_schedule(16, 16, 12);
    EXPECT_EQ(a.groups, b.groups);
    EXPECT_NE(a.groups, deterministic_schedule(16, 16, 11).groups);
    EXPECT_THROW((void)deterministic_schedule(2, 2, 0), DomainError);
    EXPECT_THROW((void)deterministic_schedule(2, 2, 5), DomainError);
    EXPECT_THROW((void)deterministic_schedule(0, 2, 1), DomainError);
    const auto from_id = schedule_from_id(a.id(), a.seq_len());
    EXPECT_EQ(from_id.groups, a.groups);
    EXPECT_THROW((void)schedule_from_id(a.id(), 250), CodecError);
}

TEST(TokenGrid, Validation) {
    EXPECT_THROW(TokenGrid(0, 3), DomainError);
    EXPECT_THROW(TokenGrid(2, 2, {1, 2, 3}), DomainError);
    TokenGrid g(1, 2, {0, 9});
    EXPECT_THROW(g.check_range(9), DomainError);
    EXPECT_NO_THROW(g.check_range(10));
    EXPECT_EQ(decode_token_grid(encode_token_grid(g)), g);
}

TEST(Codec, UniformFourSymbolsEightTokens) {
    const TokenGrid g(2, 4, {0, 1, 2, 3, 3, 2, 1, 0});
    const UniformModel model(4);
    const auto sched = deterministic_schedule(2, 4, 3);
    EXPECT_DOUBLE_EQ(compression_cost(g, model, sched), 16.0);
    const auto bs = compress(g, model, sched);
    EXPECT_LE(bs.payload.size() * 8, 48u);
    EXPECT_EQ(decompress(bs, model, sched), g);
}

TEST(Codec, DeterministicModelPayloadIsTiny) {
    std::mt19937_64 rng(6);
    for (std::uint32_t side : {4u, 16u, 32u}) {
        const auto g = random_grid(side, side, 64, rng);
        const PeekingModel model(g, 64, 1e4);
        const auto sched = deterministic_schedule(side, side, 8);
        const auto bs = compress(g, model, sched);
        // Each token costs log2(2^16 / (2^16 - 63)) bits after frequency quantization.
        EXPECT_LE(bs.payload.size() * 8, 40u + side * side * 0.0014) << side;
        EXPECT_EQ(decompress(bs, model, sched), g);
    }
}

TEST(Codec, UniformCostIsExact) {
    std::mt19937_64 rng(7);
    const auto g = random_grid(16, 16, 4096, rng);
    EXPECT_NEAR(compression_cost(g, UniformModel(4096), deterministic_schedule(16, 16, 12)), 256 * 12.0, 1e-9);
}

TEST(Codec, BoostingTheTrueSymbolLowersCost) {
    std::mt19937_64 rng(8);
    const auto g = random_grid(8, 8, 16, rng);
    const auto sched = deterministic_schedule(8, 8, 8);
    const double base = compression_cost(g, UniformModel(16), sched);
    const double doubled = compression_cost(g, PeekingModel(g, 16, std::log(2.0)), sched);
    EXPECT_LT(doubled, base);
    // p = 2/17 per token.
    EXPECT_NEAR(doubled, -64 * std::log2(2.0 / 17.0), 1e-9);
}

TEST(Codec, RoundtripAndCostBoundOnRandomInstances) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        const std::uint32_t h = 1 + rng() % 12, w = 1 + rng() % 12;
        const std::uint32_t vocab = 2 + rng() % 200;
        const std::uint32_t groups = 1 + rng() % (h * w);
        const auto g = random_grid(h, w, vocab, rng);
        const ContextModel model(vocab);
        const auto sched = deterministic_schedule(h, w, groups);
        const auto bs = compress(g, model, sched);
        ASSERT_EQ(decompress(bs, model, sched), g) << trial;
        ASSERT_EQ(decompress(decode_bitstream(encode_bitstream(bs)), model), g) << trial;
        const double cost = compression_cost(g, model, sched);
        EXPECT_LE(std::abs(bs.payload.size() * 8.0 - cost), 0.01 * cost + 32.0) << trial;
    }
}

TEST(Codec, ZeroProbabilityNamesPosition) {
    const TokenGrid g(1, 3, {0, 1, 2});
    const PeekingModel model(g, 3, -std::numeric_limits<double>::infinity());
    const auto sched = deterministic_schedule(1, 3, 1);
    try {
        (void)compression_cost(g, model, sched);
        FAIL() << "expected CodecError";
    } catch (const CodecError& e) {
        EXPECT_NE(std::string(e.what()).find("position"), std::string::npos);
    }
    EXPECT_THROW((void)compress(g, model, sched), CodecError);
}

TEST(Codec, GeometryAndHeaderMismatches) {
    std::mt19937_64 rng(10);
    const auto g = random_grid(4, 4, 8, rng);
    const UniformModel model(8);
    EXPECT_THROW((void)compress(g, model, deterministic_schedule(2, 8, 4)), CodecError);
    const auto bs = compress(g, model, deterministic_schedule(4, 4, 4));
    EXPECT_THROW((void)decompress(bs, UniformModel(9), deterministic_schedule(4, 4, 4)), CodecError);
    EXPECT_THROW((void)decompress(bs, model, deterministic_schedule(4, 4, 5)), CodecError);
}

TEST(Codec, TruncatedOrCorruptStreamsAreRejected) {
    std::mt19937_64 rng(11);
    const auto g = random_grid(8, 8, 256, rng);
    const UniformModel model(256);
    const auto sched = deterministic_schedule(8, 8, 8);
    const auto bytes = encode_bitstream(compress(g, model, sched));
    for (std::size_t len = 17; len < bytes.size(); ++len) {
        auto cut = bytes;
        cut.resize(len);
        EXPECT_THROW((void)decompress(decode_bitstream(cut), model), CodecError) << len;
    }
    // Every payload is a valid uniform-model stream, so a flipped bit decodes
    // to some other grid rather than failing.
    auto flipped = bytes;
    flipped[20] ^= 0x40;
    EXPECT_FALSE(decompress(decode_bitstream(flipped), model) == g);
    auto header = bytes;
    header[4] = 9;
    EXPECT_THROW((void)decode_bitstream(header), CodecError);
    EXPECT_THROW((void)decode_bitstream(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 7)), CodecError);
}

TEST(Bitstream, HeaderLayout) {
    const Bitstream bs{64, 1000, (8u << 16) | 8u, {1, 2, 3}};
    const auto bytes = encode_bitstream(bs);
    ASSERT_EQ(bytes.size(), 4u + 1u + 12u + 3u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FSQC");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5], 64);
    EXPECT_EQ(bytes[9], 1000 & 0xFF);
    EXPECT_EQ(bytes[10], 1000 >> 8);
    EXPECT_EQ(bytes[13], 8);
    EXPECT_EQ(bytes[15], 8);
    const auto back = decode_bitstream(bytes);
    EXPECT_EQ(back.token_count, 64u);
    EXPECT_EQ(back.vocab_size, 1000u);
    EXPECT_EQ(back.schedule_id, bs.schedule_id);
    EXPECT_EQ(back.payload, bs.payload);
}

TEST(MaskedSample, OneStepRevealsEverything) {
    const PositionalModel model(16, 5, 1);
    std::mt19937_64 rng(1);
    const auto r = masked_sample(model, deterministic_schedule(4, 4, 1), {.cfg_alpha = 0.0, .steps = 1, .temperature = 1.0, .label = std::nullopt}, rng);
    for (auto s : r.reveal_step) EXPECT_EQ(s, 0u);
}

TEST(MaskedSample, EveryPositionRevealedOnceFollowingCosine) {
    const PositionalModel model(256, 7, 2);
    std::mt19937_64 rng(2);
    const auto r = masked_sample(model, deterministic_schedule(16, 16, 12), {}, rng);
    std::vector<std::uint32_t> per_step(12, 0);
    for (auto s : r.reveal_step) {
        ASSERT_LT(s, 12u);
        ++per_step[s];
    }
    std::uint32_t masked = 256;
    for (std::uint32_t t = 0; t < 12; ++t) {
        const std::uint32_t next = t == 11 ? 0 : cosine_mask_count(1.0 - (t + 1) / 12.0, 256);
        EXPECT_EQ(per_step[t], masked - next) << t;
        masked = next;
    }
}

TEST(MaskedSample, ZeroTemperatureGivesArgmaxGrid) {
    const PositionalModel model(64, 9, 3);
    std::mt19937_64 rng(3);
    SampleOptions opts;
    opts.temperature = 0.0;
    const auto r = masked_sample(model, deterministic_schedule(8, 8, 1), opts, rng);
    for (std::uint32_t p = 0; p < 64; ++p) EXPECT_EQ(r.grid.tokens[p], model.argmax(p));
}
