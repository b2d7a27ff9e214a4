#pragma once

// Token grids, masking schedules, classifier-free guidance and lossless
// coding of token grids under a predictive model.
//
// A grid is coded group by group along a fixed, input-independent schedule.
// Every position of a group is predicted from the tokens revealed by earlier
// groups only, so the decoder can rebuild exactly the same distributions.
// The schedule's groups shrink along the cosine masking curve and positions
// are assigned by a permutation seeded from the grid geometry.

#include "quantlab/error.hpp"
#include "quantlab/io.hpp"
#include "quantlab/range_coder.hpp"
#include "quantlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace quantlab::codec {

struct TokenGrid {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<std::uint32_t> tokens;

    TokenGrid() = default;
    TokenGrid(std::uint32_t h, std::uint32_t w, std::vector<std::uint32_t> t)
        : height(h), width(w), tokens(std::move(t)) {
        if (h == 0 || w == 0) throw DomainError("token grid: height and width must be positive");
        if (tokens.size() != static_cast<std::size_t>(h) * w) {
            throw DomainError("token grid: " + std::to_string(tokens.size()) + " tokens for a " + std::to_string(h) +
                              "x" + std::to_string(w) + " grid");
        }
    }
    TokenGrid(std::uint32_t h, std::uint32_t w) : TokenGrid(h, w, std::vector<std::uint32_t>(std::size_t{h} * w, 0)) {}

    std::size_t size() const { return tokens.size(); }
    std::uint32_t at(std::uint32_t row, std::uint32_t col) const { return tokens[std::size_t{row} * width + col]; }

    void check_range(std::uint32_t vocab) const {
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i] >= vocab) {
                throw DomainError("token grid: token " + std::to_string(tokens[i]) + " at position " +
                                  std::to_string(i) + " is outside a codebook of size " + std::to_string(vocab));
            }
        }
    }

    bool operator==(const TokenGrid&) const = default;
};

// ---- masking ratios ----------------------------------------------------------

/// Lower bound on the training masking ratio: cos(pi/2 (1 - r_min)) = 0.45.
inline const double kMinMaskRatio = 1.0 - std::acos(0.45) * 2.0 / std::numbers::pi;

/// Number of masked tokens, ceil(cos(pi/2 (1 - r)) S). Products within 1e-9
/// of an integer are snapped first, so r = 0 gives 0 rather than ceil(6e-17 S).
inline std::uint32_t cosine_mask_count(double r, std::uint32_t seq_len) {
    if (!(r >= 0.0 && r <= 1.0)) throw DomainError("cosine_mask_count: ratio must lie in [0, 1]");
    if (seq_len == 0) throw DomainError("cosine_mask_count: sequence length must be positive");
    double x = std::cos(std::numbers::pi / 2.0 * (1.0 - r)) * seq_len;
    const double nearest = std::round(x);
    if (std::abs(x - nearest) <= 1e-9 * seq_len) x = nearest;
    return static_cast<std::uint32_t>(std::clamp(std::ceil(x), 0.0, static_cast<double>(seq_len)));
}

/// r ~ U[r_min, 1], so every sampled mask hides more than 45% of the tokens.
template <class Rng>
double sample_masking_ratio(Rng& rng) {
    std::uniform_real_distribution<double> uni(kMinMaskRatio, 1.0);
    return uni(rng);
}

// ---- classifier-free guidance ------------------------------------------------

/// l_c + alpha (l_c - l_null).
inline Tensor cfg_logits(const Tensor& conditional, const Tensor& unconditional, double alpha) {
    if (conditional.shape() != unconditional.shape()) {
        throw ShapeError("cfg_logits: shapes " + shape_string(conditional.shape()) + " and " +
                         shape_string(unconditional.shape()) + " differ");
    }
    return conditional + (conditional - unconditional) * alpha;
}

inline void cfg_logits(std::span<const double> conditional, std::span<const double> unconditional, double alpha,
                       std::span<double> out) {
    if (conditional.size() != unconditional.size() || out.size() != conditional.size()) {
        throw ShapeError("cfg_logits: logit vectors differ in length");
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = conditional[i] + alpha * (conditional[i] - unconditional[i]);
    }
}

// ---- schedules ---------------------------------------------------------------

struct MaskSchedule {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::uint32_t n_groups = 0;
    /// Ordered partition of {0, ..., S-1} into reveal groups.
    std::vector<std::vector<std::uint32_t>> groups;
    double min_ratio = kMinMaskRatio;

    std::uint32_t seq_len() const { return height * width; }

    /// Compact identifier stored in bitstreams: width in the high 16 bits,
    /// group count in the low 16 bits. Together with the token count it
    /// reconstructs the schedule.
    std::uint32_t id() const { return (width << 16) | n_groups; }
};

namespace detail {

inline std::uint64_t schedule_seed(std::uint32_t h, std::uint32_t w, std::uint32_t n) {
    // splitmix64 over the packed geometry
    std::uint64_t x = (std::uint64_t{h} << 40) ^ (std::uint64_t{w} << 20) ^ n;
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

} // namespace detail

/// Fixed reveal order: group k uncovers the drop in cosine_mask_count between
/// ratios 1 - (k-1)/n and 1 - k/n (at least one position per group).
inline MaskSchedule deterministic_schedule(std::uint32_t height, std::uint32_t width, std::uint32_t n_groups) {
    if (height == 0 || width == 0) throw DomainError("schedule: grid must be non-empty");
    const std::uint32_t s = height * width;
    if (n_groups == 0 || n_groups > s) {
        throw DomainError("schedule: group count must lie in [1, " + std::to_string(s) + "]");
    }
    if (width > 0xFFFF || n_groups > 0xFFFF) throw DomainError("schedule: width and group count must fit 16 bits");

    std::vector<std::uint32_t> masked(n_groups + 1);
    masked[0] = s;
    for (std::uint32_t k = 1; k <= n_groups; ++k) {
        std::uint32_t m =
            k == n_groups ? 0 : cosine_mask_count(1.0 - static_cast<double>(k) / n_groups, s);
        m = std::min(m, masked[k - 1] - 1);      // every group reveals something
        m = std::max(m, n_groups - k);           // leave one per remaining group
        masked[k] = m;
    }

    std::vector<std::uint32_t> perm(s);
    std::iota(perm.begin(), perm.end(), 0u);
    std::mt19937_64 rng(detail::schedule_seed(height, width, n_groups));
    for (std::uint32_t i = s - 1; i > 0; --i) {
        // explicit Fisher-Yates: std::shuffle's draw pattern is implementation-defined
        const std::uint32_t j = static_cast<std::uint32_t>(rng() % (std::uint64_t{i} + 1));
        std::swap(perm[i], perm[j]);
    }

    MaskSchedule sched{height, width, n_groups, {}, kMinMaskRatio};
    for (std::uint32_t k = 1; k <= n_groups; ++k) {
        auto first = perm.begin() + (s - masked[k - 1]);
        auto last = perm.begin() + (s - masked[k]);
        sched.groups.emplace_back(first, last);
    }
    return sched;
}

inline MaskSchedule schedule_from_id(std::uint32_t id, std::uint32_t token_count) {
    const std::uint32_t width = id >> 16;
    const std::uint32_t n_groups = id & 0xFFFF;
    if (width == 0 || token_count % width != 0) throw CodecError("bitstream: schedule id does not match token count");
    try {
        return deterministic_schedule(token_count / width, width, n_groups);
    } catch (const DomainError& e) {
        throw CodecError(std::string("bitstream: invalid schedule: ") + e.what());
    }
}

// ---- token models ------------------------------------------------------------

/// Predicts a distribution over codebook entries for masked positions.
class TokenModel {
public:
    virtual ~TokenModel() = default;

    virtual std::uint32_t vocab_size() const = 0;
    /// Number of class labels accepted by predict(); 0 for unconditional models.
    virtual std::uint32_t num_classes() const { return 0; }

    /// Writes positions.size() rows of vocab_size() logits. Only tokens with
    /// revealed[p] != 0 may influence the result. `label` is a class in
    /// [0, num_classes()) or nullopt for the unconditional (null class) query.
    virtual void predict(const TokenGrid& grid, std::span<const std::uint8_t> revealed,
                         std::span<const std::uint32_t> positions, std::optional<std::uint32_t> label,
                         std::span<double> logits) const = 0;
};

/// Equal probability for every symbol.
class UniformModel final : public TokenModel {
public:
    explicit UniformModel(std::uint32_t vocab) : vocab_(vocab) {
        if (vocab == 0) throw DomainError("uniform model: vocabulary must be non-empty");
    }
    std::uint32_t vocab_size() const override { return vocab_; }
    void predict(const TokenGrid&, std::span<const std::uint8_t>, std::span<const std::uint32_t>,
                 std::optional<std::uint32_t>, std::span<double> logits) const override {
        std::fill(logits.begin(), logits.end(), 0.0);
    }

private:
    std::uint32_t vocab_;
};

/// Softmax of each row, in place.
inline void softmax_rows(std::span<double> values, std::size_t k) {
    for (std::size_t r = 0; r < values.size() / k; ++r) {
        auto row = values.subspan(r * k, k);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (auto& v : row) z += (v = std::exp(v - mx));
        for (auto& v : row) v /= z;
    }
}

// ---- bitstream -----------------------------------------------------------------

inline constexpr std::uint8_t kBitstreamVersion = 1;

struct Bitstream {
    std::uint32_t token_count = 0;
    std::uint32_t vocab_size = 0;
    std::uint32_t schedule_id = 0;
    std::vector<std::uint8_t> payload;

    std::size_t payload_bits() const { return payload.size() * 8; }
};

/// "FSQC", version, u32 token count, u32 |C|, u32 schedule id, payload.
inline io::Bytes encode_bitstream(const Bitstream& bs) {
    io::ByteWriter w;
    w.magic("FSQC");
    w.u8(kBitstreamVersion);
    w.u32(bs.token_count);
    w.u32(bs.vocab_size);
    w.u32(bs.schedule_id);
    w.bytes(bs.payload);
    return w.take();
}

inline Bitstream decode_bitstream(std::span<const std::uint8_t> data) {
    try {
        io::ByteReader r(data, "bitstream");
        r.expect_magic("FSQC");
        if (r.u8() != kBitstreamVersion) throw CodecError("bitstream: unsupported version");
        Bitstream bs;
        bs.token_count = r.u32();
        bs.vocab_size = r.u32();
        bs.schedule_id = r.u32();
        auto rest = r.rest();
        bs.payload.assign(rest.begin(), rest.end());
        return bs;
    } catch (const IoError& e) {
        throw CodecError(e.what());
    }
}

/// TokenGrid file: u32 H, u32 W, u32 tokens[H*W].
inline io::Bytes encode_token_grid(const TokenGrid& grid) {
    io::ByteWriter w;
    w.u32(grid.height);
    w.u32(grid.width);
    for (auto t : grid.tokens) w.u32(t);
    return w.take();
}

inline TokenGrid decode_token_grid(std::span<const std::uint8_t> data) {
    io::ByteReader r(data, "token grid");
    const auto h = r.u32();
    const auto w = r.u32();
    if (h == 0 || w == 0 || std::uint64_t{h} * w * 4 != r.remaining()) {
        throw IoError("token grid: header does not match payload size");
    }
    std::vector<std::uint32_t> tokens(std::size_t{h} * w);
    for (auto& t : tokens) t = r.u32();
    return TokenGrid(h, w, std::move(tokens));
}

// ---- coding ----------------------------------------------------------------------

namespace detail {

inline void check_model(const TokenModel& model, const MaskSchedule& sched, const TokenGrid& grid) {
    if (grid.height != sched.height || grid.width != sched.width) {
        throw CodecError("codec: grid geometry does not match the schedule");
    }
    if (model.vocab_size() == 0) throw CodecError("codec: model has an empty vocabulary");
}

// Runs the schedule, calling visit(position, probabilities) for each token in
// coding order. `working` receives tokens as they are revealed.
template <class Visit>
void walk_schedule(const TokenModel& model, const MaskSchedule& sched, TokenGrid& working, Visit&& visit) {
    const std::uint32_t k = model.vocab_size();
    std::vector<std::uint8_t> revealed(working.size(), 0);
    std::vector<double> probs;
    for (const auto& group : sched.groups) {
        probs.assign(group.size() * k, 0.0);
        model.predict(working, revealed, group, std::nullopt, probs);
        softmax_rows(probs, k);
        for (std::size_t i = 0; i < group.size(); ++i) {
            visit(group[i], std::span<const double>(probs).subspan(i * k, k));
        }
        for (auto p : group) revealed[p] = 1;
    }
}

} // namespace detail

/// Sum over the schedule of -log2 p(token | revealed), in bits.
inline double compression_cost(const TokenGrid& grid, const TokenModel& model, const MaskSchedule& sched) {
    detail::check_model(model, sched, grid);
    grid.check_range(model.vocab_size());
    TokenGrid working(grid.height, grid.width);
    double bits = 0.0;
    detail::walk_schedule(model, sched, working, [&](std::uint32_t pos, std::span<const double> p) {
        const double prob = p[grid.tokens[pos]];
        if (!(prob > 0.0)) throw CodecError("codec: zero probability for the token at position " + std::to_string(pos));
        bits -= std::log2(prob);
        working.tokens[pos] = grid.tokens[pos];
    });
    return bits;
}

inline Bitstream compress(const TokenGrid& grid, const TokenModel& model, const MaskSchedule& sched) {
    detail::check_model(model, sched, grid);
    grid.check_range(model.vocab_size());
    TokenGrid working(grid.height, grid.width);
    rc::Encoder enc;
    detail::walk_schedule(model, sched, working, [&](std::uint32_t pos, std::span<const double> p) {
        const std::uint32_t token = grid.tokens[pos];
        if (!(p[token] > 0.0)) {
            throw CodecError("codec: zero probability for the token at position " + std::to_string(pos));
        }
        enc.encode_symbol(rc::quantize_frequencies(p), token);
        working.tokens[pos] = token;
    });
    return {static_cast<std::uint32_t>(grid.size()), model.vocab_size(), sched.id(), enc.finish()};
}

/// Inverse of compress(). The decoded grid is re-encoded and compared with
/// the input payload, so truncated or corrupted streams raise CodecError.
inline TokenGrid decompress(const Bitstream& bs, const TokenModel& model, const MaskSchedule& sched) {
    if (bs.token_count != sched.seq_len()) throw CodecError("bitstream: token count does not match the schedule");
    if (bs.vocab_size != model.vocab_size()) throw CodecError("bitstream: codebook size does not match the model");
    if (bs.schedule_id != sched.id()) throw CodecError("bitstream: schedule id does not match");
    TokenGrid working(sched.height, sched.width);
    rc::Decoder dec(bs.payload);
    detail::walk_schedule(model, sched, working, [&](std::uint32_t pos, std::span<const double> p) {
        working.tokens[pos] = dec.decode_symbol(rc::quantize_frequencies(p));
    });
    if (dec.overrun() > 4) throw CodecError("bitstream: payload is truncated");
    if (compress(working, model, sched).payload != bs.payload) throw CodecError("bitstream: corrupt payload");
    return working;
}

/// Decompress using the schedule recorded in the bitstream header.
inline TokenGrid decompress(const Bitstream& bs, const TokenModel& model) {
    return decompress(bs, model, schedule_from_id(bs.schedule_id, bs.token_count));
}

// ---- confidence-based masked sampling ----------------------------------------------

struct SampleOptions {
    double cfg_alpha = 0.0;
    std::uint32_t steps = 12;
    /// 0 selects the argmax at every position.
    double temperature = 1.0;
    std::optional<std::uint32_t> label;
};

struct SampleResult {
    TokenGrid grid;
    /// Step at which each position was uncovered.
    std::vector<std::uint32_t> reveal_step;
};

/// Iterative decoding: at every step all masked positions are predicted (with
/// guidance), a token is drawn for each and the most confident ones are kept
/// so that the masked count follows the cosine schedule down to zero.
template <class Rng>
SampleResult masked_sample(const TokenModel& model, const MaskSchedule& sched, const SampleOptions& opts, Rng& rng) {
    if (opts.steps == 0) throw DomainError("masked_sample: at least one step is required");
    if (opts.temperature < 0.0) throw DomainError("masked_sample: temperature must be non-negative");
    const std::uint32_t s = sched.seq_len();
    const std::uint32_t k = model.vocab_size();
    const bool guided = model.num_classes() > 0 && opts.label.has_value() && opts.cfg_alpha != 0.0;

    SampleResult result{TokenGrid(sched.height, sched.width), std::vector<std::uint32_t>(s, 0)};
    std::vector<std::uint8_t> revealed(s, 0);
    std::vector<std::uint32_t> masked(s);
    std::iota(masked.begin(), masked.end(), 0u);
    std::vector<double> cond, uncond, logits(k);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    for (std::uint32_t step = 0; step < opts.steps && !masked.empty(); ++step) {
        std::uint32_t keep_masked =
            step + 1 == opts.steps ? 0 : cosine_mask_count(1.0 - static_cast<double>(step + 1) / opts.steps, s);
        keep_masked = std::min<std::uint32_t>(keep_masked, static_cast<std::uint32_t>(masked.size()) - 1);

        cond.assign(masked.size() * k, 0.0);
        model.predict(result.grid, revealed, masked, opts.label, cond);
        if (guided) {
            uncond.assign(masked.size() * k, 0.0);
            model.predict(result.grid, revealed, masked, std::nullopt, uncond);
        }

        struct Candidate {
            std::uint32_t pos;
            std::uint32_t token;
            double confidence;
        };
        std::vector<Candidate> candidates;
        candidates.reserve(masked.size());
        for (std::size_t i = 0; i < masked.size(); ++i) {
            auto c = std::span<const double>(cond).subspan(i * k, k);
            if (guided) {
                cfg_logits(c, std::span<const double>(uncond).subspan(i * k, k), opts.cfg_alpha, logits);
            } else {
                std::copy(c.begin(), c.end(), logits.begin());
            }
            std::vector<double> probs(logits);
            softmax_rows(probs, k);
            std::uint32_t token = 0;
            if (opts.temperature == 0.0) {
                token = static_cast<std::uint32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
            } else {
                std::vector<double> tempered(logits);
                for (auto& v : tempered) v /= opts.temperature;
                softmax_rows(tempered, k);
                double u = uni(rng);
                token = k - 1;
                for (std::uint32_t t = 0; t < k; ++t) {
                    u -= tempered[t];
                    if (u <= 0.0) {
                        token = t;
                        break;
                    }
                }
            }
            candidates.push_back({masked[i], token, probs[token]});
        }
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Candidate& a, const Candidate& b) { return a.confidence > b.confidence; });
        const std::size_t reveal = masked.size() - keep_masked;
        std::vector<std::uint32_t> still_masked;
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            if (i < reveal) {
                result.grid.tokens[candidates[i].pos] = candidates[i].token;
                revealed[candidates[i].pos] = 1;
                result.reveal_step[candidates[i].pos] = step;
            } else {
                still_masked.push_back(candidates[i].pos);
            }
        }
        std::sort(still_masked.begin(), still_masked.end());
        masked = std::move(still_masked);
    }
    return result;
}

} // namespace quantlab::codec
