#pragma once

// Finite scalar quantization.
//
// Each of the d channels is squashed into a bounded interval, rounded to one
// of L_i integer levels and renormalized to [-1, 1]. The implied codebook is
// the product of the per-channel level sets; codes map to integer indices by
// mixed-radix positional encoding with place values basis_i = prod_{j<i} L_j.
//
// Even L_i need an asymmetric grid: the bound is shifted down by 0.5 so that
// rounding yields L_i integers {-L/2, ..., L/2 - 1}. The shift inside tanh is
// tan(offset / half_l), which keeps bound() close to (but not exactly) zero at
// z = 0; arctanh would make it exact. Both agree to first order and the
// reference formulation (tan) is used here.

#include "quantlab/error.hpp"
#include "quantlab/tensor.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace quantlab::fsq {

/// Per-channel level counts and the constants derived from them.
class LevelsSpec {
public:
    /// Keeps bound() strictly inside the outermost rounding cells.
    static constexpr double kDefaultEps = 1e-3;

    explicit LevelsSpec(std::vector<std::uint32_t> levels, double eps = kDefaultEps)
        : levels_(std::move(levels)), eps_(eps) {
        if (levels_.empty()) throw DomainError("levels: at least one channel is required");
        std::uint64_t size = 1;
        for (auto l : levels_) {
            if (l < 2) throw DomainError("levels: every L_i must be >= 2, got " + std::to_string(l));
            size *= l;
            if (size > std::numeric_limits<std::uint32_t>::max()) {
                throw DomainError("levels: codebook size exceeds 32 bits");
            }
        }
        codebook_size_ = static_cast<std::uint32_t>(size);
        const std::size_t d = levels_.size();
        basis_.resize(d);
        half_l_.resize(d);
        offset_.resize(d);
        shift_.resize(d);
        half_width_.resize(d);
        std::uint32_t place = 1;
        for (std::size_t i = 0; i < d; ++i) {
            const double l = levels_[i];
            basis_[i] = place;
            place *= levels_[i];
            half_l_[i] = (l - 1.0) * (1.0 - eps_) / 2.0;
            offset_[i] = levels_[i] % 2 == 0 ? 0.5 : 0.0;
            shift_[i] = std::tan(offset_[i] / half_l_[i]);
            half_width_[i] = levels_[i] / 2;
        }
    }

    /// Parses "8,5,5,5".
    static LevelsSpec parse(std::string_view text) {
        std::vector<std::uint32_t> levels;
        std::size_t pos = 0;
        while (pos <= text.size()) {
            auto end = text.find(',', pos);
            if (end == std::string_view::npos) end = text.size();
            auto token = text.substr(pos, end - pos);
            while (!token.empty() && token.front() == ' ') token.remove_prefix(1);
            while (!token.empty() && token.back() == ' ') token.remove_suffix(1);
            std::uint32_t value = 0;
            auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
            if (token.empty() || ec != std::errc{} || ptr != token.data() + token.size()) {
                throw DomainError("levels: cannot parse '" + std::string(text) + "'");
            }
            levels.push_back(value);
            pos = end + 1;
        }
        return LevelsSpec(std::move(levels));
    }

    std::string to_string() const {
        std::string out;
        for (std::size_t i = 0; i < levels_.size(); ++i) {
            if (i) out += ',';
            out += std::to_string(levels_[i]);
        }
        return out;
    }

    std::size_t dim() const { return levels_.size(); }
    std::uint32_t codebook_size() const { return codebook_size_; }
    double eps() const { return eps_; }
    std::span<const std::uint32_t> levels() const { return levels_; }
    std::span<const std::uint32_t> basis() const { return basis_; }
    std::span<const double> half_l() const { return half_l_; }
    std::span<const double> offset() const { return offset_; }
    std::span<const double> shift() const { return shift_; }
    std::span<const std::uint32_t> half_width() const { return half_width_; }

    bool operator==(const LevelsSpec& other) const { return levels_ == other.levels_ && eps_ == other.eps_; }

private:
    std::vector<std::uint32_t> levels_;
    double eps_;
    std::uint32_t codebook_size_ = 1;
    std::vector<std::uint32_t> basis_;
    std::vector<double> half_l_;
    std::vector<double> offset_;
    std::vector<double> shift_;
    std::vector<std::uint32_t> half_width_;
};

/// A point of the implied codebook, normalized to [-1, 1] per channel.
struct Code {
    std::vector<double> values;

    bool operator==(const Code&) const = default;
};

namespace detail {

inline void check_last_dim(std::string_view op, const Tensor& z, const LevelsSpec& spec) {
    if (z.rank() == 0 || z.shape().back() != spec.dim()) {
        throw ShapeError(std::string(op) + ": last dimension of " + shape_string(z.shape()) + " must be " +
                         std::to_string(spec.dim()));
    }
}

inline Tensor channel_constant(std::span<const double> v) {
    return Tensor::from({v.size()}, std::vector<double>(v.begin(), v.end()));
}

inline Tensor half_width_tensor(const LevelsSpec& spec) {
    const auto hw = spec.half_width();
    return Tensor::from({hw.size()}, std::vector<double>(hw.begin(), hw.end()));
}

} // namespace detail

/// tanh(z + shift) * half_l - offset, per channel.
inline Tensor bound(const Tensor& z, const LevelsSpec& spec) {
    detail::check_last_dim("bound", z, spec);
    return tanh(z + detail::channel_constant(spec.shift())) * detail::channel_constant(spec.half_l()) -
           detail::channel_constant(spec.offset());
}

/// Same graph as quantize() with the rounding removed. Its gradient is what
/// the straight-through estimator propagates.
inline Tensor bound_normalized(const Tensor& z, const LevelsSpec& spec) {
    return bound(z, spec) / detail::half_width_tensor(spec);
}

/// round_ste(bound(z)) / half_width. Forward values lie on the code grid.
inline Tensor quantize(const Tensor& z, const LevelsSpec& spec) {
    return round_ste(bound(z, spec)) / detail::half_width_tensor(spec);
}

/// Relative tolerance for snapping a code entry onto its grid point.
inline constexpr double kGridTolerance = 1e-9;

/// Mixed-radix index of one code.
inline std::uint32_t codes_to_indexes(std::span<const double> code, const LevelsSpec& spec) {
    if (code.size() != spec.dim()) {
        throw ShapeError("codes_to_indexes: code has " + std::to_string(code.size()) + " entries, expected " +
                         std::to_string(spec.dim()));
    }
    std::uint32_t index = 0;
    for (std::size_t i = 0; i < code.size(); ++i) {
        const double hw = spec.half_width()[i];
        const double digit = code[i] * hw + hw;
        const double snapped = std::round(digit);
        if (!(std::abs(digit - snapped) <= kGridTolerance * hw) || snapped < 0.0 ||
            snapped > static_cast<double>(spec.levels()[i] - 1)) {
            throw DomainError("codes_to_indexes: entry " + std::to_string(i) + " = " + std::to_string(code[i]) +
                              " is not on the grid of L=" + std::to_string(spec.levels()[i]));
        }
        index += static_cast<std::uint32_t>(snapped) * spec.basis()[i];
    }
    return index;
}

inline std::uint32_t codes_to_indexes(const Code& code, const LevelsSpec& spec) {
    return codes_to_indexes(std::span<const double>(code.values), spec);
}

/// Indices for every code in a (..., d) tensor.
inline std::vector<std::uint32_t> codes_to_indexes(const Tensor& codes, const LevelsSpec& spec) {
    detail::check_last_dim("codes_to_indexes", codes, spec);
    const std::size_t d = spec.dim();
    std::vector<std::uint32_t> out(codes.size() / d);
    for (std::size_t r = 0; r < out.size(); ++r) out[r] = codes_to_indexes(codes.values().subspan(r * d, d), spec);
    return out;
}

/// Inverse of codes_to_indexes.
inline Code indexes_to_codes(std::uint32_t index, const LevelsSpec& spec) {
    if (index >= spec.codebook_size()) {
        throw DomainError("indexes_to_codes: index " + std::to_string(index) + " out of range for codebook of size " +
                          std::to_string(spec.codebook_size()));
    }
    Code code{std::vector<double>(spec.dim())};
    for (std::size_t i = 0; i < spec.dim(); ++i) {
        const std::uint32_t digit = (index / spec.basis()[i]) % spec.levels()[i];
        const double hw = spec.half_width()[i];
        code.values[i] = (static_cast<double>(digit) - hw) / hw;
    }
    return code;
}

/// Maximum codebook size implicit_codebook() enumerates by default.
inline constexpr std::uint32_t kEnumerationGuard = 1u << 16;

/// All codes in index order.
inline std::vector<Code> implicit_codebook(const LevelsSpec& spec, std::uint32_t guard = kEnumerationGuard) {
    if (spec.codebook_size() > guard) {
        throw DomainError("implicit_codebook: codebook size " + std::to_string(spec.codebook_size()) +
                          " exceeds enumeration guard " + std::to_string(guard));
    }
    std::vector<Code> out;
    out.reserve(spec.codebook_size());
    for (std::uint32_t i = 0; i < spec.codebook_size(); ++i) out.push_back(indexes_to_codes(i, spec));
    return out;
}

/// Index of the all-zero code; zero is a grid level for odd and even L_i alike.
inline std::uint32_t center_index(const LevelsSpec& spec) {
    std::vector<double> zero(spec.dim(), 0.0);
    return codes_to_indexes(std::span<const double>(zero), spec);
}

/// Tabulated level sets for common target codebook sizes.
inline std::optional<std::vector<std::uint32_t>> tabulated_levels(std::uint64_t target) {
    switch (target) {
    case 1u << 4: return std::vector<std::uint32_t>{5, 3};
    case 1u << 6: return std::vector<std::uint32_t>{8, 8};
    case 1u << 8: return std::vector<std::uint32_t>{8, 6, 5};
    case 1u << 9: return std::vector<std::uint32_t>{8, 8, 8};
    case 1u << 10: return std::vector<std::uint32_t>{8, 5, 5, 5};
    case 1u << 11: return std::vector<std::uint32_t>{8, 8, 6, 5};
    case 1u << 12: return std::vector<std::uint32_t>{7, 5, 5, 5, 5};
    case 1u << 14: return std::vector<std::uint32_t>{8, 8, 8, 6, 5};
    case 1u << 16: return std::vector<std::uint32_t>{8, 8, 8, 5, 5, 5};
    default: return std::nullopt;
    }
}

namespace detail {

struct LevelSearch {
    double target;
    std::uint32_t max_level;
    std::vector<std::uint32_t> current;
    std::vector<std::uint32_t> best;
    double best_error = std::numeric_limits<double>::infinity();

    // Non-increasing sequences of levels in [5, max_level], at least two channels.
    void run(std::uint64_t product, std::uint32_t cap) {
        if (current.size() >= 2) {
            const double err = std::abs(static_cast<double>(product) / target - 1.0);
            // Ties keep the earlier candidate: fewer channels, larger leading levels.
            if (err < best_error - 1e-12 ||
                (std::abs(err - best_error) <= 1e-12 && current.size() < best.size())) {
                best_error = err;
                best = current;
            }
        }
        for (std::uint32_t l = cap; l >= 5; --l) {
            const std::uint64_t next = product * l;
            if (static_cast<double>(next) > target * 1.1) continue;
            current.push_back(l);
            run(next, l);
            current.pop_back();
        }
    }
};

} // namespace detail

/// Level set approximating a target codebook size. Tabulated sizes return the
/// recommended configuration; others use a search over L_i in {8, 7, 6, 5}
/// (widening the upper level only if nothing lands within 10%).
inline LevelsSpec recommend_levels(std::uint64_t target_size) {
    if (auto table = tabulated_levels(target_size)) return LevelsSpec(*table);
    if (target_size < 25) {
        throw DomainError("recommend_levels: target " + std::to_string(target_size) +
                          " cannot be met with L_i >= 5 and d >= 2");
    }
    if (target_size > std::numeric_limits<std::uint32_t>::max()) {
        throw DomainError("recommend_levels: target exceeds 32-bit codebook sizes");
    }
    for (std::uint32_t max_level = 8; max_level <= 1024; max_level *= 2) {
        detail::LevelSearch search{static_cast<double>(target_size), max_level, {}, {}};
        search.run(1, max_level);
        if (!search.best.empty() && search.best_error <= 0.1) return LevelsSpec(search.best);
    }
    throw DomainError("recommend_levels: no level set within 10% of " + std::to_string(target_size));
}

} // namespace quantlab::fsq
