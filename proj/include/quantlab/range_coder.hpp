#pragma once

// 32-bit range coder with carry propagation over 16-bit frequency tables.
//
// The encoder keeps a 64-bit `low` so that a carry out of the 32-bit window
// can be pushed into the pending byte run (one cached byte plus any 0xFF
// bytes behind it). The first byte the classic scheme emits is always zero;
// it is dropped and the decoder primes with four bytes instead of five.
// On finish the encoder picks the value in its final interval with the most
// trailing zero bits and strips the zero bytes of that final flush: the
// decoder reads past the end as zeros.

#include "quantlab/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace quantlab::rc {

inline constexpr unsigned kFrequencyBits = 16;
inline constexpr std::uint32_t kTotalFrequency = 1u << kFrequencyBits;
inline constexpr std::uint32_t kTop = 1u << 24;

/// Quantizes a probability vector to integer frequencies summing to
/// kTotalFrequency, every symbol getting at least one unit. Deterministic in
/// the input bits, so encoder and decoder agree exactly.
inline std::vector<std::uint32_t> quantize_frequencies(std::span<const double> probs) {
    const std::size_t k = probs.size();
    if (k == 0 || k > kTotalFrequency) throw CodecError("frequency table: alphabet size out of range");
    constexpr double kScale = static_cast<double>(kTotalFrequency);
    std::vector<std::uint32_t> freq(k);
    std::int64_t total = 0;
    for (std::size_t i = 0; i < k; ++i) {
        const double scaled = std::clamp(probs[i], 0.0, 1.0) * kScale;
        freq[i] = std::max<std::uint32_t>(1, static_cast<std::uint32_t>(scaled));
        total += freq[i];
    }
    std::int64_t diff = static_cast<std::int64_t>(kTotalFrequency) - total;
    if (diff == 0) return freq;

    // Greedy unit moves, each the cheapest in expected code length
    // sum p_i * log(1 / f_i). Ties go to the lower index.
    const bool grow = diff > 0;
    auto delta = [&](std::size_t i) {
        const double f = freq[i];
        return grow ? probs[i] * std::log1p(1.0 / f) : probs[i] * -std::log1p(-1.0 / f);
    };
    auto worse = [&](const std::pair<double, std::size_t>& a, const std::pair<double, std::size_t>& b) {
        if (a.first != b.first) return grow ? a.first < b.first : a.first > b.first;
        return a.second > b.second;
    };
    std::vector<std::pair<double, std::size_t>> heap;
    heap.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        if (grow || freq[i] > 1) heap.emplace_back(delta(i), i);
    }
    std::make_heap(heap.begin(), heap.end(), worse);
    while (diff != 0) {
        std::pop_heap(heap.begin(), heap.end(), worse);
        const std::size_t i = heap.back().second;
        heap.pop_back();
        if (grow) {
            ++freq[i];
            --diff;
        } else {
            --freq[i];
            ++diff;
        }
        if (grow || freq[i] > 1) {
            heap.emplace_back(delta(i), i);
            std::push_heap(heap.begin(), heap.end(), worse);
        }
    }
    return freq;
}

class Encoder {
public:
    /// Codes the sub-interval [cum, cum + freq) of kTotalFrequency.
    void encode(std::uint32_t cum, std::uint32_t freq) {
        const std::uint32_t r = range_ >> kFrequencyBits;
        low_ += static_cast<std::uint64_t>(r) * cum;
        range_ = r * freq;
        while (range_ < kTop) {
            range_ <<= 8;
            shift_low();
            ++body_;
        }
    }

    void encode_symbol(std::span<const std::uint32_t> freq, std::uint32_t symbol) {
        std::uint32_t cum = 0;
        for (std::uint32_t i = 0; i < symbol; ++i) cum += freq[i];
        encode(cum, freq[symbol]);
    }

    std::vector<std::uint8_t> finish() {
        // Choose v in [low, low + range - 1] with the most trailing zeros.
        const std::uint64_t hi = low_ + range_ - 1;
        for (int bits = 32; bits >= 0; --bits) {
            const std::uint64_t unit = std::uint64_t{1} << bits;
            const std::uint64_t v = (low_ + unit - 1) & ~(unit - 1);
            if (v <= hi) {
                low_ = v;
                break;
            }
        }
        for (int i = 0; i < 5; ++i) shift_low();
        // Only the flush bytes may be dropped; the decoder reads them as zeros.
        // Keeping the body intact lets a truncated stream fail the re-encode check.
        while (out_.size() > body_ && out_.back() == 0) out_.pop_back();
        return std::move(out_);
    }

private:
    void shift_low() {
        if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
            const auto carry = static_cast<std::uint8_t>(low_ >> 32);
            std::uint8_t temp = cache_;
            do {
                if (primed_) out_.push_back(static_cast<std::uint8_t>(temp + carry));
                primed_ = true;
                temp = 0xFF;
            } while (--cache_size_ != 0);
            cache_ = static_cast<std::uint8_t>(static_cast<std::uint32_t>(low_) >> 24);
        }
        ++cache_size_;
        low_ = (low_ & 0x00FFFFFFu) << 8;
    }

    std::uint64_t low_ = 0;
    std::uint32_t range_ = 0xFFFFFFFFu;
    std::uint8_t cache_ = 0;
    std::uint64_t cache_size_ = 1;
    std::size_t body_ = 0;
    bool primed_ = false; // the first flushed byte is the always-zero seed
    std::vector<std::uint8_t> out_;
};

class Decoder {
public:
    explicit Decoder(std::span<const std::uint8_t> data) : data_(data) {
        for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
    }

    /// Decodes one symbol from `freq` (summing to kTotalFrequency).
    std::uint32_t decode_symbol(std::span<const std::uint32_t> freq) {
        const std::uint32_t r = range_ >> kFrequencyBits;
        const std::uint32_t target = std::min(code_ / r, kTotalFrequency - 1);
        std::uint32_t cum = 0;
        std::uint32_t symbol = 0;
        while (symbol + 1 < freq.size() && cum + freq[symbol] <= target) cum += freq[symbol++];
        code_ -= r * cum;
        range_ = r * freq[symbol];
        while (range_ < kTop) {
            code_ = (code_ << 8) | next_byte();
            range_ <<= 8;
        }
        return symbol;
    }

    /// Bytes consumed beyond the end of the input (read as zeros).
    std::size_t overrun() const { return pos_ > data_.size() ? pos_ - data_.size() : 0; }

private:
    std::uint32_t next_byte() {
        const std::uint32_t b = pos_ < data_.size() ? data_[pos_] : 0;
        ++pos_;
        return b;
    }

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
    std::uint32_t code_ = 0;
    std::uint32_t range_ = 0xFFFFFFFFu;
};

} // namespace quantlab::rc
