#pragma once

// Little-endian binary helpers, atomic file writes and the tensor file format:
//   "FSQT", u32 rank, u32 dims[rank], f64 values (row-major).

#include "quantlab/error.hpp"
#include "quantlab/tensor.hpp"

#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace quantlab::io {

using Bytes = std::vector<std::uint8_t>;

class ByteWriter {
public:
    void bytes(std::span<const std::uint8_t> data) { buf_.insert(buf_.end(), data.begin(), data.end()); }
    void magic(std::string_view tag) { buf_.insert(buf_.end(), tag.begin(), tag.end()); }
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    const Bytes& data() const { return buf_; }
    Bytes take() { return std::move(buf_); }

private:
    Bytes buf_;
};

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> data, std::string context) : data_(data), context_(std::move(context)) {}

    void expect_magic(std::string_view tag) {
        auto got = take(tag.size());
        if (!std::equal(got.begin(), got.end(), tag.begin())) {
            throw IoError(context_ + ": bad magic, expected '" + std::string(tag) + "'");
        }
    }
    std::uint8_t u8() { return take(1)[0]; }
    std::uint32_t u32() {
        auto b = take(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
        return v;
    }
    std::uint64_t u64() {
        auto b = take(8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::span<const std::uint8_t> rest() {
        auto out = data_.subspan(pos_);
        pos_ = data_.size();
        return out;
    }
    std::size_t remaining() const { return data_.size() - pos_; }
    void expect_end() const {
        if (pos_ != data_.size()) throw IoError(context_ + ": " + std::to_string(remaining()) + " trailing bytes");
    }

private:
    std::span<const std::uint8_t> take(std::size_t n) {
        if (data_.size() - pos_ < n) throw IoError(context_ + ": unexpected end of data");
        auto out = data_.subspan(pos_, n);
        pos_ += n;
        return out;
    }

    std::span<const std::uint8_t> data_;
    std::string context_;
    std::size_t pos_ = 0;
};

inline Bytes read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    Bytes out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return out;
}

/// Writes through a sibling temp file and renames it into place, so readers
/// never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
    static std::atomic<std::uint64_t> counter{0};
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp." + std::to_string(counter.fetch_add(1));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot create " + tmp.string());
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
        out.flush();
        if (!out) {
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw IoError("write failed for " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot rename into " + path.string());
    }
}

inline void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline Bytes encode_tensor(const Tensor& t) {
    ByteWriter w;
    w.magic("FSQT");
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.values()) w.f64(v);
    return w.take();
}

inline Tensor decode_tensor(std::span<const std::uint8_t> data) {
    ByteReader r(data, "tensor file");
    r.expect_magic("FSQT");
    const std::uint32_t rank = r.u32();
    if (rank > 16) throw IoError("tensor file: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
        d = r.u32();
        if (d == 0) throw IoError("tensor file: zero-sized dimension");
        count *= d;
        if (count > (std::uint64_t{1} << 40)) throw IoError("tensor file: implausible size");
    }
    if (r.remaining() != count * 8) throw IoError("tensor file: payload does not match shape " + shape_string(shape));
    std::vector<double> values(count);
    for (auto& v : values) v = r.f64();
    return Tensor::from(std::move(shape), std::move(values));
}

} // namespace quantlab::io
