#pragma once

// Baseline vector quantizer: nearest-codeword lookup with a straight-through
// gradient, the auxiliary losses it needs (commitment, codebook, entropy),
// EMA codebook updates and codebook splitting for unused entries.

#include "quantlab/error.hpp"
#include "quantlab/io.hpp"
#include "quantlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace quantlab::vq {

struct VqLossWeights {
    double commitment = 0.25;
    double codebook = 1.0;
    double entropy = 0.1;
    /// Temperature of the soft assignments used by the entropy term.
    double entropy_temperature = 1.0;

    void validate() const {
        if (!(commitment >= 0.0 && codebook >= 0.0 && entropy >= 0.0)) {
            throw DomainError("vq loss weights must be non-negative");
        }
        if (!(entropy_temperature > 0.0)) throw DomainError("vq entropy temperature must be positive");
    }
};

/// Laplace term in the EMA normalization.
inline constexpr double kEmaEpsilon = 1e-5;

class VqCodebook {
public:
    /// Uniform initialization on [-1/sqrt(d), 1/sqrt(d)].
    VqCodebook(std::size_t size, std::size_t dim, std::uint64_t seed) : size_(size), dim_(dim) {
        check_dims();
        std::mt19937_64 rng(seed);
        const double limit = 1.0 / std::sqrt(static_cast<double>(dim));
        std::uniform_real_distribution<double> uni(-limit, limit);
        std::vector<double> values(size * dim);
        for (auto& v : values) v = uni(rng);
        init(std::move(values));
    }

    VqCodebook(std::size_t size, std::size_t dim, std::vector<double> values) : size_(size), dim_(dim) {
        check_dims();
        if (values.size() != size * dim) throw ShapeError("codebook: value count does not match size x dim");
        init(std::move(values));
    }

    std::size_t size() const { return size_; }
    std::size_t dim() const { return dim_; }
    const Tensor& vectors() const { return vectors_; }
    Tensor& vectors() { return vectors_; }
    std::span<const double> row(std::size_t k) const { return vectors_.values().subspan(k * dim_, dim_); }

    /// Learned parameters: one d-vector per codeword.
    std::size_t parameter_count() const { return size_ * dim_; }

    void record_usage(std::span<const std::uint32_t> assignments) {
        for (auto a : assignments) ++usage_counts[a];
    }
    void reset_usage() { std::fill(usage_counts.begin(), usage_counts.end(), 0); }
    std::size_t unused_count() const {
        return static_cast<std::size_t>(std::count(usage_counts.begin(), usage_counts.end(), 0));
    }

    void validate() const {
        for (double v : vectors_.values()) {
            if (!std::isfinite(v)) throw DomainError("codebook contains non-finite values");
        }
        for (double c : ema_counts) {
            if (c < 0.0) throw DomainError("codebook EMA counts must be non-negative");
        }
    }

    std::vector<double> ema_counts;
    std::vector<double> ema_sums;
    std::vector<std::uint64_t> usage_counts;

private:
    void check_dims() const {
        if (size_ == 0 || dim_ == 0) throw DomainError("codebook: size and dimension must be at least 1");
    }

    void init(std::vector<double> values) {
        // EMA statistics start as one pseudo-observation at each codeword.
        ema_counts.assign(size_, 1.0);
        ema_sums = values;
        usage_counts.assign(size_, 0);
        vectors_ = Tensor::from({size_, dim_}, std::move(values), true);
        validate();
    }

    std::size_t size_;
    std::size_t dim_;
    Tensor vectors_;
};

namespace detail {

inline std::size_t check_last_dim(const Tensor& z, const VqCodebook& cb) {
    if (z.rank() == 0 || z.shape().back() != cb.dim()) {
        throw ShapeError("vq: last dimension of " + shape_string(z.shape()) + " must be " + std::to_string(cb.dim()));
    }
    return z.size() / cb.dim();
}


/// Codebook in (d, k) layout so distance loops run across codewords.
inline std::vector<double> transposed(std::span<const double> c, std::size_t k, std::size_t d) {
    std::vector<double> out(k * d);
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t t = 0; t < d; ++t) out[t * k + j] = c[j * d + t];
    }
    return out;
}

/// dist[j] = |z - c_j|^2, summed over channels in order.
inline void squared_distances(const double* z, const std::vector<double>& ct, std::size_t k, std::size_t d,
                              double* dist) {
    std::fill(dist, dist + k, 0.0);
    for (std::size_t t = 0; t < d; ++t) {
        const double zt = z[t];
        const double* row = ct.data() + t * k;
        for (std::size_t j = 0; j < k; ++j) {
            const double diff = zt - row[j];
            dist[j] += diff * diff;
        }
    }
}

inline double affinity(double log_p) {
    // Below this the probability is denormal, which is both slow and irrelevant.
    return log_p > -700.0 ? std::exp(log_p) : 0.0;
}

/// Entropy regularizer over p = softmax(-|z_i - c_j|^2 / T) as a single node:
/// mean_i H(p_i) - H(mean_i p_i), with 1e-12 added inside the log of the
/// second term. Equivalent to composing the elementwise ops but without the
/// n x k intermediates each carrying a gradient buffer.
inline Tensor affinity_entropy(const Tensor& z, const Tensor& codebook, double temperature) {
    const std::size_t n = z.dim(0), d = z.dim(1), k = codebook.dim(0);
    const double* zv = z.values().data();
    auto ct = std::make_shared<std::vector<double>>(transposed(codebook.values(), k, d));
    auto probs = std::make_shared<std::vector<double>>(n * k);
    // Softmax backward needs a_j - log p_ij per entry and abar_i + H_i per row.
    auto row_term = std::make_shared<std::vector<double>>(n);
    std::vector<double> logp(n * k);
    std::vector<double> avg(k, 0.0);
    double sample_entropy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double* lp = logp.data() + i * k;
        double* pi = probs->data() + i * k;
        squared_distances(zv + i * d, *ct, k, d, lp);
        double hi = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) {
            lp[j] = -lp[j] / temperature;
            hi = std::max(hi, lp[j]);
        }
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            pi[j] = affinity(lp[j] - hi);
            acc += pi[j];
        }
        const double lse = hi + std::log(acc);
        double h = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            lp[j] -= lse;
            pi[j] /= acc;
            h -= pi[j] * lp[j];
            avg[j] += pi[j];
        }
        (*row_term)[i] = h;
        sample_entropy += h;
    }
    sample_entropy /= static_cast<double>(n);
    // a_j is d(-H(avg))/d(avg_j).
    std::vector<double> a(k);
    double avg_entropy = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        avg[j] /= static_cast<double>(n);
        const double l = std::log(avg[j] + 1e-12);
        avg_entropy -= avg[j] * l;
        a[j] = l + avg[j] / (avg[j] + 1e-12);
    }
    // Fold a_j - log p_ij into the stored matrix; the row constant is kept apart.
    for (std::size_t i = 0; i < n; ++i) {
        double abar = 0.0;
        for (std::size_t j = 0; j < k; ++j) abar += probs->data()[i * k + j] * a[j];
        (*row_term)[i] = abar + (*row_term)[i];
        for (std::size_t j = 0; j < k; ++j) logp[i * k + j] = a[j] - logp[i * k + j];
    }
    auto weights = std::make_shared<std::vector<double>>(std::move(logp));
    return quantlab::detail::make_result(
        "affinity_entropy", {}, {sample_entropy - avg_entropy}, {z.node(), codebook.node()},
        [=](quantlab::detail::Node& self) {
            auto& zn = *self.inputs[0];
            auto& cn = *self.inputs[1];
            if (zn.requires_grad) zn.ensure_grad();
            if (cn.requires_grad) cn.ensure_grad();
            const double g = self.grad[0] / static_cast<double>(n);
            std::vector<double> dd(k);
            std::vector<double> cgrad_t(cn.requires_grad ? k * d : 0, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                const double* pi = probs->data() + i * k;
                const double* wi = weights->data() + i * k;
                const double ri = (*row_term)[i];
                for (std::size_t j = 0; j < k; ++j) {
                    // 2 * d loss / d dist_ij; the 2 comes from d dist / d diff.
                    dd[j] = pi[j] == 0.0 ? 0.0 : -2.0 * g * pi[j] * (wi[j] - ri) / temperature;
                }
                for (std::size_t t = 0; t < d; ++t) {
                    const double zt = zn.value[i * d + t];
                    const double* row = ct->data() + t * k;
                    if (zn.requires_grad) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < k; ++j) acc += dd[j] * (zt - row[j]);
                        zn.grad[i * d + t] += acc;
                    }
                    if (cn.requires_grad) {
                        double* cg = cgrad_t.data() + t * k;
                        for (std::size_t j = 0; j < k; ++j) cg[j] -= dd[j] * (zt - row[j]);
                    }
                }
            }
            if (cn.requires_grad) {
                for (std::size_t j = 0; j < k; ++j) {
                    for (std::size_t t = 0; t < d; ++t) cn.grad[j * d + t] += cgrad_t[t * k + j];
                }
            }
        });
}

} // namespace detail

/// Index of the nearest codeword for each d-vector in `z` (ties take the lower index).
inline std::vector<std::uint32_t> nearest_codes(std::span<const double> z, const VqCodebook& cb) {
    const std::size_t d = cb.dim();
    const std::size_t k = cb.size();
    if (z.size() % d != 0) throw ShapeError("vq: input size is not a multiple of the codeword dimension");
    const auto ct = detail::transposed(cb.vectors().values(), k, d);
    std::vector<double> dist(k);
    std::vector<std::uint32_t> out(z.size() / d);
    for (std::size_t i = 0; i < out.size(); ++i) {
        detail::squared_distances(z.data() + i * d, ct, k, d, dist.data());
        out[i] = static_cast<std::uint32_t>(std::min_element(dist.begin(), dist.end()) - dist.begin());
    }
    return out;
}

struct VqResult {
    /// Codewords in the forward pass, identity gradient to z.
    Tensor quantized;
    /// Selected codewords with gradient to the codebook (for the codebook loss).
    Tensor codewords;
    std::vector<std::uint32_t> indices;
};

inline VqResult vq_quantize(const Tensor& z, const VqCodebook& cb) {
    detail::check_last_dim(z, cb);
    auto indices = nearest_codes(z.values(), cb);
    std::vector<std::size_t> rows(indices.begin(), indices.end());
    Tensor codewords = reshape(gather_rows(cb.vectors(), rows), z.shape());
    Tensor quantized = z + stop_gradient(codewords - z);
    return {std::move(quantized), std::move(codewords), std::move(indices)};
}

struct VqLossTerms {
    Tensor total;
    double commitment = 0.0;
    double codebook = 0.0;
    double entropy = 0.0;
};

/// Weighted sum of the commitment term mean((z - sg(c))^2), the codebook term
/// mean((sg(z) - c)^2) and the entropy term. The entropy term uses soft
/// affinities p = softmax(-|z - c|^2 / T): mean per-sample entropy minus the
/// entropy of the mean affinity, which is minimized by confident but diverse
/// assignments.
inline VqLossTerms vq_losses(const Tensor& z, const VqResult& q, const VqCodebook& cb, const VqLossWeights& w) {
    w.validate();
    const std::size_t n = detail::check_last_dim(z, cb);
    VqLossTerms terms;
    Tensor total = Tensor::scalar(0.0);
    if (w.commitment > 0.0) {
        Tensor t = mean(square(z - stop_gradient(q.codewords)));
        terms.commitment = t.item();
        total = total + t * w.commitment;
    }
    if (w.codebook > 0.0) {
        Tensor t = mean(square(stop_gradient(z) - q.codewords));
        terms.codebook = t.item();
        total = total + t * w.codebook;
    }
    if (w.entropy > 0.0) {
        Tensor t = detail::affinity_entropy(reshape(z, {n, cb.dim()}), cb.vectors(), w.entropy_temperature);
        terms.entropy = t.item();
        total = total + t * w.entropy;
    }
    terms.total = total;
    return terms;
}

/// Exponential moving average update of the codebook from a batch of
/// encoder outputs `z` (row-major, n x d) and their assignments.
inline void ema_update(VqCodebook& cb, std::span<const double> z, std::span<const std::uint32_t> assignments,
                       double decay) {
    if (!(decay > 0.0 && decay < 1.0)) throw DomainError("ema_update: decay must lie in (0, 1)");
    const std::size_t d = cb.dim();
    if (z.size() != assignments.size() * d) throw ShapeError("ema_update: assignments do not match z");
    std::vector<double> counts(cb.size(), 0.0);
    std::vector<double> sums(cb.size() * d, 0.0);
    for (std::size_t i = 0; i < assignments.size(); ++i) {
        const auto k = assignments[i];
        if (k >= cb.size()) throw DomainError("ema_update: assignment out of range");
        counts[k] += 1.0;
        for (std::size_t t = 0; t < d; ++t) sums[k * d + t] += z[i * d + t];
    }
    auto vec = cb.vectors().mutable_values();
    for (std::size_t k = 0; k < cb.size(); ++k) {
        cb.ema_counts[k] = decay * cb.ema_counts[k] + (1.0 - decay) * counts[k];
        for (std::size_t t = 0; t < d; ++t) {
            auto& s = cb.ema_sums[k * d + t];
            s = decay * s + (1.0 - decay) * sums[k * d + t];
            vec[k * d + t] = s / (cb.ema_counts[k] + kEmaEpsilon);
        }
    }
}

/// 1e-3 times the mean codeword norm.
inline double default_split_noise(const VqCodebook& cb) {
    double total = 0.0;
    for (std::size_t k = 0; k < cb.size(); ++k) {
        double sq = 0.0;
        for (double v : cb.row(k)) sq += v * v;
        total += std::sqrt(sq);
    }
    return 1e-3 * total / static_cast<double>(cb.size());
}

/// Replaces every unused codeword with a noisy copy of the currently most
/// used one; the donor is perturbed independently and its usage is shared
/// with the new entry before the next replacement is chosen. Usage counters
/// are reset afterwards.
inline void split_codebook(VqCodebook& cb, std::span<const std::uint64_t> usage, double noise_scale,
                           std::mt19937_64& rng) {
    if (usage.size() != cb.size()) throw ShapeError("split_codebook: usage size does not match codebook");
    if (std::all_of(usage.begin(), usage.end(), [](auto u) { return u == 0; })) {
        throw DomainError("split_codebook: no codeword is in use");
    }
    if (!(noise_scale >= 0.0)) throw DomainError("split_codebook: noise scale must be non-negative");
    const std::size_t d = cb.dim();
    std::vector<double> counts(usage.begin(), usage.end());
    std::normal_distribution<double> normal(0.0, 1.0);
    auto vec = cb.vectors().mutable_values();
    for (std::size_t j = 0; j < cb.size(); ++j) {
        if (usage[j] != 0) continue;
        const auto donor = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
        const double half = counts[donor] / 2.0;
        counts[donor] -= half;
        counts[j] = half;
        for (std::size_t t = 0; t < d; ++t) {
            const double base = vec[donor * d + t];
            if (noise_scale > 0.0) {
                vec[j * d + t] = base + noise_scale * normal(rng);
                vec[donor * d + t] = base + noise_scale * normal(rng);
            } else {
                vec[j * d + t] = base;
            }
        }
        const double ema = cb.ema_counts[donor] / 2.0;
        for (auto k : {donor, j}) {
            cb.ema_counts[k] = ema;
            for (std::size_t t = 0; t < d; ++t) cb.ema_sums[k * d + t] = vec[k * d + t] * ema;
        }
    }
    cb.reset_usage();
}

// Checkpoint: "VQCB", u64 size, u64 dim, f64 vectors (row-major).
inline io::Bytes encode_checkpoint(const VqCodebook& cb) {
    io::ByteWriter w;
    w.magic("VQCB");
    w.u64(cb.size());
    w.u64(cb.dim());
    for (double v : cb.vectors().values()) w.f64(v);
    return w.take();
}

inline VqCodebook decode_checkpoint(std::span<const std::uint8_t> data) {
    io::ByteReader r(data, "codebook checkpoint");
    r.expect_magic("VQCB");
    const auto size = r.u64();
    const auto dim = r.u64();
    if (size == 0 || dim == 0 || size > (1u << 24) || dim > (1u << 16)) {
        throw IoError("codebook checkpoint: implausible dimensions");
    }
    if (r.remaining() != size * dim * 8) throw IoError("codebook checkpoint: payload size mismatch");
    std::vector<double> values(size * dim);
    for (auto& v : values) v = r.f64();
    return VqCodebook(size, dim, std::move(values));
}

} // namespace quantlab::vq
