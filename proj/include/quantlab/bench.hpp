#pragma once

// Toy autoencoder harness for comparing FSQ and VQ bottlenecks on synthetic
// data: dataset generators, an MLP autoencoder with a swappable bottleneck,
// its training loop, token-model fitting over encoded grids, and sweeps.

#include "quantlab/analysis.hpp"
#include "quantlab/codec.hpp"
#include "quantlab/error.hpp"
#include "quantlab/fsq.hpp"
#include "quantlab/optim.hpp"
#include "quantlab/tensor.hpp"
#include "quantlab/token_models.hpp"
#include "quantlab/vq.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <variant>
#include <vector>

namespace quantlab::bench {

// ---- datasets ------------------------------------------------------------------

enum class DatasetKind { GaussianMixture, SyntheticTextures, BinaryShapes };

inline DatasetKind parse_dataset_kind(std::string_view name) {
    if (name == "gaussian-mixture") return DatasetKind::GaussianMixture;
    if (name == "synthetic-textures") return DatasetKind::SyntheticTextures;
    if (name == "binary-shapes") return DatasetKind::BinaryShapes;
    throw ConfigError("unknown dataset kind '" + std::string(name) + "'");
}

inline std::string to_string(DatasetKind kind) {
    switch (kind) {
    case DatasetKind::GaussianMixture: return "gaussian-mixture";
    case DatasetKind::SyntheticTextures: return "synthetic-textures";
    case DatasetKind::BinaryShapes: return "binary-shapes";
    }
    return "?";
}

struct DatasetOptions {
    /// Patch side; samples have patch * patch entries.
    std::size_t patch = 8;
    std::size_t mixture_components = 16;
    double mixture_stddev = 0.1;
    /// Each mixture component spreads along this many random directions.
    std::size_t mixture_rank = 2;
    /// Seeds the component means and directions, so datasets drawn with
    /// different sample seeds share one distribution.
    std::uint64_t mixture_seed = 0;
};

/// Row-major samples, each `dim` values in [-1, 1].
struct Dataset {
    std::size_t dim = 0;
    std::vector<double> values;

    std::size_t size() const { return dim ? values.size() / dim : 0; }
    std::span<const double> sample(std::size_t i) const { return std::span(values).subspan(i * dim, dim); }
};

namespace detail {

struct Sinusoid {
    double fx, fy, phase, amplitude;
};

struct Texture {
    std::vector<Sinusoid> parts;

    double at(double x, double y) const {
        double v = 0.0;
        for (const auto& s : parts) v += s.amplitude * std::sin(2.0 * std::numbers::pi * (s.fx * x + s.fy * y) + s.phase);
        return v;
    }
};

// Two oriented sinusoids with periods between 4 and 16 pixels.
template <class Rng>
Texture random_texture(Rng& rng) {
    std::uniform_real_distribution<double> freq(1.0 / 16.0, 1.0 / 4.0);
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> amp1(0.2, 0.45);
    std::uniform_real_distribution<double> amp2(0.0, 0.3);
    Texture t;
    for (int k = 0; k < 2; ++k) {
        const double f = freq(rng);
        const double th = angle(rng);
        const double ph = phase(rng);
        const double a = k == 0 ? amp1(rng) : amp2(rng);
        t.parts.push_back({f * std::cos(th), f * std::sin(th), ph, a});
    }
    return t;
}

struct Shape2d {
    bool disk;
    double cx, cy, a, b; // disk: radius a; rectangle: half extents a, b
};

template <class Rng>
std::vector<Shape2d> random_shapes(Rng& rng, double extent) {
    std::uniform_int_distribution<int> count(1, 2);
    std::uniform_real_distribution<double> pos(0.0, extent);
    std::uniform_real_distribution<double> size(extent * 0.1, extent * 0.4);
    std::bernoulli_distribution disk(0.5);
    std::vector<Shape2d> shapes(static_cast<std::size_t>(count(rng)));
    for (auto& s : shapes) s = {disk(rng), pos(rng), pos(rng), size(rng), size(rng)};
    return shapes;
}

inline double shapes_at(const std::vector<Shape2d>& shapes, double x, double y) {
    for (const auto& s : shapes) {
        const double dx = x - s.cx, dy = y - s.cy;
        const bool inside = s.disk ? dx * dx + dy * dy <= s.a * s.a : std::abs(dx) <= s.a && std::abs(dy) <= s.b;
        if (inside) return 1.0;
    }
    return -1.0;
}

struct Mixture {
    std::vector<std::vector<double>> means;
    std::vector<std::vector<double>> directions; // component * rank rows of dim entries
};

inline Mixture random_mixture(std::size_t dim, const DatasetOptions& opts) {
    std::mt19937_64 rng(opts.mixture_seed);
    std::uniform_real_distribution<double> uni(-0.6, 0.6);
    std::normal_distribution<double> normal(0.0, 1.0);
    Mixture m;
    for (std::size_t c = 0; c < opts.mixture_components; ++c) {
        std::vector<double> mu(dim);
        for (auto& v : mu) v = uni(rng);
        m.means.push_back(std::move(mu));
        for (std::size_t r = 0; r < opts.mixture_rank; ++r) {
            std::vector<double> d(dim);
            for (auto& v : d) v = normal(rng);
            m.directions.push_back(std::move(d));
        }
    }
    return m;
}

template <class Rng>
void mixture_sample(const Mixture& m, const DatasetOptions& opts, Rng& rng, double* out, std::size_t dim) {
    std::uniform_int_distribution<std::size_t> pick(0, m.means.size() - 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t c = pick(rng);
    std::copy(m.means[c].begin(), m.means[c].end(), out);
    for (std::size_t r = 0; r < opts.mixture_rank; ++r) {
        const double u = opts.mixture_stddev * normal(rng);
        const auto& d = m.directions[c * opts.mixture_rank + r];
        for (std::size_t i = 0; i < dim; ++i) out[i] += u * d[i];
    }
    for (std::size_t i = 0; i < dim; ++i) out[i] = std::clamp(out[i], -1.0, 1.0);
}

} // namespace detail

/// Deterministic given (kind, n, seed, opts).
inline Dataset make_dataset(DatasetKind kind, std::size_t n, std::uint64_t seed, const DatasetOptions& opts = {}) {
    if (opts.patch == 0) throw ConfigError("dataset: patch size must be positive");
    const std::size_t p = opts.patch;
    Dataset ds{p * p, std::vector<double>(n * p * p)};
    std::mt19937_64 rng(seed);
    switch (kind) {
    case DatasetKind::GaussianMixture: {
        if (opts.mixture_components == 0) throw ConfigError("dataset: mixture needs at least one component");
        auto mix = detail::random_mixture(ds.dim, opts);
        for (std::size_t i = 0; i < n; ++i) detail::mixture_sample(mix, opts, rng, ds.values.data() + i * ds.dim, ds.dim);
        break;
    }
    case DatasetKind::SyntheticTextures:
        for (std::size_t i = 0; i < n; ++i) {
            auto tex = detail::random_texture(rng);
            for (std::size_t y = 0; y < p; ++y) {
                for (std::size_t x = 0; x < p; ++x) ds.values[i * ds.dim + y * p + x] = tex.at(double(x), double(y));
            }
        }
        break;
    case DatasetKind::BinaryShapes:
        for (std::size_t i = 0; i < n; ++i) {
            auto shapes = detail::random_shapes(rng, double(p));
            for (std::size_t y = 0; y < p; ++y) {
                for (std::size_t x = 0; x < p; ++x) {
                    ds.values[i * ds.dim + y * p + x] = detail::shapes_at(shapes, x + 0.5, y + 0.5);
                }
            }
        }
        break;
    }
    return ds;
}

/// Images cut into a grid of patches. Textures and shapes are drawn at image
/// scale so neighboring patches are correlated; mixture patches are i.i.d.
struct GridDataset {
    std::uint32_t grid_h = 0;
    std::uint32_t grid_w = 0;
    /// Image-major, then row-major patch order.
    Dataset patches;

    std::size_t images() const { return patches.size() / (std::size_t{grid_h} * grid_w); }
};

inline GridDataset make_grid_dataset(DatasetKind kind, std::size_t n_images, std::uint32_t grid_h, std::uint32_t grid_w,
                                     std::uint64_t seed, const DatasetOptions& opts = {}) {
    if (grid_h == 0 || grid_w == 0) throw ConfigError("grid dataset: grid must be non-empty");
    const std::size_t p = opts.patch;
    const std::size_t per_image = std::size_t{grid_h} * grid_w;
    GridDataset out{grid_h, grid_w, Dataset{p * p, std::vector<double>(n_images * per_image * p * p)}};
    std::mt19937_64 rng(seed);
    if (kind == DatasetKind::GaussianMixture) {
        auto mix = detail::random_mixture(p * p, opts);
        for (std::size_t i = 0; i < n_images * per_image; ++i) {
            detail::mixture_sample(mix, opts, rng, out.patches.values.data() + i * p * p, p * p);
        }
        return out;
    }
    for (std::size_t img = 0; img < n_images; ++img) {
        std::function<double(double, double)> field;
        if (kind == DatasetKind::SyntheticTextures) {
            field = [tex = detail::random_texture(rng)](double x, double y) { return tex.at(x, y); };
        } else {
            field = [shapes = detail::random_shapes(rng, double(p) * std::max(grid_h, grid_w))](double x, double y) {
                return detail::shapes_at(shapes, x + 0.5, y + 0.5);
            };
        }
        for (std::uint32_t pr = 0; pr < grid_h; ++pr) {
            for (std::uint32_t pc = 0; pc < grid_w; ++pc) {
                double* dst = out.patches.values.data() + ((img * per_image) + pr * grid_w + pc) * p * p;
                for (std::size_t y = 0; y < p; ++y) {
                    for (std::size_t x = 0; x < p; ++x) {
                        dst[y * p + x] = field(double(pc * p + x), double(pr * p + y));
                    }
                }
            }
        }
    }
    return out;
}

// ---- autoencoder -------------------------------------------------------------------

enum class BottleneckKind { Fsq, Vq, None };

inline BottleneckKind parse_bottleneck(std::string_view name) {
    if (name == "fsq") return BottleneckKind::Fsq;
    if (name == "vq") return BottleneckKind::Vq;
    if (name == "none") return BottleneckKind::None;
    throw ConfigError("unknown quantizer '" + std::string(name) + "'");
}

inline std::string to_string(BottleneckKind kind) {
    switch (kind) {
    case BottleneckKind::Fsq: return "fsq";
    case BottleneckKind::Vq: return "vq";
    case BottleneckKind::None: return "none";
    }
    return "?";
}

struct AutoencoderConfig {
    std::size_t input_dim = 64;
    std::vector<std::size_t> hidden{128, 128};
    BottleneckKind bottleneck = BottleneckKind::Fsq;
    std::vector<std::uint32_t> levels{5, 3};
    std::size_t vq_size = 16;
    std::size_t vq_dim = 8;
    /// Latent width for the pass-through bottleneck.
    std::size_t latent_dim = 8;
    vq::VqLossWeights vq_weights{};
    /// EMA codebook updates replace the codebook loss.
    bool vq_ema = false;
    double ema_decay = 0.99;
    /// Split unused VQ codes every this many steps (0 disables).
    std::uint32_t split_interval = 0;
    /// Negative selects 1e-3 times the mean codeword norm.
    double split_noise = -1.0;
    AdamConfig adam{3e-4};
    std::uint32_t steps = 20000;
    std::uint32_t batch = 256;
    std::uint32_t eval_interval = 1000;
    std::uint64_t seed = 0;

    std::size_t latent_width() const {
        switch (bottleneck) {
        case BottleneckKind::Fsq: return levels.size();
        case BottleneckKind::Vq: return vq_dim;
        case BottleneckKind::None: return latent_dim;
        }
        return 0;
    }

    std::uint32_t codebook_size() const {
        switch (bottleneck) {
        case BottleneckKind::Fsq: return fsq::LevelsSpec(levels).codebook_size();
        case BottleneckKind::Vq: return static_cast<std::uint32_t>(vq_size);
        case BottleneckKind::None: return 0;
        }
        return 0;
    }

    void validate() const {
        if (input_dim == 0 || hidden.empty()) throw ConfigError("autoencoder: input and hidden widths are required");
        for (auto h : hidden) {
            if (h == 0) throw ConfigError("autoencoder: hidden widths must be positive");
        }
        if (steps == 0 || batch == 0) throw ConfigError("autoencoder: steps and batch must be positive");
        if (!(adam.lr > 0.0)) throw ConfigError("autoencoder: learning rate must be positive");
        if (bottleneck == BottleneckKind::Fsq) {
            try {
                (void)fsq::LevelsSpec(levels);
            } catch (const DomainError& e) {
                throw ConfigError(e.what());
            }
        }
        if (bottleneck == BottleneckKind::Vq && (vq_size == 0 || vq_dim == 0)) {
            throw ConfigError("autoencoder: VQ codebook size and dimension must be positive");
        }
        if (bottleneck == BottleneckKind::None && latent_dim == 0) throw ConfigError("autoencoder: latent_dim must be positive");
        if (vq_ema && !(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("autoencoder: ema_decay must lie in (0, 1)");
        try {
            vq_weights.validate();
        } catch (const DomainError& e) {
            throw ConfigError(e.what());
        }
    }
};

struct Dense {
    Tensor weight; // (in, out)
    Tensor bias;   // (out)

    std::size_t in() const { return weight.dim(0); }
    std::size_t out() const { return weight.dim(1); }
    Tensor operator()(const Tensor& x) const { return matmul(x, weight) + bias; }
};

template <class Rng>
Dense make_dense(std::size_t in, std::size_t out, Rng& rng) {
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(in)));
    std::vector<double> w(in * out);
    for (auto& v : w) v = normal(rng);
    return {Tensor::from({in, out}, std::move(w), true), Tensor::zeros({out}, true)};
}

inline Dense frozen_copy(const Dense& d) {
    auto copy = [](const Tensor& t) {
        return Tensor::from(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
    };
    return {copy(d.weight), copy(d.bias)};
}

class Autoencoder {
public:
    explicit Autoencoder(const AutoencoderConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        std::mt19937_64 rng(cfg.seed);
        std::size_t width = cfg.input_dim;
        for (auto h : cfg.hidden) {
            encoder_.push_back(make_dense(width, h, rng));
            width = h;
        }
        encoder_.push_back(make_dense(width, cfg.latent_width(), rng));
        width = cfg.latent_width();
        for (auto it = cfg.hidden.rbegin(); it != cfg.hidden.rend(); ++it) {
            decoder_.push_back(make_dense(width, *it, rng));
            width = *it;
        }
        decoder_.push_back(make_dense(width, cfg.input_dim, rng));
        if (cfg.bottleneck == BottleneckKind::Fsq) levels_.emplace(cfg.levels);
        if (cfg.bottleneck == BottleneckKind::Vq) codebook_.emplace(cfg.vq_size, cfg.vq_dim, rng());
    }

    const AutoencoderConfig& config() const { return cfg_; }
    BottleneckKind kind() const { return cfg_.bottleneck; }
    const std::optional<fsq::LevelsSpec>& levels() const { return levels_; }
    vq::VqCodebook* codebook() { return codebook_ ? &*codebook_ : nullptr; }
    const vq::VqCodebook* codebook() const { return codebook_ ? &*codebook_ : nullptr; }
    std::uint32_t codebook_size() const { return cfg_.codebook_size(); }

    Tensor encode(const Tensor& x) const { return mlp(encoder_, x); }
    Tensor decode(const Tensor& z) const { return mlp(decoder_, z); }

    struct BottleneckOutput {
        Tensor quantized;
        std::vector<std::uint32_t> indices;
        std::optional<vq::VqLossTerms> vq_terms;
    };

    BottleneckOutput bottleneck(const Tensor& z, bool with_losses) const {
        switch (cfg_.bottleneck) {
        case BottleneckKind::Fsq: {
            Tensor q = fsq::quantize(z, *levels_);
            // A diverged encoder yields NaN codes; leave them unindexed so the
            // non-finite loss is reported as divergence.
            std::vector<std::uint32_t> idx;
            if (std::all_of(q.values().begin(), q.values().end(), [](double v) { return std::isfinite(v); })) {
                idx = fsq::codes_to_indexes(q, *levels_);
            }
            return {std::move(q), std::move(idx), std::nullopt};
        }
        case BottleneckKind::Vq: {
            auto r = vq::vq_quantize(z, *codebook_);
            std::optional<vq::VqLossTerms> terms;
            if (with_losses) {
                auto w = cfg_.vq_weights;
                if (cfg_.vq_ema) w.codebook = 0.0;
                terms = vq::vq_losses(z, r, *codebook_, w);
            }
            return {std::move(r.quantized), std::move(r.indices), std::move(terms)};
        }
        case BottleneckKind::None: return {z, {}, std::nullopt};
        }
        throw Error("unreachable");
    }

    /// Parameters updated by the optimizer (the codebook is left out in EMA mode).
    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (const auto* stack : {&encoder_, &decoder_}) {
            for (const auto& l : *stack) {
                out.push_back(l.weight);
                out.push_back(l.bias);
            }
        }
        if (codebook_ && !cfg_.vq_ema) out.push_back(codebook_->vectors());
        return out;
    }

    std::vector<analysis::LayerParameters> parameter_layers() const {
        std::vector<analysis::LayerParameters> out;
        for (std::size_t i = 0; i < encoder_.size(); ++i) {
            out.push_back({"encoder." + std::to_string(i), analysis::dense_parameters(encoder_[i].in(), encoder_[i].out())});
        }
        switch (cfg_.bottleneck) {
        case BottleneckKind::Fsq: out.push_back({"bottleneck.fsq", analysis::fsq_bottleneck_parameters(), true}); break;
        case BottleneckKind::Vq:
            out.push_back({"bottleneck.vq", analysis::vq_bottleneck_parameters(codebook_->size(), codebook_->dim()), true});
            break;
        case BottleneckKind::None: out.push_back({"bottleneck.none", 0, true}); break;
        }
        for (std::size_t i = 0; i < decoder_.size(); ++i) {
            out.push_back({"decoder." + std::to_string(i), analysis::dense_parameters(decoder_[i].in(), decoder_[i].out())});
        }
        return out;
    }

    /// Copy whose tensors do not require gradients, for graph-free evaluation.
    Autoencoder frozen() const {
        Autoencoder out(*this);
        for (auto& l : out.encoder_) l = frozen_copy(l);
        for (auto& l : out.decoder_) l = frozen_copy(l);
        if (codebook_) {
            auto v = codebook_->vectors().values();
            out.codebook_.emplace(codebook_->size(), codebook_->dim(), std::vector<double>(v.begin(), v.end()));
        }
        return out;
    }

    struct Evaluation {
        std::vector<std::uint32_t> tokens;
        std::vector<double> reconstruction;
    };

    Evaluation evaluate(const Dataset& data, std::size_t chunk = 2048) const {
        if (data.dim != cfg_.input_dim) throw ShapeError("autoencoder: dataset dimension does not match input_dim");
        Autoencoder model = frozen();
        Evaluation ev;
        ev.reconstruction.reserve(data.values.size());
        for (std::size_t start = 0; start < data.size(); start += chunk) {
            const std::size_t n = std::min(chunk, data.size() - start);
            Tensor x = Tensor::from({n, data.dim}, std::vector<double>(data.values.begin() + static_cast<std::ptrdiff_t>(start * data.dim),
                                                                      data.values.begin() + static_cast<std::ptrdiff_t>((start + n) * data.dim)));
            auto b = model.bottleneck(model.encode(x), false);
            Tensor xhat = model.decode(b.quantized);
            ev.tokens.insert(ev.tokens.end(), b.indices.begin(), b.indices.end());
            ev.reconstruction.insert(ev.reconstruction.end(), xhat.values().begin(), xhat.values().end());
        }
        return ev;
    }

private:
    static Tensor mlp(const std::vector<Dense>& layers, Tensor x) {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            x = layers[i](x);
            if (i + 1 < layers.size()) x = relu(x);
        }
        return x;
    }

    AutoencoderConfig cfg_;
    std::vector<Dense> encoder_;
    std::vector<Dense> decoder_;
    std::optional<fsq::LevelsSpec> levels_;
    std::optional<vq::VqCodebook> codebook_;
};

// ---- training ---------------------------------------------------------------------

struct TracePoint {
    std::uint32_t step = 0;
    double mse = 0.0;
    double usage = 0.0;
    double loss = 0.0;
    double commitment = 0.0;
    double codebook = 0.0;
    double entropy = 0.0;
    double wall_seconds = 0.0;
    std::optional<double> cost;
};

struct RunTrace {
    std::vector<TracePoint> points;

    /// step,mse,usage,cost,loss (wall time is left out so reruns are byte-identical).
    std::string to_csv() const {
        std::ostringstream os;
        os << "step,mse,usage,cost,loss\n";
        for (const auto& p : points) {
            os << p.step << ',' << analysis::format_number(p.mse) << ',' << analysis::format_number(p.usage) << ',';
            if (p.cost) os << analysis::format_number(*p.cost);
            os << ',' << analysis::format_number(p.loss) << '\n';
        }
        return os.str();
    }
};

class DivergenceError : public TrainingError {
public:
    DivergenceError(const std::string& what, RunTrace trace, std::string run = {})
        : TrainingError(what), trace_(std::move(trace)), run_(std::move(run)) {}
    const RunTrace& trace() const { return trace_; }
    /// Sweep run label ("fsq_256_seed1"), empty outside sweeps.
    const std::string& run() const { return run_; }

private:
    RunTrace trace_;
    std::string run_;
};

struct TrainResult {
    Autoencoder model;
    RunTrace trace;
    analysis::UsageReport final_usage;
};

/// MLP encoder -> bottleneck -> MLP decoder with an MSE reconstruction loss
/// plus the VQ auxiliary losses. Deterministic given cfg.seed.
inline TrainResult train_autoencoder(const AutoencoderConfig& cfg, const Dataset& train, const Dataset& heldout) {
    cfg.validate();
    if (train.size() == 0 || heldout.size() == 0) throw ConfigError("train_autoencoder: empty dataset");
    if (train.dim != cfg.input_dim || heldout.dim != cfg.input_dim) {
        throw ConfigError("train_autoencoder: dataset dimension does not match input_dim");
    }
    const auto t0 = std::chrono::steady_clock::now();
    Autoencoder model(cfg);
    Adam adam(model.parameters(), cfg.adam);
    std::mt19937_64 rng(cfg.seed ^ 0xA5A5A5A5DEADBEEFull);
    RunTrace trace;
    const double split_noise = cfg.split_noise;
    analysis::UsageReport final_usage;
    const std::uint32_t eval_every = cfg.eval_interval ? cfg.eval_interval : cfg.steps;

    std::vector<double> batch(std::size_t{cfg.batch} * cfg.input_dim);
    for (std::uint32_t step = 1; step <= cfg.steps; ++step) {
        for (std::uint32_t b = 0; b < cfg.batch; ++b) {
            const auto i = static_cast<std::size_t>(rng() % train.size());
            auto s = train.sample(i);
            std::copy(s.begin(), s.end(), batch.begin() + static_cast<std::ptrdiff_t>(b * cfg.input_dim));
        }
        Tensor x = Tensor::from({cfg.batch, cfg.input_dim}, batch);
        Tensor z = model.encode(x);
        auto bo = model.bottleneck(z, true);
        Tensor xhat = model.decode(bo.quantized);
        Tensor loss = mean(square(xhat - x));
        if (bo.vq_terms) loss = loss + bo.vq_terms->total;
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
            throw DivergenceError("training diverged at step " + std::to_string(step) + " (non-finite loss)", trace);
        }
        adam.zero_grad();
        backward(loss);
        adam.step();

        if (auto* cb = model.codebook()) {
            cb->record_usage(bo.indices);
            if (cfg.vq_ema) vq::ema_update(*cb, z.values(), bo.indices, cfg.ema_decay);
            if (cfg.split_interval && step % cfg.split_interval == 0 && step < cfg.steps && cb->unused_count() > 0) {
                const double noise = split_noise >= 0.0 ? split_noise : vq::default_split_noise(*cb);
                vq::split_codebook(*cb, cb->usage_counts, noise, rng);
            }
            if (cfg.split_interval && step % cfg.split_interval == 0) cb->reset_usage();
        }

        if (step % eval_every == 0 || step == cfg.steps) {
            auto ev = model.evaluate(heldout);
            TracePoint p;
            p.step = step;
            p.mse = analysis::reconstruction_error(heldout.values, ev.reconstruction).mse;
            if (model.kind() != BottleneckKind::None) {
                final_usage = analysis::codebook_usage(ev.tokens, model.codebook_size());
                p.usage = final_usage.usage_fraction;
            }
            p.loss = loss_value;
            if (bo.vq_terms) {
                p.commitment = bo.vq_terms->commitment;
                p.codebook = bo.vq_terms->codebook;
                p.entropy = bo.vq_terms->entropy;
            }
            p.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (!std::isfinite(p.mse)) throw DivergenceError("training diverged: non-finite held-out MSE", trace);
            trace.points.push_back(p);
        }
    }
    return {std::move(model), std::move(trace), std::move(final_usage)};
}

// ---- token models over encoded grids -------------------------------------------------

enum class TokenModelKind { Uniform, Order0, Neighborhood };

inline TokenModelKind parse_token_model(std::string_view name) {
    if (name == "uniform") return TokenModelKind::Uniform;
    if (name == "order0") return TokenModelKind::Order0;
    if (name == "neighborhood") return TokenModelKind::Neighborhood;
    throw ConfigError("unknown token model '" + std::string(name) + "'");
}

struct TokenModelConfig {
    double order0_alpha = 0.5;
    std::size_t embed_dim = 8;
    std::size_t hidden = 64;
    codec::NeighborhoodTrainOptions train{};
};

inline std::unique_ptr<codec::TokenModel> train_token_model(const codec::LabeledGrids& data, std::uint32_t vocab,
                                                            TokenModelKind kind, const TokenModelConfig& cfg = {}) {
    std::uint32_t classes = 0;
    if (!data.labels.empty()) {
        if (data.labels.size() != data.grids.size()) throw ConfigError("token model: one label per grid is required");
        classes = *std::max_element(data.labels.begin(), data.labels.end()) + 1;
    }
    switch (kind) {
    case TokenModelKind::Uniform: return std::make_unique<codec::UniformModel>(vocab);
    case TokenModelKind::Order0: {
        auto m = std::make_unique<codec::Order0Model>(vocab, classes, cfg.order0_alpha);
        m->fit(data);
        return m;
    }
    case TokenModelKind::Neighborhood: {
        auto m = std::make_unique<codec::NeighborhoodModel>(vocab, classes, cfg.embed_dim, cfg.hidden, cfg.train.seed);
        m->train(data, cfg.train);
        return m;
    }
    }
    throw Error("unreachable");
}

/// Splits a flat token stream (image-major) into grids.
inline std::vector<codec::TokenGrid> to_grids(std::span<const std::uint32_t> tokens, std::uint32_t h, std::uint32_t w) {
    const std::size_t per = std::size_t{h} * w;
    if (tokens.size() % per != 0) throw ShapeError("to_grids: token count is not a multiple of the grid size");
    std::vector<codec::TokenGrid> out;
    for (std::size_t i = 0; i < tokens.size(); i += per) {
        out.emplace_back(h, w, std::vector<std::uint32_t>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                                          tokens.begin() + static_cast<std::ptrdiff_t>(i + per)));
    }
    return out;
}

// ---- sweeps -------------------------------------------------------------------------

struct SweepConfig {
    DatasetKind dataset = DatasetKind::SyntheticTextures;
    DatasetOptions dataset_options{};
    std::vector<std::uint32_t> sizes{16, 64, 256};
    std::vector<BottleneckKind> quantizers{BottleneckKind::Fsq, BottleneckKind::Vq};
    std::vector<std::uint64_t> seeds{1};
    AutoencoderConfig base{};
    std::size_t train_samples = 50000;
    std::size_t eval_samples = 10000;
    std::uint32_t grid_h = 8;
    std::uint32_t grid_w = 8;
    std::size_t train_grids = 400;
    std::size_t eval_grids = 50;
    std::uint32_t schedule_groups = 8;
    TokenModelKind token_model = TokenModelKind::Order0;
    TokenModelConfig token_model_config{};
    std::size_t threads = 1;

    void validate() const {
        if (sizes.empty() || quantizers.empty() || seeds.empty()) throw ConfigError("sweep: sizes, quantizers and seeds are required");
        for (auto q : quantizers) {
            if (q == BottleneckKind::None) throw ConfigError("sweep: quantizer 'none' has no codebook");
        }
        for (auto s : sizes) {
            if (s < 2) throw ConfigError("sweep: codebook sizes must be at least 2");
        }
        if (train_samples == 0 || eval_samples == 0 || train_grids == 0 || eval_grids == 0) {
            throw ConfigError("sweep: sample counts must be positive");
        }
        if (schedule_groups == 0 || schedule_groups > grid_h * grid_w) throw ConfigError("sweep: invalid schedule group count");
    }
};

struct RunOutcome {
    analysis::RunSummary summary;
    RunTrace trace;
};

/// FSQ levels for a target size; VQ uses the target directly.
inline AutoencoderConfig configure_run(const SweepConfig& cfg, BottleneckKind q, std::uint32_t size, std::uint64_t seed) {
    AutoencoderConfig ac = cfg.base;
    ac.bottleneck = q;
    ac.seed = seed;
    if (q == BottleneckKind::Fsq) {
        try {
            auto spec = fsq::recommend_levels(size);
            ac.levels.assign(spec.levels().begin(), spec.levels().end());
        } catch (const DomainError& e) {
            throw ConfigError(e.what());
        }
    } else {
        ac.vq_size = size;
    }
    return ac;
}

inline std::string run_label(BottleneckKind q, std::uint32_t size, std::uint64_t seed) {
    return to_string(q) + "_" + std::to_string(size) + "_seed" + std::to_string(seed);
}

inline RunOutcome run_experiment(const SweepConfig& cfg, BottleneckKind q, std::uint32_t size, std::uint64_t seed) {
    const std::uint64_t data_seed = seed * 0x9E3779B97F4A7C15ull;
    auto train = make_dataset(cfg.dataset, cfg.train_samples, data_seed + 1, cfg.dataset_options);
    auto heldout = make_dataset(cfg.dataset, cfg.eval_samples, data_seed + 2, cfg.dataset_options);
    auto ac = configure_run(cfg, q, size, seed);
    auto result = [&] {
        try {
            return train_autoencoder(ac, train, heldout);
        } catch (const DivergenceError& e) {
            throw DivergenceError(run_label(q, size, seed) + ": " + e.what(), e.trace(), run_label(q, size, seed));
        }
    }();
    const Autoencoder& model = result.model;

    auto train_grids = make_grid_dataset(cfg.dataset, cfg.train_grids, cfg.grid_h, cfg.grid_w, data_seed + 3, cfg.dataset_options);
    auto eval_grids = make_grid_dataset(cfg.dataset, cfg.eval_grids, cfg.grid_h, cfg.grid_w, data_seed + 4, cfg.dataset_options);
    codec::LabeledGrids corpus{to_grids(model.evaluate(train_grids.patches).tokens, cfg.grid_h, cfg.grid_w), {}};
    auto eval_tokens = to_grids(model.evaluate(eval_grids.patches).tokens, cfg.grid_h, cfg.grid_w);
    auto tm_cfg = cfg.token_model_config;
    tm_cfg.train.seed = seed;
    auto token_model = train_token_model(corpus, model.codebook_size(), cfg.token_model, tm_cfg);
    auto sched = codec::deterministic_schedule(cfg.grid_h, cfg.grid_w, cfg.schedule_groups);
    double bits = 0.0;
    for (const auto& g : eval_tokens) bits += codec::compression_cost(g, *token_model, sched);
    bits /= static_cast<double>(eval_tokens.size());

    RunOutcome out;
    out.trace = std::move(result.trace);
    out.trace.points.back().cost = bits;
    auto& s = out.summary;
    s.quantizer = to_string(q);
    s.target_size = size;
    s.codebook_size = model.codebook_size();
    s.config = q == BottleneckKind::Fsq ? fsq::LevelsSpec(ac.levels).to_string()
                                         : std::to_string(ac.vq_size) + "x" + std::to_string(ac.vq_dim);
    s.seed = seed;
    s.mse = out.trace.points.back().mse;
    s.usage = out.trace.points.back().usage;
    s.compression_cost = bits;
    s.bits_per_token = bits / (double(cfg.grid_h) * cfg.grid_w);
    auto params = analysis::parameter_count(model);
    s.parameters = params.total();
    s.bottleneck_parameters = params.bottleneck();
    return out;
}

/// Every (size, quantizer, seed) combination, in that nesting order. Runs are
/// independent and may execute on `cfg.threads` workers.
inline std::vector<RunOutcome> sweep(const SweepConfig& cfg,
                                     const std::function<void(const RunOutcome&)>& on_done = {}) {
    cfg.validate();
    struct Job {
        std::uint32_t size;
        BottleneckKind q;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (auto size : cfg.sizes) {
        for (auto q : cfg.quantizers) {
            for (auto seed : cfg.seeds) jobs.push_back({size, q, seed});
        }
    }
    // Resolve configurations up front so invalid sizes fail before any training.
    for (const auto& j : jobs) (void)configure_run(cfg, j.q, j.size, j.seed);

    std::vector<RunOutcome> results(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex callback_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            try {
                results[i] = run_experiment(cfg, jobs[i].q, jobs[i].size, jobs[i].seed);
                if (on_done) {
                    std::lock_guard lock(callback_mutex);
                    on_done(results[i]);
                }
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n_threads = std::clamp<std::size_t>(cfg.threads, 1, jobs.size());
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return results;
}

} // namespace quantlab::bench
