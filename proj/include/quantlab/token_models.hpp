#pragma once

// Desk-scale token models for the codec and the sampler:
//   * Order0Model: smoothed symbol frequencies, optionally one table per class.
//   * NeighborhoodModel: an MLP over the 3x3 neighborhood of a position, where
//     masked neighbors and positions outside the grid are special symbols.
// Both serialize to JSON.

#include "quantlab/codec.hpp"
#include "quantlab/error.hpp"
#include "quantlab/optim.hpp"
#include "quantlab/tensor.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace quantlab::codec {

struct LabeledGrids {
    std::vector<TokenGrid> grids;
    /// Empty, or one class label per grid.
    std::vector<std::uint32_t> labels;
};

class Order0Model final : public TokenModel {
public:
    /// `alpha` is the additive smoothing pseudo-count.
    Order0Model(std::uint32_t vocab, std::uint32_t num_classes = 0, double alpha = 0.5)
        : vocab_(vocab), classes_(num_classes), alpha_(alpha),
          counts_(std::size_t{num_classes + 1}, std::vector<double>(vocab, 0.0)) {
        if (vocab == 0) throw DomainError("order-0 model: vocabulary must be non-empty");
        if (!(alpha > 0.0)) throw DomainError("order-0 model: smoothing must be positive");
    }

    void fit(const LabeledGrids& data) {
        for (std::size_t g = 0; g < data.grids.size(); ++g) {
            data.grids[g].check_range(vocab_);
            for (auto t : data.grids[g].tokens) {
                counts_[classes_][t] += 1.0;
                if (classes_ > 0 && !data.labels.empty()) counts_.at(data.labels.at(g))[t] += 1.0;
            }
        }
    }

    std::uint32_t vocab_size() const override { return vocab_; }
    std::uint32_t num_classes() const override { return classes_; }
    double alpha() const { return alpha_; }

    void predict(const TokenGrid&, std::span<const std::uint8_t>, std::span<const std::uint32_t> positions,
                 std::optional<std::uint32_t> label, std::span<double> logits) const override {
        const auto& table = counts_[label && *label < classes_ ? *label : classes_];
        double total = 0.0;
        for (double c : table) total += c;
        const double denom = std::log(total + alpha_ * vocab_);
        for (std::size_t i = 0; i < positions.size(); ++i) {
            for (std::uint32_t t = 0; t < vocab_; ++t) logits[i * vocab_ + t] = std::log(table[t] + alpha_) - denom;
        }
    }

    nlohmann::json to_json() const {
        return {{"kind", "order0"}, {"vocab", vocab_}, {"classes", classes_}, {"alpha", alpha_}, {"counts", counts_}};
    }

    static Order0Model from_json(const nlohmann::json& j) {
        Order0Model m(j.at("vocab").get<std::uint32_t>(), j.value("classes", 0u), j.value("alpha", 0.5));
        auto counts = j.at("counts").get<std::vector<std::vector<double>>>();
        if (counts.size() != m.counts_.size()) throw DomainError("order-0 model: count tables do not match classes");
        for (const auto& row : counts) {
            if (row.size() != m.vocab_) throw DomainError("order-0 model: count table size does not match vocab");
            for (double c : row) {
                if (!(c >= 0.0)) throw DomainError("order-0 model: negative count");
            }
        }
        m.counts_ = std::move(counts);
        return m;
    }

private:
    std::uint32_t vocab_;
    std::uint32_t classes_;
    double alpha_;
    std::vector<std::vector<double>> counts_; // classes_ + 1 tables; the last pools every grid
};

struct NeighborhoodTrainOptions {
    std::uint32_t steps = 400;
    std::uint32_t batch_grids = 16;
    double lr = 3e-3;
    /// Fraction of labels replaced by the null class during training.
    double label_drop = 0.1;
    std::uint64_t seed = 0;
};

class NeighborhoodModel final : public TokenModel {
public:
    static constexpr std::size_t kNeighbors = 8;

    NeighborhoodModel(std::uint32_t vocab, std::uint32_t num_classes, std::size_t embed_dim, std::size_t hidden,
                      std::uint64_t seed)
        : vocab_(vocab), classes_(num_classes), embed_(embed_dim), hidden_(hidden) {
        if (vocab == 0 || embed_dim == 0 || hidden == 0) throw DomainError("neighborhood model: empty dimension");
        std::mt19937_64 rng(seed);
        auto init = [&](Shape shape, double scale) {
            std::normal_distribution<double> normal(0.0, scale);
            std::vector<double> v(numel(shape));
            for (auto& x : v) x = normal(rng);
            return Tensor::from(std::move(shape), std::move(v), true);
        };
        const std::size_t in = input_dim();
        embedding_ = init({std::size_t{vocab} + 2, embed_dim}, 1.0 / std::sqrt(static_cast<double>(embed_dim)));
        class_embedding_ = init({std::size_t{num_classes} + 1, embed_dim}, 1.0 / std::sqrt(static_cast<double>(embed_dim)));
        w1_ = init({in, hidden}, std::sqrt(2.0 / static_cast<double>(in)));
        b1_ = Tensor::zeros({hidden}, true);
        w2_ = init({hidden, vocab}, 1.0 / std::sqrt(static_cast<double>(hidden)));
        b2_ = Tensor::zeros({vocab}, true);
    }

    std::uint32_t vocab_size() const override { return vocab_; }
    std::uint32_t num_classes() const override { return classes_; }

    void predict(const TokenGrid& grid, std::span<const std::uint8_t> revealed, std::span<const std::uint32_t> positions,
                 std::optional<std::uint32_t> label, std::span<double> logits) const override {
        const std::size_t n = positions.size();
        const std::size_t in = input_dim();
        std::vector<double> x(n * in);
        auto emb = embedding_.values();
        auto cls = class_embedding_.values();
        std::vector<std::size_t> symbols;
        for (std::size_t i = 0; i < n; ++i) {
            symbols.clear();
            neighbor_symbols(grid, revealed, positions[i], symbols);
            double* row = x.data() + i * in;
            for (std::size_t s = 0; s < kNeighbors; ++s) {
                std::copy_n(emb.data() + symbols[s] * embed_, embed_, row + s * embed_);
            }
            const std::size_t c = class_index(label);
            std::copy_n(cls.data() + c * embed_, embed_, row + kNeighbors * embed_);
        }
        std::vector<double> h(n * hidden_);
        dense(x, in, w1_.values(), b1_.values(), hidden_, h, true);
        dense(h, hidden_, w2_.values(), b2_.values(), vocab_, logits, false);
    }

    /// Minimizes masked cross-entropy with masking ratios drawn from U[r_min, 1].
    void train(const LabeledGrids& data, const NeighborhoodTrainOptions& opts) {
        if (data.grids.empty()) throw DomainError("neighborhood model: no training grids");
        for (const auto& g : data.grids) g.check_range(vocab_);
        std::mt19937_64 rng(opts.seed);
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        Adam adam(parameters(), AdamConfig{opts.lr});
        std::vector<std::uint32_t> perm;
        for (std::uint32_t step = 0; step < opts.steps; ++step) {
            std::vector<std::size_t> symbol_rows, class_rows, targets;
            for (std::uint32_t b = 0; b < opts.batch_grids; ++b) {
                const auto gi = static_cast<std::size_t>(rng() % data.grids.size());
                const auto& grid = data.grids[gi];
                const auto s = static_cast<std::uint32_t>(grid.size());
                const std::uint32_t n_masked = std::max(1u, cosine_mask_count(sample_masking_ratio(rng), s));
                perm.resize(s);
                std::iota(perm.begin(), perm.end(), 0u);
                for (std::uint32_t i = 0; i < n_masked; ++i) {
                    const auto j = i + static_cast<std::uint32_t>(rng() % (s - i));
                    std::swap(perm[i], perm[j]);
                }
                std::vector<std::uint8_t> revealed(s, 1);
                for (std::uint32_t i = 0; i < n_masked; ++i) revealed[perm[i]] = 0;
                std::optional<std::uint32_t> label;
                if (classes_ > 0 && !data.labels.empty() && uni(rng) >= opts.label_drop) label = data.labels.at(gi);
                for (std::uint32_t i = 0; i < n_masked; ++i) {
                    neighbor_symbols(grid, revealed, perm[i], symbol_rows);
                    class_rows.push_back(class_index(label));
                    targets.push_back(grid.tokens[perm[i]]);
                }
            }
            const std::size_t n = targets.size();
            Tensor neighbors = reshape(gather_rows(embedding_, symbol_rows), {n, kNeighbors * embed_});
            Tensor classes = gather_rows(class_embedding_, class_rows);
            Tensor x = concat_cols(neighbors, classes);
            Tensor h = relu(matmul(x, w1_) + b1_);
            Tensor logits = matmul(h, w2_) + b2_;
            Tensor loss = neg(mean(pick_columns(log_softmax(logits), targets)));
            if (!std::isfinite(loss.item())) throw TrainingError("neighborhood model: non-finite loss");
            adam.zero_grad();
            backward(loss);
            adam.step();
            last_loss_ = loss.item();
        }
    }

    double last_loss() const { return last_loss_; }

    std::vector<Tensor> parameters() const { return {embedding_, class_embedding_, w1_, b1_, w2_, b2_}; }

    nlohmann::json to_json() const {
        auto vals = [](const Tensor& t) { return std::vector<double>(t.values().begin(), t.values().end()); };
        return {{"kind", "neighborhood"},
                {"vocab", vocab_},
                {"classes", classes_},
                {"embed", embed_},
                {"hidden", hidden_},
                {"embedding", vals(embedding_)},
                {"class_embedding", vals(class_embedding_)},
                {"w1", vals(w1_)},
                {"b1", vals(b1_)},
                {"w2", vals(w2_)},
                {"b2", vals(b2_)}};
    }

    static NeighborhoodModel from_json(const nlohmann::json& j) {
        NeighborhoodModel m(j.at("vocab").get<std::uint32_t>(), j.value("classes", 0u), j.at("embed").get<std::size_t>(),
                            j.at("hidden").get<std::size_t>(), 0);
        auto load = [&](Tensor& t, const char* key) {
            auto v = j.at(key).get<std::vector<double>>();
            if (v.size() != t.size()) throw DomainError(std::string("neighborhood model: bad size for ") + key);
            t = Tensor::from(t.shape(), std::move(v), true);
        };
        load(m.embedding_, "embedding");
        load(m.class_embedding_, "class_embedding");
        load(m.w1_, "w1");
        load(m.b1_, "b1");
        load(m.w2_, "w2");
        load(m.b2_, "b2");
        return m;
    }

private:
    std::size_t input_dim() const { return (kNeighbors + 1) * embed_; }
    std::size_t mask_symbol() const { return vocab_; }
    std::size_t outside_symbol() const { return std::size_t{vocab_} + 1; }
    std::size_t class_index(std::optional<std::uint32_t> label) const {
        return label && *label < classes_ ? *label : classes_;
    }

    void neighbor_symbols(const TokenGrid& grid, std::span<const std::uint8_t> revealed, std::uint32_t pos,
                          std::vector<std::size_t>& out) const {
        const auto row = static_cast<std::int64_t>(pos / grid.width);
        const auto col = static_cast<std::int64_t>(pos % grid.width);
        for (std::int64_t dr = -1; dr <= 1; ++dr) {
            for (std::int64_t dc = -1; dc <= 1; ++dc) {
                if (dr == 0 && dc == 0) continue;
                const auto r = row + dr, c = col + dc;
                if (r < 0 || c < 0 || r >= grid.height || c >= grid.width) {
                    out.push_back(outside_symbol());
                    continue;
                }
                const auto p = static_cast<std::size_t>(r * grid.width + c);
                out.push_back(revealed[p] ? grid.tokens[p] : mask_symbol());
            }
        }
    }

    static void dense(std::span<const double> x, std::size_t in, std::span<const double> w, std::span<const double> b,
                      std::size_t out, std::span<double> y, bool apply_relu) {
        const std::size_t n = x.size() / in;
        for (std::size_t i = 0; i < n; ++i) {
            double* yr = y.data() + i * out;
            std::copy(b.begin(), b.end(), yr);
            for (std::size_t p = 0; p < in; ++p) {
                const double s = x[i * in + p];
                if (s == 0.0) continue;
                const double* wr = w.data() + p * out;
                for (std::size_t j = 0; j < out; ++j) yr[j] += s * wr[j];
            }
            if (apply_relu) {
                for (std::size_t j = 0; j < out; ++j) yr[j] = yr[j] > 0.0 ? yr[j] : 0.0;
            }
        }
    }

    std::uint32_t vocab_;
    std::uint32_t classes_;
    std::size_t embed_;
    std::size_t hidden_;
    Tensor embedding_;
    Tensor class_embedding_;
    Tensor w1_, b1_, w2_, b2_;
    double last_loss_ = 0.0;
};

inline nlohmann::json model_to_json(const TokenModel& model) {
    if (auto* m = dynamic_cast<const Order0Model*>(&model)) return m->to_json();
    if (auto* m = dynamic_cast<const NeighborhoodModel*>(&model)) return m->to_json();
    if (dynamic_cast<const UniformModel*>(&model)) return {{"kind", "uniform"}, {"vocab", model.vocab_size()}};
    throw DomainError("token model: type cannot be serialized");
}

inline std::unique_ptr<TokenModel> model_from_json(const nlohmann::json& j) {
    try {
        const auto kind = j.at("kind").get<std::string>();
        if (kind == "uniform") return std::make_unique<UniformModel>(j.at("vocab").get<std::uint32_t>());
        if (kind == "order0") return std::make_unique<Order0Model>(Order0Model::from_json(j));
        if (kind == "neighborhood") return std::make_unique<NeighborhoodModel>(NeighborhoodModel::from_json(j));
        throw DomainError("token model: unknown kind '" + kind + "'");
    } catch (const nlohmann::json::exception& e) {
        throw DomainError(std::string("token model: ") + e.what());
    }
}

} // namespace quantlab::codec
