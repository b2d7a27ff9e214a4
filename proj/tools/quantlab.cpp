// quantlab command-line tool: sweeps, FSQ quantization of tensor files,
// entropy coding of token grids, and the self-check suite.

#include "quantlab/quantlab.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using namespace quantlab;

namespace {

enum ExitCode { kOk = 0, kSelfcheckFailed = 1, kConfigError = 2, kTrainingError = 3, kCodecError = 4 };

template <class T>
std::vector<T> parse_list(const std::string& text, const std::string& what) {
    std::vector<T> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto comma = text.find(',', pos);
        const auto item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        try {
            std::size_t used = 0;
            const auto v = std::stoull(item, &used);
            if (used != item.size() || item.empty() || item.front() == '-') throw std::invalid_argument(item);
            out.push_back(static_cast<T>(v));
        } catch (const std::exception&) {
            throw ConfigError(what + ": '" + item + "' is not a non-negative integer");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

std::vector<std::string> parse_names(const std::string& text) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (true) {
        const auto comma = text.find(',', pos);
        out.push_back(text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
        if (comma == std::string::npos) return out;
        pos = comma + 1;
    }
}

std::size_t worker_threads(std::size_t requested) {
    std::size_t n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
    if (const char* cap = std::getenv("QUANTLAB_THREADS")) {
        const auto v = parse_list<std::size_t>(cap, "QUANTLAB_THREADS");
        if (v.size() != 1 || v[0] == 0) throw ConfigError("QUANTLAB_THREADS must be a positive integer");
        n = std::min(n, v[0]);
    }
    return n;
}

codec::TokenGrid read_tokens(const fs::path& path) { return codec::decode_token_grid(io::read_file(path)); }

std::unique_ptr<codec::TokenModel> read_model(const fs::path& path) {
    const auto bytes = io::read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("model file " + path.string() + ": " + e.what());
    }
    return codec::model_from_json(j);
}

codec::MaskSchedule schedule_for(const codec::TokenGrid& grid, std::uint32_t groups) {
    return codec::deterministic_schedule(grid.height, grid.width,
                                         std::min<std::uint32_t>(groups, grid.height * grid.width));
}

// ---- sweep -------------------------------------------------------------------------

struct SweepArgs {
    std::string dataset = "synthetic-textures";
    std::string sizes = "16,64,256";
    std::string quantizers = "fsq,vq";
    std::string seeds = "1";
    std::string out;
    std::uint32_t steps = 20000;
    std::uint32_t batch = 256;
    std::string hidden = "128,128";
    double lr = 3e-4;
    std::size_t vq_dim = 8;
    bool vq_ema = false;
    double ema_decay = 0.99;
    std::uint32_t split_interval = 0;
    double commitment_weight = 0.25;
    double codebook_weight = 1.0;
    double entropy_weight = 0.1;
    std::uint32_t eval_interval = 1000;
    std::size_t train_samples = 50000;
    std::size_t eval_samples = 10000;
    std::uint32_t grid = 8;
    std::size_t train_grids = 400;
    std::size_t eval_grids = 50;
    std::uint32_t groups = 8;
    std::string token_model = "order0";
    std::size_t threads = 0;
};

void add_sweep_options(CLI::App& cmd, SweepArgs& a) {
    cmd.add_option("--dataset", a.dataset, "gaussian-mixture, synthetic-textures or binary-shapes")->capture_default_str();
    cmd.add_option("--sizes", a.sizes, "Target codebook sizes, comma separated")->capture_default_str();
    cmd.add_option("--quantizers", a.quantizers, "Subset of fsq,vq")->capture_default_str();
    cmd.add_option("--seeds", a.seeds, "Seeds, comma separated")->capture_default_str();
    cmd.add_option("--out", a.out, "Output directory (created if missing)")->required();
    cmd.add_option("--steps", a.steps, "Training steps per run")->capture_default_str();
    cmd.add_option("--batch", a.batch, "Batch size")->capture_default_str();
    cmd.add_option("--hidden", a.hidden, "Hidden widths of the encoder, comma separated")->capture_default_str();
    cmd.add_option("--lr", a.lr, "Adam learning rate")->capture_default_str();
    cmd.add_option("--vq-dim", a.vq_dim, "VQ codeword dimension")->capture_default_str();
    cmd.add_option("--vq-ema", a.vq_ema, "EMA codebook updates (true/false)")->capture_default_str();
    cmd.add_option("--ema-decay", a.ema_decay, "EMA decay")->capture_default_str();
    cmd.add_option("--split-interval", a.split_interval, "Split unused VQ codes every N steps (0 = off)")
        ->capture_default_str();
    cmd.add_option("--commitment-weight", a.commitment_weight)->capture_default_str();
    cmd.add_option("--codebook-weight", a.codebook_weight)->capture_default_str();
    cmd.add_option("--entropy-weight", a.entropy_weight)->capture_default_str();
    cmd.add_option("--eval-interval", a.eval_interval, "Steps between held-out evaluations")->capture_default_str();
    cmd.add_option("--train-samples", a.train_samples)->capture_default_str();
    cmd.add_option("--eval-samples", a.eval_samples, "Held-out samples for MSE and usage")->capture_default_str();
    cmd.add_option("--grid", a.grid, "Side of the token grids used for compression cost")->capture_default_str();
    cmd.add_option("--train-grids", a.train_grids, "Images used to fit the token model")->capture_default_str();
    cmd.add_option("--eval-grids", a.eval_grids, "Images whose compression cost is reported")->capture_default_str();
    cmd.add_option("--groups", a.groups, "Mask schedule groups")->capture_default_str();
    cmd.add_option("--token-model", a.token_model, "uniform, order0 or neighborhood")->capture_default_str();
    cmd.add_option("--threads", a.threads, "Worker threads (0 = all cores, capped by QUANTLAB_THREADS)")
        ->capture_default_str();
}

bench::SweepConfig to_sweep_config(const SweepArgs& a) {
    bench::SweepConfig c;
    c.dataset = bench::parse_dataset_kind(a.dataset);
    c.sizes = parse_list<std::uint32_t>(a.sizes, "--sizes");
    c.quantizers.clear();
    for (const auto& q : parse_names(a.quantizers)) c.quantizers.push_back(bench::parse_bottleneck(q));
    c.seeds = parse_list<std::uint64_t>(a.seeds, "--seeds");
    auto& m = c.base;
    m.steps = a.steps;
    m.batch = a.batch;
    m.hidden = parse_list<std::size_t>(a.hidden, "--hidden");
    m.adam.lr = a.lr;
    m.vq_dim = a.vq_dim;
    m.vq_ema = a.vq_ema;
    m.ema_decay = a.ema_decay;
    m.split_interval = a.split_interval;
    m.vq_weights.commitment = a.commitment_weight;
    m.vq_weights.codebook = a.codebook_weight;
    m.vq_weights.entropy = a.entropy_weight;
    m.eval_interval = a.eval_interval;
    c.train_samples = a.train_samples;
    c.eval_samples = a.eval_samples;
    c.grid_h = c.grid_w = a.grid;
    c.train_grids = a.train_grids;
    c.eval_grids = a.eval_grids;
    c.schedule_groups = a.groups;
    c.token_model = bench::parse_token_model(a.token_model);
    c.threads = worker_threads(a.threads);
    c.validate();
    m.validate();
    return c;
}

int cmd_sweep(const SweepArgs& a) {
    const auto cfg = to_sweep_config(a);
    const fs::path out(a.out);
    fs::create_directories(out / "traces");
    std::vector<analysis::RunSummary> summaries;
    try {
        auto runs = bench::sweep(cfg, [&](const bench::RunOutcome& r) {
            const auto& s = r.summary;
            const auto label = s.quantizer + "_" + std::to_string(s.target_size) + "_seed" + std::to_string(s.seed);
            io::write_file_atomic(out / "traces" / (label + ".csv"), r.trace.to_csv());
            std::cout << label << " (" << s.config << "): mse " << analysis::format_number(s.mse) << ", usage "
                      << analysis::format_number(s.usage) << ", cost " << analysis::format_number(s.compression_cost)
                      << " bits" << std::endl;
        });
        for (auto& r : runs) summaries.push_back(r.summary);
    } catch (const bench::DivergenceError& e) {
        if (!e.run().empty()) io::write_file_atomic(out / "traces" / (e.run() + ".csv"), e.trace().to_csv());
        throw;
    }
    const auto rep = analysis::report(summaries);
    io::write_file_atomic(out / "report.json", analysis::to_json(rep, summaries).dump(2) + "\n");
    io::write_file_atomic(out / "report.csv", analysis::to_csv(rep));
    for (const auto& metric : {"mse", "usage", "compression_cost"}) {
        io::write_file_atomic(out / (std::string(metric) + ".svg"), analysis::svg_line_chart(rep.metrics.at(metric), metric));
    }
    std::cout << summaries.size() << " runs, report written to " << (out / "report.json").string() << "\n";
    return kOk;
}

// ---- quantize -------------------------------------------------------------------------

struct QuantizeArgs {
    std::string levels;
    std::string input;
    std::string output;
    std::string codes;
};

int cmd_quantize(const QuantizeArgs& a) {
    const auto spec = fsq::LevelsSpec::parse(a.levels);
    const Tensor z = io::decode_tensor(io::read_file(a.input));
    if (z.rank() == 0 || z.rank() > 3 || z.shape().back() != spec.dim()) {
        throw ConfigError("quantize: tensor of shape " + shape_string(z.shape()) + " is incompatible with " +
                          std::to_string(spec.dim()) + " channels; expected (d), (N, d) or (H, W, d)");
    }
    const auto h = static_cast<std::uint32_t>(z.rank() == 3 ? z.dim(0) : 1);
    const auto w = static_cast<std::uint32_t>(z.rank() == 3 ? z.dim(1) : z.rank() == 2 ? z.dim(0) : 1);
    const Tensor q = fsq::quantize(z, spec);
    codec::TokenGrid grid(h, w, fsq::codes_to_indexes(q, spec));
    io::write_file_atomic(a.output, codec::encode_token_grid(grid));
    if (!a.codes.empty()) io::write_file_atomic(a.codes, io::encode_tensor(q));
    std::cout << grid.tokens.size() << " tokens (" << h << "x" << w << ", |C| = " << spec.codebook_size() << ")\n";
    return kOk;
}

// ---- codec -----------------------------------------------------------------------------

struct CodecArgs {
    std::string tokens;
    std::string input;
    std::string model;
    std::string output;
    std::uint32_t groups = 8;
    // fit
    std::string kind = "order0";
    std::uint32_t vocab = 0;
    std::uint32_t steps = 400;
    std::uint64_t seed = 0;
};

int cmd_compress(const CodecArgs& a) {
    const auto grid = read_tokens(a.tokens);
    const auto model = read_model(a.model);
    const auto bs = codec::compress(grid, *model, schedule_for(grid, a.groups));
    io::write_file_atomic(a.output, codec::encode_bitstream(bs));
    std::cout << bs.payload_bits() << " payload bits for " << bs.token_count << " tokens\n";
    return kOk;
}

int cmd_decompress(const CodecArgs& a) {
    const auto bs = codec::decode_bitstream(io::read_file(a.input));
    const auto model = read_model(a.model);
    const auto grid = codec::decompress(bs, *model);
    io::write_file_atomic(a.output, codec::encode_token_grid(grid));
    std::cout << grid.tokens.size() << " tokens (" << grid.height << "x" << grid.width << ")\n";
    return kOk;
}

int cmd_cost(const CodecArgs& a) {
    const auto grid = read_tokens(a.tokens);
    const auto model = read_model(a.model);
    const double bits = codec::compression_cost(grid, *model, schedule_for(grid, a.groups));
    std::cout << "bits " << analysis::format_number(bits) << "\n"
              << "bits_per_token " << analysis::format_number(bits / static_cast<double>(grid.tokens.size())) << "\n";
    return kOk;
}

int cmd_fit(const CodecArgs& a, const std::vector<std::string>& files) {
    codec::LabeledGrids corpus;
    for (const auto& f : files) corpus.grids.push_back(read_tokens(f));
    std::uint32_t largest = 0;
    for (const auto& g : corpus.grids) largest = std::max(largest, *std::max_element(g.tokens.begin(), g.tokens.end()));
    const std::uint32_t vocab = a.vocab ? a.vocab : largest + 1;
    if (largest >= vocab) throw ConfigError("codec fit: token " + std::to_string(largest) + " exceeds --vocab");
    bench::TokenModelConfig tm;
    tm.train.steps = a.steps;
    tm.train.seed = a.seed;
    const auto model = bench::train_token_model(corpus, vocab, bench::parse_token_model(a.kind), tm);
    io::write_file_atomic(a.output, codec::model_to_json(*model).dump() + "\n");
    std::cout << a.kind << " model over " << vocab << " symbols fitted on " << corpus.grids.size() << " grids\n";
    return kOk;
}

// ---- selfcheck -----------------------------------------------------------------------

int cmd_selfcheck() {
    bool ok = true;
    for (const auto& r : selfcheck::run_all()) {
        std::printf("%-4s  %-38s %8.3fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
        ok = ok && r.passed;
    }
    return ok ? kOk : kSelfcheckFailed;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"FSQ / VQ quantization lab"};
    app.require_subcommand(1);
    app.set_config("--config", "", "INI config file; sections name subcommands, e.g. [sweep] or [codec.cost]");
    app.allow_config_extras(CLI::config_extras_mode::error);

    SweepArgs sweep_args;
    auto* sweep = app.add_subcommand("sweep", "Train FSQ and VQ autoencoders over codebook sizes and seeds");
    add_sweep_options(*sweep, sweep_args);

    QuantizeArgs qa;
    auto* quantize = app.add_subcommand("quantize", "FSQ-quantize a tensor file into a token grid");
    quantize->add_option("--levels", qa.levels, "Levels per channel, e.g. 8,5,5,5")->required();
    quantize->add_option("--input", qa.input, "Tensor file")->required();
    quantize->add_option("--output", qa.output, "Token grid file")->required();
    quantize->add_option("--codes", qa.codes, "Also write the quantized codes as a tensor file");

    CodecArgs ca;
    std::vector<std::string> fit_files;
    auto* codec_cmd = app.add_subcommand("codec", "Entropy coding of token grids");
    codec_cmd->require_subcommand(1);
    auto* compress = codec_cmd->add_subcommand("compress", "Token grid to bitstream");
    compress->add_option("--tokens", ca.tokens)->required();
    compress->add_option("--model", ca.model, "Token model JSON")->required();
    compress->add_option("--output", ca.output)->required();
    compress->add_option("--groups", ca.groups, "Mask schedule groups")->capture_default_str();
    auto* decompress = codec_cmd->add_subcommand("decompress", "Bitstream to token grid");
    decompress->add_option("--input", ca.input)->required();
    decompress->add_option("--model", ca.model)->required();
    decompress->add_option("--output", ca.output)->required();
    auto* cost = codec_cmd->add_subcommand("cost", "Ideal code length of a token grid");
    cost->add_option("--tokens", ca.tokens)->required();
    cost->add_option("--model", ca.model)->required();
    cost->add_option("--groups", ca.groups)->capture_default_str();
    auto* fit = codec_cmd->add_subcommand("fit", "Fit a token model on token grid files");
    fit->add_option("--tokens", fit_files, "Token grid files")->required()->delimiter(',');
    fit->add_option("--kind", ca.kind, "uniform, order0 or neighborhood")->capture_default_str();
    fit->add_option("--vocab", ca.vocab, "Codebook size (0 = largest token + 1)")->capture_default_str();
    fit->add_option("--steps", ca.steps, "Training steps for the neighborhood model")->capture_default_str();
    fit->add_option("--seed", ca.seed)->capture_default_str();
    fit->add_option("--output", ca.output)->required();

    auto* selfcheck_cmd = app.add_subcommand("selfcheck", "Run the fast invariant suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        if (*sweep) return cmd_sweep(sweep_args);
        if (*quantize) return cmd_quantize(qa);
        if (*compress) return cmd_compress(ca);
        if (*decompress) return cmd_decompress(ca);
        if (*cost) return cmd_cost(ca);
        if (*fit) return cmd_fit(ca, fit_files);
        if (*selfcheck_cmd) return cmd_selfcheck();
    } catch (const CodecError& e) {
        std::cerr << "codec error: " << e.what() << "\n";
        return kCodecError;
    } catch (const TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return kTrainingError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kConfigError;
    }
    return kConfigError;
}
