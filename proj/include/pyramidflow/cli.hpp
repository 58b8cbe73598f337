#pragma once

// Command-line entry points. Exit codes: 0 success, 1 runtime failure,
// 2 usage or configuration error.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pyramidflow/checkpoint.hpp"
#include "pyramidflow/config.hpp"
#include "pyramidflow/dataset.hpp"
#include "pyramidflow/io.hpp"
#include "pyramidflow/metrics.hpp"
#include "pyramidflow/model.hpp"
#include "pyramidflow/netpbm.hpp"
#include "pyramidflow/synth.hpp"
#include "pyramidflow/training.hpp"

namespace pyramidflow::cli {

namespace fs = std::filesystem;

struct SynthArgs {
    std::string out;
    std::size_t n = 0, size = 64;
    std::uint64_t seed = 0;
    double defect_rate = 0.5;
    std::string texture = "grating";
};

struct TrainArgs {
    std::string data, config, ckpt, loss_log, backward = "reversible";
    std::size_t steps = 0;
    bool augment = false;
    bool quiet = false;
};

struct TemplateArgs {
    std::string ckpt, data, out;
};

struct EvalArgs {
    std::string ckpt, tmpl, data, metrics, maps;
};

struct BenchArgs {
    std::string depths = "1:8", config, out;
    std::size_t size = 0;
};

inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

// ---------------------------------------------------------------------------

inline int run_synth(const SynthArgs& a, std::ostream& out) {
    synth::SynthConfig cfg;
    cfg.size = a.size;
    cfg.seed = a.seed;
    cfg.defect_rate = a.defect_rate;
    if (a.texture == "grating") cfg.texture = synth::Texture::Grating;
    else if (a.texture == "value-noise") cfg.texture = synth::Texture::ValueNoise;
    else throw ConfigError("--texture must be grating or value-noise");
    const auto sum = synth::generate(a.out, cfg, a.n);
    out << "wrote " << sum.train << " train, " << sum.test_good << " good test and " << sum.test_defective
        << " defective test images to " << a.out << "\n";
    if (!sum.aupro_valid) out << "warning: no defective test images; AUPRO is undefined for this split\n";
    return 0;
}

template <typename T>
int train_impl(const TrainArgs& a, const RunConfig& rc, std::ostream& out) {
    const auto train = load_train<T>(a.data, rc.in_channels);
    const auto& first = train.front().image;
    auto model = PyramidFlowModel<T>::build(rc.model(first.h(), first.w()));
    AdamConfig adam;
    adam.lr = rc.lr;
    AdamOptimizer<T> opt(adam);
    TrainOptions options;
    options.loss = rc.loss;
    if (a.backward == "reversible") options.backward = BackwardMode::Reversible;
    else if (a.backward == "standard") options.backward = BackwardMode::Standard;
    else throw ConfigError("--backward must be reversible or standard");

    const std::size_t steps = a.steps ? a.steps : rc.steps;
    std::mt19937_64 rng(rc.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    std::string log = "step,loss,grad_norm\n";
    const auto start = std::chrono::steady_clock::now();
    double window = 0;
    for (std::size_t step = 1; step <= steps; ++step) {
        std::size_t i = pick(rng), j = pick(rng);
        if (train.size() > 1) {
            while (j == i) j = pick(rng);
        }
        Tensor4<T> img_a = train[i].image, img_b = train[j].image;
        if (a.augment) {
            img_a = augment(img_a, rng);
            img_b = augment(img_b, rng);
        }
        const auto r = train_step(model, img_a, img_b, opt, options);
        log += std::to_string(step) + "," + format_double(r.loss) + "," + format_double(r.grad_norm) + "\n";
        window += r.loss;
        if (!a.quiet && (step % 100 == 0 || step == steps)) {
            const std::size_t span = step % 100 == 0 ? 100 : step % 100;
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            out << "step " << step << "/" << steps << "  loss " << format_double(window / span) << "  ("
                << format_double(secs) << " s)\n";
            window = 0;
        }
    }
    checkpoint::save_model(a.ckpt, model, &opt);
    if (!a.loss_log.empty()) io::write_file_atomic(a.loss_log, std::string_view(log));
    out << "saved checkpoint " << a.ckpt << "\n";
    return 0;
}

inline int run_train(const TrainArgs& a, std::ostream& out) {
    const RunConfig rc = load_config(a.config);
    return rc.precision == Precision::F32 ? train_impl<float>(a, rc, out) : train_impl<double>(a, rc, out);
}

template <typename T>
int template_impl(const TemplateArgs& a, const std::vector<checkpoint::Entry>& entries, std::ostream& out) {
    AdamOptimizer<T> unused;  // training state is accepted but not needed here
    auto model = checkpoint::model_from_entries<T>(entries, &unused);
    const auto train = load_train<T>(a.data, model.config().in_channels);
    TemplateAccumulator<T> acc;
    for (const auto& item : train) acc.add(model.forward(item.image, Mode::Eval));
    const auto tmpl = acc.result();
    checkpoint::save_template(a.out, model.config(), tmpl);
    out << "template from " << tmpl.sample_count << " images written to " << a.out << "\n";
    return 0;
}

inline int run_template(const TemplateArgs& a, std::ostream& out) {
    const auto entries = checkpoint::read(a.ckpt);
    return checkpoint::stored_precision(entries) == checkpoint::DType::F32 ? template_impl<float>(a, entries, out)
                                                                           : template_impl<double>(a, entries, out);
}

template <typename T>
int eval_impl(const EvalArgs& a, const std::vector<checkpoint::Entry>& entries, std::ostream& out) {
    AdamOptimizer<T> unused;  // training state is accepted but not needed here
    auto model = checkpoint::model_from_entries<T>(entries, &unused);
    const auto tmpl = checkpoint::load_template<T>(a.tmpl, model.config());
    const auto test = load_test<T>(a.data, model.config().in_channels);

    std::string csv = "image_id,auroc,aupro\n";
    std::vector<double> all_scores;
    std::vector<std::uint8_t> all_labels;
    double auroc_sum = 0, aupro_sum = 0;
    std::size_t defective = 0;
    for (const auto& item : test) {
        const Tensor4<T> map = anomaly_map(model, tmpl, item.image);
        std::vector<double> scores(map.values().begin(), map.values().end());
        if (!a.maps.empty()) {
            netpbm::write_score_map(fs::path(a.maps) / (item.id + ".pgm"), map);
        }
        double auroc = std::numeric_limits<double>::quiet_NaN(), pro = auroc;
        const bool has_anomaly = item.has_anomaly();
        const bool has_normal = std::any_of(item.mask.begin(), item.mask.end(), [](auto v) { return v == 0; });
        if (has_anomaly && has_normal) {
            auroc = pixel_auroc(scores, item.mask);
            pro = aupro(scores, item.mask, map.h(), map.w());
            auroc_sum += auroc;
            aupro_sum += pro;
            ++defective;
        }
        all_scores.insert(all_scores.end(), scores.begin(), scores.end());
        all_labels.insert(all_labels.end(), item.mask.begin(), item.mask.end());
        csv += item.id + "," + format_double(auroc) + "," + format_double(pro) + "\n";
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const double mean_auroc = defective ? auroc_sum / defective : nan;
    const double mean_aupro = defective ? aupro_sum / defective : nan;
    double pooled_auroc = nan, pooled_aupro = nan;
    if (defective) {
        // Pooled over every test pixel, normal images included: the standard
        // whole-split figures.
        std::size_t offset = 0;
        std::vector<ScoredMask> everything;
        for (const auto& item : test) {
            const std::size_t n = item.mask.size();
            everything.push_back({std::vector<double>(all_scores.begin() + offset, all_scores.begin() + offset + n),
                                  item.mask, item.image.h(), item.image.w()});
            offset += n;
        }
        pooled_auroc = pixel_auroc(all_scores, all_labels);
        pooled_aupro = aupro_pooled(everything);
    }
    csv += "mean," + format_double(mean_auroc) + "," + format_double(mean_aupro) + "\n";
    csv += "pooled," + format_double(pooled_auroc) + "," + format_double(pooled_aupro) + "\n";
    io::write_file_atomic(a.metrics, std::string_view(csv));
    out << "evaluated " << test.size() << " images (" << defective << " defective)\n"
        << "pixel AUROC pooled " << format_double(pooled_auroc) << ", per-image mean " << format_double(mean_auroc)
        << "\nAUPRO pooled " << format_double(pooled_aupro) << ", per-image mean " << format_double(mean_aupro) << "\n";
    return 0;
}

inline int run_eval(const EvalArgs& a, std::ostream& out) {
    const auto entries = checkpoint::read(a.ckpt);
    return checkpoint::stored_precision(entries) == checkpoint::DType::F32 ? eval_impl<float>(a, entries, out)
                                                                           : eval_impl<double>(a, entries, out);
}

inline std::pair<std::size_t, std::size_t> parse_range(const std::string& s) {
    const auto colon = s.find(':');
    try {
        std::size_t pos = 0;
        if (colon == std::string::npos) {
            const auto v = std::stoul(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return {v, v};
        }
        const auto lo = std::stoul(s.substr(0, colon), &pos);
        if (pos != colon) throw std::invalid_argument(s);
        const auto hi = std::stoul(s.substr(colon + 1), &pos);
        if (pos != s.size() - colon - 1) throw std::invalid_argument(s);
        if (lo < 1 || hi < lo) throw std::invalid_argument(s);
        return {lo, hi};
    } catch (const std::logic_error&) {
        throw ConfigError("--depths must look like LO:HI with 1 <= LO <= HI (got '" + s + "')");
    }
}

template <typename T>
int bench_impl(const BenchArgs& a, const RunConfig& rc, std::ostream& out) {
    const auto [lo, hi] = parse_range(a.depths);
    const std::size_t size = a.size ? a.size : (std::size_t{4} << (rc.levels - 1));
    std::string csv = "mode,depth,peak_buffers,bytes\n";
    for (const BackwardMode mode : {BackwardMode::Reversible, BackwardMode::Standard}) {
        for (std::size_t depth = lo; depth <= hi; ++depth) {
            RunConfig c = rc;
            c.depth = depth;
            auto model = PyramidFlowModel<T>::build(c.model(size, size));
            std::mt19937_64 rng(rc.seed + depth);
            std::uniform_real_distribution<double> u01(0.0, 1.0);
            Tensor4<T> img_a({1, c.in_channels, size, size}), img_b(img_a.shape());
            for (auto& v : img_a.values()) v = static_cast<T>(u01(rng));
            for (auto& v : img_b.values()) v = static_cast<T>(u01(rng));
            TrainOptions options;
            options.backward = mode;
            options.loss = rc.loss;
            const auto pg = pair_gradients(model, img_a, img_b, options);
            csv += std::string(to_string(mode)) + "," + std::to_string(depth) + "," +
                   std::to_string(pg.memory.peak_buffers) + "," + std::to_string(pg.memory.bytes) + "\n";
        }
    }
    io::write_file_atomic(a.out, std::string_view(csv));
    out << "wrote " << a.out << "\n";
    return 0;
}

inline int run_bench(const BenchArgs& a, std::ostream& out) {
    const RunConfig rc = load_config(a.config);
    return rc.precision == Precision::F32 ? bench_impl<float>(a, rc, out) : bench_impl<double>(a, rc, out);
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"PyramidFlow anomaly localization"};
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic defect-texture dataset");
    synth_cmd->add_option("--out", sa.out, "Output directory")->required();
    synth_cmd->add_option("--n", sa.n, "Number of train images (and test images)")
        ->required()
        ->check(CLI::PositiveNumber);
    synth_cmd->add_option("--size", sa.size, "Image side length")->required();
    synth_cmd->add_option("--seed", sa.seed, "RNG seed")->required();
    synth_cmd->add_option("--defect-rate", sa.defect_rate, "Fraction of defective test images")
        ->check(CLI::Range(0.0, 1.0));
    synth_cmd->add_option("--texture", sa.texture, "grating or value-noise");

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "Train a model on train/good");
    train_cmd->add_option("--data", ta.data, "Dataset root")->required();
    train_cmd->add_option("--config", ta.config, "key = value config file")->required();
    train_cmd->add_option("--ckpt", ta.ckpt, "Checkpoint output path")->required();
    train_cmd->add_option("--steps", ta.steps, "Override the configured step count");
    train_cmd->add_flag("--augment", ta.augment, "Random flips and rotations");
    train_cmd->add_option("--loss-log", ta.loss_log, "Write per-step loss CSV");
    train_cmd->add_option("--backward", ta.backward, "reversible or standard");
    train_cmd->add_flag("--quiet", ta.quiet, "No progress output");

    TemplateArgs pa;
    auto* tmpl_cmd = app.add_subcommand("template", "Fit the latent template on train/good");
    tmpl_cmd->add_option("--ckpt", pa.ckpt, "Checkpoint")->required();
    tmpl_cmd->add_option("--data", pa.data, "Dataset root")->required();
    tmpl_cmd->add_option("--out", pa.out, "Template output path")->required();

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "Score the test split");
    eval_cmd->add_option("--ckpt", ea.ckpt, "Checkpoint")->required();
    eval_cmd->add_option("--template", ea.tmpl, "Template file")->required();
    eval_cmd->add_option("--data", ea.data, "Dataset root")->required();
    eval_cmd->add_option("--metrics", ea.metrics, "Metrics CSV output")->required();
    eval_cmd->add_option("--maps", ea.maps, "Directory for 16-bit score maps");

    BenchArgs ba;
    auto* bench_cmd = app.add_subcommand("bench-mem", "Activation-count sweep over depth");
    bench_cmd->add_option("--depths", ba.depths, "Depth range LO:HI");
    bench_cmd->add_option("--config", ba.config, "key = value config file")->required();
    bench_cmd->add_option("--out", ba.out, "CSV output")->required();
    bench_cmd->add_option("--size", ba.size, "Image side length (default 4 * 2^(L-1))");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 2;
    }

    try {
        if (*synth_cmd) return run_synth(sa, out);
        if (*train_cmd) return run_train(ta, out);
        if (*tmpl_cmd) return run_template(pa, out);
        if (*eval_cmd) return run_eval(ea, out);
        if (*bench_cmd) return run_bench(ba, out);
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace pyramidflow::cli
