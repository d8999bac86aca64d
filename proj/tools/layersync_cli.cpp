// layersync: command-line driver for training, sampling, evaluation, probing and
// the sweep / block-dropping / loss-benchmark protocols.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "layersync/layersync.hpp"

namespace ls = layersync;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> sets;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("-c,--config", c.config, "flat JSON run configuration");
    sub->add_option("--set", c.sets, "override a config key: key=value (repeatable)");
}

ls::RunConfig build_config(const Common& c) {
    ls::RunConfig cfg = c.config.empty() ? ls::RunConfig{} : ls::load_config(c.config);
    for (const auto& s : c.sets) ls::apply_override(cfg, s);
    return cfg;
}

// Config stored in a checkpoint, with command-line overrides on top.
ls::RunConfig checkpoint_config(const fs::path& dir, const Common& c) {
    if (!fs::exists(dir / "manifest.json")) throw std::runtime_error("checkpoint not found: " + dir.string());
    const auto meta = ls::read_archive(dir).meta;
    ls::RunConfig cfg = ls::config_from_json(meta.at("config"));
    if (!c.config.empty()) {
        std::ifstream in(c.config);
        const auto overrides = nlohmann::json::parse(in);
        for (const auto& [k, v] : overrides.items()) ls::apply_setting(cfg, k, v);
    }
    for (const auto& s : c.sets) ls::apply_override(cfg, s);
    return cfg;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void progress(const std::string& msg) { std::cerr << "[layersync] " << msg << '\n'; }

template <typename T>
int cmd_train(ls::RunConfig cfg, bool resume) {
    ls::Trainer<T> trainer(cfg);
    if (resume) {
        if (cfg.out_dir.empty()) throw std::runtime_error("--resume needs out_dir");
        auto ckpt = ls::latest_checkpoint(cfg.out_dir);
        if (!ckpt) throw std::runtime_error("no checkpoint to resume under " + cfg.out_dir);
        trainer.load_checkpoint(*ckpt);
        progress("resumed from " + ckpt->string());
    }
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        std::ofstream(fs::path(cfg.out_dir) / "config.json") << ls::config_to_json(trainer.config()).dump(2) << '\n';
    }
    trainer.run();
    const auto s = ls::summarize(trainer.log());
    if (!cfg.out_dir.empty()) ls::write_log_plot(fs::path(cfg.out_dir) / "metrics.svg", trainer.log());
    std::cout << "steps," << s.last_step << "\nvelocity_loss_tail," << fmt(s.mean_velocity_loss_tail)
              << "\nfinal_fd," << fmt(s.final_fd.value_or(NAN)) << "\nfinal_mmd," << fmt(s.final_mmd.value_or(NAN))
              << '\n';
    return 0;
}

template <typename T>
ls::Trainer<T> load_trainer(const ls::RunConfig& cfg, const fs::path& ckpt, bool ema) {
    ls::RunConfig c = cfg;
    c.out_dir.clear();  // read-only use: never touch the run's log
    ls::Trainer<T> trainer(c);
    trainer.load_params(ckpt, ema);
    return trainer;
}

template <typename T>
int cmd_sample(const ls::RunConfig& cfg, const fs::path& ckpt, bool ema, int num, std::uint64_t seed,
               const fs::path& out) {
    auto trainer = load_trainer<T>(cfg, ckpt, ema);
    const auto& c = trainer.config();
    std::vector<int> labels(static_cast<std::size_t>(num), c.backbone.null_label());
    if (c.backbone.num_classes > 0)
        for (int i = 0; i < num; ++i) labels[static_cast<std::size_t>(i)] = i % c.dataset.num_classes;
    auto x = ls::sample(trainer.model(), trainer.params(), c.sampler, labels, seed);
    ls::TensorArchive a;
    a.meta = {{"checkpoint", ckpt.string()}, {"seed", seed}, {"labels", labels}};
    a.add("samples", x);
    ls::write_archive(out, a, ls::DType::f32);
    if (c.dataset.kind == ls::DatasetKind::tiny_images) {
        ls::write_image_grid(out / (c.dataset.channels == 1 ? "grid.pgm" : "grid.ppm"), x, 16);
    } else {
        std::ofstream csv(out / "samples.csv");
        csv << "label,x,y\n";
        const auto v = x.data();
        for (int i = 0; i < num; ++i)
            csv << labels[static_cast<std::size_t>(i)] << ',' << fmt(v[2 * i]) << ',' << fmt(v[2 * i + 1]) << '\n';
    }
    std::cout << "wrote " << num << " samples to " << out.string() << '\n';
    return 0;
}

template <typename T>
int cmd_eval(const ls::RunConfig& cfg, const fs::path& ckpt, bool ema) {
    auto trainer = load_trainer<T>(cfg, ckpt, ema);
    const auto e = trainer.evaluate(trainer.params());
    std::cout << "metric,value\nfrechet_feature_distance," << fmt(e.fd) << "\nmmd_rbf," << fmt(e.mmd) << '\n';
    return 0;
}

// Top-3 principal components of each layer's patch features, one RGB tile per sample.
template <typename T>
void export_pca(const fs::path& dir, int layer, const ls::BasicTensor<T>& reps, const ls::BackboneConfig& c,
                int tiles) {
    const std::size_t n = std::min<std::size_t>(reps.size(0), static_cast<std::size_t>(tiles));
    const std::size_t p = reps.size(1), d = reps.size(2);
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(n * p), static_cast<Eigen::Index>(d));
    const auto v = reps.data();
    for (std::size_t i = 0; i < n * p; ++i)
        for (std::size_t j = 0; j < d; ++j) rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[i * d + j];
    Eigen::MatrixXd pcs = ls::pca_project(rows, 3);
    std::vector<double> img(n * 3 * p, 0.0);
    for (Eigen::Index k = 0; k < pcs.cols(); ++k) {
        const double lo = pcs.col(k).minCoeff(), hi = pcs.col(k).maxCoeff();
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t q = 0; q < p; ++q)
                img[(s * 3 + static_cast<std::size_t>(k)) * p + q] =
                    hi > lo ? (pcs(static_cast<Eigen::Index>(s * p + q), k) - lo) / (hi - lo) : 0.5;
    }
    ls::Tensor grid({n, 3, static_cast<std::size_t>(c.grid_h()), static_cast<std::size_t>(c.grid_w())}, std::move(img));
    ls::write_image_grid(dir / ("pca_layer_" + std::to_string(layer) + ".ppm"), grid, 8, 0.0, 1.0);
}

template <typename T>
int cmd_probe(const ls::RunConfig& cfg, const fs::path& ckpt, bool ema, double t, int num, const fs::path& pca_dir,
              std::uint64_t seed) {
    auto trainer = load_trainer<T>(cfg, ckpt, ema);
    const auto& c = trainer.config();
    const auto& data = trainer.dataset();
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(num), data.labels.size());
    ls::Shape s = data.samples.shape();
    s[0] = n;
    const std::size_t per = data.samples.numel() / data.labels.size();
    ls::BasicTensor<T> x0(s, std::vector<T>(data.samples.data().begin(),
                                            data.samples.data().begin() + static_cast<long>(n * per)));
    std::vector<int> labels(data.labels.begin(), data.labels.begin() + static_cast<long>(n));
    ls::TapSet layers;
    for (int k = 1; k <= c.backbone.depth; ++k) layers.insert(k);
    const auto reps = ls::extract_representations(trainer.model(), trainer.params(), x0, labels, layers, t, seed);
    const Eigen::MatrixXd last = ls::pool_patches(reps.at(c.backbone.depth));
    std::cout << "layer,noise_level,metric,value\n";
    ls::ProbeOptions opt;
    opt.seed = seed;
    for (const auto& [k, r] : reps) {
        const Eigen::MatrixXd f = ls::pool_patches(r);
        const auto probe = ls::linear_probe(f, labels, opt);
        std::cout << k << ',' << t << ",probe_train_acc," << fmt(probe.train_accuracy) << '\n';
        std::cout << k << ',' << t << ",probe_val_acc," << fmt(probe.val_accuracy) << '\n';
        std::cout << k << ',' << t << ",cka_vs_last," << fmt(ls::linear_cka(f, last)) << '\n';
        if (!pca_dir.empty() && c.backbone.num_patches() >= 4) {
            fs::create_directories(pca_dir);
            export_pca(pca_dir, k, r, c.backbone, 16);
        }
    }
    return 0;
}

template <typename T>
int cmd_sweep_lambda(const ls::RunConfig& base, const std::vector<double>& lambdas,
                     const std::vector<std::uint64_t>& seeds, const fs::path& summary) {
    const auto rows = ls::sweep_lambda<T>(base, lambdas, seeds, progress);
    std::ostringstream out;
    out << "lambda,seed,final_fd,final_mmd\n";
    for (const auto& r : rows) out << fmt(r.lambda) << ',' << r.seed << ',' << fmt(r.final_fd) << ',' << fmt(r.final_mmd) << '\n';
    out << "\nlambda,mean_fd,std_fd\n";
    for (double lam : lambdas) {
        std::vector<double> v;
        for (const auto& r : rows)
            if (r.lambda == lam) v.push_back(r.final_fd);
        const auto ms = ls::mean_std(v);
        out << fmt(lam) << ',' << fmt(ms.mean) << ',' << fmt(ms.std) << '\n';
    }
    std::cout << out.str();
    if (!summary.empty()) std::ofstream(summary) << out.str();
    return 0;
}

template <typename T>
int cmd_sweep_pairs(const ls::RunConfig& base, int count, std::uint64_t pair_seed, const fs::path& summary) {
    const auto res = ls::sweep_pairs<T>(base, count, pair_seed, progress);
    std::ostringstream out;
    out << "k,k_ref,final_fd\n";
    out << "0,0," << fmt(res.baseline.final_fd) << '\n';
    for (const auto& r : res.runs) out << r.k << ',' << r.k_ref << ',' << fmt(r.final_fd) << '\n';
    out << "\nbaseline_fd,mean_fd,std_fd\n"
        << fmt(res.baseline.final_fd) << ',' << fmt(res.stats.mean) << ',' << fmt(res.stats.std) << '\n';
    std::cout << out.str();
    if (!summary.empty()) std::ofstream(summary) << out.str();
    return 0;
}

template <typename T>
int cmd_drop_blocks(const ls::RunConfig& cfg, const fs::path& ckpt, bool ema, const std::set<int>& drop) {
    auto trainer = load_trainer<T>(cfg, ckpt, ema);
    const auto r = ls::layer_drop_eval(trainer, drop);
    std::string ds;
    for (int k : drop) ds += (ds.empty() ? "" : " ") + std::to_string(k);
    std::cout << "dropped,metric,baseline,with_drop\n";
    std::cout << ds << ",frechet_feature_distance," << fmt(r.baseline.fd) << ',' << fmt(r.with_drop.fd) << '\n';
    std::cout << ds << ",mmd_rbf," << fmt(r.baseline.mmd) << ',' << fmt(r.with_drop.mmd) << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LayerSync training and analysis toolkit"};
    app.require_subcommand(1);

    Common train_c, sample_c, eval_c, probe_c, sweep_c, pairs_c, drop_c, bench_c;
    bool resume = false, ema = false;
    std::string checkpoint, out_path, pca_dir, drop_list, lambdas_s, seeds_s = "0,1,2", batches_s = "64,128,256,512,1024";
    int num = 256, count = 10, dim = 512, patches = 4, repeats = 5;
    std::uint64_t seed = 0, pair_seed = 1;
    double probe_t = 0.5;

    auto* train = app.add_subcommand("train", "train a model");
    add_common(train, train_c);
    train->add_flag("--resume", resume, "continue from the latest checkpoint in out_dir");

    auto* sample = app.add_subcommand("sample", "draw samples from a checkpoint");
    add_common(sample, sample_c);
    sample->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    sample->add_option("-n,--num", num, "number of samples");
    sample->add_option("--seed", seed, "sampler seed");
    sample->add_option("-o,--output", out_path, "output directory")->required();
    sample->add_flag("--ema", ema, "use EMA weights");

    auto* eval = app.add_subcommand("eval", "distribution metrics against held-out data");
    add_common(eval, eval_c);
    eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    eval->add_flag("--ema", ema, "use EMA weights");

    auto* probe = app.add_subcommand("probe", "per-layer linear probes and CKA");
    add_common(probe, probe_c);
    probe->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    probe->add_option("--t", probe_t, "noise level of the probed inputs");
    probe->add_option("-n,--num", num, "number of probed samples");
    probe->add_option("--seed", seed, "probe seed");
    probe->add_option("--pca-dir", pca_dir, "write top-3 PCA maps per layer as PPM");
    probe->add_flag("--ema", ema, "use EMA weights");

    auto* sweep = app.add_subcommand("sweep-lambda", "train over the lambda grid");
    add_common(sweep, sweep_c);
    sweep->add_option("--lambdas", lambdas_s, "comma-separated lambdas (default 0,0.1,0.2,0.3,0.5,0.7)");
    sweep->add_option("--seeds", seeds_s, "comma-separated seeds");
    sweep->add_option("--summary", out_path, "summary CSV path");

    auto* pairs = app.add_subcommand("sweep-pairs", "train over random valid layer pairs");
    add_common(pairs, pairs_c);
    pairs->add_option("--count", count, "number of random pairs");
    pairs->add_option("--pair-seed", pair_seed, "seed for pair selection");
    pairs->add_option("--summary", out_path, "summary CSV path");

    auto* drop = app.add_subcommand("drop-blocks", "evaluate with blocks removed");
    add_common(drop, drop_c);
    drop->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    drop->add_option("--drop", drop_list, "comma-separated 1-based block indices")->required();
    drop->add_flag("--ema", ema, "use EMA weights");

    auto* bench = app.add_subcommand("bench-loss", "loss wall time against batch size");
    add_common(bench, bench_c);
    bench->add_option("--batches", batches_s, "comma-separated batch sizes");
    bench->add_option("--dim", dim, "feature dimension");
    bench->add_option("--patches", patches, "patches per sample");
    bench->add_option("--repeats", repeats, "timing repeats (minimum is kept)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        auto f64 = [](const ls::RunConfig& c) { return c.precision != "f32"; };
        if (*train) {
            auto cfg = build_config(train_c);
            return f64(cfg) ? cmd_train<double>(cfg, resume) : cmd_train<float>(cfg, resume);
        }
        if (*sample) {
            auto cfg = checkpoint_config(checkpoint, sample_c);
            return f64(cfg) ? cmd_sample<double>(cfg, checkpoint, ema, num, seed, out_path)
                            : cmd_sample<float>(cfg, checkpoint, ema, num, seed, out_path);
        }
        if (*eval) {
            auto cfg = checkpoint_config(checkpoint, eval_c);
            return f64(cfg) ? cmd_eval<double>(cfg, checkpoint, ema) : cmd_eval<float>(cfg, checkpoint, ema);
        }
        if (*probe) {
            auto cfg = checkpoint_config(checkpoint, probe_c);
            return f64(cfg) ? cmd_probe<double>(cfg, checkpoint, ema, probe_t, num, pca_dir, seed)
                            : cmd_probe<float>(cfg, checkpoint, ema, probe_t, num, pca_dir, seed);
        }
        if (*sweep) {
            auto cfg = build_config(sweep_c);
            std::vector<double> lambdas = ls::lambda_grid();
            if (!lambdas_s.empty()) {
                lambdas.clear();
                for (const auto& s : split_csv(lambdas_s)) lambdas.push_back(std::stod(s));
            }
            std::vector<std::uint64_t> seeds;
            for (const auto& s : split_csv(seeds_s)) seeds.push_back(std::stoull(s));
            return f64(cfg) ? cmd_sweep_lambda<double>(cfg, lambdas, seeds, out_path)
                            : cmd_sweep_lambda<float>(cfg, lambdas, seeds, out_path);
        }
        if (*pairs) {
            auto cfg = build_config(pairs_c);
            return f64(cfg) ? cmd_sweep_pairs<double>(cfg, count, pair_seed, out_path)
                            : cmd_sweep_pairs<float>(cfg, count, pair_seed, out_path);
        }
        if (*drop) {
            auto cfg = checkpoint_config(checkpoint, drop_c);
            std::set<int> blocks;
            for (const auto& s : split_csv(drop_list)) blocks.insert(std::stoi(s));
            return f64(cfg) ? cmd_drop_blocks<double>(cfg, checkpoint, ema, blocks)
                            : cmd_drop_blocks<float>(cfg, checkpoint, ema, blocks);
        }
        if (*bench) {
            std::vector<std::size_t> batches;
            for (const auto& s : split_csv(batches_s)) batches.push_back(std::stoul(s));
            const auto r = ls::bench_loss(batches, static_cast<std::size_t>(dim), static_cast<std::size_t>(patches), repeats);
            std::cout << "batch,layersync_ms,dispersive_ms\n";
            for (const auto& p : r.points)
                std::cout << p.batch << ',' << fmt(p.layersync_ms) << ',' << fmt(p.dispersive_ms) << '\n';
            std::cout << "\nloss,fit_exponent\nlayersync," << fmt(r.layersync_exponent) << "\ndispersive,"
                      << fmt(r.dispersive_exponent) << '\n';
            return 0;
        }
    } catch (const ls::TrainingDiverged& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
