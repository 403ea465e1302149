// ugt: generate | train | grid | eval | export | verify
//
// Exit codes: 0 ok, 1 verification/metric/training failure, 2 usage error,
// 3 data-format error.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ugt/checkpoint.hpp"
#include "ugt/data.hpp"
#include "ugt/dataset_io.hpp"
#include "ugt/errors.hpp"
#include "ugt/eval.hpp"
#include "ugt/fusion.hpp"
#include "ugt/model.hpp"
#include "ugt/train.hpp"
#include "ugt/verify.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;
constexpr int kDataFormat = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string run_id(const ugt::TrainConfig& cfg, const ugt::Dataset& ds) {
    std::ostringstream os;
    os << cfg.to_json().dump() << '|' << ds.num_users << 'x' << ds.num_items << '|' << ds.interactions.size();
    const std::string text = os.str();
    std::vector<unsigned char> bytes(text.begin(), text.end());
    return ugt::detail::hex64(ugt::detail::fnv1a64(bytes)).substr(0, 12);
}

ugt::TrainConfig read_config(const std::string& path) {
    if (path.empty()) return {};
    return ugt::load_config(path);
}

void prepare_out_dir(const fs::path& dir) {
    fs::create_directories(dir);
}

std::size_t thread_cap() {
    if (const char* v = std::getenv("UGT_THREADS")) {
        try {
            const long n = std::stol(v);
            if (n >= 1) return static_cast<std::size_t>(n);
        } catch (const std::exception&) {
        }
        throw UsageError(std::string("UGT_THREADS must be a positive integer, got '") + v + "'");
    }
    return 1;
}

// ---------------------------------------------------------------------------

int cmd_generate(const fs::path& out, const ugt::SyntheticConfig& sc, bool force) {
    if (fs::exists(out) && !fs::is_directory(out)) throw UsageError(out.string() + " exists and is not a directory");
    if (fs::exists(out) && !fs::is_empty(out) && !force) {
        throw UsageError(out.string() + " is not empty (use --force to overwrite)");
    }
    const ugt::Dataset ds = ugt::generate_synthetic(sc);
    fs::create_directories(out);
    ugt::save_dataset(out, ds);
    std::size_t tokens = 0;
    for (const auto& t : ds.texts) tokens += t.size();
    std::cout << "users " << ds.num_users << ", items " << ds.num_items << ", interactions " << ds.interactions.size()
              << " (density " << std::setprecision(4)
              << static_cast<double>(ds.interactions.size()) / static_cast<double>(ds.num_users * ds.num_items) << ")\n"
              << "images " << ds.image_size << 'x' << ds.image_size << 'x' << ds.channels << ", vocab " << ds.vocab_size
              << ", mean text length "
              << static_cast<double>(tokens) / static_cast<double>(std::max<std::size_t>(1, ds.num_items)) << "\n"
              << "written to " << out.string() << '\n';
    return kOk;
}

int cmd_train(const fs::path& data, const std::string& config_path, const fs::path& out,
              const std::vector<std::string>& ablate, bool quiet) {
    ugt::TrainConfig cfg = read_config(config_path);
    for (const auto& name : ablate) ugt::disable_component(cfg.ablation, name);
    cfg.validate();
    const ugt::Dataset ds = ugt::load_dataset(data);
    const ugt::SplitDataset sp = ugt::split(ds, {}, cfg.seed);
    prepare_out_dir(out);

    const auto t0 = std::chrono::steady_clock::now();
    ugt::TrainOptions opts;
    if (!quiet) {
        opts.on_epoch = [](const ugt::EpochLog& e) {
            if (e.epoch % 10 == 0)
                std::cerr << "epoch " << e.epoch << " loss " << e.train_loss << " val " << e.val_loss << " recall@10 "
                          << e.val_recall10 << '\n';
        };
    }
    const ugt::TrainResult result = ugt::train(sp, cfg, opts);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const ugt::ModelConfig& mc = result.state.model_config;
    const ugt::InteractionGraph graph = ugt::build_graph(sp);
    const ugt::ModelInputs inputs = ugt::prepare_inputs(ds, mc);
    const ugt::Materialized m = ugt::materialize(result.state.params, mc, inputs, graph);
    ugt::MetricsReport report = ugt::evaluate_model(sp, m, ugt::EvalTarget::test);
    report.config = cfg.to_json();
    report.wall_clock_seconds = seconds;

    const std::string id = run_id(cfg, ds);
    nlohmann::json meta{{"run_id", id},
                        {"seed", cfg.seed},
                        {"split_seed", cfg.seed},
                        {"best_epoch", result.best_epoch},
                        {"train_config", cfg.to_json()}};
    ugt::save_model(out / "checkpoint.bin", result.state.params, mc, meta);
    ugt::write_training_log(out / "train_log.csv", result.history);
    nlohmann::json extra{{"best_epoch", result.best_epoch},
                         {"epochs_run", result.state.epoch},
                         {"early_stopped", result.early_stopped},
                         {"alpha", m.alpha},
                         {"split", {{"train", sp.train.size()}, {"validation", sp.validation.size()}, {"test", sp.test.size()}}}};
    ugt::write_report_json(out / "report.json", report, id, cfg.seed, extra);
    ugt::write_metrics_csv(out / "metrics.csv", report);

    const auto disabled = ugt::disabled_components(cfg.ablation);
    std::cout << "run " << id << (disabled.empty() ? " (full model)" : " (ablated:");
    for (const auto& d : disabled) std::cout << ' ' << d;
    if (!disabled.empty()) std::cout << ')';
    std::cout << "\nlambda_c " << cfg.effective_lambda_c() << ", epsilon " << cfg.epsilon << "\n";
    if (result.early_stopped) {
        std::cout << "early stop at epoch " << result.state.epoch << ", best epoch " << result.best_epoch << '\n';
    } else {
        std::cout << "ran " << result.state.epoch << " epochs, best epoch " << result.best_epoch << '\n';
    }
    std::cout << std::setprecision(6) << "test recall@10 " << report.recall_at(10) << ", ndcg@10 " << report.ndcg_at(10)
              << ", recall@20 " << report.recall_at(20) << ", ndcg@20 " << report.ndcg_at(20) << "\nalignment mse "
              << *report.alignment_mse << " (raw " << *report.alignment_mse_raw << ")\n"
              << "outputs in " << out.string() << '\n';
    return kOk;
}

int cmd_grid(const fs::path& data, const std::string& config_path, const fs::path& out,
             const std::vector<std::string>& ablate) {
    ugt::TrainConfig cfg = read_config(config_path);
    for (const auto& name : ablate) ugt::disable_component(cfg.ablation, name);
    cfg.validate();
    const ugt::Dataset ds = ugt::load_dataset(data);
    const ugt::SplitDataset sp = ugt::split(ds, {}, cfg.seed);
    const std::size_t threads = thread_cap();
    const ugt::GridResult g = ugt::grid_search(sp, cfg, threads);
    prepare_out_dir(out);
    std::ofstream csv(out / "grid.csv");
    csv << "epsilon,lambda_c,val_recall@10\n";
    csv.precision(17);
    std::cout << "epsilon  lambda_c  val_recall@10\n";
    for (std::size_t k = 0; k < g.cells.size(); ++k) {
        const auto& c = g.cells[k];
        csv << c.epsilon << ',' << c.lambda_c << ',' << c.val_recall10 << '\n';
        std::cout << std::setw(7) << c.epsilon << "  " << std::setw(8) << c.lambda_c << "  " << c.val_recall10
                  << (k == g.best ? "  <- best" : "") << '\n';
    }
    std::cout << "best epsilon " << g.cells[g.best].epsilon << ", lambda_c " << g.cells[g.best].lambda_c << '\n';
    return kOk;
}

struct LoadedRun {
    ugt::Dataset dataset;
    ugt::SplitDataset split;
    ugt::LoadedModel model;
};

LoadedRun load_run(const fs::path& data, const fs::path& checkpoint) {
    LoadedRun r;
    r.dataset = ugt::load_dataset(data);
    r.model = ugt::load_model(checkpoint, r.dataset.num_users, r.dataset.num_items);
    const auto split_seed = r.model.meta.value("split_seed", std::uint64_t{0});
    r.split = ugt::split(r.dataset, {}, split_seed);
    return r;
}

int cmd_eval(const fs::path& data, const fs::path& checkpoint, const std::string& target_name, const fs::path& out,
             bool baseline, std::uint64_t split_seed) {
    ugt::EvalTarget target = ugt::EvalTarget::test;
    if (target_name == "validation") target = ugt::EvalTarget::validation;
    else if (target_name == "train") target = ugt::EvalTarget::train;
    else if (target_name != "test") throw UsageError("--target must be test, validation or train");

    const auto t0 = std::chrono::steady_clock::now();
    ugt::MetricsReport report;
    std::string id = "popularity";
    std::uint64_t seed = split_seed;
    if (baseline) {
        const ugt::Dataset ds = ugt::load_dataset(data);
        report = ugt::popularity_baseline(ugt::split(ds, {}, seed), target);
    } else {
        const LoadedRun run = load_run(data, checkpoint);
        const ugt::InteractionGraph graph = ugt::build_graph(run.split);
        const ugt::ModelInputs inputs = ugt::prepare_inputs(run.dataset, run.model.config);
        const ugt::Materialized m = ugt::materialize(run.model.params, run.model.config, inputs, graph);
        report = ugt::evaluate_model(run.split, m, target);
        report.config = run.model.meta.value("train_config", nlohmann::json::object());
        id = run.model.meta.value("run_id", std::string("unknown"));
        seed = run.model.meta.value("seed", std::uint64_t{0});
    }
    report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (std::size_t j = 0; j < report.ks.size(); ++j)
        std::cout << "recall@" << report.ks[j] << ' ' << report.recall[j] << "  ndcg@" << report.ks[j] << ' '
                  << report.ndcg[j] << '\n';
    if (report.alignment_mse) std::cout << "alignment mse " << *report.alignment_mse << '\n';
    std::cout << "users evaluated " << report.num_users << '\n';
    if (!out.empty()) {
        prepare_out_dir(out);
        ugt::write_report_json(out / "report.json", report, id, seed, {{"target", target_name}});
        ugt::write_metrics_csv(out / "metrics.csv", report);
    }
    return kOk;
}

int cmd_export(const fs::path& data, const fs::path& checkpoint, const fs::path& out) {
    const LoadedRun run = load_run(data, checkpoint);
    const ugt::InteractionGraph graph = ugt::build_graph(run.split);
    const ugt::ModelInputs inputs = ugt::prepare_inputs(run.dataset, run.model.config);
    const ugt::Materialized m = ugt::materialize(run.model.params, run.model.config, inputs, graph);
    prepare_out_dir(out);

    std::ofstream emb(out / "embeddings.tsv");
    emb.precision(17);
    auto rows = [&](std::ostream& os, const char* type, const std::vector<double>& table, std::size_t n, std::size_t d) {
        for (std::size_t r = 0; r < n; ++r) {
            os << type << '\t' << r;
            for (std::size_t k = 0; k < d; ++k) os << '\t' << table[r * d + k];
            os << '\n';
        }
    };
    rows(emb, "user", m.embeddings.user, m.embeddings.num_users, m.embeddings.dim);
    rows(emb, "item", m.embeddings.item, m.embeddings.num_items, m.embeddings.dim);

    std::ofstream modal(out / "modal_embeddings.tsv");
    modal.precision(17);
    rows(modal, "visual", m.visual, run.dataset.num_items, m.dim);
    rows(modal, "textual", m.textual, run.dataset.num_items, m.dim);
    std::cout << "wrote " << (out / "embeddings.tsv").string() << " and " << (out / "modal_embeddings.tsv").string() << '\n';
    return kOk;
}

int cmd_verify(const fs::path& checkpoint, std::uint64_t seed) {
    ugt::VerifyOptions opt;
    opt.checkpoint = checkpoint;
    opt.seed = seed;
    const auto rows = ugt::run_verification(opt);
    ugt::print_verification(std::cout, rows);
    std::size_t failed = 0;
    for (const auto& r : rows) failed += r.passed ? 0 : 1;
    std::cout << (failed == 0 ? "all checks passed" : std::to_string(failed) + " check(s) failed") << '\n';
    return failed == 0 ? kOk : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Unified multi-modal graph transformer recommender"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate", "write a synthetic dataset directory");
    std::string gen_out;
    ugt::SyntheticConfig sc;
    bool force = false;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--users", sc.num_users, "number of users")->capture_default_str();
    gen->add_option("--items", sc.num_items, "number of items")->capture_default_str();
    gen->add_option("--density", sc.density, "expected interaction density")->capture_default_str();
    gen->add_option("--seed", sc.seed, "random seed")->capture_default_str();
    gen->add_option("--latent-dim", sc.latent_dim, "latent preference factors")->capture_default_str();
    gen->add_option("--image-size", sc.image_size, "image side P")->capture_default_str();
    gen->add_option("--channels", sc.channels, "image channels C")->capture_default_str();
    gen->add_option("--vocab", sc.vocab_size, "vocabulary size")->capture_default_str();
    gen->add_option("--text-len", sc.max_text_len, "maximum text length")->capture_default_str();
    gen->add_flag("--force", force, "overwrite a non-empty output directory");

    std::string data, config, out, checkpoint, target = "test";
    std::vector<std::string> ablate;
    bool quiet = false, baseline = false;
    std::uint64_t verify_seed = 0;

    auto* tr = app.add_subcommand("train", "train one model and report test metrics");
    tr->add_option("--data", data, "dataset directory")->required();
    tr->add_option("--config", config, "key=value config file");
    tr->add_option("--out", out, "output directory")->required();
    tr->add_option("--ablate", ablate, "disable a component: attn_fuse, ugnn, trans, cl")
        ->check(CLI::IsMember({"attn_fuse", "ugnn", "trans", "cl"}));
    tr->add_flag("--quiet", quiet, "no per-epoch progress");

    auto* gr = app.add_subcommand("grid", "grid search over epsilon and lambda_c");
    gr->add_option("--data", data, "dataset directory")->required();
    gr->add_option("--config", config, "key=value config file");
    gr->add_option("--out", out, "output directory")->required();
    gr->add_option("--ablate", ablate, "disable a component")->check(CLI::IsMember({"attn_fuse", "ugnn", "trans", "cl"}));

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--data", data, "dataset directory")->required();
    ev->add_option("--checkpoint", checkpoint, "checkpoint file");
    ev->add_option("--target", target, "test, validation or train")->capture_default_str();
    ev->add_option("--out", out, "write report.json and metrics.csv here");
    ev->add_flag("--popularity", baseline, "evaluate the popularity baseline instead");
    std::uint64_t split_seed = 0;
    ev->add_option("--split-seed", split_seed, "split seed for --popularity (the training seed)")->capture_default_str();

    auto* ex = app.add_subcommand("export", "write embeddings.tsv and modal_embeddings.tsv");
    ex->add_option("--data", data, "dataset directory")->required();
    ex->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    ex->add_option("--out", out, "output directory")->required();

    auto* ve = app.add_subcommand("verify", "run the self-check suite");
    ve->add_option("--checkpoint", checkpoint, "also validate this checkpoint file");
    ve->add_option("--seed", verify_seed, "seed for randomized checks")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*gen) return cmd_generate(gen_out, sc, force);
        if (*tr) return cmd_train(data, config, out, ablate, quiet);
        if (*gr) return cmd_grid(data, config, out, ablate);
        if (*ev) {
            if (!baseline && checkpoint.empty()) throw UsageError("eval needs --checkpoint or --popularity");
            return cmd_eval(data, checkpoint, target, out, baseline, split_seed);
        }
        if (*ex) return cmd_export(data, checkpoint, out);
        if (*ve) return cmd_verify(checkpoint, verify_seed);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const ugt::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return kUsage;
    } catch (const ugt::FormatError& e) {
        std::cerr << "data format error: " << e.what() << '\n';
        return kDataFormat;
    } catch (const ugt::DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << '\n';
        return kFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
    return kUsage;
}
