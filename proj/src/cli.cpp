#include "cect/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "cect/gradcheck.hpp"
#include "cect/kvconfig.hpp"
#include "cect/report.hpp"

namespace fs = std::filesystem;

namespace cect::cli {

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out;
    std::string preset = "base";
    std::uint64_t seed = 0;
    int threads = 0;
    std::vector<std::string> sets;
    bool verbose = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config_path, "flat key=value config file");
    cmd->add_option("--out", a.out, "output directory (env CECT_OUT as fallback)");
    cmd->add_option("--seed", a.seed, "run seed");
    cmd->add_option("--preset", a.preset, "configuration preset")
        ->check(CLI::IsMember({"base", "tiny"}));
    cmd->add_option("--threads", a.threads, "worker thread cap for evaluation");
    cmd->add_option("--set", a.sets, "config override key=value (repeatable)");
    cmd->add_flag("--verbose", a.verbose, "print per-epoch statistics");
}

std::string resolve_out(const CommonArgs& a) {
    if (!a.out.empty()) return a.out;
    if (const char* env = std::getenv("CECT_OUT"); env && *env) return env;
    return "cect_out";
}

ResolvedConfig resolve(const CommonArgs& a) {
    ResolvedConfig rc = load_config(a.config_path, a.sets, a.preset, a.seed);
    if (a.threads > 0) rc.train.threads = a.threads;
    return rc;
}

void write_snapshot(const ResolvedConfig& rc, const std::string& out_dir) {
    fs::create_directories(out_dir);
    report::write_text_file((fs::path(out_dir) / "config.txt").string(), snapshot_text(rc));
}

eval::ExperimentData prepare_data(const ResolvedConfig& rc, const std::string& out_dir) {
    data::Manifest manifest;
    if (rc.data_root.empty()) {
        manifest = data::synth_generate(rc.synth_per_class, rc.model.input_resolution, rc.seed,
                                        (fs::path(out_dir) / "data").string());
    } else {
        manifest = data::load_manifest(rc.data_root);
    }
    data::Manifest external;
    const data::Manifest* external_ptr = nullptr;
    if (rc.split.mode == data::SplitMode::TwoWayWithExternalTest) {
        if (rc.external_manifest.empty())
            throw ConfigError("two-way split requires data.external_manifest");
        external = data::load_manifest(rc.external_manifest);
        external_ptr = &external;
    }
    auto parts = data::split(manifest, rc.split, external_ptr);
    eval::ExperimentData d;
    d.train = data::load_dataset(parts.train);
    d.val = data::load_dataset(parts.val);
    d.test = data::load_dataset(parts.test);
    return d;
}

void print_metrics(const std::string& tag, const eval::MetricsReport& m) {
    std::cout << tag << ": acc " << eval::format_metric(m.acc) << ", npv "
              << eval::format_metric(m.npv) << ", ppv " << eval::format_metric(m.ppv) << ", sen "
              << eval::format_metric(m.sen) << ", spe " << eval::format_metric(m.spe) << ", fos "
              << eval::format_metric(m.fos) << "\n";
}

void print_epochs(const train::RunReport& report) {
    for (const auto& e : report.epochs)
        std::cout << "  epoch " << e.epoch << ": train " << e.train_loss << ", val " << e.val_loss
                  << ", lr " << e.lr << ", val acc " << eval::format_metric(e.val_metrics.acc)
                  << "\n";
}

int cmd_train(const CommonArgs& args) {
    auto rc = resolve(args);
    const std::string out_dir = resolve_out(args);
    write_snapshot(rc, out_dir);
    auto data = prepare_data(rc, out_dir);

    CectModel model(rc.model, rc.seed);
    auto report = train::fit(model, data.train, data.val, rc.train, rc.aug,
                             train::FitOptions{out_dir, false});
    report.seed = rc.seed;
    report.config = rc.snapshot;
    auto test = train::evaluate_model(model, data.test, rc.aug.normalization, rc.train.batch_size,
                                      rc.train.threads);
    report.test_metrics = test.metrics;
    report.test_confusion = test.cm;

    report::write_text_file((fs::path(out_dir) / "report.json").string(),
                            report::run_report_json(report));
    report::write_text_file((fs::path(out_dir) / "confusion.svg").string(),
                            report::render_confusion_svg(test.cm));
    if (args.verbose) print_epochs(report);
    print_metrics("test", test.metrics);
    std::cout << "artifacts written to " << out_dir << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint) {
    auto rc = resolve(args);
    const std::string out_dir = resolve_out(args);
    write_snapshot(rc, out_dir);
    auto data = prepare_data(rc, out_dir);

    CectModel model(rc.model, rc.seed);
    model.load(checkpoint);
    auto test = train::evaluate_model(model, data.test, rc.aug.normalization, rc.train.batch_size,
                                      rc.train.threads);
    train::RunReport report;
    report.kind = "eval";
    report.seed = rc.seed;
    report.config = rc.snapshot;
    report.test_metrics = test.metrics;
    report.test_confusion = test.cm;
    report::write_text_file((fs::path(out_dir) / "report.json").string(),
                            report::run_report_json(report));
    report::write_text_file((fs::path(out_dir) / "confusion.svg").string(),
                            report::render_confusion_svg(test.cm));
    print_metrics("test", test.metrics);
    return 0;
}

int cmd_sweep(const CommonArgs& args) {
    auto rc = resolve(args);
    const std::string out_dir = resolve_out(args);
    write_snapshot(rc, out_dir);
    auto data = prepare_data(rc, out_dir);

    auto rows = eval::run_sweep(rc.model, rc.train, rc.aug, data, rc.sweep, out_dir);
    report::write_text_file((fs::path(out_dir) / "sweep.csv").string(), report::sweep_csv(rows));
    report::write_text_file((fs::path(out_dir) / "sweep.json").string(), report::sweep_json(rows));
    for (const auto& r : rows) {
        std::cout << r.coeffs.alpha << "," << r.coeffs.beta << "," << r.coeffs.gamma << " -> "
                  << (r.ok ? eval::format_metric(r.metrics.acc) : "failed: " + r.error) << "\n";
    }
    std::cout << "sweep table written to " << out_dir << "\n";
    return 0;
}

int cmd_ablate(const CommonArgs& args) {
    auto rc = resolve(args);
    const std::string out_dir = resolve_out(args);
    write_snapshot(rc, out_dir);
    auto data = prepare_data(rc, out_dir);

    auto rows = eval::run_ablation(rc.model, rc.train, rc.aug, data,
                                   eval::default_ablation_rows(), out_dir);
    report::write_text_file((fs::path(out_dir) / "ablation.csv").string(),
                            report::ablation_csv(rows));
    report::write_text_file((fs::path(out_dir) / "ablation.json").string(),
                            report::ablation_json(rows));
    for (const auto& r : rows)
        std::cout << r.row.label << " -> "
                  << (r.ok ? eval::format_metric(r.acc) : "failed: " + r.error) << "\n";
    std::cout << "ablation table written to " << out_dir << "\n";
    return 0;
}

int cmd_embed(const CommonArgs& args, const std::string& checkpoint) {
    auto rc = resolve(args);
    const std::string out_dir = resolve_out(args);
    write_snapshot(rc, out_dir);
    auto data = prepare_data(rc, out_dir);

    CectModel model(rc.model, rc.seed);
    model.load(checkpoint);
    auto set = report::extract_embeddings(model, data.val, rc.aug.normalization,
                                          rc.train.batch_size, "validation");
    auto test_set = report::extract_embeddings(model, data.test, rc.aug.normalization,
                                               rc.train.batch_size, "test");
    report::append_embeddings(set, test_set);

    auto ts = report::tsne(set.features, set.n, set.d, rc.tsne);
    report::write_text_file((fs::path(out_dir) / "embeddings.csv").string(),
                            report::embeddings_csv(set));
    report::write_text_file((fs::path(out_dir) / "tsne_points.csv").string(),
                            report::tsne_csv(ts, set));
    report::write_text_file((fs::path(out_dir) / "tsne.svg").string(),
                            report::render_scatter_svg(ts, set.labels));
    std::cout << "embedded " << set.n << " samples (penultimate width " << set.d
              << "), final KL " << ts.kl_trace.back() << "\n";
    std::cout << "embedding artifacts written to " << out_dir << "\n";
    return 0;
}

int cmd_synth(const CommonArgs& args, int n_per_class, int resolution) {
    auto rc = resolve(args);
    const std::string out_dir = resolve_out(args);
    const int n = n_per_class > 0 ? n_per_class : rc.synth_per_class;
    const int res = resolution > 0 ? resolution : rc.model.input_resolution;
    write_snapshot(rc, out_dir);
    auto manifest = data::synth_generate(n, res, rc.seed, out_dir);
    std::cout << "wrote " << manifest.size() << " images under " << out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck battery (double precision)

struct CheckOutcome {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t coords = 0;
};

template <typename F>
CheckOutcome run_check(const std::string& name, F&& f,
                       std::vector<std::pair<std::string, TensorT<double>>> leaves,
                       std::size_t max_coords = 0, Rng* rng = nullptr) {
    auto report = grad_check<double>(std::forward<F>(f), std::move(leaves), 1e-5, max_coords, rng);
    return {name, report.max_rel_err, report.coords_checked};
}

std::vector<CheckOutcome> gradcheck_suite(std::uint64_t seed) {
    std::vector<CheckOutcome> results;
    Rng rng(seed);

    {
        auto a = rand_uniform<double>({4, 5}, -1, 1, rng);
        auto b = rand_uniform<double>({5, 3}, -1, 1, rng);
        auto w = rand_uniform<double>({4, 3}, -1, 1, rng);
        results.push_back(run_check(
            "matmul", [&] { return sum(mul(matmul(a, b), w)); }, {{"a", a}, {"b", b}}));
    }
    {
        auto x = rand_uniform<double>({1, 2, 5, 5}, -1, 1, rng);
        auto k = rand_uniform<double>({2, 2, 3, 3}, -1, 1, rng);
        auto bias = rand_uniform<double>({2}, -0.5, 0.5, rng);
        auto w = rand_uniform<double>({1, 2, 3, 3}, -1, 1, rng);
        results.push_back(run_check(
            "conv2d", [&] { return sum(mul(conv2d(x, k, bias, 2, 1), w)); },
            {{"x", x}, {"k", k}, {"bias", bias}}));
    }
    {
        auto x = rand_uniform<double>({1, 2, 3, 3}, -1, 1, rng);
        auto k = rand_uniform<double>({2, 2, 4, 4}, -1, 1, rng);
        auto w = rand_uniform<double>({1, 2, 6, 6}, -1, 1, rng);
        results.push_back(run_check(
            "transposed_conv2d", [&] { return sum(mul(transposed_conv2d(x, k, 2, 1), w)); },
            {{"x", x}, {"k", k}}));
    }
    {
        auto x = rand_uniform<double>({1, 2, 3, 3}, -1, 1, rng);
        auto w = rand_uniform<double>({1, 2, 6, 6}, -1, 1, rng);
        results.push_back(run_check(
            "upsample_nearest", [&] { return sum(mul(upsample_nearest(x, 2), w)); }, {{"x", x}}));
    }
    {
        TensorT<double> x({4}, {-2.0, -0.1, 0.1, 2.0});
        results.push_back(run_check("gelu", [&] { return sum(gelu(x)); }, {{"x", x}}));
    }
    {
        auto x = rand_uniform<double>({3, 5}, -1, 1, rng);
        auto g = rand_uniform<double>({5}, 0.5, 1.5, rng);
        auto b = rand_uniform<double>({5}, -0.5, 0.5, rng);
        auto w = rand_uniform<double>({3, 5}, -1, 1, rng);
        results.push_back(run_check(
            "layer_norm", [&] { return sum(mul(layer_norm(x, g, b), w)); },
            {{"x", x}, {"gain", g}, {"bias", b}}));
    }
    {
        auto x = rand_uniform<double>({2, 5}, -1, 1, rng);
        auto w = rand_uniform<double>({2, 5}, -1, 1, rng);
        results.push_back(
            run_check("softmax", [&] { return sum(mul(softmax(x), w)); }, {{"x", x}}));
    }
    {
        auto logits = rand_uniform<double>({3, 2}, -1, 1, rng);
        std::vector<int> labels{0, 1, 1};
        results.push_back(run_check(
            "cross_entropy", [&] { return cross_entropy(logits, labels); }, {{"logits", logits}}));
    }
    {
        auto tokens = rand_uniform<double>({1, 4, 4, 6}, -1, 1, rng);
        auto b1 = init_cswt_block<double>(6, 2, 2, 2.0, rng);
        auto b2 = init_cswt_block<double>(6, 2, 2, 2.0, rng);
        auto w = rand_uniform<double>({1, 4, 4, 6}, -1, 1, rng);
        results.push_back(run_check(
            "cswt_block_pair", [&] { return sum(mul(cswt_block_pair(tokens, b1, b2, 2, 2), w)); },
            {{"tokens", tokens},
             {"qkv", b1.qkv.weight},
             {"rel_bias", b1.rel_bias},
             {"mlp", b2.mlp_fc1.weight}},
            24, &rng));
    }
    {
        CectConfig cfg = CectConfig::tiny();
        cfg.input_resolution = 32;
        Rng init_rng = rng.split("model");
        auto params = init_cect_params<double>(cfg, init_rng);
        auto img = rand_uniform<double>({2, 3, 32, 32}, 0, 1, rng);
        std::vector<int> labels{0, 1};
        auto f = [&] { return cross_entropy(cect_forward(img, params, cfg), labels); };
        std::vector<std::pair<std::string, TensorT<double>>> leaves{{"image", img}};
        for (auto& [name, t] : named_parameters(params)) leaves.emplace_back(name, t);
        results.push_back(run_check("cect_full_model", f, std::move(leaves), 2, &rng));
    }
    return results;
}

int cmd_gradcheck(const CommonArgs& args) {
    const std::string out_dir = resolve_out(args);
    fs::create_directories(out_dir);
    const double tol = 1e-3;
    auto results = gradcheck_suite(args.seed);

    nlohmann::ordered_json j;
    j["seed"] = args.seed;
    j["tolerance"] = tol;
    j["checks"] = nlohmann::ordered_json::array();
    double overall = 0.0;
    for (const auto& r : results) {
        nlohmann::ordered_json cj;
        cj["name"] = r.name;
        cj["max_rel_err"] = r.max_rel_err;
        cj["coords_checked"] = r.coords;
        cj["pass"] = r.max_rel_err < tol;
        j["checks"].push_back(cj);
        overall = std::max(overall, r.max_rel_err);
        std::cout << (r.max_rel_err < tol ? "[ok]   " : "[FAIL] ") << r.name << " max rel err "
                  << r.max_rel_err << " (" << r.coords << " coords)\n";
    }
    j["max_rel_err"] = overall;
    j["pass"] = overall < tol;
    report::write_text_file((fs::path(out_dir) / "gradcheck.json").string(), j.dump(2) + "\n");
    std::cout << "overall max rel err " << overall << (overall < tol ? " (pass)" : " (fail)")
              << "\n";
    return overall < tol ? 0 : 2;
}

} // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"hybrid CNN-transformer image classifier pipeline"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string checkpoint;
    int synth_n = 0, synth_resolution = 0;

    auto* train_cmd = app.add_subcommand("train", "train the classifier");
    add_common(train_cmd, args);
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    add_common(eval_cmd, args);
    eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint to load")->required();
    auto* sweep_cmd = app.add_subcommand("sweep", "train one model per coefficient group");
    add_common(sweep_cmd, args);
    auto* ablate_cmd = app.add_subcommand("ablate", "run the block/scale ablation table");
    add_common(ablate_cmd, args);
    auto* embed_cmd = app.add_subcommand("embed", "export penultimate features and a 2-d projection");
    add_common(embed_cmd, args);
    embed_cmd->add_option("--checkpoint", checkpoint, "model checkpoint to load")->required();
    auto* synth_cmd = app.add_subcommand("synth", "generate the synthetic two-class dataset");
    add_common(synth_cmd, args);
    synth_cmd->add_option("--n", synth_n, "images per class");
    synth_cmd->add_option("--resolution", synth_resolution, "image side length");
    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    add_common(gradcheck_cmd, args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (app.got_subcommand(train_cmd)) return cmd_train(args);
        if (app.got_subcommand(eval_cmd)) return cmd_eval(args, checkpoint);
        if (app.got_subcommand(sweep_cmd)) return cmd_sweep(args);
        if (app.got_subcommand(ablate_cmd)) return cmd_ablate(args);
        if (app.got_subcommand(embed_cmd)) return cmd_embed(args, checkpoint);
        if (app.got_subcommand(synth_cmd)) return cmd_synth(args, synth_n, synth_resolution);
        if (app.got_subcommand(gradcheck_cmd)) return cmd_gradcheck(args);
        std::cerr << "error: no subcommand selected\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

int run(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.push_back("cect");
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data());
}

} // namespace cect::cli
