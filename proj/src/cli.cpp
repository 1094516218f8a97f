#include "smb/cli.hpp"

#include "smb/error.hpp"
#include "smb/gradcheck.hpp"
#include "smb/pipeline.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>

namespace smb::cli {

namespace {

namespace fs = std::filesystem;

// Options shared by the commands that take a run configuration.
struct ConfigArgs {
    std::string config_file;
    std::map<std::string, std::string> aliases; // config key -> value
    std::vector<std::string> extras;            // --dotted.key value
};

void add_alias(CLI::App* cmd, ConfigArgs& a, const std::string& flag, const std::string& key,
               const std::string& help) {
    cmd->add_option_function<std::string>(
        flag, [&a, key](const std::string& v) { a.aliases[key] = v; }, help + " (" + key + ")");
}

void add_config_options(CLI::App* cmd, ConfigArgs& a) {
    cmd->add_option("--config", a.config_file, "configuration file with key = value lines");
    cmd->allow_extras();
}

config::Config resolve_config(const ConfigArgs& a, const std::vector<std::string>& extras) {
    config::Config cfg =
        a.config_file.empty() ? config::Config() : config::Config::load(pipeline::resolve(a.config_file));
    for (const auto& [k, v] : a.aliases) {
        cfg.set(k, v);
    }
    for (std::size_t i = 0; i < extras.size(); ++i) {
        const auto& arg = extras[i];
        if (!arg.starts_with("--")) {
            throw UsageError("unexpected argument '" + arg + "'");
        }
        std::string key = arg.substr(2);
        std::string value;
        if (const auto eq = key.find('='); eq != std::string::npos) {
            value = key.substr(eq + 1);
            key.resize(eq);
        } else {
            if (i + 1 >= extras.size()) {
                throw UsageError("option '" + arg + "' needs a value");
            }
            value = extras[++i];
        }
        cfg.set(key, value);
    }
    return cfg;
}

void print_gradcheck(const std::vector<gradcheck::OpResult>& results, std::ostream& out) {
    out << std::left << std::setw(34) << "operation" << std::setw(8) << "points" << std::setw(14) << "max_rel_err"
        << std::setw(12) << "tolerance" << "result\n";
    for (const auto& r : results) {
        char err[32], tol[32];
        std::snprintf(err, sizeof err, "%.3e", r.max_rel_error);
        std::snprintf(tol, sizeof tol, "%.0e", r.tolerance);
        out << std::setw(34) << r.name << std::setw(8) << r.points << std::setw(14) << err << std::setw(12) << tol
            << (r.passed ? "PASS" : "FAIL") << '\n';
    }
    out << std::right;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Joint SFT + JEPA training and point-in-time evaluation on longitudinal event records", "smb"};
    app.set_version_flag("--version", pipeline::version_string());
    app.require_subcommand(1);

    ConfigArgs gen_args, ingest_args, train_args, ablate_args;
    std::string out_dir, run_name, checkpoint, pooling, eval_out, secondary;
    std::vector<std::string> axes;
    bool overwrite = false, inject_bug = false;
    std::size_t points = 10;

    auto* gen = app.add_subcommand("generate", "simulate a cohort: events, labels and latent sidecar");
    add_config_options(gen, gen_args);
    add_alias(gen, gen_args, "--regime", "sim.regime", "chronic or acute");
    add_alias(gen, gen_args, "--patients", "sim.patients", "number of patients");
    add_alias(gen, gen_args, "--seed", "sim.seed", "generator seed");
    add_alias(gen, gen_args, "--horizon", "sim.horizon_days", "follow-up days");
    gen->add_option("--out", out_dir, "output directory (default data.dir)");

    auto* ing = app.add_subcommand("ingest", "build vocab.txt and buckets.tsv for a cohort directory");
    add_config_options(ing, ingest_args);
    add_alias(ing, ingest_args, "--data", "data.dir", "cohort directory");
    add_alias(ing, ingest_args, "--bins", "data.numeric_bins", "quantile buckets per code");
    add_alias(ing, ingest_args, "--datasets", "data.datasets", "primary or primary+secondary");
    ing->add_option("--secondary", secondary, "secondary cohort directory folded into the vocabulary");

    auto* trn = app.add_subcommand("train", "train a model into a run directory");
    add_config_options(trn, train_args);
    trn->add_option("--run", run_name, "run directory")->required();
    trn->add_flag("--overwrite", overwrite, "replace an existing run directory");
    add_alias(trn, train_args, "--data", "data.dir", "cohort directory");
    add_alias(trn, train_args, "--datasets", "data.datasets", "primary or primary+secondary");
    add_alias(trn, train_args, "--mode", "train.mode", "sft_only, hybrid or curriculum");
    add_alias(trn, train_args, "--switch", "train.switch", "curriculum switch fraction");
    add_alias(trn, train_args, "--steps", "train.steps", "optimizer steps");
    add_alias(trn, train_args, "--seed", "train.seed", "training seed");
    add_alias(trn, train_args, "--pooling", "eval.pooling", "last or mean");

    auto* evl = app.add_subcommand("eval", "probe a trained run and write report.tsv and report.json");
    evl->add_option("--run", run_name, "run directory")->required();
    evl->add_option("--checkpoint", checkpoint, "checkpoint file (default: latest in the run)");
    evl->add_option("--pooling", pooling, "last or mean (default: the run's eval.pooling)");
    evl->add_option("--out", eval_out, "report directory (default: the run directory)");

    auto* abl = app.add_subcommand("ablate", "train and evaluate every cell of a grid");
    add_config_options(abl, ablate_args);
    abl->add_option("--run", run_name, "root directory for the cell runs")->required();
    abl->add_option("--axis", axes, "key=v1,v2,... (repeatable); loss_ratio takes jepa:sft values")->required();
    abl->add_flag("--overwrite", overwrite, "replace an existing ablation directory");
    add_alias(abl, ablate_args, "--data", "data.dir", "cohort directory");
    add_alias(abl, ablate_args, "--mode", "train.mode", "sft_only, hybrid or curriculum");
    add_alias(abl, ablate_args, "--steps", "train.steps", "optimizer steps");
    add_alias(abl, ablate_args, "--seed", "train.seed", "training seed");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable operation");
    gc->add_flag("--inject-bug", inject_bug, "add a deliberately wrong operation that must fail");
    gc->add_option("--points", points, "random points per operation");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            app.exit(e, out, err);
            return ok;
        }
        err << "error: " << e.what() << '\n';
        if (const auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front()) {
            err << "run 'smb " << sub->get_name() << " --help' for usage\n";
        }
        return usage;
    }

    try {
        if (gen->parsed()) {
            const auto cfg = resolve_config(gen_args, gen->remaining());
            const fs::path dir = pipeline::resolve(out_dir.empty() ? cfg.get("data.dir") : out_dir);
            pipeline::generate(cfg, dir);
            out << "wrote " << cfg.get("sim.patients") << " " << cfg.get("sim.regime") << " patients to "
                << dir.string() << '\n';
        } else if (ing->parsed()) {
            const auto cfg = resolve_config(ingest_args, ing->remaining());
            std::optional<fs::path> sec;
            if (!secondary.empty()) {
                sec = pipeline::resolve(secondary);
            } else if (cfg.uses_secondary()) {
                sec = pipeline::resolve(cfg.get("data.secondary_dir"));
            }
            const fs::path dir = pipeline::resolve(cfg.get("data.dir"));
            const auto vocab = pipeline::ingest(dir, sec, cfg.get_size("data.numeric_bins"));
            out << "vocabulary of " << vocab.size() << " tokens written to " << dir.string() << '\n';
        } else if (trn->parsed()) {
            const auto cfg = resolve_config(train_args, trn->remaining());
            const fs::path dir = pipeline::resolve(run_name);
            pipeline::train(cfg, dir, {overwrite, &out});
            out << "run written to " << dir.string() << '\n';
        } else if (evl->parsed()) {
            pipeline::EvalRequest req;
            req.run_dir = pipeline::resolve(run_name);
            if (!checkpoint.empty()) {
                req.checkpoint = pipeline::resolve(checkpoint);
            }
            if (!pooling.empty()) {
                req.pooling = eval::parse_pooling(pooling);
            }
            if (!eval_out.empty()) {
                req.out_dir = pipeline::resolve(eval_out);
            }
            out << eval::format_report(pipeline::evaluate(req));
        } else if (abl->parsed()) {
            const auto cfg = resolve_config(ablate_args, abl->remaining());
            std::vector<pipeline::Axis> grid;
            for (const auto& a : axes) {
                grid.push_back(pipeline::parse_axis(a));
            }
            const auto cells = pipeline::ablate(cfg, grid, pipeline::resolve(run_name), {overwrite, &out});
            out << pipeline::format_ablation(cells);
            const bool any_failed =
                std::any_of(cells.begin(), cells.end(), [](const auto& c) { return !c.error.empty(); });
            return any_failed ? data : ok;
        } else if (gc->parsed()) {
            gradcheck::Options opt;
            opt.inject_bug = inject_bug;
            opt.points = points;
            const auto results = gradcheck::run(opt);
            print_gradcheck(results, out);
            return gradcheck::all_passed(results) ? ok : numerical;
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return usage;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return numerical;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return data;
    }
    return ok;
}

} // namespace smb::cli
