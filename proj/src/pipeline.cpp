#include "smb/pipeline.hpp"

#include "smb/error.hpp"

#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>

#ifndef SMB_VERSION
#define SMB_VERSION "0.0.0"
#endif

namespace smb::pipeline {

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw DataError("cannot write " + path.string());
    }
    f << text;
}

void require_files(std::initializer_list<fs::path> paths) {
    std::string missing;
    for (const auto& p : paths) {
        if (!fs::exists(p)) {
            missing += (missing.empty() ? "" : ", ") + p.string();
        }
    }
    if (!missing.empty()) {
        throw DataError("missing input files: " + missing);
    }
}

void prepare_dir(const fs::path& dir, bool overwrite) {
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!overwrite) {
            throw UsageError("run directory " + dir.string() + " already exists; pass --overwrite to replace it");
        }
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
}

std::vector<std::string> ids_of(std::span<const ehr::PatientRecord> records) {
    std::vector<std::string> ids;
    for (const auto& r : records) {
        ids.push_back(r.id());
    }
    return ids;
}

train::TrainState make_state(const config::Config& cfg, const ehr::Vocabulary& vocab) {
    const auto tc = cfg.training();
    auto bundle = model::ModelBundle::create(cfg.encoder(vocab.size()), cfg.predictor(), ehr::Vocabulary::kMaskId,
                                             tc.seed);
    return train::TrainState::create(std::move(bundle), tc);
}

std::string loss_ratio(const config::Config& c) {
    return c.get("train.lambda_jepa") + ":" + c.get("train.lambda_sft");
}

} // namespace

std::string version_string() { return std::string("smb ") + SMB_VERSION; }

fs::path run_root() {
    if (const char* env = std::getenv("SMB_RUN_ROOT"); env && *env) {
        return fs::path(env);
    }
    return fs::current_path();
}

fs::path resolve(const fs::path& p) { return p.is_absolute() ? p : run_root() / p; }

CohortFiles CohortFiles::in(const fs::path& dir) {
    return {dir / "events.tsv", dir / "labels.tsv", dir / "latents.tsv", dir / "vocab.txt", dir / "buckets.tsv"};
}

void generate(const config::Config& cfg, const fs::path& dir) {
    const auto g = cfg.generator();
    const auto cohort = sim::generate_cohort(g);
    std::vector<ehr::PatientRecord> records;
    records.reserve(cohort.size());
    for (const auto& p : cohort) {
        records.push_back(p.record);
    }
    const auto rows = sim::label_cohort(cohort, static_cast<double>(g.horizon_days));
    fs::create_directories(dir);
    const auto files = CohortFiles::in(dir);
    ehr::write_events(files.events, records);
    sim::write_labels(files.labels, rows);
    sim::write_latents(files.latents, rows);
    write_text(dir / "generate.txt", cfg.to_text());
}

ehr::Vocabulary ingest(const fs::path& dir, const std::optional<fs::path>& secondary, std::size_t numeric_bins) {
    const auto files = CohortFiles::in(dir);
    require_files({files.events});
    auto records = ehr::read_events(files.events);
    if (secondary) {
        const auto sec = CohortFiles::in(*secondary);
        require_files({sec.events});
        auto more = ehr::read_events(sec.events);
        records.insert(records.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
    }
    auto vocab = ehr::Vocabulary::build(records, numeric_bins);
    vocab.save(files.vocab, files.buckets);
    return vocab;
}

train::TrainingSet build_training_set(std::span<const ehr::PatientRecord> primary, const eval::PatientSplit& split,
                                      std::span<const ehr::PatientRecord> secondary, const ehr::Vocabulary& vocab,
                                      double continuation_days, std::size_t max_len) {
    train::TrainingSet set;
    auto add = [&](const ehr::PatientRecord& r) {
        std::vector<ehr::TokenSequence> seqs;
        for (const auto& node : sim::emit_trigger_events(r)) {
            auto seq = ehr::split_at_time(r, vocab, node.t0, continuation_days);
            if (seq.continuation_length() == 0) {
                continue;
            }
            seq = ehr::truncate_sequence(seq, vocab, max_len);
            if (seq.continuation_length() > 0) {
                seqs.push_back(std::move(seq));
            }
        }
        if (!seqs.empty()) {
            set.patient_ids.push_back(r.id());
            set.sequences.push_back(std::move(seqs));
        }
    };
    for (const auto& r : primary) {
        if (split.train.count(r.id())) {
            add(r);
        }
    }
    for (const auto& r : secondary) {
        add(r);
    }
    if (set.patients() == 0) {
        throw DataError("no training sequences with a non-empty continuation");
    }
    return set;
}

void train(const config::Config& cfg, const fs::path& run_dir, const TrainOptions& options) {
    const auto tc = cfg.training();
    const auto eo = cfg.evaluation();
    const auto files = CohortFiles::in(resolve(cfg.get("data.dir")));
    require_files({files.events, files.vocab, files.buckets});
    std::optional<CohortFiles> sec_files;
    if (cfg.uses_secondary()) {
        sec_files = CohortFiles::in(resolve(cfg.get("data.secondary_dir")));
        require_files({sec_files->events});
    }
    const auto vocab = ehr::Vocabulary::load(files.vocab, files.buckets);
    const auto records = ehr::read_events(files.events);
    std::vector<ehr::PatientRecord> secondary;
    if (sec_files) {
        secondary = ehr::read_events(sec_files->events);
    }
    const auto split = eval::patient_split(ids_of(records), eo.split_seed);
    const auto data = build_training_set(records, split, secondary, vocab, cfg.get_double("train.continuation_days"),
                                         cfg.get_size("model.max_len"));

    prepare_dir(run_dir, options.overwrite);
    write_text(run_dir / "config.txt", cfg.to_text());
    write_text(run_dir / "version.txt", version_string() + '\n');

    auto state = make_state(cfg, vocab);
    train::RunOptions ro;
    ro.run_dir = run_dir;
    ro.checkpoint_every = cfg.get_size("train.checkpoint_every");
    if (options.progress) {
        const std::size_t every = std::max<std::size_t>(1, tc.total_steps / 10);
        ro.on_step = [&, every](const train::StepMetrics& m) {
            if (m.step % every == 0 || m.step == tc.total_steps) {
                *options.progress << "step " << m.step << "/" << tc.total_steps << "  l_sft " << m.l_sft;
                if (m.l_jepa) {
                    *options.progress << "  l_jepa " << *m.l_jepa;
                }
                *options.progress << '\n';
            }
        };
    }
    train::run_training(state, tc, data, ro);
}

fs::path latest_checkpoint(const fs::path& run_dir) {
    std::optional<std::size_t> best;
    fs::path path;
    if (fs::is_directory(run_dir)) {
        for (const auto& entry : fs::directory_iterator(run_dir)) {
            const auto name = entry.path().filename().string();
            if (name.starts_with("step_") && name.ends_with(".ckpt")) {
                const auto digits = name.substr(5, name.size() - 10);
                if (!digits.empty() && digits.find_first_not_of("0123456789") == std::string::npos) {
                    const auto k = std::stoull(digits);
                    if (!best || k > *best) {
                        best = k;
                        path = entry.path();
                    }
                }
            }
        }
    }
    if (!best) {
        throw DataError("no checkpoint found in " + run_dir.string());
    }
    return path;
}

LoadedRun load_run(const fs::path& run_dir, const std::optional<fs::path>& checkpoint) {
    const auto config_path = run_dir / "config.txt";
    require_files({config_path});
    auto cfg = config::Config::load(config_path);
    const auto files = CohortFiles::in(resolve(cfg.get("data.dir")));
    require_files({files.vocab, files.buckets});
    auto vocab = ehr::Vocabulary::load(files.vocab, files.buckets);
    auto state = make_state(cfg, vocab);
    const auto ckpt = checkpoint ? *checkpoint : latest_checkpoint(run_dir);
    require_files({ckpt});
    train::load_checkpoint(ckpt, state);
    return {std::move(cfg), std::move(vocab), std::move(state)};
}

eval::Report evaluate(const EvalRequest& request) {
    const auto config_path = request.run_dir / "config.txt";
    require_files({config_path});
    const auto files = CohortFiles::in(resolve(config::Config::load(config_path).get("data.dir")));
    require_files({files.events, files.labels, files.vocab, files.buckets});
    const auto run = load_run(request.run_dir, request.checkpoint);
    auto options = run.config.evaluation();
    if (request.pooling) {
        options.pooling = *request.pooling;
    }
    const auto records = ehr::read_events(files.events);
    const auto labels = sim::read_labels(files.labels);

    const auto report = eval::evaluate_run(run.state.bundle, records, labels, run.vocab, options);
    const auto out = request.out_dir ? *request.out_dir : request.run_dir;
    fs::create_directories(out);
    eval::write_report(out / "report.tsv", out / "report.json", report);
    return report;
}

std::optional<double> mean_auc(const eval::Report& report) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& t : report.tasks) {
        if (t.metric == "auc" && t.value) {
            sum += *t.value;
            ++n;
        }
    }
    if (n == 0) {
        return std::nullopt;
    }
    return sum / static_cast<double>(n);
}

Axis parse_axis(std::string_view spec) {
    const auto eq = spec.find('=');
    if (eq == std::string_view::npos || eq == 0 || eq + 1 == spec.size()) {
        throw UsageError("axis '" + std::string(spec) + "' must look like key=v1,v2");
    }
    Axis axis;
    axis.key = std::string(spec.substr(0, eq));
    std::stringstream ss{std::string(spec.substr(eq + 1))};
    std::string v;
    while (std::getline(ss, v, ',')) {
        if (v.empty()) {
            throw UsageError("axis '" + axis.key + "' has an empty value");
        }
        axis.values.push_back(v);
    }
    return axis;
}

std::vector<CellResult> ablate(const config::Config& base, std::span<const Axis> axes, const fs::path& root,
                               const TrainOptions& options) {
    if (axes.empty()) {
        throw UsageError("ablation grid is empty");
    }
    std::size_t cells = 1;
    for (const auto& a : axes) {
        if (a.values.empty()) {
            throw UsageError("ablation axis '" + a.key + "' has no values");
        }
        cells *= a.values.size();
    }
    // Resolve every cell before running anything so that bad keys fail early.
    std::vector<CellResult> results;
    for (std::size_t c = 0; c < cells; ++c) {
        CellResult r;
        r.index = c;
        r.config = base;
        std::size_t rest = c;
        for (auto a = axes.rbegin(); a != axes.rend(); ++a) {
            const auto& v = a->values[rest % a->values.size()];
            rest /= a->values.size();
            r.settings.insert(r.settings.begin(), {a->key, v});
        }
        for (const auto& [key, value] : r.settings) {
            if (key == "loss_ratio") {
                const auto colon = value.find(':');
                if (colon == std::string::npos) {
                    throw UsageError("loss_ratio value '" + value + "' must look like jepa:sft");
                }
                r.config.set("train.lambda_jepa", value.substr(0, colon));
                r.config.set("train.lambda_sft", value.substr(colon + 1));
            } else {
                r.config.set(key, value);
            }
        }
        r.config.training();
        r.config.predictor();
        results.push_back(std::move(r));
    }

    prepare_dir(root, options.overwrite);
    for (auto& r : results) {
        const auto dir = root / ("cell_" + std::to_string(r.index));
        if (options.progress) {
            *options.progress << "cell " << r.index + 1 << "/" << results.size() << '\n';
        }
        try {
            train(r.config, dir, options);
            const auto report = evaluate({dir, std::nullopt, std::nullopt, std::nullopt});
            r.auc = mean_auc(report);
            for (const auto& t : report.tasks) {
                if (t.task == "progression_180d") {
                    r.progression_auc = t.value;
                }
            }
        } catch (const std::exception& e) {
            r.error = e.what();
        }
    }
    write_text(root / "ablation.tsv", format_ablation(results));
    return results;
}

std::string format_ablation(std::span<const CellResult> cells) {
    std::ostringstream os;
    os << "cell\tpred_depth\tpred_width\tloss_ratio\tmask_ratio\tmean_auc\tprogression_auc\tsettings\tstatus\n";
    for (const auto& c : cells) {
        std::string settings;
        for (const auto& [k, v] : c.settings) {
            settings += (settings.empty() ? "" : ";") + k + "=" + v;
        }
        os << c.index << '\t' << c.config.get("predictor.depth") << '\t' << c.config.get("predictor.width") << "h\t"
           << loss_ratio(c.config) << '\t' << c.config.get("train.mask_ratio") << '\t'
           << (c.auc ? ehr::format_number(*c.auc) : "NA") << '\t'
           << (c.progression_auc ? ehr::format_number(*c.progression_auc) : "NA") << '\t' << settings << '\t'
           << (c.error.empty() ? "ok" : "failed: " + c.error) << '\n';
    }
    return os.str();
}

} // namespace smb::pipeline
