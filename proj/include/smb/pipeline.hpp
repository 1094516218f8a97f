#pragma once

// Run orchestration: generate -> ingest -> train -> eval -> ablate.

#include "smb/config.hpp"
#include "smb/eval.hpp"
#include "smb/training.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace smb::pipeline {

namespace fs = std::filesystem;

std::string version_string();

// $SMB_RUN_ROOT when set, else the working directory.
fs::path run_root();
// Relative paths are taken against run_root().
fs::path resolve(const fs::path& p);

struct CohortFiles {
    fs::path events, labels, latents, vocab, buckets;

    static CohortFiles in(const fs::path& dir);
};

// Simulates config.generator() and writes events, labels and latents into dir.
void generate(const config::Config& cfg, const fs::path& dir);

// Builds the vocabulary over the cohort in `dir` (plus `secondary` when given)
// and writes vocab.txt and buckets.tsv into `dir`.
ehr::Vocabulary ingest(const fs::path& dir, const std::optional<fs::path>& secondary, std::size_t numeric_bins);

// Training sequences: for every decision node of every train-split patient
// (and every secondary-cohort patient), history up to t0 followed by the next
// `continuation_days`; nodes with an empty continuation are dropped.
train::TrainingSet build_training_set(std::span<const ehr::PatientRecord> primary,
                                      const eval::PatientSplit& split,
                                      std::span<const ehr::PatientRecord> secondary, const ehr::Vocabulary& vocab,
                                      double continuation_days, std::size_t max_len);

struct TrainOptions {
    bool overwrite = false;
    std::ostream* progress = nullptr;
};

// Trains into run_dir (refused when it exists and is non-empty unless
// overwrite). Writes config.txt, version.txt, metrics.tsv and checkpoints.
void train(const config::Config& cfg, const fs::path& run_dir, const TrainOptions& options = {});

// Latest step_*.ckpt in a run directory.
fs::path latest_checkpoint(const fs::path& run_dir);

struct LoadedRun {
    config::Config config;
    ehr::Vocabulary vocab;
    train::TrainState state;
};

// Resolved config, vocabulary and model state of a run; checkpoint defaults to
// the latest.
LoadedRun load_run(const fs::path& run_dir, const std::optional<fs::path>& checkpoint = std::nullopt);

struct EvalRequest {
    fs::path run_dir;
    std::optional<fs::path> checkpoint;    // default: latest
    std::optional<eval::Pooling> pooling; // default: the run's eval.pooling
    std::optional<fs::path> out_dir;      // default: run_dir
};

// Evaluates a trained run on its primary cohort; writes report.tsv and
// report.json.
eval::Report evaluate(const EvalRequest& request);

// Mean over the evaluated AUC tasks.
std::optional<double> mean_auc(const eval::Report& report);

struct Axis {
    std::string key; // config key, or loss_ratio for lambda_jepa:lambda_sft
    std::vector<std::string> values;
};

// "key=v1,v2,..."
Axis parse_axis(std::string_view spec);

struct CellResult {
    std::size_t index = 0;
    std::vector<std::pair<std::string, std::string>> settings;
    config::Config config;
    std::optional<double> auc;
    std::optional<double> progression_auc;
    std::string error; // empty on success
};

// Cartesian grid, one run directory per cell under root, sequential; a failing
// cell is recorded and the rest continue. Writes root/ablation.tsv.
std::vector<CellResult> ablate(const config::Config& base, std::span<const Axis> axes, const fs::path& root,
                               const TrainOptions& options = {});

std::string format_ablation(std::span<const CellResult> cells);

} // namespace smb::pipeline
