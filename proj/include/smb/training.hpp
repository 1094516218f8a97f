#pragma once

// Joint SFT + JEPA objective, the dual-pass training step, schedules, batch
// assembly and checkpointing.

#include "smb/ehr.hpp"
#include "smb/model.hpp"
#include "smb/optim.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace smb::inline SMB_PRECISION::train {

using model::ModelBundle;
using nn::Tensor;

enum class Schedule { sft_only, hybrid, curriculum };

std::string_view schedule_name(Schedule s);
Schedule parse_schedule(std::string_view name);

struct TrainConfig {
    double lambda_sft = 1.0;
    double lambda_jepa = 1.0;
    double mask_ratio = 0.5;
    double tau = 0.996;
    Schedule mode = Schedule::hybrid;
    double switch_fraction = 0.5;
    std::size_t batch_size = 8;
    std::size_t total_steps = 400;
    double peak_lr = 1e-3;
    double warmup_frac = 0.03;
    double weight_decay = 0.1;
    double max_grad_norm = 1.0;
    std::uint64_t seed = 1;

    void validate() const;
    // Steps with index >= this run pass 2 (0-based); total_steps when never.
    std::size_t jepa_start() const;
    double lambda_jepa_at(std::size_t step) const;
    nn::AdamWOptions adamw() const;
};

struct StepMetrics {
    std::size_t step = 0; // 1-based
    double l_sft = 0.0;
    std::optional<double> l_jepa;
    double total = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
};

// Next-token cross-entropy on continuation tokens only, averaged per sequence
// and then over the batch.
Tensor sft_loss(const ModelBundle& bundle, std::span<const ehr::TokenSequence> batch);

struct JepaLoss {
    Tensor loss;
    std::vector<std::vector<std::size_t>> masked; // per sequence
};

// Mask, encode online, encode unmasked with the momentum encoder, predict and
// take the masked MSE; batch mean.
JepaLoss jepa_loss(const ModelBundle& bundle, std::span<const ehr::TokenSequence> batch, double mask_ratio,
                   std::mt19937_64& rng);

std::mt19937_64 mask_rng(std::uint64_t seed, std::size_t step);

struct PassLosses {
    double l_sft = 0.0;
    std::optional<double> l_jepa;
};

// Pass 1: backward(lambda_sft * L_SFT). Pass 2 (only when lambda_jepa > 0):
// backward(lambda_jepa * L_JEPA). Gradients accumulate in the parameters; no
// update is applied.
PassLosses accumulate_gradients(const ModelBundle& bundle, std::span<const ehr::TokenSequence> batch,
                                double lambda_sft, double lambda_jepa, double mask_ratio, std::mt19937_64& rng);

struct TrainState {
    ModelBundle bundle;
    nn::OptimizerState optimizer;
    std::size_t next_step = 0; // number of completed steps
    std::uint64_t optimizer_steps = 0;
    std::uint64_t ema_updates = 0;

    static TrainState create(ModelBundle bundle, const TrainConfig& cfg);
};

// One dual-pass step: accumulate both passes, clip, one AdamW update of the
// active parameters, one EMA update. Throws NumericalError naming the step on
// a non-finite loss.
StepMetrics train_step(TrainState& state, std::span<const ehr::TokenSequence> batch, const TrainConfig& cfg,
                       std::size_t step);

// Candidate training sequences grouped by patient; every sequence has a
// non-empty continuation.
struct TrainingSet {
    std::vector<std::string> patient_ids;
    std::vector<std::vector<ehr::TokenSequence>> sequences;

    std::size_t patients() const { return sequences.size(); }
};

// Batch for a 0-based step: patients visited in a per-epoch permutation, one
// node per patient drawn uniformly. A pure function of (seed, step).
std::vector<ehr::TokenSequence> make_batch(const TrainingSet& data, std::size_t batch_size, std::uint64_t seed,
                                           std::size_t step);

std::string format_metrics(const StepMetrics& m);

struct RunOptions {
    std::filesystem::path run_dir;
    std::size_t checkpoint_every = 0; // 0: final checkpoint only
    std::function<void(const StepMetrics&)> on_step;
};

// Continues from state.next_step to cfg.total_steps, appending to
// run_dir/metrics.tsv and writing run_dir/step_{k}.ckpt.
void run_training(TrainState& state, const TrainConfig& cfg, const TrainingSet& data, const RunOptions& options);

void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
// Loads into a state whose shapes come from `state`; nothing is modified when
// the container does not match.
void load_checkpoint(const std::filesystem::path& path, TrainState& state);

std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, std::size_t step);

} // namespace smb::inline SMB_PRECISION::train
