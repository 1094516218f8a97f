#pragma once

// Point-in-time evaluation: decision-node snapshots, frozen embeddings,
// linear probes, ranking metrics and the bag-of-counts baseline.

#include "smb/cohort_sim.hpp"
#include "smb/ehr.hpp"
#include "smb/model.hpp"

#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace smb::eval {

inline constexpr double kEndOfLifeDays = 7.0;

struct Snapshot {
    std::string patient_id;
    std::size_t record_index = 0;
    double t0 = 0.0;
    sim::TriggerKind trigger = sim::TriggerKind::therapy_start;
    ehr::TokenSequence context; // history up to and including t0
    sim::OutcomeLabels labels;
};

// One snapshot per trigger event, excluding nodes with t0 > death - 7 days.
// Throws DataError naming (patient, t0) when a node has no label row.
std::vector<Snapshot> make_snapshots(std::span<const ehr::PatientRecord> records,
                                     std::span<const sim::LabelRow> labels, const ehr::Vocabulary& vocab,
                                     std::size_t max_len);

struct PatientSplit {
    std::set<std::string> train;
    std::set<std::string> test;
};

// Hash-ordered assignment with |test| = round(0.15 N); needs N >= 20.
PatientSplit patient_split(std::span<const std::string> patient_ids, std::uint64_t seed);

enum class Pooling { last, mean };
std::string_view pooling_name(Pooling p);
Pooling parse_pooling(std::string_view name);

// Final-layer online-encoder state of the context; no gradients recorded.
std::vector<double> extract_embedding(const model::ModelBundle& bundle, const Snapshot& snapshot,
                                      Pooling pooling = Pooling::last);

using Matrix = std::vector<std::vector<double>>;

struct Standardizer {
    std::vector<double> mean;
    std::vector<double> scale; // 0 for constant columns
    std::size_t constant_columns = 0;

    static Standardizer fit(const Matrix& x);
    Matrix apply(const Matrix& x) const;
};

struct LogisticModel {
    std::vector<double> weights;
    double bias = 0.0;

    double predict(std::span<const double> x) const; // probability
};

struct ProbeOptions {
    double l2 = 1e-3;
    std::size_t max_iters = 500;
    double tolerance = 1e-8; // stop when the gradient max-norm falls below
};

// Maximises mean Bernoulli log-likelihood - l2/2 |w|^2 (bias unpenalised) by
// gradient ascent with step halving, from zero. Throws DataError
// "degenerate labels" if y has a single class.
LogisticModel fit_logistic_probe(const Matrix& x, std::span<const int> y, const ProbeOptions& opt = {});
double logistic_objective(const LogisticModel& m, const Matrix& x, std::span<const int> y, double l2);

// Breslow partial log-likelihood sum over events.
double cox_partial_log_likelihood(const Matrix& x, std::span<const double> time, std::span<const int> event,
                                  std::span<const double> beta);

struct CoxModel {
    std::vector<double> beta;
    std::vector<double> objective_trace; // penalised objective after each accepted step

    double risk(std::span<const double> x) const;
};

// Maximises PLL / n_events - l2/2 |beta|^2 by gradient ascent with
// backtracking. Throws DataError if there are no events.
CoxModel fit_cox_probe(const Matrix& x, std::span<const double> time, std::span<const int> event,
                       const ProbeOptions& opt = {});

// Rank formula with midranks for ties. Throws DataError on a single class.
double auc_roc(std::span<const double> scores, std::span<const int> labels);

// Pairs (i, j) with t_i < t_j and event_i are comparable; concordant when
// score_i > score_j, ties count 1/2. Throws DataError with no comparable pair.
double concordance_index(std::span<const double> scores, std::span<const double> time, std::span<const int> event);

// Per-category counts, most recent bucket index + 1 per measurement code (0
// when never measured), and t0.
std::vector<double> baseline_features(const ehr::PatientRecord& record, const ehr::Vocabulary& vocab, double t0);
std::size_t baseline_dimension(const ehr::Vocabulary& vocab);

struct TaskResult {
    std::string category;
    std::string task;
    std::string metric;          // auc or c_index
    std::optional<double> value; // empty when skipped
    std::optional<double> baseline;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    std::string skip_reason;
};

struct CategorySummary {
    std::string category;
    double mean = 0.0;
    double std = 0.0; // population
    double baseline_mean = 0.0;
    double baseline_std = 0.0;
    std::size_t evaluated = 0;
    std::size_t skipped = 0;
};

struct EvalOptions {
    Pooling pooling = Pooling::last;
    std::uint64_t split_seed = 17;
    ProbeOptions probe;
};

struct Report {
    Pooling pooling = Pooling::last;
    std::size_t snapshots = 0;
    std::size_t excluded_end_of_life = 0;
    std::size_t constant_embedding_columns = 0;
    std::vector<TaskResult> tasks;
    std::vector<CategorySummary> categories;
};

// Mean and population std over evaluated tasks per category, in first-seen
// category order; skipped tasks are counted, not averaged.
std::vector<CategorySummary> summarize(std::span<const TaskResult> tasks);

Report evaluate_run(const model::ModelBundle& bundle, std::span<const ehr::PatientRecord> records,
                    std::span<const sim::LabelRow> labels, const ehr::Vocabulary& vocab, const EvalOptions& options);

// Probe fitting and reporting on precomputed features, shared with the
// oracle-feature calibration check.
Report evaluate_features(std::span<const Snapshot> snapshots, const Matrix& features, const Matrix& baseline,
                         const PatientSplit& split, const EvalOptions& options);

std::string format_report(const Report& r);
void write_report(const std::filesystem::path& tsv, const std::filesystem::path& json, const Report& r);

} // namespace smb::eval
