#pragma once

// Synthetic longitudinal cohorts driven by a latent (severity, velocity,
// reserve) system stepped once per day.
//
// Regimes differ only in a time scale k (chronic 1, acute 4): visit rates,
// velocity relaxation, hazards and severity drift all run k times faster.

#include "smb/ehr.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace smb::sim {

enum class Regime { chronic, acute };

std::string_view regime_name(Regime r);
Regime parse_regime(std::string_view name);

struct LatentState {
    double severity = 0.0;
    double velocity = 0.0; // severity units per day, before the regime time scale
    double reserve = 0.0;
};

struct GeneratorConfig {
    std::size_t n_patients = 2000;
    Regime regime = Regime::chronic;
    std::size_t horizon_days = 720;
    double event_rate = 0.03; // visits per day (chronic scale)
    double noise_sd = 0.4;    // severity readout noise, severity units
    std::uint64_t seed = 1;

    double velocity_mean = 0.002;
    double velocity_sd = 0.012;      // stationary sd of velocity
    double velocity_relax = 1e-4;    // per-day mean reversion of velocity
    double severity_diffusion = 0.008;
    double velocity_readout_sd = 0.012;
    double treatment_effect = 0.015; // velocity kick at therapy start
    double treatment_threshold = 4.5;
    double progression_delta = 1.0;  // severity rise over 90 days that counts as progression
    double death_base = 2e-5;        // per-day hazard at severity 0
    double death_slope = 0.5;        // log-hazard per severity unit
    double toxicity_base = 2e-3;     // per-day hazard while on therapy at reserve 0
    double surgery_rate = 0.05;      // per-visit chance of curative surgery while severity < 3

    double time_scale() const { return regime == Regime::acute ? 4.0 : 1.0; }
    void validate() const;
};

// Reserved trigger codes; each decision-node kind maps to exactly one.
enum class TriggerKind { therapy_start, progression, curative_surgery, metastatic_diagnosis, performance_decline };

inline constexpr std::string_view kTherapyStart = "TX_START";
inline constexpr std::string_view kProgression = "PROG";
inline constexpr std::string_view kCurativeSurgery = "SURG_CURATIVE";
inline constexpr std::string_view kMetastatic = "DX_METASTATIC";
inline constexpr std::string_view kPerformanceDecline = "ECOG_DECLINE";
inline constexpr std::string_view kToxicity = "TOX_G3";

std::string_view trigger_name(TriggerKind k);
TriggerKind parse_trigger(std::string_view name);
std::optional<TriggerKind> trigger_for_code(std::string_view code);

struct DecisionNode {
    double t0 = 0.0;
    TriggerKind kind = TriggerKind::therapy_start;
};

// One node per event carrying a reserved trigger code, in record order.
std::vector<DecisionNode> emit_trigger_events(const ehr::PatientRecord& record);

struct OutcomeLabels {
    bool progression_180d = false;
    bool toxicity_90d = false;
    bool mortality_365d = false;
    double survival_time = 0.0;
    bool event_indicator = false;
};

inline constexpr double kLabelBufferDays = 1.0;

// Windows are (t0 + 1, t0 + W]; survival is censored at horizon_days.
OutcomeLabels label_outcomes(const ehr::PatientRecord& record, double t0, double horizon_days);

struct SimulatedPatient {
    ehr::PatientRecord record;
    std::vector<LatentState> latents; // one per day, index = floor(time)
};

std::string patient_id(Regime regime, std::size_t index);

// Deterministic in config; patient i only depends on (seed, i).
std::vector<SimulatedPatient> generate_cohort(const GeneratorConfig& config);
SimulatedPatient simulate_patient(const GeneratorConfig& config, std::size_t index);

struct LabelRow {
    std::string patient_id;
    double t0 = 0.0;
    TriggerKind trigger = TriggerKind::therapy_start;
    OutcomeLabels labels;
    std::optional<LatentState> latent; // ground truth at t0 when known
};

std::vector<LabelRow> label_cohort(std::span<const SimulatedPatient> cohort, double horizon_days);

// patient_id<TAB>t0<TAB>trigger<TAB>label_name<TAB>value, five rows per node.
void write_labels(const std::filesystem::path& path, std::span<const LabelRow> rows);
std::vector<LabelRow> read_labels(const std::filesystem::path& path);

// patient_id<TAB>t0<TAB>severity<TAB>velocity<TAB>reserve at each node.
void write_latents(const std::filesystem::path& path, std::span<const LabelRow> rows);
void attach_latents(const std::filesystem::path& path, std::vector<LabelRow>& rows);

} // namespace smb::sim
