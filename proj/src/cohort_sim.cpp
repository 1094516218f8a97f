#include "smb/cohort_sim.hpp"

#include "smb/error.hpp"
#include "smb/seed.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <sstream>

namespace smb::sim {

using ehr::Category;
using ehr::ClinicalEvent;
using ehr::format_number;

namespace {

constexpr std::array<std::string_view, 5> kTriggerNames = {
    "therapy_start", "progression", "curative_surgery", "metastatic_diagnosis", "performance_decline"};
constexpr std::array<std::string_view, 5> kTriggerCodes = {kTherapyStart, kProgression, kCurativeSurgery,
                                                           kMetastatic, kPerformanceDecline};
constexpr std::array<std::string_view, 5> kLabelNames = {"progression_180d", "toxicity_90d", "mortality_365d",
                                                         "survival_time", "event_indicator"};
constexpr std::array<double, 3> kConditionThresholds = {3.0, 5.0, 8.0};
constexpr double kProgressionLookback = 90.0;
constexpr double kTherapyDays = 180.0;

double round3(double t) { return std::round(t * 1000.0) / 1000.0; }

std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        out.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
        if (tab == std::string_view::npos) {
            return out;
        }
        start = tab + 1;
    }
}

bool in_window(double t, double t0, double width) {
    return t > t0 + kLabelBufferDays && t <= t0 + width;
}

class PatientSimulator {
public:
    PatientSimulator(const GeneratorConfig& cfg, std::size_t index)
        : cfg_(cfg), id_(patient_id(cfg.regime, index)),
          rng_(splitmix64(cfg.seed ^ splitmix64(static_cast<std::uint64_t>(index)))) {}

    SimulatedPatient run() {
        const double k = cfg_.time_scale();
        const double relax = 1.0 - std::min(1.0, k * cfg_.velocity_relax);
        const double innovation = cfg_.velocity_sd * std::sqrt(1.0 - relax * relax);

        LatentState s;
        s.severity = uniform(1.0, 6.0);
        s.velocity = cfg_.velocity_mean + cfg_.velocity_sd * normal();
        s.reserve = normal();

        const int age = 40 + static_cast<int>(uniform(0.0, 40.0));
        emit(0.0, Category::demographics, "age" + std::to_string(age / 10 * 10));
        emit(0.0, Category::demographics, uniform(0.0, 1.0) < 0.5 ? "SEX_F" : "SEX_M");

        std::array<bool, kConditionThresholds.size()> crossed{};
        bool metastatic = false;
        bool treated = false;
        bool operated = false;
        int worst_ecog = ecog(s.severity);
        double therapy_until = -1.0;
        double last_progression = -std::numeric_limits<double>::infinity();
        std::vector<LatentState> latents;

        for (std::size_t day = 0; day < cfg_.horizon_days; ++day) {
            const double t = static_cast<double>(day);
            latents.push_back(s);

            for (std::size_t i = 0; i < kConditionThresholds.size(); ++i) {
                if (!crossed[i] && s.severity >= kConditionThresholds[i]) {
                    crossed[i] = true;
                    emit(event_time(t), Category::conditions,
                         "COND_S" + std::to_string(static_cast<int>(kConditionThresholds[i])));
                }
            }
            if (!metastatic && s.severity >= 7.0) {
                metastatic = true;
                emit(event_time(t), Category::conditions, std::string(kMetastatic));
            }
            if (const int e = ecog(s.severity); e > worst_ecog) {
                worst_ecog = e;
                emit(event_time(t), Category::observations, std::string(kPerformanceDecline));
            }
            if (t >= kProgressionLookback && t - last_progression >= kProgressionLookback) {
                const double rise = s.severity - latents[day - static_cast<std::size_t>(kProgressionLookback)].severity;
                if (rise >= cfg_.progression_delta) {
                    last_progression = t;
                    emit(event_time(t), Category::conditions, std::string(kProgression));
                }
            }

            if (bernoulli(k * cfg_.event_rate)) {
                visit(t, k, s, treated, operated, therapy_until);
            }
            if (t < therapy_until && bernoulli(k * cfg_.toxicity_base * std::exp(-0.8 * s.reserve))) {
                emit(event_time(t), Category::observations, std::string(kToxicity));
            }
            if (bernoulli(k * cfg_.death_base * std::exp(cfg_.death_slope * s.severity))) {
                emit(round3(t + 0.95), Category::death, "DEATH");
                break;
            }

            s.velocity = cfg_.velocity_mean + relax * (s.velocity - cfg_.velocity_mean) + innovation * normal();
            s.severity = std::clamp(s.severity + k * s.velocity + std::sqrt(k) * cfg_.severity_diffusion * normal(),
                                    0.0, 10.0);
        }
        return {ehr::PatientRecord::build(id_, std::move(events_)), std::move(latents)};
    }

private:
    void visit(double t, double k, LatentState& s, bool& treated, bool& operated, double& therapy_until) {
        emit(event_time(t), Category::measurements, "SEV", 50.0 + 10.0 * (s.severity + cfg_.noise_sd * normal()));
        emit(event_time(t), Category::measurements, "VEL",
             1000.0 * k * (s.velocity + cfg_.velocity_readout_sd * normal()));
        if (uniform(0.0, 1.0) < 0.3) {
            emit(event_time(t), Category::notes, "NOTE_" + std::to_string(1 + static_cast<int>(uniform(0.0, 4.0))));
        }
        if (uniform(0.0, 1.0) < 0.2) {
            emit(event_time(t), Category::observations, "OBS_" + std::to_string(1 + static_cast<int>(uniform(0.0, 3.0))));
        }
        if (!treated && s.severity >= cfg_.treatment_threshold) {
            treated = true;
            therapy_until = t + kTherapyDays / k;
            s.velocity -= cfg_.treatment_effect;
            emit(event_time(t), Category::drugs, std::string(kTherapyStart));
        } else if (t < therapy_until) {
            emit(event_time(t), Category::drugs, "DRUG_MAINT");
        }
        if (!operated && s.severity < 3.0 && uniform(0.0, 1.0) < cfg_.surgery_rate) {
            operated = true;
            s.severity = std::max(0.0, s.severity - 1.5);
            emit(event_time(t), Category::procedures, std::string(kCurativeSurgery));
        }
    }

    static int ecog(double severity) { return std::min(4, static_cast<int>(severity / 2.5)); }

    double event_time(double day) { return round3(day + uniform(0.0, 0.9)); }

    void emit(double time, Category c, std::string code, std::optional<double> value = std::nullopt) {
        if (value) {
            value = round3(*value);
        }
        events_.push_back({id_, time, c, std::move(code), value});
    }

    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
    double normal() { return normal_(rng_); }
    bool bernoulli(double p) { return uniform(0.0, 1.0) < p; }

    const GeneratorConfig& cfg_;
    std::string id_;
    std::mt19937_64 rng_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::vector<ClinicalEvent> events_;
};

std::string trigger_key(const std::string& pid, double t0, TriggerKind k) {
    return pid + '\t' + format_number(t0) + '\t' + std::string(trigger_name(k));
}

} // namespace

std::string_view regime_name(Regime r) { return r == Regime::acute ? "acute" : "chronic"; }

Regime parse_regime(std::string_view name) {
    if (name == "chronic") {
        return Regime::chronic;
    }
    if (name == "acute") {
        return Regime::acute;
    }
    throw UsageError("unknown regime '" + std::string(name) + "' (expected chronic or acute)");
}

void GeneratorConfig::validate() const {
    if (n_patients < 1) {
        throw UsageError("generator: n_patients must be >= 1");
    }
    if (!(event_rate > 0.0)) {
        throw UsageError("generator: event_rate must be > 0");
    }
    if (horizon_days < 30) {
        throw UsageError("generator: horizon_days must be >= 30");
    }
    if (noise_sd < 0.0 || velocity_sd < 0.0 || velocity_readout_sd < 0.0 || severity_diffusion < 0.0) {
        throw UsageError("generator: noise scales must be non-negative");
    }
    if (!(velocity_relax > 0.0 && velocity_relax * time_scale() <= 1.0)) {
        throw UsageError("generator: velocity_relax * time scale must be in (0, 1]");
    }
}

std::string_view trigger_name(TriggerKind k) { return kTriggerNames[static_cast<std::size_t>(k)]; }

TriggerKind parse_trigger(std::string_view name) {
    for (std::size_t i = 0; i < kTriggerNames.size(); ++i) {
        if (kTriggerNames[i] == name) {
            return static_cast<TriggerKind>(i);
        }
    }
    throw DataError("unknown trigger kind '" + std::string(name) + "'");
}

std::optional<TriggerKind> trigger_for_code(std::string_view code) {
    for (std::size_t i = 0; i < kTriggerCodes.size(); ++i) {
        if (kTriggerCodes[i] == code) {
            return static_cast<TriggerKind>(i);
        }
    }
    return std::nullopt;
}

std::vector<DecisionNode> emit_trigger_events(const ehr::PatientRecord& record) {
    std::vector<DecisionNode> nodes;
    for (const auto& e : record.events()) {
        if (auto kind = trigger_for_code(e.code)) {
            nodes.push_back({e.time, *kind});
        }
    }
    return nodes;
}

OutcomeLabels label_outcomes(const ehr::PatientRecord& record, double t0, double horizon_days) {
    if (!(t0 >= 0.0) || t0 > horizon_days) {
        throw std::invalid_argument("label_outcomes: t0 " + format_number(t0) + " outside horizon " +
                                    format_number(horizon_days));
    }
    const auto death = record.death_time();
    if (death && *death < t0) {
        throw std::invalid_argument("label_outcomes: t0 " + format_number(t0) + " after death of " + record.id());
    }
    OutcomeLabels out;
    for (const auto& e : record.events()) {
        if (e.code == kProgression && in_window(e.time, t0, 180.0)) {
            out.progression_180d = true;
        } else if (e.code == kToxicity && in_window(e.time, t0, 90.0)) {
            out.toxicity_90d = true;
        }
    }
    if (death) {
        out.event_indicator = true;
        out.survival_time = *death - t0;
        out.mortality_365d = in_window(*death, t0, 365.0);
    } else {
        out.survival_time = horizon_days - t0;
    }
    return out;
}

std::string patient_id(Regime regime, std::size_t index) {
    std::string digits = std::to_string(index);
    if (digits.size() < 6) {
        digits.insert(0, 6 - digits.size(), '0');
    }
    return (regime == Regime::acute ? "A" : "C") + digits;
}

SimulatedPatient simulate_patient(const GeneratorConfig& config, std::size_t index) {
    return PatientSimulator(config, index).run();
}

std::vector<SimulatedPatient> generate_cohort(const GeneratorConfig& config) {
    config.validate();
    std::vector<SimulatedPatient> out;
    out.reserve(config.n_patients);
    for (std::size_t i = 0; i < config.n_patients; ++i) {
        out.push_back(simulate_patient(config, i));
    }
    return out;
}

std::vector<LabelRow> label_cohort(std::span<const SimulatedPatient> cohort, double horizon_days) {
    std::vector<LabelRow> rows;
    for (const auto& p : cohort) {
        for (const auto& node : emit_trigger_events(p.record)) {
            LabelRow row{p.record.id(), node.t0, node.kind, label_outcomes(p.record, node.t0, horizon_days),
                         std::nullopt};
            const auto day = static_cast<std::size_t>(std::floor(node.t0));
            if (day < p.latents.size()) {
                row.latent = p.latents[day];
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

void write_labels(const std::filesystem::path& path, std::span<const LabelRow> rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw DataError("cannot write label file " + path.string());
    }
    for (const auto& r : rows) {
        const std::string key = trigger_key(r.patient_id, r.t0, r.trigger);
        const auto& l = r.labels;
        f << key << '\t' << kLabelNames[0] << '\t' << int(l.progression_180d) << '\n';
        f << key << '\t' << kLabelNames[1] << '\t' << int(l.toxicity_90d) << '\n';
        f << key << '\t' << kLabelNames[2] << '\t' << int(l.mortality_365d) << '\n';
        f << key << '\t' << kLabelNames[3] << '\t' << format_number(l.survival_time) << '\n';
        f << key << '\t' << kLabelNames[4] << '\t' << int(l.event_indicator) << '\n';
    }
    if (!f) {
        throw DataError("write failed for " + path.string());
    }
}

std::vector<LabelRow> read_labels(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw DataError("cannot read label file " + path.string());
    }
    std::vector<LabelRow> rows;
    std::vector<unsigned> seen;
    std::map<std::string, std::size_t> index;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
        const auto fields = split_tabs(line);
        if (fields.size() != 5) {
            throw DataError(where + "expected 5 fields, got " + std::to_string(fields.size()));
        }
        try {
            const std::string pid(fields[0]);
            const double t0 = ehr::parse_number(fields[1], "t0");
            const TriggerKind kind = parse_trigger(fields[2]);
            const std::string key = trigger_key(pid, t0, kind);
            auto [it, inserted] = index.emplace(key, rows.size());
            if (inserted) {
                rows.push_back({pid, t0, kind, {}, std::nullopt});
                seen.push_back(0);
            }
            const auto slot = std::find(kLabelNames.begin(), kLabelNames.end(), fields[3]);
            if (slot == kLabelNames.end()) {
                throw DataError("unknown label '" + std::string(fields[3]) + "'");
            }
            const auto which = static_cast<unsigned>(slot - kLabelNames.begin());
            if (seen[it->second] & (1u << which)) {
                throw DataError("duplicate label " + std::string(fields[3]));
            }
            seen[it->second] |= 1u << which;
            const double v = ehr::parse_number(fields[4], fields[3]);
            auto& l = rows[it->second].labels;
            switch (which) {
            case 0: l.progression_180d = v != 0.0; break;
            case 1: l.toxicity_90d = v != 0.0; break;
            case 2: l.mortality_365d = v != 0.0; break;
            case 3: l.survival_time = v; break;
            default: l.event_indicator = v != 0.0; break;
            }
        } catch (const DataError& err) {
            throw DataError(where + err.what());
        }
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (seen[i] != (1u << kLabelNames.size()) - 1) {
            throw DataError(path.string() + ": incomplete labels for patient " + rows[i].patient_id + " at t0 " +
                            format_number(rows[i].t0));
        }
    }
    return rows;
}

void write_latents(const std::filesystem::path& path, std::span<const LabelRow> rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw DataError("cannot write latent file " + path.string());
    }
    for (const auto& r : rows) {
        if (!r.latent) {
            continue;
        }
        f << r.patient_id << '\t' << format_number(r.t0) << '\t' << format_number(r.latent->severity) << '\t'
          << format_number(r.latent->velocity) << '\t' << format_number(r.latent->reserve) << '\n';
    }
}

void attach_latents(const std::filesystem::path& path, std::vector<LabelRow>& rows) {
    std::ifstream f(path);
    if (!f) {
        throw DataError("cannot read latent file " + path.string());
    }
    std::map<std::pair<std::string, double>, LatentState> by_node;
    std::string line;
    while (std::getline(f, line)) {
        const auto fields = split_tabs(line);
        if (fields.size() != 5) {
            throw DataError(path.string() + ": malformed latent row");
        }
        by_node[{std::string(fields[0]), ehr::parse_number(fields[1], "t0")}] = {
            ehr::parse_number(fields[2], "severity"), ehr::parse_number(fields[3], "velocity"),
            ehr::parse_number(fields[4], "reserve")};
    }
    for (auto& r : rows) {
        if (auto it = by_node.find({r.patient_id, r.t0}); it != by_node.end()) {
            r.latent = it->second;
        }
    }
}

} // namespace smb::sim
