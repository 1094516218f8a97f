#include "catch_amalgamated.hpp"

#include "smb/cohort_sim.hpp"
#include "smb/error.hpp"
#include "smb/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace smb;
using namespace smb::sim;
using ehr::Category;
using ehr::ClinicalEvent;
using ehr::PatientRecord;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("smb_sim_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

ClinicalEvent ev(const std::string& pid, double t, Category c, std::string code) {
    return {pid, t, c, std::move(code), std::nullopt};
}

bool same_events(const PatientRecord& a, const PatientRecord& b) {
    const auto& x = a.events();
    const auto& y = b.events();
    if (x.size() != y.size()) {
        return false;
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i].patient_id != y[i].patient_id || x[i].time != y[i].time || x[i].category != y[i].category ||
            x[i].code != y[i].code || x[i].value != y[i].value) {
            return false;
        }
    }
    return true;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

TEST_CASE("generation is deterministic and per-patient independent", "[sim]") {
    GeneratorConfig cfg;
    cfg.n_patients = 40;
    cfg.horizon_days = 365;
    const auto a = temp_dir("det_a");
    const auto b = temp_dir("det_b");
    for (const auto& dir : {a, b}) {
        const auto cohort = generate_cohort(cfg);
        std::vector<PatientRecord> records;
        for (const auto& p : cohort) {
            records.push_back(p.record);
        }
        ehr::write_events(dir / "events.tsv", records);
        const auto rows = label_cohort(cohort, static_cast<double>(cfg.horizon_days));
        write_labels(dir / "labels.tsv", rows);
    }
    CHECK(slurp(a / "events.tsv") == slurp(b / "events.tsv"));
    CHECK(slurp(a / "labels.tsv") == slurp(b / "labels.tsv"));
    CHECK_FALSE(slurp(a / "events.tsv").empty());

    const auto full = generate_cohort(cfg);
    const auto alone = simulate_patient(cfg, 17);
    CHECK(same_events(alone.record, full[17].record));

    auto other = cfg;
    other.seed = 2;
    CHECK_FALSE(same_events(simulate_patient(other, 17).record, alone.record));
    std::filesystem::remove_all(a);
    std::filesystem::remove_all(b);
}

TEST_CASE("no event follows death and latents stop at death", "[sim]") {
    GeneratorConfig cfg;
    cfg.n_patients = 300;
    std::size_t deaths = 0;
    for (const auto& p : generate_cohort(cfg)) {
        const auto death = p.record.death_time();
        for (const auto& e : p.record.events()) {
            REQUIRE(e.time < static_cast<double>(cfg.horizon_days));
            if (death) {
                REQUIRE(e.time <= *death);
            }
        }
        if (death) {
            ++deaths;
            CHECK(p.latents.size() == static_cast<std::size_t>(std::floor(*death)) + 1);
        } else {
            CHECK(p.latents.size() == cfg.horizon_days);
        }
        for (const auto& s : p.latents) {
            REQUIRE(s.severity >= 0.0);
            REQUIRE(s.severity <= 10.0);
        }
    }
    CHECK(deaths > 0);
}

TEST_CASE("one-year mortality rises across enrollment severity tertiles", "[sim][mortality]") {
    GeneratorConfig cfg;
    cfg.n_patients = 2400;
    cfg.horizon_days = 400;
    cfg.treatment_effect = 0.0;
    const auto cohort = generate_cohort(cfg);

    std::vector<double> sev0;
    for (const auto& p : cohort) {
        sev0.push_back(p.latents.front().severity);
    }
    auto sorted = sev0;
    std::sort(sorted.begin(), sorted.end());
    const double cut1 = sorted[sorted.size() / 3];
    const double cut2 = sorted[2 * sorted.size() / 3];

    // Oracle: the discrete-time compensator. Summing the daily death
    // probability over the days a patient is alive before day 365 has the
    // same expectation as the death indicator.
    std::array<double, 3> deaths{}, expected{}, count{};
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const auto& p = cohort[i];
        const int tertile = sev0[i] < cut1 ? 0 : (sev0[i] < cut2 ? 1 : 2);
        count[tertile] += 1.0;
        const auto death = p.record.death_time();
        deaths[tertile] += (death && *death <= 365.0) ? 1.0 : 0.0;
        for (std::size_t day = 0; day < std::min<std::size_t>(365, p.latents.size()); ++day) {
            expected[tertile] += cfg.death_base * std::exp(cfg.death_slope * p.latents[day].severity);
        }
    }
    std::array<double, 3> rate{};
    for (int k = 0; k < 3; ++k) {
        rate[k] = deaths[k] / count[k];
        const double oracle = expected[k] / count[k];
        const double se = std::sqrt(std::max(oracle * (1.0 - oracle), 1e-4) / count[k]);
        INFO("tertile " << k << " empirical " << rate[k] << " oracle " << oracle);
        CHECK(std::abs(rate[k] - oracle) < 4.0 * se);
    }
    CHECK(rate[0] < rate[1]);
    CHECK(rate[1] < rate[2]);
}

// Events within one visit share a day, so gaps are measured between
// distinct event days.
TEST_CASE("acute regime has shorter inter-event gaps", "[sim][regime]") {
    auto gaps = [](Regime r) {
        GeneratorConfig cfg;
        cfg.n_patients = 1000;
        cfg.horizon_days = 180;
        cfg.regime = r;
        std::vector<double> out;
        for (const auto& p : generate_cohort(cfg)) {
            std::optional<double> prev;
            for (const auto& e : p.record.events()) {
                const double day = std::floor(e.time);
                if (prev && day > *prev) {
                    out.push_back(day - *prev);
                }
                prev = day;
            }
        }
        return median(out);
    };
    const double chronic = gaps(Regime::chronic);
    const double acute = gaps(Regime::acute);
    INFO("chronic " << chronic << " acute " << acute);
    CHECK(acute < chronic);
}

TEST_CASE("label_outcomes windows", "[sim][labels]") {
    const auto dead = PatientRecord::build("p", {ev("p", 10.0, Category::drugs, "TX_START"),
                                                 ev("p", 410.0, Category::death, "DEATH")});
    const auto l = label_outcomes(dead, 10.0, 720.0);
    CHECK_FALSE(l.mortality_365d);
    CHECK(l.event_indicator);
    CHECK(l.survival_time == 400.0);

    const auto quiet = PatientRecord::build("q", {ev("q", 5.0, Category::drugs, "TX_START")});
    const auto c = label_outcomes(quiet, 5.0, 720.0);
    CHECK_FALSE(c.progression_180d);
    CHECK_FALSE(c.toxicity_90d);
    CHECK_FALSE(c.mortality_365d);
    CHECK_FALSE(c.event_indicator);
    CHECK(c.survival_time == 715.0);

    const auto buffered = PatientRecord::build("r", {ev("r", 20.0, Category::drugs, "TX_START"),
                                                     ev("r", 20.5, Category::conditions, "PROG"),
                                                     ev("r", 20.9, Category::observations, "TOX_G3")});
    const auto b = label_outcomes(buffered, 20.0, 720.0);
    CHECK_FALSE(b.progression_180d);
    CHECK_FALSE(b.toxicity_90d);

    const auto later = PatientRecord::build("s", {ev("s", 20.0, Category::drugs, "TX_START"),
                                                  ev("s", 200.0, Category::conditions, "PROG"),
                                                  ev("s", 110.0, Category::observations, "TOX_G3"),
                                                  ev("s", 385.0, Category::death, "DEATH")});
    const auto s = label_outcomes(later, 20.0, 720.0);
    CHECK(s.progression_180d);
    CHECK(s.toxicity_90d);
    CHECK(s.mortality_365d);
    CHECK(s.survival_time == 365.0);
    CHECK_FALSE(label_outcomes(later, 19.0, 720.0).progression_180d);

    CHECK_THROWS(label_outcomes(quiet, 721.0, 720.0));
    CHECK_THROWS(label_outcomes(dead, 500.0, 720.0));
}

TEST_CASE("emit_trigger_events", "[sim][triggers]") {
    const auto one = PatientRecord::build("p", {ev("p", 3.0, Category::drugs, "TX_START"),
                                                ev("p", 4.0, Category::drugs, "DRUG_MAINT")});
    const auto n1 = emit_trigger_events(one);
    REQUIRE(n1.size() == 1);
    CHECK(n1[0].kind == TriggerKind::therapy_start);
    CHECK(n1[0].t0 == 3.0);

    const auto none = PatientRecord::build("q", {ev("q", 1.0, Category::notes, "NOTE_1")});
    CHECK(emit_trigger_events(none).empty());

    const auto prog = PatientRecord::build("r", {ev("r", 90.0, Category::conditions, "PROG"),
                                                 ev("r", 30.0, Category::conditions, "PROG")});
    const auto n2 = emit_trigger_events(prog);
    REQUIRE(n2.size() == 2);
    CHECK(n2[0].t0 == 30.0);
    CHECK(n2[1].t0 == 90.0);
    CHECK(n2[0].kind == TriggerKind::progression);

    for (auto k : {TriggerKind::therapy_start, TriggerKind::progression, TriggerKind::curative_surgery,
                   TriggerKind::metastatic_diagnosis, TriggerKind::performance_decline}) {
        CHECK(parse_trigger(trigger_name(k)) == k);
    }
    CHECK_FALSE(trigger_for_code(kToxicity).has_value());
}

TEST_CASE("latent severity and velocity carry the progression signal", "[sim][oracle]") {
    GeneratorConfig cfg;
    cfg.n_patients = 1000;
    const auto cohort = generate_cohort(cfg);
    const auto rows = label_cohort(cohort, static_cast<double>(cfg.horizon_days));
    eval::Matrix both, sev;
    std::vector<int> y;
    for (const auto& r : rows) {
        REQUIRE(r.latent.has_value());
        both.push_back({r.latent->severity, r.latent->velocity});
        sev.push_back({r.latent->severity});
        y.push_back(r.labels.progression_180d ? 1 : 0);
    }
    auto auc_of = [&](const eval::Matrix& x) {
        const auto st = eval::Standardizer::fit(x);
        const auto z = st.apply(x);
        const auto m = eval::fit_logistic_probe(z, y);
        std::vector<double> scores;
        for (const auto& row : z) {
            scores.push_back(m.predict(row));
        }
        return eval::auc_roc(scores, y);
    };
    const double a_both = auc_of(both);
    const double a_sev = auc_of(sev);
    INFO("severity+velocity " << a_both << " severity only " << a_sev);
    CHECK(a_both >= 0.85);
    CHECK(a_both - a_sev >= 0.05);
}

TEST_CASE("label and latent files round trip", "[sim][io]") {
    GeneratorConfig cfg;
    cfg.n_patients = 30;
    const auto cohort = generate_cohort(cfg);
    const auto rows = label_cohort(cohort, static_cast<double>(cfg.horizon_days));
    REQUIRE_FALSE(rows.empty());
    const auto dir = temp_dir("io");
    write_labels(dir / "labels.tsv", rows);
    write_latents(dir / "latents.tsv", rows);
    auto back = read_labels(dir / "labels.tsv");
    REQUIRE(back.size() == rows.size());
    attach_latents(dir / "latents.tsv", back);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(back[i].patient_id == rows[i].patient_id);
        CHECK(back[i].t0 == rows[i].t0);
        CHECK(back[i].trigger == rows[i].trigger);
        CHECK(back[i].labels.progression_180d == rows[i].labels.progression_180d);
        CHECK(back[i].labels.mortality_365d == rows[i].labels.mortality_365d);
        CHECK(back[i].labels.event_indicator == rows[i].labels.event_indicator);
        CHECK(back[i].labels.survival_time == Catch::Approx(rows[i].labels.survival_time).margin(1e-9));
        REQUIRE(back[i].latent.has_value());
        CHECK(back[i].latent->severity == Catch::Approx(rows[i].latent->severity).margin(1e-6));
    }

    std::ofstream(dir / "bad.tsv") << "C000001\t3\tTX_START\tprogression_180d\n";
    CHECK_THROWS_AS(read_labels(dir / "bad.tsv"), DataError);
    CHECK_THROWS_AS(read_labels(dir / "missing.tsv"), DataError);
    CHECK_THROWS_AS(parse_regime("subacute"), UsageError);
    std::filesystem::remove_all(dir);
}
