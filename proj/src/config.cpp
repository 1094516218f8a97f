#include "smb/config.hpp"

#include "smb/error.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace smb::config {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

} // namespace

const std::vector<KeyInfo>& known_keys() {
    static const std::vector<KeyInfo> keys = {
        {"data.dir", "data", "primary cohort directory (events.tsv, labels.tsv, vocab.txt, buckets.tsv)"},
        {"data.datasets", "primary", "primary or primary+secondary"},
        {"data.secondary_dir", "data_acute", "secondary cohort directory, used with primary+secondary"},
        {"data.numeric_bins", "8", "quantile buckets per measurement code"},

        {"sim.regime", "chronic", "chronic or acute"},
        {"sim.patients", "2000", "number of patients"},
        {"sim.horizon_days", "720", "follow-up length in days"},
        {"sim.seed", "1", "generator seed"},
        {"sim.event_rate", "0.03", "visits per day at the chronic time scale"},
        {"sim.noise_sd", "0.4", "severity readout noise"},
        {"sim.velocity_mean", "0.002", "mean latent velocity per day"},
        {"sim.velocity_sd", "0.012", "stationary sd of latent velocity"},
        {"sim.velocity_relax", "0.0001", "per-day mean reversion of velocity"},
        {"sim.severity_diffusion", "0.008", "per-day severity diffusion sd"},
        {"sim.velocity_readout_sd", "0.012", "velocity readout noise"},
        {"sim.treatment_effect", "0.015", "velocity reduction at therapy start"},
        {"sim.treatment_threshold", "4.5", "severity that triggers therapy"},
        {"sim.progression_delta", "1.0", "90-day severity rise that counts as progression"},
        {"sim.death_base", "2e-05", "per-day death hazard at severity 0"},
        {"sim.death_slope", "0.5", "log death hazard per severity unit"},
        {"sim.toxicity_base", "0.002", "per-day toxicity hazard on therapy at reserve 0"},
        {"sim.surgery_rate", "0.05", "per-visit curative surgery chance while severity < 3"},

        {"model.hidden", "64", "encoder width d"},
        {"model.layers", "2", "encoder blocks"},
        {"model.heads", "4", "encoder attention heads"},
        {"model.max_len", "128", "maximum sequence length"},
        {"model.ff_mult", "4", "MLP expansion factor"},

        {"predictor.depth", "2", "predictor blocks"},
        {"predictor.width", "1.0", "predictor bottleneck as a fraction of model.hidden"},
        {"predictor.heads", "8", "predictor attention heads"},
        {"predictor.ff_mult", "4", "predictor MLP expansion factor"},

        {"train.mode", "hybrid", "sft_only, hybrid or curriculum"},
        {"train.switch", "0.5", "curriculum: fraction of steps before JEPA starts"},
        {"train.lambda_sft", "1.0", "SFT loss weight"},
        {"train.lambda_jepa", "1.0", "JEPA loss weight"},
        {"train.mask_ratio", "0.5", "fraction of continuation tokens masked"},
        {"train.tau", "0.996", "EMA decay of the momentum encoder"},
        {"train.steps", "400", "optimizer steps"},
        {"train.batch_size", "8", "sequences per step"},
        {"train.peak_lr", "0.001", "peak learning rate"},
        {"train.warmup", "0.03", "warmup fraction of steps"},
        {"train.weight_decay", "0.1", "decoupled weight decay on matrices"},
        {"train.max_grad_norm", "1.0", "gradient clipping norm, 0 disables"},
        {"train.seed", "1", "initialisation, batching and masking seed"},
        {"train.continuation_days", "90", "continuation window after each decision node"},
        {"train.checkpoint_every", "0", "periodic checkpoint interval, 0 for final only"},

        {"eval.pooling", "last", "last or mean"},
        {"eval.split_seed", "17", "patient split seed, shared by training and evaluation"},
        {"eval.l2", "0.001", "probe L2 strength"},
        {"eval.max_iters", "500", "probe gradient-ascent iterations"},
    };
    return keys;
}

Config::Config() {
    for (const auto& k : known_keys()) {
        values_[k.name] = k.default_value;
    }
}

Config Config::parse(std::string_view text, std::string_view source) {
    Config c;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        const std::string t = trim(line);
        if (t.empty()) {
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw UsageError(std::string(source) + ":" + std::to_string(line_no) + ": expected 'key = value'");
        }
        const std::string key = trim(std::string_view(t).substr(0, eq));
        const std::string value = trim(std::string_view(t).substr(eq + 1));
        try {
            c.set(key, value);
        } catch (const UsageError& e) {
            throw UsageError(std::string(source) + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return c;
}

Config Config::load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw DataError("cannot read config " + path.string());
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path.string());
}

void Config::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) {
        throw UsageError("unknown config key '" + key + "'");
    }
    if (value.empty()) {
        throw UsageError("empty value for '" + key + "'");
    }
    it->second = value;
}

const std::string& Config::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) {
        throw UsageError("unknown config key '" + key + "'");
    }
    return it->second;
}

bool Config::contains(const std::string& key) const { return values_.count(key) > 0; }

double Config::get_double(const std::string& key) const {
    const auto& s = get(key);
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size() && std::isfinite(v)) {
            return v;
        }
    } catch (const std::exception&) {
    }
    throw UsageError("'" + key + "' expects a number, got '" + s + "'");
}

std::uint64_t Config::get_u64(const std::string& key) const {
    const auto& s = get(key);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw UsageError("'" + key + "' expects a non-negative integer, got '" + s + "'");
    }
    return v;
}

std::size_t Config::get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

std::string Config::to_text() const {
    std::ostringstream os;
    for (const auto& k : known_keys()) {
        os << k.name << " = " << values_.at(k.name) << '\n';
    }
    return os.str();
}

sim::GeneratorConfig Config::generator() const {
    sim::GeneratorConfig g;
    g.regime = sim::parse_regime(get("sim.regime"));
    g.n_patients = get_size("sim.patients");
    g.horizon_days = get_size("sim.horizon_days");
    g.seed = get_u64("sim.seed");
    g.event_rate = get_double("sim.event_rate");
    g.noise_sd = get_double("sim.noise_sd");
    g.velocity_mean = get_double("sim.velocity_mean");
    g.velocity_sd = get_double("sim.velocity_sd");
    g.velocity_relax = get_double("sim.velocity_relax");
    g.severity_diffusion = get_double("sim.severity_diffusion");
    g.velocity_readout_sd = get_double("sim.velocity_readout_sd");
    g.treatment_effect = get_double("sim.treatment_effect");
    g.treatment_threshold = get_double("sim.treatment_threshold");
    g.progression_delta = get_double("sim.progression_delta");
    g.death_base = get_double("sim.death_base");
    g.death_slope = get_double("sim.death_slope");
    g.toxicity_base = get_double("sim.toxicity_base");
    g.surgery_rate = get_double("sim.surgery_rate");
    g.validate();
    return g;
}

model::EncoderConfig Config::encoder(std::size_t vocab_size) const {
    model::EncoderConfig e;
    e.vocab_size = vocab_size;
    e.hidden = get_size("model.hidden");
    e.layers = get_size("model.layers");
    e.heads = get_size("model.heads");
    e.max_len = get_size("model.max_len");
    e.ff_mult = get_size("model.ff_mult");
    e.validate();
    return e;
}

model::PredictorConfig Config::predictor() const {
    const double width = get_double("predictor.width");
    if (!(width > 0.0)) {
        throw UsageError("predictor.width must be positive");
    }
    model::PredictorConfig p;
    p.depth = get_size("predictor.depth");
    p.bottleneck = static_cast<std::size_t>(std::llround(width * static_cast<double>(get_size("model.hidden"))));
    p.heads = get_size("predictor.heads");
    p.ff_mult = get_size("predictor.ff_mult");
    p.validate();
    return p;
}

train::TrainConfig Config::training() const {
    train::TrainConfig t;
    t.mode = train::parse_schedule(get("train.mode"));
    t.switch_fraction = get_double("train.switch");
    t.lambda_sft = get_double("train.lambda_sft");
    t.lambda_jepa = get_double("train.lambda_jepa");
    t.mask_ratio = get_double("train.mask_ratio");
    t.tau = get_double("train.tau");
    t.total_steps = get_size("train.steps");
    t.batch_size = get_size("train.batch_size");
    t.peak_lr = get_double("train.peak_lr");
    t.warmup_frac = get_double("train.warmup");
    t.weight_decay = get_double("train.weight_decay");
    t.max_grad_norm = get_double("train.max_grad_norm");
    t.seed = get_u64("train.seed");
    t.validate();
    return t;
}

eval::EvalOptions Config::evaluation() const {
    eval::EvalOptions o;
    o.pooling = eval::parse_pooling(get("eval.pooling"));
    o.split_seed = get_u64("eval.split_seed");
    o.probe.l2 = get_double("eval.l2");
    o.probe.max_iters = get_size("eval.max_iters");
    return o;
}

bool Config::uses_secondary() const {
    const auto& d = get("data.datasets");
    if (d == "primary") {
        return false;
    }
    if (d == "primary+secondary") {
        return true;
    }
    throw UsageError("data.datasets must be primary or primary+secondary, got '" + d + "'");
}

} // namespace smb::config
