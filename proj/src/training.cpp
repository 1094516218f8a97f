#include "smb/training.hpp"

#include "smb/checkpoint.hpp"
#include "smb/error.hpp"
#include "smb/seed.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

namespace smb::inline SMB_PRECISION::train {

namespace {

constexpr std::uint64_t kMaskStream = 0x6d61736b;  // "mask"
constexpr std::uint64_t kEpochStream = 0x65706f63; // "epoc"
constexpr std::uint64_t kNodeStream = 0x6e6f6465;  // "node"

const std::string kOptPrefix = "opt.";

Tensor batch_mean(std::vector<Tensor> losses) {
    const real w = real(1.0) / static_cast<real>(losses.size());
    Tensor total = nn::scale(losses[0], w);
    for (std::size_t i = 1; i < losses.size(); ++i) {
        total = nn::add(total, nn::scale(losses[i], w));
    }
    return total;
}

void check_batch(std::span<const ehr::TokenSequence> batch) {
    if (batch.empty()) {
        throw std::invalid_argument("empty batch");
    }
    for (const auto& s : batch) {
        if (s.continuation_length() == 0) {
            throw std::invalid_argument("sequence without continuation in batch");
        }
        if (s.split == 0) {
            throw std::invalid_argument("sequence without context in batch");
        }
    }
}

nn::ParamList all_trainable(const ModelBundle& b) {
    nn::ParamList out = b.online_params();
    for (auto& p : b.jepa_params()) {
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<nn::TensorRecord> to_records(const nn::ParamList& params) {
    std::vector<nn::TensorRecord> out;
    for (const auto& p : params) {
        auto d = p.tensor.data();
        out.push_back({p.name, p.tensor.shape(), std::vector<float>(d.begin(), d.end())});
    }
    return out;
}

nn::TensorRecord vector_record(std::string name, const std::vector<real>& v) {
    return {std::move(name), {v.size()}, std::vector<float>(v.begin(), v.end())};
}

} // namespace

std::string_view schedule_name(Schedule s) {
    switch (s) {
    case Schedule::sft_only: return "sft_only";
    case Schedule::hybrid: return "hybrid";
    default: return "curriculum";
    }
}

Schedule parse_schedule(std::string_view name) {
    if (name == "sft_only") {
        return Schedule::sft_only;
    }
    if (name == "hybrid") {
        return Schedule::hybrid;
    }
    if (name == "curriculum") {
        return Schedule::curriculum;
    }
    throw UsageError("unknown mode '" + std::string(name) + "' (expected sft_only, hybrid or curriculum)");
}

void TrainConfig::validate() const {
    if (!(lambda_sft >= 0.0) || !(lambda_jepa >= 0.0)) {
        throw UsageError("train: loss weights must be >= 0");
    }
    if (!(mask_ratio > 0.0 && mask_ratio <= 1.0)) {
        throw UsageError("train: mask_ratio must be in (0, 1]");
    }
    if (!(tau >= 0.0 && tau <= 1.0)) {
        throw UsageError("train: tau must be in [0, 1]");
    }
    if (mode == Schedule::curriculum && !(switch_fraction > 0.0 && switch_fraction < 1.0)) {
        throw UsageError("train: switch fraction must be in (0, 1) for curriculum");
    }
    if (batch_size == 0 || total_steps == 0) {
        throw UsageError("train: batch_size and total_steps must be positive");
    }
    if (!(peak_lr > 0.0) || !(warmup_frac >= 0.0 && warmup_frac < 1.0) || !(weight_decay >= 0.0)) {
        throw UsageError("train: invalid optimizer settings");
    }
}

std::size_t TrainConfig::jepa_start() const {
    switch (mode) {
    case Schedule::sft_only: return total_steps;
    case Schedule::hybrid: return 0;
    default: return static_cast<std::size_t>(std::floor(switch_fraction * static_cast<double>(total_steps)));
    }
}

double TrainConfig::lambda_jepa_at(std::size_t step) const { return step >= jepa_start() ? lambda_jepa : 0.0; }

nn::AdamWOptions TrainConfig::adamw() const {
    nn::AdamWOptions o;
    o.peak_lr = peak_lr;
    o.weight_decay = weight_decay;
    o.warmup_frac = warmup_frac;
    o.total_steps = total_steps;
    return o;
}

Tensor sft_loss(const ModelBundle& bundle, std::span<const ehr::TokenSequence> batch) {
    check_batch(batch);
    std::vector<Tensor> per_seq;
    for (const auto& s : batch) {
        const std::size_t len = s.size();
        std::vector<std::int32_t> targets(len, 0);
        std::vector<std::uint8_t> supervised(len, 0);
        for (std::size_t p = s.split - 1; p + 1 < len; ++p) {
            targets[p] = s.ids[p + 1];
            supervised[p] = 1;
        }
        auto out = model::encoder_forward(bundle.encoder_cfg, bundle.online, s.ids);
        per_seq.push_back(nn::softmax_cross_entropy(out.logits, targets, supervised));
    }
    return batch_mean(std::move(per_seq));
}

JepaLoss jepa_loss(const ModelBundle& bundle, std::span<const ehr::TokenSequence> batch, double mask_ratio,
                   std::mt19937_64& rng) {
    check_batch(batch);
    JepaLoss out;
    std::vector<Tensor> per_seq;
    for (const auto& s : batch) {
        auto masked = model::apply_mask(s, mask_ratio, bundle.mask_id, rng);
        auto h = model::encoder_forward(bundle.encoder_cfg, bundle.online, masked.ids, bundle.mask_substitute(),
                                        false);
        Tensor target = model::momentum_forward(bundle, s.ids);
        Tensor pred = model::predictor_forward(bundle.predictor_cfg, bundle.predictor, h.hidden);
        per_seq.push_back(nn::masked_mse(pred, target, masked.positions));
        out.masked.push_back(std::move(masked.positions));
    }
    out.loss = batch_mean(std::move(per_seq));
    return out;
}

std::mt19937_64 mask_rng(std::uint64_t seed, std::size_t step) {
    return std::mt19937_64(derive_seed(seed, {kMaskStream, step}));
}

PassLosses accumulate_gradients(const ModelBundle& bundle, std::span<const ehr::TokenSequence> batch,
                                double lambda_sft, double lambda_jepa, double mask_ratio, std::mt19937_64& rng) {
    PassLosses out;
    {
        nn::Tape tape;
        nn::TapeScope scope(tape);
        Tensor l = sft_loss(bundle, batch);
        out.l_sft = l.item();
        tape.backward(nn::scale(l, static_cast<real>(lambda_sft)));
    }
    if (lambda_jepa > 0.0) {
        nn::Tape tape;
        nn::TapeScope scope(tape);
        Tensor l = jepa_loss(bundle, batch, mask_ratio, rng).loss;
        out.l_jepa = l.item();
        tape.backward(nn::scale(l, static_cast<real>(lambda_jepa)));
    }
    return out;
}

TrainState TrainState::create(ModelBundle bundle, const TrainConfig& cfg) {
    TrainState s{std::move(bundle), {}, 0, 0, 0};
    s.optimizer.options = cfg.adamw();
    return s;
}

StepMetrics train_step(TrainState& state, std::span<const ehr::TokenSequence> batch, const TrainConfig& cfg,
                       std::size_t step) {
    auto& b = state.bundle;
    for (const auto& p : all_trainable(b)) {
        if (p.tensor.has_grad()) {
            throw std::logic_error("train_step: gradient of '" + p.name + "' not zeroed at entry");
        }
    }
    const double lambda_jepa = cfg.lambda_jepa_at(step);
    auto rng = mask_rng(cfg.seed, step);
    PassLosses losses;
    try {
        losses = accumulate_gradients(b, batch, cfg.lambda_sft, lambda_jepa, cfg.mask_ratio, rng);
    } catch (const NumericalError& err) {
        throw NumericalError("step " + std::to_string(step + 1) + ": " + err.what());
    }
    StepMetrics m;
    m.step = step + 1;
    m.l_sft = losses.l_sft;
    m.l_jepa = losses.l_jepa;
    m.total = cfg.lambda_sft * losses.l_sft + (losses.l_jepa ? lambda_jepa * *losses.l_jepa : 0.0);
    if (!std::isfinite(m.total)) {
        throw NumericalError("step " + std::to_string(m.step) + ": non-finite loss");
    }

    nn::ParamList active = b.online_params();
    if (losses.l_jepa) {
        for (auto& p : b.jepa_params()) {
            active.push_back(std::move(p));
        }
    }
    m.grad_norm = nn::clip_grad_norm(active, cfg.max_grad_norm);
    if (!std::isfinite(m.grad_norm)) {
        throw NumericalError("step " + std::to_string(m.step) + ": non-finite gradient norm");
    }
    m.lr = nn::cosine_lr(step + 1, cfg.total_steps, cfg.peak_lr, cfg.warmup_frac);
    nn::adamw_step(active, state.optimizer, m.lr);
    ++state.optimizer_steps;
    model::ema_update(b.momentum_params(), b.online_params(), static_cast<real>(cfg.tau));
    ++state.ema_updates;
    state.next_step = step + 1;
    return m;
}

std::vector<ehr::TokenSequence> make_batch(const TrainingSet& data, std::size_t batch_size, std::uint64_t seed,
                                           std::size_t step) {
    const std::size_t n = data.patients();
    if (n == 0) {
        throw DataError("training set is empty");
    }
    std::vector<ehr::TokenSequence> batch;
    std::size_t cached_epoch = static_cast<std::size_t>(-1);
    std::vector<std::size_t> order(n);
    for (std::size_t q = step * batch_size; q < (step + 1) * batch_size; ++q) {
        const std::size_t epoch = q / n;
        if (epoch != cached_epoch) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::mt19937_64 rng(derive_seed(seed, {kEpochStream, epoch}));
            std::shuffle(order.begin(), order.end(), rng);
            cached_epoch = epoch;
        }
        const std::size_t patient = order[q % n];
        const auto& nodes = data.sequences[patient];
        std::mt19937_64 pick_rng(derive_seed(seed, {kNodeStream, epoch, patient}));
        std::uniform_int_distribution<std::size_t> pick(0, nodes.size() - 1);
        batch.push_back(nodes[pick(pick_rng)]);
    }
    return batch;
}

std::string format_metrics(const StepMetrics& m) {
    return std::to_string(m.step) + '\t' + ehr::format_number(m.l_sft) + '\t' +
           (m.l_jepa ? ehr::format_number(*m.l_jepa) : std::string()) + '\t' + ehr::format_number(m.total) + '\t' +
           ehr::format_number(m.lr);
}

std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, std::size_t step) {
    return run_dir / ("step_" + std::to_string(step) + ".ckpt");
}

void run_training(TrainState& state, const TrainConfig& cfg, const TrainingSet& data, const RunOptions& options) {
    cfg.validate();
    std::filesystem::create_directories(options.run_dir);
    const auto log_path = options.run_dir / "metrics.tsv";
    std::ofstream log(log_path, state.next_step == 0 ? std::ios::trunc : std::ios::app);
    if (!log) {
        throw DataError("cannot write " + log_path.string());
    }
    for (std::size_t step = state.next_step; step < cfg.total_steps; ++step) {
        const auto batch = make_batch(data, cfg.batch_size, cfg.seed, step);
        const StepMetrics m = train_step(state, batch, cfg, step);
        log << format_metrics(m) << '\n';
        log.flush();
        if (options.on_step) {
            options.on_step(m);
        }
        const bool periodic = options.checkpoint_every > 0 && m.step % options.checkpoint_every == 0;
        if (periodic || m.step == cfg.total_steps) {
            save_checkpoint(checkpoint_path(options.run_dir, m.step), state);
        }
    }
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
    const auto& b = state.bundle;
    std::vector<nn::TensorRecord> records = to_records(all_trainable(b));
    for (auto& r : to_records(b.momentum_params())) {
        records.push_back(std::move(r));
    }
    records.push_back({kOptPrefix + "counters",
                       {4},
                       {static_cast<float>(state.next_step), static_cast<float>(state.optimizer_steps),
                        static_cast<float>(state.ema_updates), static_cast<float>(state.optimizer.step)}});
    for (const auto& [name, mom] : state.optimizer.moments) {
        records.push_back(vector_record(kOptPrefix + "m." + name, mom.m));
        records.push_back(vector_record(kOptPrefix + "v." + name, mom.v));
        records.push_back({kOptPrefix + "count." + name, {1}, {static_cast<float>(mom.count)}});
    }
    nn::write_container(path, records);
}

void load_checkpoint(const std::filesystem::path& path, TrainState& state) {
    const auto records = nn::read_container(path);
    auto& b = state.bundle;
    nn::ParamList params = all_trainable(b);
    for (auto& p : b.momentum_params()) {
        params.push_back(std::move(p));
    }
    std::map<std::string, const nn::TensorRecord*> by_name;
    for (const auto& r : records) {
        by_name[r.name] = &r;
    }

    std::vector<std::string> problems;
    std::set<std::string> param_names;
    for (const auto& p : params) {
        param_names.insert(p.name);
        auto it = by_name.find(p.name);
        if (it == by_name.end()) {
            problems.push_back(p.name + " (missing)");
        } else if (it->second->shape != p.tensor.shape()) {
            problems.push_back(p.name + " (shape " + nn::shape_str(it->second->shape) + ", expected " +
                               nn::shape_str(p.tensor.shape()) + ")");
        }
    }
    std::map<std::string, nn::Moments> moments;
    const nn::TensorRecord* counters = nullptr;
    for (const auto& r : records) {
        if (param_names.count(r.name)) {
            continue;
        }
        if (r.name == kOptPrefix + "counters" && r.values.size() == 4) {
            counters = &r;
            continue;
        }
        bool known = false;
        for (const std::string kind : {"m.", "v.", "count."}) {
            const std::string prefix = kOptPrefix + kind;
            if (r.name.rfind(prefix, 0) != 0) {
                continue;
            }
            const std::string target = r.name.substr(prefix.size());
            auto p = std::find_if(params.begin(), params.end(), [&](const auto& x) { return x.name == target; });
            if (p == params.end()) {
                break;
            }
            auto& mom = moments[target];
            if (kind == "count.") {
                known = r.values.size() == 1;
                mom.count = known ? static_cast<std::uint64_t>(r.values[0]) : 0;
            } else {
                known = r.values.size() == p->tensor.numel();
                (kind == "m." ? mom.m : mom.v).assign(r.values.begin(), r.values.end());
            }
            break;
        }
        if (!known) {
            problems.push_back(r.name + " (unexpected)");
        }
    }
    for (const auto& [name, mom] : moments) {
        if (mom.m.size() != mom.v.size()) {
            problems.push_back(kOptPrefix + "m/v." + name + " (incomplete optimizer moments)");
        }
    }
    if (!counters) {
        problems.push_back(kOptPrefix + "counters (missing)");
    }
    if (!problems.empty()) {
        std::string msg = "checkpoint " + path.string() + " does not match the model:";
        for (const auto& p : problems) {
            msg += "\n  " + p;
        }
        throw DataError(msg);
    }

    for (const auto& p : params) {
        Tensor t = p.tensor;
        const auto& values = by_name.at(p.name)->values;
        std::copy(values.begin(), values.end(), t.data().begin());
        t.zero_grad();
    }
    state.optimizer.moments = std::move(moments);
    state.next_step = static_cast<std::size_t>(counters->values[0]);
    state.optimizer_steps = static_cast<std::uint64_t>(counters->values[1]);
    state.ema_updates = static_cast<std::uint64_t>(counters->values[2]);
    state.optimizer.step = static_cast<std::uint64_t>(counters->values[3]);
}

} // namespace smb::inline SMB_PRECISION::train
