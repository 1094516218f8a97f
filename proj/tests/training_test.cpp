#include "catch_amalgamated.hpp"

#include "smb/error.hpp"
#include "smb/training.hpp"
#include "two_pass.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

using namespace smb;
using namespace smb::train;
using model::EncoderConfig;
using model::PredictorConfig;
using Catch::Approx;

namespace {

constexpr std::int32_t kMask = 2;

EncoderConfig tiny_encoder(std::size_t vocab = 24, std::size_t hidden = 16) {
    EncoderConfig c;
    c.vocab_size = vocab;
    c.hidden = hidden;
    c.layers = 2;
    c.heads = 2;
    c.max_len = 24;
    return c;
}

PredictorConfig tiny_predictor() {
    PredictorConfig p;
    p.depth = 1;
    p.bottleneck = 16;
    p.heads = 4;
    return p;
}

ModelBundle tiny_bundle(std::uint64_t seed = 3, std::size_t hidden = 16) {
    return ModelBundle::create(tiny_encoder(24, hidden), tiny_predictor(), kMask, seed);
}

ehr::TokenSequence random_sequence(std::mt19937_64& rng, std::size_t vocab, std::size_t max_len) {
    std::uniform_int_distribution<std::size_t> len_dist(4, max_len);
    const std::size_t len = len_dist(rng);
    std::uniform_int_distribution<std::size_t> split_dist(1, len - 1);
    std::uniform_int_distribution<std::int32_t> tok(3, static_cast<std::int32_t>(vocab) - 1);
    ehr::TokenSequence s;
    s.ids.push_back(1);
    for (std::size_t i = 1; i < len; ++i) {
        s.ids.push_back(tok(rng));
    }
    s.split = split_dist(rng);
    return s;
}

std::vector<ehr::TokenSequence> random_batch(std::uint64_t seed, std::size_t n, std::size_t vocab = 24) {
    std::mt19937_64 rng(seed);
    std::vector<ehr::TokenSequence> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(random_sequence(rng, vocab, 20));
    }
    return out;
}

TrainingSet random_training_set(std::size_t patients) {
    TrainingSet data;
    std::mt19937_64 rng(11);
    for (std::size_t p = 0; p < patients; ++p) {
        data.patient_ids.push_back("P" + std::to_string(p));
        std::vector<ehr::TokenSequence> nodes;
        for (std::size_t k = 0; k < 1 + p % 3; ++k) {
            nodes.push_back(random_sequence(rng, 24, 20));
        }
        data.sequences.push_back(std::move(nodes));
    }
    return data;
}

TrainConfig tiny_config(Schedule mode, std::size_t steps) {
    TrainConfig c;
    c.mode = mode;
    c.total_steps = steps;
    c.batch_size = 3;
    c.seed = 5;
    return c;
}

std::vector<float> flat(const nn::Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::vector<float> flat_grad(const nn::Tensor& t) {
    if (!t.has_grad()) {
        return std::vector<float>(t.numel(), 0.0f);
    }
    return {t.grad().begin(), t.grad().end()};
}

nn::ParamList trainable(const ModelBundle& b) {
    auto out = b.online_params();
    for (auto& p : b.jepa_params()) {
        out.push_back(std::move(p));
    }
    return out;
}

void zero_grads(const ModelBundle& b) {
    for (auto& p : trainable(b)) {
        nn::Tensor t = p.tensor;
        t.zero_grad();
    }
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("smb_train_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
        out.push_back(line);
    }
    return out;
}

std::vector<std::string> tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto t = line.find('\t', start);
        out.push_back(line.substr(start, t == std::string::npos ? std::string::npos : t - start));
        if (t == std::string::npos) {
            return out;
        }
        start = t + 1;
    }
}

} // namespace

TEST_CASE("sft_loss at init with a zeroed output head is ln|V|", "[training][sft]") {
    EncoderConfig enc = tiny_encoder(500, 16);
    enc.max_len = 24;
    auto bundle = ModelBundle::create(enc, tiny_predictor(), kMask, 1);
    const auto batch = random_batch(2, 4, 500);
    const double untouched = sft_loss(bundle, batch).item();
    CHECK(untouched == Approx(std::log(500.0)).margin(0.1));

    nn::Tensor emb = bundle.online.tok_emb;
    std::fill(emb.data().begin(), emb.data().end(), 0.0f);
    CHECK(sft_loss(bundle, batch).item() == Approx(std::log(500.0)).margin(1e-4));
}

TEST_CASE("sft_loss supervises continuation targets only", "[training][sft]") {
    const auto bundle = tiny_bundle();
    ehr::TokenSequence s{{1, 5, 6, 7, 8, 9, 10, 11}, 5};
    const auto logits = model::encoder_forward(bundle.encoder_cfg, bundle.online, s.ids).logits;
    const std::size_t v = bundle.encoder_cfg.vocab_size;

    auto oracle = [&](std::size_t first) {
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t p = first; p + 1 < s.size(); ++p) {
            double z = 0.0;
            for (std::size_t j = 0; j < v; ++j) {
                z += std::exp(static_cast<double>(logits.data()[p * v + j]));
            }
            sum -= static_cast<double>(logits.data()[p * v + static_cast<std::size_t>(s.ids[p + 1])]) - std::log(z);
            ++count;
        }
        return sum / static_cast<double>(count);
    };
    const std::vector<ehr::TokenSequence> one{s};
    const double got = sft_loss(bundle, one).item();
    CHECK(got == Approx(oracle(s.split - 1)).margin(1e-5));
    CHECK(std::abs(got - oracle(0)) > 1e-3);

    std::vector<std::int32_t> targets(s.size(), 0);
    std::vector<std::uint8_t> mask(s.size(), 0);
    for (std::size_t p = s.split - 1; p + 1 < s.size(); ++p) {
        targets[p] = s.ids[p + 1];
        mask[p] = 1;
    }
    CHECK(got == nn::softmax_cross_entropy(logits, targets, mask).item());

    const std::vector<ehr::TokenSequence> none{{{1, 5, 6}, 3}};
    CHECK_THROWS(sft_loss(bundle, none));
}

TEST_CASE("sft_loss averages per sequence, then over the batch", "[training][sft]") {
    const auto bundle = tiny_bundle();
    const auto batch = random_batch(4, 3);
    double sum = 0.0;
    for (const auto& s : batch) {
        const std::vector<ehr::TokenSequence> one{s};
        sum += sft_loss(bundle, one).item();
    }
    CHECK(sft_loss(bundle, batch).item() == Approx(sum / 3.0).margin(1e-5));
}

TEST_CASE("jepa_loss properties", "[training][jepa]") {
    const auto bundle = tiny_bundle();
    const auto batch = random_batch(6, 4);
    std::mt19937_64 rng(1);
    const auto l = jepa_loss(bundle, batch, 0.5, rng);
    CHECK(l.loss.item() >= 0.0f);
    REQUIRE(l.masked.size() == batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        CHECK(l.masked[i].size() == model::mask_count(batch[i].continuation_length(), 0.5));
        CHECK(l.masked[i].front() >= batch[i].split);
    }

    const auto zero = nn::Tensor::from({3, 2}, {0, 0, 0, 0, 0, 0});
    const auto t = nn::Tensor::from({3, 2}, {0.5f, -1.0f, 2.0f, 0.25f, -3.0f, 1.0f});
    const auto t2 = nn::scale(t, 2.0f);
    const std::vector<std::size_t> rows{0, 2};
    CHECK(nn::masked_mse(zero, t2, rows).item() == Approx(4.0 * nn::masked_mse(zero, t, rows).item()));
}

TEST_CASE("two-pass gradients are the sum of each loss in isolation", "[training][step]") {
    const auto batch = random_batch(8, 4);
    const auto both = tiny_bundle(9);
    const auto split = tiny_bundle(9);

    auto rng_a = mask_rng(5, 0);
    const auto losses = accumulate_gradients(both, batch, 1.0, 1.0, 0.5, rng_a);
    REQUIRE(losses.l_jepa.has_value());

    auto rng_b = mask_rng(5, 0);
    accumulate_gradients(split, batch, 1.0, 0.0, 0.5, rng_b);
    std::vector<std::vector<float>> g_sft;
    for (const auto& p : trainable(split)) {
        g_sft.push_back(flat_grad(p.tensor));
    }
    zero_grads(split);
    auto rng_c = mask_rng(5, 0);
    const auto jl = accumulate_gradients(split, batch, 0.0, 1.0, 0.5, rng_c);
    CHECK(*jl.l_jepa == *losses.l_jepa);

    const auto pa = trainable(both);
    const auto pb = trainable(split);
    REQUIRE(pa.size() == pb.size());
    double worst = 0.0;
    double largest = 0.0;
    bool predictor_grad = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const auto ga = flat_grad(pa[i].tensor);
        const auto gj = flat_grad(pb[i].tensor);
        for (std::size_t k = 0; k < ga.size(); ++k) {
            const double want = static_cast<double>(g_sft[i][k]) + gj[k];
            worst = std::max(worst, std::abs(ga[k] - want));
            largest = std::max(largest, std::abs(want));
            predictor_grad = predictor_grad || (pa[i].name.rfind("predictor", 0) == 0 && ga[k] != 0.0f);
        }
    }
    // In f32 the two buffers differ only by accumulation-order rounding.
    INFO("worst " << worst << " largest " << largest);
    CHECK(worst <= 8.0 * std::numeric_limits<float>::epsilon() * std::max(1.0, largest));
    CHECK(predictor_grad);
    for (const auto& p : both.momentum_params()) {
        CHECK_FALSE(p.tensor.has_grad());
    }
}

TEST_CASE("two-pass gradients on the f64 build", "[training][step]") {
    for (auto [ls, lj] : {std::pair{1.0, 1.0}, std::pair{0.7, 1.3}}) {
        const auto r = testing::two_pass_f64(21, ls, lj);
        INFO("max diff " << r.max_abs_diff << " max grad " << r.max_abs_grad);
        CHECK(r.max_abs_diff <= 1e-6);
        CHECK(r.max_abs_grad > 1e-3);
        CHECK(r.predictor_touched);
        CHECK(r.momentum_grad_free);
    }
}

TEST_CASE("lambda_jepa = 0 matches a pure SFT step bit for bit", "[training][step]") {
    const auto batch = random_batch(12, 3);
    auto hybrid = tiny_config(Schedule::hybrid, 10);
    hybrid.lambda_jepa = 0.0;
    const auto sft = tiny_config(Schedule::sft_only, 10);
    auto a = TrainState::create(tiny_bundle(4), hybrid);
    auto b = TrainState::create(tiny_bundle(4), sft);
    const auto ma = train_step(a, batch, hybrid, 0);
    const auto mb = train_step(b, batch, sft, 0);
    CHECK_FALSE(ma.l_jepa.has_value());
    CHECK(ma.l_sft == mb.l_sft);
    const auto pa = a.bundle.online_params();
    const auto pb = b.bundle.online_params();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(flat(pa[i].tensor) == flat(pb[i].tensor));
    }
    const auto qa = a.bundle.momentum_params();
    const auto qb = b.bundle.momentum_params();
    for (std::size_t i = 0; i < qa.size(); ++i) {
        CHECK(flat(qa[i].tensor) == flat(qb[i].tensor));
    }
}

TEST_CASE("train_step counters, EMA rule and loss composition", "[training][step]") {
    auto cfg = tiny_config(Schedule::hybrid, 10);
    auto state = TrainState::create(tiny_bundle(6), cfg);
    const auto batch = random_batch(14, 3);
    for (std::size_t step = 0; step < 3; ++step) {
        std::vector<std::vector<float>> before;
        for (const auto& p : state.bundle.momentum_params()) {
            before.push_back(flat(p.tensor));
        }
        const auto m = train_step(state, batch, cfg, step);
        REQUIRE(m.l_jepa.has_value());
        CHECK(m.total == Approx(m.l_sft + *m.l_jepa).margin(1e-6));
        CHECK(state.optimizer_steps == step + 1);
        CHECK(state.ema_updates == step + 1);
        CHECK(state.optimizer.step == step + 1);
        const auto mom = state.bundle.momentum_params();
        const auto on = state.bundle.online_params();
        const float tau = static_cast<float>(cfg.tau);
        for (std::size_t i = 0; i < mom.size(); ++i) {
            const auto got = flat(mom[i].tensor);
            const auto online = flat(on[i].tensor);
            for (std::size_t k = 0; k < got.size(); ++k) {
                REQUIRE(got[k] == tau * before[i][k] + (1.0f - tau) * online[k]);
            }
        }
    }
    for (const auto& p : trainable(state.bundle)) {
        CHECK_FALSE(p.tensor.has_grad());
    }
    nn::Tensor w = state.bundle.online.tok_emb;
    w.mutable_grad();
    CHECK_THROWS_AS(train_step(state, batch, cfg, 3), std::logic_error);
}

TEST_CASE("sft_only leaves the JEPA parameters bit-stable", "[training][schedule]") {
    const auto cfg = tiny_config(Schedule::sft_only, 6);
    auto state = TrainState::create(tiny_bundle(7), cfg);
    std::vector<std::vector<float>> before;
    for (const auto& p : state.bundle.jepa_params()) {
        before.push_back(flat(p.tensor));
    }
    const auto online_before = flat(state.bundle.online.tok_emb);
    const auto data = random_training_set(10);
    for (std::size_t step = 0; step < cfg.total_steps; ++step) {
        const auto m = train_step(state, make_batch(data, cfg.batch_size, cfg.seed, step), cfg, step);
        CHECK_FALSE(m.l_jepa.has_value());
        for (const auto& p : state.bundle.jepa_params()) {
            CHECK_FALSE(p.tensor.has_grad());
        }
    }
    const auto after = state.bundle.jepa_params();
    for (std::size_t i = 0; i < after.size(); ++i) {
        CHECK(flat(after[i].tensor) == before[i]);
    }
    CHECK(flat(state.bundle.online.tok_emb) != online_before);
    CHECK(state.ema_updates == cfg.total_steps);
}

TEST_CASE("schedules and metrics log", "[training][schedule]") {
    auto cur = tiny_config(Schedule::curriculum, 100);
    cur.switch_fraction = 0.5;
    CHECK(cur.jepa_start() == 50);
    CHECK(tiny_config(Schedule::hybrid, 100).jepa_start() == 0);
    CHECK(tiny_config(Schedule::sft_only, 100).jepa_start() == 100);
    CHECK(cur.lambda_jepa_at(49) == 0.0);
    CHECK(cur.lambda_jepa_at(50) == 1.0);
    auto bad = cur;
    bad.switch_fraction = 1.0;
    CHECK_THROWS_AS(bad.validate(), UsageError);
    auto bad_ratio = cur;
    bad_ratio.mask_ratio = 0.0;
    CHECK_THROWS_AS(bad_ratio.validate(), UsageError);
    CHECK_THROWS(parse_schedule("warmup"));

    const auto data = random_training_set(12);
    const auto dir = temp_dir("curriculum");
    auto state = TrainState::create(tiny_bundle(8), cur);
    run_training(state, cur, data, {dir, 0, {}});
    const auto rows = lines(slurp(dir / "metrics.tsv"));
    REQUIRE(rows.size() == 100);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto f = tabs(rows[i]);
        REQUIRE(f.size() == 5);
        CHECK(f[0] == std::to_string(i + 1));
        CHECK(f[2].empty() == (i < 50));
    }
    CHECK(std::filesystem::exists(checkpoint_path(dir, 100)));

    const auto dir2 = temp_dir("curriculum_again");
    auto again = TrainState::create(tiny_bundle(8), cur);
    run_training(again, cur, data, {dir2, 0, {}});
    CHECK(slurp(dir / "metrics.tsv") == slurp(dir2 / "metrics.tsv"));
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
}

TEST_CASE("make_batch is a pure function of seed and step", "[training][batch]") {
    const auto data = random_training_set(7);
    const auto a = make_batch(data, 4, 3, 5);
    const auto b = make_batch(data, 4, 3, 5);
    REQUIRE(a.size() == 4);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].ids == b[i].ids);
        CHECK(a[i].split == b[i].split);
    }
    // Each patient appears exactly once per epoch.
    std::vector<std::size_t> seen(data.patients(), 0);
    const auto epoch = make_batch(data, 7, 3, 0);
    for (const auto& s : epoch) {
        for (std::size_t p = 0; p < data.patients(); ++p) {
            const auto& nodes = data.sequences[p];
            if (std::any_of(nodes.begin(), nodes.end(), [&](const auto& n) { return n.ids == s.ids; })) {
                ++seen[p];
            }
        }
    }
    CHECK(std::all_of(seen.begin(), seen.end(), [](std::size_t c) { return c == 1; }));
    CHECK_THROWS_AS(make_batch(TrainingSet{}, 2, 1, 0), DataError);
}

TEST_CASE("checkpoint round trip, truncation and mismatch", "[training][checkpoint]") {
    const auto cfg = tiny_config(Schedule::hybrid, 10);
    auto state = TrainState::create(tiny_bundle(10), cfg);
    const auto data = random_training_set(6);
    for (std::size_t step = 0; step < 2; ++step) {
        train_step(state, make_batch(data, cfg.batch_size, cfg.seed, step), cfg, step);
    }
    const auto dir = temp_dir("ckpt");
    const auto path = dir / "a.ckpt";
    save_checkpoint(path, state);

    auto fresh = TrainState::create(tiny_bundle(99), cfg);
    load_checkpoint(path, fresh);
    auto all = [](const TrainState& s) {
        auto p = trainable(s.bundle);
        for (auto& q : s.bundle.momentum_params()) {
            p.push_back(std::move(q));
        }
        return p;
    };
    const auto want = all(state);
    const auto got = all(fresh);
    REQUIRE(want.size() == got.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
        CHECK(got[i].name == want[i].name);
        CHECK(flat(got[i].tensor) == flat(want[i].tensor));
    }
    CHECK(fresh.next_step == 2);
    CHECK(fresh.optimizer_steps == 2);
    CHECK(fresh.ema_updates == 2);
    CHECK(fresh.optimizer.step == state.optimizer.step);
    REQUIRE(fresh.optimizer.moments.size() == state.optimizer.moments.size());
    for (const auto& [name, mom] : state.optimizer.moments) {
        CHECK(fresh.optimizer.moments.at(name).m == mom.m);
        CHECK(fresh.optimizer.moments.at(name).v == mom.v);
    }

    const auto cut = dir / "cut.ckpt";
    std::filesystem::copy_file(path, cut);
    std::filesystem::resize_file(cut, std::filesystem::file_size(cut) / 2);
    auto untouched = TrainState::create(tiny_bundle(99), cfg);
    const auto emb_before = flat(untouched.bundle.online.tok_emb);
    CHECK_THROWS_AS(load_checkpoint(cut, untouched), DataError);
    CHECK(flat(untouched.bundle.online.tok_emb) == emb_before);
    CHECK(untouched.next_step == 0);

    auto wider = TrainState::create(tiny_bundle(99, 32), cfg);
    const auto wide_before = flat(wider.bundle.online.tok_emb);
    CHECK_THROWS_WITH(load_checkpoint(path, wider), Catch::Matchers::ContainsSubstring("encoder.tok_emb"));
    CHECK(flat(wider.bundle.online.tok_emb) == wide_before);
    std::filesystem::remove_all(dir);
}

TEST_CASE("resume after a checkpoint matches an uninterrupted run", "[training][checkpoint]") {
    const auto cfg = tiny_config(Schedule::hybrid, 20);
    const auto data = random_training_set(9);

    const auto straight_dir = temp_dir("straight");
    auto straight = TrainState::create(tiny_bundle(12), cfg);
    std::vector<StepMetrics> s_metrics;
    run_training(straight, cfg, data, {straight_dir, 0, [&](const StepMetrics& m) { s_metrics.push_back(m); }});

    const auto resumed_dir = temp_dir("resumed");
    auto first = TrainState::create(tiny_bundle(12), cfg);
    // Stop after 10 steps of the 20-step schedule; the schedule itself stays 20.
    for (std::size_t step = 0; step < 10; ++step) {
        train_step(first, make_batch(data, cfg.batch_size, cfg.seed, step), cfg, step);
    }
    save_checkpoint(resumed_dir / "step_10.ckpt", first);
    auto second = TrainState::create(tiny_bundle(77), cfg);
    load_checkpoint(resumed_dir / "step_10.ckpt", second);
    std::vector<StepMetrics> r_metrics;
    run_training(second, cfg, data, {resumed_dir, 0, [&](const StepMetrics& m) { r_metrics.push_back(m); }});

    REQUIRE(r_metrics.size() == 10);
    CHECK(r_metrics.front().step == 11);
    CHECK(r_metrics.back().total == Approx(s_metrics.back().total).margin(1e-6));
    CHECK(r_metrics.back().l_sft == s_metrics.back().l_sft);
    CHECK(flat(second.bundle.online.tok_emb) == flat(straight.bundle.online.tok_emb));
    std::filesystem::remove_all(straight_dir);
    std::filesystem::remove_all(resumed_dir);
}
