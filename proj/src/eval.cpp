#include "smb/eval.hpp"

#include "smb/error.hpp"
#include "smb/seed.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace smb::eval {

namespace {

using ehr::format_number;

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h = (h ^ c) * 0x100000001b3ull;
    }
    return h;
}

std::string node_key(const std::string& pid, double t0, sim::TriggerKind k) {
    return pid + '\t' + format_number(t0) + '\t' + std::string(sim::trigger_name(k));
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

double max_abs(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) {
        m = std::max(m, std::abs(x));
    }
    return m;
}

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

void check_design(const Matrix& x, std::size_t n) {
    if (x.size() != n || x.empty()) {
        throw std::invalid_argument("probe: design matrix has " + std::to_string(x.size()) + " rows for " +
                                    std::to_string(n) + " labels");
    }
    for (const auto& row : x) {
        if (row.size() != x[0].size()) {
            throw std::invalid_argument("probe: ragged design matrix");
        }
    }
}

// Gradient ascent with step halving shared by both probes. `value` returns the
// objective; `gradient` fills the ascent direction.
template <class Value, class Gradient>
std::vector<double> ascend(std::vector<double> theta, const ProbeOptions& opt, Value value, Gradient gradient,
                           std::vector<double>* trace) {
    double current = value(theta);
    double step = 1.0;
    std::vector<double> g(theta.size()), next(theta.size());
    for (std::size_t it = 0; it < opt.max_iters; ++it) {
        gradient(theta, g);
        if (max_abs(g) < opt.tolerance) {
            break;
        }
        const double gg = dot(g, g);
        bool accepted = false;
        for (int halvings = 0; halvings < 60; ++halvings) {
            for (std::size_t i = 0; i < theta.size(); ++i) {
                next[i] = theta[i] + step * g[i];
            }
            const double candidate = value(next);
            if (candidate >= current + 1e-4 * step * gg) {
                theta.swap(next);
                current = candidate;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            break;
        }
        if (trace) {
            trace->push_back(current);
        }
        step = std::min(step * 2.0, 1e4);
    }
    return theta;
}

struct CoxOrder {
    std::vector<std::size_t> by_time_desc;
};

CoxOrder cox_order(std::span<const double> time) {
    CoxOrder o;
    o.by_time_desc.resize(time.size());
    std::iota(o.by_time_desc.begin(), o.by_time_desc.end(), std::size_t{0});
    std::stable_sort(o.by_time_desc.begin(), o.by_time_desc.end(),
                     [&](std::size_t a, std::size_t b) { return time[a] > time[b]; });
    return o;
}

// Breslow log-likelihood and optional gradient. Risk set of an event at t is
// every subject with time >= t.
double cox_pll(const Matrix& x, std::span<const double> time, std::span<const int> event,
               std::span<const double> beta, const CoxOrder& order, std::vector<double>* grad) {
    const std::size_t n = x.size(), d = beta.size();
    std::vector<double> eta(n);
    for (std::size_t i = 0; i < n; ++i) {
        eta[i] = dot(x[i], beta);
    }
    const double shift = n ? *std::max_element(eta.begin(), eta.end()) : 0.0;
    double s0 = 0.0;
    std::vector<double> s1(d, 0.0);
    if (grad) {
        grad->assign(d, 0.0);
    }
    double pll = 0.0;
    const auto& idx = order.by_time_desc;
    for (std::size_t g = 0; g < n;) {
        std::size_t end = g;
        while (end < n && time[idx[end]] == time[idx[g]]) {
            const std::size_t j = idx[end];
            const double w = std::exp(eta[j] - shift);
            s0 += w;
            for (std::size_t k = 0; k < d; ++k) {
                s1[k] += w * x[j][k];
            }
            ++end;
        }
        for (std::size_t p = g; p < end; ++p) {
            const std::size_t i = idx[p];
            if (!event[i]) {
                continue;
            }
            pll += eta[i] - (std::log(s0) + shift);
            if (grad) {
                for (std::size_t k = 0; k < d; ++k) {
                    (*grad)[k] += x[i][k] - s1[k] / s0;
                }
            }
        }
        g = end;
    }
    return pll;
}

std::vector<double> midranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> rank(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && v[idx[j]] == v[idx[i]]) {
            ++j;
        }
        const double r = 0.5 * static_cast<double>(i + 1 + j); // mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k) {
            rank[idx[k]] = r;
        }
        i = j;
    }
    return rank;
}

class Fenwick {
public:
    explicit Fenwick(std::size_t n) : tree_(n + 1, 0) {}
    void add(std::size_t i) {
        for (++i; i < tree_.size(); i += i & (~i + 1)) {
            ++tree_[i];
        }
    }
    // Count of inserted indices < i.
    std::uint64_t below(std::size_t i) const {
        std::uint64_t s = 0;
        for (; i > 0; i -= i & (~i + 1)) {
            s += tree_[i];
        }
        return s;
    }

private:
    std::vector<std::uint64_t> tree_;
};

double population_std(const std::vector<double>& v, double mean) {
    double s = 0.0;
    for (double x : v) {
        s += (x - mean) * (x - mean);
    }
    return std::sqrt(s / static_cast<double>(v.size()));
}

struct TaskSpec {
    const char* category;
    const char* task;
    bool survival;
    int (*label)(const sim::OutcomeLabels&);
};

const TaskSpec kTasks[] = {
    {"disease_progression", "progression_180d", false,
     [](const sim::OutcomeLabels& l) { return int(l.progression_180d); }},
    {"toxicity", "toxicity_90d", false, [](const sim::OutcomeLabels& l) { return int(l.toxicity_90d); }},
    {"survival", "mortality_365d", false, [](const sim::OutcomeLabels& l) { return int(l.mortality_365d); }},
    {"survival", "overall_survival", true, nullptr},
};

Matrix rows_of(const Matrix& x, const std::vector<std::size_t>& idx) {
    Matrix out;
    out.reserve(idx.size());
    for (std::size_t i : idx) {
        out.push_back(x[i]);
    }
    return out;
}

bool both_classes(const std::vector<int>& y) {
    const auto pos = std::count(y.begin(), y.end(), 1);
    return pos > 0 && pos < static_cast<std::ptrdiff_t>(y.size());
}

bool has_comparable_pair(const std::vector<double>& t, const std::vector<int>& e) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!e[i]) {
            continue;
        }
        for (std::size_t j = 0; j < t.size(); ++j) {
            if (t[i] < t[j]) {
                return true;
            }
        }
    }
    return false;
}

} // namespace

std::vector<Snapshot> make_snapshots(std::span<const ehr::PatientRecord> records,
                                     std::span<const sim::LabelRow> labels, const ehr::Vocabulary& vocab,
                                     std::size_t max_len) {
    std::map<std::string, const sim::LabelRow*> by_key;
    for (const auto& row : labels) {
        by_key[node_key(row.patient_id, row.t0, row.trigger)] = &row;
    }
    std::vector<Snapshot> out;
    for (std::size_t r = 0; r < records.size(); ++r) {
        const auto& rec = records[r];
        const auto death = rec.death_time();
        for (const auto& node : sim::emit_trigger_events(rec)) {
            if (death && node.t0 > *death - kEndOfLifeDays) {
                continue;
            }
            auto it = by_key.find(node_key(rec.id(), node.t0, node.kind));
            if (it == by_key.end()) {
                throw DataError("no label row for patient " + rec.id() + " at t0 " + format_number(node.t0) + " (" +
                                std::string(sim::trigger_name(node.kind)) + ")");
            }
            Snapshot s;
            s.patient_id = rec.id();
            s.record_index = r;
            s.t0 = node.t0;
            s.trigger = node.kind;
            s.context = ehr::truncate_sequence(ehr::serialize_record(rec, vocab, node.t0), vocab, max_len);
            s.labels = it->second->labels;
            out.push_back(std::move(s));
        }
    }
    return out;
}

PatientSplit patient_split(std::span<const std::string> patient_ids, std::uint64_t seed) {
    std::vector<std::string> ids(patient_ids.begin(), patient_ids.end());
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    if (ids.size() < 20) {
        throw DataError("patient split needs at least 20 patients, got " + std::to_string(ids.size()));
    }
    std::vector<std::pair<std::uint64_t, std::string>> keyed;
    for (auto& id : ids) {
        keyed.emplace_back(derive_seed(seed, {fnv1a(id)}), std::move(id));
    }
    std::sort(keyed.begin(), keyed.end());
    const auto n_test = static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(keyed.size())));
    PatientSplit split;
    for (std::size_t i = 0; i < keyed.size(); ++i) {
        (i < n_test ? split.test : split.train).insert(keyed[i].second);
    }
    return split;
}

std::string_view pooling_name(Pooling p) { return p == Pooling::mean ? "mean" : "last"; }

Pooling parse_pooling(std::string_view name) {
    if (name == "last") {
        return Pooling::last;
    }
    if (name == "mean") {
        return Pooling::mean;
    }
    throw UsageError("unknown pooling '" + std::string(name) + "' (expected last or mean)");
}

std::vector<double> extract_embedding(const model::ModelBundle& bundle, const Snapshot& snapshot, Pooling pooling) {
    const auto ids = snapshot.context.context();
    if (ids.empty()) {
        throw std::invalid_argument("extract_embedding: empty context");
    }
    nn::NoGradScope no_grad;
    const auto h = model::encoder_forward(bundle.encoder_cfg, bundle.online, ids, std::nullopt, false).hidden;
    const std::size_t len = h.dim(0), d = h.dim(1);
    auto data = h.data();
    std::vector<double> out(d, 0.0);
    if (pooling == Pooling::last) {
        for (std::size_t j = 0; j < d; ++j) {
            out[j] = data[(len - 1) * d + j];
        }
    } else {
        for (std::size_t i = 0; i < len; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                out[j] += data[i * d + j];
            }
        }
        for (double& v : out) {
            v /= static_cast<double>(len);
        }
    }
    return out;
}

Standardizer Standardizer::fit(const Matrix& x) {
    Standardizer s;
    if (x.empty()) {
        return s;
    }
    const std::size_t d = x[0].size();
    s.mean.assign(d, 0.0);
    s.scale.assign(d, 0.0);
    for (const auto& row : x) {
        for (std::size_t j = 0; j < d; ++j) {
            s.mean[j] += row[j];
        }
    }
    for (double& m : s.mean) {
        m /= static_cast<double>(x.size());
    }
    for (std::size_t j = 0; j < d; ++j) {
        double var = 0.0;
        for (const auto& row : x) {
            var += (row[j] - s.mean[j]) * (row[j] - s.mean[j]);
        }
        const double sd = std::sqrt(var / static_cast<double>(x.size()));
        if (sd > 1e-12) {
            s.scale[j] = 1.0 / sd;
        } else {
            ++s.constant_columns;
        }
    }
    return s;
}

Matrix Standardizer::apply(const Matrix& x) const {
    Matrix out = x;
    for (auto& row : out) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] = (row[j] - mean[j]) * scale[j];
        }
    }
    return out;
}

double LogisticModel::predict(std::span<const double> x) const { return sigmoid(dot(weights, x) + bias); }

double logistic_objective(const LogisticModel& m, const Matrix& x, std::span<const int> y, double l2) {
    double ll = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double z = dot(m.weights, x[i]) + m.bias;
        ll -= y[i] ? softplus(-z) : softplus(z);
    }
    return ll / static_cast<double>(x.size()) - 0.5 * l2 * dot(m.weights, m.weights);
}

LogisticModel fit_logistic_probe(const Matrix& x, std::span<const int> y, const ProbeOptions& opt) {
    check_design(x, y.size());
    const std::vector<int> labels(y.begin(), y.end());
    if (!both_classes(labels)) {
        throw DataError("degenerate labels");
    }
    const std::size_t d = x[0].size();
    const double n = static_cast<double>(x.size());
    auto unpack = [d](const std::vector<double>& theta) {
        return LogisticModel{std::vector<double>(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(d)),
                             theta[d]};
    };
    auto value = [&](const std::vector<double>& theta) { return logistic_objective(unpack(theta), x, y, opt.l2); };
    auto gradient = [&](const std::vector<double>& theta, std::vector<double>& g) {
        std::fill(g.begin(), g.end(), 0.0);
        const auto m = unpack(theta);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double r = static_cast<double>(y[i]) - m.predict(x[i]);
            for (std::size_t k = 0; k < d; ++k) {
                g[k] += r * x[i][k];
            }
            g[d] += r;
        }
        for (std::size_t k = 0; k <= d; ++k) {
            g[k] /= n;
        }
        for (std::size_t k = 0; k < d; ++k) {
            g[k] -= opt.l2 * theta[k];
        }
    };
    return unpack(ascend(std::vector<double>(d + 1, 0.0), opt, value, gradient, nullptr));
}

double cox_partial_log_likelihood(const Matrix& x, std::span<const double> time, std::span<const int> event,
                                  std::span<const double> beta) {
    check_design(x, time.size());
    return cox_pll(x, time, event, beta, cox_order(time), nullptr);
}

double CoxModel::risk(std::span<const double> x) const { return dot(beta, x); }

CoxModel fit_cox_probe(const Matrix& x, std::span<const double> time, std::span<const int> event,
                       const ProbeOptions& opt) {
    check_design(x, time.size());
    if (event.size() != time.size()) {
        throw std::invalid_argument("fit_cox_probe: times and event flags differ in length");
    }
    const auto events = std::count_if(event.begin(), event.end(), [](int e) { return e != 0; });
    if (events == 0) {
        throw DataError("cox probe: no observed events");
    }
    const auto order = cox_order(time);
    const double scale = 1.0 / static_cast<double>(events);
    auto value = [&](const std::vector<double>& beta) {
        return scale * cox_pll(x, time, event, beta, order, nullptr) - 0.5 * opt.l2 * dot(beta, beta);
    };
    auto gradient = [&](const std::vector<double>& beta, std::vector<double>& g) {
        cox_pll(x, time, event, beta, order, &g);
        for (std::size_t k = 0; k < g.size(); ++k) {
            g[k] = scale * g[k] - opt.l2 * beta[k];
        }
    };
    CoxModel m;
    m.objective_trace.push_back(value(std::vector<double>(x[0].size(), 0.0)));
    m.beta = ascend(std::vector<double>(x[0].size(), 0.0), opt, value, gradient, &m.objective_trace);
    return m;
}

double auc_roc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        throw std::invalid_argument("auc_roc: scores and labels differ in length");
    }
    const auto rank = midranks(scores);
    double pos = 0.0, rank_sum = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i]) {
            pos += 1.0;
            rank_sum += rank[i];
        }
    }
    const double neg = static_cast<double>(labels.size()) - pos;
    if (pos == 0.0 || neg == 0.0) {
        throw DataError("auc_roc: labels contain a single class");
    }
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double concordance_index(std::span<const double> scores, std::span<const double> time, std::span<const int> event) {
    const std::size_t n = scores.size();
    if (time.size() != n || event.size() != n) {
        throw std::invalid_argument("concordance_index: inputs differ in length");
    }
    // Score ranks (dense) for the Fenwick tree.
    std::vector<double> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    std::vector<std::size_t> rank(n);
    for (std::size_t i = 0; i < n; ++i) {
        rank[i] = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), scores[i]) - sorted.begin());
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return time[a] > time[b]; });

    Fenwick later(sorted.size());
    std::uint64_t inserted = 0, twice_concordant = 0, comparable = 0;
    for (std::size_t g = 0; g < n;) {
        std::size_t end = g;
        while (end < n && time[idx[end]] == time[idx[g]]) {
            ++end;
        }
        for (std::size_t p = g; p < end; ++p) {
            const std::size_t i = idx[p];
            if (!event[i]) {
                continue;
            }
            const std::uint64_t lower = later.below(rank[i]);
            const std::uint64_t tied = later.below(rank[i] + 1) - lower;
            comparable += inserted;
            twice_concordant += 2 * lower + tied;
        }
        for (std::size_t p = g; p < end; ++p) {
            later.add(rank[idx[p]]);
            ++inserted;
        }
        g = end;
    }
    if (comparable == 0) {
        throw DataError("concordance_index: no comparable pairs");
    }
    return static_cast<double>(twice_concordant) / (2.0 * static_cast<double>(comparable));
}

std::size_t baseline_dimension(const ehr::Vocabulary& vocab) {
    return ehr::kCategoryCount + vocab.bucket_edges().size() + 1;
}

std::vector<double> baseline_features(const ehr::PatientRecord& record, const ehr::Vocabulary& vocab, double t0) {
    std::vector<double> f(baseline_dimension(vocab), 0.0);
    std::map<std::string, std::size_t> slot;
    std::size_t k = ehr::kCategoryCount;
    for (const auto& [code, edges] : vocab.bucket_edges()) {
        slot[code] = k++;
    }
    for (const auto& e : record.events()) {
        if (e.time > t0) {
            break;
        }
        f[static_cast<std::size_t>(ehr::category_rank(e.category))] += 1.0;
        if (e.value) {
            if (auto it = slot.find(e.code); it != slot.end()) {
                f[it->second] = static_cast<double>(vocab.bucket_index(e.code, *e.value) + 1);
            }
        }
    }
    f.back() = t0;
    return f;
}

std::vector<CategorySummary> summarize(std::span<const TaskResult> tasks) {
    std::vector<CategorySummary> out;
    for (const auto& t : tasks) {
        auto it = std::find_if(out.begin(), out.end(),
                               [&](const CategorySummary& c) { return c.category == t.category; });
        if (it == out.end()) {
            out.push_back({t.category});
            it = std::prev(out.end());
        }
        t.value ? ++it->evaluated : ++it->skipped;
    }
    for (auto& c : out) {
        std::vector<double> v, b;
        for (const auto& t : tasks) {
            if (t.category == c.category && t.value) {
                v.push_back(*t.value);
                b.push_back(*t.baseline);
            }
        }
        if (!v.empty()) {
            c.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
            c.std = population_std(v, c.mean);
            c.baseline_mean = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(b.size());
            c.baseline_std = population_std(b, c.baseline_mean);
        }
    }
    return out;
}

Report evaluate_features(std::span<const Snapshot> snapshots, const Matrix& features, const Matrix& baseline,
                         const PatientSplit& split, const EvalOptions& options) {
    if (features.size() != snapshots.size() || baseline.size() != snapshots.size()) {
        throw std::invalid_argument("evaluate_features: feature rows do not match snapshots");
    }
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < snapshots.size(); ++i) {
        if (split.train.count(snapshots[i].patient_id)) {
            train_idx.push_back(i);
        } else if (split.test.count(snapshots[i].patient_id)) {
            test_idx.push_back(i);
        }
    }
    Report report;
    report.pooling = options.pooling;
    report.snapshots = snapshots.size();

    const auto emb_std = Standardizer::fit(rows_of(features, train_idx));
    const auto base_std = Standardizer::fit(rows_of(baseline, train_idx));
    report.constant_embedding_columns = emb_std.constant_columns;
    const Matrix emb_train = emb_std.apply(rows_of(features, train_idx));
    const Matrix emb_test = emb_std.apply(rows_of(features, test_idx));
    const Matrix base_train = base_std.apply(rows_of(baseline, train_idx));
    const Matrix base_test = base_std.apply(rows_of(baseline, test_idx));

    for (const auto& spec : kTasks) {
        TaskResult r;
        r.category = spec.category;
        r.task = spec.task;
        r.metric = spec.survival ? "c_index" : "auc";
        r.n_train = train_idx.size();
        r.n_test = test_idx.size();
        if (!spec.survival) {
            std::vector<int> y_train, y_test;
            for (std::size_t i : train_idx) {
                y_train.push_back(spec.label(snapshots[i].labels));
            }
            for (std::size_t i : test_idx) {
                y_test.push_back(spec.label(snapshots[i].labels));
            }
            if (!both_classes(y_train) || !both_classes(y_test)) {
                r.skip_reason = both_classes(y_train) ? "single class in test split" : "single class in train split";
            } else {
                auto score = [&](const Matrix& tr, const Matrix& te) {
                    const auto m = fit_logistic_probe(tr, y_train, options.probe);
                    std::vector<double> s;
                    for (const auto& row : te) {
                        s.push_back(dot(m.weights, row) + m.bias);
                    }
                    return auc_roc(s, y_test);
                };
                r.value = score(emb_train, emb_test);
                r.baseline = score(base_train, base_test);
            }
        } else {
            std::vector<double> t_train, t_test;
            std::vector<int> e_train, e_test;
            for (std::size_t i : train_idx) {
                t_train.push_back(snapshots[i].labels.survival_time);
                e_train.push_back(int(snapshots[i].labels.event_indicator));
            }
            for (std::size_t i : test_idx) {
                t_test.push_back(snapshots[i].labels.survival_time);
                e_test.push_back(int(snapshots[i].labels.event_indicator));
            }
            if (std::count(e_train.begin(), e_train.end(), 1) == 0) {
                r.skip_reason = "no events in train split";
            } else if (!has_comparable_pair(t_test, e_test)) {
                r.skip_reason = "no comparable pairs in test split";
            } else {
                auto score = [&](const Matrix& tr, const Matrix& te) {
                    const auto m = fit_cox_probe(tr, t_train, e_train, options.probe);
                    std::vector<double> s;
                    for (const auto& row : te) {
                        s.push_back(m.risk(row));
                    }
                    return concordance_index(s, t_test, e_test);
                };
                r.value = score(emb_train, emb_test);
                r.baseline = score(base_train, base_test);
            }
        }
        report.tasks.push_back(std::move(r));
    }

    report.categories = summarize(report.tasks);
    return report;
}

Report evaluate_run(const model::ModelBundle& bundle, std::span<const ehr::PatientRecord> records,
                    std::span<const sim::LabelRow> labels, const ehr::Vocabulary& vocab, const EvalOptions& options) {
    const auto snapshots = make_snapshots(records, labels, vocab, bundle.encoder_cfg.max_len);
    if (snapshots.empty()) {
        throw DataError("no snapshots to evaluate");
    }
    std::size_t nodes = 0;
    for (const auto& r : records) {
        nodes += sim::emit_trigger_events(r).size();
    }
    Matrix emb, base;
    emb.reserve(snapshots.size());
    for (const auto& s : snapshots) {
        emb.push_back(extract_embedding(bundle, s, options.pooling));
        base.push_back(baseline_features(records[s.record_index], vocab, s.t0));
    }
    std::vector<std::string> ids;
    for (const auto& r : records) {
        ids.push_back(r.id());
    }
    Report report = evaluate_features(snapshots, emb, base, patient_split(ids, options.split_seed), options);
    report.excluded_end_of_life = nodes - snapshots.size();
    return report;
}

std::string format_report(const Report& r) {
    std::ostringstream os;
    os << "# pooling=" << pooling_name(r.pooling) << '\n';
    os << "# std=population\n";
    os << "# snapshots=" << r.snapshots << " excluded_end_of_life=" << r.excluded_end_of_life
       << " constant_embedding_columns=" << r.constant_embedding_columns << '\n';
    for (const auto& t : r.tasks) {
        const std::string v = t.value ? format_number(*t.value) : "skipped";
        const std::string b = t.baseline ? format_number(*t.baseline) : "skipped";
        os << t.category << '\t' << t.task << '\t' << t.metric << '\t' << v << '\t' << t.n_train << '\t' << t.n_test
           << '\n';
        os << t.category << '\t' << t.task << '\t' << "baseline_" << t.metric << '\t' << b << '\t' << t.n_train
           << '\t' << t.n_test << '\n';
        if (!t.value) {
            os << "# skipped " << t.task << ": " << t.skip_reason << '\n';
        }
    }
    for (const auto& c : r.categories) {
        os << "summary\t" << c.category << "\tmean=" << format_number(c.mean) << "\tstd=" << format_number(c.std)
           << "\tbaseline_mean=" << format_number(c.baseline_mean) << "\tbaseline_std="
           << format_number(c.baseline_std) << "\tevaluated=" << c.evaluated << "\tskipped=" << c.skipped << '\n';
    }
    return os.str();
}

void write_report(const std::filesystem::path& tsv, const std::filesystem::path& json, const Report& r) {
    {
        std::ofstream f(tsv, std::ios::trunc);
        if (!f) {
            throw DataError("cannot write " + tsv.string());
        }
        f << format_report(r);
    }
    nlohmann::ordered_json j;
    j["pooling"] = std::string(pooling_name(r.pooling));
    j["std_convention"] = "population";
    j["snapshots"] = r.snapshots;
    j["excluded_end_of_life"] = r.excluded_end_of_life;
    j["constant_embedding_columns"] = r.constant_embedding_columns;
    j["tasks"] = nlohmann::ordered_json::array();
    for (const auto& t : r.tasks) {
        nlohmann::ordered_json row;
        row["category"] = t.category;
        row["task"] = t.task;
        row["metric"] = t.metric;
        row["value"] = t.value ? nlohmann::ordered_json(*t.value) : nlohmann::ordered_json(nullptr);
        row["baseline"] = t.baseline ? nlohmann::ordered_json(*t.baseline) : nlohmann::ordered_json(nullptr);
        row["n_train"] = t.n_train;
        row["n_test"] = t.n_test;
        if (!t.value) {
            row["skip_reason"] = t.skip_reason;
        }
        j["tasks"].push_back(std::move(row));
    }
    j["categories"] = nlohmann::ordered_json::array();
    for (const auto& c : r.categories) {
        j["categories"].push_back({{"category", c.category},
                                   {"mean", c.mean},
                                   {"std", c.std},
                                   {"baseline_mean", c.baseline_mean},
                                   {"baseline_std", c.baseline_std},
                                   {"evaluated", c.evaluated},
                                   {"skipped", c.skipped}});
    }
    std::ofstream f(json, std::ios::trunc);
    if (!f) {
        throw DataError("cannot write " + json.string());
    }
    f << j.dump(2) << '\n';
}

} // namespace smb::eval
