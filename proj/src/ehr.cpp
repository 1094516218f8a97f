#include "smb/ehr.hpp"

#include "smb/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace smb::ehr {

namespace {

constexpr std::array<std::string_view, kCategoryCount> kCategoryNames = {
    "demographics", "conditions", "measurements", "observations", "procedures", "drugs", "notes", "death",
};

constexpr std::size_t kSectionWidth = 3; // open, token, close

std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find('\t', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

void append_section(std::vector<std::int32_t>& ids, const Vocabulary& vocab, const ClinicalEvent& e) {
    ids.push_back(vocab.open_tag(e.category));
    ids.push_back(vocab.id(vocab.event_token(e)));
    ids.push_back(vocab.close_tag(e.category));
}

} // namespace

std::string_view category_name(Category c) { return kCategoryNames[static_cast<std::size_t>(c)]; }

Category parse_category(std::string_view name) {
    for (std::size_t i = 0; i < kCategoryCount; ++i) {
        if (kCategoryNames[i] == name) {
            return kCategories[i];
        }
    }
    throw DataError("unknown category '" + std::string(name) + "'");
}

bool event_less(const ClinicalEvent& a, const ClinicalEvent& b) {
    if (a.time != b.time) {
        return a.time < b.time;
    }
    if (a.category != b.category) {
        return category_rank(a.category) < category_rank(b.category);
    }
    return a.code < b.code;
}

PatientRecord PatientRecord::build(std::string patient_id, std::vector<ClinicalEvent> events) {
    if (patient_id.empty()) {
        throw DataError("record with empty patient id");
    }
    PatientRecord r;
    for (const auto& e : events) {
        if (e.patient_id != patient_id) {
            throw DataError("event for patient '" + e.patient_id + "' inside record '" + patient_id + "'");
        }
        if (!std::isfinite(e.time) || e.time < 0.0) {
            throw DataError("patient " + patient_id + ": event time " + format_number(e.time) +
                            " is negative or not finite");
        }
        if (e.code.empty() || e.code.find_first_of(" \t\n\r") != std::string::npos) {
            throw DataError("patient " + patient_id + ": invalid code '" + e.code + "'");
        }
        if (e.value && !std::isfinite(*e.value)) {
            throw DataError("patient " + patient_id + ": non-finite value for " + e.code);
        }
        if (e.category == Category::death) {
            if (r.death_time_) {
                throw DataError("patient " + patient_id + " has more than one death event");
            }
            r.death_time_ = e.time;
        }
    }
    if (r.death_time_) {
        for (const auto& e : events) {
            if (e.time > *r.death_time_) {
                throw DataError("patient " + patient_id + ": event " + e.code + " at day " +
                                format_number(e.time) + " after death at day " + format_number(*r.death_time_));
            }
        }
    }
    std::stable_sort(events.begin(), events.end(), event_less);
    r.id_ = std::move(patient_id);
    r.events_ = std::move(events);
    return r;
}

std::vector<double> quantile_edges(std::vector<double> values, std::size_t bins) {
    if (bins < 2) {
        throw std::invalid_argument("quantile_edges: need at least 2 bins");
    }
    if (values.empty()) {
        throw std::invalid_argument("quantile_edges: no values");
    }
    std::sort(values.begin(), values.end());
    std::vector<double> edges;
    const double last = static_cast<double>(values.size() - 1);
    for (std::size_t k = 1; k < bins; ++k) {
        const double pos = last * static_cast<double>(k) / static_cast<double>(bins);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const double frac = pos - static_cast<double>(lo);
        const double hi_v = values[std::min(lo + 1, values.size() - 1)];
        edges.push_back(values[lo] + frac * (hi_v - values[lo]));
    }
    return edges;
}

std::string bucket_token(std::string_view code, std::size_t bucket) {
    return std::string(code) + "#q" + std::to_string(bucket);
}

std::string tag_token(Category c, bool closing) {
    return std::string(closing ? "</" : "<") + std::string(category_name(c)) + ">";
}

Vocabulary Vocabulary::build(std::span<const PatientRecord> records, std::size_t numeric_bins) {
    if (records.empty()) {
        throw DataError("empty corpus");
    }
    if (numeric_bins < 2) {
        throw std::invalid_argument("build_vocabulary: numeric_bins must be >= 2");
    }
    std::set<std::string> codes;
    std::map<std::string, std::vector<double>> values;
    for (const auto& r : records) {
        for (const auto& e : r.events()) {
            codes.insert(e.code);
            if (e.category == Category::measurements && e.value) {
                values[e.code].push_back(*e.value);
            }
        }
    }
    std::map<std::string, std::vector<double>> edges;
    std::set<std::string> body = codes;
    for (auto& [code, vals] : values) {
        edges[code] = quantile_edges(std::move(vals), numeric_bins);
        for (std::size_t b = 0; b < numeric_bins; ++b) {
            body.insert(bucket_token(code, b));
        }
    }
    std::vector<std::string> tokens = {std::string(kPad), std::string(kBos), std::string(kMask)};
    for (Category c : kCategories) {
        tokens.push_back(tag_token(c, false));
        tokens.push_back(tag_token(c, true));
    }
    for (const auto& t : body) {
        tokens.push_back(t);
    }
    return from_tokens(std::move(tokens), std::move(edges));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens,
                                   std::map<std::string, std::vector<double>> bucket_edges) {
    Vocabulary v;
    if (tokens.size() < 3 + 2 * kCategoryCount || tokens[kPadId] != kPad || tokens[kBosId] != kBos ||
        tokens[kMaskId] != kMask) {
        throw DataError("vocabulary: special tokens missing or out of place");
    }
    for (Category c : kCategories) {
        if (tokens[static_cast<std::size_t>(v.open_tag(c))] != tag_token(c, false) ||
            tokens[static_cast<std::size_t>(v.close_tag(c))] != tag_token(c, true)) {
            throw DataError("vocabulary: delimiter tags for " + std::string(category_name(c)) +
                            " missing or out of place");
        }
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!v.index_.emplace(tokens[i], static_cast<std::int32_t>(i)).second) {
            throw DataError("vocabulary: duplicate token '" + tokens[i] + "'");
        }
    }
    for (const auto& [code, e] : bucket_edges) {
        for (std::size_t b = 0; b <= e.size(); ++b) {
            if (!v.index_.count(bucket_token(code, b))) {
                throw DataError("vocabulary: missing bucket token " + bucket_token(code, b));
            }
        }
    }
    v.tokens_ = std::move(tokens);
    v.edges_ = std::move(bucket_edges);
    return v;
}

std::optional<std::int32_t> Vocabulary::find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::int32_t Vocabulary::id(std::string_view token) const {
    if (auto i = find(token)) {
        return *i;
    }
    throw DataError("unknown token '" + std::string(token) + "'");
}

const std::string& Vocabulary::token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                                std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::optional<Category> Vocabulary::opened_category(std::int32_t id) const {
    if (id >= 3 && id < 3 + static_cast<std::int32_t>(2 * kCategoryCount) && (id - 3) % 2 == 0) {
        return kCategories[static_cast<std::size_t>((id - 3) / 2)];
    }
    return std::nullopt;
}

std::size_t Vocabulary::bucket_index(const std::string& code, double value) const {
    const auto& e = edges_.at(code);
    return static_cast<std::size_t>(std::upper_bound(e.begin(), e.end(), value) - e.begin());
}

std::string Vocabulary::event_token(const ClinicalEvent& e) const {
    if (e.category == Category::measurements && e.value) {
        if (edges_.count(e.code)) {
            return bucket_token(e.code, bucket_index(e.code, *e.value));
        }
    }
    return e.code;
}

std::vector<std::int32_t> Vocabulary::encode(std::span<const std::string> tokens) const {
    std::vector<std::int32_t> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) {
        ids.push_back(id(t));
    }
    return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const std::int32_t> ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (std::int32_t i : ids) {
        out.push_back(token(i));
    }
    return out;
}

void Vocabulary::save(const std::filesystem::path& vocab_file, const std::filesystem::path& buckets_file) const {
    std::ofstream vf(vocab_file);
    if (!vf) {
        throw DataError("cannot write " + vocab_file.string());
    }
    for (const auto& t : tokens_) {
        vf << t << '\n';
    }
    std::ofstream bf(buckets_file);
    if (!bf) {
        throw DataError("cannot write " + buckets_file.string());
    }
    for (const auto& [code, e] : edges_) {
        bf << code;
        for (double x : e) {
            bf << '\t' << format_number(x);
        }
        bf << '\n';
    }
}

Vocabulary Vocabulary::load(const std::filesystem::path& vocab_file, const std::filesystem::path& buckets_file) {
    std::ifstream vf(vocab_file);
    if (!vf) {
        throw DataError("cannot read vocabulary file " + vocab_file.string());
    }
    std::vector<std::string> tokens;
    for (std::string line; std::getline(vf, line);) {
        tokens.push_back(line);
    }
    std::ifstream bf(buckets_file);
    if (!bf) {
        throw DataError("cannot read bucket file " + buckets_file.string());
    }
    std::map<std::string, std::vector<double>> edges;
    for (std::string line; std::getline(bf, line);) {
        if (line.empty()) {
            continue;
        }
        auto fields = split_tabs(line);
        auto& e = edges[std::string(fields[0])];
        for (std::size_t i = 1; i < fields.size(); ++i) {
            e.push_back(parse_number(fields[i], "bucket edge"));
        }
    }
    return from_tokens(std::move(tokens), std::move(edges));
}

TokenSequence serialize_record(const PatientRecord& record, const Vocabulary& vocab, double upto_time) {
    if (upto_time < 0.0) {
        throw std::invalid_argument("serialize_record: upto_time must be >= 0");
    }
    TokenSequence seq;
    seq.ids.push_back(Vocabulary::kBosId);
    for (const auto& e : record.events()) {
        if (e.time > upto_time) {
            break;
        }
        append_section(seq.ids, vocab, e);
    }
    seq.split = seq.ids.size();
    return seq;
}

TokenSequence split_at_time(const PatientRecord& record, const Vocabulary& vocab, double t0, double horizon) {
    if (!(horizon > 0.0)) {
        throw std::invalid_argument("split_at_time: horizon must be positive");
    }
    TokenSequence seq = serialize_record(record, vocab, t0);
    const double end = t0 + horizon;
    for (const auto& e : record.events()) {
        if (e.time <= t0) {
            continue;
        }
        if (e.time > end) {
            break;
        }
        append_section(seq.ids, vocab, e);
    }
    return seq;
}

TokenSequence truncate_sequence(const TokenSequence& seq, const Vocabulary& vocab, std::size_t max_len) {
    if (seq.size() <= max_len) {
        return seq;
    }
    std::size_t excess = seq.size() - max_len;
    const std::int32_t demo = vocab.open_tag(Category::demographics);

    std::vector<bool> drop(seq.size(), false);
    for (std::size_t p = 1; p + kSectionWidth <= seq.split && excess > 0; p += kSectionWidth) {
        if (seq.ids[p] != demo) {
            for (std::size_t k = 0; k < kSectionWidth; ++k) {
                drop[p + k] = true;
            }
            excess = excess > kSectionWidth ? excess - kSectionWidth : 0;
        }
    }
    std::size_t cont_end = seq.size();
    while (excess > 0 && cont_end >= seq.split + kSectionWidth) {
        cont_end -= kSectionWidth;
        excess = excess > kSectionWidth ? excess - kSectionWidth : 0;
    }
    if (excess > 0) {
        throw DataError("sequence of " + std::to_string(seq.size()) + " tokens cannot be truncated to " +
                        std::to_string(max_len));
    }
    TokenSequence out;
    for (std::size_t p = 0; p < cont_end; ++p) {
        if (p == seq.split) {
            out.split = out.ids.size();
        }
        if (!drop[p]) {
            out.ids.push_back(seq.ids[p]);
        }
    }
    if (seq.split >= cont_end) {
        out.split = out.ids.size();
    }
    return out;
}

std::vector<std::string> detokenize(std::span<const std::int32_t> ids, const Vocabulary& vocab) {
    return vocab.decode(ids);
}

std::string format_number(double v) {
    std::array<char, 64> buf{};
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

double parse_number(std::string_view s, std::string_view what) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw DataError("cannot parse " + std::string(what) + " '" + std::string(s) + "'");
    }
    return v;
}

std::vector<PatientRecord> read_events(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw DataError("cannot read event file " + path.string());
    }
    std::vector<std::string> order;
    std::unordered_map<std::string, std::vector<ClinicalEvent>> by_patient;
    std::size_t line_no = 0;
    for (std::string line; std::getline(f, line);) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        auto fields = split_tabs(line);
        if (fields.size() != 4 && fields.size() != 5) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected 4 or 5 fields, got " +
                            std::to_string(fields.size()));
        }
        ClinicalEvent e;
        e.patient_id = std::string(fields[0]);
        try {
            e.time = parse_number(fields[1], "time");
            e.category = parse_category(fields[2]);
            e.code = std::string(fields[3]);
            if (fields.size() == 5 && !fields[4].empty()) {
                e.value = parse_number(fields[4], "value");
            }
        } catch (const DataError& err) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + err.what());
        }
        auto [it, inserted] = by_patient.try_emplace(e.patient_id);
        if (inserted) {
            order.push_back(e.patient_id);
        }
        it->second.push_back(std::move(e));
    }
    std::vector<PatientRecord> records;
    records.reserve(order.size());
    for (const auto& id : order) {
        records.push_back(PatientRecord::build(id, std::move(by_patient[id])));
    }
    return records;
}

void write_events(const std::filesystem::path& path, std::span<const PatientRecord> records) {
    std::ofstream f(path);
    if (!f) {
        throw DataError("cannot write event file " + path.string());
    }
    for (const auto& r : records) {
        for (const auto& e : r.events()) {
            f << e.patient_id << '\t' << format_number(e.time) << '\t' << category_name(e.category) << '\t'
              << e.code << '\t';
            if (e.value) {
                f << format_number(*e.value);
            }
            f << '\n';
        }
    }
}

} // namespace smb::ehr
