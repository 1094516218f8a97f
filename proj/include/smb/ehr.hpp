#pragma once

// Longitudinal event records, the token vocabulary, and serialisation of a
// record into a delimiter-tagged token sequence.
//
// Layout of a serialised record:
//
//   <bos> { <category> token </category> }*
//
// one section per event, in (time, category rank, code) order. Measurements
// with a value are emitted as their quantile bucket token "CODE#qK".

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace smb::ehr {

enum class Category : std::uint8_t {
    demographics,
    conditions,
    measurements,
    observations,
    procedures,
    drugs,
    notes,
    death,
};

inline constexpr std::size_t kCategoryCount = 8;
inline constexpr std::array<Category, kCategoryCount> kCategories = {
    Category::demographics, Category::conditions, Category::measurements, Category::observations,
    Category::procedures,   Category::drugs,      Category::notes,        Category::death,
};

std::string_view category_name(Category c);
Category parse_category(std::string_view name);
inline int category_rank(Category c) { return static_cast<int>(c); }

struct ClinicalEvent {
    std::string patient_id;
    double time = 0.0; // days since enrollment
    Category category = Category::demographics;
    std::string code;
    std::optional<double> value;
};

// Orders events by (time, category rank, code).
bool event_less(const ClinicalEvent& a, const ClinicalEvent& b);

class PatientRecord {
public:
    // Sorts the events and checks the record invariants; throws DataError.
    static PatientRecord build(std::string patient_id, std::vector<ClinicalEvent> events);

    const std::string& id() const { return id_; }
    const std::vector<ClinicalEvent>& events() const { return events_; }
    std::optional<double> death_time() const { return death_time_; }

private:
    std::string id_;
    std::vector<ClinicalEvent> events_;
    std::optional<double> death_time_;
};

// Quantile cut points (linear interpolation between order statistics) at
// k/bins for k = 1..bins-1.
std::vector<double> quantile_edges(std::vector<double> values, std::size_t bins);
std::string bucket_token(std::string_view code, std::size_t bucket);

class Vocabulary {
public:
    static constexpr std::string_view kPad = "<pad>";
    static constexpr std::string_view kBos = "<bos>";
    static constexpr std::string_view kMask = "<mask>";
    static constexpr std::int32_t kPadId = 0;
    static constexpr std::int32_t kBosId = 1;
    static constexpr std::int32_t kMaskId = 2;

    static Vocabulary build(std::span<const PatientRecord> records, std::size_t numeric_bins = 8);

    // Rebuilds from a token list (id = index) and per-code bucket edges.
    static Vocabulary from_tokens(std::vector<std::string> tokens,
                                  std::map<std::string, std::vector<double>> bucket_edges);

    std::size_t size() const { return tokens_.size(); }
    std::optional<std::int32_t> find(std::string_view token) const;
    std::int32_t id(std::string_view token) const; // throws DataError "unknown token"
    const std::string& token(std::int32_t id) const;

    std::int32_t open_tag(Category c) const { return 3 + 2 * category_rank(c); }
    std::int32_t close_tag(Category c) const { return 4 + 2 * category_rank(c); }
    std::optional<Category> opened_category(std::int32_t id) const;

    // Token string for an event: its bucket token if it is a binned
    // measurement, otherwise its code.
    std::string event_token(const ClinicalEvent& e) const;
    std::size_t bucket_index(const std::string& code, double value) const;
    const std::map<std::string, std::vector<double>>& bucket_edges() const { return edges_; }

    std::vector<std::int32_t> encode(std::span<const std::string> tokens) const;
    std::vector<std::string> decode(std::span<const std::int32_t> ids) const;

    // vocab file: one token per line, line number = id.
    // buckets file: code<TAB>edge<TAB>edge...
    void save(const std::filesystem::path& vocab_file, const std::filesystem::path& buckets_file) const;
    static Vocabulary load(const std::filesystem::path& vocab_file, const std::filesystem::path& buckets_file);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> index_;
    std::map<std::string, std::vector<double>> edges_;
};

std::string tag_token(Category c, bool closing);

struct TokenSequence {
    std::vector<std::int32_t> ids;
    std::size_t split = 0; // number of context tokens

    std::size_t size() const { return ids.size(); }
    std::size_t continuation_length() const { return ids.size() - split; }
    std::span<const std::int32_t> context() const { return std::span(ids).first(split); }
};

// <bos> plus one section per event with time <= upto_time; split = length.
TokenSequence serialize_record(const PatientRecord& record, const Vocabulary& vocab, double upto_time);

// Context = serialisation of events with time <= t0; continuation = sections of
// events with t0 < time <= t0 + horizon.
TokenSequence split_at_time(const PatientRecord& record, const Vocabulary& vocab, double t0, double horizon);

// Fits a sequence into max_len tokens by dropping the oldest non-demographics
// context sections. If the demographics and the continuation alone still
// overflow, continuation sections are dropped from the end.
TokenSequence truncate_sequence(const TokenSequence& seq, const Vocabulary& vocab, std::size_t max_len);

std::vector<std::string> detokenize(std::span<const std::int32_t> ids, const Vocabulary& vocab);

// Event file: patient_id<TAB>time<TAB>category<TAB>code<TAB>[value]
std::vector<PatientRecord> read_events(const std::filesystem::path& path);
void write_events(const std::filesystem::path& path, std::span<const PatientRecord> records);

// Shortest text that parses back to exactly the same double.
std::string format_number(double v);
double parse_number(std::string_view s, std::string_view what);

} // namespace smb::ehr
