#pragma once

// Flat `key = value` run configuration with dotted key names. Every key has a
// default; unknown keys are rejected.

#include "smb/cohort_sim.hpp"
#include "smb/eval.hpp"
#include "smb/model.hpp"
#include "smb/training.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace smb::config {

struct KeyInfo {
    std::string name;
    std::string default_value;
    std::string doc;
};

// All keys in echo order.
const std::vector<KeyInfo>& known_keys();

class Config {
public:
    Config(); // all defaults

    // Lines `key = value`; '#' starts a comment. Throws UsageError with the
    // line number on malformed lines or unknown keys.
    static Config parse(std::string_view text, std::string_view source = "config");
    static Config load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value);
    const std::string& get(const std::string& key) const;
    bool contains(const std::string& key) const;

    double get_double(const std::string& key) const;
    std::size_t get_size(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;

    // Every key in known_keys() order.
    std::string to_text() const;

    sim::GeneratorConfig generator() const;
    model::EncoderConfig encoder(std::size_t vocab_size) const;
    model::PredictorConfig predictor() const;
    train::TrainConfig training() const;
    eval::EvalOptions evaluation() const;

    bool uses_secondary() const; // data.datasets == primary+secondary

    bool operator==(const Config&) const = default;

private:
    std::map<std::string, std::string> values_;
};

} // namespace smb::config
