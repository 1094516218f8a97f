#pragma once

// Central finite-difference checks of every differentiable operation and of
// the model compositions built from them. The checks run on the f64 build of
// the numerics code so that the comparison measures the backward rules rather
// than f32 rounding.

#include <cstdint>
#include <string>
#include <vector>

namespace smb::gradcheck {

struct Options {
    std::uint64_t seed = 20240601;
    std::size_t points = 10;
    double epsilon = 1e-3;
    double op_tolerance = 1e-4;
    double composition_tolerance = 1e-3;
    // Adds a deliberately wrong operation that must fail.
    bool inject_bug = false;
};

struct OpResult {
    std::string name;
    bool composition = false;
    std::size_t points = 0;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

std::vector<OpResult> run(const Options& options = {});

bool all_passed(const std::vector<OpResult>& results);

} // namespace smb::gradcheck
