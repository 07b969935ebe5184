#pragma once
// Finite-difference check of the analytic gradients of the full diffusion loss.

#include "mdsq/config.hpp"
#include "mdsq/denoiser.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace mdsq {

// "embeddings", "attention", "gates", "experts" or "head".
std::string parameter_group(std::string_view param_name);
const std::vector<std::string>& parameter_groups();

struct GradCheckEntry {
    std::string param;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckGroup {
    std::string group;
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    std::string worst_param;  // "name[index]"
    bool passed = true;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    std::size_t absorbed_rows = 0;  // absorbing-state rows in the checked batch
    double tolerance = 0.0;
    bool passed() const;
};

struct GradCheckOptions {
    std::size_t per_group = 20;
    double step = 1e-5;        // central difference half-width
    double tolerance = 1e-5;   // relative error bound
    double abs_floor = 1e-7;   // denominator floor for near-zero gradients
    // Runs after backward on the analytic gradients (fault-injection fixtures).
    std::function<void(DenoiserModel&)> corrupt;
};

// Gradcheck configs must be tiny: width <= 16.
GradCheckReport gradcheck(const RunConfig& config, std::uint64_t seed, const GradCheckOptions& options = {});

// Small but complete config: sparse windowed attention with dilation and a
// global token, MoE in every layer, absorbing state enabled.
RunConfig tiny_gradcheck_config();

void write_gradcheck_report(std::ostream& os, const GradCheckReport& report);

} // namespace mdsq
