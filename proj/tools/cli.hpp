#pragma once

#include <iosfwd>

#include "hat/model.hpp"

namespace hat::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kDiverged = 3 };

/// Entry point shared by the `hat` binary and the tests.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Parameter table in the layout of the published per-component budget.
void print_parameter_table(const ModelConfig& config, std::ostream& out);
/// Per-layer windows, accumulated window and right-context latency.
void print_mask_report(const ModelConfig& config, std::ostream& out);

}  // namespace hat::cli
