// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Every subcommand writes its artifacts atomically
// into --out-dir together with a manifest holding the resolved config, the
// tool version and SHA-256 fingerprints of inputs and outputs.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace qacirc::cli {

inline constexpr const char* kToolName = "qacirc";
inline constexpr const char* kToolVersion = "1.0.0";

// Stage counters for derive_seed.
enum Stage : unsigned { kStageProbe = 1, kStageRandomCircuit = 2, kStageRandomSpans = 3 };

// `args` excludes the program name. Returns 0 on success, 1 on a validation
// error (bad flags, bad inputs) and 2 on an internal error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args);

}  // namespace qacirc::cli
