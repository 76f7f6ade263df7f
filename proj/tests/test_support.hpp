// SPDX-License-Identifier: Apache-2.0
//
// Shared fixture and probe set for the unit tests.
#pragma once

#include <cmath>
#include <vector>

#include "qacirc/fixture.hpp"
#include "qacirc/probe.hpp"

namespace qacirc::testing {

inline const Fixture& fixture() {
  static const Fixture fx = build_fixture();
  return fx;
}

inline const ProbeSet& probe(std::size_t n = 200) {
  static const ProbeSet full = [] {
    ProbeConfig pc;
    pc.n = 200;
    return gen_probe(pc, 7, fixture().info, &fixture().weights).examples;
  }();
  static std::vector<ProbeSet> prefixes(201);
  if (prefixes[n].empty()) prefixes[n] = ProbeSet(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(n));
  return prefixes[n];
}

// Softmax evaluated in extended precision, independent of the library.
inline std::vector<double> softmax_oracle(const std::vector<double>& x) {
  long double mx = x.front();
  for (double v : x) mx = std::max<long double>(mx, v);
  long double z = 0;
  for (double v : x) z += std::exp(static_cast<long double>(v) - mx);
  std::vector<double> out;
  for (double v : x) out.push_back(static_cast<double>(std::exp(static_cast<long double>(v) - mx) / z));
  return out;
}

}  // namespace qacirc::testing
