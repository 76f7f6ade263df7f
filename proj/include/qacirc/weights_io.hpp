// SPDX-License-Identifier: Apache-2.0
//
// Weight file layout:
//   "QACM" | u16 version (=1) | u32 header length | JSON header | f64 data
// All integers and floats are little-endian. The header carries the model
// config, a tensor directory {name, shape, offset} with byte offsets into
// the data section, and optionally the fixture metadata.
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "qacirc/fixture.hpp"
#include "qacirc/model.hpp"

namespace qacirc {

struct LoadedModel {
  ModelWeights weights;
  std::optional<FixtureInfo> fixture;
};

std::string serialize_model(const ModelWeights& weights, const FixtureInfo* fixture = nullptr);
LoadedModel parse_model(std::string_view bytes);

void save_model(const std::filesystem::path& path, const ModelWeights& weights,
                const FixtureInfo* fixture = nullptr);
LoadedModel load_model(const std::filesystem::path& path);

}  // namespace qacirc
