#pragma once

#include "memloc/intervention.hpp"
#include "memloc/model.hpp"

#include <json.hpp>

#include <optional>
#include <string>

namespace memloc {

inline constexpr const char* kCheckpointMagic = "MEMLOC-CK1\n";

struct Checkpoint {
    Model model;
    std::optional<InterventionSpec> intervention;
    // Free-form provenance (run config echo); stored verbatim.
    nlohmann::json extra = nlohmann::json::object();
};

nlohmann::json spec_to_json(const InterventionSpec& spec);
InterventionSpec spec_from_json(const nlohmann::json& j);

// Header JSON: model config, parameter count, intervention spec (or null)
// and extra; payload: parameters as float32 in layout order.
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace memloc
