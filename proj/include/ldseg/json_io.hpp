#pragma once

// JSON conversions for the structured text headers used in checkpoints,
// dataset manifests and configs.

#include "json.hpp"
#include "ldseg/data.hpp"
#include "ldseg/model.hpp"

namespace ldseg {

nlohmann::json to_json(const ArchitectureDescriptor& arch);
ArchitectureDescriptor architecture_from_json(const nlohmann::json& j);

nlohmann::json to_json(const DomainShift& shift);
nlohmann::json to_json(const DomainSpec& spec);
DomainSpec domain_spec_from_json(const nlohmann::json& j);

}  // namespace ldseg
