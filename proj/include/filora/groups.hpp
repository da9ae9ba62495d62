#pragma once

#include <map>
#include <stdexcept>
#include <string>

namespace filora {

/// Identifier of a feature group / adapter group. Groups tie together a
/// feature block in the data, the LoRA pair on the matching computation
/// path, and one entry of the gate vector.
using GroupId = std::string;

/// Role a group plays in the benchmark. Neutral covers structural groups
/// (fusion) that exist as computation paths but carry no core/spurious
/// semantics.
enum class GroupRole { kCore, kSpurious, kNeutral };

/// Gate group added on the fusion/readout path of every model.
inline const GroupId kFusionGroup = "fusion";

struct GatingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace filora
