#pragma once

namespace tinydistill {

// git-describe style version string baked into run manifests.
inline constexpr const char* kVersion = "tinydistill-0.1.0";

}  // namespace tinydistill
