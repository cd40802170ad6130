#pragma once

#include <string>

#include "gmtr/params.hpp"

namespace gmtr {

// Flat binary checkpoint: magic "GMTR", u32 version, u64 parameter count,
// then per parameter a length-prefixed name, u32 rank (always 2), u64
// rows/cols and the row-major 64-bit float data. Little-endian throughout.
constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const ParamStore& store);

// Loads into an existing store; every parameter must match by name and
// shape, otherwise CheckpointError names the offender.
void load_checkpoint(const std::string& path, ParamStore& store);

}  // namespace gmtr
