#pragma once

#include <filesystem>

#include "mole/param_store.hpp"

namespace mole {

// Binary layout: "MOLECKPT", u32 version, u64 count, then per parameter in id
// order: u64 id length, id bytes, u8 frozen, u64 rank, rank x u64 dims,
// little-endian f64 payload.
void save_checkpoint(const ParamStore& store, const std::filesystem::path& path);
ParamStore load_checkpoint(const std::filesystem::path& path);

}  // namespace mole
