#pragma once

#include <filesystem>

#include "ctxprune/nn.hpp"

namespace ctxprune {

// Checkpoint layout (little-endian):
//   "CTXP"  u32 version (1)  u32 count
//   per parameter: u32 name_len, name bytes, u32 rank, u64 dims[rank], f64 values[numel]
// Parameters are written in store order.

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store);

/// Overwrites every parameter of `store` from the file. Names and shapes must
/// match exactly; extra or missing names are a FormatError.
void load_checkpoint(const std::filesystem::path& path, ParamStore& store);

}  // namespace ctxprune
