#pragma once

#include <filesystem>
#include <string>

#include "fhvae/seqnet.hpp"

namespace fhvae::io {

// Writes content to path via a temporary file plus rename, so failures never
// leave partial output behind.
void atomic_write_file(const std::filesystem::path& path, const std::string& content);

// Checkpoint container: magic "FHVZ", version u32, array count u32; per array
// name length u16 + UTF-8 name, dtype tag u8 (0 = float32), ndim u8,
// dims u32 each, then the row-major little-endian payload.
void save_checkpoint(const net::ParamStore<float>& store, const std::filesystem::path& path);

// Loads into an existing store; every array in the file must match a store
// entry by name and shape, and every store entry must be present.
void load_checkpoint(const std::filesystem::path& path, net::ParamStore<float>& store);

// Low-level read used by tests and tools: name/array pairs in file order.
std::vector<std::pair<std::string, Mat<float>>> read_checkpoint_arrays(
    const std::filesystem::path& path);

}  // namespace fhvae::io
