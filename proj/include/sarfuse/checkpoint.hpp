#pragma once

#include <filesystem>

#include <json.hpp>

#include "sarfuse/modules.hpp"

namespace sarfuse {

// Checkpoint container: 8-byte magic, little-endian u64 header length, JSON
// header (format version, architecture descriptor, tensor directory), then
// the raw float32 payload in directory order.
void save_checkpoint(const std::filesystem::path& path, Module& m, const nlohmann::json& arch);

// Loads tensors into an already-built module; validates names, shapes, and
// the learnable-parameter total against the module. Returns the stored
// architecture descriptor.
nlohmann::json load_checkpoint(const std::filesystem::path& path, Module& m);

// Reads only the architecture descriptor.
nlohmann::json read_checkpoint_arch(const std::filesystem::path& path);

} // namespace sarfuse
