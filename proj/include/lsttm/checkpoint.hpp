#pragma once

// Binary checkpoint: 8-byte magic, little-endian u64 manifest length, a JSON
// manifest, then every tensor as little-endian float64 in manifest order.

#include "lsttm/trainer.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>

namespace lsttm {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace lsttm
