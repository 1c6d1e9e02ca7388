// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container:
//
//   "SMORACK1"                 8 bytes
//   manifest length            u64, little endian
//   manifest                   UTF-8 JSON
//   tensor payloads            float64, little endian, manifest order
//
// The manifest records the format version, adapter kind and spec, layer
// shape, scaling, k, bias update rate, seed and every tensor's name and
// shape. Round trips are bit-exact.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "smora/model.hpp"

namespace smora {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    Model model;
    std::uint64_t seed = 0;
    nlohmann::json manifest;
};

std::string serialize_checkpoint(const Model& model, std::uint64_t seed);
/// Malformed or inconsistent bytes raise std::invalid_argument.
Checkpoint deserialize_checkpoint(const std::string& bytes);

/// I/O failures raise IoError.
void save_checkpoint(const std::filesystem::path& path, const Model& model, std::uint64_t seed);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace smora
