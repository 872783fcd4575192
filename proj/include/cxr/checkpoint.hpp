#pragma once

#include <filesystem>

#include "cxr/model.hpp"

namespace cxr {

/// Checkpoint = directory with manifest.json (config, tensor names/shapes/
/// byte offsets, SHA-256 of the blob) + weights.bin (little-endian float32,
/// params and running stats in canonical order).
void save_checkpoint(const Model& model, const std::filesystem::path& dir);

/// Rebuilds the model from the manifest config and restores every tensor.
/// Throws IntegrityError when the blob does not match its recorded hash.
Model load_checkpoint(const std::filesystem::path& dir);

/// Copies all non-head parameters and running stats from the checkpoint into
/// `model`; the (freshly initialized) classifier head is left untouched.
/// Throws ShapeError/ValueError naming the first mismatching or missing
/// tensor.
void import_pretrained(Model& model, const std::filesystem::path& dir);

} // namespace cxr
