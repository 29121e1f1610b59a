#pragma once

#include "mutualctr/models.hpp"

#include <string>

namespace mutualctr::models {

/// Checkpoint file: magic "MCKP", little-endian u64 header length, a
/// JSON header {format_version, architecture, config, fields,
/// schema_hash, manifest: id -> {shape, offset}}, then the raw
/// little-endian float64 parameter data. Offsets are bytes into the
/// data section, assigned in parameter registration order, so
/// save -> load -> save is byte-identical.
void save_checkpoint(const ModelInstance& model, const std::string& path);

/// Rebuilds the model from the header and validates every manifest
/// entry against the reconstructed parameter set. Truncated or
/// inconsistent files raise std::runtime_error naming the problem.
ModelInstance load_checkpoint(const std::string& path);

/// Throws when the checkpointed model does not match the dataset's
/// schema hash.
void require_schema_match(const ModelInstance& model, const std::string& schema_hash, const std::string& context);

} // namespace mutualctr::models
