#pragma once

#include <iosfwd>
#include <string>

#include "tmt/nn.hpp"
#include "tmt/tensor.hpp"

namespace tmt {

// Binary tensor block: magic "TNSR", u32 rank, rank x u32 extents, then
// the row-major payload as little-endian IEEE-754 32-bit floats.
void write_tnsr(std::ostream& out, const Tensor& t);
Tensor read_tnsr(std::istream& in);

/// Whole-file tensor; rejects trailing bytes after the block.
void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

/// Feature sequences must be rank-2 with at least one row.
Tensor load_features(const std::string& path);

/// Values cast to f32 and back: exactly what a checkpoint round-trip
/// preserves.
Tensor quantize_f32(const Tensor& t);

// Checkpoint: a sequence of (u32 name length, name bytes, TNSR block)
// records with a trailing u32 record count. Loading requires the store's
// name set and shapes to match exactly.
void checkpoint_save(const std::string& path, const ParamStore& store);
void checkpoint_load(const std::string& path, ParamStore& store);

}  // namespace tmt
