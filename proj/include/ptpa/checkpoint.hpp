#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ptpa/autodiff.hpp"

namespace ptpa {

/// PTPK checkpoint, little-endian: magic "PTPK", u32 version=1, u32 parameter
/// count; per parameter: u32 name length, name bytes, u8 trainable flag,
/// u32 rank, u32 dims..., f64 data row-major. Parameters are written in
/// registration order.
void save_checkpoint(const ad::ParameterStore& store, const std::string& path);
void save_checkpoint(const ad::ParameterStore& store, const std::string& path,
                     const std::function<bool(const ad::Parameter&)>& keep);

struct CheckpointEntry {
  std::string name;
  ad::Tensor value;
  bool trainable = true;
};

std::vector<CheckpointEntry> load_checkpoint(const std::string& path);

struct LoadReport {
  std::vector<std::string> applied;
  std::vector<std::string> missing_from_file;  // store parameters left at init
};

/// Writes entry values into matching store parameters. Unknown or
/// shape-mismatched names are a ConfigError listing every offender.
LoadReport apply_checkpoint(ad::ParameterStore& store,
                            const std::vector<CheckpointEntry>& entries);

}  // namespace ptpa
