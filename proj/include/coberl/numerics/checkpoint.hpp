#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "coberl/numerics/parameters.hpp"

namespace coberl::numerics {

enum class DType : std::uint8_t { kFloat64 = 0, kFloat32 = 1 };

/// Named-tensor container.
///
/// Layout (all integers little-endian):
///   "COBERLCK" | u32 format | u64 version | u32 len, metadata bytes | u32 count
///   then per tensor: u32 len, name | u8 dtype | u32 rank | u64 dims[rank] | data
struct Checkpoint {
  std::uint64_t version = 0;
  std::string metadata;
  std::vector<std::pair<std::string, Tensor>> tensors;

  static Checkpoint from_parameters(const ParameterSet& params, std::string metadata = {});
  ParameterSet to_parameters() const;
};

inline constexpr std::uint32_t kCheckpointFormat = 1;

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt, DType dtype = DType::kFloat64);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, DType dtype = DType::kFloat64);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace coberl::numerics
