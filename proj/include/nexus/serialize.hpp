#pragma once
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "nexus/nn.hpp"
#include "nexus/tensor.hpp"

namespace nexus {

// NXTN tensor record, little endian throughout:
//   magic "NXTN" (4E 58 54 4E) | u8 version=1 | u8 rank | u8 dtype | u8 pad=0
//   rank x u64 extents | row-major payload (dtype 1 = f64, 2 = f32)
constexpr uint8_t kNxtnF64 = 1;
constexpr uint8_t kNxtnF32 = 2;

void write_nxtn(std::ostream& os, const Tensor& t, uint8_t dtype = kNxtnF64);
Tensor read_nxtn(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t, uint8_t dtype = kNxtnF64);
Tensor load_tensor(const std::string& path);

// Checkpoint file: u64-LE manifest length, JSON manifest, then concatenated
// NXTN records. Manifest lists {name, offset, shape} per parameter (offsets
// relative to the first byte after the manifest) plus a free-form "meta"
// object for configs and train state.
void write_checkpoint(const std::string& path, const ParamMap& params,
                      const std::string& meta_json);
struct Checkpoint {
  ParamMap params;
  std::string meta_json;
  Tensor get(const std::string& name) const;
  bool has(const std::string& name) const;
};
Checkpoint read_checkpoint(const std::string& path);

// Copies values from loaded params into an existing module's tensors by name.
// Missing names are an error; shapes must match.
void load_into(const Checkpoint& ck, ParamMap& params);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace nexus
