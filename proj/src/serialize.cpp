#include "nexus/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace nexus {

using nlohmann::json;

namespace {

void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (v >> (8 * i)) & 0xff;
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError("unexpected end of file reading u64");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_nxtn(std::ostream& os, const Tensor& t, uint8_t dtype) {
  if (dtype != kNxtnF64 && dtype != kNxtnF32) throw IoError("bad NXTN dtype");
  const char magic[4] = {'N', 'X', 'T', 'N'};
  os.write(magic, 4);
  uint8_t head[4] = {1, uint8_t(t.rank()), dtype, 0};
  os.write(reinterpret_cast<const char*>(head), 4);
  for (int64_t d : t.shape()) put_u64(os, uint64_t(d));
  if (dtype == kNxtnF64) {
    static_assert(sizeof(double) == 8);
    os.write(reinterpret_cast<const char*>(t.data()), t.numel() * 8);
  } else {
    std::vector<float> f(size_t(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) f[size_t(i)] = float(t.data()[i]);
    os.write(reinterpret_cast<const char*>(f.data()), t.numel() * 4);
  }
  if (!os) throw IoError("NXTN write failed");
}

Tensor read_nxtn(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "NXTN", 4) != 0)
    throw IoError("bad NXTN magic");
  uint8_t head[4];
  is.read(reinterpret_cast<char*>(head), 4);
  if (!is) throw IoError("truncated NXTN header");
  if (head[0] != 1) throw IoError("unsupported NXTN version " + std::to_string(head[0]));
  if (head[3] != 0) throw IoError("NXTN pad byte must be 0");
  uint8_t rank = head[1], dtype = head[2];
  if (dtype != kNxtnF64 && dtype != kNxtnF32)
    throw IoError("unsupported NXTN dtype " + std::to_string(dtype));
  Shape shape(rank);
  for (int i = 0; i < rank; ++i) shape[size_t(i)] = int64_t(get_u64(is));
  int64_t n = shape_numel(shape);
  std::vector<double> vals(static_cast<size_t>(n));
  if (dtype == kNxtnF64) {
    is.read(reinterpret_cast<char*>(vals.data()), n * 8);
  } else {
    std::vector<float> f(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(f.data()), n * 4);
    for (int64_t i = 0; i < n; ++i) vals[size_t(i)] = double(f[size_t(i)]);
  }
  if (!is) throw IoError("truncated NXTN payload");
  return Tensor::from_data(std::move(shape), std::move(vals));
}

void save_tensor(const std::string& path, const Tensor& t, uint8_t dtype) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_nxtn(os, t, dtype);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_nxtn(is);
}

void write_checkpoint(const std::string& path, const ParamMap& params,
                      const std::string& meta_json) {
  json manifest;
  manifest["format"] = "nexus-checkpoint-v1";
  manifest["meta"] = meta_json.empty() ? json::object() : json::parse(meta_json);
  json plist = json::array();
  // First pass to compute offsets: header is 8 bytes + rank*8 + payload.
  uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    json e;
    e["name"] = name;
    e["offset"] = offset;
    e["shape"] = t.shape();
    plist.push_back(e);
    offset += 8 + uint64_t(t.rank()) * 8 + uint64_t(t.numel()) * 8;
  }
  manifest["params"] = plist;
  std::string mstr = manifest.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  put_u64(os, mstr.size());
  os.write(mstr.data(), std::streamsize(mstr.size()));
  for (const auto& [name, t] : params) write_nxtn(os, t, kNxtnF64);
  if (!os) throw IoError("checkpoint write failed: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  uint64_t mlen = get_u64(is);
  std::string mstr(mlen, '\0');
  is.read(mstr.data(), std::streamsize(mlen));
  if (!is) throw IoError("truncated checkpoint manifest");
  json manifest = json::parse(mstr);
  if (manifest.value("format", "") != "nexus-checkpoint-v1")
    throw IoError("not a checkpoint file: " + path);
  Checkpoint ck;
  ck.meta_json = manifest["meta"].dump();
  std::streampos payload_start = is.tellg();
  for (const auto& e : manifest["params"]) {
    is.seekg(payload_start + std::streampos(e["offset"].get<uint64_t>()));
    Tensor t = read_nxtn(is);
    Shape expect = e["shape"].get<Shape>();
    if (t.shape() != expect)
      throw IoError("checkpoint shape mismatch for " + e["name"].get<std::string>());
    ck.params.emplace_back(e["name"].get<std::string>(), t);
  }
  return ck;
}

Tensor Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : params)
    if (n == name) return t;
  throw IoError("checkpoint has no tensor named " + name);
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : params)
    if (n == name) return true;
  return false;
}

void load_into(const Checkpoint& ck, ParamMap& params) {
  for (auto& [name, t] : params) {
    Tensor src = ck.get(name);
    if (src.shape() != t.shape())
      throw IoError("shape mismatch loading " + name + ": file " +
                    shape_str(src.shape()) + " vs model " + shape_str(t.shape()));
    t.values() = src.values();
  }
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(content.data(), std::streamsize(content.size()));
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace nexus
