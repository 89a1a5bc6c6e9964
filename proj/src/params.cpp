#include "tempo/params.hpp"

#include <cstring>
#include <fstream>

namespace tempo {

ParamStore ParamStore::slice(const std::string& prefix) const {
  ParamStore out;
  for (const auto& [name, t] : items) {
    if (name.rfind(prefix, 0) == 0) out.items.emplace(name.substr(prefix.size()), t);
  }
  return out;
}

void ParamStore::merge(const std::string& prefix, const ParamStore& other) {
  for (const auto& [name, t] : other.items) items[prefix + name] = t;
}

namespace {

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const std::string& meta_json) {
  std::string out;
  out.append("TNSA");
  out.push_back(1);
  put_u32(out, static_cast<uint32_t>(meta_json.size()));
  out.append(meta_json);
  put_u32(out, static_cast<uint32_t>(params.items.size()));
  for (const auto& [name, t] : params.items) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.append(name);
    std::string blob;
    write_tensor_bytes(t, blob);
    put_u32(out, static_cast<uint32_t>(blob.size()));
    out.append(blob);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  TEMPO_CHECK(f.good(), "checkpoint: cannot open ", path, " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  TEMPO_CHECK(f.good(), "checkpoint: write failed for ", path);
}

ParamStore load_checkpoint(const std::string& path, std::string& meta_json) {
  std::ifstream f(path, std::ios::binary);
  TEMPO_CHECK(f.good(), "checkpoint: cannot open ", path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
  TEMPO_CHECK(bytes.size() >= 13 && std::memcmp(p, "TNSA", 4) == 0,
              "checkpoint: bad magic in ", path);
  TEMPO_CHECK(p[4] == 1, "checkpoint: unsupported version ", static_cast<int>(p[4]));
  size_t off = 5;
  const uint32_t meta_len = get_u32(p + off);
  off += 4;
  TEMPO_CHECK(bytes.size() >= off + meta_len, "checkpoint: truncated metadata in ", path);
  meta_json.assign(bytes.data() + off, meta_len);
  off += meta_len;
  TEMPO_CHECK(bytes.size() >= off + 4, "checkpoint: truncated entry count in ", path);
  const uint32_t count = get_u32(p + off);
  off += 4;
  ParamStore store;
  for (uint32_t i = 0; i < count; ++i) {
    TEMPO_CHECK(bytes.size() >= off + 4, "checkpoint: truncated entry ", i, " in ", path);
    const uint32_t name_len = get_u32(p + off);
    off += 4;
    TEMPO_CHECK(bytes.size() >= off + name_len + 4, "checkpoint: truncated entry ", i,
                " in ", path);
    std::string name(bytes.data() + off, name_len);
    off += name_len;
    const uint32_t blob_len = get_u32(p + off);
    off += 4;
    TEMPO_CHECK(bytes.size() >= off + blob_len, "checkpoint: truncated tensor '", name,
                "' in ", path);
    size_t consumed = 0;
    Tensor t = read_tensor_bytes(bytes.data() + off, blob_len, consumed);
    TEMPO_CHECK(consumed == blob_len, "checkpoint: tensor '", name, "' has trailing bytes");
    off += blob_len;
    store.items.emplace(std::move(name), std::move(t));
  }
  TEMPO_CHECK(off == bytes.size(), "checkpoint: trailing bytes in ", path);
  return store;
}

}  // namespace tempo
