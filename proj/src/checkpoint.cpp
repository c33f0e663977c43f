#include "ptpa/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <set>

namespace ptpa {

namespace {

void put_u32(std::ofstream& f, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  f.write(b, 4);
}

void put_u8(std::ofstream& f, std::uint8_t v) { f.write(reinterpret_cast<const char*>(&v), 1); }

struct Reader {
  std::ifstream f;
  std::size_t offset = 0;
  std::string path;

  void read(char* dst, std::size_t n) {
    f.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(f.gcount()) != n) {
      throw IoError("truncated checkpoint at byte " + std::to_string(offset) + " in \"" + path +
                    "\"");
    }
    offset += n;
  }
  std::uint32_t u32() {
    char b[4];
    read(b, 4);
    std::uint32_t v;
    std::memcpy(&v, b, 4);
    return v;
  }
  std::uint8_t u8() {
    char b;
    read(&b, 1);
    return static_cast<std::uint8_t>(b);
  }
};

}  // namespace

void save_checkpoint(const ad::ParameterStore& store, const std::string& path,
                     const std::function<bool(const ad::Parameter&)>& keep) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open \"" + path + "\" for writing");
  std::uint32_t count = 0;
  for (const auto& p : store.all()) {
    if (keep(*p)) ++count;
  }
  f.write("PTPK", 4);
  put_u32(f, 1);
  put_u32(f, count);
  for (const auto& p : store.all()) {
    if (!keep(*p)) continue;
    put_u32(f, static_cast<std::uint32_t>(p->name.size()));
    f.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put_u8(f, p->trainable ? 1 : 0);
    put_u32(f, static_cast<std::uint32_t>(p->value.shape.size()));
    for (Index d : p->value.shape) put_u32(f, static_cast<std::uint32_t>(d));
    f.write(reinterpret_cast<const char*>(p->value.data.data()),
            static_cast<std::streamsize>(sizeof(Scalar) * p->value.size()));
  }
  if (!f) throw IoError("write failed for \"" + path + "\"");
}

void save_checkpoint(const ad::ParameterStore& store, const std::string& path) {
  save_checkpoint(store, path, [](const ad::Parameter&) { return true; });
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  Reader r;
  r.path = path;
  r.f.open(path, std::ios::binary);
  if (!r.f) throw IoError("cannot open \"" + path + "\"");
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, "PTPK", 4) != 0) {
    throw IoError("bad magic at byte 0 in \"" + path + "\" (not a PTPK checkpoint)");
  }
  const std::uint32_t version = r.u32();
  if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::uint32_t name_len = r.u32();
    e.name.resize(name_len);
    r.read(e.name.data(), name_len);
    e.trainable = r.u8() != 0;
    const std::uint32_t rank = r.u32();
    ad::Shape shape(rank);
    Index total = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<Index>(r.u32());
      total *= shape[d];
    }
    VectorX data(total);
    r.read(reinterpret_cast<char*>(data.data()), sizeof(Scalar) * static_cast<std::size_t>(total));
    e.value = ad::Tensor(std::move(shape), std::move(data));
    entries.push_back(std::move(e));
  }
  return entries;
}

LoadReport apply_checkpoint(ad::ParameterStore& store,
                            const std::vector<CheckpointEntry>& entries) {
  std::vector<std::string> unknown, mismatched;
  LoadReport report;
  std::set<std::string> seen;
  for (const auto& e : entries) {
    ad::Parameter* p = store.find(e.name);
    if (!p) {
      unknown.push_back(e.name);
      continue;
    }
    if (p->value.shape != e.value.shape) {
      mismatched.push_back(e.name + " (model " + ad::shape_str(p->value.shape) +
                           ", checkpoint " + ad::shape_str(e.value.shape) + ")");
      continue;
    }
    p->value.data = e.value.data;
    seen.insert(e.name);
    report.applied.push_back(e.name);
  }
  if (!unknown.empty() || !mismatched.empty()) {
    std::string msg = "checkpoint/config mismatch:";
    for (const auto& n : unknown) msg += "\n  unknown parameter " + n;
    for (const auto& n : mismatched) msg += "\n  shape mismatch " + n;
    throw ConfigError(msg);
  }
  for (const auto& p : store.all()) {
    if (!seen.count(p->name)) report.missing_from_file.push_back(p->name);
  }
  return report;
}

}  // namespace ptpa
