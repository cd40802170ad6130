#include "gmtr/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace gmtr {

namespace {

template <typename T>
void write_pod(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f, const std::string& path) {
  T v{};
  if (!f.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw CheckpointError("checkpoint: truncated file " + path);
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& store) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open " + path + " for writing");
  f.write("GMTR", 4);
  write_pod<std::uint32_t>(f, kCheckpointVersion);
  write_pod<std::uint64_t>(f, store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Param& p = store[i];
    write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(p.name.size()));
    f.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_pod<std::uint32_t>(f, 2);
    write_pod<std::uint64_t>(f, static_cast<std::uint64_t>(p.value.rows()));
    write_pod<std::uint64_t>(f, static_cast<std::uint64_t>(p.value.cols()));
    f.write(reinterpret_cast<const char*>(p.value.data()),
            static_cast<std::streamsize>(sizeof(double) * p.value.size()));
  }
  if (!f) throw CheckpointError("checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, ParamStore& store) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "GMTR", 4) != 0) {
    throw CheckpointError("checkpoint: bad magic in " + path);
  }
  const auto version = read_pod<std::uint32_t>(f, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version) + " in " +
                          path);
  }
  const auto count = read_pod<std::uint64_t>(f, path);
  if (count != store.size()) {
    throw CheckpointError("checkpoint: file has " + std::to_string(count) +
                          " parameters, model has " + std::to_string(store.size()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(f, path);
    std::string name(name_len, '\0');
    if (!f.read(name.data(), name_len)) throw CheckpointError("checkpoint: truncated name");
    const auto rank = read_pod<std::uint32_t>(f, path);
    if (rank != 2) throw CheckpointError("checkpoint: parameter '" + name + "' has rank " +
                                         std::to_string(rank) + ", expected 2");
    const auto rows = read_pod<std::uint64_t>(f, path);
    const auto cols = read_pod<std::uint64_t>(f, path);
    Param* p = store.find(name);
    if (!p) throw CheckpointError("checkpoint: parameter '" + name + "' not in model");
    if (static_cast<std::uint64_t>(p->value.rows()) != rows ||
        static_cast<std::uint64_t>(p->value.cols()) != cols) {
      throw CheckpointError("checkpoint: parameter '" + name + "' is " +
                            std::to_string(rows) + "x" + std::to_string(cols) +
                            " in file but " + shape_str(p->value) + " in model");
    }
    if (!f.read(reinterpret_cast<char*>(p->value.data()),
                static_cast<std::streamsize>(sizeof(double) * rows * cols))) {
      throw CheckpointError("checkpoint: truncated data for '" + name + "'");
    }
  }
}

}  // namespace gmtr
