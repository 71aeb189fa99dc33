#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "iic/params.hpp"
#include "iic/pipeline.hpp"

// Versioned binary checkpoint: magic "IICN", format version, config block,
// length-prefixed tensor records (values + optimizer moments), trailing CRC32.

namespace iic {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class StorageDtype : std::uint32_t { f64 = 0, f32 = 1 };

namespace detail {

constexpr std::uint32_t kCheckpointVersion = 1;

struct ByteWriter {
  std::vector<unsigned char> bytes;
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void values(const double* p, size_t n, StorageDtype dtype) {
    if (dtype == StorageDtype::f64) {
      raw(p, n * 8);
    } else {
      for (size_t i = 0; i < n; ++i) {
        const float f = static_cast<float>(p[i]);
        raw(&f, 4);
      }
    }
  }
};

struct ByteReader {
  const unsigned char* p;
  size_t remaining;
  void raw(void* out, size_t n) {
    if (n > remaining) throw CheckpointError("checkpoint truncated");
    std::memcpy(out, p, n);
    p += n;
    remaining -= n;
  }
  std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
  std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
  double f64() { double v; raw(&v, 8); return v; }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > remaining) throw CheckpointError("checkpoint truncated");
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    remaining -= n;
    return s;
  }
  void values(double* out, size_t n, StorageDtype dtype) {
    if (dtype == StorageDtype::f64) {
      raw(out, n * 8);
    } else {
      for (size_t i = 0; i < n; ++i) {
        float f;
        raw(&f, 4);
        out[i] = static_cast<double>(f);
      }
    }
  }
};

inline void write_config(ByteWriter& w, const NetworkConfig& cfg) {
  w.u32(static_cast<std::uint32_t>(cfg.images));
  w.u32(static_cast<std::uint32_t>(cfg.channels));
  w.u32(static_cast<std::uint32_t>(cfg.height));
  w.u32(static_cast<std::uint32_t>(cfg.width));
  w.u8(cfg.downscale ? 1 : 0);
  w.u8(cfg.downscale_kind == DownscaleKind::haar ? 0 : 1);
  w.u32(static_cast<std::uint32_t>(cfg.embed_channels));
  w.u32(static_cast<std::uint32_t>(cfg.coupling_blocks));
  w.u32(static_cast<std::uint32_t>(cfg.dense.layers));
  w.u32(static_cast<std::uint32_t>(cfg.dense.growth));
  w.f64(cfg.dense.slope);
  w.u32(static_cast<std::uint32_t>(cfg.dense.kernel));
  w.u32(static_cast<std::uint32_t>(cfg.relation_features));
  w.u32(static_cast<std::uint32_t>(cfg.reference_index));
  w.u8(cfg.disable_relation ? 1 : 0);
}

inline NetworkConfig read_config(ByteReader& r) {
  NetworkConfig cfg;
  cfg.images = static_cast<int>(r.u32());
  cfg.channels = static_cast<int>(r.u32());
  cfg.height = static_cast<int>(r.u32());
  cfg.width = static_cast<int>(r.u32());
  cfg.downscale = r.u8() != 0;
  cfg.downscale_kind = r.u8() == 0 ? DownscaleKind::haar : DownscaleKind::shuffle;
  cfg.embed_channels = static_cast<int>(r.u32());
  cfg.coupling_blocks = static_cast<int>(r.u32());
  cfg.dense.layers = static_cast<int>(r.u32());
  cfg.dense.growth = static_cast<int>(r.u32());
  cfg.dense.slope = r.f64();
  cfg.dense.kernel = static_cast<int>(r.u32());
  cfg.relation_features = static_cast<int>(r.u32());
  cfg.reference_index = static_cast<int>(r.u32());
  cfg.disable_relation = r.u8() != 0;
  return cfg;
}

} // namespace detail

inline void checkpoint_save(const std::string& path, const NetworkConfig& cfg,
                            ParameterStore& store,
                            StorageDtype dtype = StorageDtype::f64) {
  detail::ByteWriter w;
  w.raw("IICN", 4);
  w.u32(detail::kCheckpointVersion);
  detail::write_config(w, cfg);
  w.u32(static_cast<std::uint32_t>(dtype));
  w.u64(static_cast<std::uint64_t>(store.step));
  w.u32(static_cast<std::uint32_t>(store.count()));
  for (const auto& name : store.names()) {
    Tensor& t = store.at(name);
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) w.u32(static_cast<std::uint32_t>(t.dim(i)));
    const size_t n = static_cast<size_t>(t.size());
    w.values(t.data(), n, dtype);
    const auto& mo = store.moments(name);
    w.values(mo.m.data(), n, dtype);
    w.values(mo.v.data(), n, dtype);
  }
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0L, w.bytes.data(), static_cast<uInt>(w.bytes.size())));
  w.u32(crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path);
  out.write(reinterpret_cast<const char*>(w.bytes.data()),
            static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw CheckpointError("checkpoint write failed: " + path);
}

struct Checkpoint {
  NetworkConfig config;
  StorageDtype dtype = StorageDtype::f64;
  std::int64_t step = 0;
  struct Record {
    std::string name;
    Shape shape;
    std::vector<double> values, m, v;
  };
  std::vector<Record> records;

  // copy values and optimizer state into a store with matching structure
  void apply(ParameterStore& store) const {
    if (records.size() != store.count())
      throw CheckpointError("checkpoint parameter count mismatch");
    for (const auto& rec : records) {
      Tensor& t = store.at(rec.name);
      if (t.shape() != rec.shape)
        throw CheckpointError("checkpoint shape mismatch for " + rec.name);
      std::copy(rec.values.begin(), rec.values.end(), t.data());
      auto& mo = store.moments(rec.name);
      mo.m = rec.m;
      mo.v = rec.v;
    }
    store.step = step;
  }
};

inline Checkpoint checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw CheckpointError("checkpoint truncated");

  const std::uint32_t stored_crc = [&] {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + bytes.size() - 4, 4);
    return v;
  }();
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0L, bytes.data(), static_cast<uInt>(bytes.size() - 4)));
  if (crc != stored_crc) throw CheckpointError("checkpoint checksum failure");

  detail::ByteReader r{bytes.data(), bytes.size() - 4};
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "IICN", 4) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != detail::kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

  Checkpoint ck;
  ck.config = detail::read_config(r);
  ck.dtype = static_cast<StorageDtype>(r.u32());
  ck.step = static_cast<std::int64_t>(r.u64());
  const std::uint32_t count = r.u32();
  ck.records.resize(count);
  for (auto& rec : ck.records) {
    rec.name = r.str();
    const std::uint32_t ndim = r.u32();
    rec.shape.resize(ndim);
    for (auto& d : rec.shape) d = static_cast<int>(r.u32());
    const size_t n = static_cast<size_t>(shape_numel(rec.shape));
    rec.values.resize(n);
    rec.m.resize(n);
    rec.v.resize(n);
    r.values(rec.values.data(), n, ck.dtype);
    r.values(rec.m.data(), n, ck.dtype);
    r.values(rec.v.data(), n, ck.dtype);
  }
  return ck;
}

} // namespace iic
