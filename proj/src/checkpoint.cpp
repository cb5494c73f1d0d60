#include "mma/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <boost/crc.hpp>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>

#include "mma/errors.hpp"

namespace mma {
namespace {

constexpr char kMagic[8] = {'M', 'M', 'A', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint8_t kDtypeF32 = 0;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  void bytes(void* p, std::size_t n) {
    if (n > in_.size() - pos_) throw CorruptCheckpoint("truncated at byte " + std::to_string(pos_));
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

CheckpointEntry entry_from(const std::string& name, const Tensor& t) {
  CheckpointEntry e{name, t.shape(), {}};
  e.values.reserve(t.numel());
  for (double v : t.data()) e.values.push_back(static_cast<float>(v));
  return e;
}

std::vector<CheckpointEntry> meta_entries(const CheckpointMeta& meta) {
  std::vector<CheckpointEntry> out;
  // Two 24-bit halves keep the counter exact in float32.
  out.push_back({"meta.step", {2},
                 {static_cast<float>(meta.step & 0xFFFFFF), static_cast<float>(meta.step >> 24)}});
  if (!meta.config_text.empty()) {
    CheckpointEntry cfg{"meta.config", {meta.config_text.size()}, {}};
    for (unsigned char ch : meta.config_text) cfg.values.push_back(static_cast<float>(ch));
    out.push_back(std::move(cfg));
  }
  return out;
}

CheckpointMeta meta_from(const std::map<std::string, const CheckpointEntry*>& by_name) {
  CheckpointMeta meta;
  if (auto it = by_name.find("meta.step"); it != by_name.end()) {
    const auto& v = it->second->values;
    if (v.size() != 2) throw CorruptCheckpoint("meta.step must hold two values");
    meta.step = static_cast<std::uint64_t>(v[0]) | (static_cast<std::uint64_t>(v[1]) << 24);
  }
  if (auto it = by_name.find("meta.config"); it != by_name.end()) {
    for (float f : it->second->values) {
      if (!(f >= 0.0f && f < 256.0f)) throw CorruptCheckpoint("meta.config holds a non-byte value");
      meta.config_text.push_back(static_cast<char>(static_cast<unsigned char>(f)));
    }
  }
  return meta;
}

std::map<std::string, const CheckpointEntry*> index_entries(const std::vector<CheckpointEntry>& entries) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) {
    if (!by_name.emplace(e.name, &e).second) throw CorruptCheckpoint("duplicate tensor '" + e.name + "'");
  }
  return by_name;
}

void copy_into(const CheckpointEntry& e, const Tensor& target) {
  if (e.shape != target.shape()) {
    throw CorruptCheckpoint("tensor '" + e.name + "' has shape " + shape_str(e.shape) +
                            ", model expects " + shape_str(target.shape()));
  }
  Tensor t = target;
  auto dst = t.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(e.values[i]);
}

void write_entries(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  const auto bytes = encode_checkpoint(entries);
  write_file_bytes(path, bytes);
}

}  // namespace

std::uint64_t crc64(std::span<const std::uint8_t> bytes) {
  boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true> crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

std::vector<std::uint8_t> encode_checkpoint(std::span<const CheckpointEntry> entries) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (shape_numel(e.shape) != e.values.size()) {
      throw ShapeMismatch("checkpoint entry '" + e.name + "' has " + std::to_string(e.values.size()) +
                          " values for shape " + shape_str(e.shape));
    }
    if (e.shape.size() > 255) throw ShapeMismatch("checkpoint entry rank above 255");
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u8(kDtypeF32);
    w.u8(static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.u32(static_cast<std::uint32_t>(d));
    w.bytes(e.values.data(), e.values.size() * sizeof(float));
  }
  const std::uint64_t crc = crc64(w.buffer());
  w.u64(crc);
  return std::move(w.buffer());
}

std::vector<CheckpointEntry> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof kMagic + 8 + 8) throw CorruptCheckpoint("file too short");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw CorruptCheckpoint("bad magic");
  const auto body = bytes.first(bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (crc64(body) != stored) throw CorruptCheckpoint("CRC-64 mismatch");

  Reader r(body);
  char magic[8];
  r.bytes(magic, 8);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CorruptCheckpoint("unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  std::vector<CheckpointEntry> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::uint32_t name_len = r.u32();
    if (name_len > r.remaining()) throw CorruptCheckpoint("name length past end of file");
    e.name.resize(name_len);
    r.bytes(e.name.data(), name_len);
    const std::uint8_t dtype = r.u8();
    if (dtype != kDtypeF32) throw CorruptCheckpoint("unknown dtype " + std::to_string(dtype));
    const std::uint8_t rank = r.u8();
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32();
      if (dim == 0) throw CorruptCheckpoint("zero extent in '" + e.name + "'");
      e.shape.push_back(dim);
      numel *= dim;
      if (numel * sizeof(float) > r.remaining()) throw CorruptCheckpoint("payload past end of file");
    }
    e.values.resize(numel);
    r.bytes(e.values.data(), numel * sizeof(float));
    out.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw CorruptCheckpoint("trailing bytes after last tensor");
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for '" + path + "'");
  return bytes;
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

void save_checkpoint(const MultimodalModel& model, const std::string& path, const CheckpointMeta& meta) {
  std::vector<CheckpointEntry> entries;
  for (const NamedTensor& p : model.trainable_parameters()) entries.push_back(entry_from(p.name, p.tensor));
  for (auto& m : meta_entries(meta)) entries.push_back(std::move(m));
  write_entries(path, entries);
}

CheckpointMeta load_checkpoint(const MultimodalModel& model, const std::string& path) {
  const auto entries = decode_checkpoint(read_file_bytes(path));
  const auto by_name = index_entries(entries);
  const auto params = model.trainable_parameters();
  for (const NamedTensor& p : params) {
    if (!by_name.contains(p.name)) throw CorruptCheckpoint("missing tensor '" + p.name + "'");
  }
  std::size_t meta_count = 0;
  for (const auto& [name, e] : by_name) {
    if (name.starts_with("meta.")) {
      ++meta_count;
    }
  }
  if (by_name.size() - meta_count != params.size()) {
    throw CorruptCheckpoint("checkpoint holds tensors the model does not have");
  }
  for (const NamedTensor& p : params) copy_into(*by_name.at(p.name), p.tensor);
  return meta_from(by_name);
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
  const auto entries = decode_checkpoint(read_file_bytes(path));
  return meta_from(index_entries(entries));
}

void save_merged_checkpoint(const MultimodalModel& model, std::span<const MergedAdapter> merged,
                            const std::string& path, const CheckpointMeta& meta) {
  if (merged.size() != model.llm.blocks.size()) {
    throw ShapeMismatch("need one merged adapter per LM block");
  }
  std::vector<CheckpointEntry> entries;
  for (const NamedTensor& p : model.trainable_parameters()) {
    if (p.name.starts_with("llm.")) continue;
    entries.push_back(entry_from(p.name, p.tensor));
  }
  for (std::size_t i = 0; i < merged.size(); ++i) {
    const Tensor& c = merged[i].combined;
    CheckpointEntry e{"llm.blocks." + std::to_string(i) + ".merged_delta", c.shape(), {}};
    const std::size_t n = c.rows();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t k = 0; k < n; ++k) {
        e.values.push_back(static_cast<float>(c.at(r, k) - (r == k ? 1.0 : 0.0)));
      }
    }
    entries.push_back(std::move(e));
  }
  entries.push_back({"meta.modality", {1}, {static_cast<float>(static_cast<int>(merged.front().modality))}});
  for (auto& m : meta_entries(meta)) entries.push_back(std::move(m));
  write_entries(path, entries);
}

MergedCheckpoint load_merged_checkpoint(const MultimodalModel& model, const std::string& path) {
  const auto entries = decode_checkpoint(read_file_bytes(path));
  const auto by_name = index_entries(entries);
  MergedCheckpoint out;
  for (const NamedTensor& p : model.trainable_parameters()) {
    if (p.name.starts_with("llm.")) continue;
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CorruptCheckpoint("missing tensor '" + p.name + "'");
    copy_into(*it->second, p.tensor);
  }
  auto mod = by_name.find("meta.modality");
  if (mod == by_name.end() || mod->second->values.size() != 1) {
    throw CorruptCheckpoint("merged checkpoint lacks meta.modality");
  }
  const float tag = mod->second->values[0];
  if (tag != 0.0f && tag != 1.0f) throw CorruptCheckpoint("bad modality tag");
  out.modality = tag == 0.0f ? ModalityTag::TextOnly : ModalityTag::TextImage;
  const std::size_t c = model.config.width;
  for (std::size_t i = 0; i < model.llm.blocks.size(); ++i) {
    const std::string name = "llm.blocks." + std::to_string(i) + ".merged_delta";
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CorruptCheckpoint("missing tensor '" + name + "'");
    if (it->second->shape != Shape{c, c}) throw CorruptCheckpoint("bad shape for '" + name + "'");
    Tensor combined({c, c});
    auto dst = combined.data();
    for (std::size_t k = 0; k < c * c; ++k) {
      dst[k] = static_cast<double>(it->second->values[k]) + (k / c == k % c ? 1.0 : 0.0);
    }
    out.merged.push_back({combined, out.modality});
  }
  out.meta = meta_from(by_name);
  return out;
}

void save_full_model(const MultimodalModel& model, const std::string& path) {
  std::vector<CheckpointEntry> entries;
  for (const NamedTensor& p : model.frozen_parameters()) entries.push_back(entry_from(p.name, p.tensor));
  for (const NamedTensor& p : model.trainable_parameters()) entries.push_back(entry_from(p.name, p.tensor));
  write_entries(path, entries);
}

std::string frozen_digest(const MultimodalModel& model) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 initialisation failed");
  }
  for (const NamedTensor& p : model.frozen_parameters()) {
    const auto d = p.tensor.data();
    EVP_DigestUpdate(ctx.get(), d.data(), d.size() * sizeof(double));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 15]);
  }
  return out;
}

}  // namespace mma
