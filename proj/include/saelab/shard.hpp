#pragma once

// Binary activation shard: fixed little-endian header, length-prefixed JSON
// metadata block, then a raw float32 payload laid out [sample][token][dim].

#include "saelab/common.hpp"

#include "json.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string_view>
#include <unordered_set>

namespace saelab {

inline constexpr std::array<char, 8> kShardMagic = {'S', 'A', 'E', 'S', 'H', 'A', 'R', 'D'};
inline constexpr std::uint32_t kShardVersion = 1;
/// magic + version + n_samples + n_tokens + d_model + layer_id + sublayer + meta length
inline constexpr std::size_t kShardFixedHeaderBytes = 8 + 4 * 5 + 1 + 8;

enum class Sublayer : std::uint8_t { resid_post = 0, mlp_out = 1 };
enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline std::string_view to_string(Sublayer s) {
  return s == Sublayer::resid_post ? "resid_post" : "mlp_out";
}

enum class ShardErrorKind {
  io,
  bad_magic,
  version_mismatch,
  truncated_header,
  truncated_meta,
  meta_mismatch,
  truncated_payload,
  trailing_bytes,
  non_finite,
};

class ShardError : public Error {
 public:
  ShardError(ShardErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  ShardErrorKind kind() const noexcept { return kind_; }

 private:
  ShardErrorKind kind_;
};

#define SAELAB_SHARD_ERROR(Name, Kind)                                          \
  class Name : public ShardError {                                             \
   public:                                                                     \
    explicit Name(const std::string& what) : ShardError(ShardErrorKind::Kind, what) {} \
  };
SAELAB_SHARD_ERROR(ShardIoError, io)
SAELAB_SHARD_ERROR(BadMagicError, bad_magic)
SAELAB_SHARD_ERROR(VersionMismatchError, version_mismatch)
SAELAB_SHARD_ERROR(TruncatedHeaderError, truncated_header)
SAELAB_SHARD_ERROR(TruncatedMetaError, truncated_meta)
SAELAB_SHARD_ERROR(MetaMismatchError, meta_mismatch)
SAELAB_SHARD_ERROR(TruncatedPayloadError, truncated_payload)
SAELAB_SHARD_ERROR(TrailingBytesError, trailing_bytes)
SAELAB_SHARD_ERROR(NonFiniteError, non_finite)
#undef SAELAB_SHARD_ERROR

struct ShardHeader {
  std::uint32_t version = kShardVersion;
  std::uint32_t n_samples = 0;
  std::uint32_t n_tokens = 0;  // CLS + spatial patches
  std::uint32_t d_model = 0;
  std::uint32_t layer_id = 0;
  Sublayer sublayer = Sublayer::resid_post;

  std::uint64_t payload_floats() const {
    return std::uint64_t{n_samples} * n_tokens * d_model;
  }
  bool operator==(const ShardHeader&) const = default;
};

struct SampleMeta {
  std::uint64_t sample_id = 0;
  std::int64_t class_label = 0;
  bool attribute_flag = false;
  Split split = Split::train;
  std::uint16_t grid_rows = 0;
  std::uint16_t grid_cols = 0;

  bool operator==(const SampleMeta&) const = default;
};

/// Dense residual activations [n_samples, n_tokens, d_model] with per-sample metadata.
/// Token 0 is CLS; tokens 1.. are spatial patches in row-major order.
struct ActivationDataset {
  ShardHeader header;
  std::vector<float> activations;
  std::vector<SampleMeta> meta;
  /// Free-form provenance carried in the metadata block (preprocessing, template, ...).
  nlohmann::json attrs = nlohmann::json::object();

  Index n_samples() const { return header.n_samples; }
  Index n_tokens() const { return header.n_tokens; }
  Index d_model() const { return header.d_model; }

  Eigen::Map<const RowVecF> token(Index sample, Index tok) const {
    const auto offset = (sample * n_tokens() + tok) * d_model();
    return Eigen::Map<const RowVecF>(activations.data() + offset, d_model());
  }
  Eigen::Map<RowVecF> token(Index sample, Index tok) {
    const auto offset = (sample * n_tokens() + tok) * d_model();
    return Eigen::Map<RowVecF>(activations.data() + offset, d_model());
  }
  /// [n_tokens, d_model] view of one sample.
  Eigen::Map<const MatrixF> sample(Index s) const {
    return Eigen::Map<const MatrixF>(activations.data() + s * n_tokens() * d_model(), n_tokens(),
                                     d_model());
  }

  bool operator==(const ActivationDataset& o) const {
    return header == o.header && meta == o.meta && attrs == o.attrs &&
           activations.size() == o.activations.size() &&
           std::memcmp(activations.data(), o.activations.data(),
                       activations.size() * sizeof(float)) == 0;
  }
};

/// Checks every dataset invariant; throws the matching ShardError subclass.
inline void validate(const ActivationDataset& ds) {
  const auto& h = ds.header;
  if (h.version != kShardVersion)
    throw VersionMismatchError("shard version " + std::to_string(h.version) + " != " +
                               std::to_string(kShardVersion));
  if (ds.activations.size() != h.payload_floats())
    throw MetaMismatchError("activation count " + std::to_string(ds.activations.size()) +
                            " does not match header " + std::to_string(h.payload_floats()));
  if (ds.meta.size() != h.n_samples)
    throw MetaMismatchError("meta has " + std::to_string(ds.meta.size()) +
                            " entries, header says " + std::to_string(h.n_samples));
  std::unordered_set<std::uint64_t> ids;
  for (const auto& m : ds.meta) {
    if (std::uint32_t{m.grid_rows} * m.grid_cols + 1 != h.n_tokens)
      throw MetaMismatchError("grid " + std::to_string(m.grid_rows) + "x" +
                              std::to_string(m.grid_cols) + " + CLS != n_tokens " +
                              std::to_string(h.n_tokens));
    if (!ids.insert(m.sample_id).second)
      throw MetaMismatchError("duplicate sample_id " + std::to_string(m.sample_id));
  }
  for (std::size_t i = 0; i < ds.activations.size(); ++i)
    if (!std::isfinite(ds.activations[i]))
      throw NonFiniteError("non-finite activation at flat index " + std::to_string(i));
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{p[i]} << (8 * i);
  return v;
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{p[i]} << (8 * i);
  return v;
}

inline void put_f32_block(std::string& out, std::span<const float> values) {
  const auto start = out.size();
  out.resize(start + values.size() * 4);
  auto* dst = reinterpret_cast<unsigned char*>(out.data() + start);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) dst[4 * i + b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xFF);
  }
}
inline void get_f32_block(const unsigned char* src, std::span<float> values) {
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = std::bit_cast<float>(get_u32(src + 4 * i));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ShardIoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw ShardIoError("read failed for " + path.string());
  return bytes;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ShardIoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ShardIoError("write failed for " + path.string());
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw MetaMismatchError("unknown split tag '" + s + "'");
}

}  // namespace detail

inline nlohmann::json meta_to_json(const ActivationDataset& ds) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& m : ds.meta) {
    samples.push_back({{"sample_id", m.sample_id},
                       {"class_label", m.class_label},
                       {"attribute_flag", m.attribute_flag},
                       {"split", std::string(to_string(m.split))},
                       {"grid_rows", m.grid_rows},
                       {"grid_cols", m.grid_cols}});
  }
  return {{"format", "saeshard-meta"}, {"version", kShardVersion}, {"samples", samples},
          {"attrs", ds.attrs}};
}

/// Serializes a validated dataset to the shard byte layout.
inline std::string encode_shard(const ActivationDataset& ds) {
  validate(ds);
  const std::string meta = meta_to_json(ds).dump();
  std::string out;
  out.reserve(kShardFixedHeaderBytes + meta.size() + ds.activations.size() * 4);
  out.append(kShardMagic.data(), kShardMagic.size());
  detail::put_u32(out, ds.header.version);
  detail::put_u32(out, ds.header.n_samples);
  detail::put_u32(out, ds.header.n_tokens);
  detail::put_u32(out, ds.header.d_model);
  detail::put_u32(out, ds.header.layer_id);
  out.push_back(static_cast<char>(ds.header.sublayer));
  detail::put_u64(out, meta.size());
  out += meta;
  detail::put_f32_block(out, ds.activations);
  return out;
}

inline ActivationDataset decode_shard(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kShardMagic.size() ||
      std::memcmp(bytes.data(), kShardMagic.data(), kShardMagic.size()) != 0)
    throw BadMagicError("bad magic: not an activation shard");
  if (bytes.size() < kShardFixedHeaderBytes)
    throw TruncatedHeaderError("truncated header: " + std::to_string(bytes.size()) + " bytes");

  ActivationDataset ds;
  auto& h = ds.header;
  h.version = detail::get_u32(p + 8);
  if (h.version != kShardVersion)
    throw VersionMismatchError("version mismatch: file has " + std::to_string(h.version) +
                               ", reader supports " + std::to_string(kShardVersion));
  h.n_samples = detail::get_u32(p + 12);
  h.n_tokens = detail::get_u32(p + 16);
  h.d_model = detail::get_u32(p + 20);
  h.layer_id = detail::get_u32(p + 24);
  const auto sub = p[28];
  if (sub > 1) throw MetaMismatchError("unknown sublayer tag " + std::to_string(sub));
  h.sublayer = static_cast<Sublayer>(sub);
  const auto meta_len = detail::get_u64(p + 29);

  std::size_t pos = kShardFixedHeaderBytes;
  if (meta_len > bytes.size() - pos)
    throw TruncatedMetaError("truncated metadata block: need " + std::to_string(meta_len) +
                             " bytes, have " + std::to_string(bytes.size() - pos));
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bytes.substr(pos, meta_len));
    if (meta.at("format") != "saeshard-meta")
      throw MetaMismatchError("metadata block has wrong format tag");
    if (meta.at("version").get<std::uint32_t>() != kShardVersion)
      throw VersionMismatchError("version mismatch in metadata block");
    for (const auto& s : meta.at("samples")) {
      SampleMeta m;
      m.sample_id = s.at("sample_id").get<std::uint64_t>();
      m.class_label = s.at("class_label").get<std::int64_t>();
      m.attribute_flag = s.at("attribute_flag").get<bool>();
      m.split = detail::split_from_string(s.at("split").get<std::string>());
      m.grid_rows = s.at("grid_rows").get<std::uint16_t>();
      m.grid_cols = s.at("grid_cols").get<std::uint16_t>();
      ds.meta.push_back(m);
    }
    if (meta.contains("attrs")) ds.attrs = meta.at("attrs");
  } catch (const nlohmann::json::exception& e) {
    throw MetaMismatchError(std::string("malformed metadata block: ") + e.what());
  }
  pos += meta_len;

  const auto want = h.payload_floats() * 4;
  const auto have = bytes.size() - pos;
  if (have < want)
    throw TruncatedPayloadError("truncated payload: expected " + std::to_string(want) +
                                " bytes, found " + std::to_string(have));
  if (have > want)
    throw TrailingBytesError(std::to_string(have - want) + " unexpected bytes after payload");
  ds.activations.resize(h.payload_floats());
  detail::get_f32_block(p + pos, ds.activations);
  validate(ds);
  return ds;
}

/// Writes the dataset to `path`; returns the number of bytes written.
inline std::size_t write_shard(const ActivationDataset& ds, const std::filesystem::path& path) {
  const auto bytes = encode_shard(ds);
  detail::write_file(path, bytes);
  return bytes.size();
}

inline ActivationDataset read_shard(const std::filesystem::path& path) {
  return decode_shard(detail::read_file(path));
}

/// Builds an empty dataset with consistent header for `n_samples` samples on a grid.
inline ActivationDataset make_dataset(std::uint32_t n_samples, std::uint16_t grid_rows,
                                      std::uint16_t grid_cols, std::uint32_t d_model,
                                      std::uint32_t layer_id = 0,
                                      Sublayer sublayer = Sublayer::resid_post) {
  ActivationDataset ds;
  ds.header.n_samples = n_samples;
  ds.header.n_tokens = std::uint32_t{grid_rows} * grid_cols + 1;
  ds.header.d_model = d_model;
  ds.header.layer_id = layer_id;
  ds.header.sublayer = sublayer;
  ds.activations.assign(ds.header.payload_floats(), 0.0f);
  ds.meta.resize(n_samples);
  for (std::uint32_t i = 0; i < n_samples; ++i) {
    ds.meta[i].sample_id = i;
    ds.meta[i].grid_rows = grid_rows;
    ds.meta[i].grid_cols = grid_cols;
  }
  return ds;
}

/// Keeps the samples for which pred(meta) holds, in their original order.
template <class Pred>
ActivationDataset filter_samples(const ActivationDataset& ds, Pred&& pred) {
  ActivationDataset out;
  out.header = ds.header;
  out.attrs = ds.attrs;
  const auto stride = static_cast<std::size_t>(ds.n_tokens() * ds.d_model());
  for (Index s = 0; s < ds.n_samples(); ++s) {
    if (!pred(ds.meta[s])) continue;
    out.meta.push_back(ds.meta[s]);
    const auto* src = ds.activations.data() + s * stride;
    out.activations.insert(out.activations.end(), src, src + stride);
  }
  out.header.n_samples = static_cast<std::uint32_t>(out.meta.size());
  return out;
}

inline ActivationDataset filter_split(const ActivationDataset& ds, Split split) {
  return filter_samples(ds, [split](const SampleMeta& m) { return m.split == split; });
}

}  // namespace saelab
