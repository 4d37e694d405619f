#pragma once

// SAE checkpoint container:
//   "SAECKPT1" | u32 d_model | u32 d_sae | u8 variant (0 vanilla, 1 topk)
//   | 8-byte variant parameter (f64 l1_coeff or u64 k)
//   | f32 W_enc [d_model x d_sae] | f32 b_enc | f32 W_dec [d_sae x d_model] | f32 b_dec
// All little-endian, matrices row-major.

#include "saelab/sae.hpp"
#include "saelab/shard.hpp"

namespace saelab {

inline constexpr std::array<char, 8> kCheckpointMagic = {'S', 'A', 'E', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::size_t kCheckpointHeaderBytes = 8 + 4 + 4 + 1 + 8;

class CheckpointError : public Error {
 public:
  using Error::Error;
};

inline std::string encode_checkpoint(const SaeModel& sae) {
  const auto d = static_cast<std::uint32_t>(sae.d_model());
  const auto n = static_cast<std::uint32_t>(sae.d_sae());
  std::string out(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_u32(out, d);
  detail::put_u32(out, n);
  if (const auto* tk = std::get_if<TopK>(&sae.variant)) {
    out.push_back(1);
    detail::put_u64(out, static_cast<std::uint64_t>(tk->k));
  } else {
    out.push_back(0);
    detail::put_u64(out, std::bit_cast<std::uint64_t>(std::get<Vanilla>(sae.variant).l1_coeff));
  }
  detail::put_f32_block(out, {sae.w_enc.data(), static_cast<std::size_t>(sae.w_enc.size())});
  detail::put_f32_block(out, {sae.b_enc.data(), static_cast<std::size_t>(sae.b_enc.size())});
  detail::put_f32_block(out, {sae.w_dec.data(), static_cast<std::size_t>(sae.w_dec.size())});
  detail::put_f32_block(out, {sae.b_dec.data(), static_cast<std::size_t>(sae.b_dec.size())});
  return out;
}

inline SaeModel decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() ||
      std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0)
    throw CheckpointError("bad magic: not an SAE checkpoint");
  if (bytes.size() < kCheckpointHeaderBytes) throw CheckpointError("truncated checkpoint header");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const Index d = detail::get_u32(p + 8);
  const Index n = detail::get_u32(p + 12);
  const auto tag = p[16];
  const auto param = detail::get_u64(p + 17);
  SaeModel sae = zero_sae<float>(d, n);
  if (tag == 1) sae.variant = TopK{static_cast<int>(param)};
  else if (tag == 0) sae.variant = Vanilla{std::bit_cast<double>(param)};
  else throw CheckpointError("unknown variant tag " + std::to_string(tag));
  const auto want = static_cast<std::size_t>(2 * d * n + n + d) * 4;
  if (bytes.size() - kCheckpointHeaderBytes != want)
    throw CheckpointError("checkpoint payload is " + std::to_string(bytes.size() - kCheckpointHeaderBytes) +
                          " bytes, expected " + std::to_string(want));
  const auto* q = p + kCheckpointHeaderBytes;
  const auto take = [&q](auto& tensor) {
    detail::get_f32_block(q, {tensor.data(), static_cast<std::size_t>(tensor.size())});
    q += tensor.size() * 4;
  };
  take(sae.w_enc);
  take(sae.b_enc);
  take(sae.w_dec);
  take(sae.b_dec);
  return sae;
}

inline std::size_t write_checkpoint(const SaeModel& sae, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(sae);
  detail::write_file(path, bytes);
  return bytes.size();
}

inline SaeModel read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

}  // namespace saelab
