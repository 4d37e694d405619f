#pragma once

// Run manifests: resolved config plus SHA-256 of every input and output file,
// keyed by path relative to the run directory. No timestamps, so reruns with
// the same config produce byte-identical manifests.
// Needs OpenSSL libcrypto at link time.

#include "saelab/common.hpp"

#include "json.hpp"

#include <openssl/evp.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>

namespace saelab {

namespace detail {
inline std::string hex(const unsigned char* md, unsigned int len) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += digits[md[i] >> 4];
    out += digits[md[i] & 0xF];
  }
  return out;
}
}  // namespace detail

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  return detail::hex(md, len);
}

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  return detail::hex(md, len);
}

class Manifest {
 public:
  Manifest(std::string command, std::filesystem::path root) : command_(std::move(command)), root_(std::move(root)) {}

  void set(const std::string& key, nlohmann::json value) { extra_[key] = std::move(value); }
  void add_input(const std::filesystem::path& p) { inputs_[relative(p)] = sha256_file(p); }
  void add_output(const std::filesystem::path& p) { outputs_[relative(p)] = sha256_file(p); }

  nlohmann::json to_json() const {
    nlohmann::json j = extra_;
    j["command"] = command_;
    j["inputs"] = inputs_;
    j["outputs"] = outputs_;
    return j;
  }

  /// Writes <root>/manifests/<command>.json and returns its path.
  std::filesystem::path write() const {
    const auto dir = root_ / "manifests";
    std::filesystem::create_directories(dir);
    const auto path = dir / (command_ + ".json");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << to_json().dump(2) << "\n";
    return path;
  }

 private:
  std::string relative(const std::filesystem::path& p) const {
    return std::filesystem::relative(p, root_).generic_string();
  }

  std::string command_;
  std::filesystem::path root_;
  nlohmann::json extra_ = nlohmann::json::object();
  std::map<std::string, std::string> inputs_, outputs_;
};

}  // namespace saelab
