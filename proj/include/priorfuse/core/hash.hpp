#pragma once

#include <openssl/evp.h>

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "priorfuse/core/error.hpp"
#include "priorfuse/core/image.hpp"

namespace priorfuse {

// Incremental SHA-256, hex digest.
class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(const void* data, std::size_t n) {
    EVP_DigestUpdate(ctx_, data, n);
    return *this;
  }
  Sha256& update(std::string_view s) { return update(s.data(), s.size()); }

  // Length-prefixed, so concatenated fields cannot alias.
  Sha256& field(std::string_view s) {
    const std::uint64_t n = s.size();
    update(&n, sizeof(n));
    return update(s);
  }

  Sha256& image(const ImageBuffer& img) {
    const std::int32_t dims[3] = {img.height(), img.width(), img.channels()};
    update(dims, sizeof(dims));
    return update(img.data().data(), img.size() * sizeof(float));
  }

  std::string hex() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, digest, &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += kHex[digest[i] >> 4];
      out += kHex[digest[i] & 15];
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

inline std::string image_hash(const ImageBuffer& img) { return Sha256().image(img).hex(); }

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::vector<std::uint8_t> base64_decode(std::string_view text) {
  std::string clean;
  for (char c : text)
    if (c != '\n' && c != '\r' && c != ' ') clean += c;
  if (clean.size() % 4 != 0) throw InvalidArgument("base64 payload length is not a multiple of 4");
  std::vector<std::uint8_t> out(3 * clean.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()), static_cast<int>(clean.size()));
  if (n < 0) throw InvalidArgument("malformed base64 payload");
  std::size_t len = static_cast<std::size_t>(n);
  if (!clean.empty() && clean.back() == '=') --len;
  if (clean.size() > 1 && clean[clean.size() - 2] == '=') --len;
  out.resize(len);
  return out;
}

}  // namespace priorfuse
