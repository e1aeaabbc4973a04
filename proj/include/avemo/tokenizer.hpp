#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "avemo/error.hpp"

namespace avemo {

/// Byte-level tokenizer: ids 0..255 are raw bytes, followed by the special
/// tokens. Ordinary text never encodes to a special id; only
/// encode_with_specials() maps the reserved marker strings.
class Tokenizer {
 public:
  enum Special : int {
    kBos = 256,
    kEos,
    kPad,
    kAudioBegin,
    kAudioEnd,
    kVideoBegin,
    kVideoEnd,
    kEmoBegin,
    kEmoEnd,
  };
  static constexpr int kVocabSize = 265;

  static constexpr std::array<std::string_view, 9> kMarkers{
      "<|bos|>", "<|eos|>", "<|pad|>", "<|audio|>", "<|/audio|>", "<|video|>", "<|/video|>", "<|emo|>", "<|/emo|>"};

  int vocab_size() const { return kVocabSize; }
  static bool is_special(int id) { return id >= kBos && id < kVocabSize; }
  static std::string_view marker(int id) { return kMarkers[static_cast<std::size_t>(id - kBos)]; }

  std::vector<int> encode_text(std::string_view s) const {
    std::vector<int> out;
    out.reserve(s.size());
    for (unsigned char c : s) out.push_back(c);
    return out;
  }

  std::vector<int> encode_with_specials(std::string_view s) const {
    std::vector<int> out;
    std::size_t i = 0;
    while (i < s.size()) {
      bool matched = false;
      if (s[i] == '<') {
        for (std::size_t k = 0; k < kMarkers.size(); ++k) {
          if (s.substr(i, kMarkers[k].size()) == kMarkers[k]) {
            out.push_back(kBos + static_cast<int>(k));
            i += kMarkers[k].size();
            matched = true;
            break;
          }
        }
      }
      if (!matched) out.push_back(static_cast<unsigned char>(s[i++]));
    }
    return out;
  }

  /// Bytes verbatim, specials as their marker strings.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id >= 0 && id < 256) {
        out.push_back(static_cast<char>(id));
      } else if (is_special(id)) {
        out += marker(id);
      } else {
        fail(ErrorCode::kShapeMismatch, "token id out of range: " + std::to_string(id));
      }
    }
    return out;
  }

  nlohmann::json spec() const {
    nlohmann::json j;
    j["kind"] = "byte";
    j["vocab_size"] = kVocabSize;
    for (std::size_t k = 0; k < kMarkers.size(); ++k) j["specials"][std::string(kMarkers[k])] = kBos + static_cast<int>(k);
    return j;
  }
};

/// Replaces every byte that is not part of a well-formed UTF-8 sequence
/// with U+FFFD. Generated byte streams are not guaranteed to be text.
inline std::string sanitize_utf8(std::string_view in) {
  std::string out;
  out.reserve(in.size());
  std::size_t i = 0;
  while (i < in.size()) {
    const auto c = static_cast<unsigned char>(in[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
    bool ok = len > 0 && i + len <= in.size();
    for (std::size_t k = 1; ok && k < len; ++k) ok = (static_cast<unsigned char>(in[i + k]) >> 6) == 0x2;
    if (ok && len > 1) {
      std::uint32_t cp = c & (0xFF >> (len + 1));
      for (std::size_t k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(in[i + k]) & 0x3F);
      const std::uint32_t min[] = {0, 0, 0x80, 0x800, 0x10000};
      ok = cp >= min[len] && cp <= 0x10FFFF && !(cp >= 0xD800 && cp <= 0xDFFF);
    }
    if (ok) {
      out.append(in.substr(i, len));
      i += len;
    } else {
      out += "\xEF\xBF\xBD";
      ++i;
    }
  }
  return out;
}

}  // namespace avemo
