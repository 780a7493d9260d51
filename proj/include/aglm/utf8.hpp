// Strict UTF-8 validation and lossy byte-sequence repair.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace aglm::utf8 {

namespace detail {

inline bool is_cont(unsigned char b) { return (b & 0xC0) == 0x80; }

// Returns the length of the valid sequence starting at s[i], or 0 if invalid.
// Rejects overlong forms, surrogates, and code points above U+10FFFF.
inline std::size_t sequence_length(std::string_view s, std::size_t i) {
    unsigned char b0 = static_cast<unsigned char>(s[i]);
    if (b0 < 0x80) return 1;
    if (b0 < 0xC2) return 0;  // continuation byte or overlong lead
    auto have = [&](std::size_t k) { return i + k < s.size(); };
    auto at = [&](std::size_t k) { return static_cast<unsigned char>(s[i + k]); };
    if (b0 <= 0xDF) {
        return (have(1) && is_cont(at(1))) ? 2 : 0;
    }
    if (b0 <= 0xEF) {
        if (!have(2) || !is_cont(at(2))) return 0;
        unsigned char b1 = have(1) ? at(1) : 0;
        if (b0 == 0xE0 && !(b1 >= 0xA0 && b1 <= 0xBF)) return 0;
        if (b0 == 0xED && !(b1 >= 0x80 && b1 <= 0x9F)) return 0;  // no surrogates
        if (b0 != 0xE0 && b0 != 0xED && !is_cont(b1)) return 0;
        return 3;
    }
    if (b0 <= 0xF4) {
        if (!have(3) || !is_cont(at(2)) || !is_cont(at(3))) return 0;
        unsigned char b1 = have(1) ? at(1) : 0;
        if (b0 == 0xF0 && !(b1 >= 0x90 && b1 <= 0xBF)) return 0;
        if (b0 == 0xF4 && !(b1 >= 0x80 && b1 <= 0x8F)) return 0;
        if (b0 != 0xF0 && b0 != 0xF4 && !is_cont(b1)) return 0;
        return 4;
    }
    return 0;
}

}  // namespace detail

// Byte offset of the first invalid sequence, or nullopt for valid input.
inline std::optional<std::size_t> find_invalid(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size()) {
        std::size_t len = detail::sequence_length(s, i);
        if (len == 0) return i;
        i += len;
    }
    return std::nullopt;
}

inline bool is_valid(std::string_view s) { return !find_invalid(s).has_value(); }

// Replaces each invalid byte with U+FFFD and keeps everything else.
inline std::string sanitize(std::string_view s) {
    static constexpr std::string_view kReplacement = "\xEF\xBF\xBD";
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        std::size_t len = detail::sequence_length(s, i);
        if (len == 0) {
            out += kReplacement;
            i += 1;
        } else {
            out.append(s.substr(i, len));
            i += len;
        }
    }
    return out;
}

// Appends the UTF-8 encoding of a Unicode scalar value.
inline void encode(char32_t cp, std::string& out) {
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xF0 | (cp >> 18));
        out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
}

}  // namespace aglm::utf8
