#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "sepo/core/error.hpp"

namespace sepo::lm {

// Shared character-level vocabulary: three specials followed by content
// symbols. Oracle and policy always use the same ids.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kFirstContent = 3;
inline constexpr std::size_t kMaxVocab = 64;

inline constexpr std::string_view kAlphabet =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789!?";

inline std::size_t vocab_size_for(std::size_t alphabet_size) { return alphabet_size + kFirstContent; }

/// Human-readable rendering: '^' BOS, '$' EOS, '_' PAD.
inline std::string decode(const std::vector<int>& tokens) {
    std::string s;
    for (int t : tokens) {
        if (t == kPad) s += '_';
        else if (t == kBos) s += '^';
        else if (t == kEos) s += '$';
        else if (t >= kFirstContent && static_cast<std::size_t>(t - kFirstContent) < kAlphabet.size())
            s += kAlphabet[static_cast<std::size_t>(t - kFirstContent)];
        else s += '?';
    }
    return s;
}

inline std::vector<int> encode(std::string_view text) {
    std::vector<int> out;
    for (char c : text) {
        if (c == '_') out.push_back(kPad);
        else if (c == '^') out.push_back(kBos);
        else if (c == '$') out.push_back(kEos);
        else {
            const auto pos = kAlphabet.find(c);
            if (pos == std::string_view::npos) throw ValidationError(std::string("encode: symbol '") + c + "' not in alphabet");
            out.push_back(static_cast<int>(pos) + kFirstContent);
        }
    }
    return out;
}

} // namespace sepo::lm
