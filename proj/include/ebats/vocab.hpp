#pragma once

#include <string>
#include <vector>

#include "ebats/common.hpp"

namespace ebats {

/// Token inventory of the CTC head: 26 alphabet classes plus six special
/// classes (blank/pad, sentence markers, unknown, word separator,
/// apostrophe), 32 in total.
struct Vocab {
  std::vector<std::string> tokens;
  int blank_index = 0;
  int word_sep_index = 4;

  int size() const { return static_cast<int>(tokens.size()); }

  bool is_blank(int v) const { return v == blank_index; }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tokens) {
      h = fnv1a64(t, h);
      h = fnv1a64("\x1f", h);
    }
    h = fnv1a64(&blank_index, sizeof(blank_index), h);
    return h;
  }
};

inline Vocab default_vocab() {
  Vocab v;
  v.tokens = {"<pad>", "<s>", "</s>", "<unk>", "|", "'"};
  for (char c = 'a'; c <= 'z'; ++c) v.tokens.emplace_back(1, c);
  v.blank_index = 0;
  v.word_sep_index = 4;
  return v;
}

/// Index of a lowercase letter token.
inline int letter_index(char c) { return 6 + (c - 'a'); }

}  // namespace ebats
