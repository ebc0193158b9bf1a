#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "ebats/common.hpp"
#include "ebats/vocab.hpp"

namespace ebats::ctc {

/// Best-path CTC decode: per-frame argmax, collapse consecutive repeats,
/// delete blanks, map the word separator to a space.
inline std::string greedy_decode(const Matrix& posteriors, const Vocab& vocab) {
  std::string out;
  int prev = -1;
  for (Eigen::Index i = 0; i < posteriors.rows(); ++i) {
    int arg = 0;
    posteriors.row(i).maxCoeff(&arg);
    if (arg != prev && arg != vocab.blank_index) {
      if (arg == vocab.word_sep_index)
        out += ' ';
      else
        out += vocab.tokens[static_cast<std::size_t>(arg)];
    }
    prev = arg;
  }
  return out;
}

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(text);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

/// Levenshtein distance over whole words, unit costs.
inline std::int64_t word_edit_distance(const std::vector<std::string>& hyp,
                                       const std::vector<std::string>& ref) {
  const std::size_t n = hyp.size(), m = ref.size();
  std::vector<std::int64_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<std::int64_t>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<std::int64_t>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      const std::int64_t sub = prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

inline std::int64_t word_edit_distance(const std::string& hypothesis,
                                       const std::string& reference) {
  return word_edit_distance(split_words(hypothesis), split_words(reference));
}

inline double word_error_rate(const std::string& hypothesis,
                              const std::string& reference) {
  const auto ref = split_words(reference);
  if (ref.empty())
    throw std::invalid_argument("word_error_rate: reference has no words");
  const auto hyp = split_words(hypothesis);
  return static_cast<double>(word_edit_distance(hyp, ref)) /
         static_cast<double>(ref.size());
}

}  // namespace ebats::ctc
