#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "embedkit/errors.hpp"

namespace embedkit {

// Lowercased whitespace word splitting; the only tokenization rule used
// anywhere in the toolkit.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) {
        words.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

// Fixed token table; line number in the vocab file is the token id.
class Vocab {
 public:
  static constexpr const char* kPad = "[PAD]";
  static constexpr const char* kUnk = "[UNK]";
  static constexpr const char* kCls = "[CLS]";
  static constexpr const char* kSep = "[SEP]";
  static constexpr const char* kMask = "[MASK]";

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!map_.emplace(tokens_[i], i).second) {
        throw DataError("vocab: duplicate token '" + tokens_[i] + "'");
      }
    }
    pad_ = require(kPad);
    unk_ = require(kUnk);
    cls_ = require(kCls);
    sep_ = require(kSep);
    mask_ = require(kMask);
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t pad_id() const { return pad_; }
  std::size_t unk_id() const { return unk_; }
  std::size_t cls_id() const { return cls_; }
  std::size_t sep_id() const { return sep_; }
  std::size_t mask_id() const { return mask_; }

  bool is_special(std::size_t id) const {
    return id == pad_ || id == unk_ || id == cls_ || id == sep_ || id == mask_;
  }

  std::size_t id_of(const std::string& token) const {
    auto it = map_.find(token);
    return it == map_.end() ? unk_ : it->second;
  }

  const std::string& token_of(std::size_t id) const {
    if (id >= tokens_.size()) throw DataError("vocab: id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  // Builds a vocab from raw texts: specials first, then words by descending
  // frequency with lexicographic tie-break, capped at max_size.
  static Vocab build(const std::vector<std::string>& texts, std::size_t max_size = 2048) {
    std::map<std::string, std::size_t> freq;
    for (const auto& t : texts)
      for (const auto& w : split_words(t)) ++freq[w];
    std::vector<std::pair<std::string, std::size_t>> by_freq(freq.begin(), freq.end());
    std::sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    std::vector<std::string> tokens = {kPad, kUnk, kCls, kSep, kMask};
    if (max_size < tokens.size() + 1) {
      throw ConfigError("vocab: max_size " + std::to_string(max_size) + " too small");
    }
    for (const auto& [w, n] : by_freq) {
      if (tokens.size() >= max_size) break;
      tokens.push_back(w);
    }
    return Vocab(std::move(tokens));
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("vocab: cannot open " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    if (tokens.empty()) throw DataError("vocab: empty file " + path);
    return Vocab(std::move(tokens));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("vocab: cannot write " + path);
    for (const auto& t : tokens_) out << t << '\n';
    if (!out) throw IoError("vocab: write failed for " + path);
  }

 private:
  std::size_t require(const char* token) const {
    auto it = map_.find(token);
    if (it == map_.end()) throw DataError(std::string("vocab: missing special token ") + token);
    return it->second;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> map_;
  std::size_t pad_ = 0, unk_ = 0, cls_ = 0, sep_ = 0, mask_ = 0;
};

}  // namespace embedkit
