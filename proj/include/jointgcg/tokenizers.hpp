#pragma once

#include "jointgcg/core.hpp"

#include <algorithm>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace jointgcg {

namespace detail {

/// Byte length of the UTF-8 sequence starting with `lead`; 0 when invalid.
inline std::size_t utf8_sequence_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  if ((lead >> 3) == 0x1e) return 4;
  return 0;
}

inline bool is_ascii(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return static_cast<unsigned char>(c) < 128; });
}

inline bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

}  // namespace detail

/// Ordered, duplicate-free token list. Line order of the backing file defines ids.
class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> entries) : entries_(std::move(entries)) {
    ascii_mask_.reserve(entries_.size());
    index_.reserve(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      if (e.empty()) fail(ErrorCode::InvalidArgument, "empty vocabulary entry at " + std::to_string(i));
      if (!index_.emplace(e, static_cast<TokenId>(i)).second) {
        fail(ErrorCode::InvalidArgument, "duplicate vocabulary entry '" + e + "'");
      }
      ascii_mask_.push_back(detail::is_ascii(e));
      max_entry_bytes_ = std::max(max_entry_bytes_, e.size());
    }
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open vocabulary file " + path);
    std::vector<std::string> entries;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      entries.push_back(line);
    }
    return Vocabulary(std::move(entries));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot write vocabulary file " + path);
    for (const auto& e : entries_) out << e << '\n';
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::string>& entries() const { return entries_; }
  const std::vector<bool>& ascii_mask() const { return ascii_mask_; }
  std::size_t max_entry_bytes() const { return max_entry_bytes_; }

  bool valid(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < entries_.size(); }

  const std::string& entry(TokenId id) const {
    if (!valid(id)) fail(ErrorCode::IdOutOfRange, "token id " + std::to_string(id));
    return entries_[static_cast<std::size_t>(id)];
  }

  bool is_ascii(TokenId id) const { return ascii_mask_.at(static_cast<std::size_t>(id)); }

  std::optional<TokenId> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenId require(std::string_view token) const {
    auto id = find(token);
    if (!id) fail(ErrorCode::TokenMissing, "token '" + std::string(token) + "' not in vocabulary");
    return *id;
  }

 private:
  std::vector<std::string> entries_;
  std::vector<bool> ascii_mask_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_entry_bytes_ = 0;
};

/// Printable ASCII characters 0x20..0x7e, the fallback entries of greedy vocabularies.
inline std::vector<std::string> printable_ascii_characters() {
  std::vector<std::string> out;
  for (char c = 0x20; c < 0x7f; ++c) out.emplace_back(1, c);
  return out;
}

struct TokenizationResult {
  TokenIds token_ids;
  std::vector<Span> offsets;

  std::size_t size() const { return token_ids.size(); }
};

enum class TokenizerKind { Character, Whitespace, GreedyLongestMatch };

inline const char* to_string(TokenizerKind kind) {
  switch (kind) {
    case TokenizerKind::Character: return "character";
    case TokenizerKind::Whitespace: return "whitespace";
    case TokenizerKind::GreedyLongestMatch: return "greedy";
  }
  return "?";
}

inline TokenizerKind parse_tokenizer_kind(std::string_view name) {
  if (name == "character") return TokenizerKind::Character;
  if (name == "whitespace") return TokenizerKind::Whitespace;
  if (name == "greedy") return TokenizerKind::GreedyLongestMatch;
  fail(ErrorCode::InvalidArgument, "unknown tokenizer kind '" + std::string(name) + "'");
}

/// Immutable tokenizer over a fixed vocabulary. Offsets are byte positions in
/// the input; the whitespace tokenizer leaves separators uncovered.
class Tokenizer {
 public:
  Tokenizer(TokenizerKind kind, Vocabulary vocabulary) : kind_(kind), vocab_(std::move(vocabulary)) {}

  TokenizerKind kind() const { return kind_; }
  const Vocabulary& vocabulary() const { return vocab_; }

  TokenizationResult tokenize(std::string_view text) const {
    switch (kind_) {
      case TokenizerKind::Character: return tokenize_characters(text);
      case TokenizerKind::Whitespace: return tokenize_whitespace(text);
      case TokenizerKind::GreedyLongestMatch: return tokenize_greedy(text);
    }
    return {};
  }

  std::string detokenize(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (kind_ == TokenizerKind::Whitespace && i > 0) out.push_back(' ');
      out += vocab_.entry(ids[i]);
    }
    return out;
  }

  /// True when `ids` survive a detokenize/tokenize round trip unchanged.
  bool round_trips(std::span<const TokenId> ids) const {
    try {
      const auto again = tokenize(detokenize(ids));
      return std::equal(again.token_ids.begin(), again.token_ids.end(), ids.begin(), ids.end());
    } catch (const Error&) {
      return false;
    }
  }

 private:
  TokenizationResult tokenize_characters(std::string_view text) const {
    TokenizationResult r;
    std::size_t i = 0;
    while (i < text.size()) {
      const std::size_t len = detail::utf8_sequence_length(static_cast<unsigned char>(text[i]));
      if (len == 0 || i + len > text.size()) {
        fail(ErrorCode::InvalidArgument, "invalid UTF-8 at byte " + std::to_string(i));
      }
      auto id = vocab_.find(text.substr(i, len));
      if (!id) fail(ErrorCode::UnknownToken, "character '" + std::string(text.substr(i, len)) + "'");
      r.token_ids.push_back(*id);
      r.offsets.push_back({i, i + len});
      i += len;
    }
    return r;
  }

  TokenizationResult tokenize_whitespace(std::string_view text) const {
    TokenizationResult r;
    std::size_t i = 0;
    while (i < text.size()) {
      if (detail::is_space(text[i])) {
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j < text.size() && !detail::is_space(text[j])) ++j;
      auto id = vocab_.find(text.substr(i, j - i));
      if (!id) fail(ErrorCode::UnknownToken, "word '" + std::string(text.substr(i, j - i)) + "'");
      r.token_ids.push_back(*id);
      r.offsets.push_back({i, j});
      i = j;
    }
    return r;
  }

  TokenizationResult tokenize_greedy(std::string_view text) const {
    TokenizationResult r;
    std::size_t i = 0;
    while (i < text.size()) {
      std::size_t len = std::min(vocab_.max_entry_bytes(), text.size() - i);
      std::optional<TokenId> hit;
      for (; len > 0; --len) {
        hit = vocab_.find(text.substr(i, len));
        if (hit) break;
      }
      if (!hit) fail(ErrorCode::UnknownToken, "no vocabulary entry covers byte " + std::to_string(i));
      r.token_ids.push_back(*hit);
      r.offsets.push_back({i, i + len});
      i += len;
    }
    return r;
  }

  TokenizerKind kind_;
  Vocabulary vocab_;
};

/// String-equal entries of two vocabularies as (index in a, index in b), sorted by a.
inline std::vector<std::pair<TokenId, TokenId>> shared_tokens(const Vocabulary& a, const Vocabulary& b) {
  std::vector<std::pair<TokenId, TokenId>> out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (auto j = b.find(a.entries()[i])) out.emplace_back(static_cast<TokenId>(i), *j);
  }
  return out;
}

}  // namespace jointgcg
