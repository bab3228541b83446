// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace qadapt {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;

/// Dense token table. Ids 0..2 are PAD, BOS and EOS.
class Vocabulary {
 public:
  /// `words` excludes the reserved tokens. Filler tokens pad the table up to
  /// `size` entries.
  Vocabulary(std::span<const std::string> words, std::size_t size);

  std::size_t size() const noexcept { return tokens_.size(); }
  bool contains(std::string_view token) const;
  int id(std::string_view token) const;
  const std::string& token(int id) const;

  /// Lowercase, whitespace split, then lookup.
  std::vector<int> encode(std::string_view text) const;
  /// Space-joined tokens; reserved ids are skipped.
  std::string decode(std::span<const int> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

/// Lowercase, whitespace-split tokens.
std::vector<std::string> tokenize(std::string_view text);

}  // namespace qadapt
