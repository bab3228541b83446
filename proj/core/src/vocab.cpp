// SPDX-License-Identifier: Apache-2.0
#include "qadapt/vocab.hpp"

#include <cctype>
#include <sstream>

#include "qadapt/errors.hpp"

namespace qadapt {

Vocabulary::Vocabulary(std::span<const std::string> words, std::size_t size) {
  tokens_ = {"<pad>", "<bos>", "<eos>"};
  for (const auto& w : words) tokens_.push_back(w);
  if (tokens_.size() > size) {
    throw ConfigError("vocabulary needs at least " + std::to_string(tokens_.size()) + " entries, configured " +
                      std::to_string(size));
  }
  for (std::size_t i = tokens_.size(); i < size; ++i) tokens_.push_back("<unused" + std::to_string(i) + ">");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) throw ContractError("duplicate token '" + tokens_[i] + "'");
  }
}

bool Vocabulary::contains(std::string_view token) const { return ids_.contains(std::string(token)); }

int Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) throw ContractError("token '" + std::string(token) + "' is not in the vocabulary");
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& t : tokenize(text)) ids.push_back(id(t));
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::string lowered(text);
  for (auto& c : lowered) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  std::istringstream is(lowered);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

}  // namespace qadapt
