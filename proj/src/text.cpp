#include "kcalnet/text.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "kcalnet/errors.hpp"

namespace kcalnet {

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else if (c < 0x80 && std::ispunct(c)) {
      continue;
    } else {
      current.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

Vectorizer::Vectorizer(std::vector<std::string> tokens, std::size_t max_tokens)
    : tokens_(std::move(tokens)), max_tokens_(max_tokens) {
  if (max_tokens_ == 0) throw ArgumentError("max_tokens must be positive");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], i + 2).second) throw ArgumentError("duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

std::size_t Vectorizer::id_of(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kOovId : it->second;
}

std::vector<std::size_t> Vectorizer::vectorize(std::string_view text) const {
  std::vector<std::size_t> ids(max_tokens_, kPadId);
  const auto tokens = tokenize(text);
  for (std::size_t i = 0; i < tokens.size() && i < max_tokens_; ++i) ids[i] = id_of(tokens[i]);
  return ids;
}

Vectorizer fit_vocab(std::span<const std::string> corpus, std::size_t max_vocab, std::size_t max_tokens) {
  if (corpus.empty()) throw ArgumentError("fit_vocab: empty corpus");
  if (max_vocab < 2) throw ArgumentError("fit_vocab: max_vocab must leave room for the pad and OOV ids");
  std::map<std::string, std::size_t> counts;
  for (const auto& text : corpus) {
    for (auto& tok : tokenize(text)) ++counts[tok];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t keep = std::min(ranked.size(), max_vocab - 2);
  std::vector<std::string> tokens;
  tokens.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(ranked[i].first);
  return Vectorizer(std::move(tokens), max_tokens);
}

}  // namespace kcalnet
