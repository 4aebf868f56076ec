#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kcalnet {

/// Lowercases ASCII letters, deletes ASCII punctuation and splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);

/// Maps dish names to fixed-length integer sequences. Id 0 is padding, id 1 is
/// out-of-vocabulary, kept tokens occupy ids 2.. in the order given.
class Vectorizer {
 public:
  static constexpr std::size_t kPadId = 0;
  static constexpr std::size_t kOovId = 1;

  Vectorizer(std::vector<std::string> tokens, std::size_t max_tokens);

  /// Token ids, right-padded with kPadId and truncated to max_tokens.
  std::vector<std::size_t> vectorize(std::string_view text) const;

  /// Token count plus the two reserved ids.
  std::size_t vocab_size() const { return tokens_.size() + 2; }
  std::size_t max_tokens() const { return max_tokens_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  /// kOovId for unknown tokens.
  std::size_t id_of(const std::string& token) const;

  friend bool operator==(const Vectorizer& a, const Vectorizer& b) {
    return a.tokens_ == b.tokens_ && a.max_tokens_ == b.max_tokens_;
  }

 private:
  std::vector<std::string> tokens_;
  std::size_t max_tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

/// Keeps the max_vocab - 2 most frequent tokens; ties go to the lexicographically
/// smaller token, and ids follow the same order.
Vectorizer fit_vocab(std::span<const std::string> corpus, std::size_t max_vocab, std::size_t max_tokens);

}  // namespace kcalnet
