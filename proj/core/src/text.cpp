// SPDX-License-Identifier: Apache-2.0
#include "sardiff/text.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>
#include <unordered_map>

namespace sardiff {

namespace {

constexpr std::array<std::string_view, 68> kVocabulary = {
    "<pad>",    "<start>",  "<end>",     "<unk>",    "water",      "field",    "road",       "building",
    "forest",   "bright",   "dark",      "sd160",    "sd80",       "sd40",     "sar",        "radar",
    "image",    "scene",    "aerial",    "airborne", "satellite",  "high",     "low",        "resolution",
    "x-band",   "speckle",  "texture",   "smooth",   "rough",      "urban",    "rural",      "river",
    "lake",     "bridge",   "parking",   "farmland", "crop",       "vegetation", "trees",    "street",
    "house",    "houses",   "industrial", "airport", "runway",     "port",     "coast",      "sea",
    "harbor",   "rooftop",  "with",      "and",      "of",         "a",        "the",        "in",
    "near",     "large",    "small",     "many",     "few",        "dense",    "sparse",     "grid",
    "line",     "area",     "view",      "top"};

const std::unordered_map<std::string_view, int>& word_index() {
  static const auto* index = [] {
    auto* m = new std::unordered_map<std::string_view, int>();
    for (std::size_t i = 0; i < kVocabulary.size(); ++i) m->emplace(kVocabulary[i], static_cast<int>(i));
    return m;
  }();
  return *index;
}

}  // namespace

std::span<const std::string_view> vocabulary() { return kVocabulary; }
std::size_t vocab_size() { return kVocabulary.size(); }

int token_id(std::string_view word) {
  const auto& idx = word_index();
  auto it = idx.find(word);
  return it == idx.end() || it->second <= kUnk ? kUnk : it->second;
}

TokenSequence tokenize(std::span<const std::string> words) {
  TokenSequence seq;
  seq.fill(kPad);
  seq[0] = kStart;
  const std::size_t n = std::min(words.size(), kMaxPromptWords);
  for (std::size_t i = 0; i < n; ++i) seq[i + 1] = token_id(words[i]);
  seq[n + 1] = kEnd;
  return seq;
}

std::vector<std::string> split_words(std::string_view prompt) {
  std::vector<std::string> words;
  std::istringstream is{std::string(prompt)};
  std::string w;
  while (is >> w) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
    words.push_back(std::move(w));
  }
  return words;
}

TokenSequence tokenize(std::string_view prompt) { return tokenize(split_words(prompt)); }

Tensor embed_tokens(const Tensor& table, const TokenSequence& tokens) {
  require_rank(table, 2, "embed_tokens");
  if (table.dim(0) != vocab_size()) {
    throw ShapeError("embed_tokens: table " + shape_str(table.shape()) + " does not match vocabulary of " +
                     std::to_string(vocab_size()));
  }
  const std::size_t d = table.dim(1);
  Tensor out({kContextLength, d});
  for (std::size_t i = 0; i < kContextLength; ++i) {
    std::copy_n(table.data().data() + static_cast<std::size_t>(tokens[i]) * d, d, out.data().data() + i * d);
  }
  return out;
}

Tensor pooled_token_weights(std::span<const TokenSequence> batch) {
  Tensor w({batch.size(), vocab_size()});
  const double inv = 1.0 / static_cast<double>(kContextLength);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (int id : batch[b]) w[b * vocab_size() + static_cast<std::size_t>(id)] += inv;
  }
  return w;
}

}  // namespace sardiff
