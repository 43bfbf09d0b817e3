// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sardiff/tensor.hpp"

namespace sardiff {

inline constexpr std::size_t kContextLength = 77;
inline constexpr std::size_t kMaxPromptWords = kContextLength - 2;

enum SpecialToken : int { kPad = 0, kStart = 1, kEnd = 2, kUnk = 3 };

/// Fixed scene vocabulary: special tokens, reflectivity classes, tier tags
/// and a handful of descriptive words.
std::span<const std::string_view> vocabulary();
std::size_t vocab_size();
int token_id(std::string_view word);

/// Exactly 77 token ids: START, up to 75 word ids, END, then PAD.
using TokenSequence = std::array<int, kContextLength>;

TokenSequence tokenize(std::span<const std::string> words);
/// Splits on whitespace and lowercases before tokenizing.
TokenSequence tokenize(std::string_view prompt);
std::vector<std::string> split_words(std::string_view prompt);

/// Row i of the result is the embedding-table row of token i ([77, d]).
Tensor embed_tokens(const Tensor& table, const TokenSequence& tokens);

/// Token histograms divided by 77, one row per sequence ([B, V]). Multiplying
/// by the embedding table gives the mean-pooled text embedding.
Tensor pooled_token_weights(std::span<const TokenSequence> batch);

}  // namespace sardiff
