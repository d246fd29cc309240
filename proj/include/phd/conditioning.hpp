#pragma once

#include <string>
#include <vector>

#include "phd/core/autograd.hpp"

namespace phd {

// Tokenized prompt. Embedding vectors are produced by the backbone, which
// owns the learned token table; an empty prompt maps to the null condition.
struct TextCondition {
    static constexpr int kMaxTokens = 16;
    static constexpr int kVocabulary = 4096;

    std::vector<int> token_ids;  // hashed ids, at most kMaxTokens
    bool is_null = true;

    static TextCondition null() { return {}; }
    int filled() const { return static_cast<int>(token_ids.size()); }
    bool operator==(const TextCondition&) const = default;
};

// Lowercase whitespace tokenization hashed into kVocabulary ids (FNV-1a),
// truncated to kMaxTokens positions.
TextCondition encode_text(const std::string& prompt);

// Per-connection feature maps produced by the harmonizer, in encoder order.
struct ConditionFeatures {
    std::vector<Var> maps;
    std::size_t size() const { return maps.size(); }
};

using InjectionGates = std::vector<bool>;

}  // namespace phd
