#include <cctype>
#include <sstream>

#include "phd/conditioning.hpp"

namespace phd {

namespace {

std::uint32_t fnv1a(const std::string& s) {
    std::uint32_t h = 2166136261u;
    for (unsigned char c : s) {
        h ^= c;
        h *= 16777619u;
    }
    return h;
}

}  // namespace

TextCondition encode_text(const std::string& prompt) {
    if (prompt.size() > 256) throw std::invalid_argument("prompt longer than 256 characters");
    std::string lower(prompt);
    for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    std::istringstream is(lower);
    TextCondition cond;
    std::string token;
    while (is >> token && cond.filled() < TextCondition::kMaxTokens) {
        cond.token_ids.push_back(static_cast<int>(fnv1a(token) % TextCondition::kVocabulary));
    }
    cond.is_null = cond.token_ids.empty();
    return cond;
}

}  // namespace phd
