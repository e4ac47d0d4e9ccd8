#pragma once

// Tokenizing and validation for the ABC subset used by the
// synthetic style corpora. One token per musical symbol; header and comment
// lines are single tokens.

#include <nlohmann/json_fwd.hpp>

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace cvsteer::abc {

enum class TokenKind {
    HeaderField,
    Barline,
    Note,
    Rest,
    Duration,
    Accidental,
    Chord,
    Decoration,
    Whitespace,
    Other,
};

enum class TokenClass { Format, Content };

std::string_view to_string(TokenKind kind) noexcept;
std::string_view to_string(TokenClass cls) noexcept;

struct Token {
    std::string text;
    TokenKind kind = TokenKind::Other;

    bool operator==(const Token&) const = default;
};

struct TokenSequence {
    std::vector<Token> tokens;
    std::string source_text;

    std::size_t size() const noexcept { return tokens.size(); }
    bool empty() const noexcept { return tokens.empty(); }
    bool operator==(const TokenSequence&) const = default;
};

// Throws Error{RejectedInput} naming the byte offset of the first
// unrecognized symbol in the tune body.
TokenSequence tokenize(std::string_view text);

std::string detokenize(const TokenSequence& seq);

TokenClass classify(TokenKind kind) noexcept;
inline TokenClass classify_token(const Token& token) noexcept { return classify(token.kind); }
inline bool is_format(const Token& token) noexcept {
    return classify_token(token) == TokenClass::Format;
}

struct ValidationReport {
    bool parse_valid = false;
    int bar_count = 0;
    std::vector<std::string> unmatched_constructs;
};

ValidationReport validate(const TokenSequence& seq);

void to_json(nlohmann::json& j, const ValidationReport& report);

} // namespace cvsteer::abc
