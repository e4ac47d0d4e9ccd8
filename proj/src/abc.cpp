#include "cvsteer/abc.hpp"

#include "cvsteer/error.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cctype>

namespace cvsteer::abc {

std::string_view to_string(TokenKind kind) noexcept {
    switch (kind) {
    case TokenKind::HeaderField: return "HeaderField";
    case TokenKind::Barline: return "Barline";
    case TokenKind::Note: return "Note";
    case TokenKind::Rest: return "Rest";
    case TokenKind::Duration: return "Duration";
    case TokenKind::Accidental: return "Accidental";
    case TokenKind::Chord: return "Chord";
    case TokenKind::Decoration: return "Decoration";
    case TokenKind::Whitespace: return "Whitespace";
    case TokenKind::Other: return "Other";
    }
    return "Other";
}

std::string_view to_string(TokenClass cls) noexcept {
    return cls == TokenClass::Format ? "Format" : "Content";
}

TokenClass classify(TokenKind kind) noexcept {
    switch (kind) {
    case TokenKind::Note:
    case TokenKind::Rest:
    case TokenKind::Duration:
    case TokenKind::Accidental:
    case TokenKind::Chord:
    case TokenKind::Decoration:
        return TokenClass::Content;
    case TokenKind::HeaderField:
    case TokenKind::Barline:
    case TokenKind::Whitespace:
    case TokenKind::Other:
        return TokenClass::Format;
    }
    return TokenClass::Format;
}

namespace {

// Longest first so maximal munch works by linear scan.
constexpr std::array<std::string_view, 8> kBarlines = {":|:", "|:", ":|", "::", "||", "|]", "[|", "|"};
constexpr std::string_view kSingleDecorations = ".~HLMOPSTuv";
constexpr std::string_view kOtherGlyphs = "\\`y&*$#@;?";

bool is_note_letter(char c) { return (c >= 'A' && c <= 'G') || (c >= 'a' && c <= 'g'); }

bool is_field_line(std::string_view rest) {
    if (rest.size() < 2 || !std::isalpha(static_cast<unsigned char>(rest[0])) || rest[1] != ':')
        return false;
    // "C:|" is a note followed by a repeat, not a field.
    return rest.size() == 2 || (rest[2] != '|' && rest[2] != ':');
}

std::size_t line_end(std::string_view text, std::size_t pos) {
    const auto nl = text.find_first_of("\r\n", pos);
    return nl == std::string_view::npos ? text.size() : nl;
}

class Lexer {
public:
    explicit Lexer(std::string_view text) : text_(text) {}

    TokenSequence run() {
        TokenSequence seq;
        seq.source_text = std::string(text_);
        bool at_line_start = true;
        while (pos_ < text_.size()) {
            const char c = text_[pos_];
            if (c == '\n' || c == '\r') {
                const std::size_t len = (c == '\r' && peek(1) == '\n') ? 2 : 1;
                emit(seq, len, TokenKind::Whitespace);
                at_line_start = true;
                continue;
            }
            if (at_line_start) {
                at_line_start = false;
                const std::string_view rest = text_.substr(pos_);
                if (c == '%') {
                    emit(seq, line_end(text_, pos_) - pos_, TokenKind::HeaderField);
                    continue;
                }
                if (is_field_line(rest)) {
                    emit(seq, line_end(text_, pos_) - pos_, TokenKind::HeaderField);
                    continue;
                }
            }
            body_symbol(seq);
        }
        return seq;
    }

private:
    char peek(std::size_t ahead) const {
        return pos_ + ahead < text_.size() ? text_[pos_ + ahead] : '\0';
    }

    void emit(TokenSequence& seq, std::size_t len, TokenKind kind) {
        seq.tokens.push_back(Token{std::string(text_.substr(pos_, len)), kind});
        pos_ += len;
    }

    std::size_t run_of(std::string_view chars, std::size_t from) const {
        std::size_t end = from;
        while (end < text_.size() && chars.find(text_[end]) != std::string_view::npos) ++end;
        return end - from;
    }

    std::size_t delimited(char close) const {
        // Length of a "...close" construct starting at pos_, or 0 if it never closes on this line.
        for (std::size_t i = pos_ + 1; i < text_.size(); ++i) {
            if (text_[i] == close) return i - pos_ + 1;
            if (text_[i] == '\n' || text_[i] == '\r') return 0;
        }
        return 0;
    }

    [[noreturn]] void reject() const {
        throw Error(ErrorCode::RejectedInput, "abc_core",
                    "unrecognized symbol at offset " + std::to_string(pos_));
    }

    void body_symbol(TokenSequence& seq) {
        const char c = text_[pos_];
        const std::string_view rest = text_.substr(pos_);

        for (std::string_view bar : kBarlines) {
            if (rest.starts_with(bar)) {
                emit(seq, bar.size(), TokenKind::Barline);
                return;
            }
        }
        if (c == ' ' || c == '\t') {
            emit(seq, run_of(" \t", pos_), TokenKind::Whitespace);
            return;
        }
        if (is_note_letter(c)) {
            emit(seq, 1 + run_of("',", pos_ + 1), TokenKind::Note);
            return;
        }
        if (c == 'z' || c == 'x' || c == 'Z') {
            emit(seq, 1, TokenKind::Rest);
            return;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '/') {
            emit(seq, run_of("0123456789/", pos_), TokenKind::Duration);
            return;
        }
        if (c == '>' || c == '<') {
            emit(seq, run_of(std::string_view(&c, 1), pos_), TokenKind::Duration);
            return;
        }
        if (c == '^' || c == '_') {
            emit(seq, peek(1) == c ? 2 : 1, TokenKind::Accidental);
            return;
        }
        if (c == '=') {
            emit(seq, 1, TokenKind::Accidental);
            return;
        }
        if (c == '[' || c == ']') {
            emit(seq, 1, TokenKind::Chord);
            return;
        }
        if (c == '"') {
            if (const std::size_t len = delimited('"'); len > 0) {
                emit(seq, len, TokenKind::Chord);
                return;
            }
            reject();
        }
        if (c == '!' || c == '+') {
            if (const std::size_t len = delimited(c); len > 0) {
                emit(seq, len, TokenKind::Decoration);
                return;
            }
            reject();
        }
        if (c == '(') {
            emit(seq, 1 + run_of("0123456789", pos_ + 1), TokenKind::Decoration);
            return;
        }
        if (c == ')' || c == '-' || kSingleDecorations.find(c) != std::string_view::npos) {
            emit(seq, 1, TokenKind::Decoration);
            return;
        }
        if (kOtherGlyphs.find(c) != std::string_view::npos) {
            emit(seq, 1, TokenKind::Other);
            return;
        }
        reject();
    }

    std::string_view text_;
    std::size_t pos_ = 0;
};

bool has_field(const TokenSequence& seq, char letter) {
    for (const Token& t : seq.tokens) {
        if (t.kind == TokenKind::HeaderField && t.text.size() >= 2 && t.text[0] == letter && t.text[1] == ':')
            return true;
    }
    return false;
}

} // namespace

TokenSequence tokenize(std::string_view text) { return Lexer(text).run(); }

std::string detokenize(const TokenSequence& seq) {
    std::string out;
    for (const Token& t : seq.tokens) out += t.text;
    return out;
}

ValidationReport validate(const TokenSequence& seq) {
    ValidationReport report;
    bool has_music = false;
    bool bar_open = false;
    int chord_depth = 0;
    int slur_depth = 0;
    int repeat_open = 0;
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
        const Token& t = seq.tokens[i];
        const std::string where = " at token " + std::to_string(i);
        switch (t.kind) {
        case TokenKind::Note:
        case TokenKind::Rest:
            has_music = true;
            bar_open = true;
            break;
        case TokenKind::Barline:
            if (bar_open) ++report.bar_count;
            bar_open = false;
            if (t.text == "|:") ++repeat_open;
            if ((t.text == ":|" || t.text == ":|:" || t.text == "::") && repeat_open > 0) --repeat_open;
            if ((t.text == ":|:" || t.text == "::")) ++repeat_open;
            break;
        case TokenKind::Chord:
            if (t.text == "[") {
                ++chord_depth;
            } else if (t.text == "]") {
                if (chord_depth == 0)
                    report.unmatched_constructs.push_back("chord close ']'" + where);
                else
                    --chord_depth;
            }
            break;
        case TokenKind::Decoration:
            if (t.text == "(") {
                ++slur_depth;
            } else if (t.text == ")") {
                if (slur_depth == 0)
                    report.unmatched_constructs.push_back("slur close ')'" + where);
                else
                    --slur_depth;
            }
            break;
        default:
            break;
        }
    }
    if (bar_open) ++report.bar_count;
    if (chord_depth > 0) report.unmatched_constructs.push_back("chord open '[' never closed");
    if (slur_depth > 0) report.unmatched_constructs.push_back("slur open '(' never closed");
    if (repeat_open > 0) report.unmatched_constructs.push_back("repeat open '|:' never closed");

    report.parse_valid = has_field(seq, 'X') && has_field(seq, 'K') && has_music &&
                         report.unmatched_constructs.empty();
    return report;
}

void to_json(nlohmann::json& j, const ValidationReport& report) {
    j = nlohmann::json{{"parse_valid", report.parse_valid},
                       {"bar_count", report.bar_count},
                       {"unmatched_constructs", report.unmatched_constructs}};
}

} // namespace cvsteer::abc
