#pragma once

// Word-level tokenizer with reserved special tokens. The vocabulary is built
// from a corpus (plus anything passed explicitly) and serializes to a plain
// text format so checkpoints and data files can pin it exactly.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace selecom {

class TokenizerError : public std::runtime_error {
public:
    explicit TokenizerError(const std::string& what) : std::runtime_error(what) {}
};

class Tokenizer {
public:
    // Reserved ids, fixed regardless of vocabulary contents.
    static constexpr int kUnk = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kEncode = 3;
    static constexpr int kDocument = 4;
    static constexpr int kDocumentStart = 5;
    static constexpr int kDocumentEnd = 6;
    static constexpr int kAnswerOpen = 7;
    static constexpr int kAnswerClose = 8;

    static const std::vector<std::string>& specials() {
        static const std::vector<std::string> s = {
            "<unk>", "<bos>",   "<eos>",           "<ENCODE>",        "<DOCUMENT>",
            "<DOCUMENT_START>", "<DOCUMENT_END>",  "<answer>",        "</answer>"};
        return s;
    }

    Tokenizer() {
        for (const auto& tok : specials()) intern(tok);
    }

    // Splits text into word/punctuation pieces. Special tokens written
    // literally in text (e.g. "<DOCUMENT>") survive as single pieces.
    static std::vector<std::string> split(const std::string& text) {
        std::vector<std::string> out;
        size_t i = 0;
        const size_t n = text.size();
        while (i < n) {
            const char c = text[i];
            if (std::isspace(static_cast<unsigned char>(c))) {
                ++i;
            } else if (c == '<') {
                const size_t close = text.find('>', i);
                std::string candidate =
                    close == std::string::npos ? "" : text.substr(i, close - i + 1);
                if (!candidate.empty() && looks_special(candidate)) {
                    out.push_back(candidate);
                    i = close + 1;
                } else {
                    out.push_back("<");
                    ++i;
                }
            } else if (is_word_char(c)) {
                size_t j = i;
                while (j < n && is_word_char(text[j])) ++j;
                std::string w = text.substr(i, j - i);
                for (char& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
                out.push_back(std::move(w));
                i = j;
            } else {
                out.push_back(std::string(1, c));
                ++i;
            }
        }
        return out;
    }

    void add_text(const std::string& text) {
        for (const auto& piece : pending_insert(text)) pending_.insert(piece);
    }

    // Finalizes the vocabulary: pending words are added in sorted order so
    // the id assignment is independent of insertion order.
    void finalize() {
        for (const auto& w : pending_) intern(w);
        pending_.clear();
    }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        for (const auto& piece : split(text)) ids.push_back(token_id(piece));
        return ids;
    }

    int token_id(const std::string& piece) const {
        auto it = id_of_.find(piece);
        return it == id_of_.end() ? kUnk : it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<size_t>(id) >= tokens_.size())
            throw TokenizerError("token id out of range: " + std::to_string(id));
        return tokens_[static_cast<size_t>(id)];
    }

    // Detokenizes with single spaces between word tokens and no space before
    // lone punctuation. Good enough for synthetic-corpus round trips.
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            const std::string& t = token(id);
            const bool punct = t.size() == 1 && !is_word_char(t[0]);
            if (!out.empty() && !punct) out += ' ';
            out += t;
        }
        return out;
    }

    size_t vocab_size() const { return tokens_.size(); }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw TokenizerError("cannot write vocab file: " + path);
        for (const auto& t : tokens_) f << t << "\n";
    }

    static Tokenizer load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw TokenizerError("cannot read vocab file: " + path);
        Tokenizer tk;
        std::string line;
        size_t idx = 0;
        while (std::getline(f, line)) {
            if (idx < specials().size()) {
                if (line != specials()[idx])
                    throw TokenizerError("vocab file missing reserved token at id " +
                                         std::to_string(idx));
            } else {
                tk.intern(line);
            }
            ++idx;
        }
        if (idx < specials().size()) throw TokenizerError("vocab file truncated: " + path);
        return tk;
    }

private:
    static bool is_word_char(char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '\'';
    }

    static bool looks_special(const std::string& s) {
        for (const auto& sp : specials())
            if (s == sp) return true;
        return false;
    }

    std::vector<std::string> pending_insert(const std::string& text) const {
        std::vector<std::string> keep;
        for (const auto& piece : split(text))
            if (!id_of_.count(piece)) keep.push_back(piece);
        return keep;
    }

    void intern(const std::string& piece) {
        if (id_of_.count(piece)) return;
        id_of_[piece] = static_cast<int>(tokens_.size());
        tokens_.push_back(piece);
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> id_of_;
    std::set<std::string> pending_;
};

}  // namespace selecom
