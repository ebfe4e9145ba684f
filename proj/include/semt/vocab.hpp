// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "semt/error.hpp"

namespace semt {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

/// Fixed-length caption ids. `length` counts the non-padding prefix
/// (BOS and EOS included); everything after it is PAD.
struct TokenSequence {
    std::vector<int> ids;
    std::size_t length = 0;

    bool operator==(const TokenSequence&) const = default;
};

/// Lowercases, drops '.' and ',' and splits on whitespace.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::string cleaned;
    cleaned.reserve(text.size());
    for (char c : text) {
        if (c == '.' || c == ',') continue;
        cleaned.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    std::istringstream is(cleaned);
    std::vector<std::string> out;
    for (std::string w; is >> w;) out.push_back(w);
    return out;
}

inline std::string normalize_caption(const std::string& text) {
    std::string out;
    for (const auto& w : tokenize(text)) out += (out.empty() ? "" : " ") + w;
    return out;
}

class Vocabulary {
public:
    Vocabulary() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} {
        for (std::size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = static_cast<int>(i);
    }

    /// Reserved ids first, then every distinct word in sorted order.
    static Vocabulary build(const std::vector<std::string>& captions) {
        std::set<std::string> words;
        for (const auto& c : captions)
            for (auto& w : tokenize(c)) words.insert(std::move(w));
        Vocabulary v;
        for (const auto& w : words) v.add(w);
        return v;
    }

    static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
        Vocabulary v;
        if (tokens.size() < 4 || tokens[0] != "<pad>" || tokens[1] != "<bos>" || tokens[2] != "<eos>" ||
            tokens[3] != "<unk>") {
            throw DataError("vocabulary must start with <pad> <bos> <eos> <unk>");
        }
        for (std::size_t i = 4; i < tokens.size(); ++i) {
            if (v.ids_.count(tokens[i])) throw DataError("duplicate vocabulary token '" + tokens[i] + "'");
            v.add(tokens[i]);
        }
        return v;
    }

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    int id(const std::string& word) const {
        auto it = ids_.find(word);
        return it == ids_.end() ? kUnkId : it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
            throw DataError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                            std::to_string(tokens_.size()));
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    /// [BOS, w..., EOS, PAD...] of exactly `max_len` ids; at most max_len-2
    /// words are kept.
    TokenSequence encode(const std::string& caption, std::size_t max_len) const {
        if (max_len < 2) throw DataError("max_len must be at least 2");
        auto words = tokenize(caption);
        if (words.size() > max_len - 2) words.resize(max_len - 2);
        TokenSequence seq;
        seq.ids.reserve(max_len);
        seq.ids.push_back(kBosId);
        for (const auto& w : words) seq.ids.push_back(id(w));
        seq.ids.push_back(kEosId);
        seq.length = seq.ids.size();
        seq.ids.resize(max_len, kPadId);
        return seq;
    }

    /// Words up to the first EOS; BOS and PAD are skipped.
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            const auto& tok = token(id);
            if (id == kEosId) break;
            if (id == kBosId || id == kPadId) continue;
            out += (out.empty() ? "" : " ") + tok;
        }
        return out;
    }

    std::string decode(const TokenSequence& seq) const { return decode(seq.ids); }

    bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

private:
    void add(const std::string& w) {
        ids_[w] = static_cast<int>(tokens_.size());
        tokens_.push_back(w);
    }

    std::vector<std::string> tokens_;
    std::map<std::string, int> ids_;
};

/// Teacher-forcing pair for a full-length sequence: the input is the
/// sequence itself, the target is the sequence shifted left by one with a
/// trailing PAD.
inline std::vector<int> shifted_targets(const TokenSequence& seq) {
    std::vector<int> t(seq.ids.begin() + 1, seq.ids.end());
    t.push_back(kPadId);
    return t;
}

} // namespace semt
