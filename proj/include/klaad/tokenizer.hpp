#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "klaad/common.hpp"

namespace klaad {

// Splits text into lowercased units: alphanumeric runs (apostrophes kept
// inside words) and single punctuation characters. Whitespace separates.
inline std::vector<std::string> split_units(const std::string& text) {
    std::vector<std::string> units;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            units.push_back(word);
            word.clear();
        }
    };
    for (unsigned char c : text) {
        if (std::isalnum(c) || c == '\'') {
            word.push_back(static_cast<char>(std::tolower(c)));
        } else if (std::isspace(c)) {
            flush();
        } else {
            flush();
            units.push_back(std::string(1, static_cast<char>(c)));
        }
    }
    flush();
    return units;
}

// Word-level tokenizer with three reserved ids. Subword schemes can
// implement the same surface and plug into everything downstream.
class Tokenizer {
  public:
    static constexpr int kPadId = 0;
    static constexpr int kUnkId = 1;
    static constexpr int kBosId = 2;
    static constexpr int kNumReserved = 3;

    Tokenizer() = default;

    explicit Tokenizer(std::vector<std::string> words) : words_(std::move(words)) {
        for (size_t i = 0; i < words_.size(); ++i)
            index_[words_[i]] = kNumReserved + static_cast<int>(i);
    }

    int size() const { return kNumReserved + static_cast<int>(words_.size()); }

    int id_of(const std::string& unit) const {
        auto it = index_.find(unit);
        return it == index_.end() ? kUnkId : it->second;
    }

    const std::string& word_of(int id) const {
        static const std::string pad = "<pad>", unk = "<unk>", bos = "<bos>", bad = "<?>";
        if (id == kPadId) return pad;
        if (id == kUnkId) return unk;
        if (id == kBosId) return bos;
        const int w = id - kNumReserved;
        if (w < 0 || w >= static_cast<int>(words_.size())) return bad;
        return words_[static_cast<size_t>(w)];
    }

    std::vector<int> encode(const std::string& text, bool add_bos = true) const {
        std::vector<int> ids;
        if (add_bos) ids.push_back(kBosId);
        for (const auto& u : split_units(text)) ids.push_back(id_of(u));
        return ids;
    }

    // Space-joined units; reserved ids are skipped.
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id < kNumReserved) continue;
            if (!out.empty()) out.push_back(' ');
            out += word_of(id);
        }
        return out;
    }

    const std::vector<std::string>& words() const { return words_; }

  private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

// Builds a vocabulary from the corpus, most frequent units first (ties
// broken lexicographically so the result is deterministic).
inline Tokenizer build_vocab(const std::vector<std::string>& corpus, int max_size) {
    if (corpus.empty()) throw ConfigError("build_vocab: corpus is empty");
    if (max_size < Tokenizer::kNumReserved + 1)
        throw ConfigError("build_vocab: max_size must be at least 4 (3 reserved ids + 1 word)");

    std::map<std::string, long> counts;
    for (const auto& text : corpus)
        for (const auto& u : split_units(text)) ++counts[u];

    std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });

    const size_t budget = static_cast<size_t>(max_size - Tokenizer::kNumReserved);
    std::vector<std::string> words;
    for (const auto& [w, n] : ranked) {
        if (words.size() >= budget) break;
        words.push_back(w);
    }
    return Tokenizer(std::move(words));
}

}  // namespace klaad
