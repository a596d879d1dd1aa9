#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "klaad/common.hpp"
#include "klaad/tokenizer.hpp"

namespace klaad {

using json = nlohmann::ordered_json;

inline constexpr const char* kBlankMarker = "BLANK";

// One StereoSet-style record: a template (intrasentence) or context
// (intersentence) plus the three labeled candidate texts.
struct RawRecord {
    Subset subset = Subset::intrasentence;
    Category category = Category::gender;
    std::string template_or_context;
    std::string stereotype;
    std::string anti_stereotype;
    std::string unrelated;
};

struct TokenSequence {
    std::vector<int> ids;  // pad ids only as a suffix
    std::string text;
    int length = 0;        // non-pad token count

    void validate(int vocab_size) const {
        if (length < 1) throw ValidationError("TokenSequence: length must be >= 1");
        if (length > static_cast<int>(ids.size()))
            throw ValidationError("TokenSequence: length exceeds id count");
        for (int i = 0; i < static_cast<int>(ids.size()); ++i) {
            if (ids[i] < 0 || ids[i] >= vocab_size)
                throw ValidationError("TokenSequence: id out of vocabulary range");
            if (i < length && ids[i] == Tokenizer::kPadId && i > 0)
                throw ValidationError("TokenSequence: pad id inside non-pad prefix");
            if (i >= length && ids[i] != Tokenizer::kPadId)
                throw ValidationError("TokenSequence: non-pad id in pad suffix");
        }
    }
};

struct Triplet {
    TokenSequence stereo;
    TokenSequence anti;
    TokenSequence unrelated;
    Category category = Category::gender;
    Subset subset = Subset::intrasentence;
    Span bias_span_stereo;
    Span bias_span_anti;
};

struct SplitSpec {
    double train_fraction = 0.95;
    uint64_t seed = 0;
};

enum class RecordFormat { stereoset_json, fixture_jsonl };

namespace detail {

inline std::string lower(const std::string& s) {
    std::string out = s;
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return out;
}

// Recovers the candidate text from a filled sentence given the template
// split at the blank. Case-insensitive fallback tolerates capitalization
// drift between template and sentence.
inline std::optional<std::string> extract_candidate(const std::string& prefix,
                                                    const std::string& suffix,
                                                    const std::string& sentence) {
    auto try_match = [&](const std::string& pre, const std::string& suf,
                         const std::string& sent) -> std::optional<std::string> {
        if (sent.size() < pre.size() + suf.size()) return std::nullopt;
        if (sent.compare(0, pre.size(), pre) != 0) return std::nullopt;
        if (sent.compare(sent.size() - suf.size(), suf.size(), suf) != 0) return std::nullopt;
        return sent.substr(pre.size(), sent.size() - pre.size() - suf.size());
    };
    if (auto c = try_match(prefix, suffix, sentence)) return c;
    return try_match(lower(prefix), lower(suffix), lower(sentence));
}

inline RawRecord record_from_fixture_json(const json& j, size_t index) {
    for (const char* field :
         {"subset", "category", "template_or_context", "stereotype", "anti_stereotype", "unrelated"}) {
        if (!j.contains(field))
            throw ValidationError("fixture record " + std::to_string(index) +
                                  ": missing field '" + field + "'");
    }
    RawRecord r;
    r.subset = subset_from_string(j.at("subset").get<std::string>());
    r.category = category_from_string(j.at("category").get<std::string>());
    r.template_or_context = j.at("template_or_context").get<std::string>();
    r.stereotype = j.at("stereotype").get<std::string>();
    r.anti_stereotype = j.at("anti_stereotype").get<std::string>();
    r.unrelated = j.at("unrelated").get<std::string>();
    return r;
}

inline void validate_record(const RawRecord& r, size_t index) {
    if (r.stereotype.empty() || r.anti_stereotype.empty() || r.unrelated.empty())
        throw ValidationError("record " + std::to_string(index) + ": empty candidate text");
    if (r.subset == Subset::intrasentence) {
        const auto first = r.template_or_context.find(kBlankMarker);
        if (first == std::string::npos)
            throw ValidationError("record " + std::to_string(index) +
                                  ": intrasentence template has no blank marker");
        if (r.template_or_context.find(kBlankMarker, first + 1) != std::string::npos)
            throw ValidationError("record " + std::to_string(index) +
                                  ": intrasentence template has multiple blank markers");
    } else if (r.template_or_context.empty()) {
        throw ValidationError("record " + std::to_string(index) +
                              ": intersentence record has empty context");
    }
}

inline std::vector<RawRecord> load_stereoset_json(const json& root) {
    if (!root.contains("data"))
        throw ParseError("stereoset_json: missing top-level 'data' object");
    const json& data = root.at("data");

    std::vector<RawRecord> records;
    size_t index = 0;
    for (const char* subset_key : {"intrasentence", "intersentence"}) {
        if (!data.contains(subset_key)) continue;
        const Subset subset = subset_from_string(subset_key);
        for (const json& item : data.at(subset_key)) {
            RawRecord r;
            r.subset = subset;
            try {
                r.category = category_from_string(item.at("bias_type").get<std::string>());
                r.template_or_context = item.at("context").get<std::string>();
                std::optional<std::string> by_label[3];
                for (const json& s : item.at("sentences")) {
                    const std::string label = s.at("gold_label").get<std::string>();
                    const std::string sentence = s.at("sentence").get<std::string>();
                    if (label == "stereotype") by_label[0] = sentence;
                    else if (label == "anti-stereotype") by_label[1] = sentence;
                    else if (label == "unrelated") by_label[2] = sentence;
                }
                for (int i = 0; i < 3; ++i)
                    if (!by_label[i])
                        throw ValidationError("record " + std::to_string(index) +
                                              ": missing candidate label");

                if (subset == Subset::intrasentence) {
                    const auto pos = r.template_or_context.find(kBlankMarker);
                    if (pos == std::string::npos)
                        throw ValidationError("record " + std::to_string(index) +
                                              ": intrasentence context has no blank marker");
                    const std::string prefix = r.template_or_context.substr(0, pos);
                    const std::string suffix =
                        r.template_or_context.substr(pos + std::string(kBlankMarker).size());
                    auto c0 = extract_candidate(prefix, suffix, *by_label[0]);
                    auto c1 = extract_candidate(prefix, suffix, *by_label[1]);
                    auto c2 = extract_candidate(prefix, suffix, *by_label[2]);
                    if (c0 && c1 && c2) {
                        r.stereotype = *c0;
                        r.anti_stereotype = *c1;
                        r.unrelated = *c2;
                    } else {
                        // Sentence does not embed the template verbatim; keep the
                        // record by treating the full sentences as the candidates.
                        r.template_or_context = kBlankMarker;
                        r.stereotype = *by_label[0];
                        r.anti_stereotype = *by_label[1];
                        r.unrelated = *by_label[2];
                    }
                } else {
                    r.stereotype = *by_label[0];
                    r.anti_stereotype = *by_label[1];
                    r.unrelated = *by_label[2];
                }
            } catch (const json::exception& e) {
                throw ParseError("stereoset_json record " + std::to_string(index) + ": " + e.what());
            }
            validate_record(r, index);
            records.push_back(std::move(r));
            ++index;
        }
    }
    return records;
}

}  // namespace detail

inline std::vector<RawRecord> load_records(const std::string& path, RecordFormat format) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open input file: " + path);

    if (format == RecordFormat::stereoset_json) {
        json root;
        try {
            in >> root;
        } catch (const json::exception& e) {
            throw ParseError("stereoset_json parse failure in " + path + ": " + e.what());
        }
        return detail::load_stereoset_json(root);
    }

    std::vector<RawRecord> records;
    std::string line;
    size_t index = 0;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("fixture_jsonl record " + std::to_string(index) + ": " + e.what());
        }
        RawRecord r = detail::record_from_fixture_json(j, index);
        detail::validate_record(r, index);
        records.push_back(std::move(r));
        ++index;
    }
    return records;
}

// The candidate-substituted surface sentences of a record, in
// (stereo, anti, unrelated) order. Used for vocabulary construction.
inline std::array<std::string, 3> surface_texts(const RawRecord& r) {
    auto fill = [&](const std::string& candidate) {
        if (r.subset == Subset::intersentence)
            return r.template_or_context + " " + candidate;
        std::string out = r.template_or_context;
        const auto pos = out.find(kBlankMarker);
        out.replace(pos, std::string(kBlankMarker).size(), candidate);
        return out;
    };
    return {fill(r.stereotype), fill(r.anti_stereotype), fill(r.unrelated)};
}

inline Triplet build_triplet(const RawRecord& record, const Tokenizer& tokenizer) {
    Triplet t;
    t.category = record.category;
    t.subset = record.subset;

    auto encode_part = [&](const std::string& text) { return tokenizer.encode(text, false); };

    if (record.subset == Subset::intrasentence) {
        const auto pos = record.template_or_context.find(kBlankMarker);
        if (pos == std::string::npos)
            throw ValidationError("build_triplet: blank marker absent in intrasentence template");
        const std::string prefix = record.template_or_context.substr(0, pos);
        const std::string suffix =
            record.template_or_context.substr(pos + std::string(kBlankMarker).size());
        const auto prefix_ids = encode_part(prefix);
        const auto suffix_ids = encode_part(suffix);

        auto make = [&](const std::string& candidate, Span* span) {
            TokenSequence seq;
            seq.ids.push_back(Tokenizer::kBosId);
            seq.ids.insert(seq.ids.end(), prefix_ids.begin(), prefix_ids.end());
            const auto cand_ids = encode_part(candidate);
            const int begin = static_cast<int>(seq.ids.size());
            seq.ids.insert(seq.ids.end(), cand_ids.begin(), cand_ids.end());
            const int end = static_cast<int>(seq.ids.size());
            seq.ids.insert(seq.ids.end(), suffix_ids.begin(), suffix_ids.end());
            seq.length = static_cast<int>(seq.ids.size());
            std::string text = record.template_or_context;
            text.replace(pos, std::string(kBlankMarker).size(), candidate);
            seq.text = text;
            if (span) *span = Span{begin, end};
            return seq;
        };
        t.stereo = make(record.stereotype, &t.bias_span_stereo);
        t.anti = make(record.anti_stereotype, &t.bias_span_anti);
        t.unrelated = make(record.unrelated, nullptr);
    } else {
        if (record.template_or_context.empty())
            throw ValidationError("build_triplet: intersentence record has empty context");
        const auto context_ids = encode_part(record.template_or_context);

        auto make = [&](const std::string& continuation, Span* span) {
            TokenSequence seq;
            seq.ids.push_back(Tokenizer::kBosId);
            seq.ids.insert(seq.ids.end(), context_ids.begin(), context_ids.end());
            const int begin = static_cast<int>(seq.ids.size());
            const auto cont_ids = encode_part(continuation);
            seq.ids.insert(seq.ids.end(), cont_ids.begin(), cont_ids.end());
            seq.length = static_cast<int>(seq.ids.size());
            seq.text = record.template_or_context + " " + continuation;
            if (span) *span = Span{begin, seq.length};
            return seq;
        };
        t.stereo = make(record.stereotype, &t.bias_span_stereo);
        t.anti = make(record.anti_stereotype, &t.bias_span_anti);
        t.unrelated = make(record.unrelated, nullptr);
    }
    return t;
}

// Builds triplets for all records, dropping any whose longest member
// exceeds max_len tokens. The paper-scale datasets keep everything at the
// default; the cap bounds toy-model cost.
inline std::vector<Triplet> build_triplets(const std::vector<RawRecord>& records,
                                           const Tokenizer& tokenizer, int max_len = 64,
                                           size_t* dropped_count = nullptr) {
    std::vector<Triplet> out;
    size_t dropped = 0;
    for (const auto& r : records) {
        Triplet t = build_triplet(r, tokenizer);
        const int longest =
            std::max({t.stereo.length, t.anti.length, t.unrelated.length});
        if (longest > max_len) {
            ++dropped;
            continue;
        }
        out.push_back(std::move(t));
    }
    if (dropped_count) *dropped_count = dropped;
    return out;
}

inline std::pair<std::vector<Triplet>, std::vector<Triplet>> split(
    const std::vector<Triplet>& triplets, const SplitSpec& spec) {
    if (triplets.empty()) throw InputError("split: triplet list is empty");
    if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
        throw ConfigError("split: train_fraction must lie in (0, 1)");

    std::vector<size_t> order(triplets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(spec.seed);
    // Fisher-Yates with hand-rolled index draw for cross-platform determinism.
    for (size_t i = order.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
    }

    const size_t n_train = static_cast<size_t>(
        std::llround(spec.train_fraction * static_cast<double>(triplets.size())));
    std::pair<std::vector<Triplet>, std::vector<Triplet>> result;
    for (size_t i = 0; i < order.size(); ++i) {
        (i < n_train ? result.first : result.second).push_back(triplets[order[i]]);
    }
    return result;
}

// ---- Triplet JSONL serialization (the build-triplets output format) ----

inline json token_sequence_to_json(const TokenSequence& s) {
    return json{{"ids", s.ids}, {"text", s.text}, {"length", s.length}};
}

inline TokenSequence token_sequence_from_json(const json& j) {
    TokenSequence s;
    s.ids = j.at("ids").get<std::vector<int>>();
    s.text = j.at("text").get<std::string>();
    s.length = j.at("length").get<int>();
    return s;
}

inline json triplet_to_json(const Triplet& t) {
    return json{{"subset", to_string(t.subset)},
                {"category", to_string(t.category)},
                {"stereo", token_sequence_to_json(t.stereo)},
                {"anti", token_sequence_to_json(t.anti)},
                {"unrelated", token_sequence_to_json(t.unrelated)},
                {"bias_span_stereo", {t.bias_span_stereo.begin, t.bias_span_stereo.end}},
                {"bias_span_anti", {t.bias_span_anti.begin, t.bias_span_anti.end}}};
}

inline Triplet triplet_from_json(const json& j) {
    Triplet t;
    t.subset = subset_from_string(j.at("subset").get<std::string>());
    t.category = category_from_string(j.at("category").get<std::string>());
    t.stereo = token_sequence_from_json(j.at("stereo"));
    t.anti = token_sequence_from_json(j.at("anti"));
    t.unrelated = token_sequence_from_json(j.at("unrelated"));
    t.bias_span_stereo = Span{j.at("bias_span_stereo").at(0).get<int>(),
                              j.at("bias_span_stereo").at(1).get<int>()};
    t.bias_span_anti = Span{j.at("bias_span_anti").at(0).get<int>(),
                            j.at("bias_span_anti").at(1).get<int>()};
    return t;
}

inline void write_triplets_jsonl(const std::string& path, const std::vector<Triplet>& triplets) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write triplet file: " + path);
    for (const auto& t : triplets) out << triplet_to_json(t).dump() << "\n";
}

inline std::vector<Triplet> load_triplets_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open triplet file: " + path);
    std::vector<Triplet> out;
    std::string line;
    size_t index = 0;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(triplet_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ParseError("triplet record " + std::to_string(index) + ": " + e.what());
        }
        ++index;
    }
    return out;
}

}  // namespace klaad
