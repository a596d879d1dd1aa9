#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <map>
#include <random>
#include <set>

#include "klaad/evaluation.hpp"
#include "klaad/model.hpp"

using namespace klaad;

namespace {

std::string fixture_path(const std::string& name) {
    const char* dir = std::getenv("KLAAD_FIXTURES");
    REQUIRE(dir != nullptr);
    return std::string(dir) + "/" + name;
}

// Scripted text model: preferred strings score high, everything else
// zero; token_count is the whitespace word count; generate echoes a
// scripted continuation.
class ScriptedTextModel : public TextModel {
  public:
    std::set<std::string> preferred;
    std::map<std::string, double> exact_log_probs;
    std::map<std::string, std::string> continuations;

    double log_prob(const std::string& text) const override {
        const auto it = exact_log_probs.find(text);
        if (it != exact_log_probs.end()) return it->second;
        return preferred.count(text) ? 10.0 : 0.0;
    }
    int token_count(const std::string& text) const override {
        return static_cast<int>(split_units(text).size());
    }
    std::string generate(const std::string& prompt, int, const GenStrategy&) const override {
        const auto it = continuations.find(prompt);
        return it == continuations.end() ? "" : it->second;
    }
};

std::vector<AffectLexicon> load_all_lexicons() {
    std::vector<AffectLexicon> out;
    for (const char* name : {"sentiment", "valence", "arousal", "dominance", "joy", "anger",
                             "sadness", "fear", "disgust"})
        out.push_back(load_affect_lexicon(fixture_path("lexicons/" + std::string(name) + ".tsv")));
    return out;
}

}  // namespace

TEST_CASE("bias_score_dis formula cases") {
    CHECK(bias_score_dis(20, 20) == 1.0);
    CHECK(bias_score_dis(10, 20) == 0.0);
    CHECK(bias_score_dis(15, 20) == 0.5);
    CHECK_THROWS_AS(bias_score_dis(1, 0), InputError);
}

TEST_CASE("bias_score_dis is antisymmetric under label swap") {
    // Swapping stereotypical labels turns k biased answers out of n into
    // n - k biased answers.
    for (long n : {5L, 20L}) {
        for (long k = 0; k <= n; ++k)
            CHECK(bias_score_dis(k, n) == Catch::Approx(-bias_score_dis(n - k, n)).margin(1e-15));
    }
}

TEST_CASE("bias_score_amb formula cases") {
    CHECK(bias_score_amb(1.0, 0.7) == 0.0);
    CHECK(bias_score_amb(0.4, 0.5) == Catch::Approx(0.3).epsilon(1e-12));
    CHECK(bias_score_amb(0.0, -1.0) == -1.0);
    // |bias_amb| <= |s_dis| for accuracy in [0,1]
    for (double acc : {0.0, 0.3, 0.9, 1.0})
        for (double s : {-1.0, -0.2, 0.6, 1.0})
            CHECK(std::fabs(bias_score_amb(acc, s)) <= std::fabs(s) + 1e-15);
}

TEST_CASE("bbq_answer picks the dominant-likelihood option and breaks ties low") {
    BBQExample ex;
    ex.context = "ctx.";
    ex.question = "q?";
    ex.options = {BBQOption{"alpha", true, false}, BBQOption{"beta", false, true},
                  BBQOption{"gamma", false, false}};
    ex.gold_index = 0;

    ScriptedTextModel m;
    m.preferred = {"ctx. q? beta"};
    CHECK(bbq_answer(m, ex) == 1);

    ScriptedTextModel tie;  // all options score identically
    CHECK(bbq_answer(tie, ex) == 0);
}

TEST_CASE("uniform transformer ties every option and picks the lowest index") {
    ModelConfig c;
    c.vocab_size = 32;
    c.max_seq_len = 32;
    c.seed = 1;
    Model model(c);
    visit_params(model.params(), [](const std::string&, Mat<float>& m) { m.fill(0.0f); });
    const Tokenizer tok = build_vocab({"one two three who won unknown the answer is"}, 64);
    TokenizedTextModel text_model(model, tok);

    BBQExample ex;
    ex.context = "one two three.";
    ex.question = "who won?";
    ex.options = {BBQOption{"unknown", true, false}, BBQOption{"the answer", false, true},
                  BBQOption{"one two three", false, false}};
    ex.gold_index = 0;
    // Uniform logits: every normalized option score is log(1/V); ties
    // resolve to index 0.
    CHECK(bbq_answer(text_model, ex) == 0);
}

TEST_CASE("score_bbq reproduces the hand-computed 8-example oracle") {
    const auto examples = load_bbq_jsonl(fixture_path("bbq.jsonl"));
    REQUIRE(examples.size() == 8);

    // Scripted choices: A1 unknown, A2 stereo, A3 anti, A4 stereo,
    // D1 stereo(gold), D2 anti(gold), D3 unknown, D4 stereo.
    ScriptedTextModel m;
    auto prefer = [&](const BBQExample& ex, int idx) {
        m.preferred.insert(ex.context + " " + ex.question + " " +
                           ex.options[static_cast<size_t>(idx)].text);
    };
    prefer(examples[0], 0);
    prefer(examples[1], 1);
    prefer(examples[2], 2);
    prefer(examples[3], 0);
    prefer(examples[4], 0);
    prefer(examples[5], 1);
    prefer(examples[6], 2);
    prefer(examples[7], 0);

    const BBQReport r = score_bbq(m, examples);
    // Hand computation: acc 3/8; ambiguous 1/4 correct, 3 non-unknown
    // answers of which 2 stereotypical; disambiguated 2/4 correct, 3
    // non-unknown of which 2 stereotypical.
    CHECK(r.acc == 0.375);
    REQUIRE(r.acc_amb);
    CHECK(*r.acc_amb == 0.25);
    REQUIRE(r.acc_dis);
    CHECK(*r.acc_dis == 0.5);
    REQUIRE(r.bias_dis);
    CHECK(*r.bias_dis == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
    REQUIRE(r.bias_amb);
    CHECK(*r.bias_amb == Catch::Approx(0.75 * (1.0 / 3.0)).epsilon(1e-12));
}

TEST_CASE("all-unknown answering gives acc_amb 1 and bias_amb 0") {
    const auto examples = load_bbq_jsonl(fixture_path("bbq.jsonl"));
    std::vector<BBQExample> ambiguous;
    for (const auto& ex : examples)
        if (ex.ambiguous) ambiguous.push_back(ex);

    ScriptedTextModel m;
    for (const auto& ex : ambiguous)
        for (int i = 0; i < 3; ++i)
            if (ex.options[static_cast<size_t>(i)].is_unknown)
                m.preferred.insert(ex.context + " " + ex.question + " " +
                                   ex.options[static_cast<size_t>(i)].text);

    const BBQReport r = score_bbq(m, ambiguous);
    REQUIRE(r.acc_amb);
    CHECK(*r.acc_amb == 1.0);
    REQUIRE(r.bias_amb);
    CHECK(*r.bias_amb == 0.0);
    CHECK(!r.bias_dis);  // empty disambiguated subset: absent with flag
    const json j = bbq_report_to_json(r);
    CHECK(j.at("bias_dis").is_null());
    CHECK(std::find(j.at("flags").begin(), j.at("flags").end(), json("bias_dis_absent")) !=
          j.at("flags").end());
}

TEST_CASE("score_crows hand oracle: gaps 1,2,3,4") {
    const auto pairs = load_crows_jsonl(fixture_path("crows.jsonl"));
    REQUIRE(pairs.size() == 4);
    ScriptedTextModel m;
    for (size_t i = 0; i < 4; ++i) {
        m.exact_log_probs[pairs[i].more_stereo] = 0.0;
        m.exact_log_probs[pairs[i].less_stereo] = -static_cast<double>(i + 1);
    }
    const CrowsReport r = score_crows(m, pairs);
    CHECK(r.ss == 100.0);
    CHECK(r.diff_min == 1.0);
    CHECK(r.diff_max == 4.0);
    CHECK(r.diff_mean == 2.5);
    CHECK(r.diff_std == Catch::Approx(1.2909944487358056).epsilon(1e-12));
}

TEST_CASE("identical scores give ss 0 under the strict-inequality rule") {
    const auto pairs = load_crows_jsonl(fixture_path("crows.jsonl"));
    ScriptedTextModel m;  // every sentence scores 0.0
    const CrowsReport r = score_crows(m, pairs);
    CHECK(r.ss == 0.0);
    CHECK(r.diff_mean == 0.0);
}

TEST_CASE("ss of a model plus its label-swapped mirror is 100 without ties") {
    const auto pairs = load_crows_jsonl(fixture_path("crows.jsonl"));
    std::mt19937_64 rng(17);
    ScriptedTextModel m;
    for (const auto& p : pairs) {
        m.exact_log_probs[p.more_stereo] = -static_cast<double>(rng() % 1000) / 100.0 - 0.001;
        m.exact_log_probs[p.less_stereo] = -static_cast<double>(rng() % 1000) / 100.0;
    }
    std::vector<CrowsPair> swapped;
    for (const auto& p : pairs) swapped.push_back(CrowsPair{p.less_stereo, p.more_stereo, p.category});
    const double a = score_crows(m, pairs).ss;
    const double b = score_crows(m, swapped).ss;
    CHECK(a + b == 100.0);
}

TEST_CASE("baseline gap comparison counts ties as decreases") {
    std::vector<CrowsPair> pairs = {{"aa", "ab", ""}, {"ba", "bb", ""}};
    ScriptedTextModel m;
    m.exact_log_probs = {{"aa", -1.0}, {"ab", -2.0}, {"ba", -3.0}, {"bb", 0.0}};  // gaps 1, 3
    const std::vector<double> baseline = {2.0, 2.0};
    const CrowsReport r = score_crows(m, pairs, &baseline);
    REQUIRE(r.frac_decreased);
    CHECK(*r.frac_decreased == 50.0);
    CHECK(*r.frac_increased == 50.0);

    const std::vector<double> tie_baseline = {1.0, 3.0};  // exact ties
    const CrowsReport r2 = score_crows(m, pairs, &tie_baseline);
    CHECK(*r2.frac_decreased == 100.0);
    CHECK(*r2.frac_increased == 0.0);
}

TEST_CASE("crows diff statistics match a brute-force recomputation") {
    std::mt19937_64 rng(23);
    std::vector<CrowsPair> pairs;
    ScriptedTextModel m;
    for (int i = 0; i < 50; ++i) {
        const std::string a = "m" + std::to_string(i), b = "l" + std::to_string(i);
        pairs.push_back(CrowsPair{a, b, ""});
        m.exact_log_probs[a] = -(static_cast<double>(rng() >> 11) * 0x1.0p-53) * 30.0;
        m.exact_log_probs[b] = -(static_cast<double>(rng() >> 11) * 0x1.0p-53) * 30.0;
    }
    const CrowsReport r = score_crows(m, pairs);

    std::vector<double> gaps;
    for (const auto& p : pairs)
        gaps.push_back(std::fabs(m.exact_log_probs[p.more_stereo] -
                                 m.exact_log_probs[p.less_stereo]));
    double mean = 0.0, mn = gaps[0], mx = gaps[0];
    for (double g : gaps) {
        mean += g;
        mn = std::min(mn, g);
        mx = std::max(mx, g);
    }
    mean /= static_cast<double>(gaps.size());
    double ss = 0.0;
    for (double g : gaps) ss += (g - mean) * (g - mean);
    const double sd = std::sqrt(ss / static_cast<double>(gaps.size() - 1));
    CHECK(std::fabs(r.diff_mean - mean) < 1e-9);
    CHECK(std::fabs(r.diff_min - mn) < 1e-9);
    CHECK(std::fabs(r.diff_max - mx) < 1e-9);
    CHECK(std::fabs(r.diff_std - sd) < 1e-9);
}

TEST_CASE("affect_aggregate formula cases and bounds") {
    CHECK(affect_aggregate({0.5, -0.5}) == 0.0);
    CHECK(affect_aggregate({0.37}) == Catch::Approx(0.37).epsilon(1e-12));
    CHECK(affect_aggregate({-0.37}) == Catch::Approx(-0.37).epsilon(1e-12));
    CHECK(affect_aggregate({0.8, 0.2}) == Catch::Approx(0.68).epsilon(1e-12));
    CHECK_THROWS_AS(affect_aggregate({}), InputError);

    std::mt19937_64 rng(29);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> w(1 + rng() % 8);
        double max_abs = 0.0, sum = 0.0, sum_sq = 0.0;
        bool all_nonneg = true;
        for (auto& x : w) {
            x = (static_cast<double>(rng() >> 11) * 0x1.0p-53) * 2.0 - 1.0;
            if (trial % 2 == 0) x = std::fabs(x);  // exercise the BE5-style case
            max_abs = std::max(max_abs, std::fabs(x));
            all_nonneg = all_nonneg && x >= 0.0;
            sum += x;
            sum_sq += x * x;
        }
        const double agg = affect_aggregate(w);
        CHECK(agg >= -max_abs - 1e-12);
        CHECK(agg <= max_abs + 1e-12);
        if (all_nonneg && sum > 0.0) CHECK(agg == Catch::Approx(sum_sq / sum).epsilon(1e-9));
    }
}

TEST_CASE("lexicon loading normalizes declared ranges") {
    const auto valence = load_affect_lexicon(fixture_path("lexicons/valence.tsv"));
    CHECK(valence.dimension == AffectDimension::valence);
    // raw 0.9 in [0,1] maps to 2*0.9-1 = 0.8
    CHECK(valence.entries.at("good") == Catch::Approx(0.8).epsilon(1e-12));
    CHECK(valence.entries.at("bad") == Catch::Approx(-0.8).epsilon(1e-12));

    const auto sentiment = load_affect_lexicon(fixture_path("lexicons/sentiment.tsv"));
    CHECK(sentiment.entries.at("good") == Catch::Approx(0.5).epsilon(1e-12));  // pass-through

    const auto joy = load_affect_lexicon(fixture_path("lexicons/joy.tsv"));
    CHECK(joy.entries.at("good") == Catch::Approx(0.7).epsilon(1e-12));  // BE5 pass-through
}

TEST_CASE("score_bold aggregates per group with the empty-score rule") {
    ScriptedTextModel m;
    m.continuations["p1"] = "good good";
    m.continuations["p2"] = "zzz qqq";      // no lexicon hits anywhere
    m.continuations["p3"] = "stern bright"; // sentiment -0.3, +0.4
    const std::vector<BoldPrompt> prompts = {
        {"g1", "p1"}, {"g1", "p2"}, {"g2", "p3"}, {"g3", "p2"}};
    const AffectReport r = score_bold(m, prompts, load_all_lexicons());

    // g1: two generations, sentiment mean from p1 only = 0.5.
    REQUIRE(r.groups.count("g1"));
    CHECK(r.groups.at("g1").generation_count == 2);
    const auto sent_idx = static_cast<size_t>(AffectDimension::sentiment);
    REQUIRE(r.groups.at("g1").means[sent_idx]);
    CHECK(*r.groups.at("g1").means[sent_idx] == Catch::Approx(0.5).epsilon(1e-12));

    // g2: aggregate of {-0.3, +0.4} = (0.16-0.09)/0.7 = 0.1.
    REQUIRE(r.groups.count("g2"));
    CHECK(*r.groups.at("g2").means[sent_idx] == Catch::Approx(0.1).epsilon(1e-9));

    // g3: nothing scoreable at all -> absent row with flag.
    CHECK(!r.groups.count("g3"));
    REQUIRE(r.skipped_groups.size() == 1);
    CHECK(r.skipped_groups[0] == "g3");
}

TEST_CASE("identical continuations give identical group rows") {
    ScriptedTextModel m;
    m.continuations["pa"] = "gentle bright good";
    m.continuations["pb"] = "gentle bright good";
    const AffectReport r = score_bold(m, {{"left", "pa"}, {"right", "pb"}}, load_all_lexicons());
    REQUIRE(r.groups.count("left"));
    REQUIRE(r.groups.count("right"));
    for (int d = 0; d < kNumAffectDimensions; ++d) {
        const auto& a = r.groups.at("left").means[static_cast<size_t>(d)];
        const auto& b = r.groups.at("right").means[static_cast<size_t>(d)];
        CHECK(a.has_value() == b.has_value());
        if (a) CHECK(*a == *b);
    }
}

TEST_CASE("score_bold requires all nine dimensions") {
    auto lexicons = load_all_lexicons();
    lexicons.pop_back();
    ScriptedTextModel m;
    CHECK_THROWS_AS(score_bold(m, {{"g", "p"}}, lexicons), ConfigError);
}

TEST_CASE("report serialization carries the documented fields") {
    ScriptedTextModel m;
    m.exact_log_probs = {{"aa", -1.0}, {"ab", -2.0}};
    const CrowsReport r = score_crows(m, {{"aa", "ab", "x"}});
    const json j = crows_report_to_json(r);
    CHECK(j.at("ss") == 100.0);
    CHECK(j.at("abs_gaps").size() == 1);
    const std::string csv = crows_report_to_csv(r);
    CHECK(csv.find("ss,diff_min") == 0);
}
