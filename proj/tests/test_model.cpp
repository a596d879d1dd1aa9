#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "klaad/model.hpp"

using namespace klaad;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 32;
    c.d_ff = 64;
    c.vocab_size = 16;
    c.max_seq_len = 16;
    c.seed = 11;
    return c;
}

TokenSequence seq(std::vector<int> ids, int length = -1) {
    TokenSequence s;
    s.ids = std::move(ids);
    s.length = length < 0 ? static_cast<int>(s.ids.size()) : length;
    return s;
}

// All-zero parameters collapse every logit row to zeros, i.e. a uniform
// next-token distribution.
template <typename S>
void zero_params(TransformerModel<S>& m) {
    visit_params(m.params(), [](const std::string&, Mat<S>& mat) { mat.fill(S(0)); });
}

}  // namespace

TEST_CASE("same config and seed produce bitwise-equal parameters") {
    Model a(tiny_config()), b(tiny_config());
    std::vector<float> va, vb;
    visit_params(a.params(), [&](const std::string&, const Mat<float>& m) {
        va.insert(va.end(), m.data.begin(), m.data.end());
    });
    visit_params(b.params(), [&](const std::string&, const Mat<float>& m) {
        vb.insert(vb.end(), m.data.begin(), m.data.end());
    });
    REQUIRE(va.size() == vb.size());
    CHECK(va == vb);
}

TEST_CASE("d_model not divisible by n_heads is a configuration error") {
    ModelConfig c = tiny_config();
    c.d_model = 16;
    c.n_heads = 3;
    CHECK_THROWS_AS(Model(c), ConfigError);
}

TEST_CASE("forward returns per-head attention of the sequence size") {
    Model m(tiny_config());
    const ModelOutput out = m.forward(seq({2, 4, 5, 6, 7, 8, 9, 10}));
    REQUIRE(out.final_attention.size() == 2);
    CHECK(out.final_attention[0].rows == 8);
    CHECK(out.final_attention[0].cols == 8);
    CHECK(out.logits.rows == 8);
    CHECK(out.logits.cols == 16);
    CHECK(out.final_hidden.cols == 32);
}

TEST_CASE("attention rows are causal and row-stochastic over valid keys") {
    Model m(tiny_config());
    const TokenSequence s = seq({2, 4, 5, 6, 7, 0, 0}, 5);
    const ModelOutput out = m.forward(s);
    for (const auto& a : out.final_attention) {
        for (int i = 0; i < 5; ++i) {
            double sum = 0.0;
            for (int j = 0; j < a.cols; ++j) {
                if (j > i) CHECK(a(i, j) == 0.0);  // future keys: exactly zero
                sum += a(i, j);
            }
            CHECK(std::fabs(sum - 1.0) < 1e-5);
        }
        for (int i = 5; i < a.rows; ++i)  // pad rows: all zero
            for (int j = 0; j < a.cols; ++j) CHECK(a(i, j) == 0.0);
    }
}

TEST_CASE("single-token input attends only to itself") {
    Model m(tiny_config());
    const ModelOutput out = m.forward(seq({3}));
    for (const auto& a : out.final_attention) {
        REQUIRE(a.rows == 1);
        CHECK(a(0, 0) == 1.0);
    }
}

TEST_CASE("pad suffix content does not affect non-pad logits") {
    Model m(tiny_config());
    const ModelOutput a = m.forward(seq({2, 4, 5, 6, 9, 8}, 4));
    const ModelOutput b = m.forward(seq({2, 4, 5, 6, 8, 9}, 4));
    for (int i = 0; i < 4; ++i)
        for (int v = 0; v < 16; ++v) CHECK(a.logits(i, v) == b.logits(i, v));
}

TEST_CASE("over-length input raises a length error") {
    Model m(tiny_config());
    std::vector<int> ids(17, 3);
    CHECK_THROWS_AS(m.forward(seq(std::move(ids))), LengthError);
}

TEST_CASE("uniform model sequence log-prob equals the closed form") {
    ModelConfig c = tiny_config();
    c.vocab_size = 10;
    TransformerModel<double> m(c);
    zero_params(m);
    const double lp = m.sequence_log_prob(seq({2, 4, 5, 6}));
    CHECK(lp == Catch::Approx(3.0 * std::log(0.1)).epsilon(1e-12));
}

TEST_CASE("sequence log-prob is non-positive and deterministic") {
    Model m(tiny_config());
    const TokenSequence s = seq({2, 4, 5, 6, 7, 8});
    const double a = m.sequence_log_prob(s);
    const double b = m.sequence_log_prob(s);
    CHECK(a == b);
    CHECK(a <= 0.0);
    CHECK_THROWS_AS(m.sequence_log_prob(seq({3})), InputError);
}

TEST_CASE("generate honors budget, determinism and prompt prefix") {
    Model m(tiny_config());
    const TokenSequence prompt = seq({2, 4, 5});

    const TokenSequence same = m.generate(prompt, 0, GenStrategy::greedy());
    CHECK(same.ids == prompt.ids);

    const TokenSequence g1 = m.generate(prompt, 5, GenStrategy::greedy());
    const TokenSequence g2 = m.generate(prompt, 5, GenStrategy::greedy());
    REQUIRE(g1.ids.size() == 8);
    CHECK(g1.ids == g2.ids);
    CHECK(std::equal(prompt.ids.begin(), prompt.ids.end(), g1.ids.begin()));

    const TokenSequence s1 = m.generate(prompt, 5, GenStrategy::sample(99, 1.0));
    const TokenSequence s2 = m.generate(prompt, 5, GenStrategy::sample(99, 1.0));
    CHECK(s1.ids == s2.ids);

    CHECK_THROWS_AS(m.generate(prompt, 14, GenStrategy::greedy()), LengthError);
}
