#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "slm/errors.hpp"
#include "slm/lstm.hpp"
#include "slm/metrics.hpp"
#include "slm/simulator.hpp"

using namespace slm;
using enum SleepStage;

namespace {

// Straight-line forward pass over plain vectors, written separately from the
// library's Eigen implementation. Returns the summed log probability.
double oracle_log_prob(const LstmSlm& model, const std::vector<SleepStage>& stages) {
    const auto& p = model.parameters();
    const int L = model.shape().layers;
    const int H = model.shape().hidden;
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    std::vector<std::vector<double>> h(L, std::vector<double>(H, 0.0)), c = h;
    double total = 0.0;
    for (std::size_t e = 0; e < stages.size(); ++e) {
        const long row = e == 0 ? 5 : static_cast<long>(index(stages[e - 1]));
        std::vector<double> x(static_cast<std::size_t>(p.embedding.cols()));
        for (std::size_t j = 0; j < x.size(); ++j) x[j] = p.embedding(row, static_cast<long>(j));
        for (int l = 0; l < L; ++l) {
            std::vector<double> z(4 * H);
            for (int r = 0; r < 4 * H; ++r) {
                double acc = p.bias[l](r, 0);
                for (std::size_t j = 0; j < x.size(); ++j) acc += p.input_weights[l](r, static_cast<long>(j)) * x[j];
                for (int j = 0; j < H; ++j) acc += p.recurrent_weights[l](r, j) * h[l][j];
                z[r] = acc;
            }
            for (int k = 0; k < H; ++k) {
                const double ig = sig(z[k]), fg = sig(z[H + k]), gg = std::tanh(z[2 * H + k]), og = sig(z[3 * H + k]);
                c[l][k] = fg * c[l][k] + ig * gg;
                h[l][k] = og * std::tanh(c[l][k]);
            }
            x = h[l];
        }
        std::array<double, 5> logits{};
        double peak = -1e300;
        for (int s = 0; s < 5; ++s) {
            logits[s] = p.output_bias(s, 0);
            for (int j = 0; j < H; ++j) logits[s] += p.output_weights(s, j) * x[j];
            peak = std::max(peak, logits[s]);
        }
        double z = 0.0;
        for (double v : logits) z += std::exp(v - peak);
        total += logits[index(stages[e])] - peak - std::log(z);
    }
    return total;
}

std::vector<SleepStage> random_stages(std::size_t n, std::mt19937_64& rng) {
    std::vector<SleepStage> s(n);
    for (auto& x : s) x = stage_from_index(rng() % kNumStages);
    return s;
}

LstmSlm scrambled(const LstmShape& shape, std::uint64_t seed, double scale) {
    // Larger random weights than the trainer's init, so every gate is active.
    LstmParameters p = LstmParameters::zeros(shape);
    Rng rng(seed);
    p.for_each([&](const std::string&, Eigen::MatrixXd& m) {
        for (long i = 0; i < m.size(); ++i) m.data()[i] = (2 * rng.uniform() - 1) * scale;
    });
    return LstmSlm(shape, std::move(p));
}

}  // namespace

TEST_CASE("all-zero parameters give the uniform distribution") {
    const LstmShape shape{2, 5, 3};
    const LstmSlm model(shape, LstmParameters::zeros(shape));
    auto [d, s] = lstm_step(model, LstmState::zeros(shape), std::nullopt);
    for (double p : d.probs()) CHECK(p == doctest::Approx(0.2).epsilon(1e-15));
    auto [d2, s2] = lstm_step(model, s, N2);
    for (double p : d2.probs()) CHECK(p == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("steps are deterministic") {
    const LstmShape shape{1, 8, 4};
    const LstmSlm a(shape, 42), b(shape, 42), c(shape, 43);
    std::mt19937_64 rng(1);
    const auto seq = random_stages(30, rng);
    CHECK(a.predict(seq) == b.predict(seq));
    CHECK(a.predict(seq) == a.predict(seq));
    CHECK_FALSE(a.predict(seq) == c.predict(seq));
}

TEST_CASE("chained steps agree with an independent forward pass") {
    std::mt19937_64 rng(7);
    for (const LstmShape shape : {LstmShape{1, 4, 3}, LstmShape{2, 4, 2}, LstmShape{3, 6, 5}}) {
        for (int trial = 0; trial < 10; ++trial) {
            const LstmSlm model = scrambled(shape, rng(), 1.0);
            const auto seq = random_stages(1 + rng() % 25, rng);
            double chained = 0.0;
            LstmState state = LstmState::zeros(shape);
            for (std::size_t e = 0; e < seq.size(); ++e) {
                auto [d, next] = lstm_step(model, state, e == 0 ? std::nullopt : std::optional(seq[e - 1]));
                chained += std::log(d[seq[e]]);
                state = std::move(next);
            }
            CHECK(chained == doctest::Approx(oracle_log_prob(model, seq)).epsilon(1e-12));
            CHECK(-lstm_loss(model, seq) == doctest::Approx(chained).epsilon(1e-12));
        }
    }
}

TEST_CASE("outputs stay normalized") {
    const LstmSlm model = scrambled({2, 6, 4}, 3, 3.0);
    std::mt19937_64 rng(2);
    auto state = model.start();
    for (int e = 0; e < 200; ++e) {
        double sum = 0.0;
        for (double p : state->next().probs()) sum += p;
        REQUIRE(std::abs(sum - 1.0) < 1e-9);
        state = model.advance(*state, stage_from_index(rng() % kNumStages));
    }
}

TEST_CASE("state dimension mismatch is rejected") {
    const LstmSlm model({1, 4, 3}, 1);
    CHECK_THROWS_AS(lstm_step(model, LstmState::zeros({1, 5, 3}), W), DataError);
    CHECK_THROWS_AS(lstm_step(model, LstmState::zeros({2, 4, 3}), W), DataError);
    CHECK_THROWS_AS(LstmSlm({1, 4, 3}, LstmParameters::zeros({1, 5, 3})), DataError);
}

TEST_CASE("analytic gradients match finite differences") {
    std::mt19937_64 rng(1);
    const Hypnogram seq5 = make_hypnogram("g", {W, N1, N2, N2, REM});
    SUBCASE("seed 1, H = 4, L = 1, five epochs") {
        const LstmSlm model({1, 4, 3}, 1);
        CHECK(lstm_gradient_check(model, seq5) < 1e-4);
    }
    SUBCASE("larger weights and two layers") {
        const LstmSlm model = scrambled({2, 4, 3}, 5, 1.0);
        const Hypnogram seq8 = make_hypnogram("g", random_stages(8, rng));
        CHECK(lstm_gradient_check(model, seq8) < 1e-4);
    }
    SUBCASE("single epoch") {
        const LstmSlm model = scrambled({1, 4, 3}, 9, 1.0);
        CHECK(lstm_gradient_check(model, make_hypnogram("g", {N3})) < 1e-4);
    }
    SUBCASE("a corrupted gradient is caught") {
        const LstmSlm model = scrambled({1, 4, 3}, 11, 1.0);
        const double err = lstm_gradient_check(model, seq5, [](LstmParameters& g) {
            g.recurrent_weights[0] = -g.recurrent_weights[0];
        });
        CHECK(err > 1e-1);
    }
    SUBCASE("preconditions") {
        const LstmSlm model({1, 4, 3}, 1);
        Hypnogram empty{"g", {}, 30};
        CHECK_THROWS_AS(lstm_gradient_check(model, empty), DataError);
        CHECK_THROWS_AS(lstm_gradient_check(model, make_hypnogram("g", random_stages(9, rng))), DataError);
        CHECK_THROWS_AS(lstm_gradient_check(LstmSlm({1, 9, 3}, 1), seq5), DataError);
    }
}

TEST_CASE("serialization preserves every parameter") {
    const LstmSlm model = scrambled({2, 5, 3}, 77, 2.0);
    const std::string text = serialize_lstm(model);
    const LstmSlm back = deserialize_lstm(text);
    CHECK(serialize_lstm(back) == text);
    std::mt19937_64 rng(4);
    for (int i = 0; i < 100; ++i) {
        const auto prefix = random_stages(rng() % 40, rng);
        REQUIRE(model.predict(prefix) == back.predict(prefix));
    }
}

TEST_CASE("malformed model files") {
    const LstmShape shape{1, 4, 2};
    const std::string good = serialize_lstm(LstmSlm(shape, 3));
    CHECK_NOTHROW(deserialize_lstm(good));

    SUBCASE("truncated array") {
        const auto cut = good.find("array layer0.recurrent_weights");
        CHECK_THROWS_AS(deserialize_lstm(good.substr(0, cut + 60)), ParseError);
        CHECK_THROWS_AS(deserialize_lstm(good.substr(0, good.size() - 5)), ParseError);
    }
    SUBCASE("declared hidden size disagrees with an array") {
        std::string bad = good;
        // Output projection gets five columns while the header says H = 4.
        const auto pos = bad.find("array output.weights 5 4");
        REQUIRE(pos != std::string::npos);
        bad.replace(pos, 25, "array output.weights 5 5");
        CHECK_THROWS_AS(deserialize_lstm(bad), ParseError);
    }
    SUBCASE("extra row") {
        std::string bad = good;
        const auto pos = bad.find("array output.bias");
        bad.insert(pos, "0 0 0 0\n");
        CHECK_THROWS_AS(deserialize_lstm(bad), ParseError);
    }
    SUBCASE("non-finite value") {
        std::string bad = good;
        const auto pos = bad.find("array output.bias 5 1\n") + 22;
        bad.replace(pos, bad.find('\n', pos) - pos, "nan");
        CHECK_THROWS_AS(deserialize_lstm(bad), ParseError);
    }
    SUBCASE("header") {
        CHECK_THROWS_AS(deserialize_lstm("SLM-LSTM v2\n" + good.substr(good.find('\n') + 1)), ParseError);
        CHECK_THROWS_AS(deserialize_lstm(""), ParseError);
    }
}

TEST_CASE("training lowers the loss and is reproducible") {
    const auto chain = table1_chain();
    const auto train = sample_corpus(chain, 20, 200, 1);
    const auto valid = sample_corpus(chain, 5, 200, 2);
    TrainConfig cfg;
    cfg.shape = {1, 16, 8};
    cfg.max_epochs = 3;
    cfg.batch_size = 4;
    const auto a = train_lstm(train, valid, cfg);
    const auto b = train_lstm(train, valid, cfg);
    REQUIRE(!a.train_loss.empty());
    CHECK(a.train_loss.front() < a.initial_train_loss);
    CHECK(serialize_lstm(a.model) == serialize_lstm(b.model));
    CHECK(a.valid_perplexity == b.valid_perplexity);
    for (double v : a.valid_perplexity) CHECK(std::isfinite(v));
    CHECK(a.best_epoch >= 1);
    CHECK(perplexity(a.model, valid) == a.valid_perplexity[static_cast<std::size_t>(a.best_epoch - 1)]);
}

TEST_CASE("a constant corpus is learned almost perfectly") {
    std::vector<Hypnogram> train, valid;
    for (int i = 0; i < 20; ++i) train.push_back(make_hypnogram("t" + std::to_string(i), std::vector<SleepStage>(100, W)));
    valid.push_back(make_hypnogram("v", std::vector<SleepStage>(100, W)));
    TrainConfig cfg;
    cfg.shape = {1, 16, 8};
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 1;
    cfg.max_epochs = 10;
    const auto result = train_lstm(train, valid, cfg);
    CHECK(perplexity(result.model, valid) < 1.0 + 1e-2);
}

TEST_CASE("training errors") {
    const std::vector<Hypnogram> some{make_hypnogram("r", {W, N1})};
    TrainConfig cfg;
    CHECK_THROWS_AS(train_lstm({}, some, cfg), DataError);
    CHECK_THROWS_AS(train_lstm(some, {}, cfg), DataError);
    cfg.bptt_len = 0;
    CHECK_THROWS_AS(train_lstm(some, some, cfg), DataError);
    cfg = TrainConfig{};
    cfg.learning_rate = 1e300;  // blows the weights up on the first update
    cfg.shape = {1, 4, 2};
    cfg.clip_norm = 1e300;
    cfg.beta2 = 0.0;
    cfg.max_epochs = 2;
    // Adam normalizes the step, so even this rate yields finite weights of
    // size ~1e300 whose products overflow.
    CHECK_THROWS_AS(train_lstm(some, some, cfg), NumericError);
}

TEST_CASE("LSTM on reference-chain data approaches the entropy-rate floor") {
    const auto chain = table1_chain();
    const auto train = sample_corpus(chain, 100, 1000, 11);
    const auto valid = sample_corpus(chain, 20, 1000, 12);
    TrainConfig cfg;
    cfg.max_epochs = 8;
    const auto result = train_lstm(train, valid, cfg);
    const double floor = entropy_rate_perplexity(chain);
    const double best = result.valid_perplexity[static_cast<std::size_t>(result.best_epoch - 1)];
    CHECK(best < floor * 1.02);
}

TEST_CASE("presets") {
    CHECK(lstm_preset("desk") == LstmShape{1, 64, 16});
    CHECK(lstm_preset("2x1024").hidden == 1024);
    CHECK(lstm_preset("4x256").layers == 4);
    CHECK_THROWS_AS(lstm_preset("3x3"), DataError);
}
