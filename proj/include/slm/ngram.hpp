#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "slm/sequence_model.hpp"
#include "slm/stage.hpp"

namespace slm {

// Context symbols: the five stages (by canonical index) plus a record-start
// padding symbol that never appears as a predicted event.
using Token = std::uint8_t;
inline constexpr Token kBoundary = 5;
inline constexpr std::size_t kNumTokens = 6;
inline constexpr int kMaxNgramOrder = 16;

inline Token to_token(SleepStage s) { return static_cast<Token>(index(s)); }
std::string token_text(Token t);

struct NgramConfig {
    int order = 3;
    double smoothing_k = 0.01;
    double interpolation_lambda = 0.99;
};

// Count-based n-gram sleep model.
//
// Every k-gram (k = 1..order) ending at each epoch is counted once, with
// contexts that reach before the record start padded by kBoundary. A query
// with context h of length k-1 is answered recursively:
//
//   P_k(s|h) = lambda * (C(h,s) + k_s) / (C(h) + 5 k_s) + (1 - lambda) * P_{k-1}(s|h')
//
// where h' drops the oldest symbol, k_s is the add-k constant, and the
// recursion is grounded at the add-k unigram. A context with no counts falls
// back to P_{k-1} entirely.
class NgramModel final : public SequenceModel {
public:
    using Counts = std::array<std::uint64_t, kNumStages>;

    // Throws DataError on an empty corpus or an invalid config.
    static NgramModel train(std::span<const Hypnogram> records, const NgramConfig& config);

    int order() const { return config_.order; }
    const NgramConfig& config() const { return config_; }

    // Estimate for an explicit token context, oldest symbol first. Only the
    // last order-1 symbols are used; shorter contexts start the recursion at
    // their own length.
    StageDistribution prob(std::span<const Token> context) const;

    // Stage history from a record start: the history is left-padded with
    // kBoundary to order-1 symbols.
    StageDistribution predict(std::span<const SleepStage> history) const override;

    // nullptr when the context was never observed.
    const Counts* counts(std::span<const Token> context) const;

    // All stored contexts, sorted lexicographically by token index.
    std::vector<std::vector<Token>> contexts() const;
    std::size_t num_contexts() const { return table_.size(); }

    std::unique_ptr<ModelState> start() const override;
    std::unique_ptr<ModelState> advance(const ModelState& state, SleepStage s) const override;
    std::string name() const override;

    // "SLM-NGRAM v1 order=<n> k=<k> lambda=<l>" followed by one
    // "<context or ∅> | <5 counts>" line per context, sorted by context.
    void write(std::ostream& out) const;
    static NgramModel read(std::istream& in, const std::string& source = "<stream>");

private:
    NgramModel() = default;

    static std::uint64_t key(std::span<const Token> context);
    static std::vector<Token> context_of(std::uint64_t key);
    StageVector interpolate(std::span<const Token> context) const;

    NgramConfig config_;
    std::unordered_map<std::uint64_t, Counts> table_;
};

std::string serialize_ngram(const NgramModel& model);
NgramModel deserialize_ngram(const std::string& text);

void validate(const NgramConfig& config);

}  // namespace slm
