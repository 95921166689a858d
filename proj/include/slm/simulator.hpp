#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "slm/io.hpp"
#include "slm/sequence_model.hpp"
#include "slm/stage.hpp"

namespace slm {

// First-order chain over stages: transition[from][to].
struct MarkovChain {
    StageMatrix transition{};
    StageDistribution initial = StageDistribution::point_mass(SleepStage::W);

    // Throws DataError unless every row is a valid distribution.
    void validate() const;
};

// P(observed symbol o | true stage s) = confusion[s][o].
struct EmissionModel {
    StageMatrix confusion{};

    void validate() const;
};

// Order-k source: the next stage depends on the last k stages.
struct HigherOrderSource {
    int order = 1;
    // rows[code(context)] where code is the base-5 number of the context,
    // oldest stage most significant.
    std::vector<StageDistribution> rows;
    // Distribution over the first `order` stages of a record.
    std::vector<std::pair<std::vector<SleepStage>, double>> initial;

    const StageDistribution& row(std::span<const SleepStage> context) const;
    void validate() const;
};

// Reference bigram table at three decimals (rows sum to 0.996..1.0).
StageMatrix table1_raw();
// The same table with every row renormalized; starts in W.
MarkovChain table1_chain();

EmissionModel identity_emission();
EmissionModel uniform_emission();
// `diagonal` on the diagonal, the remainder spread evenly off it.
EmissionModel noisy_emission(double diagonal = 0.6);

// Built-in order-3 source: table1_chain with dwell-dependent self-transitions
// and a pull back to the previous stage right after a transition. Records
// start with W W W.
HigherOrderSource order3_fixture();

// Deterministic generator: mt19937_64 with a portable uniform mapping.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform();  // [0, 1)
    std::size_t sample(const StageVector& probs);
    std::size_t sample(std::span<const double> probs);

private:
    std::mt19937_64 engine_;
};

inline constexpr std::size_t kDefaultRecordLength = 960;

Hypnogram sample_hypnogram(const MarkovChain& chain, std::size_t length, Rng& rng,
                           std::string record_id = "rec0");
Hypnogram sample_hypnogram(const MarkovChain& chain, std::size_t length, std::uint64_t seed,
                           std::string record_id = "rec0");
Hypnogram sample_hypnogram(const HigherOrderSource& source, std::size_t length, Rng& rng,
                           std::string record_id = "rec0");
Hypnogram sample_hypnogram(const HigherOrderSource& source, std::size_t length,
                           std::uint64_t seed, std::string record_id = "rec0");

// `count` records named rec0000, rec0001, ... drawn from one seeded stream.
template <typename Source>
std::vector<Hypnogram> sample_corpus(const Source& source, std::size_t count, std::size_t length,
                                     std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Hypnogram> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "rec%04zu", i);
        out.push_back(sample_hypnogram(source, length, rng, id));
    }
    return out;
}

// Per epoch: draw o ~ confusion[true stage], emit the column confusion[., o]
// normalized (posterior under a uniform stage prior).
LikelihoodMatrix emit_likelihoods(const Hypnogram& truth, const EmissionModel& emission,
                                  Rng& rng);
LikelihoodMatrix emit_likelihoods(const Hypnogram& truth, const EmissionModel& emission,
                                  std::uint64_t seed);

// Stationary distribution by power iteration (tolerance 1e-12, at most 1e6
// steps). Throws DataError for reducible chains and NumericError when the
// iteration does not settle.
StageVector stationary_distribution(const MarkovChain& chain);

// exp of the chain's entropy rate: the best perplexity any model can reach
// on the chain's output.
double entropy_rate_perplexity(const MarkovChain& chain);

// The generators themselves as sleep models.
class ChainModel final : public SequenceModel {
public:
    explicit ChainModel(MarkovChain chain);

    std::unique_ptr<ModelState> start() const override;
    std::unique_ptr<ModelState> advance(const ModelState& state, SleepStage s) const override;
    std::string name() const override { return "markov-chain"; }

private:
    MarkovChain chain_;
};

// Scores the first `order` epochs with the marginals of the initial context
// distribution and the rest with the source's conditional rows.
class SourceModel final : public SequenceModel {
public:
    explicit SourceModel(HigherOrderSource source);

    std::unique_ptr<ModelState> start() const override;
    std::unique_ptr<ModelState> advance(const ModelState& state, SleepStage s) const override;
    std::string name() const override { return "order-" + std::to_string(source_.order) + "-source"; }

private:
    StageDistribution distribution_after(const std::vector<SleepStage>& history) const;

    HigherOrderSource source_;
};

MarkovChain read_chain(const std::filesystem::path& path, std::vector<std::string>* warnings = nullptr);
EmissionModel read_emission(const std::filesystem::path& path,
                            std::vector<std::string>* warnings = nullptr);

// "SLM-SOURCE v1 order=<k>", then "init <k stages> | <p>" lines and one
// "<k stages> | <5 probabilities>" line per context.
void write_source(std::ostream& out, const HigherOrderSource& source);
HigherOrderSource read_source(std::istream& in, const std::string& source_name = "<stream>");
HigherOrderSource read_source(const std::filesystem::path& path);

}  // namespace slm
