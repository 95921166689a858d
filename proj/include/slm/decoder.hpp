#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include "slm/sequence_model.hpp"
#include "slm/stage.hpp"

namespace slm {

struct DecoderConfig {
    double alpha = 0.42;  // weight of the sleep-model log probability
    std::size_t beam_width = 128;

    void validate() const;
};

// Signal likelihoods are clamped to this before taking logs.
inline constexpr double kLikelihoodFloor = 1e-12;

// Per-epoch argmax; ties go to the lowest canonical stage index.
Hypnogram greedy_decode(const LikelihoodMatrix& likelihoods);

struct DecodeResult {
    Hypnogram hypnogram;
    double log_posterior = 0.0;
};

// Epoch-synchronous beam search over
//   sum_e ln P_sig(s_e) + alpha * ln P_slm(s_e | s_1..s_{e-1}).
// Every survivor is extended by all five stages and the best beam_width
// candidates are kept; equal scores are ordered by the lexicographically
// smaller stage sequence. Hypotheses are never merged.
DecodeResult beam_decode(const LikelihoodMatrix& likelihoods, const SequenceModel& slm,
                         const DecoderConfig& config);

struct SweepRecord {
    LikelihoodMatrix likelihoods;
    Hypnogram reference;
};

struct SweepRow {
    double alpha = 0.0;
    std::size_t width = 1;
    double kappa = 0.0;
    double accuracy = 0.0;
};

// Validation grid used when no alphas are given.
std::vector<double> default_alpha_grid();
inline constexpr std::size_t kDefaultSweepWidth = 128;

// Decodes every record at every (alpha, width) grid point and scores the
// concatenated epochs. Rows are sorted by (alpha, width). `jobs` > 1 decodes
// in parallel without changing the result.
std::vector<SweepRow> sweep(std::span<const SweepRecord> records, const SequenceModel& slm,
                            std::span<const double> alphas, std::span<const std::size_t> widths,
                            unsigned jobs = 1);

// "alpha,width,kappa,accuracy" with six decimals.
void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);

}  // namespace slm
