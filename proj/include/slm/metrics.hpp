#pragma once

#include <span>

#include "slm/sequence_model.hpp"
#include "slm/stage.hpp"

namespace slm {

struct PerplexityResult {
    double perplexity = 0.0;
    double total_log_prob = 0.0;  // natural log, summed over every epoch
    std::size_t epochs = 0;
};

// exp(-(1/N) * sum ln P(stage | history)) over all epochs of all records.
// Histories reset at every record; the first epoch is scored by the model's
// empty-history prediction. Throws DataError on an empty record list or an
// empty record and NumericError on a zero-probability event.
PerplexityResult evaluate_perplexity(const SequenceModel& model,
                                     std::span<const Hypnogram> records);
double perplexity(const SequenceModel& model, std::span<const Hypnogram> records);

// Fraction of epochs where the two sequences agree.
double accuracy(const Hypnogram& pred, const Hypnogram& ref);

// Cohen's two-rater kappa. Returns 1 when chance agreement is already 1
// (both sequences constant and equal).
double cohen_kappa(const Hypnogram& pred, const Hypnogram& ref);

}  // namespace slm
