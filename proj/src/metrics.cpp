#include "slm/metrics.hpp"

#include <cmath>

#include "slm/errors.hpp"

namespace slm {

namespace {

void require_same_length(const Hypnogram& pred, const Hypnogram& ref) {
    if (pred.size() != ref.size()) {
        throw DataError("length mismatch: prediction has " + std::to_string(pred.size()) +
                        " epochs, reference has " + std::to_string(ref.size()));
    }
    if (ref.size() == 0) throw DataError("cannot score empty hypnograms");
}

}  // namespace

PerplexityResult evaluate_perplexity(const SequenceModel& model,
                                     std::span<const Hypnogram> records) {
    if (records.empty()) throw DataError("perplexity needs at least one record");
    PerplexityResult result;
    for (const Hypnogram& rec : records) {
        if (rec.stages.empty()) {
            throw DataError("record '" + rec.record_id + "' is empty");
        }
        auto state = model.start();
        for (std::size_t e = 0; e < rec.stages.size(); ++e) {
            const SleepStage s = rec.stages[e];
            const double p = state->next()[s];
            if (!(p > 0.0)) {
                throw NumericError("zero probability for stage " + std::string(to_string(s)) +
                                   " at epoch " + std::to_string(e) + " of record '" +
                                   rec.record_id + "'");
            }
            result.total_log_prob += std::log(p);
            ++result.epochs;
            if (e + 1 < rec.stages.size()) state = model.advance(*state, s);
        }
    }
    result.perplexity =
        std::exp(-result.total_log_prob / static_cast<double>(result.epochs));
    return result;
}

double perplexity(const SequenceModel& model, std::span<const Hypnogram> records) {
    return evaluate_perplexity(model, records).perplexity;
}

double accuracy(const Hypnogram& pred, const Hypnogram& ref) {
    require_same_length(pred, ref);
    std::size_t hits = 0;
    for (std::size_t e = 0; e < ref.size(); ++e) hits += pred.stages[e] == ref.stages[e];
    return static_cast<double>(hits) / static_cast<double>(ref.size());
}

double cohen_kappa(const Hypnogram& pred, const Hypnogram& ref) {
    require_same_length(pred, ref);
    const double n = static_cast<double>(ref.size());
    StageVector pred_freq{}, ref_freq{};
    std::size_t hits = 0;
    for (std::size_t e = 0; e < ref.size(); ++e) {
        pred_freq[index(pred.stages[e])] += 1.0;
        ref_freq[index(ref.stages[e])] += 1.0;
        hits += pred.stages[e] == ref.stages[e];
    }
    const double observed = static_cast<double>(hits) / n;
    double chance = 0.0;
    for (std::size_t i = 0; i < kNumStages; ++i) chance += (pred_freq[i] / n) * (ref_freq[i] / n);
    if (chance >= 1.0) return 1.0;
    return (observed - chance) / (1.0 - chance);
}

}  // namespace slm
