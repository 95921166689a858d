#include "slm/stage.hpp"

#include <cmath>
#include <numeric>

#include "slm/errors.hpp"

namespace slm {

namespace {

constexpr std::array<std::string_view, kNumStages> kStageNames = {"W", "REM", "N1", "N2", "N3"};

}  // namespace

SleepStage stage_from_index(std::size_t i) {
    if (i >= kNumStages) {
        throw DataError("stage index out of range: " + std::to_string(i));
    }
    return static_cast<SleepStage>(i);
}

std::string_view to_string(SleepStage s) { return kStageNames[index(s)]; }

std::optional<SleepStage> parse_stage(std::string_view token) {
    for (std::size_t i = 0; i < kNumStages; ++i) {
        if (token == kStageNames[i]) return static_cast<SleepStage>(i);
    }
    return std::nullopt;
}

StageDistribution::StageDistribution() { probs_.fill(1.0 / kNumStages); }

StageDistribution::StageDistribution(const StageVector& probs) : probs_(probs) {
    double sum = 0.0;
    for (double p : probs_) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
            throw DataError("stage distribution has a negative or non-finite entry");
        }
        sum += p;
    }
    if (std::abs(sum - 1.0) > kTolerance) {
        throw DataError("stage distribution sums to " + std::to_string(sum));
    }
}

StageDistribution StageDistribution::normalized(const StageVector& weights) {
    double sum = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw DataError("cannot normalize a negative or non-finite weight");
        }
        sum += w;
    }
    if (!(sum > 0.0)) throw DataError("cannot normalize a zero vector");
    StageVector p;
    for (std::size_t i = 0; i < kNumStages; ++i) p[i] = weights[i] / sum;
    return StageDistribution(p, Unchecked{});
}

StageDistribution StageDistribution::point_mass(SleepStage s) {
    StageVector p{};
    p[index(s)] = 1.0;
    return StageDistribution(p, Unchecked{});
}

Hypnogram make_hypnogram(std::string record_id, std::vector<SleepStage> stages,
                         int epoch_seconds) {
    if (stages.empty()) throw DataError("hypnogram '" + record_id + "' has no epochs");
    if (epoch_seconds <= 0) throw DataError("epoch length must be positive");
    return Hypnogram{std::move(record_id), std::move(stages), epoch_seconds};
}

}  // namespace slm
