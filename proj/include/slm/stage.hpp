#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace slm {

// AASM sleep classes. The numeric values are the canonical index order used
// for every 5-vector and 5x5 matrix in the library.
enum class SleepStage : std::uint8_t { W = 0, REM = 1, N1 = 2, N2 = 3, N3 = 4 };

inline constexpr std::size_t kNumStages = 5;

inline constexpr std::array<SleepStage, kNumStages> kAllStages = {
    SleepStage::W, SleepStage::REM, SleepStage::N1, SleepStage::N2, SleepStage::N3};

constexpr std::size_t index(SleepStage s) { return static_cast<std::size_t>(s); }

SleepStage stage_from_index(std::size_t i);
std::string_view to_string(SleepStage s);
std::optional<SleepStage> parse_stage(std::string_view token);

using StageVector = std::array<double, kNumStages>;

// A probability vector over the five stages.
class StageDistribution {
public:
    static constexpr double kTolerance = 1e-9;

    StageDistribution();  // uniform

    // Throws DataError unless every entry is >= 0 and the sum is within
    // kTolerance of 1.
    explicit StageDistribution(const StageVector& probs);

    // Scales a non-negative vector with positive mass to sum to one.
    static StageDistribution normalized(const StageVector& weights);
    static StageDistribution point_mass(SleepStage s);

    double operator[](SleepStage s) const { return probs_[index(s)]; }
    double operator[](std::size_t i) const { return probs_[i]; }
    const StageVector& probs() const { return probs_; }

    bool operator==(const StageDistribution&) const = default;

private:
    struct Unchecked {};
    StageDistribution(const StageVector& probs, Unchecked) : probs_(probs) {}

    StageVector probs_;
};

// One night of scoring. Stages are never empty once constructed through
// make_hypnogram or the readers in io.hpp.
struct Hypnogram {
    std::string record_id;
    std::vector<SleepStage> stages;
    int epoch_seconds = 30;

    std::size_t size() const { return stages.size(); }
    bool operator==(const Hypnogram&) const = default;
};

Hypnogram make_hypnogram(std::string record_id, std::vector<SleepStage> stages,
                         int epoch_seconds = 30);

// Per-epoch signal-model probabilities, one row per epoch.
struct LikelihoodMatrix {
    std::vector<StageDistribution> rows;

    std::size_t size() const { return rows.size(); }
    bool empty() const { return rows.empty(); }
    bool operator==(const LikelihoodMatrix&) const = default;
};

}  // namespace slm
