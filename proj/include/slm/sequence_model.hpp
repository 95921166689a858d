#pragma once

#include <memory>
#include <span>
#include <string>

#include "slm/stage.hpp"

namespace slm {

// Incremental state of a sequence model after consuming some history.
// Each state caches the distribution it predicts for the next epoch.
class ModelState {
public:
    virtual ~ModelState() = default;
    virtual const StageDistribution& next() const = 0;
};

// A sleep model: a distribution over the next stage given the stages so far.
// Histories start at a record boundary; start() is the empty history.
//
// Implementations are immutable after construction and may be queried from
// several threads. A ModelState belongs to whoever holds it.
class SequenceModel {
public:
    virtual ~SequenceModel() = default;

    virtual std::unique_ptr<ModelState> start() const = 0;
    virtual std::unique_ptr<ModelState> advance(const ModelState& state, SleepStage s) const = 0;
    virtual std::string name() const = 0;

    // Distribution for the epoch following `history`. The default walks the
    // history through start()/advance().
    virtual StageDistribution predict(std::span<const SleepStage> history) const;
};

// Always predicts 1/5 per stage.
class UniformModel final : public SequenceModel {
public:
    std::unique_ptr<ModelState> start() const override;
    std::unique_ptr<ModelState> advance(const ModelState& state, SleepStage s) const override;
    std::string name() const override { return "uniform"; }
};

}  // namespace slm
