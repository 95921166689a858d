#include "slm/sequence_model.hpp"

namespace slm {

StageDistribution SequenceModel::predict(std::span<const SleepStage> history) const {
    auto state = start();
    for (SleepStage s : history) state = advance(*state, s);
    return state->next();
}

namespace {

class UniformState final : public ModelState {
public:
    const StageDistribution& next() const override { return dist_; }

private:
    StageDistribution dist_;
};

}  // namespace

std::unique_ptr<ModelState> UniformModel::start() const {
    return std::make_unique<UniformState>();
}

std::unique_ptr<ModelState> UniformModel::advance(const ModelState&, SleepStage) const {
    return std::make_unique<UniformState>();
}

}  // namespace slm
