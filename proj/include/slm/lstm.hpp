#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "slm/sequence_model.hpp"
#include "slm/stage.hpp"

namespace slm {

// Embedding rows: the five stages plus a learned record-start input.
inline constexpr std::size_t kLstmInputs = kNumStages + 1;
inline constexpr std::size_t kStartInput = kNumStages;

struct LstmShape {
    int layers = 1;
    int hidden = 64;
    int embedding = 16;

    void validate() const;
    bool operator==(const LstmShape&) const = default;
};

// All trainable tensors. Gate blocks are stacked input, forget, cell, output.
struct LstmParameters {
    Eigen::MatrixXd embedding;                       // kLstmInputs x E
    std::vector<Eigen::MatrixXd> input_weights;      // per layer: 4H x (E or H)
    std::vector<Eigen::MatrixXd> recurrent_weights;  // per layer: 4H x H
    std::vector<Eigen::MatrixXd> bias;               // per layer: 4H x 1
    Eigen::MatrixXd output_weights;                  // 5 x H
    Eigen::MatrixXd output_bias;                     // 5 x 1

    static LstmParameters zeros(const LstmShape& shape);

    // Visits every tensor with a stable name, in serialization order.
    template <typename F>
    void for_each(F&& f) {
        f(std::string("embedding"), embedding);
        for (std::size_t l = 0; l < input_weights.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            f(p + "input_weights", input_weights[l]);
            f(p + "recurrent_weights", recurrent_weights[l]);
            f(p + "bias", bias[l]);
        }
        f(std::string("output.weights"), output_weights);
        f(std::string("output.bias"), output_bias);
    }
    template <typename F>
    void for_each(F&& f) const {
        const_cast<LstmParameters*>(this)->for_each(
            [&](const std::string& name, Eigen::MatrixXd& m) { f(name, std::as_const(m)); });
    }

    std::size_t size() const;
};

struct LstmState {
    std::vector<Eigen::VectorXd> h;
    std::vector<Eigen::VectorXd> c;

    static LstmState zeros(const LstmShape& shape);
};

class LstmSlm final : public SequenceModel {
public:
    // Small uniform initialization drawn from `seed`.
    LstmSlm(const LstmShape& shape, std::uint64_t seed);
    // Throws DataError when tensor dimensions do not match the shape or a
    // value is non-finite.
    LstmSlm(const LstmShape& shape, LstmParameters params);

    const LstmShape& shape() const { return shape_; }
    const LstmParameters& parameters() const { return params_; }

    // One recurrence step. `prev` is the stage just observed, or nullopt for
    // the record-start input. Returns the next-stage distribution.
    std::pair<StageDistribution, LstmState> step(const LstmState& state,
                                                 std::optional<SleepStage> prev) const;

    std::unique_ptr<ModelState> start() const override;
    std::unique_ptr<ModelState> advance(const ModelState& state, SleepStage s) const override;
    std::string name() const override;

    // "SLM-LSTM v1", the shape, then named arrays with explicit dimensions.
    void write(std::ostream& out) const;
    static LstmSlm read(std::istream& in, const std::string& source = "<stream>");

private:
    void check() const;

    LstmShape shape_;
    LstmParameters params_;
};

std::pair<StageDistribution, LstmState> lstm_step(const LstmSlm& model, const LstmState& state,
                                                  std::optional<SleepStage> prev);

std::string serialize_lstm(const LstmSlm& model);
LstmSlm deserialize_lstm(const std::string& text);

// Summed next-stage cross-entropy (nats) of one record, starting from the
// zero state, and its gradient with respect to every parameter.
double lstm_loss(const LstmSlm& model, std::span<const SleepStage> stages);
double lstm_loss_and_gradient(const LstmSlm& model, std::span<const SleepStage> stages,
                              LstmParameters& gradient);

// Largest relative error between analytic gradients and central finite
// differences (step 1e-5) over every parameter. `mutate`, when set, edits the
// analytic gradient before comparison. Requires 1..8 epochs and hidden <= 8.
double lstm_gradient_check(const LstmSlm& model, const Hypnogram& sequence,
                           const std::function<void(LstmParameters&)>& mutate = {});

struct TrainConfig {
    LstmShape shape;
    double learning_rate = 1e-3;
    int max_epochs = 20;
    int bptt_len = 32;
    int batch_size = 16;
    int patience = 3;
    std::uint64_t seed = 1;
    double clip_norm = 5.0;
    double beta1 = 0.9;
    double beta2 = 0.999;

    void validate() const;
};

// Named shapes: "desk" (1x64, E=16) and the 2x256, 2x1024, 4x256, 4x1024 grid.
LstmShape lstm_preset(const std::string& name);

struct TrainResult {
    LstmSlm model;
    std::vector<double> valid_perplexity;  // one entry per completed epoch
    std::vector<double> train_loss;        // mean nats per epoch after each epoch
    double initial_train_loss = 0.0;
    int best_epoch = 0;                    // 1-based index into valid_perplexity
};

// Adam on truncated-BPTT chunks, global gradient-norm clipping, early stopping
// on validation perplexity. Returns the best model seen. Throws NumericError
// if the loss becomes non-finite.
TrainResult train_lstm(std::span<const Hypnogram> train, std::span<const Hypnogram> valid,
                       const TrainConfig& config,
                       const std::function<void(int epoch, double train_loss, double valid_ppl)>&
                           on_epoch = {});

}  // namespace slm
