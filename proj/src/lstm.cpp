#include "slm/lstm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "slm/errors.hpp"
#include "slm/io.hpp"
#include "slm/metrics.hpp"
#include "slm/simulator.hpp"

namespace slm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr std::string_view kMagic = "SLM-LSTM v1";

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Softmax of `logits` into `out`, stable against large values.
void softmax(const VectorXd& logits, StageVector& out) {
    const double peak = logits.maxCoeff();
    double total = 0.0;
    for (std::size_t s = 0; s < kNumStages; ++s) {
        out[s] = std::exp(logits(static_cast<Eigen::Index>(s)) - peak);
        total += out[s];
    }
    for (double& p : out) p /= total;
}

StageDistribution to_distribution(const StageVector& p) {
    for (double x : p) {
        if (!std::isfinite(x)) throw NumericError("LSTM output is not finite (weights overflowed)");
    }
    // Softmax output can miss 1 by a few ulps; normalized() keeps it exact enough.
    return StageDistribution::normalized(p);
}

class LstmModelState final : public ModelState {
public:
    LstmModelState(StageDistribution next, LstmState state)
        : next_(next), state_(std::move(state)) {}

    const StageDistribution& next() const override { return next_; }
    const LstmState& state() const { return state_; }

private:
    StageDistribution next_;
    LstmState state_;
};

// Activations of one layer over a chunk. Column t of h and c is the state
// after t steps; column 0 is the incoming state.
struct LayerCache {
    MatrixXd x;  // in x T
    MatrixXd h;  // H x (T+1)
    MatrixXd c;  // H x (T+1)
    MatrixXd i, f, g, o, tanh_c;  // H x T
};

struct Chunk {
    std::span<const std::size_t> inputs;   // embedding rows
    std::span<const std::size_t> targets;  // stage indices
};

double forward_chunk(const LstmShape& shape, const LstmParameters& p, const Chunk& chunk,
                     const LstmState& init, std::vector<LayerCache>& caches, MatrixXd& probs,
                     LstmState* final_state) {
    const auto T = static_cast<Eigen::Index>(chunk.inputs.size());
    const Eigen::Index H = shape.hidden;
    caches.resize(static_cast<std::size_t>(shape.layers));
    for (std::size_t l = 0; l < caches.size(); ++l) {
        LayerCache& lc = caches[l];
        if (l == 0) {
            lc.x.resize(shape.embedding, T);
            for (Eigen::Index t = 0; t < T; ++t) {
                lc.x.col(t) = p.embedding.row(static_cast<Eigen::Index>(chunk.inputs[t])).transpose();
            }
        } else {
            lc.x = caches[l - 1].h.rightCols(T);
        }
        const MatrixXd pre = (p.input_weights[l] * lc.x).colwise() + p.bias[l].col(0);
        lc.h.resize(H, T + 1);
        lc.c.resize(H, T + 1);
        lc.h.col(0) = init.h[l];
        lc.c.col(0) = init.c[l];
        lc.i.resize(H, T);
        lc.f.resize(H, T);
        lc.g.resize(H, T);
        lc.o.resize(H, T);
        lc.tanh_c.resize(H, T);
        VectorXd z(4 * H);
        for (Eigen::Index t = 0; t < T; ++t) {
            z.noalias() = pre.col(t) + p.recurrent_weights[l] * lc.h.col(t);
            for (Eigen::Index k = 0; k < H; ++k) {
                lc.i(k, t) = sigmoid(z(k));
                lc.f(k, t) = sigmoid(z(H + k));
                lc.g(k, t) = std::tanh(z(2 * H + k));
                lc.o(k, t) = sigmoid(z(3 * H + k));
                lc.c(k, t + 1) = lc.f(k, t) * lc.c(k, t) + lc.i(k, t) * lc.g(k, t);
                lc.tanh_c(k, t) = std::tanh(lc.c(k, t + 1));
                lc.h(k, t + 1) = lc.o(k, t) * lc.tanh_c(k, t);
            }
        }
    }
    const MatrixXd logits =
        (p.output_weights * caches.back().h.rightCols(T)).colwise() + p.output_bias.col(0);
    probs.resize(static_cast<Eigen::Index>(kNumStages), T);
    double loss = 0.0;
    StageVector dist;
    for (Eigen::Index t = 0; t < T; ++t) {
        softmax(logits.col(t), dist);
        for (std::size_t s = 0; s < kNumStages; ++s) probs(static_cast<Eigen::Index>(s), t) = dist[s];
        loss -= std::log(dist[chunk.targets[t]]);
    }
    if (final_state) {
        *final_state = LstmState::zeros(shape);
        for (std::size_t l = 0; l < caches.size(); ++l) {
            final_state->h[l] = caches[l].h.col(T);
            final_state->c[l] = caches[l].c.col(T);
        }
    }
    return loss;
}

// Accumulates d(loss)/d(params) of the chunk into `grad`. The incoming state
// is treated as a constant.
void backward_chunk(const LstmShape& shape, const LstmParameters& p, const Chunk& chunk,
                    const std::vector<LayerCache>& caches, const MatrixXd& probs,
                    LstmParameters& grad) {
    const auto T = static_cast<Eigen::Index>(chunk.inputs.size());
    const Eigen::Index H = shape.hidden;

    MatrixXd dlogits = probs;
    for (Eigen::Index t = 0; t < T; ++t) dlogits(static_cast<Eigen::Index>(chunk.targets[t]), t) -= 1.0;
    grad.output_weights.noalias() += dlogits * caches.back().h.rightCols(T).transpose();
    grad.output_bias.col(0) += dlogits.rowwise().sum();
    MatrixXd dh_above = p.output_weights.transpose() * dlogits;  // H x T

    for (std::size_t l = caches.size(); l-- > 0;) {
        const LayerCache& lc = caches[l];
        MatrixXd dz(4 * H, T);
        VectorXd dh_next = VectorXd::Zero(H);
        VectorXd dc_next = VectorXd::Zero(H);
        for (Eigen::Index t = T - 1; t >= 0; --t) {
            for (Eigen::Index k = 0; k < H; ++k) {
                const double dh = dh_above(k, t) + dh_next(k);
                const double o = lc.o(k, t), i = lc.i(k, t), f = lc.f(k, t), g = lc.g(k, t);
                const double tc = lc.tanh_c(k, t);
                const double dc = dc_next(k) + dh * o * (1.0 - tc * tc);
                dz(k, t) = dc * g * i * (1.0 - i);
                dz(H + k, t) = dc * lc.c(k, t) * f * (1.0 - f);
                dz(2 * H + k, t) = dc * i * (1.0 - g * g);
                dz(3 * H + k, t) = dh * tc * o * (1.0 - o);
                dc_next(k) = dc * f;
            }
            dh_next.noalias() = p.recurrent_weights[l].transpose() * dz.col(t);
        }
        grad.input_weights[l].noalias() += dz * lc.x.transpose();
        grad.recurrent_weights[l].noalias() += dz * lc.h.leftCols(T).transpose();
        grad.bias[l].col(0) += dz.rowwise().sum();
        MatrixXd dx = p.input_weights[l].transpose() * dz;
        if (l > 0) {
            dh_above = std::move(dx);
        } else {
            for (Eigen::Index t = 0; t < T; ++t) {
                grad.embedding.row(static_cast<Eigen::Index>(chunk.inputs[t])) += dx.col(t).transpose();
            }
        }
    }
}

struct Sequence {
    std::vector<std::size_t> inputs;
    std::vector<std::size_t> targets;
};

Sequence to_sequence(std::span<const SleepStage> stages) {
    Sequence seq;
    seq.inputs.reserve(stages.size());
    seq.targets.reserve(stages.size());
    seq.inputs.push_back(kStartInput);
    for (std::size_t e = 0; e < stages.size(); ++e) {
        if (e > 0) seq.inputs.push_back(index(stages[e - 1]));
        seq.targets.push_back(index(stages[e]));
    }
    return seq;
}

double sequence_loss(const LstmShape& shape, const LstmParameters& p,
                     std::span<const SleepStage> stages, LstmParameters* grad) {
    if (stages.empty()) return 0.0;
    const Sequence seq = to_sequence(stages);
    const Chunk chunk{seq.inputs, seq.targets};
    std::vector<LayerCache> caches;
    MatrixXd probs;
    const double loss =
        forward_chunk(shape, p, chunk, LstmState::zeros(shape), caches, probs, nullptr);
    if (grad) backward_chunk(shape, p, chunk, caches, probs, *grad);
    return loss;
}

void fill_uniform(MatrixXd& m, double scale, Rng& rng) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = (2.0 * rng.uniform() - 1.0) * scale;
    }
}

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> words(std::string_view s) {
    std::istringstream in{std::string(s)};
    std::vector<std::string> out;
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

}  // namespace

void LstmShape::validate() const {
    if (layers < 1 || hidden < 1 || embedding < 1) {
        throw DataError("LSTM layers, hidden size and embedding size must be positive");
    }
}

LstmParameters LstmParameters::zeros(const LstmShape& shape) {
    shape.validate();
    const Eigen::Index H = shape.hidden;
    LstmParameters p;
    p.embedding = MatrixXd::Zero(static_cast<Eigen::Index>(kLstmInputs), shape.embedding);
    for (int l = 0; l < shape.layers; ++l) {
        p.input_weights.push_back(MatrixXd::Zero(4 * H, l == 0 ? shape.embedding : H));
        p.recurrent_weights.push_back(MatrixXd::Zero(4 * H, H));
        p.bias.push_back(MatrixXd::Zero(4 * H, 1));
    }
    p.output_weights = MatrixXd::Zero(static_cast<Eigen::Index>(kNumStages), H);
    p.output_bias = MatrixXd::Zero(static_cast<Eigen::Index>(kNumStages), 1);
    return p;
}

std::size_t LstmParameters::size() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const MatrixXd& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

LstmState LstmState::zeros(const LstmShape& shape) {
    LstmState s;
    for (int l = 0; l < shape.layers; ++l) {
        s.h.push_back(VectorXd::Zero(shape.hidden));
        s.c.push_back(VectorXd::Zero(shape.hidden));
    }
    return s;
}

LstmSlm::LstmSlm(const LstmShape& shape, std::uint64_t seed)
    : shape_(shape), params_(LstmParameters::zeros(shape)) {
    Rng rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(shape.hidden));
    fill_uniform(params_.embedding, 0.1, rng);
    for (int l = 0; l < shape.layers; ++l) {
        fill_uniform(params_.input_weights[l], scale, rng);
        fill_uniform(params_.recurrent_weights[l], scale, rng);
        params_.bias[l].block(shape.hidden, 0, shape.hidden, 1).setOnes();  // forget gate
    }
    fill_uniform(params_.output_weights, scale, rng);
}

LstmSlm::LstmSlm(const LstmShape& shape, LstmParameters params)
    : shape_(shape), params_(std::move(params)) {
    check();
}

void LstmSlm::check() const {
    shape_.validate();
    const LstmParameters expected = LstmParameters::zeros(shape_);
    if (params_.input_weights.size() != expected.input_weights.size() ||
        params_.recurrent_weights.size() != expected.recurrent_weights.size() ||
        params_.bias.size() != expected.bias.size()) {
        throw DataError("LSTM parameter layer count does not match the shape");
    }
    std::vector<std::pair<Eigen::Index, Eigen::Index>> dims;
    expected.for_each([&](const std::string&, const MatrixXd& m) { dims.emplace_back(m.rows(), m.cols()); });
    std::size_t k = 0;
    params_.for_each([&](const std::string& name, const MatrixXd& m) {
        if (m.rows() != dims[k].first || m.cols() != dims[k].second) {
            throw DataError("LSTM tensor " + name + " is " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()) + ", expected " + std::to_string(dims[k].first) +
                            "x" + std::to_string(dims[k].second));
        }
        if (!m.allFinite()) throw DataError("LSTM tensor " + name + " has a non-finite value");
        ++k;
    });
}

std::pair<StageDistribution, LstmState> LstmSlm::step(const LstmState& state,
                                                      std::optional<SleepStage> prev) const {
    const Eigen::Index H = shape_.hidden;
    if (state.h.size() != static_cast<std::size_t>(shape_.layers) || state.c.size() != state.h.size()) {
        throw DataError("LSTM state has the wrong number of layers");
    }
    for (std::size_t l = 0; l < state.h.size(); ++l) {
        if (state.h[l].size() != H || state.c[l].size() != H) {
            throw DataError("LSTM state has the wrong hidden size");
        }
    }
    const auto row = static_cast<Eigen::Index>(prev ? index(*prev) : kStartInput);
    LstmState next = state;
    VectorXd x = params_.embedding.row(row).transpose();
    VectorXd z(4 * H);
    for (std::size_t l = 0; l < state.h.size(); ++l) {
        z.noalias() = params_.input_weights[l] * x;
        z.noalias() += params_.recurrent_weights[l] * state.h[l];
        z += params_.bias[l].col(0);
        for (Eigen::Index k = 0; k < H; ++k) {
            const double i = sigmoid(z(k));
            const double f = sigmoid(z(H + k));
            const double g = std::tanh(z(2 * H + k));
            const double o = sigmoid(z(3 * H + k));
            next.c[l](k) = f * state.c[l](k) + i * g;
            next.h[l](k) = o * std::tanh(next.c[l](k));
        }
        x = next.h[l];
    }
    const VectorXd logits = params_.output_weights * x + params_.output_bias.col(0);
    StageVector p;
    softmax(logits, p);
    return {to_distribution(p), std::move(next)};
}

std::pair<StageDistribution, LstmState> lstm_step(const LstmSlm& model, const LstmState& state,
                                                  std::optional<SleepStage> prev) {
    return model.step(state, prev);
}

std::unique_ptr<ModelState> LstmSlm::start() const {
    auto [dist, state] = step(LstmState::zeros(shape_), std::nullopt);
    return std::make_unique<LstmModelState>(dist, std::move(state));
}

std::unique_ptr<ModelState> LstmSlm::advance(const ModelState& state, SleepStage s) const {
    const auto& prev = dynamic_cast<const LstmModelState&>(state);
    auto [dist, next] = step(prev.state(), s);
    return std::make_unique<LstmModelState>(dist, std::move(next));
}

std::string LstmSlm::name() const {
    return "lstm-" + std::to_string(shape_.layers) + "x" + std::to_string(shape_.hidden);
}

void LstmSlm::write(std::ostream& out) const {
    out << kMagic << '\n'
        << "layers " << shape_.layers << '\n'
        << "hidden " << shape_.hidden << '\n'
        << "embedding " << shape_.embedding << '\n';
    params_.for_each([&](const std::string& name, const MatrixXd& m) {
        out << "array " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? " " : "") << format_double(m(r, c));
            out << '\n';
        }
    });
    out << "end\n";
}

LstmSlm LstmSlm::read(std::istream& in, const std::string& source) {
    std::size_t lineno = 0;
    std::string line;
    auto next_line = [&]() -> std::string_view {
        while (std::getline(in, line)) {
            ++lineno;
            const std::string_view text = trim(line);
            if (!text.empty()) return text;
        }
        throw ParseError(source, lineno + 1, "unexpected end of file");
    };
    if (next_line() != kMagic) throw ParseError(source, lineno, "expected header 'SLM-LSTM v1'");

    LstmShape shape;
    auto read_field = [&](std::string_view name) {
        const auto w = words(next_line());
        int value = 0;
        try {
            if (w.size() != 2 || w[0] != name) throw std::invalid_argument("");
            std::size_t used = 0;
            value = std::stoi(w[1], &used);
            if (used != w[1].size()) throw std::invalid_argument("");
        } catch (const std::exception&) {
            throw ParseError(source, lineno, "expected '" + std::string(name) + " <integer>'");
        }
        if (value < 1) throw ParseError(source, lineno, std::string(name) + " must be positive");
        return value;
    };
    shape.layers = read_field("layers");
    shape.hidden = read_field("hidden");
    shape.embedding = read_field("embedding");

    LstmParameters params = LstmParameters::zeros(shape);
    params.for_each([&](const std::string& name, MatrixXd& m) {
        const auto w = words(next_line());
        if (w.size() != 4 || w[0] != "array") {
            throw ParseError(source, lineno, "expected 'array " + name + " <rows> <cols>'");
        }
        if (w[1] != name) throw ParseError(source, lineno, "expected array " + name + ", found " + w[1]);
        const std::string expected_dims = std::to_string(m.rows()) + " " + std::to_string(m.cols());
        if (w[2] + " " + w[3] != expected_dims) {
            throw ParseError(source, lineno,
                             "array " + name + " declared " + w[2] + "x" + w[3] + ", shape requires " +
                                 std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
        }
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            const std::string_view text = next_line();
            if (text.starts_with("array") || text == "end") {
                throw ParseError(source, lineno, "array " + name + " is truncated");
            }
            const auto values = words(text);
            if (values.size() != static_cast<std::size_t>(m.cols())) {
                throw ParseError(source, lineno, "array " + name + " row has " +
                                                     std::to_string(values.size()) + " values, expected " +
                                                     std::to_string(m.cols()));
            }
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                double v;
                if (!parse_double(values[static_cast<std::size_t>(c)], v)) {
                    throw ParseError(source, lineno, "not a number: '" + values[static_cast<std::size_t>(c)] + "'");
                }
                if (!std::isfinite(v)) throw ParseError(source, lineno, "non-finite value in " + name);
                m(r, c) = v;
            }
        }
    });
    const std::string_view tail = next_line();
    if (tail != "end") throw ParseError(source, lineno, "expected 'end' (extra rows in the last array?)");
    return LstmSlm(shape, std::move(params));
}

std::string serialize_lstm(const LstmSlm& model) {
    std::ostringstream out;
    model.write(out);
    return out.str();
}

LstmSlm deserialize_lstm(const std::string& text) {
    std::istringstream in(text);
    return LstmSlm::read(in);
}

double lstm_loss(const LstmSlm& model, std::span<const SleepStage> stages) {
    return sequence_loss(model.shape(), model.parameters(), stages, nullptr);
}

double lstm_loss_and_gradient(const LstmSlm& model, std::span<const SleepStage> stages,
                              LstmParameters& gradient) {
    gradient = LstmParameters::zeros(model.shape());
    return sequence_loss(model.shape(), model.parameters(), stages, &gradient);
}

namespace {

// Plain forward pass in long double. Finite differences of a double loss lose
// about eps * loss / step to rounding, which swamps gradients near 1e-6.
long double reference_loss(const LstmShape& shape, const LstmParameters& p,
                           std::span<const SleepStage> stages) {
    using Vec = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
    const int H = shape.hidden;
    const auto L = static_cast<std::size_t>(shape.layers);
    std::vector<Vec> h(L, Vec::Zero(H)), c(L, Vec::Zero(H));
    auto sigmoid = [](long double x) { return 1.0L / (1.0L + std::exp(-x)); };
    long double loss = 0.0L;
    for (std::size_t e = 0; e < stages.size(); ++e) {
        const Eigen::Index row = e == 0 ? static_cast<Eigen::Index>(kStartInput)
                                        : static_cast<Eigen::Index>(index(stages[e - 1]));
        Vec x = p.embedding.row(row).transpose().cast<long double>();
        for (std::size_t l = 0; l < L; ++l) {
            const Vec z = p.input_weights[l].cast<long double>() * x +
                          p.recurrent_weights[l].cast<long double>() * h[l] + p.bias[l].cast<long double>();
            for (int k = 0; k < H; ++k) {
                const long double i = sigmoid(z(k)), f = sigmoid(z(H + k));
                const long double g = std::tanh(z(2 * H + k)), o = sigmoid(z(3 * H + k));
                c[l](k) = f * c[l](k) + i * g;
                h[l](k) = o * std::tanh(c[l](k));
            }
            x = h[l];
        }
        const Vec logits = p.output_weights.cast<long double>() * x + p.output_bias.cast<long double>();
        const long double peak = logits.maxCoeff();
        long double z = 0.0L;
        for (Eigen::Index s = 0; s < logits.size(); ++s) z += std::exp(logits(s) - peak);
        loss -= logits(static_cast<Eigen::Index>(index(stages[e]))) - peak - std::log(z);
    }
    return loss;
}

}  // namespace

double lstm_gradient_check(const LstmSlm& model, const Hypnogram& sequence,
                           const std::function<void(LstmParameters&)>& mutate) {
    if (sequence.stages.empty() || sequence.stages.size() > 8) {
        throw DataError("gradient check needs a sequence of 1..8 epochs");
    }
    if (model.shape().hidden > 8) throw DataError("gradient check needs hidden size <= 8");

    LstmParameters analytic;
    lstm_loss_and_gradient(model, sequence.stages, analytic);
    if (mutate) mutate(analytic);

    constexpr double kStep = 1e-5;
    // Gradients smaller than this are compared in absolute terms.
    constexpr double kFloor = 1e-6;
    LstmParameters probe = model.parameters();
    std::vector<const MatrixXd*> grads;
    analytic.for_each([&](const std::string&, const MatrixXd& m) { grads.push_back(&m); });

    double worst = 0.0;
    std::size_t k = 0;
    probe.for_each([&](const std::string&, MatrixXd& m) {
        const MatrixXd& g = *grads[k++];
        for (Eigen::Index idx = 0; idx < m.size(); ++idx) {
            const double saved = m.data()[idx];
            m.data()[idx] = saved + kStep;
            const long double up = reference_loss(model.shape(), probe, sequence.stages);
            m.data()[idx] = saved - kStep;
            const long double down = reference_loss(model.shape(), probe, sequence.stages);
            m.data()[idx] = saved;
            // Divide by the step actually taken once rounded to double.
            const double numeric =
                static_cast<double>((up - down) / (static_cast<long double>(saved + kStep) - (saved - kStep)));
            const double a = g.data()[idx];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kFloor});
            worst = std::max(worst, err);
        }
    });
    return worst;
}

void TrainConfig::validate() const {
    shape.validate();
    if (!(learning_rate > 0.0) || max_epochs < 1 || bptt_len < 1 || batch_size < 1 || patience < 1 ||
        !(clip_norm > 0.0)) {
        throw DataError("LSTM training settings must all be positive");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw DataError("Adam betas must lie in [0, 1)");
    }
}

LstmShape lstm_preset(const std::string& name) {
    if (name == "desk") return {1, 64, 16};
    if (name == "2x256") return {2, 256, 64};
    if (name == "2x1024") return {2, 1024, 64};
    if (name == "4x256") return {4, 256, 64};
    if (name == "4x1024") return {4, 1024, 64};
    throw DataError("unknown LSTM preset '" + name + "' (desk, 2x256, 2x1024, 4x256, 4x1024)");
}

TrainResult train_lstm(std::span<const Hypnogram> train, std::span<const Hypnogram> valid,
                       const TrainConfig& config,
                       const std::function<void(int, double, double)>& on_epoch) {
    config.validate();
    if (train.empty() || valid.empty()) throw DataError("LSTM training needs non-empty train and valid splits");

    const LstmShape& shape = config.shape;
    LstmSlm initial(shape, config.seed);
    LstmParameters params = initial.parameters();

    std::vector<Sequence> sequences;
    for (const Hypnogram& rec : train) {
        if (rec.stages.empty()) throw DataError("record '" + rec.record_id + "' is empty");
        sequences.push_back(to_sequence(rec.stages));
    }

    TrainResult result{initial, {}, {}, 0.0, 0};
    result.initial_train_loss = std::log(perplexity(initial, train));

    LstmParameters grad = LstmParameters::zeros(shape);
    LstmParameters adam_m = LstmParameters::zeros(shape);
    LstmParameters adam_v = LstmParameters::zeros(shape);
    Rng shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(sequences.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    long long step = 0;
    std::size_t batch_chunks = 0;
    std::size_t batch_tokens = 0;

    auto apply_update = [&] {
        if (batch_tokens == 0) return;
        const double scale = 1.0 / static_cast<double>(batch_tokens);
        double norm2 = 0.0;
        grad.for_each([&](const std::string&, MatrixXd& g) {
            g *= scale;
            norm2 += g.squaredNorm();
        });
        const double norm = std::sqrt(norm2);
        if (!std::isfinite(norm)) {
            throw NumericError("non-finite gradient at training step " + std::to_string(step + 1));
        }
        const double clip = norm > config.clip_norm ? config.clip_norm / norm : 1.0;
        ++step;
        const double correction1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
        const double correction2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
        std::vector<MatrixXd*> g_list, m_list, v_list;
        grad.for_each([&](const std::string&, MatrixXd& m) { g_list.push_back(&m); });
        adam_m.for_each([&](const std::string&, MatrixXd& m) { m_list.push_back(&m); });
        adam_v.for_each([&](const std::string&, MatrixXd& m) { v_list.push_back(&m); });
        std::size_t k = 0;
        params.for_each([&](const std::string&, MatrixXd& theta) {
            MatrixXd& g = *g_list[k];
            MatrixXd& m = *m_list[k];
            MatrixXd& v = *v_list[k];
            g *= clip;
            m = config.beta1 * m + (1.0 - config.beta1) * g;
            v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
            theta.array() -= config.learning_rate * (m.array() / correction1) /
                             ((v.array() / correction2).sqrt() + 1e-8);
            g.setZero();
            ++k;
            if (!theta.allFinite()) {
                throw NumericError("non-finite parameter after training step " + std::to_string(step));
            }
        });
        batch_chunks = 0;
        batch_tokens = 0;
    };

    double best_ppl = std::numeric_limits<double>::infinity();
    int since_best = 0;
    std::vector<LayerCache> caches;
    MatrixXd probs;
    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(shuffle_rng.uniform() * static_cast<double>(i));
            std::swap(order[i - 1], order[std::min(j, i - 1)]);
        }
        for (std::size_t r : order) {
            const Sequence& seq = sequences[r];
            LstmState state = LstmState::zeros(shape);
            for (std::size_t begin = 0; begin < seq.inputs.size();
                 begin += static_cast<std::size_t>(config.bptt_len)) {
                const std::size_t len =
                    std::min(static_cast<std::size_t>(config.bptt_len), seq.inputs.size() - begin);
                const Chunk chunk{std::span(seq.inputs).subspan(begin, len),
                                  std::span(seq.targets).subspan(begin, len)};
                LstmState next;
                const double loss = forward_chunk(shape, params, chunk, state, caches, probs, &next);
                if (!std::isfinite(loss)) {
                    throw NumericError("non-finite loss at training step " + std::to_string(step + 1) +
                                       " (epoch " + std::to_string(epoch) + ")");
                }
                backward_chunk(shape, params, chunk, caches, probs, grad);
                state = std::move(next);
                batch_tokens += len;
                if (++batch_chunks == static_cast<std::size_t>(config.batch_size)) apply_update();
            }
        }
        apply_update();

        LstmSlm current(shape, params);
        const double valid_ppl = perplexity(current, valid);
        const double train_loss = std::log(perplexity(current, train));
        if (!std::isfinite(valid_ppl) || !std::isfinite(train_loss)) {
            throw NumericError("non-finite loss after epoch " + std::to_string(epoch));
        }
        result.valid_perplexity.push_back(valid_ppl);
        result.train_loss.push_back(train_loss);
        if (on_epoch) on_epoch(epoch, train_loss, valid_ppl);
        if (valid_ppl < best_ppl) {
            best_ppl = valid_ppl;
            result.model = std::move(current);
            result.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= config.patience) {
            break;
        }
    }
    return result;
}

}  // namespace slm
