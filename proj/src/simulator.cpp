#include "slm/simulator.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "slm/errors.hpp"

namespace slm {

namespace {

void validate_rows(const StageMatrix& m, const char* what) {
    for (std::size_t r = 0; r < kNumStages; ++r) {
        try {
            StageDistribution check(m[r]);
        } catch (const DataError& e) {
            throw DataError(std::string(what) + " row " + std::string(to_string(stage_from_index(r))) +
                            ": " + e.what());
        }
    }
}

std::size_t context_code(std::span<const SleepStage> context) {
    std::size_t code = 0;
    for (SleepStage s : context) code = code * kNumStages + index(s);
    return code;
}

std::vector<SleepStage> context_from_code(std::size_t code, int order) {
    std::vector<SleepStage> context(static_cast<std::size_t>(order));
    for (auto it = context.rbegin(); it != context.rend(); ++it) {
        *it = stage_from_index(code % kNumStages);
        code /= kNumStages;
    }
    return context;
}

std::size_t pow5(int k) {
    std::size_t n = 1;
    for (int i = 0; i < k; ++i) n *= kNumStages;
    return n;
}

class DistState final : public ModelState {
public:
    DistState(StageDistribution next, std::vector<SleepStage> tail)
        : next_(next), tail_(std::move(tail)) {}

    const StageDistribution& next() const override { return next_; }
    const std::vector<SleepStage>& tail() const { return tail_; }

private:
    StageDistribution next_;
    std::vector<SleepStage> tail_;
};

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

void MarkovChain::validate() const { validate_rows(transition, "transition"); }

void EmissionModel::validate() const {
    validate_rows(confusion, "emission");
    for (std::size_t o = 0; o < kNumStages; ++o) {
        double column = 0.0;
        for (std::size_t s = 0; s < kNumStages; ++s) column += confusion[s][o];
        if (!(column > 0.0)) {
            throw DataError("emission column " + std::string(to_string(stage_from_index(o))) +
                            " is zero: that observation is impossible under every stage");
        }
    }
}

const StageDistribution& HigherOrderSource::row(std::span<const SleepStage> context) const {
    if (context.size() != static_cast<std::size_t>(order)) {
        throw DataError("source context must have exactly " + std::to_string(order) + " stages");
    }
    return rows.at(context_code(context));
}

void HigherOrderSource::validate() const {
    if (order < 1 || order > 8) throw DataError("source order must be in 1..8");
    if (rows.size() != pow5(order)) throw DataError("source table has the wrong number of rows");
    if (initial.empty()) throw DataError("source has no initial contexts");
    double total = 0.0;
    for (const auto& [context, p] : initial) {
        if (context.size() != static_cast<std::size_t>(order)) {
            throw DataError("initial context has the wrong length");
        }
        if (!(p >= 0.0)) throw DataError("initial context probability is negative");
        total += p;
    }
    if (std::abs(total - 1.0) > StageDistribution::kTolerance) {
        throw DataError("initial context probabilities do not sum to 1");
    }
}

StageMatrix table1_raw() {
    return StageMatrix{{
        {0.854, 0.001, 0.138, 0.003, 0.000},
        {0.016, 0.907, 0.066, 0.010, 0.000},
        {0.109, 0.080, 0.498, 0.311, 0.000},
        {0.019, 0.014, 0.062, 0.864, 0.040},
        {0.007, 0.001, 0.007, 0.063, 0.921},
    }};
}

MarkovChain table1_chain() {
    MarkovChain chain;
    const StageMatrix raw = table1_raw();
    for (std::size_t r = 0; r < kNumStages; ++r) {
        chain.transition[r] = StageDistribution::normalized(raw[r]).probs();
    }
    chain.initial = StageDistribution::point_mass(SleepStage::W);
    return chain;
}

EmissionModel identity_emission() {
    EmissionModel e;
    for (std::size_t s = 0; s < kNumStages; ++s) e.confusion[s][s] = 1.0;
    return e;
}

EmissionModel uniform_emission() {
    EmissionModel e;
    for (auto& row : e.confusion) row.fill(1.0 / kNumStages);
    return e;
}

EmissionModel noisy_emission(double diagonal) {
    if (!(diagonal >= 0.0 && diagonal <= 1.0)) throw DataError("diagonal must lie in [0, 1]");
    EmissionModel e;
    const double off = (1.0 - diagonal) / (kNumStages - 1);
    for (std::size_t s = 0; s < kNumStages; ++s) {
        for (std::size_t o = 0; o < kNumStages; ++o) e.confusion[s][o] = s == o ? diagonal : off;
    }
    return e;
}

HigherOrderSource order3_fixture() {
    const MarkovChain base = table1_chain();
    HigherOrderSource src;
    src.order = 3;
    src.rows.reserve(pow5(3));
    for (std::size_t code = 0; code < pow5(3); ++code) {
        const auto ctx = context_from_code(code, 3);
        const std::size_t a = index(ctx[0]), b = index(ctx[1]), c = index(ctx[2]);
        StageVector r = base.transition[c];
        if (a == b && b == c) {
            r[c] *= 3.0;  // long dwell: strong inertia
        } else if (b == c) {
            r[c] *= 0.5;  // dwell of exactly two epochs
        } else {
            r[b] = 3.0 * r[b] + 0.02;  // just arrived: pull back to the previous stage
            r[c] *= 0.5;
        }
        src.rows.push_back(StageDistribution::normalized(r));
    }
    src.initial = {{{SleepStage::W, SleepStage::W, SleepStage::W}, 1.0}};
    return src;
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::size_t Rng::sample(const StageVector& probs) { return sample(std::span<const double>(probs)); }

std::size_t Rng::sample(std::span<const double> probs) {
    double total = 0.0;
    for (double p : probs) total += p;
    const double u = uniform() * total;
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        acc += probs[i];
        last_positive = i;
        if (u < acc) return i;
    }
    return last_positive;
}

Hypnogram sample_hypnogram(const MarkovChain& chain, std::size_t length, Rng& rng,
                           std::string record_id) {
    if (length == 0) throw DataError("cannot sample a zero-length hypnogram");
    std::vector<SleepStage> stages;
    stages.reserve(length);
    std::size_t current = rng.sample(chain.initial.probs());
    stages.push_back(stage_from_index(current));
    while (stages.size() < length) {
        current = rng.sample(chain.transition[current]);
        stages.push_back(stage_from_index(current));
    }
    return make_hypnogram(std::move(record_id), std::move(stages));
}

Hypnogram sample_hypnogram(const MarkovChain& chain, std::size_t length, std::uint64_t seed,
                           std::string record_id) {
    Rng rng(seed);
    return sample_hypnogram(chain, length, rng, std::move(record_id));
}

Hypnogram sample_hypnogram(const HigherOrderSource& source, std::size_t length, Rng& rng,
                           std::string record_id) {
    if (length == 0) throw DataError("cannot sample a zero-length hypnogram");
    std::vector<double> weights;
    for (const auto& entry : source.initial) weights.push_back(entry.second);
    const auto& first = source.initial[rng.sample(weights)].first;

    std::vector<SleepStage> stages(first.begin(),
                                   first.begin() + static_cast<std::ptrdiff_t>(
                                                       std::min(length, first.size())));
    stages.reserve(length);
    const auto k = static_cast<std::size_t>(source.order);
    while (stages.size() < length) {
        const std::span<const SleepStage> context(stages.data() + stages.size() - k, k);
        stages.push_back(stage_from_index(rng.sample(source.row(context).probs())));
    }
    return make_hypnogram(std::move(record_id), std::move(stages));
}

Hypnogram sample_hypnogram(const HigherOrderSource& source, std::size_t length,
                           std::uint64_t seed, std::string record_id) {
    Rng rng(seed);
    return sample_hypnogram(source, length, rng, std::move(record_id));
}

LikelihoodMatrix emit_likelihoods(const Hypnogram& truth, const EmissionModel& emission,
                                  Rng& rng) {
    emission.validate();
    std::array<StageDistribution, kNumStages> posterior;
    for (std::size_t o = 0; o < kNumStages; ++o) {
        StageVector column;
        for (std::size_t s = 0; s < kNumStages; ++s) column[s] = emission.confusion[s][o];
        posterior[o] = StageDistribution::normalized(column);
    }
    LikelihoodMatrix m;
    m.rows.reserve(truth.size());
    for (SleepStage t : truth.stages) {
        m.rows.push_back(posterior[rng.sample(emission.confusion[index(t)])]);
    }
    return m;
}

LikelihoodMatrix emit_likelihoods(const Hypnogram& truth, const EmissionModel& emission,
                                  std::uint64_t seed) {
    Rng rng(seed);
    return emit_likelihoods(truth, emission, rng);
}

StageVector stationary_distribution(const MarkovChain& chain) {
    chain.validate();
    // Irreducible iff every stage reaches every other through positive entries.
    for (std::size_t from = 0; from < kNumStages; ++from) {
        std::array<bool, kNumStages> seen{};
        seen[from] = true;
        std::vector<std::size_t> frontier{from};
        while (!frontier.empty()) {
            const std::size_t u = frontier.back();
            frontier.pop_back();
            for (std::size_t v = 0; v < kNumStages; ++v) {
                if (chain.transition[u][v] > 0.0 && !seen[v]) {
                    seen[v] = true;
                    frontier.push_back(v);
                }
            }
        }
        for (bool reached : seen) {
            if (!reached) throw DataError("chain is reducible: no unique stationary distribution");
        }
    }

    StageVector pi;
    pi.fill(1.0 / kNumStages);
    constexpr int kMaxSteps = 1'000'000;
    for (int step = 0; step < kMaxSteps; ++step) {
        StageVector next{};
        for (std::size_t i = 0; i < kNumStages; ++i) {
            for (std::size_t j = 0; j < kNumStages; ++j) next[j] += pi[i] * chain.transition[i][j];
        }
        double diff = 0.0;
        for (std::size_t j = 0; j < kNumStages; ++j) diff = std::max(diff, std::abs(next[j] - pi[j]));
        pi = next;
        if (diff < 1e-12) return StageDistribution::normalized(pi).probs();
    }
    throw NumericError("power iteration did not converge after 1e6 steps (periodic chain?)");
}

double entropy_rate_perplexity(const MarkovChain& chain) {
    const StageVector pi = stationary_distribution(chain);
    double entropy = 0.0;
    for (std::size_t i = 0; i < kNumStages; ++i) {
        for (std::size_t j = 0; j < kNumStages; ++j) {
            const double p = chain.transition[i][j];
            if (p > 0.0) entropy -= pi[i] * p * std::log(p);
        }
    }
    return std::exp(entropy);
}

ChainModel::ChainModel(MarkovChain chain) : chain_(std::move(chain)) { chain_.validate(); }

std::unique_ptr<ModelState> ChainModel::start() const {
    return std::make_unique<DistState>(chain_.initial, std::vector<SleepStage>{});
}

std::unique_ptr<ModelState> ChainModel::advance(const ModelState&, SleepStage s) const {
    return std::make_unique<DistState>(StageDistribution(chain_.transition[index(s)]),
                                       std::vector<SleepStage>{s});
}

SourceModel::SourceModel(HigherOrderSource source) : source_(std::move(source)) {
    source_.validate();
}

StageDistribution SourceModel::distribution_after(const std::vector<SleepStage>& history) const {
    const auto k = static_cast<std::size_t>(source_.order);
    if (history.size() >= k) {
        return source_.row(std::span<const SleepStage>(history).last(k));
    }
    StageVector w{};
    for (const auto& [context, p] : source_.initial) {
        if (std::equal(history.begin(), history.end(), context.begin())) {
            w[index(context[history.size()])] += p;
        }
    }
    double total = 0.0;
    for (double x : w) total += x;
    if (total <= 0.0) return StageDistribution();
    return StageDistribution::normalized(w);
}

std::unique_ptr<ModelState> SourceModel::start() const {
    return std::make_unique<DistState>(distribution_after({}), std::vector<SleepStage>{});
}

std::unique_ptr<ModelState> SourceModel::advance(const ModelState& state, SleepStage s) const {
    std::vector<SleepStage> tail = dynamic_cast<const DistState&>(state).tail();
    tail.push_back(s);
    const auto k = static_cast<std::size_t>(source_.order);
    // Before the first k epochs are complete the whole history matters.
    if (tail.size() > k) tail.erase(tail.begin());
    auto next = distribution_after(tail);
    return std::make_unique<DistState>(next, std::move(tail));
}

MarkovChain read_chain(const std::filesystem::path& path, std::vector<std::string>* warnings) {
    MarkovChain chain;
    chain.transition = read_stage_matrix(path, warnings);
    chain.validate();
    return chain;
}

EmissionModel read_emission(const std::filesystem::path& path, std::vector<std::string>* warnings) {
    EmissionModel e;
    e.confusion = read_stage_matrix(path, warnings);
    e.validate();
    return e;
}

void write_source(std::ostream& out, const HigherOrderSource& source) {
    out << "SLM-SOURCE v1 order=" << source.order << '\n';
    for (const auto& [context, p] : source.initial) {
        out << "init";
        for (SleepStage s : context) out << ' ' << to_string(s);
        out << " | " << format_double(p) << '\n';
    }
    for (std::size_t code = 0; code < source.rows.size(); ++code) {
        const auto context = context_from_code(code, source.order);
        for (std::size_t i = 0; i < context.size(); ++i) out << (i ? " " : "") << to_string(context[i]);
        out << " |";
        for (double p : source.rows[code].probs()) out << ' ' << format_double(p);
        out << '\n';
    }
}

HigherOrderSource read_source(std::istream& in, const std::string& source_name) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError(source_name, 1, "missing header");
    const auto header = words(line);
    HigherOrderSource src;
    if (header.size() != 3 || header[0] != "SLM-SOURCE" || header[1] != "v1" ||
        !header[2].starts_with("order=")) {
        throw ParseError(source_name, 1, "expected 'SLM-SOURCE v1 order=<k>'");
    }
    try {
        src.order = std::stoi(header[2].substr(6));
    } catch (const std::exception&) {
        throw ParseError(source_name, 1, "bad order");
    }
    if (src.order < 1 || src.order > 8) throw ParseError(source_name, 1, "order must be in 1..8");
    const auto k = static_cast<std::size_t>(src.order);
    std::vector<bool> seen(pow5(src.order), false);
    src.rows.assign(pow5(src.order), StageDistribution());

    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string_view text = trim(line);
        if (text.empty() || text.front() == '#') continue;
        const auto bar = text.find('|');
        if (bar == std::string_view::npos) throw ParseError(source_name, lineno, "missing '|'");
        auto lhs = words(text.substr(0, bar));
        const auto rhs = words(text.substr(bar + 1));
        const bool is_init = !lhs.empty() && lhs.front() == "init";
        if (is_init) lhs.erase(lhs.begin());
        if (lhs.size() != k) throw ParseError(source_name, lineno, "context must have order stages");
        std::vector<SleepStage> context;
        for (const auto& w : lhs) {
            const auto s = parse_stage(w);
            if (!s) throw ParseError(source_name, lineno, "unknown stage token '" + w + "'");
            context.push_back(*s);
        }
        std::vector<double> values;
        for (const auto& w : rhs) {
            double v;
            if (!parse_double(w, v)) throw ParseError(source_name, lineno, "not a number: '" + w + "'");
            values.push_back(v);
        }
        if (is_init) {
            if (values.size() != 1) throw ParseError(source_name, lineno, "expected one probability");
            src.initial.emplace_back(std::move(context), values[0]);
            continue;
        }
        if (values.size() != kNumStages) throw ParseError(source_name, lineno, "expected 5 probabilities");
        const std::size_t code = context_code(context);
        if (seen[code]) throw ParseError(source_name, lineno, "duplicate context");
        seen[code] = true;
        StageVector row;
        std::copy(values.begin(), values.end(), row.begin());
        try {
            src.rows[code] = StageDistribution(row);
        } catch (const DataError& e) {
            throw ParseError(source_name, lineno, e.what());
        }
    }
    for (bool s : seen) {
        if (!s) throw ParseError(source_name, lineno, "source table is missing contexts");
    }
    try {
        src.validate();
    } catch (const DataError& e) {
        throw ParseError(source_name, lineno, e.what());
    }
    return src;
}

HigherOrderSource read_source(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    return read_source(in, path.string());
}

}  // namespace slm
