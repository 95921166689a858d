#include "slm/decoder.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <memory>
#include <mutex>
#include <ostream>
#include <thread>

#include "slm/errors.hpp"
#include "slm/metrics.hpp"

namespace slm {

void DecoderConfig::validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw DataError("alpha must be non-negative");
    if (beam_width < 1) throw DataError("beam width must be at least 1");
}

Hypnogram greedy_decode(const LikelihoodMatrix& likelihoods) {
    if (likelihoods.empty()) throw DataError("cannot decode an empty likelihood matrix");
    std::vector<SleepStage> stages;
    stages.reserve(likelihoods.size());
    for (const auto& row : likelihoods.rows) {
        std::size_t best = 0;
        for (std::size_t s = 1; s < kNumStages; ++s) {
            if (row[s] > row[best]) best = s;
        }
        stages.push_back(stage_from_index(best));
    }
    return make_hypnogram("greedy", std::move(stages));
}

namespace {

struct Candidate {
    double score;
    std::size_t lex;  // parent rank * 5 + stage; parents are kept in lexicographic order
};

bool better(const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.lex < b.lex;
}

struct BackPointer {
    std::uint32_t parent;
    SleepStage stage;
};

}  // namespace

DecodeResult beam_decode(const LikelihoodMatrix& likelihoods, const SequenceModel& slm,
                         const DecoderConfig& config) {
    config.validate();
    if (likelihoods.empty()) throw DataError("cannot decode an empty likelihood matrix");
    const std::size_t epochs = likelihoods.size();

    // Survivors, always in lexicographic order of their stage sequences.
    std::vector<double> scores{0.0};
    std::vector<std::unique_ptr<ModelState>> states;
    states.push_back(slm.start());
    std::vector<std::vector<BackPointer>> trellis;
    trellis.reserve(epochs);

    std::vector<Candidate> candidates;
    for (std::size_t e = 0; e < epochs; ++e) {
        StageVector signal;
        for (std::size_t s = 0; s < kNumStages; ++s) {
            signal[s] = std::log(std::max(likelihoods.rows[e][s], kLikelihoodFloor));
        }
        candidates.clear();
        candidates.reserve(scores.size() * kNumStages);
        for (std::size_t h = 0; h < scores.size(); ++h) {
            const StageDistribution& prior = states[h]->next();
            for (std::size_t s = 0; s < kNumStages; ++s) {
                double score = scores[h] + signal[s];
                if (config.alpha != 0.0) score += config.alpha * std::log(prior[s]);
                candidates.push_back({score, h * kNumStages + s});
            }
        }
        const std::size_t keep = std::min(config.beam_width, candidates.size());
        if (keep < candidates.size()) {
            std::nth_element(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                             candidates.end(), better);
            candidates.resize(keep);
        }
        std::sort(candidates.begin(), candidates.end(),
                  [](const Candidate& a, const Candidate& b) { return a.lex < b.lex; });

        std::vector<BackPointer> pointers;
        pointers.reserve(keep);
        std::vector<double> next_scores;
        next_scores.reserve(keep);
        std::vector<std::unique_ptr<ModelState>> next_states;
        const bool last = e + 1 == epochs;
        if (!last) next_states.reserve(keep);
        for (const Candidate& c : candidates) {
            const std::size_t parent = c.lex / kNumStages;
            const SleepStage stage = stage_from_index(c.lex % kNumStages);
            pointers.push_back({static_cast<std::uint32_t>(parent), stage});
            next_scores.push_back(c.score);
            if (!last) next_states.push_back(slm.advance(*states[parent], stage));
        }
        trellis.push_back(std::move(pointers));
        scores = std::move(next_scores);
        states = std::move(next_states);
    }

    std::size_t best = 0;
    for (std::size_t h = 1; h < scores.size(); ++h) {
        if (scores[h] > scores[best]) best = h;
    }
    std::vector<SleepStage> stages(epochs);
    std::size_t cursor = best;
    for (std::size_t e = epochs; e-- > 0;) {
        stages[e] = trellis[e][cursor].stage;
        cursor = trellis[e][cursor].parent;
    }
    return DecodeResult{make_hypnogram("beam", std::move(stages)), scores[best]};
}

std::vector<double> default_alpha_grid() { return {0.34, 0.38, 0.42, 0.46, 0.50}; }

std::vector<SweepRow> sweep(std::span<const SweepRecord> records, const SequenceModel& slm,
                            std::span<const double> alphas, std::span<const std::size_t> widths,
                            unsigned jobs) {
    if (records.empty()) throw DataError("sweep needs at least one record");
    if (alphas.empty() || widths.empty()) throw DataError("sweep grid is empty");
    for (const SweepRecord& r : records) {
        if (r.likelihoods.size() != r.reference.size()) {
            throw DataError("record '" + r.reference.record_id + "': likelihood rows (" +
                            std::to_string(r.likelihoods.size()) + ") do not match reference length (" +
                            std::to_string(r.reference.size()) + ")");
        }
    }

    std::vector<std::pair<double, std::size_t>> grid;
    for (double a : alphas) {
        for (std::size_t w : widths) grid.emplace_back(a, w);
    }
    std::sort(grid.begin(), grid.end());

    const std::size_t tasks = grid.size() * records.size();
    std::vector<Hypnogram> decoded(tasks);
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    std::size_t error_task = tasks;

    auto worker = [&] {
        for (std::size_t t = next++; t < tasks; t = next++) {
            const auto& [alpha, width] = grid[t / records.size()];
            try {
                decoded[t] = beam_decode(records[t % records.size()].likelihoods, slm,
                                         DecoderConfig{alpha, width})
                                 .hypnogram;
            } catch (...) {
                std::lock_guard lock(error_mutex);
                // Report the lowest failing task so the message does not depend on scheduling.
                if (t < error_task) {
                    error_task = t;
                    error = std::current_exception();
                }
            }
        }
    };
    const unsigned threads = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(tasks)));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned i = 0; i < threads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (error) {
        const auto& [alpha, width] = grid[error_task / records.size()];
        std::string where = "sweep alpha=" + std::to_string(alpha) + " width=" +
                            std::to_string(width) + " record '" +
                            records[error_task % records.size()].reference.record_id + "': ";
        try {
            std::rethrow_exception(error);
        } catch (const NumericError& e) {
            throw NumericError(where + e.what());
        } catch (const std::exception& e) {
            throw DataError(where + e.what());
        }
    }

    Hypnogram reference{"all", {}, 30};
    for (const SweepRecord& r : records) {
        reference.stages.insert(reference.stages.end(), r.reference.stages.begin(),
                                r.reference.stages.end());
    }
    std::vector<SweepRow> rows;
    for (std::size_t g = 0; g < grid.size(); ++g) {
        Hypnogram pred{"all", {}, 30};
        pred.stages.reserve(reference.size());
        for (std::size_t r = 0; r < records.size(); ++r) {
            const auto& stages = decoded[g * records.size() + r].stages;
            pred.stages.insert(pred.stages.end(), stages.begin(), stages.end());
        }
        rows.push_back({grid[g].first, grid[g].second, cohen_kappa(pred, reference),
                        accuracy(pred, reference)});
    }
    return rows;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
    out << "alpha,width,kappa,accuracy\n";
    char buf[128];
    for (const SweepRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%.6f,%zu,%.6f,%.6f\n", r.alpha, r.width, r.kappa, r.accuracy);
        out << buf;
    }
}

}  // namespace slm
