#include "slm/ngram.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "slm/errors.hpp"
#include "slm/io.hpp"

namespace slm {

namespace {

constexpr std::string_view kHeaderMagic = "SLM-NGRAM v1";
constexpr std::string_view kEmptyContext = "∅";

class NgramState final : public ModelState {
public:
    NgramState(std::vector<Token> context, StageDistribution next)
        : context_(std::move(context)), next_(next) {}

    const StageDistribution& next() const override { return next_; }
    const std::vector<Token>& context() const { return context_; }

private:
    std::vector<Token> context_;
    StageDistribution next_;
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

std::string token_text(Token t) {
    if (t == kBoundary) return "<s>";
    return std::string(to_string(stage_from_index(t)));
}

void validate(const NgramConfig& config) {
    if (config.order < 1 || config.order > kMaxNgramOrder) {
        throw DataError("n-gram order must be in 1.." + std::to_string(kMaxNgramOrder) + ", got " +
                        std::to_string(config.order));
    }
    if (!(config.smoothing_k > 0.0)) throw DataError("smoothing constant must be positive");
    if (!(config.interpolation_lambda > 0.0 && config.interpolation_lambda < 1.0)) {
        throw DataError("interpolation weight must lie in (0, 1)");
    }
}

std::uint64_t NgramModel::key(std::span<const Token> context) {
    std::uint64_t value = 0;
    for (Token t : context) value = value * kNumTokens + t;
    return value * 16 + context.size();
}

std::vector<Token> NgramModel::context_of(std::uint64_t key) {
    std::vector<Token> context(key % 16);
    std::uint64_t value = key / 16;
    for (auto it = context.rbegin(); it != context.rend(); ++it) {
        *it = static_cast<Token>(value % kNumTokens);
        value /= kNumTokens;
    }
    return context;
}

NgramModel NgramModel::train(std::span<const Hypnogram> records, const NgramConfig& config) {
    validate(config);
    if (records.empty()) throw DataError("cannot train an n-gram model on an empty corpus");
    NgramModel model;
    model.config_ = config;
    const std::size_t max_context = static_cast<std::size_t>(config.order) - 1;
    std::vector<Token> padded;
    for (const Hypnogram& rec : records) {
        if (rec.stages.empty()) throw DataError("record '" + rec.record_id + "' is empty");
        padded.assign(max_context, kBoundary);
        for (SleepStage s : rec.stages) padded.push_back(to_token(s));
        for (std::size_t e = 0; e < rec.stages.size(); ++e) {
            const std::size_t end = e + max_context;  // position of the event in `padded`
            for (std::size_t len = 0; len <= max_context; ++len) {
                const std::span<const Token> context(padded.data() + end - len, len);
                ++model.table_[key(context)][index(rec.stages[e])];
            }
        }
    }
    return model;
}

const NgramModel::Counts* NgramModel::counts(std::span<const Token> context) const {
    if (context.size() > static_cast<std::size_t>(kMaxNgramOrder)) return nullptr;
    const auto it = table_.find(key(context));
    return it == table_.end() ? nullptr : &it->second;
}

StageVector NgramModel::interpolate(std::span<const Token> context) const {
    const std::size_t max_context = static_cast<std::size_t>(config_.order) - 1;
    if (context.size() > max_context) context = context.last(max_context);
    const double k = config_.smoothing_k;
    const double lambda = config_.interpolation_lambda;

    StageVector p;
    const Counts* unigram = counts({});
    std::uint64_t total = 0;
    if (unigram) for (auto c : *unigram) total += c;
    for (std::size_t s = 0; s < kNumStages; ++s) {
        const double c = unigram ? static_cast<double>((*unigram)[s]) : 0.0;
        p[s] = (c + k) / (static_cast<double>(total) + kNumStages * k);
    }
    for (std::size_t len = 1; len <= context.size(); ++len) {
        const Counts* row = counts(context.last(len));
        if (!row) continue;
        total = 0;
        for (auto c : *row) total += c;
        if (total == 0) continue;
        for (std::size_t s = 0; s < kNumStages; ++s) {
            const double direct = (static_cast<double>((*row)[s]) + k) /
                                  (static_cast<double>(total) + kNumStages * k);
            p[s] = lambda * direct + (1.0 - lambda) * p[s];
        }
    }
    return p;
}

StageDistribution NgramModel::prob(std::span<const Token> context) const {
    return StageDistribution(interpolate(context));
}

StageDistribution NgramModel::predict(std::span<const SleepStage> history) const {
    const std::size_t max_context = static_cast<std::size_t>(config_.order) - 1;
    std::vector<Token> context(max_context, kBoundary);
    const std::size_t take = std::min(history.size(), max_context);
    for (std::size_t i = 0; i < take; ++i) {
        context[max_context - take + i] = to_token(history[history.size() - take + i]);
    }
    return prob(context);
}

std::unique_ptr<ModelState> NgramModel::start() const {
    std::vector<Token> context(static_cast<std::size_t>(config_.order) - 1, kBoundary);
    auto next = prob(context);
    return std::make_unique<NgramState>(std::move(context), next);
}

std::unique_ptr<ModelState> NgramModel::advance(const ModelState& state, SleepStage s) const {
    const auto& prev = dynamic_cast<const NgramState&>(state);
    std::vector<Token> context = prev.context();
    if (!context.empty()) {
        std::shift_left(context.begin(), context.end(), 1);
        context.back() = to_token(s);
    }
    auto next = prob(context);
    return std::make_unique<NgramState>(std::move(context), next);
}

std::string NgramModel::name() const { return std::to_string(config_.order) + "-gram"; }

std::vector<std::vector<Token>> NgramModel::contexts() const {
    std::vector<std::vector<Token>> out;
    out.reserve(table_.size());
    for (const auto& [k, counts] : table_) out.push_back(context_of(k));
    std::sort(out.begin(), out.end());
    return out;
}

void NgramModel::write(std::ostream& out) const {
    out << kHeaderMagic << " order=" << config_.order
        << " k=" << format_double(config_.smoothing_k)
        << " lambda=" << format_double(config_.interpolation_lambda) << '\n';
    for (const auto& context : contexts()) {
        if (context.empty()) {
            out << kEmptyContext;
        } else {
            for (std::size_t i = 0; i < context.size(); ++i) {
                out << (i ? " " : "") << token_text(context[i]);
            }
        }
        out << " |";
        for (auto c : table_.at(key(context))) out << ' ' << c;
        out << '\n';
    }
}

NgramModel NgramModel::read(std::istream& in, const std::string& source) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError(source, 1, "missing header");

    NgramModel model;
    {
        const auto fields = words(line);
        bool ok = fields.size() == 5 && fields[0] + " " + fields[1] == kHeaderMagic;
        auto value_of = [&](std::size_t i, std::string_view name) -> std::string_view {
            std::string_view f = fields[i];
            if (!f.starts_with(name) || f.size() <= name.size() || f[name.size()] != '=') {
                ok = false;
                return {};
            }
            return f.substr(name.size() + 1);
        };
        if (ok) {
            const auto order = value_of(2, "order");
            const auto res = std::from_chars(order.data(), order.data() + order.size(),
                                             model.config_.order);
            ok = ok && res.ec == std::errc() && res.ptr == order.data() + order.size();
            ok = ok && parse_double(value_of(3, "k"), model.config_.smoothing_k);
            ok = ok && parse_double(value_of(4, "lambda"), model.config_.interpolation_lambda);
        }
        if (!ok) {
            throw ParseError(source, 1,
                             "malformed header, expected 'SLM-NGRAM v1 order=<n> k=<k> lambda=<l>'");
        }
        try {
            validate(model.config_);
        } catch (const DataError& e) {
            throw ParseError(source, 1, e.what());
        }
    }

    const std::size_t max_context = static_cast<std::size_t>(model.config_.order) - 1;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string_view text = trim(line);
        if (text.empty()) continue;
        const auto bar = text.find('|');
        if (bar == std::string_view::npos) throw ParseError(source, lineno, "missing '|'");

        std::vector<Token> context;
        const auto ctx_words = words(text.substr(0, bar));
        if (ctx_words.size() == 1 && ctx_words[0] == kEmptyContext) {
            // empty context
        } else if (ctx_words.empty()) {
            throw ParseError(source, lineno, "missing context (use '∅' for the empty context)");
        } else {
            for (const auto& w : ctx_words) {
                if (w == "<s>") {
                    context.push_back(kBoundary);
                } else if (auto s = parse_stage(w)) {
                    context.push_back(to_token(*s));
                } else {
                    throw ParseError(source, lineno, "unknown token '" + w + "'");
                }
            }
        }
        if (context.size() > max_context) {
            throw ParseError(source, lineno, "context longer than order - 1");
        }

        const auto count_words = words(text.substr(bar + 1));
        if (count_words.size() != kNumStages) {
            throw ParseError(source, lineno, "expected 5 counts");
        }
        Counts counts;
        for (std::size_t s = 0; s < kNumStages; ++s) {
            const std::string& w = count_words[s];
            const auto res = std::from_chars(w.data(), w.data() + w.size(), counts[s]);
            if (res.ec != std::errc() || res.ptr != w.data() + w.size()) {
                throw ParseError(source, lineno, "count is not a non-negative integer: '" + w + "'");
            }
        }
        if (!model.table_.emplace(key(context), counts).second) {
            throw ParseError(source, lineno, "duplicate context");
        }
    }
    if (model.table_.empty()) throw ParseError(source, lineno, "model has no counts");
    if (!model.counts({})) throw ParseError(source, lineno, "missing the empty-context counts");
    return model;
}

std::string serialize_ngram(const NgramModel& model) {
    std::ostringstream out;
    model.write(out);
    return out.str();
}

NgramModel deserialize_ngram(const std::string& text) {
    std::istringstream in(text);
    return NgramModel::read(in);
}

}  // namespace slm
