#include "slm/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "slm/errors.hpp"

namespace slm {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view line, char sep) {
    std::vector<std::string_view> fields;
    std::size_t pos = 0;
    while (true) {
        const auto next = line.find(sep, pos);
        fields.push_back(trim(line.substr(pos, next - pos)));
        if (next == std::string_view::npos) break;
        pos = next + 1;
    }
    return fields;
}

std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    return out;
}

// Validates a probability row read from text and renormalizes it when its sum
// is off by more than kRowExactTolerance.
StageDistribution checked_row(const StageVector& row, const std::string& source,
                              std::size_t line, std::vector<std::string>* warnings) {
    double sum = 0.0;
    for (double p : row) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
            throw ParseError(source, line, "probabilities must be finite and non-negative");
        }
        sum += p;
    }
    const double deviation = std::abs(sum - 1.0);
    if (deviation > kRowErrorTolerance) {
        throw ParseError(source, line, "row sums to " + format_double(sum));
    }
    if (deviation <= kRowExactTolerance) return StageDistribution(row);
    if (deviation > kRowWarnTolerance && warnings) {
        warnings->push_back(source + ":" + std::to_string(line) + ": row sums to " +
                            format_double(sum) + ", renormalized");
    }
    return StageDistribution::normalized(row);
}

StageVector parse_row(const std::vector<std::string_view>& fields, std::size_t offset,
                      const std::string& source, std::size_t line) {
    if (fields.size() != offset + kNumStages) {
        throw ParseError(source, line,
                         "expected " + std::to_string(offset + kNumStages) + " fields, got " +
                             std::to_string(fields.size()));
    }
    StageVector row;
    for (std::size_t i = 0; i < kNumStages; ++i) {
        if (!parse_double(fields[offset + i], row[i])) {
            throw ParseError(source, line, "not a number: '" + std::string(fields[offset + i]) + "'");
        }
    }
    return row;
}

}  // namespace

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

bool parse_double(std::string_view text, double& out) {
    if (text.empty()) return false;
    if (text.front() == '+') text.remove_prefix(1);
    const auto res = std::from_chars(text.data(), text.data() + text.size(), out);
    return res.ec == std::errc() && res.ptr == text.data() + text.size();
}

std::vector<Hypnogram> read_hypnograms(std::istream& in, const std::string& source) {
    std::vector<Hypnogram> records;
    std::vector<std::size_t> header_lines;
    bool open = false;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string_view text = trim(line);
        if (text.empty() || text.front() == '#') continue;
        if (text.starts_with("==")) {
            const std::string_view id = trim(text.substr(2));
            if (id.empty()) throw ParseError(source, lineno, "record header without an id");
            records.push_back(Hypnogram{std::string(id), {}, 30});
            header_lines.push_back(lineno);
            open = true;
            continue;
        }
        if (!open) {
            records.push_back(Hypnogram{source, {}, 30});
            header_lines.push_back(lineno);
            open = true;
        }
        std::istringstream tokens{std::string(text)};
        std::string token;
        while (tokens >> token) {
            const auto stage = parse_stage(token);
            if (!stage) throw ParseError(source, lineno, "unknown stage token '" + token + "'");
            records.back().stages.push_back(*stage);
        }
    }
    for (std::size_t r = 0; r < records.size(); ++r) {
        if (records[r].stages.empty()) {
            throw ParseError(source, header_lines[r],
                             "record '" + records[r].record_id + "' has no epochs");
        }
    }
    return records;
}

std::vector<Hypnogram> read_hypnograms(const std::filesystem::path& path) {
    auto in = open_input(path);
    return read_hypnograms(in, path.string());
}

void write_hypnograms(std::ostream& out, const std::vector<Hypnogram>& records) {
    for (const Hypnogram& rec : records) {
        out << "== " << rec.record_id << '\n';
        for (SleepStage s : rec.stages) out << to_string(s) << '\n';
    }
}

void write_hypnograms(const std::filesystem::path& path, const std::vector<Hypnogram>& records) {
    auto out = open_output(path);
    write_hypnograms(out, records);
}

LikelihoodMatrix read_likelihoods(std::istream& in, const std::string& source,
                                  std::vector<std::string>* warnings) {
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    LikelihoodMatrix m;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string_view text = trim(line);
        if (text.empty()) continue;
        if (!have_header) {
            if (text != "W,REM,N1,N2,N3") {
                throw ParseError(source, lineno, "expected header 'W,REM,N1,N2,N3'");
            }
            have_header = true;
            continue;
        }
        const StageVector row = parse_row(split(text, ','), 0, source, lineno);
        m.rows.push_back(checked_row(row, source, lineno, warnings));
    }
    if (!have_header) throw ParseError(source, lineno, "missing header");
    if (m.rows.empty()) throw ParseError(source, lineno, "no likelihood rows");
    return m;
}

LikelihoodMatrix read_likelihoods(const std::filesystem::path& path,
                                  std::vector<std::string>* warnings) {
    auto in = open_input(path);
    return read_likelihoods(in, path.string(), warnings);
}

void write_likelihoods(std::ostream& out, const LikelihoodMatrix& m) {
    out << "W,REM,N1,N2,N3\n";
    for (const auto& row : m.rows) {
        for (std::size_t i = 0; i < kNumStages; ++i) {
            out << (i ? "," : "") << format_double(row[i]);
        }
        out << '\n';
    }
}

void write_likelihoods(const std::filesystem::path& path, const LikelihoodMatrix& m) {
    auto out = open_output(path);
    write_likelihoods(out, m);
}

StageMatrix read_stage_matrix(std::istream& in, const std::string& source,
                              std::vector<std::string>* warnings) {
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    std::size_t rows = 0;
    StageMatrix m{};
    while (std::getline(in, line)) {
        ++lineno;
        const std::string_view text = trim(line);
        if (text.empty() || text.front() == '#') continue;
        if (!have_header) {
            if (text != "from,W,REM,N1,N2,N3") {
                throw ParseError(source, lineno, "expected header 'from,W,REM,N1,N2,N3'");
            }
            have_header = true;
            continue;
        }
        if (rows == kNumStages) throw ParseError(source, lineno, "more than five rows");
        const auto fields = split(text, ',');
        const auto label = parse_stage(fields.front());
        if (!label || index(*label) != rows) {
            throw ParseError(source, lineno,
                             "expected row label " + std::string(to_string(stage_from_index(rows))));
        }
        m[rows] = checked_row(parse_row(fields, 1, source, lineno), source, lineno, warnings).probs();
        ++rows;
    }
    if (rows != kNumStages) throw ParseError(source, lineno, "expected five rows");
    return m;
}

StageMatrix read_stage_matrix(const std::filesystem::path& path,
                              std::vector<std::string>* warnings) {
    auto in = open_input(path);
    return read_stage_matrix(in, path.string(), warnings);
}

void write_stage_matrix(std::ostream& out, const StageMatrix& m) {
    out << "from,W,REM,N1,N2,N3\n";
    for (std::size_t r = 0; r < kNumStages; ++r) {
        out << to_string(stage_from_index(r));
        for (double v : m[r]) out << ',' << format_double(v);
        out << '\n';
    }
}

void write_stage_matrix(const std::filesystem::path& path, const StageMatrix& m) {
    auto out = open_output(path);
    write_stage_matrix(out, m);
}

}  // namespace slm
