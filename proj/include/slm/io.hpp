#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "slm/stage.hpp"

namespace slm {

using StageMatrix = std::array<StageVector, kNumStages>;

// Hypnogram text (.hyp): one stage token per line, '#' comment lines,
// "== <record_id>" starts a new record. Stages that precede the first header
// form a record named after the source.
std::vector<Hypnogram> read_hypnograms(std::istream& in, const std::string& source = "<stream>");
std::vector<Hypnogram> read_hypnograms(const std::filesystem::path& path);
void write_hypnograms(std::ostream& out, const std::vector<Hypnogram>& records);
void write_hypnograms(const std::filesystem::path& path, const std::vector<Hypnogram>& records);

// Rows whose sums are off by at most this much are used verbatim.
inline constexpr double kRowExactTolerance = 1e-9;
// Deviations above this are reported as warnings (the row is renormalized).
inline constexpr double kRowWarnTolerance = 1e-6;
// Deviations above this are errors.
inline constexpr double kRowErrorTolerance = 1e-3;

// Likelihood CSV: header "W,REM,N1,N2,N3", one probability row per epoch.
// Warnings about renormalized rows are appended to `warnings` when given.
LikelihoodMatrix read_likelihoods(std::istream& in, const std::string& source = "<stream>",
                                  std::vector<std::string>* warnings = nullptr);
LikelihoodMatrix read_likelihoods(const std::filesystem::path& path,
                                  std::vector<std::string>* warnings = nullptr);
void write_likelihoods(std::ostream& out, const LikelihoodMatrix& m);
void write_likelihoods(const std::filesystem::path& path, const LikelihoodMatrix& m);

// Row-stochastic 5x5 matrix CSV: header "from,W,REM,N1,N2,N3", then one row
// per stage in canonical order, each labelled with its stage token.
StageMatrix read_stage_matrix(std::istream& in, const std::string& source = "<stream>",
                              std::vector<std::string>* warnings = nullptr);
StageMatrix read_stage_matrix(const std::filesystem::path& path,
                              std::vector<std::string>* warnings = nullptr);
void write_stage_matrix(std::ostream& out, const StageMatrix& m);
void write_stage_matrix(const std::filesystem::path& path, const StageMatrix& m);

// Shortest decimal text that reads back to the same double.
std::string format_double(double v);
// Strict decimal parse of the whole string; false on any trailing garbage.
bool parse_double(std::string_view text, double& out);

}  // namespace slm
