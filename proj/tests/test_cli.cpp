#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "slm/io.hpp"
#include "slm/simulator.hpp"

namespace fs = std::filesystem;
using namespace slm;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run slm_run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path workdir(const std::string& name) {
    const fs::path p = fs::current_path() / "cli_work" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) files[fs::relative(e.path(), dir).generic_string()] = slurp(e.path());
    }
    return files;
}

double last_field(const std::string& text, const std::string& key) {
    const auto pos = text.rfind(key);
    REQUIRE(pos != std::string::npos);
    const auto line_end = text.find('\n', pos);
    const std::string line = text.substr(pos, line_end - pos);
    return std::stod(line.substr(line.find_last_of(", ") + 1));
}

}  // namespace

TEST_CASE("simulate writes the requested corpus and is reproducible") {
    const fs::path a = workdir("sim_a"), b = workdir("sim_b");
    auto args = [](const fs::path& d) {
        return std::vector<std::string>{"simulate", "--preset", "table1", "--records", "2", "--length", "10",
                                        "--seed", "7", "--out", d.string()};
    };
    REQUIRE(slm_run(args(a / "out")).code == 0);
    const auto records = read_hypnograms(a / "out" / "hypnograms.hyp");
    REQUIRE(records.size() == 2);
    CHECK(records[0].size() == 10);
    CHECK(records[1].size() == 10);
    CHECK(read_likelihoods(a / "out" / "likelihoods" / "rec0001.csv").size() == 10);
    CHECK(fs::exists(a / "out" / "manifest.txt"));
    CHECK(fs::exists(a / "out" / "config.toml"));

    const auto first = snapshot(a / "out");
    REQUIRE(slm_run(args(a / "out")).code == 0);
    CHECK(snapshot(a / "out") == first);

    // Same seed in another directory: only the recorded output path differs.
    REQUIRE(slm_run(args(b / "out")).code == 0);
    auto other = snapshot(b / "out");
    CHECK(other.at("hypnograms.hyp") == first.at("hypnograms.hyp"));
    CHECK(other.at("manifest.txt") == first.at("manifest.txt"));
    CHECK(other.at("likelihoods/rec0000.csv") == first.at("likelihoods/rec0000.csv"));
}

TEST_CASE("noiseless pipeline decodes perfectly") {
    const fs::path d = workdir("identity");
    const std::string emission = (fs::path(SLM_DATA_DIR) / "emission_identity.csv").string();
    REQUIRE(slm_run({"simulate", "--records", "3", "--length", "200", "--emission", emission, "--out",
                     (d / "sim").string()})
                .code == 0);
    const Run r = slm_run({"decode", "--greedy", "--likelihoods", (d / "sim" / "likelihoods").string(),
                           "--reference", (d / "sim" / "hypnograms.hyp").string(), "--out",
                           (d / "greedy.hyp").string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("accuracy 1.000000") != std::string::npos);
    CHECK(read_hypnograms(d / "greedy.hyp") == read_hypnograms(d / "sim" / "hypnograms.hyp"));
}

TEST_CASE("bigram trained and evaluated through the tool reaches the floor") {
    const fs::path d = workdir("floor");
    REQUIRE(slm_run({"simulate", "--records", "100", "--length", "1000", "--seed", "1", "--out", (d / "train").string()}).code == 0);
    REQUIRE(slm_run({"simulate", "--records", "100", "--length", "1000", "--seed", "2", "--out", (d / "test").string()}).code == 0);
    REQUIRE(slm_run({"train-ngram", "--order", "2", "--train", (d / "train" / "hypnograms.hyp").string(), "--out",
                     (d / "bigram.ngram").string()})
                .code == 0);
    const Run r = slm_run({"eval-ppl", "--model", (d / "bigram.ngram").string(), "--data",
                           (d / "test" / "hypnograms.hyp").string(), "--report", (d / "ppl.csv").string()});
    REQUIRE(r.code == 0);
    const double ppl = last_field(r.out, "ALL,");
    const double floor = entropy_rate_perplexity(table1_chain());
    CHECK(std::abs(ppl - floor) / floor < 0.02);
    CHECK(r.out.find("rec0099,1000,") != std::string::npos);
    CHECK(slurp(d / "ppl.csv") == r.out);
    CHECK(fs::exists(d / "ppl.csv.config.toml"));
}

TEST_CASE("uniform model perplexity is five") {
    const fs::path d = workdir("uniform");
    REQUIRE(slm_run({"simulate", "--records", "4", "--length", "50", "--out", d.string()}).code == 0);
    const Run r = slm_run({"eval-ppl", "--model", "uniform", "--data", (d / "hypnograms.hyp").string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("ALL,200,5.000000\n") != std::string::npos);
}

TEST_CASE("sweep: the sleep model beats greedy on noisy data") {
    const fs::path d = workdir("sweep");
    REQUIRE(slm_run({"simulate", "--records", "200", "--seed", "3", "--out", (d / "train").string()}).code == 0);
    REQUIRE(slm_run({"simulate", "--seed", "4", "--out", (d / "noisy").string()}).code == 0);
    REQUIRE(slm_run({"train-ngram", "--order", "2", "--train", (d / "train" / "hypnograms.hyp").string(), "--out",
                     (d / "bigram.ngram").string()})
                .code == 0);
    auto args = [&](const std::string& jobs, const std::string& out) {
        return std::vector<std::string>{"--jobs", jobs, "sweep", "--likelihoods", (d / "noisy" / "likelihoods").string(),
                                        "--reference", (d / "noisy" / "hypnograms.hyp").string(), "--model",
                                        (d / "bigram.ngram").string(), "--alphas", "0.0", "0.42", "--widths", "128",
                                        "--out", (d / out).string()};
    };
    const Run r = slm_run(args("4", "sweep.csv"));
    REQUIRE(r.code == 0);
    std::istringstream csv(slurp(d / "sweep.csv"));
    std::string header, zero, tuned;
    std::getline(csv, header);
    std::getline(csv, zero);
    std::getline(csv, tuned);
    CHECK(header == "alpha,width,kappa,accuracy");
    REQUIRE(zero.starts_with("0.000000,128,"));
    REQUIRE(tuned.starts_with("0.420000,128,"));
    CHECK(std::stod(tuned.substr(tuned.rfind(',') + 1)) > std::stod(zero.substr(zero.rfind(',') + 1)));

    REQUIRE(slm_run(args("1", "sweep1.csv")).code == 0);
    CHECK(slurp(d / "sweep1.csv") == slurp(d / "sweep.csv"));
}

TEST_CASE("whole pipeline from one config file") {
    const fs::path d = workdir("pipeline");
    const std::string root = d.generic_string();
    std::ofstream(d / "run.toml") << "seed = 11\n"
                                     "[simulate]\nout = \"" << root << "/sim\"\nrecords = 10\nlength = 300\n"
                                     "[train-ngram]\ntrain = [\"" << root << "/sim/hypnograms.hyp\"]\nout = \"" << root << "/m.ngram\"\norder = 2\n"
                                     "[train-lstm]\ntrain = [\"" << root << "/sim/hypnograms.hyp\"]\nvalid = [\"" << root << "/sim/hypnograms.hyp\"]\n"
                                     "out = \"" << root << "/m.lstm\"\nhidden = 8\nembedding = 4\nepochs = 2\n"
                                     "[eval-ppl]\nmodel = \"" << root << "/m.ngram\"\ndata = [\"" << root << "/sim/hypnograms.hyp\"]\nreport = \"" << root << "/ppl.csv\"\n"
                                     "[decode]\nlikelihoods = [\"" << root << "/sim/likelihoods\"]\nmodel = \"" << root << "/m.ngram\"\n"
                                     "reference = \"" << root << "/sim/hypnograms.hyp\"\nout = \"" << root << "/decoded.hyp\"\n";
    const std::string cfg = (d / "run.toml").string();
    std::map<std::string, std::string> first;
    for (int pass = 0; pass < 2; ++pass) {
        for (const char* cmd : {"simulate", "train-ngram", "train-lstm", "eval-ppl", "decode"}) {
            const Run r = slm_run({"--config", cfg, cmd});
            INFO(cmd << ": " << r.err);
            REQUIRE(r.code == 0);
        }
        auto files = snapshot(d);
        if (pass == 0) first = std::move(files);
        else CHECK(files == first);
    }
    CHECK(first.count("decoded.hyp") == 1);
    CHECK(first.count("decoded.hyp.config.toml") == 1);
    CHECK(first.at("m.lstm").starts_with("SLM-LSTM v1"));
    CHECK(first.at("decoded.hyp.config.toml").find("seed=11") != std::string::npos);

    // The LSTM file loads back as a model.
    CHECK(slm_run({"eval-ppl", "--model", root + "/m.lstm", "--data", root + "/sim/hypnograms.hyp"}).code == 0);
    // A resolved config reruns the same command.
    CHECK(slm_run({"--config", root + "/decoded.hyp.config.toml", "decode"}).code == 0);
    CHECK(slurp(d / "decoded.hyp") == first.at("decoded.hyp"));
}

TEST_CASE("exit codes") {
    const fs::path d = workdir("codes");
    REQUIRE(slm_run({"simulate", "--records", "1", "--length", "20", "--out", (d / "sim").string()}).code == 0);
    const std::string hyp = (d / "sim" / "hypnograms.hyp").string();

    CHECK(slm_run({}).code == 1);
    CHECK(slm_run({"frobnicate"}).code == 1);
    CHECK(slm_run({"eval-ppl"}).code == 1);
    CHECK(slm_run({"eval-ppl", "--data", hyp, "--bogus"}).code == 1);
    CHECK(slm_run({"train-ngram", "--order", "12", "--train", hyp, "--out", (d / "x").string()}).code == 1);
    CHECK(slm_run({"decode", "--greedy", "--beam", "--likelihoods", (d / "sim").string(), "--out", (d / "x").string()}).code == 1);
    CHECK(slm_run({"--help"}).code == 0);

    CHECK(slm_run({"eval-ppl", "--data", (d / "missing.hyp").string()}).code == 2);
    CHECK(slm_run({"--config", (d / "missing.toml").string(), "eval-ppl", "--data", hyp}).code == 2);
    std::ofstream(d / "bad.hyp") << "== r\nW\nN5\n";
    const Run bad = slm_run({"eval-ppl", "--data", (d / "bad.hyp").string()});
    CHECK(bad.code == 2);
    CHECK(bad.err.find("bad.hyp") != std::string::npos);
    CHECK(bad.err.find('3') != std::string::npos);
    std::ofstream(d / "junk.model") << "hello\n";
    CHECK(slm_run({"eval-ppl", "--model", (d / "junk.model").string(), "--data", hyp}).code == 2);
    CHECK(slm_run({"simulate", "--preset", "nope", "--out", (d / "p").string()}).code == 2);

    // The generating chain gives zero probability to a record opening in N3.
    std::ofstream(d / "n3.hyp") << "== r\nN3\nN3\n";
    const Run numeric = slm_run({"eval-ppl", "--model", "table1", "--data", (d / "n3.hyp").string()});
    CHECK(numeric.code == 3);
    CHECK(numeric.err.find("N3") != std::string::npos);
}
