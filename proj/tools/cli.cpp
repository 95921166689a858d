#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "slm/decoder.hpp"
#include "slm/errors.hpp"
#include "slm/io.hpp"
#include "slm/lstm.hpp"
#include "slm/metrics.hpp"
#include "slm/ngram.hpp"
#include "slm/simulator.hpp"

namespace fs = std::filesystem;

namespace slm::cli {

namespace {

struct Options {
    std::uint64_t seed = 1;
    unsigned jobs = 1;

    struct {
        std::string out;
        std::string preset = "table1";
        std::string chain;
        std::string source;
        std::string emission = "noisy";
        double diagonal = 0.6;
        std::size_t records = 50;
        std::size_t length = kDefaultRecordLength;
    } simulate;

    struct {
        std::vector<std::string> train;
        std::string out;
        int order = 3;
        double k = 0.01;
        double lambda = 0.99;
    } ngram;

    struct {
        std::vector<std::string> train;
        std::vector<std::string> valid;
        std::string out;
        std::string preset = "desk";
        int layers = 0;
        int hidden = 0;
        int embedding = 0;
        double lr = 1e-3;
        int epochs = 20;
        int bptt = 32;
        int batch = 16;
        int patience = 3;
        double clip = 5.0;
    } lstm;

    struct {
        std::string model = "uniform";
        std::vector<std::string> data;
        std::string report;
    } eval;

    struct {
        std::vector<std::string> likelihoods;
        std::string model = "uniform";
        std::string out;
        std::string reference;
        bool greedy = false;
        bool beam = false;
        double alpha = 0.42;
        std::size_t width = 128;
    } decode;

    struct {
        std::vector<std::string> likelihoods;
        std::string reference;
        std::string model = "uniform";
        std::vector<double> alphas = default_alpha_grid();
        std::vector<std::size_t> widths{kDefaultSweepWidth};
        std::string out;
    } sweep;
};

std::vector<Hypnogram> read_all(const std::vector<std::string>& paths) {
    std::vector<Hypnogram> out;
    for (const auto& p : paths) {
        auto records = read_hypnograms(fs::path(p));
        out.insert(out.end(), std::make_move_iterator(records.begin()),
                   std::make_move_iterator(records.end()));
    }
    return out;
}

// Builtin names first, then files recognized by their first line.
std::unique_ptr<SequenceModel> load_model(const std::string& spec) {
    if (spec == "uniform") return std::make_unique<UniformModel>();
    if (spec == "table1") return std::make_unique<ChainModel>(table1_chain());
    std::ifstream in(spec);
    if (!in) throw DataError("cannot open model " + spec);
    std::string header;
    std::getline(in, header);
    in.seekg(0);
    if (header.starts_with("SLM-NGRAM")) return std::make_unique<NgramModel>(NgramModel::read(in, spec));
    if (header.starts_with("SLM-LSTM")) return std::make_unique<LstmSlm>(LstmSlm::read(in, spec));
    throw ParseError(spec, 1, "not a model file (expected SLM-NGRAM or SLM-LSTM header)");
}

// Each path is a likelihood CSV or a directory of them; the record id is the
// file stem.
std::vector<std::pair<std::string, LikelihoodMatrix>> read_likelihood_set(
    const std::vector<std::string>& paths, std::ostream& err) {
    std::vector<fs::path> files;
    for (const auto& p : paths) {
        if (fs::is_directory(p)) {
            std::vector<fs::path> found;
            for (const auto& entry : fs::directory_iterator(p)) {
                if (entry.path().extension() == ".csv") found.push_back(entry.path());
            }
            std::sort(found.begin(), found.end());
            if (found.empty()) throw DataError("no .csv files in " + p);
            files.insert(files.end(), found.begin(), found.end());
        } else {
            files.emplace_back(p);
        }
    }
    std::vector<std::pair<std::string, LikelihoodMatrix>> out;
    for (const auto& f : files) {
        std::vector<std::string> warnings;
        out.emplace_back(f.stem().string(), read_likelihoods(f, &warnings));
        for (const auto& w : warnings) err << "warning: " << w << '\n';
    }
    return out;
}

std::map<std::string, Hypnogram> index_by_id(std::vector<Hypnogram> records) {
    std::map<std::string, Hypnogram> out;
    for (auto& h : records) {
        const std::string id = h.record_id;
        if (!out.emplace(id, std::move(h)).second) throw DataError("duplicate record id '" + id + "'");
    }
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw DataError("cannot write " + path.string());
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

void simulate(const Options& o, const std::string& config, std::ostream& out) {
    if (o.simulate.records == 0 || o.simulate.length == 0) {
        throw DataError("records and length must be positive");
    }
    const fs::path dir = o.simulate.out;
    std::error_code ec;
    fs::create_directories(dir / "likelihoods", ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());

    EmissionModel emission;
    if (o.simulate.emission == "noisy") emission = noisy_emission(o.simulate.diagonal);
    else if (o.simulate.emission == "identity") emission = identity_emission();
    else if (o.simulate.emission == "uniform") emission = uniform_emission();
    else emission = read_emission(o.simulate.emission);
    emission.validate();

    std::vector<Hypnogram> truth;
    std::string generator;
    if (!o.simulate.source.empty()) {
        truth = sample_corpus(read_source(fs::path(o.simulate.source)), o.simulate.records,
                              o.simulate.length, o.seed);
        generator = o.simulate.source;
    } else if (!o.simulate.chain.empty()) {
        truth = sample_corpus(read_chain(o.simulate.chain), o.simulate.records, o.simulate.length, o.seed);
        generator = o.simulate.chain;
    } else if (o.simulate.preset == "table1") {
        truth = sample_corpus(table1_chain(), o.simulate.records, o.simulate.length, o.seed);
        generator = "preset table1";
    } else if (o.simulate.preset == "order3") {
        truth = sample_corpus(order3_fixture(), o.simulate.records, o.simulate.length, o.seed);
        generator = "preset order3";
    } else {
        throw DataError("unknown preset '" + o.simulate.preset + "' (expected table1 or order3)");
    }

    // Observations use their own stream so the hypnograms do not depend on the emission.
    Rng rng(o.seed ^ 0x5bd1e995u);
    std::ostringstream manifest;
    manifest << "generator " << generator << '\n'
             << "emission " << o.simulate.emission << '\n'
             << "seed " << o.seed << '\n'
             << "records " << truth.size() << '\n'
             << "length " << o.simulate.length << '\n'
             << "hypnograms hypnograms.hyp\n";
    for (const Hypnogram& h : truth) {
        const auto m = emit_likelihoods(h, emission, rng);
        const fs::path rel = fs::path("likelihoods") / (h.record_id + ".csv");
        write_likelihoods(dir / rel, m);
        manifest << "record " << h.record_id << ' ' << h.size() << ' ' << rel.generic_string() << '\n';
    }
    write_hypnograms(dir / "hypnograms.hyp", truth);
    write_text(dir / "manifest.txt", manifest.str());
    write_text(dir / "config.toml", config);
    out << "wrote " << truth.size() << " records to " << dir.string() << '\n';
}

void train_ngram(const Options& o, const std::string& config, std::ostream& out) {
    const auto train = read_all(o.ngram.train);
    const NgramConfig cfg{o.ngram.order, o.ngram.k, o.ngram.lambda};
    if (cfg.order > 9) throw DataError("order must be in 1..9");
    const NgramModel model = NgramModel::train(train, cfg);
    write_text(o.ngram.out, serialize_ngram(model));
    write_text(o.ngram.out + ".config.toml", config);
    out << "trained order-" << cfg.order << " model on " << train.size() << " records, "
        << model.num_contexts() << " contexts\n";
}

void train_lstm_cmd(const Options& o, const std::string& config, std::ostream& out, std::ostream& err) {
    const auto train = read_all(o.lstm.train);
    const auto valid = read_all(o.lstm.valid);
    TrainConfig cfg;
    cfg.shape = lstm_preset(o.lstm.preset);
    if (o.lstm.layers > 0) cfg.shape.layers = o.lstm.layers;
    if (o.lstm.hidden > 0) cfg.shape.hidden = o.lstm.hidden;
    if (o.lstm.embedding > 0) cfg.shape.embedding = o.lstm.embedding;
    cfg.learning_rate = o.lstm.lr;
    cfg.max_epochs = o.lstm.epochs;
    cfg.bptt_len = o.lstm.bptt;
    cfg.batch_size = o.lstm.batch;
    cfg.patience = o.lstm.patience;
    cfg.clip_norm = o.lstm.clip;
    cfg.seed = o.seed;
    const auto result = train_lstm(train, valid, cfg, [&](int epoch, double loss, double ppl) {
        err << "epoch " << epoch << " train_loss " << fmt(loss) << " valid_ppl " << fmt(ppl) << '\n';
    });
    write_text(o.lstm.out, serialize_lstm(result.model));
    write_text(o.lstm.out + ".config.toml", config);
    out << "best epoch " << result.best_epoch << " valid perplexity "
        << fmt(result.valid_perplexity[static_cast<std::size_t>(result.best_epoch - 1)]) << '\n';
}

void eval_ppl(const Options& o, const std::string& config, std::ostream& out) {
    const auto model = load_model(o.eval.model);
    const auto records = read_all(o.eval.data);
    std::ostringstream report;
    report << "record,epochs,perplexity\n";
    for (const Hypnogram& h : records) {
        const auto r = evaluate_perplexity(*model, std::span(&h, 1));
        report << h.record_id << ',' << r.epochs << ',' << fmt(r.perplexity) << '\n';
    }
    const auto all = evaluate_perplexity(*model, records);
    report << "ALL," << all.epochs << ',' << fmt(all.perplexity) << '\n';
    out << report.str();
    if (!o.eval.report.empty()) {
        write_text(o.eval.report, report.str());
        write_text(o.eval.report + ".config.toml", config);
    }
}

void decode_cmd(const Options& o, const std::string& config, std::ostream& out, std::ostream& err) {
    const auto inputs = read_likelihood_set(o.decode.likelihoods, err);
    std::unique_ptr<SequenceModel> model;
    if (!o.decode.greedy) model = load_model(o.decode.model);
    std::vector<Hypnogram> decoded;
    for (const auto& [id, m] : inputs) {
        Hypnogram h = o.decode.greedy ? greedy_decode(m)
                                      : beam_decode(m, *model, {o.decode.alpha, o.decode.width}).hypnogram;
        h.record_id = id;
        decoded.push_back(std::move(h));
    }
    write_hypnograms(fs::path(o.decode.out), decoded);
    write_text(o.decode.out + ".config.toml", config);
    out << "decoded " << decoded.size() << " records\n";
    if (!o.decode.reference.empty()) {
        const auto refs = index_by_id(read_hypnograms(fs::path(o.decode.reference)));
        Hypnogram pred{"all", {}, 30}, ref{"all", {}, 30};
        for (const Hypnogram& h : decoded) {
            const auto it = refs.find(h.record_id);
            if (it == refs.end()) throw DataError("no reference for record '" + h.record_id + "'");
            if (it->second.size() != h.size()) {
                throw DataError("record '" + h.record_id + "': reference length differs from likelihoods");
            }
            pred.stages.insert(pred.stages.end(), h.stages.begin(), h.stages.end());
            ref.stages.insert(ref.stages.end(), it->second.stages.begin(), it->second.stages.end());
        }
        out << "accuracy " << fmt(accuracy(pred, ref)) << "\nkappa " << fmt(cohen_kappa(pred, ref)) << '\n';
    }
}

void sweep_cmd(const Options& o, const std::string& config, std::ostream& out, std::ostream& err) {
    const auto inputs = read_likelihood_set(o.sweep.likelihoods, err);
    const auto refs = index_by_id(read_hypnograms(fs::path(o.sweep.reference)));
    std::vector<SweepRecord> records;
    for (const auto& [id, m] : inputs) {
        const auto it = refs.find(id);
        if (it == refs.end()) throw DataError("no reference for record '" + id + "'");
        records.push_back({m, it->second});
    }
    const auto model = load_model(o.sweep.model);
    const auto rows = sweep(records, *model, o.sweep.alphas, o.sweep.widths, o.jobs);
    std::ostringstream csv;
    write_sweep_csv(csv, rows);
    write_text(o.sweep.out, csv.str());
    write_text(o.sweep.out + ".config.toml", config);
    out << csv.str();
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Options o;
    CLI::App app{"Sleep-stage language models: simulation, training, evaluation and decoding", "slm"};
    app.set_config("--config", "", "TOML config; [subcommand] sections hold subcommand options");
    app.option_defaults()->always_capture_default();
    app.fallthrough();
    app.require_subcommand(1, 1);
    app.add_option("--seed", o.seed, "Seed for every random draw");
    app.add_option("--jobs", o.jobs, "Worker threads for sweep")->check(CLI::PositiveNumber);

    auto* sim = app.add_subcommand("simulate", "Sample hypnograms and signal likelihoods");
    sim->add_option("--out", o.simulate.out, "Output directory")->required();
    sim->add_option("--preset", o.simulate.preset, "table1 or order3");
    sim->add_option("--chain", o.simulate.chain, "Transition matrix CSV (overrides --preset)");
    sim->add_option("--source", o.simulate.source, "Higher-order source file (overrides --preset)");
    sim->add_option("--emission", o.simulate.emission, "noisy, identity, uniform or a confusion CSV");
    sim->add_option("--diagonal", o.simulate.diagonal, "Diagonal of the noisy emission");
    sim->add_option("--records", o.simulate.records);
    sim->add_option("--length", o.simulate.length, "Epochs per record");

    auto* tng = app.add_subcommand("train-ngram", "Train an n-gram model");
    tng->add_option("--train", o.ngram.train, "Hypnogram files")->required();
    tng->add_option("--out", o.ngram.out, "Model file")->required();
    tng->add_option("--order", o.ngram.order)->check(CLI::Range(1, 9));
    tng->add_option("--k", o.ngram.k, "Add-k smoothing constant");
    tng->add_option("--lambda", o.ngram.lambda, "Interpolation weight of the full context");

    auto* tls = app.add_subcommand("train-lstm", "Train an LSTM model");
    tls->add_option("--train", o.lstm.train, "Hypnogram files")->required();
    tls->add_option("--valid", o.lstm.valid, "Validation hypnogram files")->required();
    tls->add_option("--out", o.lstm.out, "Model file")->required();
    tls->add_option("--preset", o.lstm.preset, "desk, 2x256, 2x1024, 4x256 or 4x1024");
    tls->add_option("--layers", o.lstm.layers, "Overrides the preset when > 0");
    tls->add_option("--hidden", o.lstm.hidden, "Overrides the preset when > 0");
    tls->add_option("--embedding", o.lstm.embedding, "Overrides the preset when > 0");
    tls->add_option("--lr", o.lstm.lr);
    tls->add_option("--epochs", o.lstm.epochs, "Maximum passes over the training data");
    tls->add_option("--bptt", o.lstm.bptt, "Truncation length");
    tls->add_option("--batch", o.lstm.batch, "Chunks per update");
    tls->add_option("--patience", o.lstm.patience, "Epochs without improvement before stopping");
    tls->add_option("--clip", o.lstm.clip, "Gradient norm limit");

    auto* ev = app.add_subcommand("eval-ppl", "Per-record and aggregate perplexity");
    ev->add_option("--model", o.eval.model, "Model file, or uniform / table1");
    ev->add_option("--data", o.eval.data, "Hypnogram files")->required();
    ev->add_option("--report", o.eval.report, "Also write the report here");

    auto* dec = app.add_subcommand("decode", "Decode likelihoods into hypnograms");
    dec->add_option("--likelihoods", o.decode.likelihoods, "Likelihood CSVs or directories")->required();
    dec->add_option("--out", o.decode.out, "Output hypnogram file")->required();
    dec->add_option("--model", o.decode.model, "Model file, or uniform / table1");
    dec->add_option("--reference", o.decode.reference, "Score against these hypnograms");
    dec->add_flag("--greedy", o.decode.greedy, "Per-epoch argmax");
    dec->add_flag("--beam", o.decode.beam, "Beam search (default)");
    dec->add_option("--alpha", o.decode.alpha);
    dec->add_option("--width", o.decode.width);

    auto* sw = app.add_subcommand("sweep", "Grid of alpha and width scored by kappa and accuracy");
    sw->add_option("--likelihoods", o.sweep.likelihoods, "Likelihood CSVs or directories")->required();
    sw->add_option("--reference", o.sweep.reference, "Reference hypnograms")->required();
    sw->add_option("--model", o.sweep.model, "Model file, or uniform / table1");
    sw->add_option("--alphas", o.sweep.alphas);
    sw->add_option("--widths", o.sweep.widths);
    sw->add_option("--out", o.sweep.out, "CSV report")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::FileError& e) {
        err << "error: " << e.what() << '\n';
        return kDataError;
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kUsage;
    }

    // Checked here rather than with excludes(): resolved configs list both flags.
    if (o.decode.greedy && o.decode.beam) {
        err << "--greedy and --beam are exclusive\n";
        return kUsage;
    }

    const std::string config = app.config_to_str(true, false);
    try {
        if (sim->parsed()) simulate(o, config, out);
        else if (tng->parsed()) train_ngram(o, config, out);
        else if (tls->parsed()) train_lstm_cmd(o, config, out, err);
        else if (ev->parsed()) eval_ppl(o, config, out);
        else if (dec->parsed()) decode_cmd(o, config, out, err);
        else if (sw->parsed()) sweep_cmd(o, config, out, err);
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << '\n';
        return kNumericError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kDataError;
    }
    return kOk;
}

}  // namespace slm::cli
