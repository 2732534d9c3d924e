#include "gevit/cli.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "gevit/config.hpp"
#include "gevit/eval.hpp"
#include "gevit/rng.hpp"
#include "gevit/shapeworld.hpp"
#include "gevit/trainers.hpp"
#include "gevit/vit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gevit::cli {

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConflict = 2;
constexpr int kExitNumerical = 3;

struct OutputConflict : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!os) throw std::runtime_error("write failed for " + path);
}

json config_echo(const ExperimentConfig& cfg) {
    json j = json::object();
    for (const auto& [k, v] : cfg.values) j[k] = v;
    return j;
}

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::optional<uint64_t> seed_override;
    bool force{false};
};

ExperimentConfig load_config(const CommonArgs& args) {
    ExperimentConfig cfg = ExperimentConfig::parse_file(args.config_path);
    if (args.seed_override) {
        cfg.seed = *args.seed_override;
        cfg.values["seed"] = std::to_string(*args.seed_override);
    }
    return cfg;
}

std::string resolve_out(const CommonArgs& args, const ExperimentConfig& cfg) {
    std::string out = !args.out_dir.empty() ? args.out_dir : cfg.out_dir();
    if (out.empty()) throw std::invalid_argument("no output directory: pass --out or set 'out' in the config");
    return out;
}

// ---------------------------------------------------------------- generate

int cmd_generate(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    const std::string out = resolve_out(args, cfg);
    if (fs::exists(out) && !fs::is_empty(out) && !args.force)
        throw OutputConflict("output directory '" + out + "' exists; pass --force to overwrite");

    auto manifest = build_corpus(out, cfg.corpus_options());

    json files = json::array();
    for (const auto& info : manifest) {
        json f;
        f["file"] = info.file;
        f["suite"] = info.suite;
        f["family"] = static_cast<int>(info.tag.family);
        f["variant"] = static_cast<int>(info.tag.variant);
        f["severity"] = static_cast<int>(info.tag.severity);
        f["count"] = info.count;
        f["hash"] = info.hash_hex;
        files.push_back(f);
    }
    json j;
    j["config"] = config_echo(cfg);
    j["seed"] = cfg.seed;
    j["files"] = files;
    write_text(out + "/manifest.json", j.dump(2) + "\n");
    std::cout << "generated " << manifest.size() << " dataset files into " << out << "\n";
    return kExitOk;
}

// ------------------------------------------------------------------- train

json load_manifest(const std::string& corpus_dir) {
    const std::string path = corpus_dir + "/manifest.json";
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("corpus manifest not found: " + path);
    json j;
    is >> j;
    return j;
}

std::string suite_file(const json& manifest, const std::string& suite) {
    for (const auto& f : manifest["files"])
        if (f["suite"] == suite) return f["file"];
    throw std::invalid_argument("suite '" + suite + "' not present in the corpus manifest");
}

int cmd_train(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    const std::string out = resolve_out(args, cfg);
    const std::string corpus = cfg.corpus_path();
    if (corpus.empty()) throw std::invalid_argument("config: data.corpus is required for train");
    const json manifest = load_manifest(corpus);

    if (fs::exists(out + "/run.json") && !args.force)
        throw OutputConflict("run directory '" + out + "' already holds a run; pass --force to overwrite");
    fs::create_directories(out);

    const std::string train_file = corpus + "/" + suite_file(manifest, "train");
    Dataset source = read_dataset(train_file);

    TrainerConfig tcfg = cfg.trainer_config();
    Dataset target;
    std::string target_file;
    const std::string tsuite = cfg.target_suite();
    if (tcfg.method != Method::ERM || cfg.has("data.target_suite")) {
        target_file = corpus + "/" + suite_file(manifest, tsuite);
        target = read_dataset(target_file);
    }

    ViTModel model = ViTModel::init(cfg.vit_config(), cfg.seed);

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult result = train(model, source, target, tcfg);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    save_checkpoint(out + "/checkpoint.gevit", model);
    write_text(out + "/trace.csv", trace_to_csv(result.trace));

    json j;
    j["config"] = config_echo(cfg);
    j["seed"] = cfg.seed;
    j["method"] = method_name(tcfg.method);
    j["n_classes"] = model.cfg.num_classes;
    j["wall_time_sec"] = wall;
    j["final_src_acc"] = result.final_src_acc;
    j["final_tgt_acc"] = result.final_tgt_acc;
    json inputs;
    inputs["train"] = suite_file(manifest, "train");
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a_file(train_file)));
    inputs["train_hash"] = hex;
    if (!target_file.empty()) {
        inputs["target"] = suite_file(manifest, tsuite);
        std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a_file(target_file)));
        inputs["target_hash"] = hex;
    }
    j["inputs"] = inputs;
    write_text(out + "/run.json", j.dump(2) + "\n");
    std::cout << "trained " << method_name(tcfg.method) << " for " << tcfg.steps
              << " steps; final src acc " << result.final_src_acc << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- evaluate

int cmd_evaluate(const std::string& checkpoint, const std::string& data_dir,
                 const std::string& suites_csv, int window, const std::string& out_dir) {
    ViTModel model = load_checkpoint(checkpoint);
    const json manifest = load_manifest(data_dir);

    std::vector<std::string> suites;
    if (suites_csv.empty() || suites_csv == "all") {
        for (const auto& f : manifest["files"]) suites.push_back(f["suite"]);
    } else {
        std::stringstream ss(suites_csv);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!item.empty()) suites.push_back(item);
    }

    // evaluate iid_val first so OOD records can carry gaps against it
    std::optional<MetricsRecord> iid;
    std::vector<MetricsRecord> records;
    auto eval_one = [&](const std::string& suite) {
        const std::string file = data_dir + "/" + suite_file(manifest, suite);
        Dataset ds = read_dataset(file);
        if (ds.n_classes != model.cfg.num_classes)
            throw std::invalid_argument("class-count mismatch: checkpoint has " +
                                        std::to_string(model.cfg.num_classes) + " classes, dataset '" + suite +
                                        "' has " + std::to_string(ds.n_classes));
        const SuiteSpec* spec = find_suite(suite);
        MetricsRecord rec;
        if (spec && spec->tag.family == ShiftFamily::Texture &&
            spec->tag.variant == static_cast<uint8_t>(TextureVariant::CueConflict)) {
            rec = evaluate_cue_conflict(suite, ds, model_logits_fn(model, window));
        } else {
            rec = evaluate_accuracy(suite, ds, model_logits_fn(model, window));
        }
        if (spec && spec->tag.family == ShiftFamily::Corruption) {
            static const char* corr[] = {"gaussian_noise", "impulse_noise", "gaussian_blur", "contrast",
                                         "pixelate"};
            rec.corruption_type = corr[spec->tag.variant];
            rec.severity = spec->tag.severity;
        }
        return rec;
    };

    for (const auto& suite : suites)
        if (suite == "iid_val") iid = eval_one(suite);
    for (const auto& suite : suites) {
        if (suite == "iid_val") {
            records.push_back(*iid);
            continue;
        }
        MetricsRecord rec = eval_one(suite);
        if (iid && suite != "train") rec = with_gap(rec, *iid);
        records.push_back(rec);
    }

    std::vector<MetricsRecord> corruption_cells;
    for (const auto& r : records)
        if (r.corruption_type) corruption_cells.push_back(r);
    if (!corruption_cells.empty()) {
        CorruptionReport rep = corruption_report(corruption_cells);
        MetricsRecord mean_rec;
        mean_rec.dataset = "corruption_mean";
        for (const auto& c : corruption_cells) mean_rec.n += c.n;
        mean_rec.accuracy = rep.mean_accuracy;
        if (iid) mean_rec = with_gap(mean_rec, *iid);
        records.push_back(mean_rec);
        for (const auto& miss : rep.missing)
            std::cerr << "warning: corruption cell missing from evaluation: " << miss << "\n";
    }

    const std::string out = out_dir.empty() ? fs::path(checkpoint).parent_path().string() : out_dir;
    if (!out.empty()) fs::create_directories(out);
    const std::string base = out.empty() ? "." : out;
    write_text(base + "/metrics.jsonl", metrics_to_jsonl(records));
    write_text(base + "/metrics.txt", metrics_table(records));
    std::cout << metrics_table(records);
    return kExitOk;
}

// ------------------------------------------------------------------ report

struct RunData {
    std::string method;
    uint64_t seed;
    int n_classes;
    std::map<std::string, double> suite_acc;
};

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_csv) {
    std::vector<RunData> runs;
    for (const auto& dir : run_dirs) {
        std::ifstream rj(dir + "/run.json");
        if (!rj) throw std::invalid_argument("run directory '" + dir + "' has no run.json");
        json meta;
        rj >> meta;
        RunData run;
        run.method = meta["method"];
        run.seed = meta["seed"];
        run.n_classes = meta["n_classes"];

        std::ifstream mj(dir + "/metrics.jsonl");
        if (!mj) throw std::invalid_argument("run directory '" + dir + "' has no metrics.jsonl");
        std::string line;
        while (std::getline(mj, line)) {
            if (line.empty()) continue;
            json rec = json::parse(line);
            run.suite_acc[rec["dataset"]] = rec["acc"];
        }
        runs.push_back(std::move(run));
    }
    for (const auto& r : runs)
        if (r.n_classes != runs[0].n_classes)
            throw std::invalid_argument("conflicting class counts across runs: " +
                                        std::to_string(r.n_classes) + " vs " +
                                        std::to_string(runs[0].n_classes));

    // (method, suite) -> accuracies across seeds
    std::map<std::string, std::map<std::string, std::vector<double>>> table;
    std::vector<std::string> suite_order;
    for (const auto& run : runs)
        for (const auto& [suite, acc] : run.suite_acc) {
            if (table[run.method].count(suite) == 0 &&
                std::find(suite_order.begin(), suite_order.end(), suite) == suite_order.end())
                suite_order.push_back(suite);
            table[run.method][suite].push_back(acc);
        }

    auto mean_of = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    auto std_of = [&](const std::vector<double>& v) {
        if (v.size() < 2) return 0.0;
        const double m = mean_of(v);
        double s = 0.0;
        for (double x : v) s += (x - m) * (x - m);
        return std::sqrt(s / static_cast<double>(v.size() - 1));
    };

    std::string csv = "method,suite,mean_acc,std_acc,n_seeds\n";
    std::string text;
    {
        char line[4096];
        std::string header = "method";
        for (const auto& s : suite_order) header += " | " + s;
        header += " | Avg";
        text += header + "\n";
        for (const auto& [method, suites] : table) {
            std::string row = method;
            double avg = 0.0;
            int cnt = 0;
            for (const auto& suite : suite_order) {
                auto it = suites.find(suite);
                if (it == suites.end()) {
                    row += " | -";
                    continue;
                }
                const double m = mean_of(it->second);
                const double sd = std_of(it->second);
                avg += m;
                ++cnt;
                if (it->second.size() > 1)
                    std::snprintf(line, sizeof line, " | %.4f±%.4f", m, sd);
                else
                    std::snprintf(line, sizeof line, " | %.4f", m);
                row += line;
                std::snprintf(line, sizeof line, "%s,%s,%.17g,%.17g,%zu\n", method.c_str(), suite.c_str(), m,
                              sd, it->second.size());
                csv += line;
            }
            if (cnt > 0) {
                std::snprintf(line, sizeof line, " | %.4f", avg / cnt);
                row += line;
                std::snprintf(line, sizeof line, "%s,Avg,%.17g,,%d\n", method.c_str(), avg / cnt, cnt);
                csv += line;
            }
            text += row + "\n";
        }
    }
    std::cout << text;
    if (!out_csv.empty()) write_text(out_csv, csv);
    return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"gevit: desk-scale OOD generalization lab for tiny vision transformers"};
    app.require_subcommand(1);

    CommonArgs common;
    int window = -1;
    std::string checkpoint, data_dir, suites_csv, report_csv;
    std::vector<std::string> run_dirs;

    auto add_common = [&](CLI::App* sub, bool with_force) {
        sub->add_option("--config", common.config_path, "experiment config file")->required();
        sub->add_option("--out", common.out_dir, "output directory (overrides config 'out')");
        sub->add_option("--seed", common.seed_override, "seed override");
        if (with_force) sub->add_flag("--force", common.force, "overwrite existing outputs");
    };

    CLI::App* gen = app.add_subcommand("generate", "render a ShapeWorld corpus and its shift suites");
    add_common(gen, true);

    CLI::App* tr = app.add_subcommand("train", "train a model on a generated corpus");
    add_common(tr, true);

    CLI::App* ev = app.add_subcommand("evaluate", "score a checkpoint on corpus suites");
    ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    ev->add_option("--data", data_dir, "corpus directory")->required();
    ev->add_option("--suites", suites_csv, "comma-separated suite names (default: all)");
    ev->add_option("--window", window, "attention receptive-field radius");
    ev->add_option("--out", common.out_dir, "output directory (default: checkpoint directory)");

    CLI::App* rep = app.add_subcommand("report", "merge run directories into a comparison table");
    rep->add_option("runs", run_dirs, "run directories")->required();
    rep->add_option("--out", report_csv, "write the plottable CSV here");

    std::vector<const char*> argv;
    argv.push_back("gevit");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_generate(common);
        if (tr->parsed()) return cmd_train(common);
        if (ev->parsed()) return cmd_evaluate(checkpoint, data_dir, suites_csv, window, common.out_dir);
        if (rep->parsed()) return cmd_report(run_dirs, report_csv);
    } catch (const OutputConflict& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConflict;
    } catch (const TrainDivergence& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

int run(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

}  // namespace gevit::cli
