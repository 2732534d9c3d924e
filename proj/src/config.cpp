#include "gevit/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace gevit {

namespace {

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "seed",
        "out",
        "model.image_size",
        "model.patch_size",
        "model.channels",
        "model.embed_dim",
        "model.num_heads",
        "model.num_layers",
        "model.num_classes",
        "model.embedding_dim_out",
        "model.cosine_temperature",
        "model.domain_hidden",
        "trainer.method",
        "trainer.head",
        "trainer.steps",
        "trainer.batch_source",
        "trainer.batch_target",
        "trainer.lr_encoder",
        "trainer.lr_classifier",
        "trainer.lr_domain",
        "trainer.momentum",
        "trainer.lambda_adv_scale",
        "trainer.lambda_e_max",
        "trainer.lambda_is_max",
        "trainer.lambda_mim",
        "trainer.phi",
        "trainer.cluster_k",
        "trainer.bank_momentum",
        "trainer.proto_refresh",
        "trainer.kmeans_iters",
        "trainer.schedule",
        "trainer.eval_every",
        "data.corpus",
        "data.target_suite",
        "data.n_per_class",
        "data.ratio_train",
        "data.ratio_iid",
        "data.ratio_ood",
        "data.suites",
        "eval.suites",
        "eval.window",
    };
    return keys;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

}  // namespace

ExperimentConfig ExperimentConfig::parse_text(const std::string& text, const std::string& origin) {
    ExperimentConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (!known_keys().count(key))
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
        if (cfg.values.count(key))
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
        cfg.values[key] = value;
    }
    if (!cfg.values.count("seed"))
        throw std::invalid_argument(origin + ": mandatory key 'seed' is missing");
    cfg.seed = std::stoull(cfg.values.at("seed"));
    return cfg;
}

ExperimentConfig ExperimentConfig::parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("config: cannot open " + path);
    std::stringstream buf;
    buf << is.rdbuf();
    return parse_text(buf.str(), path);
}

std::string ExperimentConfig::get_str(const std::string& key, const std::string& fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : it->second;
}

int ExperimentConfig::get_int(const std::string& key, int fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
        return std::stoi(it->second);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: key '" + key + "' is not an integer: '" + it->second + "'");
    }
}

double ExperimentConfig::get_double(const std::string& key, double fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: key '" + key + "' is not a number: '" + it->second + "'");
    }
}

ViTConfig ExperimentConfig::vit_config() const {
    ViTConfig cfg;
    cfg.image_size = get_int("model.image_size", kCanvas);
    cfg.patch_size = get_int("model.patch_size", 4);
    cfg.channels = get_int("model.channels", kChannels);
    cfg.embed_dim = get_int("model.embed_dim", 64);
    cfg.num_heads = get_int("model.num_heads", 4);
    cfg.num_layers = get_int("model.num_layers", 4);
    cfg.num_classes = get_int("model.num_classes", kNumClasses);
    cfg.embedding_dim_out = get_int("model.embedding_dim_out", 64);
    cfg.cosine_temperature = get_double("model.cosine_temperature", 0.05);
    cfg.domain_hidden = get_int("model.domain_hidden", 64);
    cfg.validate();
    return cfg;
}

TrainerConfig ExperimentConfig::trainer_config() const {
    TrainerConfig cfg;
    cfg.method = method_from_name(get_str("trainer.method", "ERM"));
    const std::string head = get_str("trainer.head", "auto");
    if (head == "auto")
        cfg.head = HeadChoice::Auto;
    else if (head == "linear")
        cfg.head = HeadChoice::Linear;
    else if (head == "cosine")
        cfg.head = HeadChoice::Cosine;
    else
        throw std::invalid_argument("config: trainer.head must be auto, linear, or cosine");
    cfg.steps = get_int("trainer.steps", 600);
    cfg.batch_source = get_int("trainer.batch_source", 8);
    cfg.batch_target = get_int("trainer.batch_target", 8);
    cfg.lr_encoder = get_double("trainer.lr_encoder", 0.005);
    cfg.lr_classifier = get_double("trainer.lr_classifier", 0.05);
    cfg.lr_domain = get_double("trainer.lr_domain", 0.025);
    cfg.momentum = get_double("trainer.momentum", 0.9);
    cfg.lambda_adv_scale = get_double("trainer.lambda_adv_scale", 0.1);
    cfg.lambda_e_max = get_double("trainer.lambda_e_max", 0.1);
    cfg.lambda_is_max = get_double("trainer.lambda_is_max", 0.1);
    cfg.lambda_mim = get_double("trainer.lambda_mim", 0.5);
    cfg.phi = get_double("trainer.phi", 0.1);
    cfg.cluster_k = get_int("trainer.cluster_k", kNumClasses);
    cfg.bank_momentum = get_double("trainer.bank_momentum", 0.5);
    cfg.proto_refresh = get_int("trainer.proto_refresh", 50);
    cfg.kmeans_iters = get_int("trainer.kmeans_iters", 10);
    cfg.schedule = schedule_from_name(get_str("trainer.schedule", "dann_adaptive"));
    cfg.eval_every = get_int("trainer.eval_every", 100);
    cfg.seed = seed;
    cfg.validate();
    return cfg;
}

CorpusOptions ExperimentConfig::corpus_options() const {
    CorpusOptions opt;
    opt.n_per_class = get_int("data.n_per_class", 100);
    opt.ratio_train = get_double("data.ratio_train", 0.7);
    opt.ratio_iid = get_double("data.ratio_iid", 0.15);
    opt.ratio_ood = get_double("data.ratio_ood", 0.15);
    const std::string suites = get_str("data.suites", "all");
    if (suites != "all") opt.suites = split_csv(suites);
    opt.seed = seed;
    return opt;
}

std::vector<std::string> ExperimentConfig::eval_suites() const {
    const std::string suites = get_str("eval.suites", "all");
    if (suites == "all") return {};
    return split_csv(suites);
}

std::string ExperimentConfig::corpus_path() const { return get_str("data.corpus", ""); }

std::string ExperimentConfig::target_suite() const { return get_str("data.target_suite", "style_sketch_like"); }

std::string ExperimentConfig::out_dir() const { return get_str("out", ""); }

}  // namespace gevit
