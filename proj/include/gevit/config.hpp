#pragma once

#include <map>
#include <string>
#include <vector>

#include "gevit/shapeworld.hpp"
#include "gevit/trainers.hpp"
#include "gevit/vit.hpp"

namespace gevit {

// Flat key=value experiment file with block prefixes (model. / trainer. /
// data. / eval.). Unknown keys are rejected; seed is mandatory.
struct ExperimentConfig {
    std::map<std::string, std::string> values;
    uint64_t seed{0};

    static ExperimentConfig parse_file(const std::string& path);
    static ExperimentConfig parse_text(const std::string& text, const std::string& origin);

    bool has(const std::string& key) const { return values.count(key) > 0; }
    std::string get_str(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    double get_double(const std::string& key, double fallback) const;

    ViTConfig vit_config() const;
    TrainerConfig trainer_config() const;  // seed already applied
    CorpusOptions corpus_options() const;
    std::vector<std::string> eval_suites() const;  // empty = all from manifest
    std::string corpus_path() const;               // data.corpus
    std::string target_suite() const;              // data.target_suite
    std::string out_dir() const;                   // out
};

}  // namespace gevit
