#include "gevit/eval.hpp"

#include <cmath>
#include <cstdio>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "gevit/parallel.hpp"

namespace gevit {

LogitsFn model_logits_fn(const ViTModel& m, int window) {
    return [&m, window](const Example& ex) {
        NoGradGuard ng;
        Tensor logits = classify(m, encode(m, ex.image, window));
        return logits.data();
    };
}

int argmax_lowest(const std::vector<double>& v) {
    if (v.empty()) throw std::invalid_argument("argmax_lowest: empty vector");
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

MetricsRecord evaluate_accuracy(const std::string& dataset_id, const Dataset& ds, const LogitsFn& logits) {
    if (ds.size() == 0) throw std::invalid_argument("evaluate_accuracy: empty dataset '" + dataset_id + "'");
    std::vector<char> hit(ds.examples.size(), 0);
    parallel_for(ds.size(), [&](int i) {
        const Example& ex = ds.examples[i];
        hit[i] = argmax_lowest(logits(ex)) == ex.shape_label ? 1 : 0;
    });
    MetricsRecord rec;
    rec.dataset = dataset_id;
    rec.n = ds.size();
    for (char h : hit) rec.correct += h;  // integer counts, float only at the end
    rec.accuracy = static_cast<double>(rec.correct) / rec.n;
    return rec;
}

double generalization_gap(const MetricsRecord& iid, const MetricsRecord& ood) {
    return iid.accuracy - ood.accuracy;
}

MetricsRecord with_gap(MetricsRecord ood, const MetricsRecord& iid) {
    ood.gap = generalization_gap(iid, ood);
    ood.gap_vs = iid.dataset;
    return ood;
}

MetricsRecord evaluate_cue_conflict(const std::string& dataset_id, const Dataset& ds, const LogitsFn& logits) {
    if (ds.size() == 0) throw std::invalid_argument("evaluate_cue_conflict: empty dataset '" + dataset_id + "'");
    for (const auto& ex : ds.examples)
        if (ex.texture_label == ex.shape_label)
            throw std::invalid_argument("evaluate_cue_conflict: dataset '" + dataset_id +
                                        "' has an example whose texture label equals its shape label");
    std::vector<char> shape_hit(ds.examples.size(), 0), texture_hit(ds.examples.size(), 0);
    parallel_for(ds.size(), [&](int i) {
        const Example& ex = ds.examples[i];
        const int pred = argmax_lowest(logits(ex));
        shape_hit[i] = pred == ex.shape_label ? 1 : 0;
        texture_hit[i] = pred == ex.texture_label ? 1 : 0;
    });
    long sc = 0, tc = 0;
    for (int i = 0; i < ds.size(); ++i) {
        sc += shape_hit[i];
        tc += texture_hit[i];
    }
    MetricsRecord rec;
    rec.dataset = dataset_id;
    rec.n = ds.size();
    rec.correct = sc;
    rec.accuracy = static_cast<double>(sc) / ds.size();
    rec.shape_accuracy = static_cast<double>(sc) / ds.size();
    rec.texture_accuracy = static_cast<double>(tc) / ds.size();
    return rec;
}

CorruptionReport corruption_report(const std::vector<MetricsRecord>& cells) {
    CorruptionReport rep;
    rep.cells = cells;
    double sum = 0.0;
    int present = 0;
    std::set<std::string> types;
    std::set<std::pair<std::string, int>> have;
    for (const auto& c : cells) {
        if (!c.corruption_type || !c.severity)
            throw std::invalid_argument("corruption_report: cell '" + c.dataset + "' lacks type/severity keys");
        sum += c.accuracy;
        ++present;
        types.insert(*c.corruption_type);
        have.insert({*c.corruption_type, *c.severity});
    }
    for (const auto& t : types)
        for (int sev = 1; sev <= 5; ++sev)
            if (!have.count({t, sev})) rep.missing.push_back(t + ":s" + std::to_string(sev));
    rep.mean_accuracy = present > 0 ? sum / present : 0.0;
    return rep;
}

std::string metrics_to_jsonl(const std::vector<MetricsRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        nlohmann::json j;
        j["dataset"] = r.dataset;
        j["n"] = r.n;
        j["acc"] = r.accuracy;
        if (r.gap) {
            j["gap_vs"] = r.gap_vs;
            j["gap"] = *r.gap;
        }
        if (r.shape_accuracy) j["shape_acc"] = *r.shape_accuracy;
        if (r.texture_accuracy) j["texture_acc"] = *r.texture_accuracy;
        if (r.corruption_type) j["corruption_type"] = *r.corruption_type;
        if (r.severity) j["severity"] = *r.severity;
        out += j.dump();
        out += "\n";
    }
    return out;
}

std::string metrics_table(const std::vector<MetricsRecord>& records) {
    size_t name_w = 7;
    for (const auto& r : records) name_w = std::max(name_w, r.dataset.size());
    char line[256];
    std::snprintf(line, sizeof line, "%-*s %6s %8s %8s %10s %12s\n", static_cast<int>(name_w), "dataset",
                  "n", "acc", "gap", "shape_acc", "texture_acc");
    std::string out = line;
    for (const auto& r : records) {
        auto opt = [](const std::optional<double>& v) {
            if (!v) return std::string("-");
            char b[32];
            std::snprintf(b, sizeof b, "%.4f", *v);
            return std::string(b);
        };
        std::snprintf(line, sizeof line, "%-*s %6d %8.4f %8s %10s %12s\n", static_cast<int>(name_w),
                      r.dataset.c_str(), r.n, r.accuracy, opt(r.gap).c_str(), opt(r.shape_accuracy).c_str(),
                      opt(r.texture_accuracy).c_str());
        out += line;
    }
    return out;
}

}  // namespace gevit
