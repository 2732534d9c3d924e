#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gevit/shapeworld.hpp"
#include "gevit/vit.hpp"

namespace gevit {

struct MetricsRecord {
    std::string dataset;
    int n{0};
    long correct{0};
    double accuracy{0.0};
    std::string gap_vs;  // name of the IID record the gap refers to
    std::optional<double> gap;
    std::optional<double> shape_accuracy;
    std::optional<double> texture_accuracy;
    std::optional<std::string> corruption_type;
    std::optional<int> severity;
};

using LogitsFn = std::function<std::vector<double>(const Example&)>;

// read-only forward through the model's active head; grad recording disabled
LogitsFn model_logits_fn(const ViTModel& m, int window = -1);

// ties broken toward the lowest class index
int argmax_lowest(const std::vector<double>& v);

MetricsRecord evaluate_accuracy(const std::string& dataset_id, const Dataset& ds, const LogitsFn& logits);

double generalization_gap(const MetricsRecord& iid, const MetricsRecord& ood);
MetricsRecord with_gap(MetricsRecord ood, const MetricsRecord& iid);

// shape and texture accuracy on a cue-conflict set (labels differ by construction)
MetricsRecord evaluate_cue_conflict(const std::string& dataset_id, const Dataset& ds, const LogitsFn& logits);

struct CorruptionReport {
    std::vector<MetricsRecord> cells;    // input order
    double mean_accuracy{0.0};           // unweighted over present cells
    std::vector<std::string> missing;    // "type:severity" holes, excluded from the mean
};
CorruptionReport corruption_report(const std::vector<MetricsRecord>& cells);

std::string metrics_to_jsonl(const std::vector<MetricsRecord>& records);
std::string metrics_table(const std::vector<MetricsRecord>& records);

}  // namespace gevit
