#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gevit/shapeworld.hpp"
#include "gevit/tensor.hpp"
#include "gevit/vit.hpp"

namespace gevit {

enum class Method { ERM = 0, TADV = 1, TMME = 2, TSSL = 3 };
enum class ScheduleKind { Constant = 0, DannAdaptive = 1, LinearWarmup = 2 };
enum class HeadChoice { Auto = 0, Linear = 1, Cosine = 2 };

std::string method_name(Method m);
Method method_from_name(const std::string& s);
std::string schedule_name(ScheduleKind k);
ScheduleKind schedule_from_name(const std::string& s);

// lambda = scale * (2 / (1 + e^{-gamma p}) - 1), monotone nondecreasing on [0,1]
double dann_schedule(double p, double gamma = 10.0, double scale = 1.0);
double schedule_value(ScheduleKind kind, double p, double max_value);

struct TrainerConfig {
    Method method{Method::ERM};
    HeadChoice head{HeadChoice::Auto};  // Auto: cosine for T-MME/T-SSL, linear otherwise
    int steps{600};
    int batch_source{8};
    int batch_target{8};
    double lr_encoder{0.005};
    double lr_classifier{0.05};  // heads run 10x the encoder rate
    double lr_domain{0.025};
    double momentum{0.9};
    double lambda_adv_scale{0.1};
    double lambda_e_max{0.1};
    double lambda_is_max{0.1};
    double lambda_mim{0.5};
    double phi{0.1};  // prototype-similarity temperature
    int cluster_k{kNumClasses};
    double bank_momentum{0.5};
    int proto_refresh{50};
    int kmeans_iters{10};
    ScheduleKind schedule{ScheduleKind::DannAdaptive};
    uint64_t seed{0};
    int eval_every{100};

    void validate() const;
};

// One unit-norm feature row per dataset example, updated with momentum.
struct MemoryBank {
    std::vector<std::vector<double>> rows;
    double momentum{0.5};

    void update(int index, const std::vector<double>& unit_feature);
};

struct Prototypes {
    std::vector<std::vector<double>> centroids;  // unit norm
    std::vector<int> assignment;                 // bank row -> cluster index
};

// Spherical k-means: cosine assignment, mean-then-normalize update, empty
// clusters re-seeded from the farthest point. objective_trace, when given,
// records sum(1 - cos) after each assignment step.
Prototypes kmeans(const std::vector<std::vector<double>>& vectors, int k, uint64_t seed, int iters,
                  std::vector<double>* objective_trace = nullptr);

// ---- losses (graph-building; batches are vectors of per-sample tensors) ----
Tensor loss_cls(const std::vector<Tensor>& logits, const std::vector<int>& labels);
Tensor loss_adv(const std::vector<Tensor>& domain_logits, const std::vector<int>& domain_labels);
Tensor loss_entropy_target(const std::vector<Tensor>& target_logits);
Tensor proto_distribution(const Tensor& unit_feature, const Tensor& prototypes, double phi);
Tensor loss_is(const std::vector<Tensor>& src_units, const std::vector<int>& src_assign,
               const Tensor& src_protos, const std::vector<Tensor>& tgt_units,
               const std::vector<int>& tgt_assign, const Tensor& tgt_protos, double phi);
Tensor loss_mim(const std::vector<Tensor>& prediction_probs);

// ---- optimizer ----
struct SgdGroup {
    std::vector<Tensor> params;
    double lr{0.0};
};

class Sgd {
public:
    Sgd(std::vector<SgdGroup> groups, double momentum);
    void step();
    void zero_grad();

private:
    std::vector<SgdGroup> groups_;
    double momentum_;
    std::vector<std::vector<std::vector<double>>> velocity_;
};

// ---- training loop ----
struct TraceRow {
    int step{0};
    double l_cls{0.0};
    std::optional<double> l_adv, l_e, l_is, l_mim;
    std::optional<double> lambda_adv, lambda_e, lambda_is;
    std::optional<double> src_acc, tgt_acc;
};

extern const char* kTraceHeader;
std::string trace_to_csv(const std::vector<TraceRow>& rows);

struct TrainResult {
    std::vector<TraceRow> trace;
    double final_src_acc{0.0};
    double final_tgt_acc{0.0};
};

// Raised when a loss stops being finite; carries the failing step and the last
// finite trace row for the abort message.
struct TrainDivergence : std::runtime_error {
    TrainDivergence(int at_step, const std::string& msg) : std::runtime_error(msg), step(at_step) {}
    int step;
};

TrainResult train(ViTModel& model, const Dataset& source, const Dataset& target, const TrainerConfig& cfg);

}  // namespace gevit
