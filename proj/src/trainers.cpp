#include "gevit/trainers.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "gevit/eval.hpp"
#include "gevit/rng.hpp"

namespace gevit {

namespace {

constexpr uint64_t kSrcBatchTag = 0x535243Bull;
constexpr uint64_t kTgtBatchTag = 0x544754Bull;
constexpr uint64_t kKmeansTag = 0x6B6D6E73ull;

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<double> unit_vector(std::vector<double> v) {
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    const double n = std::sqrt(n2);
    if (!(n > 0.0)) throw std::domain_error("unit_vector: zero norm");
    for (double& x : v) x /= n;
    return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

std::string method_name(Method m) {
    switch (m) {
        case Method::ERM: return "ERM";
        case Method::TADV: return "T-ADV";
        case Method::TMME: return "T-MME";
        case Method::TSSL: return "T-SSL";
    }
    return "?";
}

Method method_from_name(const std::string& s) {
    if (s == "ERM") return Method::ERM;
    if (s == "T-ADV") return Method::TADV;
    if (s == "T-MME") return Method::TMME;
    if (s == "T-SSL") return Method::TSSL;
    throw std::invalid_argument("unknown method '" + s + "' (expected ERM, T-ADV, T-MME, T-SSL)");
}

std::string schedule_name(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::Constant: return "constant";
        case ScheduleKind::DannAdaptive: return "dann_adaptive";
        case ScheduleKind::LinearWarmup: return "linear_warmup";
    }
    return "?";
}

ScheduleKind schedule_from_name(const std::string& s) {
    if (s == "constant") return ScheduleKind::Constant;
    if (s == "dann_adaptive") return ScheduleKind::DannAdaptive;
    if (s == "linear_warmup") return ScheduleKind::LinearWarmup;
    throw std::invalid_argument("unknown schedule '" + s + "'");
}

double dann_schedule(double p, double gamma, double scale) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("dann_schedule: p must be in [0,1]");
    return scale * (2.0 / (1.0 + std::exp(-gamma * p)) - 1.0);
}

double schedule_value(ScheduleKind kind, double p, double max_value) {
    switch (kind) {
        case ScheduleKind::Constant: return max_value;
        case ScheduleKind::DannAdaptive: return dann_schedule(p, 10.0, max_value);
        case ScheduleKind::LinearWarmup: return max_value * std::clamp(p, 0.0, 1.0);
    }
    throw std::invalid_argument("schedule_value: unknown kind");
}

void TrainerConfig::validate() const {
    if (steps < 1) throw std::invalid_argument("TrainerConfig: steps must be >= 1");
    if (batch_source < 1 || batch_target < 1)
        throw std::invalid_argument("TrainerConfig: batch sizes must be >= 1");
    if (lambda_adv_scale < 0 || lambda_e_max < 0 || lambda_is_max < 0 || lambda_mim < 0)
        throw std::invalid_argument("TrainerConfig: loss coefficients must be >= 0");
    if (!(phi > 0)) throw std::invalid_argument("TrainerConfig: phi must be > 0");
    if (cluster_k < 1) throw std::invalid_argument("TrainerConfig: cluster count must be >= 1");
    if (bank_momentum < 0 || bank_momentum >= 1)
        throw std::invalid_argument("TrainerConfig: bank momentum must be in [0,1)");
    if (proto_refresh < 1 || kmeans_iters < 1)
        throw std::invalid_argument("TrainerConfig: refresh cadence and k-means iterations must be >= 1");
    if (eval_every < 1) throw std::invalid_argument("TrainerConfig: eval_every must be >= 1");
}

void MemoryBank::update(int index, const std::vector<double>& unit_feature) {
    if (index < 0 || index >= static_cast<int>(rows.size()))
        throw std::out_of_range("MemoryBank: index " + std::to_string(index) + " out of " +
                                std::to_string(rows.size()));
    auto& row = rows[index];
    if (row.size() != unit_feature.size())
        throw std::invalid_argument("MemoryBank: feature size mismatch");
    for (size_t i = 0; i < row.size(); ++i) row[i] = momentum * row[i] + (1.0 - momentum) * unit_feature[i];
    row = unit_vector(std::move(row));
}

Prototypes kmeans(const std::vector<std::vector<double>>& vectors, int k, uint64_t seed, int iters,
                  std::vector<double>* objective_trace) {
    const int n = static_cast<int>(vectors.size());
    if (k < 1 || k > n)
        throw std::invalid_argument("kmeans: k=" + std::to_string(k) + " with " + std::to_string(n) + " vectors");
    const size_t dim = vectors[0].size();

    Rng rng(seed);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < k; ++i) {  // partial Fisher-Yates picks k distinct seeds
        const int j = i + rng.bounded_int(n - i);
        std::swap(order[i], order[j]);
    }
    Prototypes proto;
    proto.centroids.reserve(k);
    for (int i = 0; i < k; ++i) proto.centroids.push_back(unit_vector(vectors[order[i]]));
    proto.assignment.assign(n, 0);

    auto assign_all = [&]() {
        double objective = 0.0;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double best_cos = dot(vectors[i], proto.centroids[0]);
            for (int c = 1; c < k; ++c) {
                const double s = dot(vectors[i], proto.centroids[c]);
                if (s > best_cos) {
                    best_cos = s;
                    best = c;
                }
            }
            proto.assignment[i] = best;
            objective += 1.0 - best_cos;
        }
        return objective;
    };

    for (int it = 0; it < iters; ++it) {
        const double obj = assign_all();
        if (objective_trace) objective_trace->push_back(obj);

        std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
        std::vector<int> counts(k, 0);
        for (int i = 0; i < n; ++i) {
            for (size_t d = 0; d < dim; ++d) sums[proto.assignment[i]][d] += vectors[i][d];
            counts[proto.assignment[i]]++;
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                double n2 = 0.0;
                for (double x : sums[c]) n2 += x * x;
                if (n2 > 0.0) proto.centroids[c] = unit_vector(std::move(sums[c]));
            } else {
                // re-seed from the point farthest from its own centroid
                int far = 0;
                double far_cost = -1.0;
                for (int i = 0; i < n; ++i) {
                    const double cost = 1.0 - dot(vectors[i], proto.centroids[proto.assignment[i]]);
                    if (cost > far_cost) {
                        far_cost = cost;
                        far = i;
                    }
                }
                proto.centroids[c] = unit_vector(vectors[far]);
                proto.assignment[far] = c;
            }
        }
    }
    assign_all();  // leave assignments consistent with the final centroids
    return proto;
}

Tensor loss_cls(const std::vector<Tensor>& logits, const std::vector<int>& labels) {
    if (logits.empty()) throw std::invalid_argument("loss_cls: empty batch");
    if (logits.size() != labels.size()) throw std::invalid_argument("loss_cls: batch size mismatch");
    Tensor total;
    for (size_t i = 0; i < logits.size(); ++i) {
        Tensor ce = cross_entropy(softmax(logits[i]), labels[i]);
        total = i == 0 ? ce : add(total, ce);
    }
    return scale(total, 1.0 / static_cast<double>(logits.size()));
}

Tensor loss_adv(const std::vector<Tensor>& domain_logits, const std::vector<int>& domain_labels) {
    if (domain_logits.empty()) throw std::invalid_argument("loss_adv: empty batch");
    if (domain_logits.size() != domain_labels.size())
        throw std::invalid_argument("loss_adv: batch size mismatch");
    for (int y : domain_labels)
        if (y != 0 && y != 1) throw std::invalid_argument("loss_adv: domain label must be 0 or 1");
    Tensor total;
    for (size_t i = 0; i < domain_logits.size(); ++i) {
        Tensor ce = cross_entropy(softmax(domain_logits[i]), domain_labels[i]);
        total = i == 0 ? ce : add(total, ce);
    }
    return scale(total, 1.0 / static_cast<double>(domain_logits.size()));
}

Tensor loss_entropy_target(const std::vector<Tensor>& target_logits) {
    if (target_logits.empty()) throw std::invalid_argument("loss_entropy_target: empty batch");
    Tensor total;
    for (size_t i = 0; i < target_logits.size(); ++i) {
        Tensor h = entropy(softmax(target_logits[i]));
        total = i == 0 ? h : add(total, h);
    }
    return scale(total, 1.0 / static_cast<double>(target_logits.size()));
}

Tensor proto_distribution(const Tensor& unit_feature, const Tensor& prototypes, double phi) {
    if (!(phi > 0.0)) throw std::invalid_argument("proto_distribution: phi must be > 0");
    return softmax(scale(matvec(prototypes, unit_feature), 1.0 / phi));
}

namespace {

Tensor loss_is_one_domain(const std::vector<Tensor>& units, const std::vector<int>& assign,
                          const Tensor& protos, double phi) {
    const int k = protos.rows();
    Tensor total;
    for (size_t i = 0; i < units.size(); ++i) {
        if (assign[i] < 0 || assign[i] >= k)
            throw std::invalid_argument("loss_is: stale assignment " + std::to_string(assign[i]) +
                                        " for k=" + std::to_string(k));
        Tensor ce = cross_entropy(proto_distribution(units[i], protos, phi), assign[i]);
        total = i == 0 ? ce : add(total, ce);
    }
    return scale(total, 1.0 / static_cast<double>(units.size()));
}

}  // namespace

Tensor loss_is(const std::vector<Tensor>& src_units, const std::vector<int>& src_assign,
               const Tensor& src_protos, const std::vector<Tensor>& tgt_units,
               const std::vector<int>& tgt_assign, const Tensor& tgt_protos, double phi) {
    if (src_units.empty() || tgt_units.empty()) throw std::invalid_argument("loss_is: empty batch");
    if (src_units.size() != src_assign.size() || tgt_units.size() != tgt_assign.size())
        throw std::invalid_argument("loss_is: assignment size mismatch");
    return add(loss_is_one_domain(src_units, src_assign, src_protos, phi),
               loss_is_one_domain(tgt_units, tgt_assign, tgt_protos, phi));
}

Tensor loss_mim(const std::vector<Tensor>& prediction_probs) {
    if (prediction_probs.empty()) throw std::invalid_argument("loss_mim: empty batch");
    const double inv_n = 1.0 / static_cast<double>(prediction_probs.size());
    Tensor h_sum;
    Tensor p_sum;
    for (size_t i = 0; i < prediction_probs.size(); ++i) {
        Tensor h = entropy(prediction_probs[i]);
        h_sum = i == 0 ? h : add(h_sum, h);
        p_sum = i == 0 ? prediction_probs[i] : add(p_sum, prediction_probs[i]);
    }
    // E_x[H(p(y|x))] - H(E_x[p(y|x)])
    return sub(scale(h_sum, inv_n), entropy(scale(p_sum, inv_n)));
}

Sgd::Sgd(std::vector<SgdGroup> groups, double momentum) : groups_(std::move(groups)), momentum_(momentum) {
    velocity_.resize(groups_.size());
    for (size_t g = 0; g < groups_.size(); ++g) {
        velocity_[g].resize(groups_[g].params.size());
        for (size_t p = 0; p < groups_[g].params.size(); ++p)
            velocity_[g][p].assign(groups_[g].params[p].numel(), 0.0);
    }
}

void Sgd::step() {
    for (size_t g = 0; g < groups_.size(); ++g) {
        const double lr = groups_[g].lr;
        for (size_t p = 0; p < groups_[g].params.size(); ++p) {
            Tensor& t = groups_[g].params[p];
            if (!t.has_grad()) continue;
            const auto& grad = t.grad();
            auto& vel = velocity_[g][p];
            auto& data = t.data();
            for (size_t i = 0; i < data.size(); ++i) {
                vel[i] = momentum_ * vel[i] + grad[i];
                data[i] -= lr * vel[i];
            }
        }
    }
}

void Sgd::zero_grad() {
    for (auto& g : groups_)
        for (auto& p : g.params) p.zero_grad();
}

const char* kTraceHeader = "step,l_cls,l_adv,l_e,l_is,l_mim,lambda_adv,lambda_e,lambda_is,src_acc,tgt_acc";

std::string trace_to_csv(const std::vector<TraceRow>& rows) {
    std::string out = kTraceHeader;
    out += "\n";
    auto opt = [](const std::optional<double>& v) { return v ? fmt17(*v) : std::string(); };
    for (const auto& r : rows) {
        out += std::to_string(r.step);
        out += "," + fmt17(r.l_cls);
        out += "," + opt(r.l_adv);
        out += "," + opt(r.l_e);
        out += "," + opt(r.l_is);
        out += "," + opt(r.l_mim);
        out += "," + opt(r.lambda_adv);
        out += "," + opt(r.lambda_e);
        out += "," + opt(r.lambda_is);
        out += "," + opt(r.src_acc);
        out += "," + opt(r.tgt_acc);
        out += "\n";
    }
    return out;
}

namespace {

struct SslState {
    MemoryBank bank_src, bank_tgt;
    Prototypes proto_src, proto_tgt;
    Tensor proto_src_t, proto_tgt_t;  // constant tensors for the graph
};

Tensor protos_to_tensor(const Prototypes& p) {
    const int k = static_cast<int>(p.centroids.size());
    const int d = static_cast<int>(p.centroids[0].size());
    Tensor t = Tensor::zeros({k, d});
    for (int c = 0; c < k; ++c)
        for (int j = 0; j < d; ++j) t.at2(c, j) = p.centroids[c][j];
    return t;
}

std::vector<double> unit_feature_values(const ViTModel& model, const Tensor& image) {
    NoGradGuard ng;
    return l2_normalize(encode(model, image)).data();
}

}  // namespace

TrainResult train(ViTModel& model, const Dataset& source, const Dataset& target, const TrainerConfig& cfg) {
    cfg.validate();
    if (source.size() == 0) throw std::invalid_argument("train: empty source dataset");
    if (source.n_classes != model.cfg.num_classes)
        throw std::invalid_argument("train: class-space mismatch: dataset " + std::to_string(source.n_classes) +
                                    " vs model " + std::to_string(model.cfg.num_classes));
    const bool needs_target = cfg.method != Method::ERM;
    if (needs_target || target.size() > 0) {
        if (target.size() == 0) throw std::invalid_argument("train: method needs a target dataset");
        if (target.n_classes != source.n_classes)
            throw std::invalid_argument("train: class-space mismatch between source (" +
                                        std::to_string(source.n_classes) + ") and target (" +
                                        std::to_string(target.n_classes) + ")");
    }

    switch (cfg.head) {
        case HeadChoice::Auto:
            model.head_kind = (cfg.method == Method::TMME || cfg.method == Method::TSSL) ? HeadKind::Cosine
                                                                                         : HeadKind::Linear;
            break;
        case HeadChoice::Linear: model.head_kind = HeadKind::Linear; break;
        case HeadChoice::Cosine: model.head_kind = HeadKind::Cosine; break;
    }

    Rng rng_src(derive_seed(cfg.seed, kSrcBatchTag));
    Rng rng_tgt(derive_seed(cfg.seed, kTgtBatchTag));

    std::vector<SgdGroup> groups;
    groups.push_back({model.encoder_params(), cfg.lr_encoder});
    groups.push_back({model.classifier_params(), cfg.lr_classifier});
    if (cfg.method == Method::TADV) groups.push_back({model.domain_params(), cfg.lr_domain});
    Sgd opt(groups, cfg.momentum);

    SslState ssl;
    if (cfg.method == Method::TSSL) {
        if (cfg.cluster_k > source.size() || cfg.cluster_k > target.size())
            throw std::invalid_argument("train: cluster count exceeds dataset size");
        ssl.bank_src.momentum = cfg.bank_momentum;
        ssl.bank_tgt.momentum = cfg.bank_momentum;
        ssl.bank_src.rows.resize(source.size());
        ssl.bank_tgt.rows.resize(target.size());
        for (int i = 0; i < source.size(); ++i)
            ssl.bank_src.rows[i] = unit_feature_values(model, source.examples[i].image);
        for (int i = 0; i < target.size(); ++i)
            ssl.bank_tgt.rows[i] = unit_feature_values(model, target.examples[i].image);
        ssl.proto_src = kmeans(ssl.bank_src.rows, cfg.cluster_k, derive_seed(cfg.seed, kKmeansTag, 0, 0),
                               cfg.kmeans_iters);
        ssl.proto_tgt = kmeans(ssl.bank_tgt.rows, cfg.cluster_k, derive_seed(cfg.seed, kKmeansTag, 1, 0),
                               cfg.kmeans_iters);
        ssl.proto_src_t = protos_to_tensor(ssl.proto_src);
        ssl.proto_tgt_t = protos_to_tensor(ssl.proto_tgt);
    }

    TrainResult result;
    TraceRow last_finite{};
    for (int step = 0; step < cfg.steps; ++step) {
        const double p = cfg.steps > 1 ? static_cast<double>(step) / (cfg.steps - 1) : 1.0;

        std::vector<int> src_idx(cfg.batch_source), tgt_idx(cfg.batch_target);
        for (auto& i : src_idx) i = rng_src.bounded_int(source.size());
        for (auto& i : tgt_idx) i = target.size() > 0 ? rng_tgt.bounded_int(target.size()) : 0;

        std::vector<Tensor> f_src(src_idx.size());
        std::vector<int> labels(src_idx.size());
        for (size_t b = 0; b < src_idx.size(); ++b) {
            f_src[b] = encode(model, source.examples[src_idx[b]].image);
            labels[b] = source.examples[src_idx[b]].shape_label;
        }
        std::vector<Tensor> cls_logits(src_idx.size());
        for (size_t b = 0; b < src_idx.size(); ++b) cls_logits[b] = classify(model, f_src[b]);

        TraceRow row;
        row.step = step;
        Tensor l_cls_t = loss_cls(cls_logits, labels);
        Tensor total = l_cls_t;

        std::vector<Tensor> f_tgt;
        if (needs_target) {
            f_tgt.resize(tgt_idx.size());
            for (size_t b = 0; b < tgt_idx.size(); ++b)
                f_tgt[b] = encode(model, target.examples[tgt_idx[b]].image);
        }

        if (cfg.method == Method::TADV) {
            const double lam = schedule_value(cfg.schedule, p, cfg.lambda_adv_scale);
            std::vector<Tensor> dom_logits;
            std::vector<int> dom_labels;
            for (const auto& f : f_src) {
                dom_logits.push_back(domain_head(model, grad_reverse(f, lam)));
                dom_labels.push_back(0);
            }
            for (const auto& f : f_tgt) {
                dom_logits.push_back(domain_head(model, grad_reverse(f, lam)));
                dom_labels.push_back(1);
            }
            Tensor l_adv_t = loss_adv(dom_logits, dom_labels);
            total = add(total, l_adv_t);
            row.l_adv = l_adv_t.value();
            row.lambda_adv = lam;
        } else if (cfg.method == Method::TMME) {
            const double lam = schedule_value(cfg.schedule, p, cfg.lambda_e_max);
            std::vector<Tensor> tgt_logits;
            for (const auto& f : f_tgt) tgt_logits.push_back(classify(model, grad_reverse(f, 1.0)));
            Tensor l_e_t = loss_entropy_target(tgt_logits);
            // W descends L_CLS - lambda L_E while the reversal hands the
            // encoder +lambda dL_E, realizing the entropy minimax
            total = sub(total, scale(l_e_t, lam));
            row.l_e = l_e_t.value();
            row.lambda_e = lam;
        } else if (cfg.method == Method::TSSL) {
            const double lam_is = schedule_value(cfg.schedule, p, cfg.lambda_is_max);
            std::vector<Tensor> u_src, u_tgt;
            std::vector<int> a_src, a_tgt;
            for (size_t b = 0; b < f_src.size(); ++b) {
                u_src.push_back(l2_normalize(f_src[b]));
                a_src.push_back(ssl.proto_src.assignment[src_idx[b]]);
            }
            for (size_t b = 0; b < f_tgt.size(); ++b) {
                u_tgt.push_back(l2_normalize(f_tgt[b]));
                a_tgt.push_back(ssl.proto_tgt.assignment[tgt_idx[b]]);
            }
            Tensor l_is_t = loss_is(u_src, a_src, ssl.proto_src_t, u_tgt, a_tgt, ssl.proto_tgt_t, cfg.phi);

            std::vector<Tensor> probs;
            for (const auto& l : cls_logits) probs.push_back(softmax(l));
            for (const auto& f : f_tgt) probs.push_back(softmax(classify(model, f)));
            Tensor l_mim_t = loss_mim(probs);

            total = add(total, add(scale(l_is_t, lam_is), scale(l_mim_t, cfg.lambda_mim)));
            row.l_is = l_is_t.value();
            row.l_mim = l_mim_t.value();
            row.lambda_is = lam_is;
        }

        row.l_cls = l_cls_t.value();
        if (!std::isfinite(total.value()) || !std::isfinite(row.l_cls)) {
            throw TrainDivergence(step, "train: non-finite loss at step " + std::to_string(step) +
                                            "; last finite step " + std::to_string(last_finite.step) +
                                            " had l_cls=" + fmt17(last_finite.l_cls));
        }

        opt.zero_grad();
        backward(total);
        opt.step();

        if (cfg.method == Method::TSSL) {
            for (size_t b = 0; b < f_src.size(); ++b)
                ssl.bank_src.update(src_idx[b], unit_vector(f_src[b].data()));
            for (size_t b = 0; b < f_tgt.size(); ++b)
                ssl.bank_tgt.update(tgt_idx[b], unit_vector(f_tgt[b].data()));
            if ((step + 1) % cfg.proto_refresh == 0 && step + 1 < cfg.steps) {
                ssl.proto_src = kmeans(ssl.bank_src.rows, cfg.cluster_k,
                                       derive_seed(cfg.seed, kKmeansTag, 0, step + 1), cfg.kmeans_iters);
                ssl.proto_tgt = kmeans(ssl.bank_tgt.rows, cfg.cluster_k,
                                       derive_seed(cfg.seed, kKmeansTag, 1, step + 1), cfg.kmeans_iters);
                ssl.proto_src_t = protos_to_tensor(ssl.proto_src);
                ssl.proto_tgt_t = protos_to_tensor(ssl.proto_tgt);
            }
        }

        const bool snapshot = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps;
        if (snapshot) {
            row.src_acc = evaluate_accuracy("train", source, model_logits_fn(model)).accuracy;
            if (target.size() > 0)
                row.tgt_acc = evaluate_accuracy("target", target, model_logits_fn(model)).accuracy;
            result.final_src_acc = *row.src_acc;
            if (row.tgt_acc) result.final_tgt_acc = *row.tgt_acc;
        }
        result.trace.push_back(row);
        last_finite = row;
    }
    return result;
}

}  // namespace gevit
