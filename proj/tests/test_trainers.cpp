#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gevit/rng.hpp"
#include "gevit/trainers.hpp"

using namespace gevit;

namespace {

ViTConfig tiny_config(int n_classes = 2) {
    ViTConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.channels = 1;
    cfg.embed_dim = 16;
    cfg.num_heads = 2;
    cfg.num_layers = 2;
    cfg.num_classes = n_classes;
    cfg.embedding_dim_out = 8;
    cfg.domain_hidden = 8;
    return cfg;
}

// two-class toy set separable by mean intensity
Dataset intensity_dataset(int n, uint64_t seed) {
    Dataset ds;
    ds.channels = 1;
    ds.height = 8;
    ds.width = 8;
    ds.n_classes = 2;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        Example ex;
        const int cls = i % 2;
        ex.shape_label = cls;
        ex.image = Tensor::zeros({1, 8, 8});
        const double base = cls == 0 ? 0.25 : 0.75;
        for (auto& v : ex.image.data()) v = std::clamp(base + rng.normal(0.0, 0.05), 0.0, 1.0);
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

TrainerConfig quick_trainer(Method m, uint64_t seed) {
    TrainerConfig cfg;
    cfg.method = m;
    cfg.steps = 40;
    cfg.batch_source = 4;
    cfg.batch_target = 4;
    cfg.eval_every = 20;
    cfg.cluster_k = 2;
    cfg.proto_refresh = 10;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("dann_schedule fixtures") {
    CHECK(dann_schedule(0.0) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(dann_schedule(1.0, 10.0, 0.1) == doctest::Approx(0.0999909).epsilon(1e-5));
    CHECK(dann_schedule(0.5) < dann_schedule(1.0));
    CHECK_THROWS_AS(dann_schedule(1.5), std::invalid_argument);

    double prev = -1.0;
    for (int i = 0; i <= 50; ++i) {
        const double p = i / 50.0;
        for (auto kind : {ScheduleKind::Constant, ScheduleKind::DannAdaptive, ScheduleKind::LinearWarmup}) {
            const double v = schedule_value(kind, p, 0.1);
            CHECK(v >= 0.0);
            CHECK(v <= 0.1 + 1e-15);
        }
        const double v = schedule_value(ScheduleKind::DannAdaptive, p, 1.0);
        CHECK(v >= prev);
        prev = v;
    }
    CHECK(schedule_value(ScheduleKind::Constant, 0.0, 0.7) == 0.7);
    CHECK(schedule_value(ScheduleKind::LinearWarmup, 0.5, 0.2) == doctest::Approx(0.1));
}

TEST_CASE("loss_cls fixtures") {
    // perfectly confident and correct
    std::vector<Tensor> confident{Tensor::from_data({3}, {50.0, 0.0, 0.0})};
    CHECK(loss_cls(confident, {0}).value() == doctest::Approx(0.0).epsilon(1e-12));

    // all-zero logits, 9 classes
    std::vector<Tensor> zeros9{Tensor::zeros({9})};
    CHECK(loss_cls(zeros9, {4}).value() == doctest::Approx(std::log(9.0)).epsilon(1e-12));
    CHECK(loss_cls(zeros9, {4}).value() == doctest::Approx(2.19722).epsilon(1e-5));

    // hand batch of two
    std::vector<Tensor> batch{Tensor::from_data({2}, {std::log(0.7), std::log(0.3)}),
                              Tensor::from_data({2}, {0.0, 0.0})};
    CHECK(loss_cls(batch, {0, 1}).value() ==
          doctest::Approx((-std::log(0.7) - std::log(0.5)) / 2.0).epsilon(1e-12));
    CHECK(loss_cls(batch, {0, 1}).value() == doctest::Approx(0.524911).epsilon(1e-5));

    CHECK_THROWS_AS(loss_cls({}, {}), std::invalid_argument);
}

TEST_CASE("loss_adv fixtures") {
    std::vector<Tensor> even{Tensor::zeros({2}), Tensor::zeros({2})};
    CHECK(loss_adv(even, {0, 1}).value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    std::vector<Tensor> correct{Tensor::from_data({2}, {50.0, 0.0}), Tensor::from_data({2}, {0.0, 50.0})};
    CHECK(loss_adv(correct, {0, 1}).value() == doctest::Approx(0.0).epsilon(1e-12));

    // lambda=0 reversal: encoder-side tensor receives exactly zero gradient
    Tensor f = Tensor::from_data({4}, {0.3, -0.2, 0.5, 0.1}, true);
    Tensor W = Tensor::from_data({2, 4}, {0.1, 0.2, -0.3, 0.4, -0.1, 0.3, 0.2, -0.2}, true);
    Tensor logits = matvec(W, grad_reverse(f, 0.0));
    backward(loss_adv({logits}, {1}));
    for (double g : f.grad()) CHECK(g == 0.0);

    // single-domain batch is allowed
    CHECK_NOTHROW(loss_adv({Tensor::zeros({2})}, {0}));
    CHECK_THROWS_AS(loss_adv({Tensor::zeros({2})}, {2}), std::invalid_argument);
}

TEST_CASE("loss_entropy_target fixtures") {
    std::vector<Tensor> uniform{Tensor::zeros({9}), Tensor::zeros({9})};
    CHECK(loss_entropy_target(uniform).value() == doctest::Approx(std::log(9.0)).epsilon(1e-12));

    std::vector<Tensor> sharp{Tensor::from_data({9}, {80, 0, 0, 0, 0, 0, 0, 0, 0})};
    CHECK(loss_entropy_target(sharp).value() == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("classifier ascent step on W increases target entropy") {
    // frozen features, cosine classifier; one descent step on L_CLS - lambda*L_E
    Rng rng(404);
    const int d = 8, n_c = 4;
    Tensor W = Tensor::zeros({n_c, d}, true);
    for (auto& v : W.data()) v = rng.uniform(-0.5, 0.5);
    std::vector<Tensor> f_src, f_tgt;
    std::vector<int> labels;
    for (int i = 0; i < 16; ++i) {
        Tensor f = Tensor::zeros({d});
        for (auto& v : f.data()) v = rng.uniform(-1.0, 1.0);
        if (i % 2 == 0) {
            f_src.push_back(f);
            labels.push_back(rng.bounded_int(n_c));
        } else {
            f_tgt.push_back(f);
        }
    }
    auto entropy_of = [&] {
        std::vector<Tensor> logits;
        for (const auto& f : f_tgt) logits.push_back(cosine_head(W, 0.05, f));
        return loss_entropy_target(logits).value();
    };

    // settle W on the label loss first, as mid-training T-MME would be
    for (int it = 0; it < 200; ++it) {
        std::vector<Tensor> src_logits;
        for (const auto& f : f_src) src_logits.push_back(cosine_head(W, 0.05, f));
        W.zero_grad();
        backward(loss_cls(src_logits, labels));
        for (int i = 0; i < W.numel(); ++i) W.at(i) -= 0.01 * W.grad()[i];
    }
    const double before = entropy_of();

    std::vector<Tensor> src_logits;
    for (const auto& f : f_src) src_logits.push_back(cosine_head(W, 0.05, f));
    std::vector<Tensor> tgt_logits;
    for (const auto& f : f_tgt) tgt_logits.push_back(cosine_head(W, 0.05, f));
    Tensor objective = sub(loss_cls(src_logits, labels), scale(loss_entropy_target(tgt_logits), 0.1));
    W.zero_grad();
    backward(objective);
    const double lr = 1e-4;
    for (int i = 0; i < W.numel(); ++i) W.at(i) -= lr * W.grad()[i];

    CHECK(entropy_of() > before);
}

TEST_CASE("bank_update fixtures") {
    MemoryBank bank;
    bank.momentum = 0.5;
    bank.rows = {{1.0, 0.0}};
    bank.update(0, {0.0, 1.0});
    CHECK(bank.rows[0][0] == doctest::Approx(std::sqrt(2.0) / 2.0).epsilon(1e-12));
    CHECK(bank.rows[0][1] == doctest::Approx(std::sqrt(2.0) / 2.0).epsilon(1e-12));

    MemoryBank replace;
    replace.momentum = 0.0;
    replace.rows = {{1.0, 0.0}};
    replace.update(0, {0.0, 1.0});
    CHECK(replace.rows[0][0] == 0.0);
    CHECK(replace.rows[0][1] == 1.0);

    CHECK_THROWS_AS(replace.update(3, {1.0, 0.0}), std::out_of_range);

    // unit norm after many updates
    Rng rng(55);
    MemoryBank b;
    b.momentum = 0.5;
    b.rows = {{1.0, 0.0, 0.0}};
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> f{rng.normal(), rng.normal(), rng.normal()};
        double n = std::sqrt(f[0] * f[0] + f[1] * f[1] + f[2] * f[2]);
        for (auto& x : f) x /= n;
        b.update(0, f);
        double rn = 0.0;
        for (double x : b.rows[0]) rn += x * x;
        CHECK(std::abs(std::sqrt(rn) - 1.0) <= 1e-9);
    }
}

TEST_CASE("kmeans fixtures") {
    Rng rng(66);

    // two antipodal clouds
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 20; ++i) {
        std::vector<double> v{1.0 + rng.normal(0, 0.05), rng.normal(0, 0.05)};
        const double n = std::sqrt(v[0] * v[0] + v[1] * v[1]);
        pts.push_back({v[0] / n, v[1] / n});
    }
    for (int i = 0; i < 20; ++i) {
        std::vector<double> v{-1.0 + rng.normal(0, 0.05), rng.normal(0, 0.05)};
        const double n = std::sqrt(v[0] * v[0] + v[1] * v[1]);
        pts.push_back({v[0] / n, v[1] / n});
    }
    Prototypes proto = kmeans(pts, 2, 7, 10);
    for (int i = 1; i < 20; ++i) CHECK(proto.assignment[i] == proto.assignment[0]);
    for (int i = 21; i < 40; ++i) CHECK(proto.assignment[i] == proto.assignment[20]);
    CHECK(proto.assignment[0] != proto.assignment[20]);
    // centroids equal normalized cluster means
    for (int c = 0; c < 2; ++c) {
        std::vector<double> mean(2, 0.0);
        int cnt = 0;
        for (size_t i = 0; i < pts.size(); ++i)
            if (proto.assignment[i] == c) {
                mean[0] += pts[i][0];
                mean[1] += pts[i][1];
                ++cnt;
            }
        const double n = std::sqrt(mean[0] * mean[0] + mean[1] * mean[1]);
        CHECK(proto.centroids[c][0] == doctest::Approx(mean[0] / n).epsilon(1e-9));
        CHECK(proto.centroids[c][1] == doctest::Approx(mean[1] / n).epsilon(1e-9));
        (void)cnt;
    }

    // k = 1: centroid is the normalized global mean
    Prototypes one = kmeans(pts, 1, 3, 5);
    std::vector<double> mean(2, 0.0);
    for (const auto& p : pts) {
        mean[0] += p[0];
        mean[1] += p[1];
    }
    const double n = std::sqrt(mean[0] * mean[0] + mean[1] * mean[1]);
    CHECK(one.centroids[0][0] == doctest::Approx(mean[0] / n).epsilon(1e-9));
    CHECK(one.centroids[0][1] == doctest::Approx(mean[1] / n).epsilon(1e-9));

    CHECK_THROWS_AS(kmeans(pts, 41, 1, 5), std::invalid_argument);

    // objective nonincreasing over 20 iterations on random unit vectors
    std::vector<std::vector<double>> rnd;
    for (int i = 0; i < 60; ++i) {
        std::vector<double> v(6);
        double n2 = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            n2 += x * x;
        }
        for (auto& x : v) x /= std::sqrt(n2);
        rnd.push_back(v);
    }
    std::vector<double> trace;
    kmeans(rnd, 5, 11, 20, &trace);
    REQUIRE(trace.size() == 20);
    for (size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1] + 1e-12);
}

TEST_CASE("proto_distribution fixtures") {
    // two equidistant prototypes
    Tensor protos = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor f = Tensor::from_data({2}, {std::sqrt(0.5), std::sqrt(0.5)});
    Tensor p = proto_distribution(f, protos, 0.1);
    CHECK(p.at(0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.at(1) == doctest::Approx(0.5).epsilon(1e-12));

    // sums to one
    Rng rng(77);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor pr = Tensor::zeros({4, 6});
        for (auto& v : pr.data()) v = rng.uniform(-1.0, 1.0);
        Tensor ff = Tensor::zeros({6});
        for (auto& v : ff.data()) v = rng.uniform(-1.0, 1.0);
        Tensor dist = proto_distribution(ff, pr, 0.3);
        double s = 0.0;
        for (int i = 0; i < 4; ++i) s += dist.at(i);
        CHECK(std::abs(s - 1.0) <= 1e-12);
    }

    // f = mu_1, mu_2 orthogonal, phi = 0.1
    Tensor protos2 = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor f2 = Tensor::from_data({2}, {1, 0});
    Tensor p2 = proto_distribution(f2, protos2, 0.1);
    CHECK(p2.at(0) == doctest::Approx(std::exp(10.0) / (std::exp(10.0) + 1.0)).epsilon(1e-12));
    CHECK(p2.at(0) == doctest::Approx(0.9999546).epsilon(1e-7));

    CHECK_THROWS_AS(proto_distribution(f2, protos2, 0.0), std::invalid_argument);
}

TEST_CASE("loss_is fixtures") {
    // features coincide with their prototypes, prototypes orthogonal, phi=0.1
    Tensor protos = Tensor::from_data({2, 3}, {1, 0, 0, 0, 1, 0});
    std::vector<Tensor> units{Tensor::from_data({3}, {1, 0, 0}), Tensor::from_data({3}, {0, 1, 0})};
    std::vector<int> assign{0, 1};
    Tensor l = loss_is(units, assign, protos, units, assign, protos, 0.1);
    const double per_sample = -std::log(std::exp(10.0) / (std::exp(10.0) + 1.0));
    CHECK(per_sample == doctest::Approx(4.54e-5).epsilon(1e-2));
    CHECK(l.value() == doctest::Approx(2.0 * per_sample).epsilon(1e-9));

    // k = 1: distribution is [1.0], loss exactly zero
    Tensor single = Tensor::from_data({1, 3}, {0, 0, 1});
    std::vector<Tensor> u1{Tensor::from_data({3}, {1, 0, 0})};
    CHECK(loss_is(u1, {0}, single, u1, {0}, single, 0.1).value() == 0.0);

    // invariant under consistent prototype permutation
    Rng rng(88);
    Tensor pr = Tensor::zeros({3, 4});
    for (auto& v : pr.data()) v = rng.uniform(-1.0, 1.0);
    Tensor pr_perm = Tensor::zeros({3, 4});
    const int perm[3] = {2, 0, 1};
    for (int c = 0; c < 3; ++c)
        for (int j = 0; j < 4; ++j) pr_perm.at2(perm[c], j) = pr.at2(c, j);
    std::vector<Tensor> us;
    std::vector<int> as{0, 1, 2}, as_perm{perm[0], perm[1], perm[2]};
    for (int i = 0; i < 3; ++i) {
        Tensor f = Tensor::zeros({4});
        for (auto& v : f.data()) v = rng.uniform(-1.0, 1.0);
        us.push_back(l2_normalize(f));
    }
    const double a = loss_is(us, as, pr, us, as, pr, 0.2).value();
    const double b = loss_is(us, as_perm, pr_perm, us, as_perm, pr_perm, 0.2).value();
    CHECK(a == doctest::Approx(b).epsilon(1e-12));

    CHECK_THROWS_AS(loss_is(us, {0, 1, 5}, pr, us, as, pr, 0.2), std::invalid_argument);
}

TEST_CASE("loss_mim fixtures") {
    // identical one-hot predictions: 0 - 0 = 0
    std::vector<Tensor> same{Tensor::from_data({4}, {0, 1, 0, 0}), Tensor::from_data({4}, {0, 1, 0, 0})};
    CHECK(loss_mim(same).value() == doctest::Approx(0.0).epsilon(1e-12));

    // one-hot per distinct class covering all classes: -ln n_c
    std::vector<Tensor> spread;
    for (int c = 0; c < 4; ++c) {
        Tensor t = Tensor::zeros({4});
        t.at(c) = 1.0;
        spread.push_back(t);
    }
    CHECK(loss_mim(spread).value() == doctest::Approx(-std::log(4.0)).epsilon(1e-9));

    // uniform predictions: ln n_c - ln n_c = 0
    std::vector<Tensor> uni{Tensor::full({4}, 0.25), Tensor::full({4}, 0.25), Tensor::full({4}, 0.25)};
    CHECK(loss_mim(uni).value() == doctest::Approx(0.0).epsilon(1e-12));

    // bounds on random probability batches
    Rng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Tensor> probs;
        for (int i = 0; i < 6; ++i) {
            Tensor raw = Tensor::zeros({5});
            for (auto& v : raw.data()) v = rng.uniform(-2.0, 2.0);
            probs.push_back(softmax(raw));
        }
        const double v = loss_mim(probs).value();
        CHECK(v >= -std::log(5.0) - 1e-12);
        CHECK(v <= std::log(5.0) + 1e-12);
    }
}

TEST_CASE("sgd fixtures") {
    Tensor theta = Tensor::scalar(1.0, true);
    Sgd opt({{{theta}, 0.1}}, 0.0);
    opt.zero_grad();
    backward(mul(theta, theta));  // grad 2*theta = 2
    theta.node()->grad[0] = 1.0;  // fixture wants grad exactly 1
    opt.step();
    CHECK(theta.value() == doctest::Approx(0.9).epsilon(1e-15));

    // zero grad leaves parameters unchanged
    Tensor frozen = Tensor::scalar(0.5, true);
    Sgd opt2({{{frozen}, 0.1}}, 0.9);
    opt2.zero_grad();
    opt2.step();
    CHECK(frozen.value() == 0.5);

    // quadratic bowl converges
    Tensor q = Tensor::scalar(1.0, true);
    Sgd opt3({{{q}, 0.1}}, 0.0);
    for (int i = 0; i < 100; ++i) {
        opt3.zero_grad();
        backward(mul(q, q));
        opt3.step();
    }
    CHECK(std::abs(q.value()) < 1e-4);
}

TEST_CASE("trace csv format") {
    TraceRow r;
    r.step = 3;
    r.l_cls = 0.5;
    r.l_adv = 0.25;
    r.lambda_adv = 0.125;
    std::string csv = trace_to_csv({r});
    CHECK(csv.find("step,l_cls,l_adv,l_e,l_is,l_mim,lambda_adv,lambda_e,lambda_is,src_acc,tgt_acc") == 0);
    CHECK(csv.find("3,0.5,0.25,,,,0.125,,,,") != std::string::npos);
}

TEST_CASE("ERM reaches 95% on a separable toy source (3 seeds)") {
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        ViTModel model = ViTModel::init(tiny_config(), seed);
        Dataset src = intensity_dataset(40, 100 + seed);
        Dataset tgt = intensity_dataset(16, 200 + seed);
        TrainerConfig cfg = quick_trainer(Method::ERM, seed);
        cfg.steps = 200;
        TrainResult res = train(model, src, tgt, cfg);
        INFO("seed ", seed, " final src acc ", res.final_src_acc);
        CHECK(res.final_src_acc >= 0.95);
    }
}

TEST_CASE("T-ADV with zero lambda scale matches ERM step for step") {
    Dataset src = intensity_dataset(30, 42);
    Dataset tgt = intensity_dataset(12, 43);

    ViTModel m1 = ViTModel::init(tiny_config(), 7);
    TrainerConfig erm = quick_trainer(Method::ERM, 9);
    TrainResult r1 = train(m1, src, tgt, erm);

    ViTModel m2 = ViTModel::init(tiny_config(), 7);
    TrainerConfig adv = quick_trainer(Method::TADV, 9);
    adv.lambda_adv_scale = 0.0;
    TrainResult r2 = train(m2, src, tgt, adv);

    REQUIRE(r1.trace.size() == r2.trace.size());
    for (size_t i = 0; i < r1.trace.size(); ++i) CHECK(r1.trace[i].l_cls == r2.trace[i].l_cls);
    CHECK(r1.final_src_acc == r2.final_src_acc);
}

TEST_CASE("T-SSL with zero coefficients matches cosine-head ERM apart from bank bookkeeping") {
    Dataset src = intensity_dataset(30, 52);
    Dataset tgt = intensity_dataset(12, 53);

    ViTModel m1 = ViTModel::init(tiny_config(), 7);
    TrainerConfig erm = quick_trainer(Method::ERM, 9);
    erm.head = HeadChoice::Cosine;
    TrainResult r1 = train(m1, src, tgt, erm);

    ViTModel m2 = ViTModel::init(tiny_config(), 7);
    TrainerConfig ssl = quick_trainer(Method::TSSL, 9);
    ssl.lambda_is_max = 0.0;
    ssl.lambda_mim = 0.0;
    TrainResult r2 = train(m2, src, tgt, ssl);

    REQUIRE(r1.trace.size() == r2.trace.size());
    for (size_t i = 0; i < r1.trace.size(); ++i) CHECK(r1.trace[i].l_cls == r2.trace[i].l_cls);
}

TEST_CASE("same seed gives a bit-identical loss trace") {
    Dataset src = intensity_dataset(30, 62);
    Dataset tgt = intensity_dataset(12, 63);
    auto run = [&] {
        ViTModel m = ViTModel::init(tiny_config(), 11);
        TrainerConfig cfg = quick_trainer(Method::TMME, 13);
        return trace_to_csv(train(m, src, tgt, cfg).trace);
    };
    CHECK(run() == run());
}

TEST_CASE("train rejects mismatched class spaces") {
    Dataset src = intensity_dataset(10, 1);
    Dataset tgt = intensity_dataset(10, 2);
    tgt.n_classes = 5;
    ViTModel m = ViTModel::init(tiny_config(), 1);
    CHECK_THROWS_AS(train(m, src, tgt, quick_trainer(Method::TADV, 1)), std::invalid_argument);
}

TEST_CASE("trainer config validation") {
    TrainerConfig cfg;
    cfg.bank_momentum = 1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = TrainerConfig{};
    cfg.phi = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = TrainerConfig{};
    cfg.steps = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    CHECK(method_from_name("T-MME") == Method::TMME);
    CHECK(method_name(Method::TSSL) == "T-SSL");
    CHECK_THROWS_AS(method_from_name("nope"), std::invalid_argument);
    CHECK(schedule_from_name("dann_adaptive") == ScheduleKind::DannAdaptive);
}

TEST_CASE("T-SSL training records its auxiliary losses") {
    Dataset src = intensity_dataset(20, 72);
    Dataset tgt = intensity_dataset(12, 73);
    ViTModel m = ViTModel::init(tiny_config(), 21);
    TrainerConfig cfg = quick_trainer(Method::TSSL, 23);
    cfg.steps = 30;
    TrainResult res = train(m, src, tgt, cfg);
    CHECK(res.trace.size() == 30);
    CHECK(res.trace.back().l_is.has_value());
    CHECK(res.trace.back().l_mim.has_value());
}
