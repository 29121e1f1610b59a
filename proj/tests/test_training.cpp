#include "doctest.h"

#include "mutualctr/checkpoint.hpp"
#include "mutualctr/data.hpp"
#include "mutualctr/rng.hpp"
#include "mutualctr/training.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace mutualctr;
using namespace mutualctr::train;
using ad::Gradients;
using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using models::Architecture;
using models::ModelConfig;
using models::ModelInstance;

namespace {

data::Dataset small_synth(std::size_t rows = 2000, std::uint64_t seed = 5) {
    data::SynthConfig cfg;
    cfg.rows = rows;
    cfg.cat_fields = 4;
    cfg.vocab = 12;
    cfg.latent_dim = 3;
    cfg.interaction_pairs = 3;
    cfg.noise = 0.3;
    cfg.seed = seed;
    return data::dataset_from_synth(data::synth_generate(cfg), {0.8, 0.1, 0.1});
}

ModelConfig small_model() {
    ModelConfig cfg;
    cfg.embedding_dim = 4;
    cfg.tower = {8, 4};
    cfg.cross_depth = 2;
    cfg.senet_ratio = 2;
    return cfg;
}

RunConfig small_run(RunMode mode) {
    RunConfig cfg;
    cfg.mode = mode;
    cfg.epochs = 2;
    cfg.patience = 0;
    cfg.batch_size = 200;
    cfg.seed = 404;
    return cfg;
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("bce loss: analytic values and clamping") {
    {
        Tape t;
        Var p = t.constant(Tensor::matrix(1, 1, {0.5}));
        CHECK(bce_loss(t, {1.0}, p).value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    {
        // label 0 with a prediction driven against the clamp: -ln(1e-7)
        Tape t;
        Var p = t.constant(Tensor::matrix(1, 1, {1.0 - 1e-12}));
        CHECK(bce_loss(t, {0.0}, p).value()[0] == doctest::Approx(16.11809565095832).epsilon(1e-9));
    }
    {
        // hand batch: constant predictor at the empirical CTR 1/3
        Tape t;
        Var p = t.constant(Tensor::matrix(3, 1, {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0}));
        CHECK(bce_loss(t, {1.0, 0.0, 0.0}, p).value()[0] ==
              doctest::Approx(0.6365141682948129).epsilon(1e-12));
    }
    {
        Tape t;
        Var p = t.constant(Tensor::matrix(2, 1, {0.5, 0.5}));
        CHECK_THROWS_AS(bce_loss(t, {1.0}, p), std::invalid_argument);
        CHECK_THROWS_AS(bce_loss(t, {0.5, 0.5}, p), std::invalid_argument);
    }
}

TEST_CASE("mse loss: values and symmetry") {
    Tape t;
    Var a = t.constant(Tensor::matrix(1, 1, {0.2}));
    Var b = t.constant(Tensor::matrix(1, 1, {0.8}));
    CHECK(mse_loss(t, a, a).value()[0] == 0.0);
    CHECK(mse_loss(t, a, b).value()[0] == doctest::Approx(0.36).epsilon(1e-12));

    Rng rng(71);
    std::vector<double> xs(16), ys(16);
    for (auto& v : xs) v = rng.uniform();
    for (auto& v : ys) v = rng.uniform();
    Tape t2;
    Var x = t2.constant(Tensor({16, 1}, xs));
    Var y = t2.constant(Tensor({16, 1}, ys));
    CHECK(mse_loss(t2, x, y).value()[0] == mse_loss(t2, y, x).value()[0]);

    CHECK_THROWS_AS(mse_loss(t2, x, t2.constant(Tensor::matrix(1, 1, {0.1}))), std::invalid_argument);
}

TEST_CASE("mutual term: hand-evaluated three-network case") {
    // N=3, per-batch scalar predictions p = [0.2, 0.4, 0.8], network 1
    Tape t;
    Var own = t.constant(Tensor::matrix(1, 1, {0.2}));
    std::vector<Tensor> peers{Tensor::matrix(1, 1, {0.4}), Tensor::matrix(1, 1, {0.8})};
    Var mutual = mutual_term(t, own, peers);
    CHECK(mutual.value()[0] == doctest::Approx(0.2).epsilon(1e-12));

    // total loss with y=1: BCE(1, 0.2) + 0.2 = 1.80944
    Var total = t.add(bce_loss(t, {1.0}, own), mutual);
    CHECK(total.value()[0] == doctest::Approx(1.8094379124341003).epsilon(1e-5));

    // identical predictions: exactly zero
    std::vector<Tensor> same{Tensor::matrix(1, 1, {0.2}), Tensor::matrix(1, 1, {0.2})};
    CHECK(mutual_term(t, own, same).value()[0] == 0.0);

    // N=2 reduces to plain mse
    Var peer = t.constant(Tensor::matrix(1, 1, {0.8}));
    std::vector<Tensor> one_peer{Tensor::matrix(1, 1, {0.8})};
    CHECK(mutual_term(t, own, one_peer).value()[0] == mse_loss(t, peer, own).value()[0]);

    CHECK_THROWS_AS(mutual_term(t, own, {}), std::invalid_argument);
}

TEST_CASE("mutual mse gradients are antisymmetric when both sides are live") {
    Tape t;
    Parameter pa{"a", Tensor::matrix(4, 1, {0.2, 0.4, 0.6, 0.8}), ad::L2Group::none};
    Parameter pb{"b", Tensor::matrix(4, 1, {0.5, 0.1, 0.9, 0.3}), ad::L2Group::none};
    Var a = t.parameter(pa);
    Var b = t.parameter(pb);
    Gradients g = t.backward(mse_loss(t, a, b));
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(g.get(pa)[i] == doctest::Approx(-g.get(pb)[i]).epsilon(1e-15));
    }
}

TEST_CASE("detachment: peer parameters receive exactly zero gradient on a composite graph") {
    auto ds = small_synth(200);
    ModelInstance m1(Architecture::deepfm, small_model(), ds.schema, 1);
    ModelInstance m2(Architecture::dcn, small_model(), ds.schema, 2);

    data::BatchStream stream(ds.train(), 64, std::nullopt, 0);
    auto batch = stream.next();
    REQUIRE(batch.has_value());

    Tape t;
    std::vector<Var> preds{m1.forward(t, *batch), m2.forward(t, *batch)};
    Var loss = t.add(bce_loss(t, batch->labels, preds[0]),
                     mutual_term_on_tape(t, preds, 0, /*detach_peers=*/true));
    Gradients g = t.backward(loss);

    bool any_own_nonzero = false;
    for (const Parameter& p : m1.params()) {
        Tensor gt = g.get(p);
        for (std::size_t i = 0; i < gt.numel(); ++i) any_own_nonzero |= gt[i] != 0.0;
    }
    CHECK(any_own_nonzero);
    for (const Parameter& p : m2.params()) {
        Tensor gt = g.get(p);
        for (std::size_t i = 0; i < gt.numel(); ++i) CHECK(gt[i] == 0.0);
    }

    // with coupling enabled the peer does receive gradient
    Tape t2;
    std::vector<Var> preds2{m1.forward(t2, *batch), m2.forward(t2, *batch)};
    Var coupled = t2.add(bce_loss(t2, batch->labels, preds2[0]),
                         mutual_term_on_tape(t2, preds2, 0, /*detach_peers=*/false));
    Gradients g2 = t2.backward(coupled);
    bool any_peer_nonzero = false;
    for (const Parameter& p : m2.params()) {
        Tensor gt = g2.get(p);
        for (std::size_t i = 0; i < gt.numel(); ++i) any_peer_nonzero |= gt[i] != 0.0;
    }
    CHECK(any_peer_nonzero);
}

TEST_CASE("adam: first-step direction, zero-grad fixedness, scalar quadratic") {
    // first step moves by -lr * sign(g) up to epsilon effects
    std::vector<Parameter> params;
    params.push_back(Parameter{"w", Tensor::row({1.0, -2.0, 3.0}), ad::L2Group::none});
    Tape t;
    Var loss = t.sum(t.mul(t.parameter(params[0]), t.constant(Tensor::row({2.0, -1.5, 0.5}))));
    Gradients g = t.backward(loss);
    AdamState st;
    adam_step(params, g, st, 0.1);
    CHECK(params[0].value[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
    CHECK(params[0].value[1] == doctest::Approx(-2.0 + 0.1).epsilon(1e-6));
    CHECK(params[0].value[2] == doctest::Approx(3.0 - 0.1).epsilon(1e-6));

    // zero gradients from a fresh state leave parameters untouched
    std::vector<Parameter> frozen;
    frozen.push_back(Parameter{"w", Tensor::row({1.0, 2.0}), ad::L2Group::none});
    AdamState st2;
    Gradients empty;
    for (int k = 0; k < 5; ++k) adam_step(frozen, empty, st2, 0.1);
    CHECK(frozen[0].value.vec() == std::vector<double>{1.0, 2.0});

    // 200 steps on (x-3)^2 from 0 at lr 0.1
    std::vector<Parameter> xp;
    xp.push_back(Parameter{"x", Tensor::row({0.0}), ad::L2Group::none});
    AdamState st3;
    for (int k = 0; k < 200; ++k) {
        Tape tt;
        Var x = tt.parameter(xp[0]);
        Var l = tt.sum(tt.square(tt.sub(x, tt.constant(Tensor::row({3.0})))));
        adam_step(xp, tt.backward(l), st3, 0.1);
    }
    CHECK(std::abs(xp[0].value[0] - 3.0) < 0.05);

    // NaN gradient aborts naming the parameter
    std::vector<Parameter> bad;
    bad.push_back(Parameter{"spiky", Tensor::row({1.0}), ad::L2Group::none});
    Tape tb;
    Var v = tb.parameter(bad[0]);
    Var nan_loss = tb.sum(tb.custom_unary(v, Tensor::row({1.0}), [](const Tensor& gr) {
        Tensor out = gr;
        out[0] = std::nan("");
        return out;
    }));
    AdamState st4;
    CHECK_THROWS_WITH_AS(adam_step(bad, tb.backward(nan_loss), st4, 0.1), doctest::Contains("spiky"),
                         std::runtime_error);
}

TEST_CASE("learning-rate schedule") {
    CHECK(lr_at(1e-3, 0.0) == 1e-3);
    CHECK(std::abs(lr_at(1e-3, 3.0) - 1e-4) <= 1e-4 * 1e-12);
    CHECK(lr_at(2.0, 1.5) == doctest::Approx(2.0 * std::pow(10.0, -0.5)).epsilon(1e-12));
    CHECK(lr_at(1.0, 1.0) > lr_at(1.0, 1.0001)); // monotone decreasing
    CHECK_THROWS_AS(lr_at(1e-3, -0.1), std::invalid_argument);
}

TEST_CASE("checkpoint: byte-exact round trip and validation errors") {
    auto ds = small_synth(300);
    ModelInstance m(Architecture::fibinet, small_model(), ds.schema, 77);
    std::string p1 = tmp_path("mutualctr_ckpt_a.ckpt");
    std::string p2 = tmp_path("mutualctr_ckpt_b.ckpt");
    models::save_checkpoint(m, p1);
    ModelInstance loaded = models::load_checkpoint(p1);
    models::save_checkpoint(loaded, p2);

    auto slurp = [](const std::string& p) {
        std::ifstream is(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    };
    CHECK(slurp(p1) == slurp(p2));
    CHECK(loaded.schema_hash() == m.schema_hash());
    for (std::size_t i = 0; i < m.params().size(); ++i) {
        CHECK(loaded.params()[i].value.vec() == m.params()[i].value.vec());
    }

    // truncated file -> structured error
    std::string truncated = slurp(p1).substr(0, 100);
    std::string p3 = tmp_path("mutualctr_ckpt_trunc.ckpt");
    {
        std::ofstream os(p3, std::ios::binary);
        os.write(truncated.data(), static_cast<std::streamsize>(truncated.size()));
    }
    CHECK_THROWS_AS(models::load_checkpoint(p3), std::runtime_error);

    // wrong schema hash rejected at use
    CHECK_THROWS_WITH_AS(models::require_schema_match(m, "deadbeef", "test"),
                         doctest::Contains("schema hash"), std::runtime_error);

    std::remove(p1.c_str());
    std::remove(p2.c_str());
    std::remove(p3.c_str());
}

TEST_CASE("lambda=0 mutual training matches independent training step for step") {
    auto ds = small_synth(1200);
    RunConfig cfg = small_run(RunMode::mutual_scratch);
    cfg.max_steps = 12;
    cfg.lambda = 0.0;
    std::vector<std::pair<Architecture, ModelConfig>> specs{{Architecture::deepfm, small_model()},
                                                            {Architecture::deepfm, small_model()}};
    TrainResult mutual = train_mutual_scratch(specs, ds, cfg);

    RunConfig icfg = small_run(RunMode::independent);
    icfg.max_steps = 12;
    for (std::size_t i = 0; i < 2; ++i) {
        TrainResult indep = train_independent(Architecture::deepfm, small_model(), ds, icfg, i);
        const auto& mp = mutual.models[i].params();
        const auto& ip = indep.models[0].params();
        REQUIRE(mp.size() == ip.size());
        for (std::size_t k = 0; k < mp.size(); ++k) {
            for (std::size_t j = 0; j < mp[k].value.numel(); ++j) {
                CHECK(std::abs(mp[k].value[j] - ip[k].value[j]) <= 1e-10);
            }
        }
    }
}

TEST_CASE("identical instances keep the mutual term at zero") {
    auto ds = small_synth(600);
    RunConfig cfg = small_run(RunMode::mutual_scratch);
    cfg.max_steps = 6;
    cfg.lambda = 1.0;

    // same architecture and same derived seed: clone by loading one checkpoint twice
    ModelInstance proto(Architecture::pnn, small_model(), ds.schema, instance_init_seed(cfg.seed, 0));
    std::string p = tmp_path("mutualctr_clone.ckpt");
    models::save_checkpoint(proto, p);
    std::vector<ModelInstance> twins;
    twins.push_back(models::load_checkpoint(p));
    twins.push_back(models::load_checkpoint(p));
    std::remove(p.c_str());

    TrainResult result = finetune_mutual(std::move(twins), ds, cfg);
    // identical inputs + identical losses: parameters stay identical (mutual term pinned at 0)
    for (std::size_t k = 0; k < result.models[0].params().size(); ++k) {
        CHECK(result.models[0].params()[k].value.vec() == result.models[1].params()[k].value.vec());
    }
}

TEST_CASE("kd with alpha=1 reproduces the independent trajectory") {
    auto ds = small_synth(800);
    RunConfig base = small_run(RunMode::independent);
    base.max_steps = 8;
    TrainResult indep = train_independent(Architecture::deepfm, small_model(), ds, base, 0);

    // any teacher will do; it is ignored at alpha=1
    ModelInstance teacher(Architecture::dcn, small_model(), ds.schema, 999);
    RunConfig kd_cfg = small_run(RunMode::kd);
    kd_cfg.max_steps = 8;
    kd_cfg.kd_alpha = 1.0;
    TrainResult student = train_kd(teacher, Architecture::deepfm, small_model(), ds, kd_cfg);

    for (std::size_t k = 0; k < indep.models[0].params().size(); ++k) {
        CHECK(student.models[0].params()[k].value.vec() == indep.models[0].params()[k].value.vec());
    }
}

TEST_CASE("kd with alpha=0 pulls the student toward a constant teacher") {
    auto ds = small_synth(1500);
    // teacher with all-zero parameters predicts exactly 0.5 everywhere
    ModelInstance teacher(Architecture::deepfm, small_model(), ds.schema, 1);
    for (Parameter& p : teacher.params())
        for (double& v : p.value.vec()) v = 0.0;

    RunConfig cfg = small_run(RunMode::kd);
    cfg.kd_alpha = 0.0;
    cfg.epochs = 3;
    TrainResult student = train_kd(teacher, Architecture::deepfm, small_model(), ds, cfg);

    eval::ScoredSet scored = score_part(student.models[0], ds, "dev", 512);
    double mean_dev = 0.0;
    for (double s : scored.scores) mean_dev += std::abs(s - 0.5);
    mean_dev /= static_cast<double>(scored.scores.size());
    CHECK(mean_dev < 0.05);
}

TEST_CASE("finetune with zero epochs returns bit-identical parameters") {
    auto ds = small_synth(400);
    std::vector<ModelInstance> given;
    given.emplace_back(Architecture::deepfm, small_model(), ds.schema, 11);
    given.emplace_back(Architecture::deepfm, small_model(), ds.schema, 12);
    std::vector<std::vector<double>> before;
    for (const auto& m : given)
        for (const Parameter& p : m.params()) before.push_back(p.value.vec());

    RunConfig cfg = small_run(RunMode::mutual_finetune);
    cfg.epochs = 0;
    TrainResult out = finetune_mutual(std::move(given), ds, cfg);
    std::size_t i = 0;
    for (const auto& m : out.models)
        for (const Parameter& p : m.params()) CHECK(p.value.vec() == before[i++]);
    // and the report carries pretrained AUC + RelaImp columns
    REQUIRE(out.report.finals.size() == 2);
    CHECK(out.report.finals[0].pretrained_test_auc.has_value());
}

TEST_CASE("reports serialize deterministically and exclude wall-clock time") {
    auto ds = small_synth(600);
    RunConfig cfg = small_run(RunMode::independent);
    cfg.epochs = 1;
    TrainResult a = train_independent(Architecture::deepfm, small_model(), ds, cfg, 0);
    TrainResult b = train_independent(Architecture::deepfm, small_model(), ds, cfg, 0);
    CHECK(a.report.to_json() == b.report.to_json());
    CHECK(a.report.to_json().find("wall_clock") == std::string::npos);
    CHECK(a.report.epochs_csv() == b.report.epochs_csv());
    CHECK(a.report.epochs_csv().rfind("epoch,model_id,train_loss,dev_auc,dev_logloss,lr\n", 0) == 0);

    // different seeds diverge
    RunConfig cfg2 = cfg;
    cfg2.seed = 505;
    TrainResult c = train_independent(Architecture::deepfm, small_model(), ds, cfg2, 0);
    CHECK(std::abs(c.report.finals[0].dev_auc - a.report.finals[0].dev_auc) > 1e-6);
}

TEST_CASE("mutual training rejects undersized pools and mixed schemas") {
    auto ds = small_synth(300);
    RunConfig cfg = small_run(RunMode::mutual_scratch);
    std::vector<std::pair<Architecture, ModelConfig>> one{{Architecture::deepfm, small_model()}};
    CHECK_THROWS_AS(train_mutual_scratch(one, ds, cfg), std::invalid_argument);

    auto other = small_synth(300, 99); // different data -> different schema hash
    std::vector<ModelInstance> mixed;
    mixed.emplace_back(Architecture::deepfm, small_model(), ds.schema, 1);
    mixed.emplace_back(Architecture::deepfm, small_model(), other.schema, 2);
    CHECK_THROWS_AS(finetune_mutual(std::move(mixed), ds, small_run(RunMode::mutual_finetune)),
                    std::runtime_error);
}
