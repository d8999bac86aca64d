#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "layersync/train.hpp"

using namespace layersync;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("layersync_test_" + name);
    fs::remove_all(dir);
    return dir;
}

// Small gmm2d run: a few hundred microseconds per step.
RunConfig toy_run(long steps) {
    RunConfig c;
    c.dataset.kind = DatasetKind::gmm2d;
    c.dataset.size = 512;
    c.backbone.depth = 4;
    c.backbone.hidden_dim = 16;
    c.backbone.num_heads = 2;
    c.backbone.frequency_dim = 16;
    c.backbone.num_classes = 0;
    c.batch_size = 16;
    c.total_steps = steps;
    c.optimizer.lr = 1e-3;
    c.ema_decay = 0.99;
    c.sampler.steps = 4;
    c.eval_samples = 128;
    c.eval_reference_size = 128;
    c.seed = 7;
    return c;
}

// Sets p's gradient to g by differentiating sum(p * g).
void set_grad(Tensor& p, std::vector<double> g) {
    Tape tape;
    TapeScope<double> scope(tape);
    p.zero_grad();
    tape.backward(sum_all(p * Tensor(p.shape(), std::move(g))));
}

std::vector<LogRow> run_rows(RunConfig c) {
    Trainer<double> t(std::move(c));
    t.run();
    return t.log().rows();
}

}  // namespace

TEST(AdamW, ThreeStepsOnSquare) {
    // independently executed update rule, lr 0.1, default betas and eps
    const double expect[3] = {0.9000000005, 0.8004122286917928, 0.7015862729460303};
    const double expect_wd[3] = {0.8500000004999999, 0.7082484433597453, 0.5749739307415968};
    for (double wd : {0.0, 0.5}) {
        std::vector<Tensor> p{Tensor({1}, {1.0})};
        p[0].set_requires_grad(true);
        auto state = AdamWState<double>::zeros_like(p);
        AdamWConfig hp;
        hp.lr = 0.1;
        hp.weight_decay = wd;
        for (int k = 0; k < 3; ++k) {
            Tape tape;
            {
                TapeScope<double> scope(tape);
                p[0].zero_grad();
                tape.backward(sum_all(p[0] * p[0]));
            }
            adamw_step(p, state, hp);
            EXPECT_NEAR(p[0].item(), (wd == 0.0 ? expect : expect_wd)[k], 1e-12) << "step " << k + 1;
        }
    }
}

TEST(AdamW, FirstStepIsSignedLearningRate) {
    std::vector<Tensor> p{Tensor({3}, {0.0, 0.0, 0.0})};
    p[0].set_requires_grad(true);
    set_grad(p[0], {3.0, -0.01, 250.0});
    auto state = AdamWState<double>::zeros_like(p);
    AdamWConfig hp;
    hp.lr = 0.01;
    hp.eps = 1e-12;
    adamw_step(p, state, hp);
    EXPECT_NEAR(p[0][0], -0.01, 1e-9);
    EXPECT_NEAR(p[0][1], 0.01, 1e-9);
    EXPECT_NEAR(p[0][2], -0.01, 1e-9);
}

TEST(AdamW, ZeroGradientLeavesParams) {
    std::vector<Tensor> p{Tensor({2}, {1.5, -2.0})};
    p[0].set_requires_grad(true);
    set_grad(p[0], {0.0, 0.0});
    auto state = AdamWState<double>::zeros_like(p);
    for (int k = 0; k < 10; ++k) adamw_step(p, state, AdamWConfig{});
    EXPECT_EQ(p[0].to_vector(), (std::vector<double>{1.5, -2.0}));
}

TEST(AdamW, NonFiniteGradientNamesTensor) {
    std::vector<Tensor> p{Tensor({1}, {0.0}), Tensor({2}, {0.0, 0.0})};
    for (auto& t : p) t.set_requires_grad(true);
    set_grad(p[1], {0.0, std::numeric_limits<double>::quiet_NaN()});
    auto state = AdamWState<double>::zeros_like(p);
    try {
        adamw_step(p, state, AdamWConfig{}, {"a", "blocks.1.w"});
        FAIL();
    } catch (const std::domain_error& e) {
        EXPECT_NE(std::string(e.what()).find("blocks.1.w"), std::string::npos);
    }
    EXPECT_EQ(state.step, 0);
}

TEST(Ema, Examples) {
    std::vector<Tensor> params{Tensor({2}, {1.0, 1.0})};
    std::vector<Tensor> ema{Tensor({2}, {0.0, 0.0})};
    ema_update(ema, params, 0.5);
    ema_update(ema, params, 0.5);
    EXPECT_EQ(ema[0].to_vector(), (std::vector<double>{0.75, 0.75}));
    ema_update(ema, params, 1.0);
    EXPECT_EQ(ema[0].to_vector(), (std::vector<double>{0.75, 0.75}));
    ema_update(ema, params, 0.0);
    EXPECT_EQ(ema[0].to_vector(), params[0].to_vector());
}

TEST(Ema, TreeMismatch) {
    std::vector<Tensor> a{Tensor::zeros({2})}, b{Tensor::zeros({3})}, c;
    EXPECT_THROW(ema_update(a, b, 0.5), ShapeError);
    EXPECT_THROW(ema_update(a, c, 0.5), std::invalid_argument);
}

TEST(Config, OverridesAndJsonRoundTrip) {
    RunConfig c;
    apply_override(c, "pair.lambda=0.3");
    apply_override(c, "regularizer=dispersive");
    apply_override(c, "dataset.kind=tiny_images");
    apply_override(c, "out_dir=runs/a");
    apply_override(c, "ema.enabled=false");
    EXPECT_EQ(c.pair.lambda, 0.3);
    EXPECT_EQ(c.regularizer, Regularizer::dispersive);
    EXPECT_EQ(c.dataset.kind, DatasetKind::tiny_images);
    EXPECT_EQ(c.out_dir, "runs/a");
    EXPECT_FALSE(c.ema_enabled);
    auto j = config_to_json(c);
    EXPECT_EQ(config_to_json(config_from_json(j)), j);
    EXPECT_THROW(apply_override(c, "no_such.key=1"), std::invalid_argument);
    EXPECT_THROW(apply_override(c, "batch_size"), std::invalid_argument);
    EXPECT_THROW(apply_override(c, "batch_size=\"many\""), std::invalid_argument);
}

TEST(Config, Defaults) {
    RunConfig c;
    EXPECT_EQ(c.optimizer.lr, 1e-4);
    EXPECT_EQ(c.optimizer.beta1, 0.9);
    EXPECT_EQ(c.optimizer.beta2, 0.999);
    EXPECT_EQ(c.optimizer.eps, 1e-8);
    EXPECT_EQ(c.optimizer.weight_decay, 0.0);
    EXPECT_EQ(c.ema_decay, 0.9999);
}

TEST(Config, ResolveChecksInvariants) {
    auto c = toy_run(10);
    c.regularizer = Regularizer::dispersive;
    c.batch_size = 1;
    EXPECT_THROW(c.resolve(), std::invalid_argument);
    c = toy_run(10);
    c.pair = {3, 9, 0.2};
    EXPECT_ANY_THROW(c.resolve());
    c = toy_run(10);
    c.resolve();
    EXPECT_EQ(c.backbone.input_channels, 2);
    EXPECT_LT(c.pair.k, c.pair.k_ref);
    EXPECT_LE(c.pair.k_ref, 4);
}

TEST(MetricsLog, AppendOnlyAndCsvRoundTrip) {
    auto dir = scratch("log");
    MetricsLog log(dir / "m.csv");
    LogRow a{1, 0.5, 0.1, 0.45, 2.0, std::nullopt, std::nullopt};
    LogRow b{2, 1.0 / 3.0, -0.2, 0.1, 3.0, 0.125, 1e-5};
    log.append(a);
    log.append(b);
    EXPECT_THROW(log.append(a), std::invalid_argument);
    EXPECT_EQ(log.rows().size(), 2u);
    auto back = MetricsLog::read(dir / "m.csv");
    ASSERT_EQ(back.rows().size(), 2u);
    EXPECT_TRUE(back.rows()[0].same_values(a));
    EXPECT_TRUE(back.rows()[1].same_values(b));
    EXPECT_EQ(back.rows()[1].wall_ms, 3.0);
    auto s = summarize(back);
    EXPECT_EQ(s.last_step, 2);
    EXPECT_EQ(s.final_fd, 0.125);
    write_log_plot(dir / "m.svg", back);
    EXPECT_TRUE(fs::exists(dir / "m.svg"));
    fs::remove_all(dir);
}

TEST(Training, LambdaZeroMatchesNoRegularizer) {
    auto c = toy_run(30);
    c.pair.lambda = 0.0;
    auto sync = run_rows(c);
    c.regularizer = Regularizer::none;
    auto none = run_rows(c);
    ASSERT_EQ(sync.size(), none.size());
    for (std::size_t i = 0; i < sync.size(); ++i) {
        EXPECT_EQ(sync[i].velocity_loss, none[i].velocity_loss) << "step " << sync[i].step;
        EXPECT_EQ(sync[i].total_loss, none[i].total_loss);
        EXPECT_EQ(sync[i].eval_fd, none[i].eval_fd);
    }
    // the sync term is still measured at lambda = 0
    EXPECT_NE(sync.back().sync_loss, 0.0);
}

TEST(Training, DeterministicUnderSeed) {
    for (auto reg : {Regularizer::layersync, Regularizer::dispersive}) {
        auto c = toy_run(20);
        c.regularizer = reg;
        auto a = run_rows(c), b = run_rows(c);
        ASSERT_EQ(a.size(), 20u);
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].same_values(b[i])) << "step " << a[i].step;
        ASSERT_TRUE(a.back().eval_fd.has_value());
        c.seed = 8;
        EXPECT_NE(run_rows(c).back().total_loss, a.back().total_loss);
    }
}

TEST(Training, ResumeMatchesUninterruptedRun) {
    auto dir = scratch("resume");
    auto c = toy_run(24);
    c.checkpoint_every = 12;
    c.out_dir = (dir / "full").string();
    const auto full = run_rows(c);

    c.out_dir = (dir / "resumed").string();
    {
        Trainer<double> first(c);
        first.run(12);
        EXPECT_EQ(first.step(), 12);
    }
    Trainer<double> second(c);
    second.load_checkpoint(dir / "resumed" / "checkpoints" / checkpoint_name(12));
    EXPECT_EQ(second.step(), 12);
    second.run();
    const auto& tail = second.log().rows();
    ASSERT_EQ(tail.size(), full.size());
    for (std::size_t i = 0; i < full.size(); ++i) EXPECT_TRUE(tail[i].same_values(full[i])) << "step " << full[i].step;
    auto csv = MetricsLog::read(dir / "resumed" / "metrics.csv");
    ASSERT_EQ(csv.rows().size(), full.size());
    EXPECT_TRUE(csv.rows().back().same_values(full.back()));
    EXPECT_EQ(latest_checkpoint(dir / "resumed"), dir / "resumed" / "checkpoints" / checkpoint_name(24));
    fs::remove_all(dir);
}

TEST(Training, NanLossAbortsWithStepAndCheckpoint) {
    auto dir = scratch("nan");
    auto c = toy_run(10);
    c.optimizer.lr = std::numeric_limits<double>::quiet_NaN();
    c.checkpoint_every = 1;
    c.out_dir = dir.string();
    Trainer<double> t(c);
    try {
        t.run();
        FAIL() << "expected divergence";
    } catch (const TrainingDiverged& e) {
        EXPECT_EQ(e.step(), 2);
        EXPECT_NE(std::string(e.what()).find("step 2"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find(checkpoint_name(1)), std::string::npos);
    }
    EXPECT_TRUE(fs::exists(dir / "checkpoints" / checkpoint_name(1) / "manifest.json"));
    fs::remove_all(dir);
}

TEST(Training, GmmToyProgresses) {
    auto c = toy_run(5000);
    c.eval_every = 0;
    const auto rows = run_rows(c);
    ASSERT_EQ(rows.size(), 5000u);
    // windowed means; single-batch losses are noisy
    double early = 0, late = 0;
    for (std::size_t i = 90; i < 110; ++i) early += rows[i].velocity_loss / 20;
    for (std::size_t i = rows.size() - 200; i < rows.size(); ++i) late += rows[i].velocity_loss / 200;
    EXPECT_LT(late, early);
    EXPECT_LT(rows.back().velocity_loss, rows[99].velocity_loss);
}

TEST(Training, CheckpointParamsRoundTrip) {
    auto dir = scratch("params");
    auto c = toy_run(5);
    c.out_dir = dir.string();
    Trainer<double> a(c);
    a.run();
    Trainer<double> b(c);
    b.load_params(dir / "checkpoints" / checkpoint_name(5));
    auto pa = a.params().tensors(), pb = b.params().tensors();
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].to_vector(), pb[i].to_vector());
    EXPECT_EQ(a.evaluate(a.params()).fd, b.evaluate(b.params()).fd);
    EXPECT_THROW(b.load_params(dir / "missing"), std::exception);
    fs::remove_all(dir);
}
