#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

#include "booknet/checkpoint.hpp"
#include "booknet/gradient_suite.hpp"
#include "booknet/synthgen.hpp"
#include "booknet/train.hpp"
#include "test_util.hpp"

using namespace booknet;
using namespace booknet::train;
using booknet::grad::Tape;
using booknet::grad::Var;
using booknet::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

FlowTargets random_targets(std::size_t h, std::size_t w, std::uint64_t seed) {
  FlowTargets t;
  t.full = geometry::WarpFlow(random_tensor({2, h, w}, seed));
  std::tie(t.left, t.right) = geometry::split_full_flow(t.full);
  return t;
}

model::FlowOutputs outputs_of(Tape& tape, const FlowTargets& t, double delta = 0.0) {
  auto shifted = [&](const geometry::WarpFlow& f) {
    Tensor c = f.coords();
    for (double& v : c.data) v += delta;
    return tape.leaf(c);
  };
  model::FlowOutputs o;
  o.left = shifted(t.left);
  o.right = shifted(t.right);
  o.full = shifted(t.full);
  return o;
}

std::vector<Example> synth_examples(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto layout = synthgen::make_layout(seed + i, {});
    const auto params = synthgen::sample_deformation(seed + 100 + i, {});
    const synthgen::BookSample s = synthgen::render_sample(layout, params, size, size);
    out.push_back({s.distorted, {s.left, s.right, s.full}});
  }
  return out;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

std::vector<NamedTensor> scalar_param(double w, double g) {
  Tensor t({1}, w);
  t.grad = {g};
  return {{"w", t}};
}

}  // namespace

TEST_CASE("multi-task L1") {
  const FlowTargets gt = random_targets(8, 16, 1);
  Tape tape;
  SUBCASE("zero at the target") {
    CHECK(multitask_l1(outputs_of(tape, gt), gt, {}).value()[0] == 0.0);
  }
  SUBCASE("constant offset on every coordinate gives 3|delta|") {
    for (double d : {0.01, -0.25, 0.5}) CHECK(multitask_l1(outputs_of(tape, gt, d), gt, {}).value()[0] == doctest::Approx(3 * std::abs(d)).epsilon(1e-12));
  }
  SUBCASE("left only ignores the other flows bitwise") {
    const model::FlowOutputs a = outputs_of(tape, gt, 0.1);
    model::FlowOutputs b = a;
    b.right = tape.leaf(random_tensor(a.right.shape(), 7));
    b.full = tape.leaf(random_tensor(a.full.shape(), 8));
    const model::Supervision left{true, false, false};
    CHECK(multitask_l1(a, gt, left).value()[0] == multitask_l1(b, gt, left).value()[0]);
  }
  SUBCASE("all flags equals the sum of single flags") {
    model::FlowOutputs o;
    o.left = tape.leaf(random_tensor({2, 8, 8}, 2));
    o.right = tape.leaf(random_tensor({2, 8, 8}, 3));
    o.full = tape.leaf(random_tensor({2, 8, 16}, 4));
    const double l = multitask_l1(o, gt, {true, false, false}).value()[0];
    const double r = multitask_l1(o, gt, {false, true, false}).value()[0];
    const double f = multitask_l1(o, gt, {false, false, true}).value()[0];
    CHECK(multitask_l1(o, gt, {}).value()[0] == (l + r) + f);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(multitask_l1(outputs_of(tape, gt), gt, {false, false, false}), ConfigError);
    model::FlowOutputs o = outputs_of(tape, gt);
    o.left = tape.leaf(Tensor({2, 8, 7}));
    CHECK_THROWS_AS(multitask_l1(o, gt, {}), DimensionError);
  }
}

TEST_CASE("AdamW") {
  SUBCASE("two steps on one scalar, evaluated by hand") {
    const double lr = 0.01, g1 = 0.3, g2 = -0.2, w0 = 0.7;
    AdamW opt(AdamWOptions{0.9, 0.999, 1e-8, 0.0});
    auto p = scalar_param(w0, g1);
    opt.step(p, lr);
    const double w1 = w0 - lr * 0.3 / (std::sqrt(0.09) + 1e-8);
    CHECK(p[0].value[0] == doctest::Approx(w1).epsilon(1e-15));
    CHECK(std::abs(p[0].value[0] - (w0 - lr)) < 1e-9);  // first step moves by lr * sign(g)
    p[0].value.grad = {g2};
    opt.step(p, lr);
    const double m = 0.9 * (0.1 * g1) + 0.1 * g2;
    const double v = 0.999 * (0.001 * g1 * g1) + 0.001 * g2 * g2;
    const double w2 = w1 - lr * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
    CHECK(p[0].value[0] == doctest::Approx(w2).epsilon(1e-14));
    CHECK(opt.steps() == 2);
  }
  SUBCASE("zero gradient without decay: parameters stay, moments decay") {
    AdamW opt(AdamWOptions{0.9, 0.999, 1e-8, 0.0});
    auto p = scalar_param(0.5, 1.0);
    opt.step(p, 0.1);
    const double w = p[0].value[0], m = opt.first_moments()[0][0], v = opt.second_moments()[0][0];
    p[0].value.grad = {0.0};
    opt.step(p, 0.1);
    CHECK(opt.first_moments()[0][0] == 0.9 * m);
    CHECK(opt.second_moments()[0][0] == 0.999 * v);
    CHECK(p[0].value[0] != w);  // momentum still moves the weight
    AdamW fresh(AdamWOptions{0.9, 0.999, 1e-8, 0.0});
    auto q = scalar_param(0.5, 0.0);
    fresh.step(q, 0.1);
    CHECK(q[0].value[0] == 0.5);
  }
  SUBCASE("decoupled decay alone scales the weight") {
    AdamW opt(AdamWOptions{0.9, 0.999, 1e-8, 0.01});
    auto p = scalar_param(2.0, 0.0);
    opt.step(p, 0.5);
    CHECK(p[0].value[0] == 2.0 * (1.0 - 0.5 * 0.01));
  }
  SUBCASE("lr = 0 leaves parameters bitwise unchanged") {
    Tensor t = random_tensor({4, 5}, 3);
    t.grad = random_tensor({4, 5}, 4).data;
    std::vector<NamedTensor> p{{"a", t}, {"b", Tensor({3}, 1.5)}};
    AdamW opt;
    opt.step(p, 0.0);
    CHECK(p[0].value.data == t.data);
    CHECK(p[1].value.data == std::vector<double>(3, 1.5));
  }
  SUBCASE("non-finite gradient is rejected without side effects") {
    AdamW opt;
    auto p = scalar_param(0.5, 0.1);
    opt.step(p, 0.1);
    const double w = p[0].value[0], m = opt.first_moments()[0][0];
    p[0].value.grad = {std::numeric_limits<double>::quiet_NaN()};
    CHECK_THROWS_AS(opt.step(p, 0.1), NonFiniteGradient);
    CHECK(p[0].value[0] == w);
    CHECK(opt.first_moments()[0][0] == m);
    CHECK(opt.steps() == 1);
  }
}

TEST_CASE("global gradient clipping") {
  std::vector<NamedTensor> p{{"a", Tensor({2})}, {"b", Tensor({1})}};
  p[0].value.grad = {3.0, 0.0};
  p[1].value.grad = {4.0};
  CHECK(clip_grad_norm(p, 1.0) == 5.0);
  CHECK(p[0].value.grad[0] == doctest::Approx(0.6));
  CHECK(p[1].value.grad[0] == doctest::Approx(0.8));
  CHECK(clip_grad_norm(p, 10.0) == doctest::Approx(1.0));
  CHECK(p[1].value.grad[0] == doctest::Approx(0.8));
}

TEST_CASE("one-cycle schedule") {
  const double max_lr = 1e-4;
  for (std::size_t total : {10, 97, 1000, 2600}) {
    const auto peak = static_cast<std::size_t>(std::floor(0.3 * total));
    CHECK(onecycle_lr(0, total, max_lr) == max_lr / 25);
    CHECK(onecycle_lr(peak, total, max_lr) == max_lr);
    CHECK(std::abs(onecycle_lr(total, total, max_lr) - max_lr / 1e4) <= 1e-12);
    // Largest step of a linear ramp over 0.3 T steps and of a half cosine
    // over 0.7 T steps, with one step of slack for the rounded peak.
    const double T = static_cast<double>(total);
    const double bound =
        std::max((1 - 1.0 / 25) / std::floor(0.3 * T), std::numbers::pi / 2 * (1 - 1e-4) / (T - std::floor(0.3 * T))) *
        max_lr;
    double worst = 0.0;
    for (std::size_t s = 0; s < total; ++s) {
      const double a = onecycle_lr(s, total, max_lr), b = onecycle_lr(s + 1, total, max_lr);
      worst = std::max(worst, std::abs(b - a));
      if (s < peak) CHECK(b > a);
      if (s >= peak) CHECK(b <= a);
    }
    CHECK(worst <= bound * (1 + 1e-12));
  }
  CHECK_THROWS_AS(onecycle_lr(11, 10, max_lr), std::out_of_range);
  CHECK_THROWS_AS(onecycle_lr(0, 0, max_lr), ConfigError);
}

TEST_CASE("train config") {
  TrainConfig c;
  c.seed = 42;
  c.supervise = {false, true, true};
  c.augment.hue = 0.05;
  c.augment.value = {0.8, 1.1};
  const TrainConfig d = train_config_from_json(to_json(c));
  CHECK(to_json(d) == to_json(c));
  CHECK(c.epochs == 65);
  CHECK(c.batch_size == 4);
  CHECK(c.max_lr == 1e-4);
  CHECK(c.weight_decay == 1e-5);

  nlohmann::json j = to_json(c);
  j.erase("seed");
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
  TrainConfig bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.supervise = {false, false, false};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("train log") {
  const fs::path dir = fresh_dir("booknet_trainlog_test");
  fs::create_directories(dir);
  {
    TrainLog log(dir / "log.jsonl");
    log.header({{"k", 1}});
    StepRecord r;
    r.loss = 1.0;
    log.add(r);
    r.step = 1;
    r.wall_seconds = 3.5;
    log.add(r);
    log.add(EpochRecord{0, 0.25});
    r.step = 1;
    CHECK_THROWS(log.add(r));
    r.step = 2;
    r.loss = std::numeric_limits<double>::infinity();
    CHECK_THROWS(log.add(r));
  }
  std::ifstream in(dir / "log.jsonl");
  std::vector<nlohmann::json> lines;
  for (std::string s; std::getline(in, s);) lines.push_back(nlohmann::json::parse(s));
  REQUIRE(lines.size() == 4);
  CHECK(lines[0]["type"] == "header");
  CHECK(lines[2]["step"] == 1);
  CHECK_FALSE(lines[2].contains("wall_seconds"));
  CHECK(lines[3]["val_flow_l1"] == 0.25);
  std::ifstream timing(dir / "log.timing.jsonl");
  std::string first;
  std::getline(timing, first);
  CHECK(nlohmann::json::parse(first).contains("wall_seconds"));
  fs::remove_all(dir);
}

TEST_CASE("training loop") {
  const model::BookNetConfig mc = grad::gradcheck_config();
  const std::vector<Example> data = synth_examples(4, 32, 5);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 2;
  tc.max_lr = 2e-3;
  tc.seed = 9;
  tc.augment.hue = 0.02;
  tc.augment.value = {0.9, 1.1};

  SUBCASE("same seed twice: identical logs and checkpoints") {
    const fs::path a = fresh_dir("booknet_train_a"), b = fresh_dir("booknet_train_b");
    fs::create_directories(a);
    fs::create_directories(b);
    TrainLog log_a(a / "log.jsonl"), log_b(b / "log.jsonl");
    const TrainResult ra = train_loop(mc, tc, data, data, a, log_a);
    const TrainResult rb = train_loop(mc, tc, data, data, b, log_b);
    REQUIRE(log_a.steps().size() == 6);
    for (std::size_t i = 0; i < 6; ++i) CHECK(log_a.steps()[i].loss == log_b.steps()[i].loss);
    CHECK(log_a.epochs().size() == 3);
    CHECK(log_a.epochs()[2].val_flow_l1.has_value());
    CHECK(read_file_bytes(ra.last_checkpoint) == read_file_bytes(rb.last_checkpoint));
    CHECK(read_file_bytes(a / "log.jsonl") == read_file_bytes(b / "log.jsonl"));
    CHECK(fs::exists(a / "epoch_000.bkpt"));
    CHECK(fs::exists(a / "model_config.json"));
    const model::Params loaded = load_params(ra.last_checkpoint, mc);
    CHECK(loaded.size() == ra.params.size());

    TrainConfig other = tc;
    other.seed = 10;
    TrainLog lc;
    train_loop(mc, other, data, {}, {}, lc);
    CHECK(lc.steps()[0].loss != log_a.steps()[0].loss);
    fs::remove_all(a);
    fs::remove_all(b);
  }
  SUBCASE("learning rate follows the schedule and max_steps caps the run") {
    TrainConfig t = tc;
    t.max_steps = 5;
    TrainLog log;
    train_loop(mc, t, data, {}, {}, log);
    REQUIRE(log.steps().size() == 5);
    for (std::size_t s = 0; s < 5; ++s) CHECK(log.steps()[s].lr == onecycle_lr(s, 5, t.max_lr));
  }
  SUBCASE("full-only supervision leaves the page heads without gradient") {
    TrainConfig t = tc;
    t.supervise = {false, false, true};
    t.assert_isolation = true;
    TrainLog log;
    CHECK_NOTHROW(train_loop(mc, t, data, {}, {}, log));
    model::BookNetConfig nofuse = mc;
    nofuse.use_fusion = false;
    CHECK_THROWS_AS(train_loop(nofuse, t, data, {}, {}, log), ConfigError);
  }
  SUBCASE("a short overfit reduces the loss") {
    TrainConfig t = tc;
    t.epochs = 60;
    t.batch_size = 2;
    t.augment = {};
    const std::vector<Example> two(data.begin(), data.begin() + 2);
    TrainLog log;
    train_loop(mc, t, two, {}, {}, log);
    CHECK(log.steps().back().loss < 0.5 * log.steps().front().loss);
  }
  SUBCASE("non-finite loss aborts") {
    std::vector<Example> bad = data;
    bad[0].image.data[0] = std::numeric_limits<double>::quiet_NaN();
    const fs::path d = fresh_dir("booknet_train_nan");
    TrainLog log;
    CHECK_THROWS_AS(train_loop(mc, tc, bad, {}, d, log), TrainingAborted);
    CHECK_FALSE(fs::exists(d / "final.bkpt"));
    fs::remove_all(d);
  }
  SUBCASE("empty dataset") {
    TrainLog log;
    CHECK_THROWS_AS(train_loop(mc, tc, {}, {}, {}, log), ConfigError);
  }
}

TEST_CASE("examples are resized to the model resolution") {
  synthgen::LoadedSample s;
  const auto layout = synthgen::make_layout(1, {});
  const synthgen::BookSample b = synthgen::render_sample(layout, synthgen::sample_deformation(2, {}), 64, 64);
  s.distorted = b.distorted;
  s.full = b.full;
  s.left = b.left;
  s.right = b.right;
  model::BookNetConfig mc = grad::gradcheck_config();
  const auto ex = make_examples({s}, mc);
  REQUIRE(ex.size() == 1);
  CHECK(ex[0].image.shape == Shape{3, 32, 32});
  CHECK(ex[0].targets.full.coords().shape == Shape{2, 32, 32});
  CHECK(geometry::stitch_pages(ex[0].targets.left, ex[0].targets.right) == ex[0].targets.full);
  mc.height = mc.width = 64;
  CHECK(make_examples({s}, mc)[0].image.data == b.distorted.data);
}
