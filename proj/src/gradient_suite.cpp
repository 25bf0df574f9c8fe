#include "booknet/gradient_suite.hpp"

#include <random>

#include "booknet/geometry.hpp"
#include "booknet/ops.hpp"
#include "booknet/train.hpp"

namespace booknet::grad {

namespace {

Tensor uniform(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = dist(rng);
  return t;
}

// Magnitudes in [0.1, 1] with random sign: no input sits on a kink.
Tensor off_zero(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

// Weighted sum with fixed weights so every output element matters.
Var probe(Var y, std::uint64_t seed) { return sum(mul(y, y.tape->constant(uniform(y.shape(), seed)))); }

class Runner {
 public:
  explicit Runner(const SuiteOptions& o) : o_(o) {}

  void op(const std::string& name, const std::vector<Tensor>& inputs, const ScalarFn& f) {
    GradCheckOptions g;
    g.tol = o_.op_tol;
    run(name, inputs, f, g);
  }

  void run(const std::string& name, const std::vector<Tensor>& inputs, const ScalarFn& f, GradCheckOptions g) {
    g.fault_op = o_.fault_op;
    g.fault_factor = o_.fault_factor;
    SuiteEntry e;
    e.name = name;
    e.tol = g.tol;
    try {
      e.report = grad_check(f, inputs, g);
    } catch (const GradCheckFailure& err) {
      e.error = err.what();
    }
    out.push_back(std::move(e));
  }

  std::vector<SuiteEntry> out;

 private:
  const SuiteOptions& o_;
};

void end_to_end(Runner& r, const SuiteOptions& o) {
  const model::BookNetConfig c = gradcheck_config();
  model::Params params = model::init_params(c, 11);
  // Zero-initialized residual branches would hide every gradient behind them.
  std::uint64_t seed = 500;
  for (auto& p : params.entries()) {
    const bool zeroed = p.name.rfind("backbone.", 0) == 0 && p.name.find(".conv2.w") != std::string::npos;
    const bool tiny = p.name.find(".flow.w") != std::string::npos;
    if (zeroed || tiny) p.value = uniform(p.value.shape, ++seed, -0.05, 0.05);
  }
  std::vector<Tensor> images, inputs;
  std::vector<train::FlowTargets> targets;
  for (std::uint64_t i = 0; i < 2; ++i) {
    images.push_back(uniform({3, c.height, c.width}, 900 + i, 0.0, 1.0));
    train::FlowTargets t;
    t.full = geometry::WarpFlow(uniform({2, c.height, c.width}, 910 + i));
    std::tie(t.left, t.right) = geometry::split_full_flow(t.full);
    targets.push_back(std::move(t));
  }
  for (const auto& p : params.entries()) inputs.push_back(p.value);
  const ScalarFn f = [&](Tape& tape, const std::vector<Var>& vars) {
    const model::ParamVars pv(params, vars);
    Var loss;
    for (std::size_t i = 0; i < images.size(); ++i) {
      const model::FlowOutputs out = model::booknet_forward(c, pv, tape.constant(images[i]));
      const Var l = train::multitask_l1(out, targets[i], model::Supervision{});
      loss = loss.valid() ? add(loss, l) : l;
    }
    return loss;
  };
  GradCheckOptions g;
  g.tol = o.end_to_end_tol;
  g.max_coords_per_input = o.end_to_end_coords;
  r.run("booknet_forward+multitask_l1", inputs, f, g);
}

}  // namespace

model::BookNetConfig gradcheck_config() {
  model::BookNetConfig c;
  c.height = c.width = 32;
  c.channels = 8;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers_stage1 = c.decoder_layers_stage2 = 1;
  c.ffn_expansion = 2;
  c.stem_channels = 4;
  c.mid_channels = 8;
  c.blocks_per_stage = 2;
  return c;
}

std::vector<SuiteEntry> run_gradient_suite(const SuiteOptions& options) {
  Runner r(options);
  const Tensor a = uniform({3, 4}, 10), b = uniform({3, 4}, 11);
  r.op("add", {a, b}, [](Tape&, const std::vector<Var>& v) { return probe(add(v[0], v[1]), 1); });
  r.op("sub", {a, b}, [](Tape&, const std::vector<Var>& v) { return probe(sub(v[0], v[1]), 2); });
  r.op("mul", {a, b}, [](Tape&, const std::vector<Var>& v) { return probe(mul(v[0], v[1]), 3); });
  r.op("scale", {a}, [](Tape&, const std::vector<Var>& v) { return probe(scale(v[0], -2.5), 4); });
  r.op("relu", {off_zero({3, 4}, 12)}, [](Tape&, const std::vector<Var>& v) { return probe(relu(v[0]), 5); });
  r.op("add_bias", {a, uniform({4}, 13)},
       [](Tape&, const std::vector<Var>& v) { return probe(add_bias(v[0], v[1]), 6); });
  r.op("matmul", {a, uniform({4, 5}, 14)},
       [](Tape&, const std::vector<Var>& v) { return probe(matmul(v[0], v[1]), 7); });
  r.op("transpose", {a}, [](Tape&, const std::vector<Var>& v) { return probe(transpose(v[0]), 8); });
  r.op("reshape", {a}, [](Tape&, const std::vector<Var>& v) { return probe(reshape(v[0], {2, 6}), 9); });
  r.op("concat", {a, b}, [](Tape&, const std::vector<Var>& v) { return probe(concat({v[0], v[1]}, 1), 10); });
  r.op("split", {a}, [](Tape&, const std::vector<Var>& v) {
    auto parts = split(v[0], 0, {1, 2});
    return add(probe(parts[0], 11), probe(parts[1], 12));
  });
  r.op("layer_norm", {uniform({5, 6}, 15), uniform({6}, 16, 0.5, 1.5), uniform({6}, 17)},
       [](Tape&, const std::vector<Var>& v) { return probe(layer_norm(v[0], v[1], v[2]), 13); });
  r.op("softmax", {uniform({3, 5}, 18, -3, 3)},
       [](Tape&, const std::vector<Var>& v) { return probe(softmax(v[0], 1), 14); });
  r.op("linear", {uniform({4, 3}, 19), uniform({5, 3}, 20), uniform({5}, 21)},
       [](Tape&, const std::vector<Var>& v) { return probe(linear(v[0], v[1], v[2]), 15); });
  r.op("conv2d", {uniform({2, 5, 6}, 22), uniform({3, 2, 3, 3}, 23), uniform({3}, 24)},
       [](Tape&, const std::vector<Var>& v) { return probe(conv2d(v[0], v[1], v[2], 1, 1), 16); });
  r.op("conv2d/stride2", {uniform({2, 7, 6}, 25), uniform({3, 2, 3, 3}, 26), uniform({3}, 27)},
       [](Tape&, const std::vector<Var>& v) { return probe(conv2d(v[0], v[1], v[2], 2, 1), 17); });
  r.op("attention", {uniform({3, 8}, 28), uniform({4, 8}, 29), uniform({4, 8}, 30)},
       [](Tape&, const std::vector<Var>& v) { return probe(attention(v[0], v[1], v[2], 2), 18); });
  {
    std::vector<Tensor> in{uniform({3, 4}, 31), uniform({5, 4}, 32)};
    for (std::uint64_t k = 0; k < 4; ++k) {
      in.push_back(uniform({4, 4}, 40 + k, -0.6, 0.6));
      in.push_back(uniform({4}, 50 + k, -0.2, 0.2));
    }
    r.op("multi_head_attention", in, [](Tape&, const std::vector<Var>& v) {
      const AttentionVars p{v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9]};
      return probe(multi_head_attention(v[0], v[1], v[1], p, 2), 19);
    });
  }
  r.op("sum", {a}, [](Tape&, const std::vector<Var>& v) { return sum(v[0]); });
  r.op("mean", {a}, [](Tape&, const std::vector<Var>& v) { return mean(v[0]); });
  r.op("sum_squares", {a}, [](Tape&, const std::vector<Var>& v) { return sum_squares(v[0]); });
  r.op("mean_abs_diff", {off_zero({3, 4}, 33)},
       [](Tape&, const std::vector<Var>& v) { return mean_abs_diff(v[0], Tensor({3, 4}, 0.05)); });
  {
    // Sample points a quarter pixel off the grid, away from the bilinear kinks.
    const std::size_t hs = 6, ws = 7, h = 4, w = 5;
    Tensor flow({2, h, w});
    std::mt19937_64 rng(34);
    std::uniform_int_distribution<int> px(0, ws - 2), py(0, hs - 2);
    for (std::size_t i = 0; i < h * w; ++i) {
      flow.data[i] = geometry::to_normalized(px(rng) + 0.25 + 0.5 * (i % 2), ws);
      flow.data[h * w + i] = geometry::to_normalized(py(rng) + 0.25 + 0.5 * (i % 3 == 0), hs);
    }
    r.op("bilinear_sample", {uniform({2, hs, ws}, 35), flow}, [](Tape&, const std::vector<Var>& v) {
      return probe(geometry::bilinear_sample(v[0], v[1]), 20);
    });
  }
  r.op("convex_upsample", {uniform({2, 2, 3}, 36), uniform({geometry::kUpsampleChannels, 2, 3}, 37, -2, 2)},
       [](Tape&, const std::vector<Var>& v) { return probe(geometry::convex_upsample(v[0], v[1]), 21); });
  if (options.end_to_end) end_to_end(r, options);
  return r.out;
}

}  // namespace booknet::grad
