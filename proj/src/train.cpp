#include "booknet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "booknet/checkpoint.hpp"

namespace booknet::train {

using grad::Var;
using nlohmann::json;

namespace {

void check_target(Var pred, const geometry::WarpFlow& gt, const char* which) {
  if (pred.shape() != gt.coords().shape)
    throw DimensionError(std::string("multitask_l1: ") + which + " prediction " + shape_str(pred.shape()) +
                         " vs target " + shape_str(gt.coords().shape));
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

bool is_identity(const synthgen::HsvRanges& r) {
  return r.hue == 0.0 && r.saturation.lo == 1.0 && r.saturation.hi == 1.0 && r.value.lo == 1.0 &&
         r.value.hi == 1.0;
}

json range_json(const synthgen::Range& r) { return json::array({r.lo, r.hi}); }
synthgen::Range range_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

double scalar(Var v) { return v.value()[0]; }

}  // namespace

Var multitask_l1(const model::FlowOutputs& pred, const FlowTargets& gt, const model::Supervision& flags) {
  if (!flags.any()) throw ConfigError("multitask_l1: no flow is supervised");
  Var total;
  auto term = [&](Var p, const geometry::WarpFlow& g, const char* which) {
    check_target(p, g, which);
    const Var l = grad::mean_abs_diff(p, g.coords());
    total = total.valid() ? grad::add(total, l) : l;
  };
  if (flags.left) term(pred.left, gt.left, "left");
  if (flags.right) term(pred.right, gt.right, "right");
  if (flags.full) term(pred.full, gt.full, "full");
  return total;
}


void AdamW::step(std::vector<NamedTensor>& params, double lr) {
  if (!m_.empty() && m_.size() != params.size()) throw DimensionError("AdamW: parameter list changed");
  for (const auto& p : params) {
    if (!p.value.has_grad()) continue;
    if (p.value.grad.size() != p.value.numel()) throw DimensionError("AdamW: gradient size of " + p.name);
    for (double g : p.value.grad)
      if (!std::isfinite(g)) throw NonFiniteGradient("AdamW: non-finite gradient in " + p.name);
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.numel(), 0.0);
      v_.emplace_back(p.value.numel(), 0.0);
    }
  }
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& w = params[k].value;
    if (m_[k].size() != w.numel()) throw DimensionError("AdamW: shape of " + params[k].name + " changed");
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const double g = w.has_grad() ? w.grad[i] : 0.0;
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.eps);
      w.data[i] = w.data[i] * (1.0 - lr * options_.weight_decay) - lr * update;
    }
  }
}

double clip_grad_norm(std::vector<NamedTensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.value.grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && std::isfinite(norm)) {
    const double s = max_norm / norm;
    for (auto& p : params)
      for (double& g : p.value.grad) g *= s;
  }
  return norm;
}

double onecycle_lr(std::size_t step, std::size_t total_steps, double max_lr, const OneCycleShape& shape) {
  if (total_steps == 0) throw ConfigError("onecycle_lr: total_steps must be positive");
  if (step > total_steps) throw std::out_of_range("onecycle_lr: step beyond total_steps");
  const double initial = max_lr / shape.initial_divisor;
  const double final_lr = max_lr / shape.final_divisor;
  const auto peak = static_cast<std::size_t>(std::floor(shape.warmup_fraction * static_cast<double>(total_steps)));
  if (step <= peak) {
    if (peak == 0) return max_lr;
    return initial + (max_lr - initial) * static_cast<double>(step) / static_cast<double>(peak);
  }
  const double t = static_cast<double>(step - peak) / static_cast<double>(total_steps - peak);
  return final_lr + (max_lr - final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train: epochs must be positive");
  if (batch_size == 0) throw ConfigError("train: batch size must be positive");
  if (!(max_lr > 0.0) || !std::isfinite(max_lr)) throw ConfigError("train: max_lr must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight decay must be non-negative");
  if (!(grad_clip > 0.0)) throw ConfigError("train: grad clip must be positive");
  if (!(schedule.warmup_fraction >= 0.0 && schedule.warmup_fraction < 1.0))
    throw ConfigError("train: warmup fraction must lie in [0, 1)");
  if (!(schedule.initial_divisor >= 1.0) || !(schedule.final_divisor >= 1.0))
    throw ConfigError("train: schedule divisors must be >= 1");
  if (!supervise.any()) throw ConfigError("train: at least one flow must be supervised");
  if (augment.hue < 0.0 || augment.saturation.lo > augment.saturation.hi || augment.value.lo > augment.value.hi ||
      augment.saturation.lo < 0.0 || augment.value.lo < 0.0)
    throw ConfigError("train: invalid augmentation ranges");
}

json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"max_steps", c.max_steps},
              {"max_lr", c.max_lr},
              {"weight_decay", c.weight_decay},
              {"grad_clip", c.grad_clip},
              {"schedule",
               {{"warmup_fraction", c.schedule.warmup_fraction},
                {"initial_divisor", c.schedule.initial_divisor},
                {"final_divisor", c.schedule.final_divisor}}},
              {"seed", c.seed},
              {"supervise", {{"left", c.supervise.left}, {"right", c.supervise.right}, {"full", c.supervise.full}}},
              {"augment",
               {{"hue", c.augment.hue},
                {"saturation", range_json(c.augment.saturation)},
                {"value", range_json(c.augment.value)}}},
              {"checkpoint_each_epoch", c.checkpoint_each_epoch},
              {"assert_isolation", c.assert_isolation},
              {"optimizer", {{"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}}}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    j.at("epochs").get_to(c.epochs);
    j.at("batch_size").get_to(c.batch_size);
    j.at("max_steps").get_to(c.max_steps);
    j.at("max_lr").get_to(c.max_lr);
    j.at("weight_decay").get_to(c.weight_decay);
    j.at("grad_clip").get_to(c.grad_clip);
    const json& s = j.at("schedule");
    s.at("warmup_fraction").get_to(c.schedule.warmup_fraction);
    s.at("initial_divisor").get_to(c.schedule.initial_divisor);
    s.at("final_divisor").get_to(c.schedule.final_divisor);
    j.at("seed").get_to(c.seed);
    const json& f = j.at("supervise");
    f.at("left").get_to(c.supervise.left);
    f.at("right").get_to(c.supervise.right);
    f.at("full").get_to(c.supervise.full);
    const json& a = j.at("augment");
    a.at("hue").get_to(c.augment.hue);
    c.augment.saturation = range_from(a.at("saturation"));
    c.augment.value = range_from(a.at("value"));
    j.at("checkpoint_each_epoch").get_to(c.checkpoint_each_epoch);
    j.at("assert_isolation").get_to(c.assert_isolation);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainLog::TrainLog(std::optional<std::filesystem::path> path) : path_(std::move(path)) {
  if (!path_) return;
  // Truncate; records are appended as they arrive.
  for (const auto& p : {*path_, timing_path()}) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
  }
}

std::filesystem::path TrainLog::timing_path() const {
  std::filesystem::path p = *path_;
  p.replace_extension(".timing.jsonl");
  return p;
}

void TrainLog::write(const json& j) { append(*path_, j); }

void TrainLog::append(const std::filesystem::path& p, const json& j) {
  std::ofstream out(p, std::ios::app);
  out << j.dump() << '\n';
  if (!out) throw IoError("cannot write " + p.string());
}

void TrainLog::header(const json& info) {
  if (path_) write(json{{"type", "header"}, {"info", info}});
}

void TrainLog::add(const StepRecord& r) {
  if (!steps_.empty() && r.step <= steps_.back().step) throw std::logic_error("TrainLog: step index not increasing");
  for (double v : {r.loss, r.loss_left, r.loss_right, r.loss_full, r.lr, r.grad_norm})
    if (!std::isfinite(v)) throw std::logic_error("TrainLog: non-finite value");
  steps_.push_back(r);
  if (!path_) return;
  write(json{{"type", "step"},
             {"step", r.step},
             {"epoch", r.epoch},
             {"loss", r.loss},
             {"loss_left", r.loss_left},
             {"loss_right", r.loss_right},
             {"loss_full", r.loss_full},
             {"lr", r.lr},
             {"grad_norm", r.grad_norm}});
  append(timing_path(), json{{"step", r.step}, {"wall_seconds", r.wall_seconds}});
}

void TrainLog::add(const EpochRecord& r) {
  epochs_.push_back(r);
  if (!path_) return;
  json j{{"type", "epoch"}, {"epoch", r.epoch}};
  j["val_flow_l1"] = r.val_flow_l1 ? json(*r.val_flow_l1) : json(nullptr);
  write(j);
}

model::FlowOutputs predict(const model::BookNetConfig& mc, model::Params& params, grad::Tape& tape,
                           const Tensor& image) {
  const model::ParamVars pv = model::watch_params(tape, params);
  return model::booknet_forward(mc, pv, tape.constant(image));
}

double validation_flow_l1(const model::BookNetConfig& mc, model::Params& params, const std::vector<Example>& val) {
  if (val.empty()) throw ConfigError("validation set is empty");
  double total = 0.0;
  for (const Example& e : val) {
    grad::Tape tape(false);
    const model::FlowOutputs out = predict(mc, params, tape, e.image);
    check_target(out.full, e.targets.full, "full");
    total += scalar(grad::mean_abs_diff(out.full, e.targets.full.coords()));
  }
  return total / static_cast<double>(val.size());
}

void save_params(const std::filesystem::path& path, const model::Params& params) {
  save_checkpoint(path, params.entries());
}

model::Params load_params(const std::filesystem::path& path, const model::BookNetConfig& config) {
  model::Params p(load_checkpoint(path));
  model::check_params(config, p);
  return p;
}

std::vector<Example> make_examples(const std::vector<synthgen::LoadedSample>& samples,
                                   const model::BookNetConfig& mc) {
  std::vector<Example> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    Example e;
    if (s.full.height() == mc.height && s.full.width() == mc.width) {
      e.image = s.distorted;
      e.targets = {s.left, s.right, s.full};
    } else {
      e.image = geometry::resize_image(s.distorted, mc.height, mc.width);
      e.targets.full = geometry::resize_flow(s.full, mc.height, mc.width);
      std::tie(e.targets.left, e.targets.right) = geometry::split_full_flow(e.targets.full);
    }
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

void check_isolation(const model::BookNetConfig& mc, const model::Params& params) {
  for (const char* br : {"left", "right"}) {
    const bool supervised = std::string(br) == "left" ? mc.supervise.left : mc.supervise.right;
    if (supervised) continue;
    const std::string prefix = std::string("head.") + br + ".";
    for (const auto& p : params.entries()) {
      if (p.name.compare(0, prefix.size(), prefix) != 0) continue;
      for (double g : p.value.grad)
        if (g != 0.0) throw std::logic_error("isolation check: nonzero gradient reached " + p.name);
    }
  }
}

}  // namespace

TrainResult train_loop(model::BookNetConfig mc, const TrainConfig& tc, const std::vector<Example>& train_set,
                       const std::vector<Example>& val_set, const std::filesystem::path& out_dir, TrainLog& log) {
  tc.validate();
  mc.supervise = tc.supervise;
  mc.validate();
  if (train_set.empty()) throw ConfigError("train: dataset is empty");
  if (tc.assert_isolation && !mc.use_fusion)
    throw ConfigError("train: the isolation check needs the fusion head (without it the full flow is built "
                      "from the page heads)");

  const std::size_t n = train_set.size();
  const std::size_t per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  std::size_t total = tc.epochs * per_epoch;
  if (tc.max_steps > 0) total = std::min(total, tc.max_steps);

  TrainResult result{model::init_params(mc, tc.seed), {}};
  model::Params& params = result.params;
  AdamW opt(AdamWOptions{0.9, 0.999, 1e-8, tc.weight_decay});

  const bool write = !out_dir.empty();
  if (write) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir / "model_config.json") << model::to_json(mc).dump(2) << '\n';
    std::ofstream(out_dir / "train_config.json") << to_json(tc).dump(2) << '\n';
  }
  log.header(json{{"model", model::to_json(mc)},
                  {"train", to_json(tc)},
                  {"examples", n},
                  {"validation_examples", val_set.size()},
                  {"total_steps", total},
                  {"parameters", params.scalar_count()}});

  auto abort = [&](const std::string& why) {
    std::string msg = "training aborted: " + why;
    msg += result.last_checkpoint.empty() ? " (no checkpoint written yet)"
                                          : " (last good checkpoint: " + result.last_checkpoint.string() + ")";
    throw TrainingAborted(msg);
  };

  std::mt19937_64 shuffle_rng(mix(tc.seed ^ 0x5EEDULL));
  std::vector<std::size_t> order(n);
  const auto start = std::chrono::steady_clock::now();
  const bool augment = !is_identity(tc.augment);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs && step < total; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t b = 0; b < per_epoch && step < total; ++b) {
      const std::size_t lo = b * tc.batch_size, hi = std::min(n, lo + tc.batch_size);
      const double inv = 1.0 / static_cast<double>(hi - lo);
      params.zero_grad();
      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      for (std::size_t k = lo; k < hi; ++k) {
        const Example& ex = train_set[order[k]];
        grad::Tape tape(true);
        const model::ParamVars pv = model::watch_params(tape, params);
        const Tensor image =
            augment ? synthgen::hsv_jitter(ex.image, mix(tc.seed ^ mix(step * 4096 + (k - lo))), tc.augment)
                    : ex.image;
        const model::FlowOutputs out = model::booknet_forward(mc, pv, tape.constant(image));
        auto part = [&](Var p, const geometry::WarpFlow& g, const char* which) {
          check_target(p, g, which);
          return scalar(grad::mean_abs_diff(p, g.coords()));
        };
        rec.loss_left += inv * part(out.left, ex.targets.left, "left");
        rec.loss_right += inv * part(out.right, ex.targets.right, "right");
        rec.loss_full += inv * part(out.full, ex.targets.full, "full");
        const Var loss = multitask_l1(out, ex.targets, mc.supervise);
        const double lv = scalar(loss);
        if (!std::isfinite(lv)) abort("non-finite loss at step " + std::to_string(step));
        rec.loss += inv * lv;
        tape.backward(grad::scale(loss, inv));
      }
      if (tc.assert_isolation) check_isolation(mc, params);
      rec.grad_norm = clip_grad_norm(params.entries(), tc.grad_clip);
      rec.lr = onecycle_lr(step, total, tc.max_lr, tc.schedule);
      try {
        opt.step(params.entries(), rec.lr);
      } catch (const NonFiniteGradient& e) {
        abort(e.what());
      }
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      log.add(rec);
      ++step;
    }
    EpochRecord er{epoch, std::nullopt};
    if (!val_set.empty()) er.val_flow_l1 = validation_flow_l1(mc, params, val_set);
    log.add(er);
    if (write && tc.checkpoint_each_epoch) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03zu.bkpt", epoch);
      save_params(out_dir / name, params);
      result.last_checkpoint = out_dir / name;
    }
  }
  if (write) {
    save_params(out_dir / "final.bkpt", params);
    result.last_checkpoint = out_dir / "final.bkpt";
  }
  for (auto& p : params.entries()) p.value.grad.clear();
  return result;
}

}  // namespace booknet::train
