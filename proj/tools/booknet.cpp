// booknet: generate, train, rectify, evaluate and self-check from one binary.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "booknet/checkpoint.hpp"
#include "booknet/geometry.hpp"
#include "booknet/gradient_suite.hpp"
#include "booknet/image.hpp"
#include "booknet/metrics.hpp"
#include "booknet/model.hpp"
#include "booknet/synthgen.hpp"
#include "booknet/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace booknet;

namespace {

enum Exit { kOk = 0, kGenerate = 2, kTrain = 3, kInfer = 4, kEvaluate = 5 };

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return json::parse(in);
}

void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << "\n";
}

// Partial JSON files patch the defaults, so a config only has to name what it changes.
json patched(json base, const std::string& file) {
  if (!file.empty()) base.merge_patch(read_json(file));
  return base;
}

model::Supervision parse_supervise(const std::string& s) {
  model::Supervision f{false, false, false};
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok == "l") f.left = true;
    else if (tok == "r") f.right = true;
    else if (tok == "f") f.full = true;
    else throw CLI::ValidationError("--supervise", "expected a subset of l,r,f");
  }
  return f;
}

model::BookNetConfig preset(const std::string& name) {
  if (name == "large") return model::BookNetConfig::large();
  if (name == "toy") return model::BookNetConfig::toy();
  throw CLI::ValidationError("--preset", "expected large or toy");
}

// Model config stored beside a checkpoint unless one is given explicitly.
model::BookNetConfig checkpoint_config(const fs::path& ckpt, const std::string& explicit_cfg) {
  const fs::path p = explicit_cfg.empty() ? ckpt.parent_path() / "model_config.json" : fs::path(explicit_cfg);
  return model::config_from_json(read_json(p));
}

struct GenerateArgs {
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::string ranges, content, out;
  std::size_t height = 288, width = 288;
  double min_mssim = 0.90;
};

int cmd_generate(const GenerateArgs& a) {
  try {
    synthgen::GenerateOptions o;
    o.count = a.count;
    o.seed = a.seed;
    o.height = a.height;
    o.width = a.width;
    o.min_round_trip_mssim = a.min_mssim;
    if (a.ranges == "none") o.ranges = synthgen::DeformationRanges::none();
    else o.ranges = synthgen::ranges_from_json(patched(synthgen::to_json(o.ranges), a.ranges));
    o.content = synthgen::content_from_json(patched(synthgen::to_json(o.content), a.content));
    fs::create_directories(a.out);
    write_json(fs::path(a.out) / "run_config.json", json{{"command", "generate"}, {"options", synthgen::to_json(o)}});
    const auto report = synthgen::generate_dataset(o, a.out);
    std::cout << "generated " << report.entries.size() << " samples, " << report.rejected << " rejected\n";
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "generate: " << e.what() << "\n";
    return kGenerate;
  }
}

struct TrainArgs {
  std::string data, val, config, model_config, preset = "large", supervise, out;
  bool ablate_cross_page = false, no_fusion = false, assert_isolation = false;
  std::size_t steps = 0, epochs = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int cmd_train(const TrainArgs& a) {
  try {
    auto mc = model::config_from_json(patched(model::to_json(preset(a.preset)), a.model_config));
    auto tc = train::train_config_from_json(patched(train::to_json(train::TrainConfig{}), a.config));
    if (a.ablate_cross_page) mc.cross_page_attention = false;
    if (a.no_fusion) mc.use_fusion = false;
    if (!a.supervise.empty()) tc.supervise = parse_supervise(a.supervise);
    if (a.assert_isolation) tc.assert_isolation = true;
    if (a.steps) tc.max_steps = a.steps;
    if (a.epochs) tc.epochs = a.epochs;
    if (a.seed_set) tc.seed = a.seed;
    mc.supervise = tc.supervise;
    mc.validate();
    tc.validate();

    if (!fs::exists(fs::path(a.data) / "manifest.json")) throw std::runtime_error("no manifest in " + a.data);
    const auto train_set = train::make_examples(synthgen::load_dataset(a.data), mc);
    std::vector<train::Example> val_set;
    if (!a.val.empty()) val_set = train::make_examples(synthgen::load_dataset(a.val), mc);

    fs::create_directories(a.out);
    write_json(fs::path(a.out) / "run_config.json",
               json{{"command", "train"}, {"data", a.data}, {"val", a.val}, {"model", model::to_json(mc)},
                    {"train", train::to_json(tc)}});
    train::TrainLog log(fs::path(a.out) / "train_log.jsonl");
    const auto result = train::train_loop(mc, tc, train_set, val_set, a.out, log);
    const auto& steps = log.steps();
    if (!steps.empty())
      std::cout << "trained " << steps.size() << " steps, loss " << steps.front().loss << " -> " << steps.back().loss
                << "\n";
    std::cout << "checkpoint " << result.last_checkpoint.string() << "\n";
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "train: " << e.what() << "\n";
    return kTrain;
  }
}

struct RectifyArgs {
  std::string image, checkpoint, model_config, out, dump_flows;
};

int cmd_rectify(const RectifyArgs& a) {
  try {
    const auto mc = checkpoint_config(a.checkpoint, a.model_config);
    auto params = train::load_params(a.checkpoint, mc);
    const Tensor img = image::read_png(a.image);
    const std::size_t h = img.shape[1], w = img.shape[2];

    grad::Tape tape(false);
    const auto out = train::predict(mc, params, tape, geometry::resize_image(img, mc.height, mc.width));
    const geometry::WarpFlow full(out.full.value());
    const auto native = geometry::resize_flow(full, h, w);
    image::write_png(a.out, geometry::bilinear_sample(img, native));

    if (!a.dump_flows.empty()) {
      const fs::path d = a.dump_flows;
      fs::create_directories(d);
      geometry::save_flow(d / "full.bkfl", full);
      geometry::save_flow(d / "left.bkfl", geometry::WarpFlow(out.left.value()));
      geometry::save_flow(d / "right.bkfl", geometry::WarpFlow(out.right.value()));
    }
    write_json(fs::path(a.out).string() + ".run_config.json",
               json{{"command", "rectify"}, {"image", a.image}, {"checkpoint", a.checkpoint},
                    {"model", model::to_json(mc)}, {"native_size", {h, w}}, {"dump_flows", a.dump_flows}});
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "rectify: " << e.what() << "\n";
    return kInfer;
  }
}

int cmd_evaluate(const std::string& pairs, const std::string& out) {
  try {
    const auto report = metrics::evaluate_set(pairs);
    for (const auto& s : report.skipped) std::cerr << "warning: skipped " << s << "\n";
    const std::string table = metrics::format_table(report);
    std::cout << table;
    if (!out.empty()) {
      fs::create_directories(out);
      write_json(fs::path(out) / "report.json", metrics::to_json(report));
      std::ofstream(fs::path(out) / "report.txt") << table;
      write_json(fs::path(out) / "run_config.json", json{{"command", "evaluate"}, {"pairs", pairs}});
    }
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "evaluate: " << e.what() << "\n";
    return kEvaluate;
  }
}

int cmd_gradcheck(const std::string& scale, const std::string& fault_op, double fault_factor, const std::string& out) {
  if (scale != "toy") {
    std::cerr << "gradcheck: only --scale toy is supported\n";
    return 1;
  }
  grad::SuiteOptions o;
  o.fault_op = fault_op;
  o.fault_factor = fault_factor;
  const auto entries = grad::run_gradient_suite(o);
  json rows = json::array();
  bool ok = true;
  for (const auto& e : entries) {
    ok = ok && e.passed();
    std::printf("%-32s max_rel_err %.3e  tol %.0e  %s%s%s\n", e.name.c_str(), e.report.max_rel_err, e.tol,
                e.passed() ? "PASS" : "FAIL", e.error.empty() ? "" : "  ", e.error.c_str());
    rows.push_back(json{{"name", e.name}, {"max_rel_err", e.report.max_rel_err}, {"tol", e.tol},
                        {"passed", e.passed()}, {"error", e.error}});
  }
  if (!out.empty()) {
    fs::create_directories(out);
    write_json(fs::path(out) / "gradcheck.json", rows);
    write_json(fs::path(out) / "run_config.json",
               json{{"command", "gradcheck"}, {"scale", scale}, {"fault_op", fault_op}, {"fault_factor", fault_factor},
                    {"model", model::to_json(grad::gradcheck_config())}});
  }
  std::printf("%s\n", ok ? "gradient suite passed" : "GRADIENT SUITE FAILED");
  return ok ? kOk : 1;
}

int cmd_identity(const std::string& preset_name, const std::string& out) {
  try {
    const auto mc = preset(preset_name);
    fs::create_directories(out);
    train::save_params(fs::path(out) / "identity.bkpt", model::make_identity_params(mc));
    write_json(fs::path(out) / "model_config.json", model::to_json(mc));
    write_json(fs::path(out) / "run_config.json",
               json{{"command", "identity-checkpoint"}, {"model", model::to_json(mc)}});
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "identity-checkpoint: " << e.what() << "\n";
    return kInfer;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BookNet: book spread dewarping"};
  app.require_subcommand(1);

  GenerateArgs g;
  auto* gen = app.add_subcommand("generate", "Render a synthetic dataset");
  gen->add_option("--count", g.count)->required();
  gen->add_option("--seed", g.seed);
  gen->add_option("--ranges", g.ranges, "Deformation ranges JSON (partial), or 'none'");
  gen->add_option("--content", g.content, "Content spec JSON (partial)");
  gen->add_option("--height", g.height);
  gen->add_option("--width", g.width);
  gen->add_option("--min-mssim", g.min_mssim, "Round-trip gate");
  gen->add_option("--out", g.out)->required();

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "Train on a generated dataset");
  tr->add_option("--data", t.data)->required();
  tr->add_option("--val", t.val, "Validation dataset");
  tr->add_option("--config", t.config, "Train config JSON (partial)");
  tr->add_option("--model-config", t.model_config, "Model config JSON (partial)");
  tr->add_option("--preset", t.preset, "large or toy");
  tr->add_flag("--ablate-cross-page", t.ablate_cross_page);
  tr->add_flag("--no-fusion", t.no_fusion);
  tr->add_option("--supervise", t.supervise, "Comma list of l,r,f");
  tr->add_flag("--assert-isolation", t.assert_isolation, "Check unsupervised heads get zero gradient");
  tr->add_option("--steps", t.steps, "Cap on optimizer steps");
  tr->add_option("--epochs", t.epochs);
  auto* seed_opt = tr->add_option("--seed", t.seed);
  tr->add_option("--out", t.out)->required();

  RectifyArgs r;
  auto* re = app.add_subcommand("rectify", "Rectify one image");
  re->add_option("--image", r.image)->required();
  re->add_option("--checkpoint", r.checkpoint)->required();
  re->add_option("--model-config", r.model_config, "Defaults to model_config.json beside the checkpoint");
  re->add_option("--out", r.out)->required();
  re->add_option("--dump-flows", r.dump_flows, "Directory for full/left/right BKFL files");

  std::string pairs, eval_out;
  auto* ev = app.add_subcommand("evaluate", "Score rectified images against references");
  ev->add_option("--pairs", pairs)->required();
  ev->add_option("--out", eval_out);

  std::string scale = "toy", fault_op, gc_out;
  double fault_factor = 1.0;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--scale", scale);
  gc->add_option("--fault-op", fault_op, "Debug: corrupt this op's gradient");
  gc->add_option("--fault-factor", fault_factor);
  gc->add_option("--out", gc_out);

  std::string id_preset = "toy", id_out;
  auto* id = app.add_subcommand("identity-checkpoint", "Debug: write a checkpoint whose flows are the identity");
  id->add_option("--preset", id_preset);
  id->add_option("--out", id_out)->required();

  CLI11_PARSE(app, argc, argv);
  t.seed_set = seed_opt->count() > 0;

  if (*gen) return cmd_generate(g);
  if (*tr) return cmd_train(t);
  if (*re) return cmd_rectify(r);
  if (*ev) return cmd_evaluate(pairs, eval_out);
  if (*gc) return cmd_gradcheck(scale, fault_op, fault_factor, gc_out);
  return cmd_identity(id_preset, id_out);
}
