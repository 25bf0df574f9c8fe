#include "booknet/model.hpp"

#include <array>
#include <cmath>
#include <random>

#include "booknet/geometry.hpp"

namespace booknet::model {

using grad::Var;
using json = nlohmann::json;

BookNetConfig BookNetConfig::large() { return BookNetConfig{}; }

BookNetConfig BookNetConfig::toy() {
  BookNetConfig c;
  c.height = c.width = 96;
  c.channels = 64;
  c.heads = 4;
  c.encoder_layers = 2;
  c.decoder_layers_stage1 = c.decoder_layers_stage2 = 1;
  c.stem_channels = 16;
  c.mid_channels = 32;
  return c;
}

void BookNetConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0) {
    fail("input extents " + std::to_string(height) + "x" + std::to_string(width) + " must be positive multiples of 16");
  }
  if (channels == 0 || heads == 0 || channels % heads != 0) fail("channels must be a positive multiple of heads");
  if (ffn_expansion == 0) fail("ffn_expansion must be positive");
  if (stem_channels == 0 || mid_channels == 0) fail("backbone channels must be positive");
  if (blocks_per_stage == 0) fail("blocks_per_stage must be at least 1");
  if (!supervise.any()) fail("at least one supervised flow is required");
}

json to_json(const BookNetConfig& c) {
  return json{{"height", c.height},
              {"width", c.width},
              {"channels", c.channels},
              {"heads", c.heads},
              {"encoder_layers", c.encoder_layers},
              {"decoder_layers_stage1", c.decoder_layers_stage1},
              {"decoder_layers_stage2", c.decoder_layers_stage2},
              {"ffn_expansion", c.ffn_expansion},
              {"stem_channels", c.stem_channels},
              {"mid_channels", c.mid_channels},
              {"blocks_per_stage", c.blocks_per_stage},
              {"cross_page_attention", c.cross_page_attention},
              {"use_fusion", c.use_fusion},
              {"supervise", {{"left", c.supervise.left}, {"right", c.supervise.right}, {"full", c.supervise.full}}}};
}

BookNetConfig config_from_json(const json& j) {
  BookNetConfig c;
  try {
    j.at("height").get_to(c.height);
    j.at("width").get_to(c.width);
    j.at("channels").get_to(c.channels);
    j.at("heads").get_to(c.heads);
    j.at("encoder_layers").get_to(c.encoder_layers);
    j.at("decoder_layers_stage1").get_to(c.decoder_layers_stage1);
    j.at("decoder_layers_stage2").get_to(c.decoder_layers_stage2);
    j.at("ffn_expansion").get_to(c.ffn_expansion);
    j.at("stem_channels").get_to(c.stem_channels);
    j.at("mid_channels").get_to(c.mid_channels);
    j.at("blocks_per_stage").get_to(c.blocks_per_stage);
    j.at("cross_page_attention").get_to(c.cross_page_attention);
    j.at("use_fusion").get_to(c.use_fusion);
    const json& s = j.at("supervise");
    s.at("left").get_to(c.supervise.left);
    s.at("right").get_to(c.supervise.right);
    s.at("full").get_to(c.supervise.full);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

const char* const kBranches[] = {"left", "right"};

void add_attention(std::vector<ParamSpec>& s, const std::string& prefix, std::size_t c) {
  for (const char* m : {"q", "k", "v", "o"}) {
    s.push_back({prefix + ".w" + m, {c, c}});
    s.push_back({prefix + ".b" + m, {c}});
  }
}

void add_norm(std::vector<ParamSpec>& s, const std::string& prefix, std::size_t c) {
  s.push_back({prefix + ".g", {c}});
  s.push_back({prefix + ".b", {c}});
}

void add_ffn(std::vector<ParamSpec>& s, const std::string& prefix, std::size_t c, std::size_t f) {
  s.push_back({prefix + ".w1", {f, c}});
  s.push_back({prefix + ".b1", {f}});
  s.push_back({prefix + ".w2", {c, f}});
  s.push_back({prefix + ".b2", {c}});
}

void add_conv(std::vector<ParamSpec>& s, const std::string& prefix, std::size_t out, std::size_t in, std::size_t k,
              bool bias = true) {
  s.push_back({prefix + ".w", {out, in, k, k}});
  if (bias) s.push_back({prefix + ".b", {out}});
}

std::string block_name(int stage, std::size_t block) {
  return "backbone.s" + std::to_string(stage) + ".b" + std::to_string(block);
}

std::string decoder_layer_name(const std::string& branch, int stage, std::size_t layer) {
  return "decoder." + branch + ".s" + std::to_string(stage) + ".l" + std::to_string(layer);
}

}  // namespace

std::vector<ParamSpec> param_specs(const BookNetConfig& c) {
  c.validate();
  const std::size_t C = c.channels, F = c.channels * c.ffn_expansion;
  std::vector<ParamSpec> s;
  add_conv(s, "backbone.stem", c.stem_channels, 3, 7);
  for (int stage = 1; stage <= 2; ++stage) {
    const std::size_t in = stage == 1 ? c.stem_channels : c.mid_channels;
    const std::size_t out = stage == 1 ? c.mid_channels : C;
    for (std::size_t b = 0; b < c.blocks_per_stage; ++b) {
      const std::string n = block_name(stage, b);
      add_conv(s, n + ".conv1", out, b == 0 ? in : out, 3);
      add_conv(s, n + ".conv2", out, out, 3);
      if (b == 0) add_conv(s, n + ".proj", out, in, 1);
    }
  }
  s.push_back({"encoder.pos", {c.grid_h() * c.grid_w(), C}});
  for (std::size_t l = 0; l < c.encoder_layers; ++l) {
    const std::string n = "encoder.l" + std::to_string(l);
    add_norm(s, n + ".ln1", C);
    add_attention(s, n + ".attn", C);
    add_norm(s, n + ".ln2", C);
    add_ffn(s, n + ".ffn", C, F);
  }
  for (const char* br : kBranches) s.push_back({std::string("query.") + br, {c.queries(), C}});
  for (const char* br : kBranches) {
    for (int stage = 1; stage <= 2; ++stage) {
      const std::size_t layers = stage == 1 ? c.decoder_layers_stage1 : c.decoder_layers_stage2;
      for (std::size_t l = 0; l < layers; ++l) {
        const std::string n = decoder_layer_name(br, stage, l);
        add_norm(s, n + ".ln1", C);
        add_attention(s, n + ".self", C);
        add_norm(s, n + ".ln2", C);
        add_attention(s, n + ".cross", C);
        add_norm(s, n + ".ln3", C);
        add_ffn(s, n + ".ffn", C, F);
      }
    }
  }
  if (c.cross_page_attention) {
    for (const char* br : kBranches) {
      add_attention(s, std::string("exchange.") + br + ".attn", C);
      add_norm(s, std::string("exchange.") + br + ".ln", C);
    }
  }
  for (const char* br : kBranches) {
    const std::string n = std::string("head.") + br;
    add_conv(s, n + ".flow", 2, C, 3, false);
    s.push_back({n + ".flow_bias", {2, c.grid_h(), c.page_w()}});
    add_conv(s, n + ".up", geometry::kUpsampleChannels, C, 1);
  }
  if (c.use_fusion) {
    add_conv(s, "fusion.conv1", C, C, 3);
    add_conv(s, "fusion.conv2", C, C, 3);
    add_conv(s, "head.full.flow", 2, C, 3, false);
    s.push_back({"head.full.flow_bias", {2, c.grid_h(), c.grid_w()}});
  }
  add_conv(s, "head.full.up", geometry::kUpsampleChannels, C, 1);
  return s;
}

std::size_t param_count(const BookNetConfig& c) {
  std::size_t n = 0;
  for (const ParamSpec& p : param_specs(c)) n += shape_numel(p.shape);
  return n;
}

Params::Params(std::vector<NamedTensor> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!index_.emplace(entries_[i].name, i).second) throw ConfigError("duplicate parameter " + entries_[i].name);
  }
}

std::size_t Params::index(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return it->second;
}

std::size_t Params::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

void Params::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

bool Params::all_finite() const {
  for (const auto& e : entries_) {
    if (!e.value.all_finite()) return false;
  }
  return true;
}

void check_params(const BookNetConfig& c, const Params& p) {
  const auto specs = param_specs(c);
  if (specs.size() != p.size()) {
    throw ConfigError("checkpoint has " + std::to_string(p.size()) + " tensors, config expects " +
                      std::to_string(specs.size()));
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const NamedTensor& e = p.entries()[i];
    if (e.name != specs[i].name || e.value.shape != specs[i].shape) {
      throw ConfigError("checkpoint entry " + e.name + " " + shape_str(e.value.shape) + " does not match expected " +
                        specs[i].name + " " + shape_str(specs[i].shape));
    }
  }
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Coarse flow prior: the identity coordinate at each 8x8 block center.
Tensor block_center_grid(std::size_t gh, std::size_t gw, std::size_t col0, std::size_t width, std::size_t height) {
  Tensor t({2, gh, gw});
  for (std::size_t i = 0; i < gh; ++i) {
    for (std::size_t j = 0; j < gw; ++j) {
      t.at(0, i, j) = geometry::to_normalized(static_cast<double>(col0 + 8 * j) + 3.5, width);
      t.at(1, i, j) = geometry::to_normalized(static_cast<double>(8 * i) + 3.5, height);
    }
  }
  return t;
}

}  // namespace

Params init_params(const BookNetConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<NamedTensor> entries;
  for (const ParamSpec& spec : param_specs(c)) {
    Tensor t(spec.shape);
    const std::string& n = spec.name;
    double stddev = 0.0;
    if (n.rfind("backbone.", 0) == 0 && ends_with(n, ".conv2.w")) {
      stddev = 0.0;  // residual branches start closed
    } else if (ends_with(n, "flow.w")) {
      stddev = 1e-4;
    } else if (ends_with(n, "up.w")) {
      stddev = 1e-2 / std::sqrt(static_cast<double>(c.channels));
    } else if (n == "encoder.pos") {
      stddev = 0.1;
    } else if (n.rfind("query.", 0) == 0) {
      stddev = 1.0;
    } else if (spec.shape.size() == 4) {
      stddev = std::sqrt(2.0 / static_cast<double>(spec.shape[1] * spec.shape[2] * spec.shape[3]));
    } else if (spec.shape.size() == 2) {
      stddev = std::sqrt(1.0 / static_cast<double>(spec.shape[1]));
    }
    if (stddev > 0.0) {
      std::normal_distribution<double> dist(0.0, stddev);
      for (double& v : t.data) v = dist(rng);
    }
    if (ends_with(n, ".g")) t = Tensor(spec.shape, 1.0);
    if (n == "head.left.flow_bias") t = block_center_grid(c.grid_h(), c.page_w(), 0, c.width, c.height);
    if (n == "head.right.flow_bias") t = block_center_grid(c.grid_h(), c.page_w(), c.width / 2, c.width, c.height);
    if (n == "head.full.flow_bias") t = block_center_grid(c.grid_h(), c.grid_w(), 0, c.width, c.height);
    entries.push_back({n, std::move(t)});
  }
  return Params(std::move(entries));
}

namespace {

// 1-D mixture over the taps (-1, 0, +1) for fine offset d of a cell whose
// coarse anchors sit at 8j, except the last cell anchored at the final pixel.
enum class CellKind { interior, second_to_last, last };

std::array<double, 3> interp_weights(CellKind kind, std::size_t d) {
  const double t = static_cast<double>(d);
  switch (kind) {
    case CellKind::interior:
      return {0.0, 1.0 - t / 8.0, t / 8.0};
    case CellKind::second_to_last:
      return {0.0, 1.0 - t / 15.0, t / 15.0};
    case CellKind::last:
      return {1.0 - (t + 8.0) / 15.0, (t + 8.0) / 15.0, 0.0};
  }
  return {};
}

double safe_log(double w) { return w > 0.0 ? std::log(w) : -60.0; }

}  // namespace

Params make_identity_params(const BookNetConfig& c) {
  if (!c.use_fusion) throw ConfigError("identity parameters need the fusion stage");
  if (c.channels < 5) throw ConfigError("identity parameters need at least 5 channels");
  std::vector<NamedTensor> entries;
  for (const ParamSpec& spec : param_specs(c)) entries.push_back({spec.name, Tensor(spec.shape)});
  Params p(std::move(entries));
  const std::size_t gh = c.grid_h(), gw = c.grid_w();
  for (auto& e : p.entries()) {
    if (ends_with(e.name, ".g")) e.value = Tensor(e.value.shape, 1.0);
  }
  // Decoder features are the query embeddings themselves (all residual
  // branches are zero); with constant queries the exchange LN collapses to
  // its bias, which is set to the same constant.
  p["query.left"] = Tensor(p["query.left"].shape, 1.0);
  p["query.right"] = Tensor(p["query.right"].shape, 1.0);
  if (c.cross_page_attention) {
    p["exchange.left.ln.b"] = Tensor({c.channels}, 1.0);
    p["exchange.right.ln.b"] = Tensor({c.channels}, 1.0);
  }
  p["head.left.flow_bias"] = block_center_grid(gh, c.page_w(), 0, c.width, c.height);
  p["head.right.flow_bias"] = block_center_grid(gh, c.page_w(), c.width / 2, c.width, c.height);

  // Fusion convs (zero padded) turn the constant map into border indicators:
  // out channels 0: 1, 1: has right neighbor, 2: has two right neighbors,
  // 3: has lower neighbor, 4: has two lower neighbors.
  Tensor& w1 = p["fusion.conv1.w"];
  const auto tap = [](Tensor& w, std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) -> double& {
    return w.data[((o * w.shape[1] + i) * 3 + ky) * 3 + kx];
  };
  tap(w1, 0, 0, 1, 1) = 1.0;
  tap(w1, 1, 0, 1, 2) = 1.0;
  tap(w1, 2, 0, 2, 1) = 1.0;
  Tensor& w2 = p["fusion.conv2.w"];
  tap(w2, 0, 0, 1, 1) = 1.0;
  tap(w2, 1, 1, 1, 1) = 1.0;
  tap(w2, 2, 1, 1, 2) = 1.0;
  tap(w2, 3, 2, 1, 1) = 1.0;
  tap(w2, 4, 2, 2, 1) = 1.0;

  // Coarse anchors at 8j, the last one at the final pixel.
  Tensor& bias = p["head.full.flow_bias"];
  for (std::size_t i = 0; i < gh; ++i) {
    for (std::size_t j = 0; j < gw; ++j) {
      const double x = j + 1 == gw ? static_cast<double>(c.width - 1) : 8.0 * j;
      const double y = i + 1 == gh ? static_cast<double>(c.height - 1) : 8.0 * i;
      bias.at(0, i, j) = geometry::to_normalized(x, c.width);
      bias.at(1, i, j) = geometry::to_normalized(y, c.height);
    }
  }

  // Logits are separable: L = Ly(kind_y) + Lx(kind_x), with each kind's
  // table written as a linear function of the border indicators.
  Tensor& up = p["head.full.up.w"];
  const std::size_t C = c.channels;
  for (std::size_t ty = 0; ty < 3; ++ty) {
    for (std::size_t tx = 0; tx < 3; ++tx) {
      for (std::size_t dy = 0; dy < 8; ++dy) {
        for (std::size_t dx = 0; dx < 8; ++dx) {
          const std::size_t ch = (ty * 3 + tx) * 64 + dy * 8 + dx;
          const double lx_int = safe_log(interp_weights(CellKind::interior, dx)[tx]);
          const double lx_stl = safe_log(interp_weights(CellKind::second_to_last, dx)[tx]);
          const double lx_last = safe_log(interp_weights(CellKind::last, dx)[tx]);
          const double ly_int = safe_log(interp_weights(CellKind::interior, dy)[ty]);
          const double ly_stl = safe_log(interp_weights(CellKind::second_to_last, dy)[ty]);
          const double ly_last = safe_log(interp_weights(CellKind::last, dy)[ty]);
          up.data[ch * C + 0] = lx_last + ly_last;
          up.data[ch * C + 1] = lx_stl - lx_last;
          up.data[ch * C + 2] = lx_int - lx_stl;
          up.data[ch * C + 3] = ly_stl - ly_last;
          up.data[ch * C + 4] = ly_int - ly_stl;
        }
      }
    }
  }
  return p;
}

ParamVars::ParamVars(const Params& params, std::vector<Var> vars) : params_(&params), vars_(std::move(vars)) {
  if (vars_.size() != params.size()) throw ConfigError("parameter binding size mismatch");
}

ParamVars watch_params(grad::Tape& tape, Params& params) {
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (auto& e : params.entries()) vars.push_back(tape.watch(e.value));
  return ParamVars(params, std::move(vars));
}

Var grid_to_tokens(Var grid) {
  const std::size_t ch = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
  return grad::transpose(grad::reshape(grid, {ch, h * w}));
}

Var tokens_to_grid(Var tokens, std::size_t h, std::size_t w) {
  if (tokens.value().rank() != 2 || tokens.dim(0) != h * w) {
    throw DimensionError("tokens_to_grid: " + shape_str(tokens.shape()) + " is not a " + std::to_string(h) + "x" +
                         std::to_string(w) + " token grid");
  }
  return grad::reshape(grad::transpose(tokens), {tokens.dim(1), h, w});
}

namespace {

grad::AttentionVars attention_vars(const ParamVars& p, const std::string& prefix) {
  return {p[prefix + ".wq"], p[prefix + ".bq"], p[prefix + ".wk"], p[prefix + ".bk"],
          p[prefix + ".wv"], p[prefix + ".bv"], p[prefix + ".wo"], p[prefix + ".bo"]};
}

Var norm(const ParamVars& p, const std::string& prefix, Var x) {
  return grad::layer_norm(x, p[prefix + ".g"], p[prefix + ".b"]);
}

Var ffn(const ParamVars& p, const std::string& prefix, Var x) {
  Var h = grad::relu(grad::linear(x, p[prefix + ".w1"], p[prefix + ".b1"]));
  return grad::linear(h, p[prefix + ".w2"], p[prefix + ".b2"]);
}

void require_tokens(const BookNetConfig& c, Var t, std::size_t n, const char* what) {
  if (t.value().rank() != 2 || t.dim(0) != n || t.dim(1) != c.channels) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(n) + "x" + std::to_string(c.channels) +
                         " tokens, got " + shape_str(t.shape()));
  }
}

}  // namespace

Var backbone_forward(const BookNetConfig& c, const ParamVars& p, Var image) {
  if (image.shape() != Shape{3, c.height, c.width}) {
    throw DimensionError("backbone: expected image 3x" + std::to_string(c.height) + "x" + std::to_string(c.width) +
                         ", got " + shape_str(image.shape()));
  }
  Var x = grad::relu(grad::conv2d(image, p["backbone.stem.w"], p["backbone.stem.b"], 2, 3));
  for (int stage = 1; stage <= 2; ++stage) {
    for (std::size_t b = 0; b < c.blocks_per_stage; ++b) {
      const std::string n = block_name(stage, b);
      const std::size_t stride = b == 0 ? 2 : 1;
      Var h = grad::relu(grad::conv2d(x, p[n + ".conv1.w"], p[n + ".conv1.b"], stride, 1));
      h = grad::conv2d(h, p[n + ".conv2.w"], p[n + ".conv2.b"], 1, 1);
      Var shortcut = b == 0 ? grad::conv2d(x, p[n + ".proj.w"], p[n + ".proj.b"], stride, 0) : x;
      x = grad::relu(grad::add(shortcut, h));
    }
  }
  return x;
}

Var encoder_forward(const BookNetConfig& c, const ParamVars& p, Var tokens) {
  require_tokens(c, tokens, c.grid_h() * c.grid_w(), "encoder");
  Var pos = p["encoder.pos"];
  Var x = tokens;
  for (std::size_t l = 0; l < c.encoder_layers; ++l) {
    const std::string n = "encoder.l" + std::to_string(l);
    Var h = norm(p, n + ".ln1", x);
    Var qk = grad::add(h, pos);
    x = grad::add(x, grad::multi_head_attention(qk, qk, h, attention_vars(p, n + ".attn"), c.heads));
    x = grad::add(x, ffn(p, n + ".ffn", norm(p, n + ".ln2", x)));
  }
  return x;
}

Var decoder_stage(const BookNetConfig& c, const ParamVars& p, const std::string& branch, int stage, Var queries,
                  Var memory) {
  require_tokens(c, queries, c.queries(), "decoder queries");
  require_tokens(c, memory, c.grid_h() * c.grid_w(), "decoder memory");
  const std::size_t layers = stage == 1 ? c.decoder_layers_stage1 : c.decoder_layers_stage2;
  if (layers == 0) return queries;
  Var keys = grad::add(memory, p["encoder.pos"]);
  Var x = queries;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string n = decoder_layer_name(branch, stage, l);
    Var h = norm(p, n + ".ln1", x);
    x = grad::add(x, grad::multi_head_attention(h, h, h, attention_vars(p, n + ".self"), c.heads));
    h = norm(p, n + ".ln2", x);
    x = grad::add(x, grad::multi_head_attention(h, keys, memory, attention_vars(p, n + ".cross"), c.heads));
    x = grad::add(x, ffn(p, n + ".ffn", norm(p, n + ".ln3", x)));
  }
  return x;
}

std::pair<Var, Var> cross_page_exchange(const BookNetConfig& c, const ParamVars& p, Var left, Var right) {
  require_tokens(c, left, c.queries(), "cross-page exchange");
  require_tokens(c, right, c.queries(), "cross-page exchange");
  if (!c.cross_page_attention) return {left, right};
  Var l = grad::multi_head_attention(left, right, right, attention_vars(p, "exchange.left.attn"), c.heads);
  Var r = grad::multi_head_attention(right, left, left, attention_vars(p, "exchange.right.attn"), c.heads);
  return {norm(p, "exchange.left.ln", grad::add(left, l)), norm(p, "exchange.right.ln", grad::add(right, r))};
}

FlowOutputs fuse_and_predict(const BookNetConfig& c, const ParamVars& p, Var left, Var right) {
  require_tokens(c, left, c.queries(), "flow heads");
  require_tokens(c, right, c.queries(), "flow heads");
  const std::size_t gh = c.grid_h(), pw = c.page_w();
  FlowOutputs out;
  Var grids[2] = {tokens_to_grid(left, gh, pw), tokens_to_grid(right, gh, pw)};
  Var coarse[2], fine[2];
  for (int b = 0; b < 2; ++b) {
    const std::string n = std::string("head.") + kBranches[b];
    coarse[b] = grad::add(grad::conv2d(grids[b], p[n + ".flow.w"], {}, 1, 1), p[n + ".flow_bias"]);
    Var logits = grad::conv2d(grids[b], p[n + ".up.w"], p[n + ".up.b"], 1, 0);
    fine[b] = geometry::convex_upsample(coarse[b], logits);
  }
  Var spread = grad::concat({grids[0], grids[1]}, 2);
  Var logits;
  if (c.use_fusion) {
    Var f = grad::relu(grad::conv2d(spread, p["fusion.conv1.w"], p["fusion.conv1.b"], 1, 1));
    f = grad::relu(grad::conv2d(f, p["fusion.conv2.w"], p["fusion.conv2.b"], 1, 1));
    out.coarse_full = grad::add(grad::conv2d(f, p["head.full.flow.w"], {}, 1, 1), p["head.full.flow_bias"]);
    logits = grad::conv2d(f, p["head.full.up.w"], p["head.full.up.b"], 1, 0);
  } else {
    out.coarse_full = grad::concat({coarse[0], coarse[1]}, 2);
    logits = grad::conv2d(spread, p["head.full.up.w"], p["head.full.up.b"], 1, 0);
  }
  out.full = geometry::convex_upsample(out.coarse_full, logits);
  out.left = fine[0];
  out.right = fine[1];
  out.coarse_left = coarse[0];
  out.coarse_right = coarse[1];
  return out;
}

FlowOutputs booknet_forward(const BookNetConfig& c, const ParamVars& p, Var image) {
  Var features = backbone_forward(c, p, image);
  Var memory = encoder_forward(c, p, grid_to_tokens(features));
  Var l1 = decoder_stage(c, p, "left", 1, p["query.left"], memory);
  Var r1 = decoder_stage(c, p, "right", 1, p["query.right"], memory);
  auto [le, re] = cross_page_exchange(c, p, l1, r1);
  Var l2 = decoder_stage(c, p, "left", 2, le, memory);
  Var r2 = decoder_stage(c, p, "right", 2, re, memory);
  return fuse_and_predict(c, p, l2, r2);
}

}  // namespace booknet::model
