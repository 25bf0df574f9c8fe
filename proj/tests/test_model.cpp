#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "booknet/geometry.hpp"
#include "booknet/gradient_suite.hpp"
#include "booknet/model.hpp"
#include "booknet/train.hpp"
#include "test_util.hpp"

using namespace booknet;
using namespace booknet::model;
using booknet::grad::Tape;
using booknet::grad::Var;
using booknet::testing::random_tensor;

namespace {

BookNetConfig micro(std::size_t h, std::size_t w) {
  BookNetConfig c = grad::gradcheck_config();
  c.height = h;
  c.width = w;
  return c;
}

// Randomizes every parameter so no branch is trivially zero.
Params random_params(const BookNetConfig& c, std::uint64_t seed, double scale = 0.3) {
  Params p = init_params(c, seed);
  for (auto& e : p.entries()) e.value = random_tensor(e.value.shape, ++seed, -scale, scale);
  return p;
}

void zero(Params& p, const std::string& name) {
  for (double& v : p[name].data) v = 0.0;
}

void zero_residual_outputs(Params& p, const std::string& attn_prefix, const std::string& ffn_prefix) {
  zero(p, attn_prefix + ".wo");
  zero(p, attn_prefix + ".bo");
  if (!ffn_prefix.empty()) {
    zero(p, ffn_prefix + ".w2");
    zero(p, ffn_prefix + ".b2");
  }
}

// Layer norm over rows, written out directly.
Tensor layer_norm_oracle(const Tensor& x, const Tensor& g, const Tensor& b) {
  Tensor y(x.shape);
  const std::size_t n = x.dim(0), c = x.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += x.at(i, j);
    mu /= c;
    for (std::size_t j = 0; j < c; ++j) var += (x.at(i, j) - mu) * (x.at(i, j) - mu);
    var /= c;
    for (std::size_t j = 0; j < c; ++j) y.at(i, j) = (x.at(i, j) - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return y;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm) {
  Tensor out(t.shape);
  const std::size_t c = t.dim(1);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = t.at(perm[i], j);
  return out;
}

FlowOutputs forward(const BookNetConfig& c, Params& p, Tape& tape, const Tensor& image) {
  return booknet_forward(c, watch_params(tape, p), tape.constant(image));
}

// Independent count of every learnable scalar.
std::size_t expected_params(const BookNetConfig& c) {
  const std::size_t C = c.channels, F = C * c.ffn_expansion, S = c.stem_channels, M = c.mid_channels;
  const std::size_t gh = c.height / 8, gw = c.width / 8, pw = c.width / 16, nq = gh * pw;
  auto conv = [](std::size_t out, std::size_t in, std::size_t k) { return out * in * k * k + out; };
  auto stage = [&](std::size_t in, std::size_t out) {
    return conv(out, in, 3) + conv(out, out, 3) + conv(out, in, 1) +
           (c.blocks_per_stage - 1) * 2 * conv(out, out, 3);
  };
  const std::size_t attn = 4 * (C * C + C), ln = 2 * C, ffn = C * F + F + F * C + C;
  std::size_t n = conv(S, 3, 7) + stage(S, M) + stage(M, C);
  n += gh * gw * C + c.encoder_layers * (2 * ln + attn + ffn);
  n += 2 * nq * C;
  n += 2 * (c.decoder_layers_stage1 + c.decoder_layers_stage2) * (3 * ln + 2 * attn + ffn);
  if (c.cross_page_attention) n += 2 * (attn + ln);
  n += 2 * (2 * C * 9 + 2 * gh * pw + 576 * C + 576);
  if (c.use_fusion) n += 2 * conv(C, C, 3) + 2 * C * 9 + 2 * gh * gw;
  n += 576 * C + 576;
  return n;
}

}  // namespace

TEST_CASE("output shapes at toy and training resolution") {
  SUBCASE("toy 96x96") {
    const BookNetConfig c = BookNetConfig::toy();
    Params p = init_params(c, 1);
    Tape tape(false);
    const FlowOutputs out = forward(c, p, tape, random_tensor({3, 96, 96}, 2, 0, 1));
    CHECK(out.left.shape() == Shape{2, 96, 48});
    CHECK(out.right.shape() == Shape{2, 96, 48});
    CHECK(out.full.shape() == Shape{2, 96, 96});
    CHECK(out.coarse_left.shape() == Shape{2, 12, 6});
    CHECK(out.coarse_full.shape() == Shape{2, 12, 12});
  }
  SUBCASE("288x288 with the default architecture") {
    const BookNetConfig c = BookNetConfig::large();
    Params p = init_params(c, 1);
    Tape tape(false);
    const FlowOutputs out = forward(c, p, tape, random_tensor({3, 288, 288}, 3, 0, 1));
    CHECK(out.left.shape() == Shape{2, 288, 144});
    CHECK(out.right.shape() == Shape{2, 288, 144});
    CHECK(out.full.shape() == Shape{2, 288, 288});
    CHECK(out.full.value().all_finite());
  }
  SUBCASE("backbone reduces by 8") {
    const BookNetConfig c = micro(48, 64);
    Params p = init_params(c, 1);
    Tape tape(false);
    const Var f = backbone_forward(c, watch_params(tape, p), tape.constant(random_tensor({3, 48, 64}, 4)));
    CHECK(f.shape() == Shape{c.channels, 6, 8});
  }
  SUBCASE("wrong image size is rejected") {
    const BookNetConfig c = micro(32, 32);
    Params p = init_params(c, 1);
    Tape tape(false);
    CHECK_THROWS_AS(forward(c, p, tape, Tensor({3, 32, 48})), DimensionError);
  }
}

TEST_CASE("fresh initialization") {
  const BookNetConfig c = BookNetConfig::toy();
  const Params p = init_params(c, 5);
  CHECK(p.all_finite());
  SUBCASE("residual blocks start as identity branches") {
    for (const auto& e : p.entries())
      if (e.name.rfind("backbone.", 0) == 0 && e.name.find(".conv2.w") != std::string::npos)
        CHECK(std::all_of(e.value.data.begin(), e.value.data.end(), [](double v) { return v == 0.0; }));
  }
  SUBCASE("initial full flow is within one block of the identity") {
    BookNetConfig m = micro(32, 32);
    Params q = init_params(m, 6);
    Tape tape(false);
    const FlowOutputs out = forward(m, q, tape, random_tensor({3, 32, 32}, 7, 0, 1));
    const geometry::WarpFlow ident = geometry::WarpFlow::identity(32, 32);
    CHECK(max_abs_diff(out.full.value(), ident.coords()) * 15.5 < 8.0);
  }
  SUBCASE("same seed, same parameters; different seed, different parameters") {
    const Params q = init_params(c, 5), r = init_params(c, 6);
    bool same = true, differ = false;
    for (std::size_t i = 0; i < p.size(); ++i) {
      same = same && p.entries()[i].value.data == q.entries()[i].value.data;
      differ = differ || p.entries()[i].value.data != r.entries()[i].value.data;
    }
    CHECK(same);
    CHECK(differ);
  }
}

TEST_CASE("residual paths are identities when their branches output zero") {
  const BookNetConfig c = micro(32, 32);
  Params p = random_params(c, 10);
  for (std::size_t l = 0; l < c.encoder_layers; ++l) {
    const std::string n = "encoder.l" + std::to_string(l);
    zero_residual_outputs(p, n + ".attn", n + ".ffn");
  }
  for (const char* br : {"left", "right"})
    for (int st = 1; st <= 2; ++st) {
      const std::string n = std::string("decoder.") + br + ".s" + std::to_string(st) + ".l0";
      zero_residual_outputs(p, n + ".self", n + ".ffn");
      zero(p, n + ".cross.wo");
      zero(p, n + ".cross.bo");
    }
  Tape tape(false);
  const ParamVars pv = watch_params(tape, p);
  const Tensor tokens = random_tensor({16, c.channels}, 11);
  CHECK(encoder_forward(c, pv, tape.constant(tokens)).value().data == tokens.data);
  const Tensor queries = random_tensor({c.queries(), c.channels}, 12);
  const Var out = decoder_stage(c, pv, "left", 2, tape.constant(queries), tape.constant(tokens));
  CHECK(out.value().data == queries.data);
}

TEST_CASE("encoder is permutation equivariant without positional embeddings") {
  const BookNetConfig c = micro(16, 16);  // 2x2 token grid
  Params p = random_params(c, 20);
  zero(p, "encoder.pos");
  const Tensor tokens = random_tensor({4, c.channels}, 21);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Tape tape(false);
  const ParamVars pv = watch_params(tape, p);
  const Tensor a = encoder_forward(c, pv, tape.constant(tokens)).value();
  const Tensor b = encoder_forward(c, pv, tape.constant(permute_rows(tokens, perm))).value();
  CHECK(max_abs_diff(permute_rows(a, perm), b) < 1e-12);
}

TEST_CASE("stage-1 decoders are isolated from each other") {
  const BookNetConfig c = micro(32, 32);
  Params p = random_params(c, 30);
  Params q = p;
  std::uint64_t seed = 900;
  for (auto& e : q.entries())
    if (e.name.rfind("decoder.right", 0) == 0 || e.name == "query.right" || e.name.rfind("exchange.", 0) == 0 ||
        e.name.rfind("head.right", 0) == 0)
      e.value = random_tensor(e.value.shape, ++seed);
  const Tensor memory = random_tensor({16, c.channels}, 31);
  auto left1 = [&](Params& params) {
    Tape tape(false);
    const ParamVars pv = watch_params(tape, params);
    return decoder_stage(c, pv, "left", 1, pv["query.left"], tape.constant(memory)).value();
  };
  CHECK(left1(p).data == left1(q).data);
}

TEST_CASE("cross-page exchange") {
  BookNetConfig c = micro(32, 32);
  Params p = random_params(c, 40);
  const Tensor left = random_tensor({c.queries(), c.channels}, 41);
  const Tensor right = random_tensor({c.queries(), c.channels}, 42);

  SUBCASE("disabled: both sides pass through bitwise") {
    c.cross_page_attention = false;
    Params q = random_params(c, 43);
    Tape tape(false);
    const auto [l, r] = cross_page_exchange(c, watch_params(tape, q), tape.constant(left), tape.constant(right));
    CHECK(l.value().data == left.data);
    CHECK(r.value().data == right.data);
    for (const auto& e : q.entries()) CHECK(e.name.rfind("exchange.", 0) != 0);
  }
  SUBCASE("zero attention output reduces to a layer norm") {
    zero(p, "exchange.left.attn.wo");
    zero(p, "exchange.left.attn.bo");
    Tape tape(false);
    const auto lr = cross_page_exchange(c, watch_params(tape, p), tape.constant(left), tape.constant(right));
    const Tensor expect = layer_norm_oracle(left, p["exchange.left.ln.g"], p["exchange.left.ln.b"]);
    CHECK(max_abs_diff(lr.first.value(), expect) < 1e-12);
  }
  SUBCASE("invariant to the order of the other page's tokens") {
    std::vector<std::size_t> perm(c.queries());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = (i * 3 + 1) % perm.size();
    Tape tape(false);
    const ParamVars pv = watch_params(tape, p);
    const Tensor a = cross_page_exchange(c, pv, tape.constant(left), tape.constant(right)).first.value();
    const Tensor b =
        cross_page_exchange(c, pv, tape.constant(left), tape.constant(permute_rows(right, perm))).first.value();
    CHECK(max_abs_diff(a, b) < 1e-12);
  }
}

TEST_CASE("fusion toggle") {
  BookNetConfig c = micro(32, 32);
  c.use_fusion = false;
  Params p = random_params(c, 50);
  Tape tape(false);
  const FlowOutputs out = forward(c, p, tape, random_tensor({3, 32, 32}, 51, 0, 1));
  // Without fusion the coarse spread flow is the two page flows side by side.
  const Tensor& cf = out.coarse_full.value();
  const Tensor& cl = out.coarse_left.value();
  const Tensor& cr = out.coarse_right.value();
  bool ok = true;
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t y = 0; y < cl.dim(1); ++y)
      for (std::size_t x = 0; x < cl.dim(2); ++x)
        ok = ok && cf.at(ch, y, x) == cl.at(ch, y, x) && cf.at(ch, y, x + cl.dim(2)) == cr.at(ch, y, x);
  CHECK(ok);
  for (const auto& e : p.entries()) CHECK(e.name.rfind("fusion.", 0) != 0);
}

TEST_CASE("parameter count") {
  for (BookNetConfig c : {BookNetConfig::toy(), BookNetConfig::large(), micro(32, 64)}) {
    CHECK(param_count(c) == expected_params(c));
    c.channels *= 2;
    CHECK(param_count(c) == expected_params(c));
    c.decoder_layers_stage1 = c.decoder_layers_stage2 = 0;
    CHECK(param_count(c) == expected_params(c));
    c.cross_page_attention = false;
    c.use_fusion = false;
    CHECK(param_count(c) == expected_params(c));
  }
  CHECK(init_params(BookNetConfig::toy(), 1).scalar_count() == param_count(BookNetConfig::toy()));
}

TEST_CASE("zero decoder layers pass queries through") {
  BookNetConfig c = micro(32, 32);
  c.decoder_layers_stage1 = 0;
  Params p = random_params(c, 60);
  Tape tape(false);
  const ParamVars pv = watch_params(tape, p);
  const Var out = decoder_stage(c, pv, "left", 1, pv["query.left"], tape.constant(random_tensor({16, 8}, 61)));
  CHECK(out.value().data == p["query.left"].data);
}

TEST_CASE("identity parameters rectify nothing") {
  const BookNetConfig c = BookNetConfig::toy();
  Params p = make_identity_params(c);
  check_params(c, p);
  Tape tape(false);
  const FlowOutputs out = forward(c, p, tape, random_tensor({3, 96, 96}, 70, 0, 1));
  const geometry::WarpFlow ident = geometry::WarpFlow::identity(96, 96);
  // In pixels: normalized error times (extent - 1) / 2.
  CHECK(max_abs_diff(out.full.value(), ident.coords()) * 47.5 < 1e-6);

  const auto path = std::filesystem::temp_directory_path() / "booknet_identity_test.bkpt";
  train::save_params(path, p);
  Params q = train::load_params(path, c);
  std::filesystem::remove(path);
  Tape t2(false);
  const FlowOutputs out2 = forward(c, q, t2, random_tensor({3, 96, 96}, 71, 0, 1));
  CHECK(max_abs_diff(out2.full.value(), ident.coords()) * 47.5 < 1e-3);

  BookNetConfig bad = c;
  bad.use_fusion = false;
  CHECK_THROWS_AS(make_identity_params(bad), ConfigError);
}

TEST_CASE("forward pass is deterministic") {
  const BookNetConfig c = micro(32, 32);
  Params p = random_params(c, 80);
  const Tensor img = random_tensor({3, 32, 32}, 81, 0, 1);
  Tape t1(false), t2(false);
  CHECK(forward(c, p, t1, img).full.value().data == forward(c, p, t2, img).full.value().data);
}

TEST_CASE("config validation and serialization") {
  const BookNetConfig toy = BookNetConfig::toy();
  CHECK(config_from_json(to_json(toy)) == toy);
  BookNetConfig odd = toy;
  odd.cross_page_attention = false;
  odd.supervise = {false, false, true};
  CHECK(config_from_json(to_json(odd)) == odd);

  nlohmann::json j = to_json(toy);
  j.erase("heads");
  CHECK_THROWS_AS(config_from_json(j), ConfigError);

  BookNetConfig c = toy;
  c.heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy;
  c.height = 100;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy;
  c.supervise = {false, false, false};
  CHECK_THROWS_AS(c.validate(), ConfigError);

  Params p = init_params(toy, 1);
  BookNetConfig other = toy;
  other.channels = 32;
  CHECK_THROWS(check_params(other, p));
}

TEST_CASE("gradient suite passes, including the end-to-end model") {
  const auto entries = grad::run_gradient_suite();
  CHECK(entries.size() > 20);
  for (const auto& e : entries) {
    INFO(e.name << " max rel err " << e.report.max_rel_err << " " << e.error);
    CHECK(e.passed());
    CHECK(e.report.coords_checked > 0);
  }
}

TEST_CASE("gradient suite detects a corrupted op") {
  grad::SuiteOptions o;
  o.end_to_end = false;
  o.fault_op = "matmul";
  o.fault_factor = 1.5;
  const auto entries = grad::run_gradient_suite(o);
  const auto it = std::find_if(entries.begin(), entries.end(), [](const auto& e) { return e.name == "matmul"; });
  REQUIRE(it != entries.end());
  CHECK_FALSE(it->passed());
}
