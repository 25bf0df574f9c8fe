#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "booknet/geometry.hpp"
#include "booknet/grad_check.hpp"
#include "booknet/ops.hpp"
#include "test_util.hpp"

using namespace booknet;
using namespace booknet::geometry;
using booknet::testing::random_tensor;

namespace {

// Plain scalar bilinear lookup at a pixel position, clamped to the border.
double scalar_bilinear(const Tensor& img, std::size_t ch, double px, double py) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  px = std::clamp(px, 0.0, static_cast<double>(w - 1));
  py = std::clamp(py, 0.0, static_cast<double>(h - 1));
  const std::size_t x0 = std::min(static_cast<std::size_t>(std::floor(px)), w - 2);
  const std::size_t y0 = std::min(static_cast<std::size_t>(std::floor(py)), h - 2);
  const double fx = px - x0, fy = py - y0;
  return (1 - fx) * (1 - fy) * img.at(ch, y0, x0) + fx * (1 - fy) * img.at(ch, y0, x0 + 1) +
         (1 - fx) * fy * img.at(ch, y0 + 1, x0) + fx * fy * img.at(ch, y0 + 1, x0 + 1);
}

WarpFlow map_flow(std::size_t h, std::size_t w, auto&& f) {
  WarpFlow out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto [u, v] = f(to_normalized(x, w), to_normalized(y, h));
      out.set(y, x, u, v);
    }
  }
  return out;
}

double max_abs_diff(const WarpFlow& a, const WarpFlow& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.coords().numel(); ++i) m = std::max(m, std::abs(a.coords().data[i] - b.coords().data[i]));
  return m;
}

}  // namespace

TEST_CASE("bilinear_sample: identity, constant and half-pixel shift") {
  const Tensor img = random_tensor({3, 17, 23}, 5);
  SUBCASE("identity flow reproduces the image exactly") {
    const Tensor out = bilinear_sample(img, WarpFlow::identity(17, 23));
    CHECK(out.shape == img.shape);
    CHECK(out.data == img.data);
  }
  SUBCASE("constant flow at a pixel center") {
    const double u = to_normalized(7, 23), v = to_normalized(4, 17);
    const Tensor out = bilinear_sample(img, map_flow(5, 6, [&](double, double) { return std::pair{u, v}; }));
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < 5; ++y)
        for (std::size_t x = 0; x < 6; ++x) CHECK(out.at(c, y, x) == doctest::Approx(img.at(c, 4, 7)).epsilon(1e-12));
  }
  SUBCASE("half-pixel shift on a ramp") {
    const std::size_t h = 9, w = 20;
    Tensor ramp({1, h, w});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) ramp.at(0, y, x) = static_cast<double>(x);
    WarpFlow flow(h, w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) flow.set(y, x, to_normalized(x + 0.5, w), to_normalized(y, h));
    const Tensor out = bilinear_sample(ramp, flow);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x + 1 < w; ++x) {
        const double oracle = scalar_bilinear(ramp, 0, to_pixel(flow.u(y, x), w), to_pixel(flow.v(y, x), h));
        CHECK(std::abs(out.at(0, y, x) - oracle) < 1e-12);
        CHECK(std::abs(out.at(0, y, x) - (x + 0.5)) < 1e-12);
      }
    }
  }
  SUBCASE("out-of-range coordinates clamp to the border") {
    const Tensor out = bilinear_sample(img, map_flow(2, 2, [](double, double) { return std::pair{-3.0, 5.0}; }));
    CHECK(out.at(1, 0, 0) == img.at(1, 16, 0));
  }
}

TEST_CASE("bilinear_sample: random points against the scalar oracle") {
  const Tensor img = random_tensor({2, 11, 13}, 8);
  const Tensor coords = random_tensor({2, 7, 9}, 9, -1.2, 1.2);
  const WarpFlow flow(coords);
  const Tensor out = bilinear_sample(img, flow);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 7; ++y)
      for (std::size_t x = 0; x < 9; ++x) {
        const double o = scalar_bilinear(img, c, to_pixel(flow.u(y, x), 13), to_pixel(flow.v(y, x), 11));
        CHECK(std::abs(out.at(c, y, x) - o) < 1e-12);
      }
}

TEST_CASE("WarpFlow reports out-of-range share without clamping") {
  WarpFlow f = WarpFlow::identity(2, 2);
  f.set(0, 0, 1.5, 0.0);
  CHECK(f.out_of_range_fraction() == doctest::Approx(0.25));
  CHECK(f.u(0, 0) == 1.5);
  CHECK_THROWS_AS(WarpFlow(Tensor({3, 2, 2})), DimensionError);
}

TEST_CASE("convex_upsample") {
  const std::size_t h = 3, w = 4;
  const WarpFlow coarse(random_tensor({2, h, w}, 21));
  SUBCASE("one-hot center logits replicate each cell") {
    UpsampleWeights wts{Tensor({kUpsampleChannels, h, w}, -60.0)};
    for (std::size_t s = 0; s < 64; ++s)
      for (std::size_t i = 0; i < h * w; ++i) wts.logits.data[(4 * 64 + s) * h * w + i] = 0.0;
    const WarpFlow fine = convex_upsample(coarse, wts);
    REQUIRE(fine.height() == 8 * h);
    REQUIRE(fine.width() == 8 * w);
    for (std::size_t y = 0; y < 8 * h; ++y)
      for (std::size_t x = 0; x < 8 * w; ++x) {
        CHECK(std::abs(fine.u(y, x) - coarse.u(y / 8, x / 8)) < 1e-12);
        CHECK(std::abs(fine.v(y, x) - coarse.v(y / 8, x / 8)) < 1e-12);
      }
  }
  SUBCASE("uniform logits give the neighborhood mean, inside its bounds") {
    const UpsampleWeights wts{Tensor({kUpsampleChannels, h, w}, 0.3)};
    const WarpFlow fine = convex_upsample(coarse, wts);
    for (std::size_t y = 0; y < 8 * h; ++y)
      for (std::size_t x = 0; x < 8 * w; ++x)
        for (std::size_t c = 0; c < 2; ++c) {
          double lo = 1e9, hi = -1e9, mean = 0.0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const long ny = std::clamp<long>(static_cast<long>(y / 8) + dy, 0, h - 1);
              const long nx = std::clamp<long>(static_cast<long>(x / 8) + dx, 0, w - 1);
              const double val = coarse.coords().at(c, ny, nx);
              lo = std::min(lo, val);
              hi = std::max(hi, val);
              mean += val / 9.0;
            }
          const double got = fine.coords().at(c, y, x);
          CHECK(std::abs(got - mean) < 1e-12);
          CHECK(got >= lo - 1e-12);
          CHECK(got <= hi + 1e-12);
        }
  }
  SUBCASE("random logits stay convex; weights sum to one") {
    const UpsampleWeights wts{random_tensor({kUpsampleChannels, h, w}, 22, -4, 4)};
    const WarpFlow fine = convex_upsample(coarse, wts);
    for (std::size_t y = 0; y < 8 * h; ++y)
      for (std::size_t x = 0; x < 8 * w; ++x) {
        const auto wk = wts.weights(y / 8, x / 8, y % 8, x % 8);
        double s = 0.0;
        for (double v : wk) {
          CHECK(v >= 0.0);
          s += v;
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
        for (std::size_t c = 0; c < 2; ++c) {
          double lo = 1e9, hi = -1e9;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const long ny = std::clamp<long>(static_cast<long>(y / 8) + dy, 0, h - 1);
              const long nx = std::clamp<long>(static_cast<long>(x / 8) + dx, 0, w - 1);
              lo = std::min(lo, coarse.coords().at(c, ny, nx));
              hi = std::max(hi, coarse.coords().at(c, ny, nx));
            }
          CHECK(fine.coords().at(c, y, x) >= lo - 1e-12);
          CHECK(fine.coords().at(c, y, x) <= hi + 1e-12);
        }
      }
  }
  SUBCASE("constant coarse flow stays constant") {
    const WarpFlow flat(Tensor({2, h, w}, 0.375));
    const WarpFlow fine = convex_upsample(flat, UpsampleWeights{random_tensor({kUpsampleChannels, h, w}, 23, -5, 5)});
    for (double v : fine.coords().data) CHECK(std::abs(v - 0.375) < 1e-12);
  }
  SUBCASE("grid mismatch") {
    CHECK_THROWS_AS(convex_upsample(coarse, UpsampleWeights{Tensor({kUpsampleChannels, h, w + 1})}), DimensionError);
    CHECK_THROWS_AS(convex_upsample(coarse, UpsampleWeights{Tensor({9, h, w})}), DimensionError);
  }
}

TEST_CASE("gradients through bilinear_sample and convex_upsample") {
  using namespace booknet::grad;
  SUBCASE("bilinear_sample, points offset a quarter pixel from the grid") {
    const std::size_t hs = 6, ws = 7, h = 4, w = 5;
    const Tensor src = random_tensor({2, hs, ws}, 31);
    Tensor flow({2, h, w});
    std::mt19937_64 rng(32);
    std::uniform_int_distribution<int> px(0, ws - 2), py(0, hs - 2);
    for (std::size_t i = 0; i < h * w; ++i) {
      flow.data[i] = to_normalized(px(rng) + 0.25 + 0.5 * (i % 2), ws);
      flow.data[h * w + i] = to_normalized(py(rng) + 0.25 + 0.5 * (i % 3 == 0), hs);
    }
    const Tensor weights = random_tensor({2, h, w}, 33);
    const auto f = [&](Tape& t, const std::vector<Var>& in) {
      return sum(mul(bilinear_sample(in[0], in[1]), t.constant(weights)));
    };
    GradCheckOptions opt;
    const GradCheckReport r = grad_check(f, {src, flow}, opt);
    INFO("max rel err " << r.max_rel_err);
    CHECK(r.passed);
  }
  SUBCASE("convex_upsample w.r.t. coarse coords and logits") {
    const std::size_t h = 2, w = 3;
    const Tensor coarse = random_tensor({2, h, w}, 41);
    const Tensor logits = random_tensor({kUpsampleChannels, h, w}, 42, -2, 2);
    const Tensor weights = random_tensor({2, 8 * h, 8 * w}, 43);
    const auto f = [&](Tape& t, const std::vector<Var>& in) {
      return sum(mul(convex_upsample(in[0], in[1]), t.constant(weights)));
    };
    const GradCheckReport r = grad_check(f, {coarse, logits}, {});
    INFO("max rel err " << r.max_rel_err);
    CHECK(r.passed);
  }
}

TEST_CASE("resize_flow") {
  SUBCASE("same extents") {
    const WarpFlow f(random_tensor({2, 9, 12}, 51));
    CHECK(max_abs_diff(resize_flow(f, 9, 12), f) < 1e-6);
  }
  SUBCASE("identity stays identity") {
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{13, 7}, {64, 100}, {5, 5}, {31, 2}}) {
      CHECK(max_abs_diff(resize_flow(WarpFlow::identity(17, 23), h, w), WarpFlow::identity(h, w)) < 1e-6);
    }
  }
  SUBCASE("down then up on a quadratic flow stays within the interpolation bound") {
    const double k = 0.3;
    const auto q = [k](double u, double v) { return std::pair{u + k * u * u, v - k * v * u}; };
    const WarpFlow fine = map_flow(65, 65, q);
    const WarpFlow back = resize_flow(resize_flow(fine, 17, 17), 65, 65);
    const double step = 2.0 / 16.0;
    // Largest second directional derivative of either channel is 2k.
    const double bound = 2.0 * step * step * (2.0 * k);
    CHECK(max_abs_diff(back, fine) < bound);
    CHECK(max_abs_diff(back, fine) > 0.0);
  }
  CHECK_THROWS_AS(resize_flow(WarpFlow::identity(4, 4), 0, 3), DimensionError);
}

TEST_CASE("split and stitch") {
  const WarpFlow f(random_tensor({2, 6, 10}, 61));
  const auto [l, r] = split_full_flow(f);
  CHECK(l.width() == 5);
  CHECK(stitch_pages(l, r) == f);
  const WarpFlow id = WarpFlow::identity(6, 10);
  const auto [il, ir] = split_full_flow(id);
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 5; ++x) {
      CHECK(il.u(y, x) == id.u(y, x));
      CHECK(ir.u(y, x) == id.u(y, x + 5));
      CHECK(ir.v(y, x) == id.v(y, x + 5));
    }
  CHECK_THROWS_AS(split_full_flow(WarpFlow::identity(4, 7)), DimensionError);
  CHECK_THROWS_AS(stitch_pages(WarpFlow::identity(4, 3), WarpFlow::identity(4, 2)), DimensionError);
}

TEST_CASE("invert_flow") {
  SUBCASE("identity") {
    const InversionResult r = invert_flow(WarpFlow::identity(20, 30));
    CHECK(max_abs_diff(r.inverse, WarpFlow::identity(20, 30)) < 1e-9);
    CHECK(r.max_residual_px < 1e-6);
  }
  SUBCASE("translation") {
    const double tu = 0.07, tv = -0.11;
    const WarpFlow fwd = map_flow(24, 32, [&](double u, double v) { return std::pair{u + tu, v + tv}; });
    const WarpFlow expect = map_flow(24, 32, [&](double u, double v) { return std::pair{u - tu, v - tv}; });
    const InversionResult r = invert_flow(fwd);
    CHECK(max_abs_diff(r.inverse, expect) < 1e-6);
  }
  SUBCASE("smooth curl round trip") {
    const std::size_t h = 64, w = 80;
    const auto curl = [](double u, double v) {
      return std::pair{u + 0.08 * (1 - u * u) * std::cos(std::numbers::pi * v / 2),
                       v + 0.05 * (1 - v * v) * std::sin(std::numbers::pi * u)};
    };
    const WarpFlow fwd = map_flow(h, w, curl);
    const InversionResult r = invert_flow(fwd);
    CHECK(r.nonconverged_fraction == 0.0);
    const WarpFlow round = compose(r.inverse, fwd);
    double worst = 0.0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        worst = std::max(worst, std::abs(to_pixel(round.u(y, x), w) - static_cast<double>(x)));
        worst = std::max(worst, std::abs(to_pixel(round.v(y, x), h) - static_cast<double>(y)));
      }
    CHECK(worst < 0.1);
  }
  SUBCASE("a folded map fails") {
    const WarpFlow fold = map_flow(32, 32, [](double u, double v) { return std::pair{u * u, v}; });
    CHECK_THROWS_AS(invert_flow(fold), InversionError);
  }
}

TEST_CASE("BKFL round trip") {
  const WarpFlow f(random_tensor({2, 5, 8}, 71, -1.3, 1.3));
  const auto bytes = encode_flow(f);
  CHECK(bytes.size() == 16 + 5 * 8 * 8);
  const WarpFlow g = decode_flow(bytes);
  for (std::size_t i = 0; i < f.coords().numel(); ++i)
    CHECK(g.coords().data[i] == static_cast<double>(static_cast<float>(f.coords().data[i])));
  CHECK(encode_flow(g) == bytes);
  const auto path = std::filesystem::temp_directory_path() / "booknet_flow_test.bkfl";
  save_flow(path, g);
  CHECK(load_flow(path) == g);
  std::filesystem::remove(path);
  auto cut = bytes;
  cut.pop_back();
  CHECK_THROWS_AS(decode_flow(cut), IoError);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_flow(bad), IoError);
}
