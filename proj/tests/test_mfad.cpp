#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "efnet/mfad.hpp"
#include "efnet/rng.hpp"
#include "oracles.hpp"

using efnet::ClassTokens;
using efnet::Tensor;
using Catch::Approx;

namespace {

Tensor<double> random_map(efnet::Rng& rng, std::size_t c, std::size_t h, std::size_t w) {
  Tensor<double> f({c, h, w});
  for (std::size_t i = 0; i < f.numel(); ++i) f[i] = rng.normal();
  return f;
}

}  // namespace

TEST_CASE("multiscale aggregation: constant maps stack into constant columns") {
  std::vector<Tensor<double>> maps;
  const double vals[4] = {1, 2, 3, 4};
  const std::size_t hw[4] = {8, 4, 2, 1};
  for (int s = 0; s < 4; ++s) maps.emplace_back(std::vector<std::size_t>{1, hw[s], hw[s]}, vals[s]);
  Tensor<double> xf = efnet::aggregate_multiscale(maps);
  REQUIRE(xf.extent(0) == 4);
  REQUIRE(xf.extent(1) == 8);
  REQUIRE(xf.extent(2) == 8);
  for (std::size_t ch = 0; ch < 4; ++ch)
    for (std::size_t p = 0; p < 64; ++p) REQUIRE(xf[ch * 64 + p] == vals[ch]);
}

TEST_CASE("multiscale aggregation: same-size maps concatenate untouched") {
  efnet::Rng rng(77);
  std::vector<Tensor<double>> maps;
  for (int s = 0; s < 4; ++s) maps.push_back(random_map(rng, 2, 3, 5));
  Tensor<double> xf = efnet::aggregate_multiscale(maps);
  REQUIRE(xf.extent(0) == 8);
  for (int s = 0; s < 4; ++s)
    for (std::size_t i = 0; i < 2 * 15; ++i) REQUIRE(xf[s * 2 * 15 + i] == maps[s][i]);

  std::vector<Tensor<double>> three(maps.begin(), maps.begin() + 3);
  REQUIRE_THROWS_AS(efnet::aggregate_multiscale(three), efnet::ContractError);

  maps[1] = random_map(rng, 2, 6, 5);  // larger than the first map
  REQUIRE_THROWS_AS(efnet::aggregate_multiscale(maps), efnet::ShapeError);
}

TEST_CASE("multiscale aggregation matches the per-plane upsample reference") {
  efnet::Rng rng(79);
  std::vector<Tensor<double>> maps = {random_map(rng, 2, 6, 6), random_map(rng, 3, 3, 3),
                                      random_map(rng, 1, 2, 2), random_map(rng, 2, 1, 1)};
  Tensor<double> xf = efnet::aggregate_multiscale(maps);
  REQUIRE(xf.extent(0) == 8);
  std::size_t out_ch = 0;
  for (const auto& f : maps) {
    const std::size_t c = f.extent(0), h = f.extent(1), w = f.extent(2);
    for (std::size_t ci = 0; ci < c; ++ci, ++out_ch) {
      std::vector<double> plane(f.values().begin() + static_cast<std::ptrdiff_t>(ci * h * w),
                                f.values().begin() + static_cast<std::ptrdiff_t>((ci + 1) * h * w));
      std::vector<double> ref = oracle::upsample_plane(plane, h, w, 6, 6);
      for (std::size_t p = 0; p < 36; ++p)
        REQUIRE(xf[out_ch * 36 + p] == Approx(ref[p]).margin(1e-12));
    }
  }
}

TEST_CASE("class distances: literal values and reference agreement") {
  Tensor<double> xf({1, 1, 1}, 1.0);
  ClassTokens<double> ct;
  ct.tokens = Tensor<double>({2, 1});
  ct.tokens[0] = 0.0;
  ct.tokens[1] = 3.0;
  Tensor<double> d = efnet::class_distance(xf, ct);
  REQUIRE(d[0] == Approx(1.0).margin(1e-6));
  REQUIRE(d[1] == Approx(2.0).margin(1e-6));

  efnet::Rng rng(83);
  Tensor<double> xr = random_map(rng, 5, 3, 4);
  ClassTokens<double> cr;
  cr.tokens = Tensor<double>({3, 5});
  for (std::size_t i = 0; i < 15; ++i) cr.tokens[i] = rng.normal();
  Tensor<double> dr = efnet::class_distance(xr, cr);
  std::vector<double> ref = oracle::class_distances(xr.values(), cr.tokens.values(), 5, 12, 3, 1e-12);
  for (std::size_t i = 0; i < dr.numel(); ++i) REQUIRE(dr[i] == Approx(ref[i]).margin(1e-12));
  for (std::size_t i = 0; i < dr.numel(); ++i) REQUIRE(dr[i] >= 0.0);

  ClassTokens<double> bad;
  bad.tokens = Tensor<double>({3, 4});
  REQUIRE_THROWS_AS(efnet::class_distance(xr, bad), efnet::ShapeError);
}

TEST_CASE("prediction: closer tokens get larger probabilities") {
  Tensor<double> d({2, 1, 1});
  d[0] = 0.0;
  d[1] = std::log(3.0);
  efnet::SegPrediction<double> pred = efnet::predict(d);
  REQUIRE(pred.probs[0] == Approx(0.75).margin(1e-12));
  REQUIRE(pred.probs[1] == Approx(0.25).margin(1e-12));

  Tensor<double> tie({3, 1, 1}, 4.2);
  efnet::SegPrediction<double> u = efnet::predict(tie);
  for (std::size_t i = 0; i < 3; ++i) REQUIRE(u.probs[i] == Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("prediction: shift invariance and argmax/argmin agreement") {
  efnet::Rng rng(89);
  Tensor<double> d({4, 3, 3});
  for (std::size_t i = 0; i < d.numel(); ++i) d[i] = std::abs(rng.normal()) + 0.01;
  efnet::SegPrediction<double> base = efnet::predict(d);

  Tensor<double> shifted({4, 3, 3});
  for (std::size_t i = 0; i < d.numel(); ++i) shifted[i] = d[i] + 2.5;
  efnet::SegPrediction<double> moved = efnet::predict(shifted);
  for (std::size_t i = 0; i < d.numel(); ++i)
    REQUIRE(moved.probs[i] == Approx(base.probs[i]).margin(1e-6));

  for (std::size_t p = 0; p < 9; ++p) {
    std::size_t amin = 0, amax = 0;
    for (std::size_t k = 1; k < 4; ++k) {
      if (d[k * 9 + p] < d[amin * 9 + p]) amin = k;
      if (base.probs[k * 9 + p] > base.probs[amax * 9 + p]) amax = k;
    }
    REQUIRE(amin == amax);
    double sum = 0.0;
    for (std::size_t k = 0; k < 4; ++k) sum += base.probs[k * 9 + p];
    REQUIRE(sum == Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("decoder pipeline is invariant to translating tokens and features") {
  efnet::Rng rng(97);
  Tensor<double> xf = random_map(rng, 3, 2, 2);
  ClassTokens<double> ct;
  ct.tokens = Tensor<double>({2, 3});
  for (std::size_t i = 0; i < 6; ++i) ct.tokens[i] = rng.normal();

  Tensor<double> xf2({3, 2, 2});
  ClassTokens<double> ct2;
  ct2.tokens = Tensor<double>({2, 3});
  const double off[3] = {1.0, -2.0, 0.5};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (std::size_t p = 0; p < 4; ++p) xf2[ch * 4 + p] = xf[ch * 4 + p] + off[ch];
    for (std::size_t k = 0; k < 2; ++k) ct2.tokens[k * 3 + ch] = ct.tokens[k * 3 + ch] + off[ch];
  }
  Tensor<double> da = efnet::class_distance(xf, ct);
  Tensor<double> db = efnet::class_distance(xf2, ct2);
  for (std::size_t i = 0; i < da.numel(); ++i) REQUIRE(db[i] == Approx(da[i]).margin(1e-9));
}
