#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "efnet/dbtc.hpp"
#include "efnet/rng.hpp"
#include "efnet/verify.hpp"

using efnet::Tensor;
using efnet::TokenSet;
using Catch::Approx;

namespace {

TokenSet<double> two_point_set(double tau_probe = 0.0) {
  (void)tau_probe;
  TokenSet<double> ts;
  ts.tokens = Tensor<double>({2, 2});
  ts.tokens[0] = 1;  // x_0 = (1, 0)
  ts.tokens[1] = 0;
  ts.tokens[2] = 0;  // x_1 = (0, 0)
  ts.tokens[3] = 0;
  ts.coords = Tensor<double>({2, 2});
  ts.coords[0] = 0;  // y_0 = (0, 0)
  ts.coords[1] = 0;
  ts.coords[2] = 3;  // y_1 = (3, 4)
  ts.coords[3] = 4;
  ts.importance = Tensor<double>({2});
  ts.grid_h = ts.grid_w = 1;
  return ts;
}

TokenSet<double> random_ts(std::size_t n, std::size_t c, efnet::Rng& rng) {
  TokenSet<double> ts;
  ts.tokens = Tensor<double>({n, c});
  for (std::size_t i = 0; i < n * c; ++i) ts.tokens[i] = rng.normal();
  ts.coords = Tensor<double>({n, 2});
  for (std::size_t i = 0; i < n * 2; ++i) ts.coords[i] = rng.uniform();
  ts.importance = Tensor<double>({n});
  for (std::size_t i = 0; i < n; ++i) ts.importance[i] = rng.normal() * 0.5;
  ts.grid_h = n;
  ts.grid_w = 1;
  return ts;
}

struct MainResult {
  Tensor<double> distance, density, separation, score, merged;
  std::vector<std::size_t> centers, assignment;
};

MainResult run_main_path(const TokenSet<double>& ts, double tau, std::size_t k, std::size_t m) {
  MainResult r;
  r.distance = efnet::dual_distance(ts, tau);
  r.density = efnet::local_density(r.distance, std::min(k, ts.size() - 1));
  r.separation = efnet::separation_delta(r.distance, r.density);
  r.score = Tensor<double>({ts.size()});
  for (std::size_t i = 0; i < ts.size(); ++i) r.score[i] = r.density[i] * r.separation[i];
  r.centers = efnet::select_centers(r.score, m);
  r.assignment = efnet::assign_clusters(r.distance, r.centers);
  r.merged = efnet::merge_tokens(ts.tokens, r.assignment, ts.importance);
  return r;
}

std::set<std::set<std::size_t>> partition_of(const std::vector<std::size_t>& assignment,
                                             std::size_t m) {
  std::vector<std::set<std::size_t>> groups(m);
  for (std::size_t i = 0; i < assignment.size(); ++i) groups[assignment[i]].insert(i);
  return {groups.begin(), groups.end()};
}

}  // namespace

TEST_CASE("dual distance: weighted sum of semantic and spatial norms") {
  TokenSet<double> ts = two_point_set();
  Tensor<double> half = efnet::dual_distance(ts, 0.5);
  REQUIRE(half.at(0, 1) == Approx(3.5).margin(1e-12));  // 1 + 0.5 * 5
  REQUIRE(half.at(1, 0) == half.at(0, 1));
  REQUIRE(half.at(0, 0) == 0.0);
  REQUIRE(half.at(1, 1) == 0.0);

  Tensor<double> pure = efnet::dual_distance(ts, 1.0);
  REQUIRE(pure.at(0, 1) == Approx(1.0).margin(1e-12));

  ts.tokens[0] = 0;  // coincident in both spaces
  ts.coords[2] = 0;
  ts.coords[3] = 0;
  REQUIRE(efnet::dual_distance(ts, 0.3).at(0, 1) == 0.0);

  REQUIRE_THROWS_AS(efnet::dual_distance(ts, 1.5), efnet::ContractError);
  REQUIRE_THROWS_AS(efnet::dual_distance(ts, -0.1), efnet::ContractError);
}

TEST_CASE("dual distance: symmetric-tau variant weights the semantic term") {
  TokenSet<double> ts = two_point_set();
  Tensor<double> d = efnet::dual_distance(ts, 0.25, true);
  REQUIRE(d.at(0, 1) == Approx(0.25 * 1.0 + 0.75 * 5.0).margin(1e-12));
}

TEST_CASE("dual distance: symmetry, monotonicity in tau, metric at extremes") {
  efnet::Rng rng(13);
  TokenSet<double> ts = random_ts(12, 4, rng);
  const double taus[] = {0.0, 0.25, 0.5, 0.75, 1.0};
  Tensor<double> prev;
  for (double tau : taus) {
    Tensor<double> d = efnet::dual_distance(ts, tau);
    for (std::size_t i = 0; i < 12; ++i) {
      REQUIRE(d.at(i, i) == 0.0);
      for (std::size_t j = 0; j < 12; ++j) {
        REQUIRE(d.at(i, j) == d.at(j, i));
        REQUIRE(d.at(i, j) >= 0.0);
        if (prev.defined()) REQUIRE(d.at(i, j) <= prev.at(i, j) + 1e-12);
      }
    }
    prev = d;
  }
  for (double tau : {0.0, 1.0}) {
    Tensor<double> d = efnet::dual_distance(ts, tau);
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 12; ++j)
        for (std::size_t l = 0; l < 12; ++l)
          REQUIRE(d.at(i, j) <= d.at(i, l) + d.at(l, j) + 1e-9);
  }
}

TEST_CASE("local density: literals and boundary k") {
  Tensor<double> zero({3, 3}, 0.0);
  Tensor<double> rho0 = efnet::local_density(zero, 2);
  for (std::size_t i = 0; i < 3; ++i) REQUIRE(rho0[i] == 1.0);

  Tensor<double> d({3, 3});
  d.at(0, 1) = d.at(1, 0) = 1.0;
  d.at(0, 2) = d.at(2, 0) = 1.0;
  d.at(1, 2) = d.at(2, 1) = 4.0;
  Tensor<double> rho = efnet::local_density(d, 2);
  REQUIRE(rho[0] == Approx(std::exp(-1.0)).margin(1e-12));

  // k = N-1 uses every other token
  Tensor<double> all = efnet::local_density(d, 2);
  REQUIRE(all[1] == Approx(std::exp(-(1.0 + 16.0) / 2.0)).margin(1e-12));

  REQUIRE_THROWS_AS(efnet::local_density(d, 3), efnet::ContractError);
  REQUIRE_THROWS_AS(efnet::local_density(d, 0), efnet::ContractError);

  for (std::size_t i = 0; i < 3; ++i) {
    REQUIRE(rho[i] > 0.0);
    REQUIRE(rho[i] <= 1.0);
  }
}

TEST_CASE("separation: min distance to a denser token, max row for the peak") {
  Tensor<double> d({3, 3});
  d.at(0, 1) = d.at(1, 0) = 1.0;
  d.at(0, 2) = d.at(2, 0) = 2.0;
  d.at(1, 2) = d.at(2, 1) = 1.0;
  Tensor<double> rho({3});
  rho[0] = 0.9;
  rho[1] = 0.5;
  rho[2] = 0.2;
  Tensor<double> delta = efnet::separation_delta(d, rho);
  REQUIRE(delta[0] == Approx(2.0).margin(1e-12));
  REQUIRE(delta[1] == Approx(1.0).margin(1e-12));
  REQUIRE(delta[2] == Approx(1.0).margin(1e-12));

  // density ties: lower index counts as denser, so index 0 takes the max branch
  Tensor<double> flat({3}, 0.5);
  Tensor<double> dt = efnet::separation_delta(d, flat);
  REQUIRE(dt[0] == Approx(2.0).margin(1e-12));
  REQUIRE(dt[1] == Approx(1.0).margin(1e-12));  // denser set = {0}
  REQUIRE(dt[2] == Approx(1.0).margin(1e-12));  // min(d20, d21)

  Tensor<double> one({1, 1}, 0.0);
  Tensor<double> rho1({1}, 1.0);
  REQUIRE(efnet::separation_delta(one, rho1)[0] == 0.0);
}

TEST_CASE("center selection: top scores, index tie-break, ascending output") {
  Tensor<double> score({3});
  score[0] = 5;
  score[1] = 1;
  score[2] = 3;
  REQUIRE(efnet::select_centers(score, 2) == std::vector<std::size_t>{0, 2});

  Tensor<double> equal({3}, 2.0);
  REQUIRE(efnet::select_centers(equal, 2) == std::vector<std::size_t>{0, 1});
  REQUIRE_THROWS_AS(efnet::select_centers(score, 4), efnet::ContractError);

  efnet::Rng rng(17);
  Tensor<double> r({9});
  for (std::size_t i = 0; i < 9; ++i) r[i] = rng.normal();
  std::vector<std::size_t> cs = efnet::select_centers(r, 4);
  REQUIRE(std::is_sorted(cs.begin(), cs.end()));
  double worst_in = *std::min_element(cs.begin(), cs.end(), [&](auto a, auto b) {
    return r[a] < r[b];
  });
  for (std::size_t i = 0; i < 9; ++i) {
    if (std::find(cs.begin(), cs.end(), i) == cs.end()) REQUIRE(r[i] <= r[worst_in]);
  }
}

TEST_CASE("cluster assignment: nearest center, ties to the lower center") {
  Tensor<double> d({3, 3});
  d.at(0, 1) = d.at(1, 0) = 2.0;
  d.at(0, 2) = d.at(2, 0) = 2.0;  // token 0 equidistant from centers 1 and 2
  d.at(1, 2) = d.at(2, 1) = 5.0;
  std::vector<std::size_t> one_center{1};
  REQUIRE(efnet::assign_clusters(d, one_center) == std::vector<std::size_t>{0, 0, 0});

  std::vector<std::size_t> two{1, 2};
  std::vector<std::size_t> got = efnet::assign_clusters(d, two);
  REQUIRE(got[0] == 0);  // tie -> cluster of center index 1 (lower center)
  REQUIRE(got[1] == 0);
  REQUIRE(got[2] == 1);

  REQUIRE_THROWS_AS(efnet::assign_clusters(d, std::vector<std::size_t>{}), efnet::ContractError);
}

TEST_CASE("token merge: exp-weighted mean with stable shift") {
  Tensor<double> tokens({2, 2});
  tokens[0] = 1;
  tokens[1] = 2;
  tokens[2] = 3;
  tokens[3] = 4;
  std::vector<std::size_t> assign{0, 0};

  Tensor<double> p0({2}, 0.0);
  Tensor<double> mean = efnet::merge_tokens(tokens, assign, p0);
  REQUIRE(mean.at(0, 0) == Approx(2.0).margin(1e-12));
  REQUIRE(mean.at(0, 1) == Approx(3.0).margin(1e-12));

  Tensor<double> p({2});
  p[0] = std::log(3.0);
  p[1] = 0.0;
  Tensor<double> w = efnet::merge_tokens(tokens, assign, p);
  REQUIRE(w.at(0, 0) == Approx(1.5).margin(1e-12));
  REQUIRE(w.at(0, 1) == Approx(2.5).margin(1e-12));

  std::vector<std::size_t> split{0, 1};
  Tensor<double> id = efnet::merge_tokens(tokens, split, p);
  for (std::size_t i = 0; i < 4; ++i) REQUIRE(id[i] == tokens[i]);
}

TEST_CASE("token merge: convex hull and shift invariance") {
  efnet::Rng rng(23);
  Tensor<double> tokens({10, 3});
  for (std::size_t i = 0; i < 30; ++i) tokens[i] = rng.normal();
  std::vector<std::size_t> assign{0, 1, 0, 2, 1, 0, 2, 2, 1, 0};
  Tensor<double> p({10});
  for (std::size_t i = 0; i < 10; ++i) p[i] = rng.normal();

  Tensor<double> merged = efnet::merge_tokens(tokens, assign, p);
  for (std::size_t ci = 0; ci < 3; ++ci) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t j = 0; j < 10; ++j) {
        if (assign[j] != ci) continue;
        lo = std::min(lo, tokens.at(j, ch));
        hi = std::max(hi, tokens.at(j, ch));
      }
      REQUIRE(merged.at(ci, ch) >= lo - 1e-9);
      REQUIRE(merged.at(ci, ch) <= hi + 1e-9);
    }
  }

  Tensor<double> shifted({10});
  for (std::size_t i = 0; i < 10; ++i) shifted[i] = p[i] + 7.25;
  Tensor<double> merged2 = efnet::merge_tokens(tokens, assign, shifted);
  for (std::size_t i = 0; i < merged.numel(); ++i)
    REQUIRE(merged2[i] == Approx(merged[i]).margin(1e-6));
}

TEST_CASE("importance attention: literals, zero-p reduction, shift invariance") {
  Tensor<double> q({1, 1}, 0.7);
  Tensor<double> k({1, 1}, 0.7);
  Tensor<double> v({1, 2});
  v[0] = -3;
  v[1] = 9;
  Tensor<double> p1({1}, 4.0);
  Tensor<double> single = efnet::importance_attention(q, k, v, p1);
  REQUIRE(single.at(0, 0) == -3.0);
  REQUIRE(single.at(0, 1) == 9.0);

  Tensor<double> k2({2, 1}, 0.7);  // equal raw logits for both keys
  Tensor<double> v2({2, 1});
  v2[0] = 4;
  v2[1] = 8;
  Tensor<double> p2({2});
  p2[0] = std::log(3.0);
  p2[1] = 0.0;
  Tensor<double> out = efnet::importance_attention(q, k2, v2, p2);
  REQUIRE(out.at(0, 0) == Approx(5.0).margin(1e-12));  // 0.75*4 + 0.25*8

  efnet::Rng rng(29);
  Tensor<double> qq({3, 4}), kk({5, 4}), vv({5, 2});
  for (std::size_t i = 0; i < qq.numel(); ++i) qq[i] = rng.normal();
  for (std::size_t i = 0; i < kk.numel(); ++i) kk[i] = rng.normal();
  for (std::size_t i = 0; i < vv.numel(); ++i) vv[i] = rng.normal();
  Tensor<double> zeros({5}, 0.0);
  Tensor<double> biased = efnet::importance_attention(qq, kk, vv, zeros);
  Tensor<double> plain = efnet::matmul(
      efnet::softmax_rows(efnet::scale(efnet::matmul(qq, efnet::transpose(kk)),
                                       1.0 / std::sqrt(4.0))),
      vv);
  for (std::size_t i = 0; i < biased.numel(); ++i)
    REQUIRE(biased[i] == Approx(plain[i]).margin(1e-6));

  Tensor<double> pr({5});
  for (std::size_t i = 0; i < 5; ++i) pr[i] = rng.normal();
  Tensor<double> prs({5});
  for (std::size_t i = 0; i < 5; ++i) prs[i] = pr[i] - 3.5;
  Tensor<double> a = efnet::importance_attention(qq, kk, vv, pr);
  Tensor<double> b = efnet::importance_attention(qq, kk, vv, prs);
  for (std::size_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == Approx(b[i]).margin(1e-6));

  Tensor<double> bad({4, 3});
  REQUIRE_THROWS_AS(efnet::importance_attention(qq, bad, vv, pr), efnet::ShapeError);
}

TEST_CASE("main path agrees with the quadratic oracle") {
  efnet::Rng rng(31);
  const std::size_t ns[] = {2, 3, 5, 8, 17, 33, 64};
  const double taus[] = {0.0, 0.3, 0.5, 0.7, 1.0};
  std::size_t ti = 0;
  for (std::size_t n : ns) {
    TokenSet<double> ts = random_ts(n, 1 + (n % 5), rng);
    const double tau = taus[ti++ % 5];
    const std::size_t k = 1 + (n % 4);
    const std::size_t m = std::max<std::size_t>(1, (n + 3) / 4);
    MainResult main = run_main_path(ts, tau, k, m);
    efnet::ClusterResult<double> oracle =
        efnet::brute_force_oracle(ts, tau, std::min(k, n - 1), m);
    REQUIRE(main.centers == oracle.centers);
    REQUIRE(main.assignment == oracle.assignment);
    for (std::size_t i = 0; i < n * n; ++i)
      REQUIRE(main.distance[i] == Approx(oracle.distance[i]).margin(1e-10));
    for (std::size_t i = 0; i < n; ++i) {
      REQUIRE(main.density[i] == Approx(oracle.density[i]).margin(1e-10));
      REQUIRE(main.separation[i] == Approx(oracle.separation[i]).margin(1e-10));
      REQUIRE(main.score[i] == Approx(oracle.score[i]).margin(1e-10));
    }
    for (std::size_t i = 0; i < main.merged.numel(); ++i)
      REQUIRE(main.merged[i] == Approx(oracle.merged[i]).margin(1e-10));
  }
}

TEST_CASE("planted blobs: centers land one per blob") {
  efnet::Rng rng(37);
  const std::size_t per = 16;
  TokenSet<double> ts;
  ts.tokens = Tensor<double>({4 * per, 2});
  ts.coords = Tensor<double>({4 * per, 2});
  ts.importance = Tensor<double>({4 * per});
  const double cx[4] = {0, 10, 0, 10}, cy[4] = {0, 0, 10, 10};
  for (std::size_t b = 0; b < 4; ++b) {
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t row = b * per + i;
      ts.tokens.at(row, std::size_t(0)) = cx[b] + rng.normal() * 0.1;
      ts.tokens.at(row, std::size_t(1)) = cy[b] + rng.normal() * 0.1;
      ts.coords.at(row, std::size_t(0)) = cx[b] / 10.0 + rng.normal() * 0.01;
      ts.coords.at(row, std::size_t(1)) = cy[b] / 10.0 + rng.normal() * 0.01;
    }
  }
  ts.grid_h = 8;
  ts.grid_w = 8;
  MainResult main = run_main_path(ts, 0.5, 5, 4);
  efnet::ClusterResult<double> oracle = efnet::brute_force_oracle(ts, 0.5, 5, 4);
  REQUIRE(main.centers == oracle.centers);
  REQUIRE(main.assignment == oracle.assignment);
  // one center per planted blob, members assigned to their own blob's center
  std::set<std::size_t> blobs;
  for (std::size_t c : main.centers) blobs.insert(c / per);
  REQUIRE(blobs.size() == 4);
  for (std::size_t i = 0; i < 4 * per; ++i) {
    REQUIRE(main.centers[main.assignment[i]] / per == i / per);
  }
}

TEST_CASE("tau=1 clustering ignores spatial shuffling") {
  efnet::Rng rng(41);
  TokenSet<double> ts = random_ts(24, 4, rng);
  TokenSet<double> shuffled = ts;
  shuffled.coords = Tensor<double>({24, 2});
  std::vector<std::size_t> perm(24);
  std::iota(perm.begin(), perm.end(), std::size_t(0));
  for (std::size_t i = 23; i > 0; --i) std::swap(perm[i], perm[rng.range(i + 1)]);
  for (std::size_t i = 0; i < 24; ++i) {
    shuffled.coords[i * 2] = ts.coords[perm[i] * 2];
    shuffled.coords[i * 2 + 1] = ts.coords[perm[i] * 2 + 1];
  }
  MainResult a = run_main_path(ts, 1.0, 5, 6);
  MainResult b = run_main_path(shuffled, 1.0, 5, 6);
  REQUIRE(a.centers == b.centers);
  REQUIRE(a.assignment == b.assignment);
  for (std::size_t i = 0; i < 24; ++i) REQUIRE(a.density[i] == b.density[i]);

  MainResult c = run_main_path(ts, 0.0, 5, 6);
  MainResult d = run_main_path(shuffled, 0.0, 5, 6);
  REQUIRE((c.centers != d.centers || c.assignment != d.assignment));
}

TEST_CASE("permuting token order permutes the clustering with it") {
  efnet::Rng rng(43);
  TokenSet<double> ts = random_ts(20, 3, rng);
  std::vector<std::size_t> perm(20);
  std::iota(perm.begin(), perm.end(), std::size_t(0));
  for (std::size_t i = 19; i > 0; --i) std::swap(perm[i], perm[rng.range(i + 1)]);

  TokenSet<double> pt;
  pt.tokens = Tensor<double>({20, 3});
  pt.coords = Tensor<double>({20, 2});
  pt.importance = Tensor<double>({20});
  for (std::size_t i = 0; i < 20; ++i) {
    for (std::size_t ch = 0; ch < 3; ++ch) pt.tokens.at(i, ch) = ts.tokens.at(perm[i], ch);
    pt.coords.at(i, std::size_t(0)) = ts.coords.at(perm[i], std::size_t(0));
    pt.coords.at(i, std::size_t(1)) = ts.coords.at(perm[i], std::size_t(1));
    pt.importance[i] = ts.importance[perm[i]];
  }
  pt.grid_h = ts.grid_h;
  pt.grid_w = ts.grid_w;

  MainResult base = run_main_path(ts, 0.4, 4, 5);
  MainResult permuted = run_main_path(pt, 0.4, 4, 5);

  std::set<std::size_t> base_centers(base.centers.begin(), base.centers.end());
  std::set<std::size_t> mapped_centers;
  for (std::size_t c : permuted.centers) mapped_centers.insert(perm[c]);
  REQUIRE(base_centers == mapped_centers);

  std::vector<std::size_t> mapped_assign(20);
  for (std::size_t i = 0; i < 20; ++i) mapped_assign[perm[i]] = permuted.assignment[i];
  REQUIRE(partition_of(base.assignment, 5) == partition_of(mapped_assign, 5));
}

TEST_CASE("cluster downsample: identical tokens collapse to one refined token") {
  TokenSet<double> ts;
  ts.tokens = Tensor<double>({4, 2});
  for (std::size_t i = 0; i < 4; ++i) {
    ts.tokens.at(i, std::size_t(0)) = 1.0;
    ts.tokens.at(i, std::size_t(1)) = -2.0;
  }
  ts.coords = Tensor<double>({4, 2});
  const double rc[4][2] = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  for (std::size_t i = 0; i < 4; ++i) {
    ts.coords.at(i, std::size_t(0)) = rc[i][0];
    ts.coords.at(i, std::size_t(1)) = rc[i][1];
  }
  ts.importance = Tensor<double>({4});
  ts.grid_h = ts.grid_w = 2;

  auto pce = efnet::PixelCoordEncoding<double>::identity();
  efnet::DbtcParams<double> params;
  params.p_weight = Tensor<double>({2, 1}, 0.0);
  params.p_bias = Tensor<double>({1}, 0.0);

  auto [out, cr] = efnet::cluster_downsample(ts, 0.3, 3, 0.25, pce, params);
  REQUIRE(out.tokens.extent(0) == 1);
  REQUIRE(cr.centers.size() == 1);
  REQUIRE(cr.assignment == std::vector<std::size_t>{0, 0, 0, 0});
  // merged == token, residual doubles it, attention over identical values adds
  // one more copy: 3x the shared token
  REQUIRE(out.tokens.at(0, std::size_t(0)) == Approx(3.0).margin(1e-12));
  REQUIRE(out.tokens.at(0, std::size_t(1)) == Approx(-6.0).margin(1e-12));
  REQUIRE(out.grid_h == 1);
  REQUIRE(out.grid_w == 1);
  // merged coords: uniform mean of the four cell coords
  REQUIRE(out.coords.at(0, std::size_t(0)) == Approx(0.5).margin(1e-12));
  REQUIRE(out.coords.at(0, std::size_t(1)) == Approx(0.5).margin(1e-12));

  REQUIRE_THROWS_AS(efnet::cluster_downsample(ts, 0.3, 3, 0.0, pce, params),
                    efnet::ContractError);
}

TEST_CASE("cluster downsample: every cluster nonempty, centers self-assigned") {
  efnet::Rng rng(47);
  TokenSet<double> ts = random_ts(30, 5, rng);
  auto pce = efnet::PixelCoordEncoding<double>::identity();
  efnet::DbtcParams<double> params;
  params.p_weight = Tensor<double>({5, 1});
  for (std::size_t i = 0; i < 5; ++i) params.p_weight[i] = rng.normal() * 0.1;
  params.p_bias = Tensor<double>({1}, 0.05);

  auto [out, cr] = efnet::cluster_downsample(ts, 0.7, 5, 0.25, pce, params);
  const std::size_t m = cr.centers.size();
  REQUIRE(m == 8);  // ceil(0.25 * 30)
  REQUIRE(out.tokens.extent(0) == 8);
  std::vector<std::size_t> sizes(m, 0);
  for (std::size_t ci : cr.assignment) {
    REQUIRE(ci < m);
    ++sizes[ci];
  }
  for (std::size_t ci = 0; ci < m; ++ci) {
    REQUIRE(sizes[ci] >= 1);
    REQUIRE(cr.assignment[cr.centers[ci]] == ci);
  }
  for (std::size_t i = 0; i < out.tokens.numel(); ++i) REQUIRE(std::isfinite(out.tokens[i]));
}

TEST_CASE("equivalence harness flags an injected distance-sign defect") {
  auto healthy = efnet::clustering_equivalence_case<double>(24, 4, 0.5, 3, 0.3, 99, false);
  REQUIRE(healthy.integers_match);
  REQUIRE(healthy.max_real_err <= 1e-10);

  auto mutated = efnet::clustering_equivalence_case<double>(24, 4, 0.5, 3, 0.3, 99, false, true);
  REQUIRE(mutated.max_real_err > 1e-10);

  // the spatial term carries weight 1 - tau, so at tau = 1 the defect vanishes
  auto silent = efnet::clustering_equivalence_case<double>(24, 4, 1.0, 3, 0.3, 99, false, true);
  REQUIRE(silent.integers_match);
  REQUIRE(silent.max_real_err <= 1e-10);
}
