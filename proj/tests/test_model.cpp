#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "efnet/metrics.hpp"
#include "efnet/model.hpp"
#include "efnet/rng.hpp"

using efnet::ModelConfig;
using efnet::Tensor;
using Catch::Approx;

namespace {

Tensor<double> random_image(efnet::Rng& rng, std::size_t c, std::size_t hw) {
  Tensor<double> img({c, hw, hw});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();
  return img;
}

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.channels = {8, 8, 16, 16};
  cfg.depth = {1, 1, 1, 1};
  cfg.heads = 2;
  cfg.window = 4;
  cfg.classes = 3;
  cfg.resolution = 32;
  return cfg;
}

std::string temp_path(const char* stem) {
  return std::string("model_test_") + stem + ".bin";
}

}  // namespace

TEST_CASE("model build is deterministic for a fixed seed") {
  ModelConfig cfg = small_cfg();
  auto a = efnet::build_model<double>(cfg, 42);
  auto b = efnet::build_model<double>(cfg, 42);
  REQUIRE(a.params.size() == b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    REQUIRE(a.params[i].first == b.params[i].first);
    REQUIRE(a.params[i].second.shape() == b.params[i].second.shape());
    for (std::size_t j = 0; j < a.params[i].second.numel(); ++j)
      REQUIRE(a.params[i].second[j] == b.params[i].second[j]);
  }
  auto c = efnet::build_model<double>(cfg, 43);
  bool any_diff = false;
  for (std::size_t j = 0; j < a.p("embed.rgb.w").numel(); ++j)
    any_diff = any_diff || a.p("embed.rgb.w")[j] != c.p("embed.rgb.w")[j];
  REQUIRE(any_diff);
}

TEST_CASE("parameter counting") {
  efnet::Model<double> tiny;
  Tensor<double> w({10, 5}), bias({5});
  tiny.params.emplace_back("w", w);
  tiny.params.emplace_back("b", bias);
  REQUIRE(efnet::count_params(tiny) == 55);

  ModelConfig toy;
  toy.channels = {16, 32, 64, 128};
  toy.depth = {1, 1, 1, 1};
  auto m = efnet::build_model<double>(toy, 1);
  const std::size_t base = efnet::count_params(m);
  REQUIRE(base < 2000000);
  REQUIRE(base == efnet::count_params(efnet::build_model<double>(toy, 9)));

  ModelConfig wide = toy;
  wide.channels = {32, 64, 128, 256};
  const std::size_t big = efnet::count_params(efnet::build_model<double>(wide, 1));
  const double ratio = static_cast<double>(big) / static_cast<double>(base);
  REQUIRE(ratio > 3.0);
  REQUIRE(ratio < 4.2);
}

TEST_CASE("class count touches only the decoder") {
  ModelConfig cfg = small_cfg();
  cfg.classes = 2;
  auto a = efnet::build_model<double>(cfg, 7);
  cfg.classes = 9;
  auto b = efnet::build_model<double>(cfg, 7);
  REQUIRE(a.params.size() == b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    REQUIRE(a.params[i].first == b.params[i].first);
    if (a.params[i].first.rfind("decoder.", 0) == 0) continue;
    REQUIRE(a.params[i].second.shape() == b.params[i].second.shape());
    for (std::size_t j = 0; j < a.params[i].second.numel(); ++j)
      REQUIRE(a.params[i].second[j] == b.params[i].second[j]);
  }
  REQUIRE(a.p("decoder.class_tokens").extent(0) == 2);
  REQUIRE(b.p("decoder.class_tokens").extent(0) == 9);
}

TEST_CASE("invalid configs name the offending field") {
  ModelConfig cfg = small_cfg();
  cfg.resolution = 20;
  REQUIRE_THROWS_WITH(cfg.validate(), Catch::Matchers::ContainsSubstring("resolution"));
  cfg = small_cfg();
  cfg.heads = 3;
  REQUIRE_THROWS_WITH(cfg.validate(), Catch::Matchers::ContainsSubstring("heads"));
  cfg = small_cfg();
  cfg.tau[1] = 1.5;
  REQUIRE_THROWS_WITH(cfg.validate(), Catch::Matchers::ContainsSubstring("tau"));
  cfg = small_cfg();
  cfg.ratio = 0.0;
  REQUIRE_THROWS_WITH(cfg.validate(), Catch::Matchers::ContainsSubstring("ratio"));
}

TEST_CASE("stage bridge: pooled constant adds through an identity projection") {
  Tensor<double> prev({2, 4, 4}, 4.0);
  Tensor<double> cur({2, 2, 2}, 1.0);
  Tensor<double> w({2, 2});
  w.at(0, 0) = w.at(1, 1) = 1.0;
  Tensor<double> b({2}, 0.0);
  Tensor<double> out = efnet::stage_bridge(prev, cur, w, b);
  for (std::size_t i = 0; i < out.numel(); ++i) REQUIRE(out[i] == Approx(5.0).margin(1e-12));

  Tensor<double> zero({2, 4, 4}, 0.0);
  Tensor<double> same = efnet::stage_bridge(zero, cur, w, b);
  for (std::size_t i = 0; i < same.numel(); ++i) REQUIRE(same[i] == cur[i]);

  Tensor<double> badcur({2, 3, 3});
  REQUIRE_THROWS_AS(efnet::stage_bridge(prev, badcur, w, b), efnet::ShapeError);
}

TEST_CASE("stage bridge matches a from-scratch loop") {
  efnet::Rng rng(103);
  const std::size_t cp = 3, cc = 5, h = 2, wd = 3;
  Tensor<double> prev({cp, 2 * h, 2 * wd});
  for (std::size_t i = 0; i < prev.numel(); ++i) prev[i] = rng.normal();
  Tensor<double> cur({cc, h, wd});
  for (std::size_t i = 0; i < cur.numel(); ++i) cur[i] = rng.normal();
  Tensor<double> w({cp, cc}), b({cc});
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.normal();
  for (std::size_t i = 0; i < b.numel(); ++i) b[i] = rng.normal();

  Tensor<double> out = efnet::stage_bridge(prev, cur, w, b);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < wd; ++x)
      for (std::size_t co = 0; co < cc; ++co) {
        double v = b[co];
        for (std::size_t ci = 0; ci < cp; ++ci) {
          double pool = 0.0;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx)
              pool += prev.at(ci, 2 * y + dy, 2 * x + dx);
          v += (pool / 4.0) * w.at(ci, co);
        }
        v += cur.at(co, y, x);
        REQUIRE(out.at(co, y, x) == Approx(v).margin(1e-6));
      }
}

TEST_CASE("forward rejects inputs that disagree with the configured resolution") {
  auto m = efnet::build_model<double>(small_cfg(), 3);
  efnet::Rng rng(5);
  Tensor<double> rgb = random_image(rng, 3, 64);
  Tensor<double> thermal = random_image(rng, 1, 32);
  REQUIRE_THROWS_AS(efnet::forward(m, rgb, thermal), efnet::ShapeError);
  Tensor<double> rgb32 = random_image(rng, 3, 32);
  Tensor<double> thm64 = random_image(rng, 1, 64);
  REQUIRE_THROWS_AS(efnet::forward(m, rgb32, thm64), efnet::ShapeError);
}

TEST_CASE("every fusion/position/decoder/tau cell builds and runs at 64x64") {
  efnet::Rng rng(107);
  Tensor<double> rgb = random_image(rng, 3, 64);
  Tensor<double> thermal = random_image(rng, 1, 64);
  const efnet::FusionMode fusions[] = {efnet::FusionMode::kMif, efnet::FusionMode::kAdd,
                                       efnet::FusionMode::kCat};
  const efnet::PositionMode positions[] = {efnet::PositionMode::kNone, efnet::PositionMode::kPe,
                                           efnet::PositionMode::kPce};
  const efnet::DecoderMode decoders[] = {efnet::DecoderMode::kEuclid, efnet::DecoderMode::kMlp};
  int cell = 0;
  for (auto f : fusions)
    for (auto p : positions)
      for (auto d : decoders)
        for (bool sym : {false, true}) {
          ModelConfig cfg = small_cfg();
          cfg.resolution = 64;
          cfg.fusion = f;
          cfg.position = p;
          cfg.decoder = d;
          cfg.symmetric_tau = sym;
          // exercise the pooling baseline on half the cells
          cfg.downsample = (cell++ % 2 == 0) ? efnet::DownsampleMode::kDbtc
                                             : efnet::DownsampleMode::kPool;
          auto m = efnet::build_model<double>(cfg, 11);
          efnet::SegPrediction<double> pred = efnet::forward(m, rgb, thermal);
          REQUIRE(pred.probs.extent(0) == 3);
          REQUIRE(pred.probs.extent(1) == 16);
          for (std::size_t i = 0; i < pred.probs.numel(); ++i)
            REQUIRE(std::isfinite(pred.probs[i]));
          for (std::size_t px = 0; px < 16 * 16; ++px) {
            double sum = 0.0;
            for (std::size_t k = 0; k < 3; ++k) sum += pred.probs[k * 256 + px];
            REQUIRE(sum == Approx(1.0).margin(1e-6));
          }
          for (std::size_t px = 0; px < 64 * 64; ++px) {
            double sum = 0.0;
            for (std::size_t k = 0; k < 3; ++k) sum += pred.probs_full[k * 64 * 64 + px];
            REQUIRE(sum == Approx(1.0).margin(1e-6));
          }
        }
  REQUIRE(cell == 36);
}

TEST_CASE("distinct fusion baselines produce distinct finite outputs") {
  efnet::Rng rng(109);
  Tensor<double> rgb = random_image(rng, 3, 32);
  Tensor<double> thermal({1, 32, 32});
  for (std::size_t i = 0; i < thermal.numel(); ++i) thermal[i] = rgb[i];

  ModelConfig cfg = small_cfg();
  cfg.fusion = efnet::FusionMode::kAdd;
  auto ma = efnet::build_model<double>(cfg, 13);
  cfg.fusion = efnet::FusionMode::kCat;
  auto mc = efnet::build_model<double>(cfg, 13);
  auto pa = efnet::forward(ma, rgb, thermal);
  auto pc = efnet::forward(mc, rgb, thermal);
  bool differ = false;
  for (std::size_t i = 0; i < pa.probs.numel(); ++i) {
    REQUIRE(std::isfinite(pa.probs[i]));
    REQUIRE(std::isfinite(pc.probs[i]));
    differ = differ || pa.probs[i] != pc.probs[i];
  }
  REQUIRE(differ);
}

TEST_CASE("token counts shrink by the cluster ratio at every stage") {
  auto m = efnet::build_model<double>(small_cfg(), 17);
  efnet::Rng rng(17);
  Tensor<double> rgb = random_image(rng, 3, 32);
  Tensor<double> thermal = random_image(rng, 1, 32);
  efnet::ForwardTrace<double> trace;
  efnet::forward(m, rgb, thermal, &trace);
  REQUIRE(trace.stage_tokens == std::vector<std::size_t>{64, 16, 4, 1});
  REQUIRE(trace.clusters.size() == 3);
  std::size_t expect = 64;
  for (const auto& cr : trace.clusters) {
    const std::size_t m_count = cr.centers.size();
    expect = (expect + 3) / 4;  // ceil(0.25 * N)
    REQUIRE(m_count == expect);
    std::vector<std::size_t> sizes(m_count, 0);
    for (std::size_t ci : cr.assignment) ++sizes[ci];
    for (std::size_t s : sizes) REQUIRE(s >= 1);
  }
}

TEST_CASE("checkpoint round-trip reproduces the forward pass bitwise") {
  const std::string path = temp_path("roundtrip");
  ModelConfig cfg = small_cfg();
  auto m = efnet::build_model<float>(cfg, 23);
  efnet::Rng rng(23);
  Tensor<float> rgb({3, 32, 32}), thermal({1, 32, 32});
  for (std::size_t i = 0; i < rgb.numel(); ++i) rgb[i] = static_cast<float>(rng.uniform());
  for (std::size_t i = 0; i < thermal.numel(); ++i) thermal[i] = static_cast<float>(rng.uniform());

  auto before = efnet::forward(m, rgb, thermal);
  efnet::save_checkpoint(m, path);
  auto loaded = efnet::load_checkpoint<float>(path);
  REQUIRE(loaded.cfg.channels == cfg.channels);
  REQUIRE(loaded.cfg.window == cfg.window);
  REQUIRE(loaded.params.size() == m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i)
    for (std::size_t j = 0; j < m.params[i].second.numel(); ++j)
      REQUIRE(loaded.params[i].second[j] == m.params[i].second[j]);
  auto after = efnet::forward(loaded, rgb, thermal);
  for (std::size_t i = 0; i < before.probs_full.numel(); ++i)
    REQUIRE(after.probs_full[i] == before.probs_full[i]);
  std::remove(path.c_str());
}

TEST_CASE("corrupted or mismatched checkpoints are rejected") {
  const std::string path = temp_path("corrupt");
  auto m = efnet::build_model<float>(small_cfg(), 29);
  efnet::save_checkpoint(m, path);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.put('X');  // clobber the magic
  }
  REQUIRE_THROWS_WITH(efnet::load_checkpoint<float>(path),
                      Catch::Matchers::ContainsSubstring("magic"));

  efnet::save_checkpoint(m, path);
  {
    // drop the tail: payload truncation must be reported with an offset
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    in.close();
    bytes.resize(bytes.size() / 2);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  REQUIRE_THROWS_WITH(efnet::load_checkpoint<float>(path),
                      Catch::Matchers::ContainsSubstring("byte offset"));

  efnet::save_checkpoint(m, path);
  ModelConfig other = small_cfg();
  other.classes = 5;
  auto m2 = efnet::build_model<float>(other, 29);
  REQUIRE_THROWS_AS(efnet::load_params(m2, efnet::read_container(path), path),
                    efnet::FormatError);

  REQUIRE_THROWS_AS(efnet::load_checkpoint<float>("no_such_file.bin"), efnet::FormatError);
  std::remove(path.c_str());
}

TEST_CASE("config text round-trips and rejects unknown keys with a line number") {
  ModelConfig cfg = small_cfg();
  cfg.fusion = efnet::FusionMode::kCat;
  cfg.position = efnet::PositionMode::kPe;
  cfg.tau = {0.1, 0.55, 0.9};
  cfg.symmetric_tau = true;
  const std::string text = efnet::config_to_text(cfg);
  ModelConfig back;
  efnet::parse_config_text(text, back);
  REQUIRE(efnet::config_to_text(back) == text);

  ModelConfig junk;
  REQUIRE_THROWS_WITH(efnet::parse_config_text("channels = 8,8,8,8\nbogus = 1\n", junk),
                      Catch::Matchers::ContainsSubstring("line 2"));
  REQUIRE_THROWS_AS(efnet::parse_config_text("fusion = warp\n", junk), efnet::ConfigError);
  REQUIRE_THROWS_AS(efnet::parse_config_text("tau = 0.3,0.7\n", junk), efnet::ConfigError);
}

TEST_CASE("gradients reach every live parameter and skip exactly the dead ones") {
  ModelConfig cfg = small_cfg();
  auto m = efnet::build_model<double>(cfg, 31);
  efnet::Rng rng(31);
  Tensor<double> rgb = random_image(rng, 3, 32);
  Tensor<double> thermal = random_image(rng, 1, 32);
  std::vector<int> labels(32 * 32);
  for (auto& l : labels) l = static_cast<int>(rng.range(3));

  m.zero_grads();
  {
    efnet::Graph<double> g;
    efnet::Graph<double>::Scope scope(g);
    auto pred = efnet::forward(m, rgb, thermal);
    Tensor<double> loss = efnet::cross_entropy(pred, labels);
    g.backward(loss);
  }

  std::vector<std::string> dead;
  for (const auto& [name, why] : efnet::expected_zero_grad_params(m)) dead.push_back(name);
  for (const auto& [name, t] : m.params) {
    bool any = false;
    for (std::size_t i = 0; i < t.numel(); ++i) any = any || t.grad()[i] != 0.0;
    const bool listed = std::find(dead.begin(), dead.end(), name) != dead.end();
    INFO(name);
    REQUIRE(any == !listed);
  }
}

TEST_CASE("forward regression checksum") {
  ModelConfig cfg;  // library defaults, 32x32
  auto m = efnet::build_model<double>(cfg, 5);
  efnet::Rng rng(99);
  Tensor<double> rgb({3, 32, 32}), thermal({1, 32, 32});
  for (std::size_t i = 0; i < rgb.numel(); ++i) rgb[i] = rng.uniform();
  for (std::size_t i = 0; i < thermal.numel(); ++i) thermal[i] = rng.uniform();
  auto pred = efnet::forward(m, rgb, thermal);
  double checksum = 0.0;
  for (std::size_t i = 0; i < pred.probs_full.numel(); ++i)
    checksum += pred.probs_full[i] * static_cast<double>(i % 7 + 1);
  // recorded from the first verified run of this configuration
  REQUIRE(checksum == Approx(4094.97066438864703741).margin(1e-9));
}
