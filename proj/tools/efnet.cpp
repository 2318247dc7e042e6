#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "efnet/common.hpp"
#include "efnet/metrics.hpp"
#include "efnet/model.hpp"
#include "efnet/netpbm.hpp"
#include "efnet/synthetic.hpp"
#include "efnet/train.hpp"
#include "efnet/verify.hpp"

namespace {

using Scalar = float;  // training/inference precision; oracles run in double

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw efnet::FormatError(path + ": cannot open");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int run_verify() {
  efnet::SuiteResult res = efnet::run_verification();
  std::cout << res.to_text();
  return res.ok() ? 0 : 1;
}

int run_cluster_demo(std::size_t n, double tau, std::size_t k, double ratio, std::uint64_t seed) {
  if (n < 2) throw efnet::ContractError("cluster-demo: --n must be >= 2");
  efnet::Rng rng(seed);
  efnet::TokenSet<double> ts = efnet::random_token_set<double>(n, 8, rng);
  efnet::DbtcParams<double> dp{efnet::Tensor<double>({8, 1}, 0.0),
                               efnet::Tensor<double>({1}, 0.0)};
  auto [out, cr] = efnet::cluster_downsample(ts, tau, std::min(k, n - 1), ratio,
                                             efnet::PixelCoordEncoding<double>::identity(), dp);
  const std::size_t m = cr.centers.size();
  std::cout << "tokens " << n << " -> clusters " << m << "  (tau=" << tau << " k=" << k
            << " ratio=" << ratio << " seed=" << seed << ")\n";
  std::cout << "centers:";
  for (std::size_t cidx : cr.centers) std::cout << ' ' << cidx;
  std::cout << '\n';
  std::vector<std::size_t> sizes(m, 0);
  for (std::size_t a : cr.assignment) ++sizes[a];
  std::cout << "cluster sizes:";
  for (std::size_t sz : sizes) std::cout << ' ' << sz;
  std::cout << '\n';
  std::cout << std::setw(5) << "id" << std::setw(12) << "density" << std::setw(12) << "delta"
            << std::setw(12) << "score" << '\n';
  for (std::size_t i = 0; i < std::min<std::size_t>(n, 10); ++i) {
    std::cout << std::setw(5) << i << std::fixed << std::setprecision(5) << std::setw(12)
              << cr.density[i] << std::setw(12) << cr.separation[i] << std::setw(12) << cr.score[i]
              << std::defaultfloat << '\n';
  }
  efnet::EquivalenceStats st =
      efnet::clustering_equivalence_case<double>(n, 8, tau, std::min(k, n - 1), ratio, seed, false);
  std::cout << "oracle agreement: max real gap " << std::scientific << std::setprecision(2)
            << st.max_real_err << std::defaultfloat
            << (st.integers_match ? ", integer outputs identical\n"
                                  : ", INTEGER OUTPUT MISMATCH\n");
  return st.integers_match ? 0 : 1;
}

int run_gen(const std::string& out_dir, std::size_t n, std::size_t hw, std::size_t k,
            std::uint64_t seed) {
  std::filesystem::create_directories(out_dir);
  auto samples = efnet::gen_synthetic<Scalar>(n, hw, hw, k, seed);
  efnet::write_dataset(out_dir, samples);
  std::size_t thermal_only = 0, shapes = 0;
  for (const auto& s : samples) {
    thermal_only += s.thermal_only_shapes;
    shapes += s.shapes;
  }
  std::cout << "wrote " << samples.size() << " samples (" << hw << "x" << hw << ", " << k
            << " classes) to " << out_dir << "; " << thermal_only << "/" << shapes
            << " shapes thermal-only\n";
  return 0;
}

int run_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_ckpt) {
  efnet::ModelConfig mc;
  efnet::TrainConfig tc;
  efnet::parse_full_config(read_text_file(config_path), mc, tc);
  auto all = efnet::load_dataset<Scalar>(data_dir);
  const std::size_t held = std::max<std::size_t>(1, all.size() / 5);
  if (all.size() < 2) throw efnet::ContractError("train: need at least 2 samples to hold out");
  std::vector<efnet::Sample<Scalar>> train_set(all.begin(), all.end() - held);
  std::vector<efnet::Sample<Scalar>> test_set(all.end() - held, all.end());
  for (const auto& s : all) {
    if (s.h != mc.resolution || s.w != mc.resolution) {
      throw efnet::FormatError(data_dir + ": sample extent " + std::to_string(s.w) + "x" +
                               std::to_string(s.h) + " does not match configured resolution " +
                               std::to_string(mc.resolution));
    }
  }
  efnet::Model<Scalar> model = efnet::build_model<Scalar>(mc, tc.seed);
  std::cout << "training on " << train_set.size() << " samples, holding out " << test_set.size()
            << " (" << efnet::count_params(model) << " parameters)\n";
  efnet::MetricReport rep = efnet::train_toy(model, train_set, test_set, tc,
                                             [&tc](std::size_t step, double loss) {
                                               if ((step + 1) % 50 == 0 || step + 1 == tc.steps) {
                                                 std::cout << "step " << std::setw(5) << step + 1
                                                           << "  loss " << std::fixed
                                                           << std::setprecision(4) << loss
                                                           << std::defaultfloat << '\n';
                                               }
                                             });
  std::cout << "first loss " << rep.loss_curve.front() << ", final loss " << rep.loss_curve.back()
            << '\n';
  std::cout << "held-out mIoU " << std::fixed << std::setprecision(4) << rep.miou << ", mAcc "
            << rep.macc << std::defaultfloat << '\n';
  efnet::save_checkpoint(model, out_ckpt);
  std::cout << "checkpoint written to " << out_ckpt << '\n';
  return 0;
}

int run_infer(const std::string& ckpt, const std::string& rgb_path, const std::string& thm_path,
              const std::string& out_path) {
  efnet::Model<Scalar> model = efnet::load_checkpoint<Scalar>(ckpt);
  efnet::Tensor<Scalar> rgb = efnet::read_ppm<Scalar>(rgb_path);
  efnet::Tensor<Scalar> thermal = efnet::read_pgm<Scalar>(thm_path);
  efnet::SegPrediction<Scalar> pred = efnet::forward(model, rgb, thermal);
  std::vector<int> labels = efnet::predicted_labels(pred.probs_full);
  efnet::write_pgm_labels(out_path, labels, model.cfg.resolution, model.cfg.resolution);
  std::cout << "prediction written to " << out_path << '\n';
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data_dir) {
  efnet::Model<Scalar> model = efnet::load_checkpoint<Scalar>(ckpt);
  auto samples = efnet::load_dataset<Scalar>(data_dir);
  std::vector<std::vector<int>> preds, labels;
  for (const auto& s : samples) {
    if (s.h != model.cfg.resolution || s.w != model.cfg.resolution) {
      throw efnet::FormatError(data_dir + ": sample extent " + std::to_string(s.w) + "x" +
                               std::to_string(s.h) + " does not match checkpoint resolution " +
                               std::to_string(model.cfg.resolution));
    }
    efnet::SegPrediction<Scalar> pred = efnet::forward(model, s.rgb, s.thermal);
    preds.push_back(efnet::predicted_labels(pred.probs_full));
    labels.push_back(s.labels);
  }
  efnet::MetricReport rep = efnet::eval_miou(preds, labels, model.cfg.classes);
  std::cout << samples.size() << " samples, " << model.cfg.classes << " classes\n";
  for (std::size_t c = 0; c < rep.iou.size(); ++c) {
    std::cout << "class " << c << ": IoU ";
    if (rep.iou[c] < 0) std::cout << "n/a";
    else std::cout << std::fixed << std::setprecision(4) << rep.iou[c] << std::defaultfloat;
    std::cout << ", Acc ";
    if (rep.acc[c] < 0) std::cout << "n/a";
    else std::cout << std::fixed << std::setprecision(4) << rep.acc[c] << std::defaultfloat;
    std::cout << '\n';
  }
  std::cout << "mIoU " << std::fixed << std::setprecision(4) << rep.miou << ", mAcc " << rep.macc
            << std::defaultfloat << '\n';
  return 0;
}

int run_bench(const std::string& sizes_csv) {
  std::vector<std::size_t> sizes;
  std::stringstream ss(sizes_csv);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    try {
      const long long v = std::stoll(part);
      if (v <= 0) throw std::invalid_argument(part);
      sizes.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw efnet::ConfigError("--sizes: expected positive integers, got '" + part + "'");
    }
  }
  if (sizes.empty()) throw efnet::ConfigError("--sizes: no sizes given");
  efnet::ModelConfig cfg;
  efnet::BenchReport rep = efnet::bench(cfg, sizes);
  std::cout << rep.text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"efnet: early-fusion RGB-thermal segmentation toolkit"};
  app.require_subcommand(1);
  int code = 0;

  app.add_subcommand("verify", "run the self-verification suites")->callback([&] {
    code = run_verify();
  });

  auto* demo = app.add_subcommand("cluster-demo", "cluster one random token set and print it");
  std::size_t demo_n = 64, demo_k = 5;
  double demo_tau = 0.5, demo_ratio = 0.25;
  std::uint64_t demo_seed = 1;
  demo->add_option("--n", demo_n, "token count");
  demo->add_option("--tau", demo_tau, "spatial weight in [0,1]");
  demo->add_option("--k", demo_k, "density neighborhood size");
  demo->add_option("--ratio", demo_ratio, "kept-cluster ratio in (0,1]");
  demo->add_option("--seed", demo_seed, "rng seed");
  demo->callback([&] { code = run_cluster_demo(demo_n, demo_tau, demo_k, demo_ratio, demo_seed); });

  auto* gen = app.add_subcommand("gen", "write a synthetic RGB-T dataset");
  std::string gen_out;
  std::size_t gen_n = 20, gen_hw = 32, gen_k = 3;
  std::uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n", gen_n, "sample count");
  gen->add_option("--hw", gen_hw, "square extent (multiple of 4)");
  gen->add_option("--k", gen_k, "class count incl. background");
  gen->add_option("--seed", gen_seed, "rng seed");
  gen->callback([&] { code = run_gen(gen_out, gen_n, gen_hw, gen_k, gen_seed); });

  auto* train = app.add_subcommand("train", "train on a dataset directory");
  std::string train_config, train_data, train_out;
  train->add_option("--config", train_config, "config file (key = value lines)")->required();
  train->add_option("--data", train_data, "dataset directory from `efnet gen`")->required();
  train->add_option("--out", train_out, "checkpoint path to write")->required();
  train->callback([&] { code = run_train(train_config, train_data, train_out); });

  auto* infer = app.add_subcommand("infer", "segment one RGB + thermal pair");
  std::string infer_ckpt, infer_rgb, infer_thm, infer_out = "pred.pgm";
  infer->add_option("--ckpt", infer_ckpt, "checkpoint path")->required();
  infer->add_option("--rgb", infer_rgb, "input PPM (P6)")->required();
  infer->add_option("--thermal", infer_thm, "input PGM (P5)")->required();
  infer->add_option("--out", infer_out, "output label PGM");
  infer->callback([&] { code = run_infer(infer_ckpt, infer_rgb, infer_thm, infer_out); });

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset directory");
  std::string eval_ckpt, eval_data;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->callback([&] { code = run_eval(eval_ckpt, eval_data); });

  auto* bench = app.add_subcommand("bench", "time clustering vs pooling downsample");
  std::string bench_sizes = "256,1024,4096";
  bench->add_option("--sizes", bench_sizes, "comma-separated token counts");
  bench->callback([&] { code = run_bench(bench_sizes); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const efnet::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 2;
  } catch (const efnet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return code;
}
