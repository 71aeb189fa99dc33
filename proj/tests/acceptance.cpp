// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// fail. Needs the path to the CLI binary as its only argument, since several
// criteria exercise the command-line workflows end to end.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "iic/checkpoint.hpp"
#include "iic/config_file.hpp"
#include "iic/tasks.hpp"
#include "iic/training.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"

namespace fs = std::filesystem;
using iic::Tensor;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
  std::cout << "criterion " << criterion << ": " << (pass ? "PASS" : "FAIL") << " — "
            << detail << std::endl;
  if (!pass) ++g_failures;
}

std::string g_cli;

int run_cli(const std::string& args, const std::string& log_file = "/dev/null") {
  const std::string cmd = g_cli + " " + args + " > " + log_file + " 2>&1";
  const int status = std::system(cmd.c_str());
  return status < 0 ? -1 : WEXITSTATUS(status);
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// last "mean" row of an eval report -> column name to value
std::map<std::string, double> read_report_mean(const fs::path& p) {
  std::ifstream in(p);
  std::string header, line, mean_line;
  std::getline(in, header);
  while (std::getline(in, line))
    if (line.rfind("mean,", 0) == 0) mean_line = line;
  std::map<std::string, double> out;
  std::stringstream hs(header), ms(mean_line);
  std::string h, m;
  while (std::getline(hs, h, ',') && std::getline(ms, m, ','))
    if (h != "sample_id") out[h] = std::stod(m);
  return out;
}

// metrics.csv total column at a given iteration
double read_metric_total(const fs::path& p, int iteration) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::stringstream ls(line);
    std::string field;
    std::getline(ls, field, ',');
    if (std::stoi(field) != iteration) continue;
    for (int i = 0; i < 4; ++i) std::getline(ls, field, ',');
    return std::stod(field);
  }
  throw std::runtime_error("iteration not found in metric log");
}

// ---- criterion 1: strict core invertibility ---------------------------------

void criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  int combo = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed, ++combo) {
    const bool down = (combo / 6) % 2 == 1;
    const auto kind = (combo / 3) % 2 == 0 ? iic::DownscaleKind::haar
                                           : iic::DownscaleKind::shuffle;
    const int blocks[] = {1, 8, 32};
    iic::NetworkConfig cfg;
    cfg.images = 3;
    cfg.channels = 3;
    cfg.height = 16;
    cfg.width = 16;
    cfg.downscale = down;
    cfg.downscale_kind = kind;
    cfg.coupling_blocks = blocks[combo % 3];
    cfg.dense = {2, 4, 0.2, 3};
    if (combo == 11) combo = -1;  // cycle through all 12 combinations

    std::mt19937_64 rng(seed);
    iic::ParameterStore store;
    iic::IICNet net(cfg, store, rng);
    // deep stacks need modest weights to keep activations in range
    iic::randomize_parameters(store, rng, 0.02);
    Tensor x = Tensor::randn({cfg.stacked_channels(), 16, 16}, rng);
    worst = std::max(worst, net.roundtrip_core_check(x));
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report(1, worst <= 1e-8 && secs < 30.0,
         "max roundtrip error " + std::to_string(worst) + " over 100 seeds (tol 1e-8), " +
             std::to_string(secs) + " s (limit 30)");
}

// ---- criterion 2: zero-init identity ----------------------------------------

void criterion_2() {
  std::mt19937_64 rng(7);
  bool pass = true;
  std::string detail;

  // coupling blocks with zero-initialized subnet outputs are exact identities
  {
    iic::ParameterStore store;
    iic::CouplingBlock block(store, "b", 6, 3, {2, 4, 0.2, 3}, rng);
    Tensor x = Tensor::randn({6, 12, 12}, rng);
    Tensor y = block.forward(x);
    double worst = 0.0;
    for (int i = 0; i < x.size(); ++i)
      worst = std::max(worst, std::fabs(y.data()[i] - x.data()[i]));
    pass = pass && worst == 0.0;
    detail = "coupling identity error " + std::to_string(worst);
  }

  // K=1, K_e=1, no downscale, no quantization: embed then restore is identity
  {
    iic::NetworkConfig cfg;
    cfg.images = 1;
    cfg.channels = 3;
    cfg.height = 12;
    cfg.width = 12;
    cfg.coupling_blocks = 4;
    cfg.dense = {2, 4, 0.2, 3};
    iic::ParameterStore store;
    iic::IICNet net(cfg, store, rng);
    iic::ImageStack stack;
    stack.images.push_back(Tensor::uniform({3, 12, 12}, rng, 0.0, 1.0));
    auto res = net.embed(stack, iic::QuantizeMode::test, rng);
    Tensor back = net.restore_stacked(res.raw.detach());
    double worst = 0.0;
    for (int i = 0; i < back.size(); ++i)
      worst = std::max(worst,
                       std::fabs(back.data()[i] - stack.images[0].data()[i]));
    pass = pass && worst <= 1e-12;
    detail += ", unquantized K=1 roundtrip error " + std::to_string(worst) +
              " (tol 1e-12)";
  }
  report(2, pass, detail);
}

// ---- criterion 3: gradient correctness --------------------------------------

void criterion_3() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(11);
  iic::NetworkConfig cfg;
  cfg.images = 2;
  cfg.channels = 3;
  cfg.height = 8;
  cfg.width = 8;
  cfg.coupling_blocks = 2;
  cfg.dense = {1, 3, 0.2, 3};
  cfg.relation_features = 3;
  iic::ParameterStore store;
  iic::IICNet net(cfg, store, rng);
  iic::randomize_parameters(store, rng, 0.15);

  iic::ImageStack stack;
  for (int i = 0; i < 2; ++i)
    stack.images.push_back(Tensor::uniform({3, 8, 8}, rng, 0.0, 1.0));
  Tensor noise = Tensor::uniform({3, 8, 8}, rng, -0.5 / 255.0, 0.5 / 255.0);
  iic::LossWeights w;

  // all three loss terms active, frozen quantization noise so finite
  // differences see a smooth function
  auto total = [&]() {
    std::mt19937_64 dummy(0);
    auto res = net.embed(stack, iic::QuantizeMode::test, dummy);
    Tensor noisy = iic::quantize_with_noise(res.raw, noise);
    auto restored = iic::unstack_images(net.restore_stacked(noisy), 2);
    for (auto& img : restored) img = iic::clamp(img, 0.0, 1.0);
    iic::LossParts parts{iic::loss_embedding(res.raw, net.reference(stack)),
                         iic::loss_frequency(res.raw, net.reference(stack)),
                         iic::loss_restoration(restored, stack.images)};
    return iic::loss_total(parts, w);
  };

  iic::backward(total());
  double worst = 0.0;
  for (const auto& name : store.names()) {
    Tensor& p = store.at(name);
    std::vector<double> base(p.data(), p.data() + p.size());
    auto eval = [&](const std::vector<double>& vals) {
      for (int i = 0; i < p.size(); ++i) p.data()[i] = vals[i];
      return total().item();
    };
    worst = std::max(worst, oracle::gradcheck_leaf(p, eval, p.grad()));
    for (int i = 0; i < p.size(); ++i) p.data()[i] = base[i];
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report(3, worst <= 1e-4 && secs < 60.0,
         "max gradient relative error " + std::to_string(worst) + " (tol 1e-4), " +
             std::to_string(secs) + " s (limit 60)");
}

// ---- criterion 4: DFT oracle equivalence ------------------------------------

void criterion_4() {
  std::mt19937_64 rng(13);
  double worst_bin = 0.0, worst_energy = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> dim(2, 16);
    const int h = dim(rng), w = dim(rng);
    Tensor x = Tensor::randn({1, h, w}, rng);
    std::vector<double> vals(x.data(), x.data() + x.size());
    auto full = oracle::dft2_full(vals, h, w);
    Tensor packed = iic::dft2_onesided_packed(x);

    const int wb = w / 2 + 1;
    double scale = 0.0;
    for (int v = 0; v < h; ++v)
      for (int u = 0; u < w; ++u)
        scale = std::max(scale, std::hypot(full[v * w + u].real(), full[v * w + u].imag()));
    scale = std::max(scale, 1e-30);
    for (int v = 0; v < h; ++v)
      for (int u = 0; u < wb; ++u) {
        const double re = packed.data()[v * wb + u];
        const double im = packed.data()[(h + v) * wb + u];
        worst_bin = std::max({worst_bin,
                              std::fabs(re - full[v * w + u].real()) / scale,
                              std::fabs(im - full[v * w + u].imag()) / scale});
      }

    double spec = 0.0, spatial = 0.0;
    for (int i = 0; i < h * w; ++i) {
      spec += std::norm(full[i]);
      spatial += x.data()[i] * x.data()[i];
    }
    worst_energy =
        std::max(worst_energy, std::fabs(spec - h * w * spatial) / (h * w * spatial));
  }
  report(4, worst_bin <= 1e-10 && worst_energy <= 1e-10,
         "max bin error " + std::to_string(worst_bin) + ", energy identity error " +
             std::to_string(worst_energy) + " (tol 1e-10)");
}

// ---- criterion 5: quantization and carrier exactness ------------------------

void criterion_5(const fs::path& dir) {
  std::mt19937_64 rng(17);
  bool pass = true;
  std::string detail;

  // rounding stays within half a level of the clamped value
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor e = Tensor::uniform({3, 8, 8}, rng, -0.3, 1.3);
    Tensor q = iic::quantize(e, iic::QuantizeMode::test, rng);
    for (int i = 0; i < e.size(); ++i) {
      const double c = std::min(1.0, std::max(0.0, e.data()[i]));
      worst = std::max(worst, std::fabs(q.data()[i] - c));
    }
  }
  pass = pass && worst <= 0.5 / 255.0 + 1e-15;
  detail = "max |q - clamp(e)| = " + std::to_string(worst * 255.0) + "/255";

  // quantized embedding survives PNG write -> read bit-exactly
  {
    Tensor e = Tensor::uniform({3, 16, 16}, rng, 0.0, 1.0);
    Tensor q = iic::quantize(e, iic::QuantizeMode::test, rng);
    iic::png_write((dir / "c5.png").string(), q);
    Tensor back = iic::png_read((dir / "c5.png").string());
    for (int i = 0; i < q.size(); ++i) pass = pass && back.data()[i] == q.data()[i];
    detail += ", PNG round-trip bit-exact";
  }

  // the CLI embed -> PNG -> restore path equals the in-process path
  {
    iic::NetworkConfig cfg;
    cfg.images = 2;
    cfg.channels = 3;
    cfg.height = 16;
    cfg.width = 16;
    cfg.coupling_blocks = 2;
    cfg.dense = {2, 4, 0.2, 3};
    std::mt19937_64 nrng(5);
    iic::ParameterStore store;
    iic::IICNet net(cfg, store, nrng);
    iic::randomize_parameters(store, nrng, 0.05);
    iic::checkpoint_save((dir / "c5.iicn").string(), cfg, store);

    iic::ImageStack stack;
    for (int k = 0; k < 2; ++k) {
      Tensor img = synthetic::make_image(16, 16, nrng);
      iic::png_write((dir / ("c5_in" + std::to_string(k) + ".png")).string(), img);
      stack.images.push_back(img);
    }
    const int e1 = run_cli("embed --ckpt " + (dir / "c5.iicn").string() + " --inputs " +
                           (dir / "c5_in0.png").string() + " " +
                           (dir / "c5_in1.png").string() + " --out " +
                           (dir / "c5_emb.png").string());
    const int e2 = run_cli("restore --ckpt " + (dir / "c5.iicn").string() +
                           " --embedding " + (dir / "c5_emb.png").string() + " --out " +
                           (dir / "c5_out").string());
    pass = pass && e1 == 0 && e2 == 0;

    std::mt19937_64 qrng(0);
    auto res = net.embed(stack, iic::QuantizeMode::test, qrng);
    Tensor cli_emb = iic::png_read((dir / "c5_emb.png").string());
    for (int i = 0; i < res.quantized.size(); ++i)
      pass = pass && cli_emb.data()[i] == res.quantized.data()[i];

    auto restored = net.restore(iic::EmbeddingImage{res.quantized.detach(), true});
    for (int k = 0; k < 2; ++k) {
      // in-process result pushed through the same 8-bit write as the CLI output
      char name[32];
      std::snprintf(name, sizeof(name), "restored_%02d.png", k + 1);
      iic::png_write((dir / "c5_mine.png").string(), restored[k]);
      auto mine = read_bytes(dir / "c5_mine.png");
      auto theirs = read_bytes(dir / "c5_out" / name);
      pass = pass && !mine.empty() && mine == theirs;
    }
    detail += ", CLI embed->restore matches in-process bit-exactly";
  }
  report(5, pass, detail);
}

// ---- criterion 6: channel squeeze contracts ---------------------------------

void criterion_6() {
  std::mt19937_64 rng(19);
  bool pass = true;

  Tensor e = Tensor::randn({3, 8, 8}, rng);
  Tensor back = iic::channel_squeeze_backward(e, 4);
  Tensor fwd = iic::channel_squeeze_forward(back, 3);
  for (int i = 0; i < e.size(); ++i) pass = pass && fwd.data()[i] == e.data()[i];

  Tensor v = iic::channel_squeeze_backward(e, 5);  // five identical groups
  Tensor m = iic::channel_squeeze_forward(v, 3);
  for (int i = 0; i < e.size(); ++i) pass = pass && m.data()[i] == e.data()[i];

  bool rejected = false;
  try {
    iic::NetworkConfig cfg;
    cfg.images = 2;
    cfg.channels = 3;  // M = 6
    cfg.embed_channels = 4;
    cfg.height = 8;
    cfg.width = 8;
    cfg.validate();
  } catch (const std::invalid_argument&) {
    rejected = true;
  }
  pass = pass && rejected;
  report(6, pass,
         "forward(backward) exact, identical-group mean exact, M % C_e != 0 rejected");
}

// ---- criteria 7-9: training smoke, ablations, determinism -------------------

struct SmokeSetup {
  fs::path dir, train_manifest, held_manifest, config;
};

SmokeSetup write_smoke_corpus(const fs::path& dir) {
  fs::create_directories(dir);
  auto corpus = synthetic::make_corpus(64, 32, 32, 1234);
  for (int i = 0; i < 64; ++i) {
    char name[16];
    std::snprintf(name, sizeof(name), "img%02d.png", i);
    iic::png_write((dir / name).string(), corpus[i]);
  }
  SmokeSetup s{dir, dir / "train_manifest.txt", dir / "held_manifest.txt",
               dir / "smoke.ini"};
  std::ofstream tm(s.train_manifest), hm(s.held_manifest);
  for (int i = 0; i + 1 < 64; i += 2) {
    char a[16], b[16];
    std::snprintf(a, sizeof(a), "img%02d.png", i);
    std::snprintf(b, sizeof(b), "img%02d.png", i + 1);
    (i < 56 ? tm : hm) << "hiding " << a << " " << b << "\n";
  }
  std::ofstream cf(s.config);
  cf << "[network]\n"
        "images = 2\nchannels = 3\nheight = 24\nwidth = 24\n"
        "coupling_blocks = 3\ndense_layers = 2\ndense_growth = 8\n"
        "relation_features = 8\n"
        "[train]\niterations = 2000\nbatch_size = 2\nseed = 0\nlr = 0.002\n"
        "[data]\nmanifest = " +
            s.train_manifest.string() + "\n";
  return s;
}

void criteria_7_8(const SmokeSetup& s) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path full = s.dir / "run_full";
  const int ec = run_cli("train --config " + s.config.string() + " --out " +
                             full.string(),
                         (s.dir / "train_full.log").string());
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (ec != 0) {
    report(7, false, "training exited with code " + std::to_string(ec));
    report(8, false, "skipped: full arm failed");
    return;
  }

  run_cli("eval --ckpt " + (full / "checkpoint.iicn").string() + " --manifest " +
          s.held_manifest.string() + " --report " + (full / "report.csv").string());
  const auto mean = read_report_mean(full / "report.csv");
  const double first = read_metric_total(full / "metrics.csv", 1);
  const double last = read_metric_total(full / "metrics.csv", 2000);
  const bool pass7 = mean.at("res_psnr") >= 28.0 && mean.at("emb_psnr") >= 30.0 &&
                     last < 0.1 * first && secs <= 900.0;
  report(7, pass7,
         "held-out restored " + std::to_string(mean.at("res_psnr")) +
             " dB (>=28), embedding " + std::to_string(mean.at("emb_psnr")) +
             " dB (>=30), loss " + std::to_string(last) + " vs initial " +
             std::to_string(first) + " (ratio " + std::to_string(last / first) +
             ", limit 0.1), " + std::to_string(secs) + " s (limit 900)");

  const fs::path norel = s.dir / "run_norel", nofreq = s.dir / "run_nofreq";
  const int e1 = run_cli("train --config " + s.config.string() + " --out " +
                             norel.string() + " --no-relation",
                         (s.dir / "train_norel.log").string());
  const int e2 = run_cli("train --config " + s.config.string() + " --out " +
                             nofreq.string() + " --no-freq-loss",
                         (s.dir / "train_nofreq.log").string());
  bool pass8 = e1 == 0 && e2 == 0;
  double nofreq_emb = 0.0;
  if (pass8) {
    run_cli("eval --ckpt " + (nofreq / "checkpoint.iicn").string() + " --manifest " +
            s.held_manifest.string() + " --report " + (nofreq / "report.csv").string());
    nofreq_emb = read_report_mean(nofreq / "report.csv").at("emb_psnr");
    pass8 = nofreq_emb <= mean.at("emb_psnr");
  }
  report(8, pass8,
         "--no-relation exit " + std::to_string(e1) + ", --no-freq-loss exit " +
             std::to_string(e2) + "; no-freq embedding " + std::to_string(nofreq_emb) +
             " dB <= full " + std::to_string(mean.at("emb_psnr")) + " dB");
}

void criterion_9(const SmokeSetup& s) {
  // identical short runs must agree byte for byte
  std::ofstream cf(s.dir / "det.ini");
  cf << "[network]\nimages = 2\nchannels = 3\nheight = 16\nwidth = 16\n"
        "coupling_blocks = 2\ndense_layers = 2\ndense_growth = 4\n"
        "[train]\niterations = 40\nseed = 7\n"
        "[data]\nmanifest = " +
            s.train_manifest.string() + "\n";
  cf.close();
  const fs::path a = s.dir / "det_a", b = s.dir / "det_b";
  const int e1 = run_cli("train --config " + (s.dir / "det.ini").string() + " --out " +
                         a.string());
  const int e2 = run_cli("train --config " + (s.dir / "det.ini").string() + " --out " +
                         b.string());
  const bool same_ckpt = read_bytes(a / "checkpoint.iicn") == read_bytes(b / "checkpoint.iicn");
  const bool same_log = read_bytes(a / "metrics.csv") == read_bytes(b / "metrics.csv");
  const bool nonempty = !read_bytes(a / "checkpoint.iicn").empty();
  report(9, e1 == 0 && e2 == 0 && nonempty && same_ckpt && same_log,
         std::string("checkpoints byte-identical: ") + (same_ckpt ? "yes" : "no") +
             ", metric logs byte-identical: " + (same_log ? "yes" : "no"));
}

} // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: acceptance <path-to-cli-binary>\n";
    return 2;
  }
  g_cli = argv[1];
  const fs::path dir = fs::temp_directory_path() / "iic_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);

  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5(dir);
  criterion_6();
  const SmokeSetup smoke = write_smoke_corpus(dir / "smoke");
  criteria_7_8(smoke);
  criterion_9(smoke);

  fs::remove_all(dir);
  std::cout << (g_failures == 0 ? "all criteria passed"
                                : std::to_string(g_failures) + " criteria failed")
            << std::endl;
  return g_failures == 0 ? 0 : 1;
}
