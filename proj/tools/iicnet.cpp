// Command-line interface: train, embed, restore, verify, eval.
//
// Exit codes: 0 success, 1 property failure, 2 config/usage error,
// 3 data error, 4 training divergence.

#include <CLI11.hpp>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "iic/checkpoint.hpp"
#include "iic/config_file.hpp"
#include "iic/tasks.hpp"
#include "iic/training.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitProperty = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

// fixed-format float for logs and reports so identical runs give identical bytes
std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string fmt_metric(double v) {
  return std::isinf(v) ? std::string("inf") : fmt(v);
}

iic::ImageStack to_stack(const std::vector<std::string>& files, int reference_index) {
  iic::ImageStack stack;
  for (const auto& f : files) stack.images.push_back(iic::png_read(f));
  stack.reference_index = reference_index;
  return stack;
}

// parameters are all convolutional, so a checkpoint trained at one crop size
// applies to any compatible image size; only H/W in the config change
iic::NetworkConfig with_size(iic::NetworkConfig cfg, int h, int w) {
  cfg.height = h;
  cfg.width = w;
  return cfg;
}

struct LoadedNet {
  iic::ParameterStore store;
  std::unique_ptr<iic::IICNet> net;
  iic::NetworkConfig config;
};

LoadedNet load_net(const std::string& ckpt_path, int h, int w) {
  auto ck = iic::checkpoint_load(ckpt_path);
  LoadedNet ln;
  ln.config = with_size(ck.config, h, w);
  std::mt19937_64 rng(0);  // overwritten by the checkpoint below
  ln.net = std::make_unique<iic::IICNet>(ln.config, ln.store, rng);
  ck.apply(ln.store);
  return ln;
}

double mean_metric(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config_path, out_dir;
  std::int64_t seed_override = -1;
  bool no_relation = false, no_freq_loss = false;
};

int cmd_train(const TrainArgs& args) {
  iic::RunConfig cfg = iic::load_run_config(args.config_path);
  if (args.seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed_override);
  if (args.no_relation) cfg.net.disable_relation = true;
  if (args.no_freq_loss) cfg.weights.frequency = 0.0;
  if (cfg.manifest.empty())
    throw iic::ConfigError("config: [data] manifest is required for training");

  auto samples = iic::load_manifest(cfg.manifest);
  if (samples.empty()) throw iic::ManifestError("training manifest lists no samples");
  std::vector<iic::ImageStack> dataset;
  for (auto& s : samples) {
    if (static_cast<int>(s.stack.images.size()) != cfg.net.images)
      throw iic::ManifestError("sample image count does not match network config");
    for (const auto& img : s.stack.images)
      if (img.dim(0) != cfg.net.channels || img.dim(1) < cfg.net.height ||
          img.dim(2) < cfg.net.width)
        throw iic::ManifestError("sample image smaller than the training crop");
    dataset.push_back(std::move(s.stack));
  }

  std::filesystem::create_directories(args.out_dir);

  // effective configuration after command-line overrides
  std::cout << "effective config: images=" << cfg.net.images
            << " channels=" << cfg.net.channels << " crop=" << cfg.net.height << "x"
            << cfg.net.width << " blocks=" << cfg.net.coupling_blocks
            << " downscale=" << (cfg.net.downscale ? "on" : "off")
            << " relation=" << (cfg.net.disable_relation ? "off" : "on")
            << " lambda=(" << fmt(cfg.weights.embedding) << ","
            << fmt(cfg.weights.frequency) << "," << fmt(cfg.weights.restoration)
            << ") iterations=" << cfg.iterations << " seed=" << cfg.seed << "\n";

  std::mt19937_64 rng(cfg.seed);
  iic::ParameterStore store;
  iic::IICNet net(cfg.net, store, rng);

  std::ofstream log(args.out_dir + "/metrics.csv", std::ios::trunc);
  if (!log) throw iic::ConfigError("cannot write metric log in " + args.out_dir);
  log << "iteration,L_emb,L_freq,L_res,total\n";

  iic::TrainRunSpec spec = cfg.train_spec();
  const std::string ckpt_path = args.out_dir + "/checkpoint.iicn";
  iic::train(spec, dataset, net, store, [&](const iic::IterationRecord& r) {
    log << r.iteration << ',' << fmt(r.loss_embedding) << ',' << fmt(r.loss_frequency)
        << ',' << fmt(r.loss_restoration) << ',' << fmt(r.loss_total) << '\n';
    if (r.iteration == 1 || r.iteration % 100 == 0 || r.iteration == spec.iterations)
      std::cout << "iter " << r.iteration << " total " << fmt(r.loss_total) << "\n";
    if (cfg.checkpoint_interval > 0 && r.iteration % cfg.checkpoint_interval == 0)
      iic::checkpoint_save(args.out_dir + "/checkpoint_" + std::to_string(r.iteration) +
                               ".iicn",
                           cfg.net, store);
  });
  iic::checkpoint_save(ckpt_path, cfg.net, store);
  std::cout << "wrote " << ckpt_path << "\n";
  return kExitOk;
}

// ---- embed ------------------------------------------------------------------

int cmd_embed(const std::string& ckpt_path, const std::vector<std::string>& inputs,
              const std::string& out_path) {
  auto probe = iic::checkpoint_load(ckpt_path);
  if (static_cast<int>(inputs.size()) != probe.config.images) {
    std::cerr << "error: checkpoint expects " << probe.config.images
              << " input images, got " << inputs.size() << "\n";
    return kExitConfig;
  }
  iic::ImageStack stack = to_stack(inputs, probe.config.reference_index);
  const auto& first = stack.images.front();
  for (const auto& img : stack.images)
    if (img.shape() != first.shape() || img.dim(0) != probe.config.channels) {
      std::cerr << "error: input images must all be " << probe.config.channels
                << "-channel and equally sized\n";
      return kExitConfig;
    }

  LoadedNet ln = load_net(ckpt_path, first.dim(1), first.dim(2));
  std::mt19937_64 rng(0);
  auto res = ln.net->embed(stack, iic::QuantizeMode::test, rng);
  iic::png_write(out_path, res.quantized);
  std::cout << "embedding_psnr " << fmt_metric(iic::psnr(res.quantized, ln.net->reference(stack)))
            << "\n";
  std::cout << "wrote " << out_path << "\n";
  return kExitOk;
}

// ---- restore ----------------------------------------------------------------

int cmd_restore(const std::string& ckpt_path, const std::string& embedding_path,
                const std::string& out_dir, const std::vector<std::string>& refs) {
  auto probe = iic::checkpoint_load(ckpt_path);
  iic::Tensor e = iic::png_read(embedding_path);
  if (e.dim(0) != probe.config.embed_channels) {
    std::cerr << "error: embedding has " << e.dim(0) << " channels, config expects "
              << probe.config.embed_channels << "\n";
    return kExitConfig;
  }
  const int f = probe.config.downscale ? 2 : 1;
  LoadedNet ln = load_net(ckpt_path, e.dim(1) * f, e.dim(2) * f);

  auto restored = ln.net->restore(iic::EmbeddingImage{e, true});
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> written;
  for (size_t k = 0; k < restored.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "restored_%02zu.png", k + 1);
    written.push_back(out_dir + "/" + name);
    iic::png_write(written.back(), restored[k]);
  }
  std::cout << "wrote " << restored.size() << " images to " << out_dir << "\n";

  if (!refs.empty()) {
    if (refs.size() != restored.size()) {
      std::cerr << "error: --ref needs exactly " << restored.size() << " files\n";
      return kExitConfig;
    }
    std::cout << "image,psnr,ssim\n";
    for (size_t k = 0; k < restored.size(); ++k) {
      iic::Tensor ref = iic::png_read(refs[k]);
      std::cout << (k + 1) << ',' << fmt_metric(iic::psnr(restored[k], ref)) << ','
                << fmt_metric(iic::ssim(restored[k], ref)) << "\n";
    }
  }
  return kExitOk;
}

// ---- verify -----------------------------------------------------------------

int verify_invertibility(std::uint64_t seed, bool corrupt) {
  double worst = 0.0;
  for (bool down : {false, true})
    for (auto kind : {iic::DownscaleKind::haar, iic::DownscaleKind::shuffle})
      for (int blocks : {1, 8}) {
        iic::NetworkConfig cfg;
        cfg.images = 3;
        cfg.channels = 3;
        cfg.height = 16;
        cfg.width = 16;
        cfg.downscale = down;
        cfg.downscale_kind = kind;
        cfg.coupling_blocks = blocks;
        cfg.dense = {2, 4, 0.2, 3};
        std::mt19937_64 rng(seed * 1000 + blocks + (down ? 100 : 0) +
                            (kind == iic::DownscaleKind::haar ? 0 : 10));
        iic::ParameterStore store;
        iic::IICNet net(cfg, store, rng);
        iic::randomize_parameters(store, rng, 0.05);
        iic::Tensor x = iic::Tensor::randn({cfg.stacked_channels(), 16, 16}, rng);
        iic::Tensor v = net.core_forward(x);
        if (corrupt)  // negative-control hook: break the inverse's input
          v.data()[0] += 1e-3;
        iic::Tensor back = net.core_inverse(v);
        for (int i = 0; i < x.size(); ++i)
          worst = std::max(worst, std::fabs(back.data()[i] - x.data()[i]));
      }
  std::cout << "max roundtrip error " << fmt(worst) << " (tolerance 1e-8)\n";
  return worst <= 1e-8 ? kExitOk : kExitProperty;
}

int verify_gradcheck(std::uint64_t seed, bool corrupt) {
  iic::NetworkConfig cfg;
  cfg.images = 2;
  cfg.channels = 1;
  cfg.embed_channels = 1;
  cfg.height = 6;
  cfg.width = 6;
  cfg.coupling_blocks = 2;
  cfg.dense = {1, 2, 0.2, 3};
  cfg.relation_features = 2;
  std::mt19937_64 rng(seed);
  iic::ParameterStore store;
  iic::IICNet net(cfg, store, rng);
  iic::randomize_parameters(store, rng, 0.15);

  iic::ImageStack stack;
  for (int i = 0; i < 2; ++i)
    stack.images.push_back(iic::Tensor::uniform({1, 6, 6}, rng, 0.0, 1.0));
  iic::Tensor noise =
      iic::Tensor::uniform({1, 6, 6}, rng, -0.5 / 255.0, 0.5 / 255.0);
  iic::LossWeights w;

  auto total = [&]() {
    std::mt19937_64 dummy(0);
    auto res = net.embed(stack, iic::QuantizeMode::test, dummy);
    iic::Tensor noisy = iic::quantize_with_noise(res.raw, noise);
    auto restored = iic::unstack_images(net.restore_stacked(noisy), 2);
    for (auto& img : restored) img = iic::clamp(img, 0.0, 1.0);
    iic::LossParts parts{iic::loss_embedding(res.raw, net.reference(stack)),
                         iic::loss_frequency(res.raw, net.reference(stack)),
                         iic::loss_restoration(restored, stack.images)};
    return iic::loss_total(parts, w);
  };

  iic::backward(total());
  double worst = 0.0;
  const double h = 1e-5;
  for (const auto& name : store.names()) {
    iic::Tensor& p = store.at(name);
    for (int i = 0; i < p.size(); ++i) {
      const double keep = p.data()[i];
      p.data()[i] = keep + h;
      const double up = total().item();
      p.data()[i] = keep - h;
      const double dn = total().item();
      p.data()[i] = keep;
      const double fd = (up - dn) / (2 * h);
      double ad = p.grad()[i];
      if (corrupt) ad *= 1.5;  // negative-control hook
      const double rel = std::fabs(fd - ad) / std::max({std::fabs(fd), std::fabs(ad), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  std::cout << "max gradient relative error " << fmt(worst) << " (tolerance 1e-4)\n";
  return worst <= 1e-4 ? kExitOk : kExitProperty;
}

// ---- eval -------------------------------------------------------------------

int cmd_eval(const std::string& ckpt_path, const std::string& manifest_path,
             const std::string& report_path) {
  auto probe = iic::checkpoint_load(ckpt_path);
  auto samples = iic::load_manifest(manifest_path);

  std::ofstream report(report_path, std::ios::trunc);
  if (!report) throw iic::ConfigError("cannot write report: " + report_path);
  report << "sample_id,emb_psnr,emb_ssim,res_psnr,res_ssim\n";
  if (samples.empty()) {
    std::cout << "empty manifest; wrote header-only report\n";
    return kExitOk;
  }

  std::vector<double> ep, es, rp, rs;
  for (size_t idx = 0; idx < samples.size(); ++idx) {
    const auto& stack = samples[idx].stack;
    if (static_cast<int>(stack.images.size()) != probe.config.images)
      throw iic::ManifestError("sample image count does not match checkpoint");
    LoadedNet ln = load_net(ckpt_path, stack.images.front().dim(1),
                            stack.images.front().dim(2));
    std::mt19937_64 rng(0);
    auto res = ln.net->embed(stack, iic::QuantizeMode::test, rng);
    iic::Tensor ref = ln.net->reference(stack);
    auto restored = ln.net->restore(iic::EmbeddingImage{res.quantized.detach(), true});

    double res_psnr = 0, res_ssim = 0;
    for (size_t k = 0; k < restored.size(); ++k) {
      res_psnr += iic::psnr(restored[k], stack.images[k]) / restored.size();
      res_ssim += iic::ssim(restored[k], stack.images[k]) / restored.size();
    }
    ep.push_back(iic::psnr(res.quantized, ref));
    es.push_back(iic::ssim(res.quantized, ref));
    rp.push_back(res_psnr);
    rs.push_back(res_ssim);
    report << (idx + 1) << ',' << fmt_metric(ep.back()) << ',' << fmt_metric(es.back())
           << ',' << fmt_metric(rp.back()) << ',' << fmt_metric(rs.back()) << '\n';
  }
  report << "mean," << fmt_metric(mean_metric(ep)) << ',' << fmt_metric(mean_metric(es))
         << ',' << fmt_metric(mean_metric(rp)) << ',' << fmt_metric(mean_metric(rs))
         << '\n';
  std::cout << "wrote " << report_path << " (" << samples.size() << " samples)\n";
  return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"invertible image conversion network"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train a network from a config file");
  train->add_option("--config", train_args.config_path, "run configuration file")
      ->required();
  train->add_option("--out", train_args.out_dir, "output directory")->required();
  train->add_option("--seed", train_args.seed_override, "override the config seed");
  train->add_flag("--no-relation", train_args.no_relation, "disable relation modules");
  train->add_flag("--no-freq-loss", train_args.no_freq_loss,
                  "drop the frequency-domain loss term");

  std::string ckpt, out_path, embedding_path, manifest_path, report_path, mode;
  std::vector<std::string> inputs, refs;
  std::uint64_t verify_seed = 0;
  bool corrupt = false;

  auto* embed = app.add_subcommand("embed", "embed input images into one image");
  embed->add_option("--ckpt", ckpt, "checkpoint file")->required();
  embed->add_option("--inputs", inputs, "input PNGs, one per image slot")->required();
  embed->add_option("--out", out_path, "output embedding PNG")->required();

  auto* restore = app.add_subcommand("restore", "restore images from an embedding");
  restore->add_option("--ckpt", ckpt, "checkpoint file")->required();
  restore->add_option("--embedding", embedding_path, "embedding PNG")->required();
  restore->add_option("--out", out_path, "output directory")->required();
  restore->add_option("--ref", refs, "original PNGs for metric reporting");

  auto* verify = app.add_subcommand("verify", "run property checks");
  verify->add_option("--mode", mode, "invertibility or gradcheck")
      ->required()
      ->check(CLI::IsMember({"invertibility", "gradcheck"}));
  verify->add_option("--seed", verify_seed, "base seed");
  verify->add_flag("--corrupt-inverse", corrupt,
                   "negative-control hook: deliberately break the property");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint over a manifest");
  eval->add_option("--ckpt", ckpt, "checkpoint file")->required();
  eval->add_option("--manifest", manifest_path, "dataset manifest")->required();
  eval->add_option("--report", report_path, "output CSV report")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*train) return cmd_train(train_args);
    if (*embed) return cmd_embed(ckpt, inputs, out_path);
    if (*restore) return cmd_restore(ckpt, embedding_path, out_path, refs);
    if (*verify)
      return mode == "invertibility" ? verify_invertibility(verify_seed, corrupt)
                                     : verify_gradcheck(verify_seed, corrupt);
    if (*eval) return cmd_eval(ckpt, manifest_path, report_path);
  } catch (const iic::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const iic::ManifestError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const iic::ImageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const iic::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const iic::CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
