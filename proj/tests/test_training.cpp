#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "iic/checkpoint.hpp"
#include "iic/training.hpp"
#include "oracles.hpp"

using iic::Tensor;
using Catch::Approx;

namespace {

Tensor random_image(iic::Shape shape, std::mt19937_64& rng) {
  return Tensor::uniform(std::move(shape), rng, 0.0, 1.0);
}

iic::ImageStack make_stack(int k, int c, int h, int w, std::mt19937_64& rng) {
  iic::ImageStack s;
  for (int i = 0; i < k; ++i) s.images.push_back(random_image({c, h, w}, rng));
  return s;
}

} // namespace

TEST_CASE("loss_embedding basics") {
  std::mt19937_64 rng(1);
  auto a = random_image({3, 4, 4}, rng);
  CHECK(iic::loss_embedding(a, a).item() == 0.0);

  auto b = a.detach();
  for (int i = 0; i < b.size(); ++i) b.data()[i] += 0.25;
  CHECK(iic::loss_embedding(a, b).item() == Approx(0.0625).margin(1e-12));
  CHECK(iic::loss_embedding(a, b).item() == Approx(iic::loss_embedding(b, a).item()));
  CHECK_THROWS_AS(iic::loss_embedding(a, Tensor::zeros({3, 2, 2})),
                  std::invalid_argument);
}

TEST_CASE("loss_frequency zero iff equal, delta case") {
  std::mt19937_64 rng(2);
  auto a = random_image({1, 4, 4}, rng);
  CHECK(iic::loss_frequency(a, a).item() == 0.0);

  // single-pixel difference d at the origin: each full-spectrum bin differs by
  // d, so each retained bin contributes d^2 and the mean is d^2
  const double d = 0.3;
  auto b = a.detach();
  b.data()[0] += d;
  CHECK(iic::loss_frequency(a, b).item() == Approx(d * d).epsilon(1e-10));

  auto c = a.detach();
  c.data()[5] += 1e-3;
  CHECK(iic::loss_frequency(a, c).item() > 0.0);
}

TEST_CASE("loss_restoration basics") {
  std::mt19937_64 rng(3);
  std::vector<Tensor> orig, rest;
  for (int k = 0; k < 3; ++k) {
    orig.push_back(random_image({3, 4, 4}, rng));
    rest.push_back(orig.back().detach());
  }
  CHECK(iic::loss_restoration(rest, orig).item() == 0.0);

  const double d = 0.2;
  for (int i = 0; i < rest[1].size(); ++i) rest[1].data()[i] += d;
  CHECK(iic::loss_restoration(rest, orig).item() == Approx(d / 3.0).margin(1e-12));

  // pairing is positional
  std::vector<Tensor> swapped{orig[1], orig[0], orig[2]};
  CHECK(iic::loss_restoration(swapped, orig).item() > 0.0);
  CHECK_THROWS_AS(iic::loss_restoration({orig[0]}, orig), std::invalid_argument);
}

TEST_CASE("loss_total weighting") {
  std::mt19937_64 rng(4);
  auto a = random_image({3, 4, 4}, rng);
  auto b = random_image({3, 4, 4}, rng);
  iic::LossParts parts{iic::loss_embedding(a, b), iic::loss_frequency(a, b),
                       iic::loss_restoration({a}, {b})};
  CHECK(iic::loss_total(parts, {1, 0, 0}).item() == Approx(parts.embedding.item()));
  iic::LossParts zero{Tensor::zeros({1}), Tensor::zeros({1}), Tensor::zeros({1})};
  CHECK(iic::loss_total(zero, {1, 1, 16}).item() == 0.0);
  CHECK_THROWS_AS((iic::LossWeights{0, 0, 0}).validate(), std::invalid_argument);
  CHECK_THROWS_AS((iic::LossWeights{-1, 1, 1}).validate(), std::invalid_argument);
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
  iic::ParameterStore store;
  std::mt19937_64 rng(5);
  Tensor p = store.create("p", {4});
  for (int i = 0; i < 4; ++i) p.data()[i] = i * 0.5;
  iic::adam_step(store, {});
  for (int i = 0; i < 4; ++i) CHECK(p.data()[i] == i * 0.5);
  CHECK(store.step == 1);
}

TEST_CASE("adam: first step is a sign-like move of size lr") {
  iic::ParameterStore store;
  Tensor p = store.create("p", {2});
  p.data()[0] = 1.0;
  p.data()[1] = -2.0;
  p.grad_mut()[0] = 0.3;
  p.grad_mut()[1] = -4.0;
  iic::AdamConfig opt;
  opt.lr = 1e-2;
  iic::adam_step(store, opt);
  // at t=1, mhat = g, vhat = g^2, so the step is -lr * g/(|g| + eps~)
  CHECK(p.data()[0] == Approx(1.0 - 1e-2).epsilon(1e-5));
  CHECK(p.data()[1] == Approx(-2.0 + 1e-2).epsilon(1e-5));
  // gradients cleared
  CHECK(p.grad()[0] == 0.0);
  CHECK(p.grad()[1] == 0.0);
}

TEST_CASE("full loss gradients on a 2-block toy network") {
  std::mt19937_64 rng(6);
  iic::NetworkConfig cfg;
  cfg.images = 2;
  cfg.channels = 1;
  cfg.embed_channels = 1;
  cfg.height = 6;
  cfg.width = 6;
  cfg.coupling_blocks = 2;
  cfg.dense = {1, 2, 0.2, 3};
  cfg.relation_features = 2;
  iic::ParameterStore store;
  iic::IICNet net(cfg, store, rng);
  iic::randomize_parameters(store, rng, 0.15);

  auto stack = make_stack(2, 1, 6, 6, rng);
  Tensor noise = Tensor::uniform({1, 6, 6}, rng, -0.5 / 255.0, 0.5 / 255.0);
  iic::LossWeights w{1.0, 1.0, 16.0};

  auto total_value = [&]() {
    std::mt19937_64 dummy(0);
    auto res = net.embed(stack, iic::QuantizeMode::test, dummy);
    Tensor noisy = iic::quantize_with_noise(res.raw, noise);
    Tensor restored_stack = net.restore_stacked(noisy);
    auto restored = iic::unstack_images(restored_stack, 2);
    for (auto& img : restored) img = iic::clamp(img, 0.0, 1.0);
    iic::LossParts parts{iic::loss_embedding(res.raw, net.reference(stack)),
                         iic::loss_frequency(res.raw, net.reference(stack)),
                         iic::loss_restoration(restored, stack.images)};
    return iic::loss_total(parts, w);
  };

  iic::backward(total_value());

  double worst = 0.0;
  for (const auto& name : store.names()) {
    Tensor& p = store.at(name);
    std::vector<double> base(p.data(), p.data() + p.size());
    auto eval = [&](const std::vector<double>& vals) {
      for (int i = 0; i < p.size(); ++i) p.data()[i] = vals[i];
      return total_value().item();
    };
    worst = std::max(worst, oracle::gradcheck_leaf(p, eval, p.grad()));
    for (int i = 0; i < p.size(); ++i) p.data()[i] = base[i];
  }
  INFO("worst relative gradient error " << worst);
  CHECK(worst <= 1e-4);
}

TEST_CASE("train: zero iterations leaves parameters untouched") {
  std::mt19937_64 rng(7);
  iic::TrainRunSpec spec;
  spec.net.images = 2;
  spec.net.channels = 1;
  spec.net.embed_channels = 1;
  spec.net.height = 4;
  spec.net.width = 4;
  spec.net.coupling_blocks = 1;
  spec.net.dense = {1, 2, 0.2, 3};
  spec.net.relation_features = 2;
  spec.iterations = 0;
  iic::ParameterStore store;
  iic::IICNet net(spec.net, store, rng);

  std::vector<double> before;
  for (const auto& n : store.names())
    before.insert(before.end(), store.at(n).data(),
                  store.at(n).data() + store.at(n).size());

  std::vector<iic::ImageStack> data{make_stack(2, 1, 4, 4, rng)};
  iic::train(spec, data, net, store);

  std::vector<double> after;
  for (const auto& n : store.names())
    after.insert(after.end(), store.at(n).data(),
                 store.at(n).data() + store.at(n).size());
  CHECK(before == after);
  CHECK_THROWS_AS(iic::train(spec, {}, net, store), std::invalid_argument);
}

TEST_CASE("train: short run reduces total loss and is deterministic") {
  auto run = [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    iic::TrainRunSpec spec;
    spec.net.images = 2;
    spec.net.channels = 3;
    spec.net.height = 8;
    spec.net.width = 8;
    spec.net.coupling_blocks = 2;
    spec.net.dense = {2, 4, 0.2, 3};
    spec.net.relation_features = 4;
    spec.iterations = 30;
    spec.seed = seed;
    iic::ParameterStore store;
    iic::IICNet net(spec.net, store, rng);
    std::vector<iic::ImageStack> data;
    for (int i = 0; i < 4; ++i) data.push_back(make_stack(2, 3, 8, 8, rng));
    std::vector<double> totals;
    iic::train(spec, data, net, store,
               [&](const iic::IterationRecord& r) { totals.push_back(r.loss_total); });
    return totals;
  };

  auto t1 = run(0);
  REQUIRE(t1.size() == 30);
  // averaged over the tail to smooth noise from per-iteration sampling
  double head = 0, tail = 0;
  for (int i = 0; i < 5; ++i) head += t1[i];
  for (int i = 25; i < 30; ++i) tail += t1[i];
  CHECK(tail < head);

  auto t2 = run(0);
  CHECK(t1 == t2);  // bit-deterministic
}

TEST_CASE("train: ablation arms run without divergence") {
  std::mt19937_64 rng(9);
  for (int arm = 0; arm < 2; ++arm) {
    iic::TrainRunSpec spec;
    spec.net.images = 2;
    spec.net.channels = 1;
    spec.net.embed_channels = 1;
    spec.net.height = 8;
    spec.net.width = 8;
    spec.net.coupling_blocks = 1;
    spec.net.dense = {1, 2, 0.2, 3};
    spec.net.relation_features = 2;
    spec.net.disable_relation = arm == 0;
    spec.disable_freq_loss = arm == 1;
    spec.iterations = 10;
    iic::ParameterStore store;
    iic::IICNet net(spec.net, store, rng);
    std::vector<iic::ImageStack> data{make_stack(2, 1, 8, 8, rng)};
    std::vector<iic::IterationRecord> recs;
    CHECK_NOTHROW(iic::train(spec, data, net, store,
                             [&](const iic::IterationRecord& r) { recs.push_back(r); }));
    if (arm == 1)
      for (const auto& r : recs) CHECK(r.loss_frequency >= 0.0);
  }
}

TEST_CASE("checkpoint: bit-exact round trip including optimizer state") {
  std::mt19937_64 rng(10);
  iic::NetworkConfig cfg;
  cfg.images = 2;
  cfg.channels = 3;
  cfg.height = 8;
  cfg.width = 8;
  cfg.coupling_blocks = 2;
  cfg.dense = {1, 2, 0.2, 3};
  iic::ParameterStore store;
  iic::IICNet net(cfg, store, rng);
  iic::randomize_parameters(store, rng, 0.1);
  // populate optimizer state
  for (const auto& n : store.names()) {
    auto& g = store.at(n).grad_mut();
    for (auto& v : g) v = 0.01;
  }
  iic::adam_step(store, {});

  const auto dir = std::filesystem::temp_directory_path();
  const std::string p1 = (dir / "ck1.iicn").string();
  const std::string p2 = (dir / "ck2.iicn").string();
  iic::checkpoint_save(p1, cfg, store);

  auto ck = iic::checkpoint_load(p1);
  CHECK(ck.step == 1);
  CHECK(ck.config.images == 2);

  std::mt19937_64 rng2(99);
  iic::ParameterStore store2;
  iic::IICNet net2(cfg, store2, rng2);
  ck.apply(store2);
  for (const auto& n : store.names())
    for (int i = 0; i < store.at(n).size(); ++i)
      CHECK(store2.at(n).data()[i] == store.at(n).data()[i]);

  // save -> load -> save gives byte-identical files
  iic::checkpoint_save(p2, cfg, store2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::vector<char> b1((std::istreambuf_iterator<char>(f1)), {});
  std::vector<char> b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);

  // identical network evaluation after restore
  auto x = Tensor::randn({6, 8, 8}, rng);
  auto v1 = net.core_forward(x);
  auto v2 = net2.core_forward(x);
  for (int i = 0; i < v1.size(); ++i)
    CHECK(v1.data()[i] == Approx(v2.data()[i]).margin(1e-12));

  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("checkpoint: truncation and corruption are rejected") {
  std::mt19937_64 rng(11);
  iic::NetworkConfig cfg;
  cfg.images = 2;
  cfg.channels = 1;
  cfg.embed_channels = 1;
  cfg.height = 4;
  cfg.width = 4;
  cfg.coupling_blocks = 0;
  cfg.dense = {1, 2, 0.2, 3};
  cfg.relation_features = 2;
  iic::ParameterStore store;
  iic::IICNet net(cfg, store, rng);

  const auto dir = std::filesystem::temp_directory_path();
  const std::string p = (dir / "ck3.iicn").string();
  iic::checkpoint_save(p, cfg, store);

  // truncate
  auto size = std::filesystem::file_size(p);
  std::filesystem::resize_file(p, size - 10);
  CHECK_THROWS_AS(iic::checkpoint_load(p), iic::CheckpointError);

  // corrupt one byte
  iic::checkpoint_save(p, cfg, store);
  {
    std::fstream f(p, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(20);
    char c = 0x5a;
    f.write(&c, 1);
  }
  CHECK_THROWS_AS(iic::checkpoint_load(p), iic::CheckpointError);
  std::filesystem::remove(p);
}

TEST_CASE("checkpoint: f32 storage loads with reduced precision") {
  std::mt19937_64 rng(12);
  iic::NetworkConfig cfg;
  cfg.images = 2;
  cfg.channels = 1;
  cfg.embed_channels = 1;
  cfg.height = 4;
  cfg.width = 4;
  cfg.coupling_blocks = 1;
  cfg.dense = {1, 2, 0.2, 3};
  cfg.relation_features = 2;
  iic::ParameterStore store;
  iic::IICNet net(cfg, store, rng);
  iic::randomize_parameters(store, rng, 0.1);

  const auto dir = std::filesystem::temp_directory_path();
  const std::string p = (dir / "ck4.iicn").string();
  iic::checkpoint_save(p, cfg, store, iic::StorageDtype::f32);
  auto ck = iic::checkpoint_load(p);
  for (const auto& rec : ck.records) {
    const Tensor& t = store.at(rec.name);
    for (size_t i = 0; i < rec.values.size(); ++i)
      CHECK(rec.values[i] == Approx(t.data()[i]).margin(1e-6));
  }
  std::filesystem::remove(p);
}
