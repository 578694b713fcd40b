#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "dsd/eval.hpp"
#include "dsd/trainer.hpp"
#include "gradcheck.hpp"

using dsd::DatasetManifest;
using dsd::ModelConfig;
using dsd::Phase;
using dsd::Rng;
using dsd::StepReport;
using dsd::Tensor;
using dsd::TrainConfig;

namespace {

ModelConfig toy_model() {
  ModelConfig cfg;
  cfg.canvas = 8;
  cfg.hidden = {64, 32};
  cfg.layout = {3, 5};
  return cfg;
}

DatasetManifest toy_manifest(double rate, int train_pairs = 64) {
  DatasetManifest m;
  m.train_pairs = train_pairs;
  m.val_pairs = 8;
  m.test_pairs = 8;
  m.supervision_rate = rate;
  m.canvas = 8;
  m.square_side = 2;
  m.position_step = 2;
  m.seed = 2024;
  return m;
}

TrainConfig toy_train(double rate) {
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.batch_size = 16;
  cfg.epochs = 200;
  cfg.supervision_rate = rate;
  cfg.seed = 77;
  return cfg;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace

TEST_CASE("trainer: lr = 0 leaves every parameter bit-identical") {
  const ModelConfig model = toy_model();
  TrainConfig cfg = toy_train(1.0);
  cfg.lr = 0.0;
  cfg.epochs = 1;
  Rng rng(dsd::derive_seed(cfg.seed, "init"));
  dsd::AutoencoderParams initial = dsd::AutoencoderParams::init(model, rng);
  dsd::Trainer trainer(model, cfg, initial);
  const dsd::SquareDataset data = dsd::generate_dataset(toy_manifest(1.0));
  trainer.train_epoch(data, 0);
  const dsd::AutoencoderParams after = trainer.params();
  for (std::size_t i = 0; i < initial.tensors.size(); ++i) {
    REQUIRE(after.tensors[i].second.data == initial.tensors[i].second.data);
  }
}

TEST_CASE("trainer: phases interleave as (labeled, unlabeled)* when both exist") {
  const ModelConfig model = toy_model();
  TrainConfig cfg = toy_train(0.5);
  cfg.epochs = 1;
  Rng rng(dsd::derive_seed(cfg.seed, "init"));
  dsd::Trainer trainer(model, cfg, dsd::AutoencoderParams::init(model, rng));
  const dsd::SquareDataset data = dsd::generate_dataset(toy_manifest(0.5));
  const std::vector<StepReport> reports = trainer.train_epoch(data, 0);
  REQUIRE(reports.size() >= 2);
  REQUIRE(reports.size() % 2 == 0);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    REQUIRE(reports[i].phase == (i % 2 == 0 ? Phase::kLabeled : Phase::kUnlabeled));
  }
  // Algorithm-1 coupling: the unlabeled step reuses the labeled k.
  for (std::size_t i = 0; i + 1 < reports.size(); i += 2) {
    REQUIRE(reports[i].k == reports[i + 1].k);
  }
}

TEST_CASE("trainer: rate 0 runs only the unlabeled phase") {
  const ModelConfig model = toy_model();
  TrainConfig cfg = toy_train(0.0);
  cfg.epochs = 1;
  Rng rng(dsd::derive_seed(cfg.seed, "init"));
  dsd::Trainer trainer(model, cfg, dsd::AutoencoderParams::init(model, rng));
  const dsd::SquareDataset data = dsd::generate_dataset(toy_manifest(0.0));
  const std::vector<StepReport> reports = trainer.train_epoch(data, 0);
  REQUIRE(!reports.empty());
  for (const StepReport& r : reports) REQUIRE(r.phase == Phase::kUnlabeled);
}

TEST_CASE("trainer: uncoupled swap index draws its own k") {
  const ModelConfig model = toy_model();
  TrainConfig cfg = toy_train(0.5);
  cfg.epochs = 1;
  cfg.couple_swap_index = false;
  Rng rng(dsd::derive_seed(cfg.seed, "init"));
  dsd::Trainer trainer(model, cfg, dsd::AutoencoderParams::init(model, rng));
  dsd::SquareDataset data = dsd::generate_dataset(toy_manifest(0.5, 512));
  const std::vector<StepReport> reports = trainer.train_epoch(data, 0);
  int differing = 0;
  for (std::size_t i = 0; i + 1 < reports.size(); i += 2)
    differing += reports[i].k != reports[i + 1].k;
  REQUIRE(differing > 0);  // with 16 iterations, all-equal has chance (1/3)^16
}

TEST_CASE("trainer: toy convergence drops the swap loss by 10x and the smoke median falls") {
  const ModelConfig model = toy_model();
  const TrainConfig cfg = toy_train(1.0);
  const dsd::SquareDataset data = dsd::generate_dataset(toy_manifest(1.0));
  dsd::FitResult result = dsd::fit(model, cfg, data);

  std::vector<double> swap_losses;
  std::vector<double> totals;
  for (const StepReport& r : result.reports) {
    if (r.phase == Phase::kLabeled) swap_losses.push_back(r.aux);
    totals.push_back(r.total);
  }
  REQUIRE(swap_losses.size() >= 100);
  const double initial = swap_losses.front();
  const double final_loss = swap_losses.back();
  CAPTURE(initial, final_loss);
  REQUIRE(final_loss < 0.1 * initial);

  const std::size_t tenth = totals.size() / 10;
  const double first = median({totals.begin(), totals.begin() + tenth});
  const double last = median({totals.end() - tenth, totals.end()});
  CAPTURE(first, last);
  REQUIRE(last < first);
}

TEST_CASE("trainer: gradients of L_p and L_u match finite differences end to end") {
  ModelConfig cfg;
  cfg.canvas = 2;
  cfg.hidden = {5};
  cfg.layout = {2, 2};
  double worst_p = 0.0, worst_u = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(dsd::derive_seed(29, "e2e", seed));
    dsd::Graph g;
    const dsd::NodeId in_a = g.input("image_a", {2, cfg.input_dim()});
    const dsd::NodeId in_b = g.input("image_b", {2, cfg.input_dim()});
    dsd::GraphParams gp = dsd::register_params(g, dsd::AutoencoderParams::init(cfg, rng));
    const dsd::DsdLossRoots roots = dsd::build_dsd_losses(g, cfg, gp, in_a, in_b, 5.0, 0.2);
    std::map<std::string, Tensor> feeds = {
        {"image_a", Tensor::uniform({2, cfg.input_dim()}, -1.0, 1.0, rng)},
        {"image_b", Tensor::uniform({2, cfg.input_dim()}, -1.0, 1.0, rng)}};
    const int k = static_cast<int>(seed % 2);
    for (dsd::NodeId p : gp.ids) {
      worst_p = std::max(
          worst_p, gradcheck::max_rel_err_param(g, roots.primary[static_cast<std::size_t>(k)], p, feeds));
      worst_u = std::max(
          worst_u,
          gradcheck::max_rel_err_param(g, roots.unlabeled[static_cast<std::size_t>(k)], p, feeds));
    }
  }
  CAPTURE(worst_p, worst_u);
  REQUIRE(worst_p < 1e-4);
  REQUIRE(worst_u < 1e-4);
}

TEST_CASE("trainer: graph losses agree with the direct tensor-path losses") {
  const ModelConfig cfg = toy_model();
  Rng rng(dsd::derive_seed(29, "cross"));
  const dsd::AutoencoderParams params = dsd::AutoencoderParams::init(cfg, rng);
  dsd::Graph g;
  const dsd::NodeId in_a = g.input("image_a", {1, cfg.input_dim()});
  const dsd::NodeId in_b = g.input("image_b", {1, cfg.input_dim()});
  dsd::GraphParams gp = dsd::register_params(g, params);
  const dsd::DsdLossRoots roots = dsd::build_dsd_losses(g, cfg, gp, in_a, in_b, 5.0, 0.2);
  const Tensor a = Tensor::uniform({1, cfg.input_dim()}, -1.0, 1.0, rng);
  const Tensor b = Tensor::uniform({1, cfg.input_dim()}, -1.0, 1.0, rng);
  for (int k = 0; k < cfg.layout.parts; ++k) {
    g.eval({{"image_a", a}, {"image_b", b}}, roots.primary[static_cast<std::size_t>(k)]);
    const double graph_lp = g.value(roots.primary[static_cast<std::size_t>(k)]).data[0];
    g.eval({{"image_a", a}, {"image_b", b}}, roots.unlabeled[static_cast<std::size_t>(k)]);
    const double graph_lu = g.value(roots.unlabeled[static_cast<std::size_t>(k)]).data[0];
    const auto lp = dsd::loss_primary(a, b, params, cfg, k, 5.0, dsd::LossNorm::kPerElement);
    const auto lu = dsd::loss_dual(a, b, params, cfg, k, 0.2, dsd::LossNorm::kPerElement);
    REQUIRE_THAT(graph_lp, Catch::Matchers::WithinRel(lp.total, 1e-12));
    REQUIRE_THAT(graph_lu, Catch::Matchers::WithinRel(lu.total, 1e-12));
  }
}

TEST_CASE("trainer: numerical blow-up aborts with a diagnostic") {
  const ModelConfig model = toy_model();
  TrainConfig cfg = toy_train(1.0);
  cfg.lr = 1e155;  // one update pushes activations past the double range
  cfg.epochs = 1;
  Rng rng(dsd::derive_seed(cfg.seed, "init"));
  dsd::Trainer trainer(model, cfg, dsd::AutoencoderParams::init(model, rng));
  const dsd::SquareDataset data = dsd::generate_dataset(toy_manifest(1.0));
  REQUIRE_THROWS_AS(trainer.train_epoch(data, 0), dsd::NumericError);
}

TEST_CASE("trainer: resume from checkpoint reproduces the uninterrupted metrics") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dsd_trainer_tests" / "resume";
  fs::remove_all(dir);
  const ModelConfig model = toy_model();
  const dsd::SquareDataset data = dsd::generate_dataset(toy_manifest(1.0));

  TrainConfig full_cfg = toy_train(1.0);
  full_cfg.epochs = 6;
  dsd::FitResult full = dsd::fit(model, full_cfg, data);

  TrainConfig head_cfg = full_cfg;
  head_cfg.epochs = 3;
  head_cfg.checkpoint_every = 3;
  dsd::FitOptions head_opts;
  head_opts.out_dir = (dir / "head").string();
  dsd::fit(model, head_cfg, data, head_opts);

  dsd::FitOptions resume_opts;
  resume_opts.out_dir = (dir / "resumed").string();
  resume_opts.resume_checkpoint = (dir / "head" / "checkpoint_last.dsdw").string();
  dsd::FitResult resumed = dsd::fit(model, full_cfg, data, resume_opts);

  std::vector<const StepReport*> tail;
  for (const StepReport& r : full.reports)
    if (r.epoch >= 3) tail.push_back(&r);
  REQUIRE(tail.size() == resumed.reports.size());
  for (std::size_t i = 0; i < tail.size(); ++i) {
    REQUIRE(resumed.reports[i].epoch == tail[i]->epoch);
    REQUIRE(resumed.reports[i].total == tail[i]->total);
    REQUIRE(resumed.reports[i].original == tail[i]->original);
  }
}
