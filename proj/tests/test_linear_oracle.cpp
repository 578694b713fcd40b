#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include "dsd/linear_oracle.hpp"

using dsd::LinearWorld;
using dsd::Rng;
using dsd::SemanticRateMatrix;
using dsd::Tensor;

namespace {

// encoder = mixing (columns of the orthogonal map), so code = obs . M =
// s M^T M = s: the exact inverse with parts aligned to semantics.
Tensor inverse_encoder(const LinearWorld& w) { return w.mixing; }

Tensor permuted_encoder(const LinearWorld& w, const std::vector<int>& perm) {
  const int d = w.dims_per_semantic;
  const int dim = w.obs_dim();
  Tensor enc = Tensor::zeros({dim, dim});
  for (int part = 0; part < w.semantics; ++part) {
    for (int c = 0; c < d; ++c) {
      const int dst = part * d + c;
      const int src = perm[static_cast<std::size_t>(part)] * d + c;
      for (int r = 0; r < dim; ++r) enc.at(r, dst) = w.mixing.at(r, src);
    }
  }
  return enc;
}

}  // namespace

TEST_CASE("world: mixing is orthogonal so the inverse encoder recovers semantics") {
  Rng rng(dsd::derive_seed(51, "world"));
  const LinearWorld w = dsd::make_linear_world(3, 2, rng);
  Eigen::MatrixXd m(w.obs_dim(), w.obs_dim());
  for (int i = 0; i < w.obs_dim(); ++i)
    for (int j = 0; j < w.obs_dim(); ++j) m(i, j) = w.mixing.at(i, j);
  REQUIRE((m.transpose() * m - Eigen::MatrixXd::Identity(w.obs_dim(), w.obs_dim())).norm() < 1e-12);
}

TEST_CASE("measure_rates: the aligned inverse gives the identity rate matrix") {
  Rng wrng(dsd::derive_seed(51, "inv"));
  const LinearWorld w = dsd::make_linear_world(3, 1, wrng);
  Rng mrng(dsd::derive_seed(51, "inv-measure"));
  const SemanticRateMatrix rates = dsd::measure_rates(inverse_encoder(w), w, 4000, mrng);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double expected = i == j ? 1.0 : 0.0;
      REQUIRE_THAT(rates.lambda.at(i, j), Catch::Matchers::WithinAbs(expected, 0.01));
    }
  }
}

TEST_CASE("measure_rates: a permuted inverse gives the permutation matrix") {
  Rng wrng(dsd::derive_seed(51, "perm"));
  const LinearWorld w = dsd::make_linear_world(3, 2, wrng);
  const std::vector<int> perm = {2, 0, 1};
  Rng mrng(dsd::derive_seed(51, "perm-measure"));
  const SemanticRateMatrix rates =
      dsd::measure_rates(permuted_encoder(w, perm), w, 4000, mrng);
  for (int part = 0; part < 3; ++part) {
    for (int sem = 0; sem < 3; ++sem) {
      const double expected = perm[static_cast<std::size_t>(part)] == sem ? 1.0 : 0.0;
      REQUIRE_THAT(rates.lambda.at(part, sem), Catch::Matchers::WithinAbs(expected, 0.01));
    }
  }
}

TEST_CASE("measure_rates: random encoders are entangled") {
  // Over random orthogonal encoders, every part mixes several semantics.
  int entangled_rows = 0, total_rows = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng wrng(dsd::derive_seed(51, "rand-world", seed));
    const LinearWorld w = dsd::make_linear_world(3, 1, wrng);
    Rng erng(dsd::derive_seed(51, "rand-enc", seed));
    const LinearWorld scrambled = dsd::make_linear_world(3, 1, erng);
    Rng mrng(dsd::derive_seed(51, "rand-measure", seed));
    const SemanticRateMatrix rates = dsd::measure_rates(scrambled.mixing, w, 4000, mrng);
    for (int i = 0; i < 3; ++i) {
      int spread = 0;
      for (int j = 0; j < 3; ++j) spread += rates.lambda.at(i, j) > 0.05;
      entangled_rows += spread >= 2;
      ++total_rows;
    }
  }
  REQUIRE(entangled_rows > total_rows * 8 / 10);
}

TEST_CASE("measure_rates: scale invariance in any code part") {
  Rng wrng(dsd::derive_seed(51, "scale"));
  const LinearWorld w = dsd::make_linear_world(2, 1, wrng);
  Tensor enc = inverse_encoder(w);
  Tensor scaled = enc;
  for (int r = 0; r < w.obs_dim(); ++r) scaled.at(r, 0) *= -37.5;
  Rng m1(dsd::derive_seed(51, "scale-m"));
  Rng m2(dsd::derive_seed(51, "scale-m"));
  const SemanticRateMatrix a = dsd::measure_rates(enc, w, 2000, m1);
  const SemanticRateMatrix b = dsd::measure_rates(scaled, w, 2000, m2);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      REQUIRE_THAT(a.lambda.at(i, j), Catch::Matchers::WithinAbs(b.lambda.at(i, j), 1e-9));
}

TEST_CASE("measure_rates: guards on shape, sample count and degenerate parts") {
  Rng wrng(dsd::derive_seed(51, "guards"));
  const LinearWorld w = dsd::make_linear_world(2, 1, wrng);
  Rng mrng(dsd::derive_seed(51, "guards-m"));
  REQUIRE_THROWS_AS(dsd::measure_rates(Tensor::zeros({3, 2}), w, 2000, mrng), dsd::ShapeError);
  REQUIRE_THROWS_AS(dsd::measure_rates(w.mixing, w, 10, mrng), dsd::Error);
  // A zero column (dead code part) is rank-deficient by construction.
  Tensor dead = w.mixing;
  for (int r = 0; r < w.obs_dim(); ++r) dead.at(r, 0) = 0.0;
  REQUIRE_THROWS_AS(dsd::measure_rates(dead, w, 2000, mrng), dsd::Error);
}

TEST_CASE("linear dsd: swap supervision disentangles a 2-semantic world") {
  dsd::LinearDsdConfig cfg;
  cfg.seed = 3;
  cfg.steps = 4000;
  Rng wrng(dsd::derive_seed(cfg.seed, "world"));
  const LinearWorld w = dsd::make_linear_world(2, 1, wrng);
  const dsd::LinearDsdResult result = dsd::train_linear_dsd(w, cfg);
  REQUIRE(!result.diverged);
  REQUIRE(!result.trajectory.empty());
  const SemanticRateMatrix& final_rates = result.trajectory.back().rates;
  CAPTURE(final_rates.max_offdiag(), final_rates.min_diag());
  REQUIRE(final_rates.max_offdiag() < 0.05);
  REQUIRE(final_rates.min_diag() > 0.9);
}

TEST_CASE("linear dsd: the alpha=0 control stays entangled") {
  dsd::LinearDsdConfig cfg;
  cfg.seed = 3;
  cfg.steps = 4000;
  cfg.alpha = 0.0;
  Rng wrng(dsd::derive_seed(cfg.seed, "world"));
  const LinearWorld w = dsd::make_linear_world(2, 1, wrng);
  const dsd::LinearDsdResult result = dsd::train_linear_dsd(w, cfg);
  const SemanticRateMatrix& final_rates = result.trajectory.back().rates;
  CAPTURE(final_rates.max_offdiag(), final_rates.min_diag());
  const bool disentangled = final_rates.max_offdiag() < 0.05 && final_rates.min_diag() > 0.9;
  REQUIRE(!disentangled);
}

TEST_CASE("linear dsd: identical pair members give the swap loss no signal") {
  // When I_A = I_B always, swapping equal codes is the identity and L_s
  // degenerates to L_o; the rates stay entangled.
  const int n = 2;
  dsd::LinearDsdConfig cfg;
  cfg.seed = 9;
  cfg.steps = 3000;
  Rng wrng(dsd::derive_seed(cfg.seed, "world"));
  const LinearWorld w = dsd::make_linear_world(n, 1, wrng);

  // Replicate train_linear_dsd but with degenerate pairs.
  Rng rng(dsd::derive_seed(cfg.seed, "degenerate"));
  dsd::Graph g;
  const dsd::NodeId in_a = g.input("obs_a", {cfg.batch_size, w.obs_dim()});
  const dsd::NodeId in_b = g.input("obs_b", {cfg.batch_size, w.obs_dim()});
  const double s = std::sqrt(6.0 / (w.obs_dim() + w.obs_dim()));
  const dsd::NodeId enc = g.param("enc", Tensor::uniform({w.obs_dim(), w.obs_dim()}, -s, s, rng));
  const dsd::NodeId dec = g.param("dec", Tensor::uniform({w.obs_dim(), w.obs_dim()}, -s, s, rng));
  const dsd::NodeId code_a = g.matmul(in_a, enc);
  const dsd::NodeId code_b = g.matmul(in_b, enc);
  const dsd::NodeId loss_o =
      g.add(g.mse(in_a, g.matmul(code_a, dec)), g.mse(in_b, g.matmul(code_b, dec)));
  std::vector<dsd::NodeId> roots;
  for (int k = 0; k < n; ++k) {
    auto [ha, hb] = dsd::build_swap(g, code_a, code_b, k, w.layout());
    const dsd::NodeId ls = g.add(g.mse(in_a, g.matmul(ha, dec)), g.mse(in_b, g.matmul(hb, dec)));
    roots.push_back(g.add(loss_o, g.scale(ls, cfg.alpha)));
  }
  dsd::AdamState adam = dsd::AdamState::init({&g.value(enc), &g.value(dec)}, cfg.lr);
  for (int step = 0; step < cfg.steps; ++step) {
    const int k = rng.index(n);
    const Tensor sem = dsd::sample_semantics(w, cfg.batch_size, rng);
    const Tensor obs = dsd::observe(w, sem);
    g.eval({{"obs_a", obs}, {"obs_b", obs}}, roots[static_cast<std::size_t>(k)]);
    // swap of equal codes must leave the swap loss equal to L_o
    g.eval({{"obs_a", obs}, {"obs_b", obs}}, loss_o);
    g.backward_from(roots[static_cast<std::size_t>(k)]);
    std::vector<Tensor*> params = {&g.mutable_value(enc), &g.mutable_value(dec)};
    std::vector<const Tensor*> grads = {&g.grad(enc), &g.grad(dec)};
    dsd::adam_step(params, grads, adam);
  }
  Rng mrng(dsd::derive_seed(cfg.seed, "degenerate-measure"));
  const SemanticRateMatrix rates = dsd::measure_rates(g.value(enc), w, 4000, mrng);
  const bool disentangled = rates.max_offdiag() < 0.05 && rates.min_diag() > 0.9;
  REQUIRE(!disentangled);
}
