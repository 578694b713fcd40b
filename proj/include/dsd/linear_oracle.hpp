#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsd/adam.hpp"
#include "dsd/graph.hpp"
#include "dsd/model.hpp"
#include "dsd/rng.hpp"

namespace dsd {

// Linear generative world: n independent semantics of d dimensions each,
// mixed into observations by an orthogonal map. Orthogonality guarantees
// an exact inverse exists, so perfectly disentangled encoders are
// attainable and the identity-rate checks are exact.
struct LinearWorld {
  int semantics = 2;          // n
  int dims_per_semantic = 1;  // d
  Tensor mixing;              // (n*d) x (n*d), rows map semantics -> observations

  int obs_dim() const { return semantics * dims_per_semantic; }
  CodeLayout layout() const { return CodeLayout{semantics, dims_per_semantic}; }
};

inline LinearWorld make_linear_world(int semantics, int dims_per_semantic, Rng& rng) {
  if (semantics < 2 || dims_per_semantic < 1)
    throw Error("linear world: need n >= 2 semantics of d >= 1 dims");
  LinearWorld w;
  w.semantics = semantics;
  w.dims_per_semantic = dims_per_semantic;
  const int dim = w.obs_dim();
  Eigen::MatrixXd gauss(dim, dim);
  for (int r = 0; r < dim; ++r)
    for (int c = 0; c < dim; ++c) gauss(r, c) = rng.gaussian();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
  Eigen::MatrixXd q = qr.householderQ();
  // Fix the sign convention so the factorization is unique.
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int c = 0; c < dim; ++c)
    if (r(c, c) < 0.0) q.col(c) *= -1.0;
  w.mixing = Tensor::zeros({dim, dim});
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) w.mixing.at(i, j) = q(i, j);
  return w;
}

// Rows of iid standard-normal semantics.
inline Tensor sample_semantics(const LinearWorld& w, int count, Rng& rng) {
  Tensor s = Tensor::zeros({count, w.obs_dim()});
  for (double& v : s.data) v = rng.gaussian();
  return s;
}

// observations = semantics . mixing^T  (each row is M s).
inline Tensor observe(const LinearWorld& w, const Tensor& semantics) {
  Tensor obs = Tensor::zeros(semantics.shape);
  as_matrix(obs, semantics.shape[0], semantics.shape[1]).noalias() =
      as_matrix(semantics, semantics.shape[0], semantics.shape[1]) *
      as_matrix(w.mixing, w.obs_dim(), w.obs_dim()).transpose();
  return obs;
}

// lambda[i][j]: fraction of semantic j's variance explained by code part
// i, measured as the R^2 of a least-squares regression with intercept.
// Scale-invariant in the code by construction.
struct SemanticRateMatrix {
  Tensor lambda;  // n x n

  double max_offdiag() const {
    double worst = 0.0;
    const int n = lambda.shape[0];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j) worst = std::max(worst, lambda.at(i, j));
    return worst;
  }
  double min_diag() const {
    double worst = 1.0;
    for (int i = 0; i < lambda.shape[0]; ++i) worst = std::min(worst, lambda.at(i, i));
    return worst;
  }
};

inline nlohmann::json rates_to_json(const SemanticRateMatrix& m) {
  const int n = m.lambda.shape[0];
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < n; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < n; ++j) row.push_back(m.lambda.at(i, j));
    rows.push_back(row);
  }
  return nlohmann::json{{"lambda", rows},
                        {"max_offdiag", m.max_offdiag()},
                        {"min_diag", m.min_diag()}};
}

// Measures the semantic-rate matrix of a linear encoder (obs -> code,
// applied as code = obs . encoder) over freshly sampled worlds.
inline SemanticRateMatrix measure_rates(const Tensor& encoder, const LinearWorld& world,
                                        int samples, Rng& rng) {
  if (encoder.rank() != 2 || encoder.shape[0] != world.obs_dim())
    throw ShapeError("measure_rates: encoder input dim does not match the world");
  if (samples < 1000) throw Error("measure_rates: need at least 1000 samples");
  const CodeLayout layout{world.semantics, encoder.shape[1] / world.semantics};
  if (layout.dims_per_part * world.semantics != encoder.shape[1])
    throw ShapeError("measure_rates: code dim is not divisible into semantic parts");

  const Tensor semantics = sample_semantics(world, samples, rng);
  const Tensor obs = observe(world, semantics);
  const Tensor codes = matmul(obs, encoder);

  const int n = world.semantics;
  const int d = world.dims_per_semantic;
  const int m = layout.dims_per_part;
  SemanticRateMatrix out;
  out.lambda = Tensor::zeros({n, n});

  Eigen::MatrixXd design(samples, m + 1);
  for (int part = 0; part < n; ++part) {
    for (int r = 0; r < samples; ++r) {
      for (int c = 0; c < m; ++c) design(r, c) = codes.at(r, layout.lo(part) + c);
      design(r, m) = 1.0;
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    if (qr.rank() < std::min<Eigen::Index>(design.rows(), design.cols())) {
      throw Error("measure_rates: rank-deficient design for part " + std::to_string(part) +
                  " (code part has no variance)");
    }
    for (int sem = 0; sem < n; ++sem) {
      Eigen::MatrixXd target(samples, d);
      for (int r = 0; r < samples; ++r)
        for (int c = 0; c < d; ++c) target(r, c) = semantics.at(r, sem * d + c);
      const Eigen::MatrixXd fitted = design * qr.solve(target);
      const Eigen::RowVectorXd mean = target.colwise().mean();
      const double ss_res = (target - fitted).squaredNorm();
      const double ss_tot = (target.rowwise() - mean).squaredNorm();
      if (ss_tot <= 0.0) throw Error("measure_rates: semantic " + std::to_string(sem) +
                                     " has zero variance in the sample");
      out.lambda.at(part, sem) = std::max(0.0, 1.0 - ss_res / ss_tot);
    }
  }
  return out;
}

struct LinearDsdConfig {
  double alpha = 5.0;
  double lr = 5e-3;
  int batch_size = 128;
  int steps = 5000;
  int measure_every = 250;
  int measure_samples = 4000;
  std::uint64_t seed = 0;
};

struct RatePoint {
  int step = 0;
  SemanticRateMatrix rates;
  double loss = 0.0;
};

struct LinearDsdResult {
  Tensor encoder;  // obs x code
  Tensor decoder;  // code x obs
  std::vector<RatePoint> trajectory;
  bool diverged = false;
  int divergence_step = -1;
};

// Gradient descent on L_p = L_o + alpha * L_s for a linear autoencoder
// with labeled pairs drawn from every group. The run itself is the
// numerical oracle for the disentanglement proposition: with alpha > 0
// the rate matrix is driven toward the identity; the alpha = 0 control
// arm is expected to stay entangled.
inline LinearDsdResult train_linear_dsd(const LinearWorld& world, const LinearDsdConfig& cfg) {
  const int dim = world.obs_dim();
  const int n = world.semantics;
  const int d = world.dims_per_semantic;
  const CodeLayout layout = world.layout();

  Rng rng(derive_seed(cfg.seed, "linear-train"));
  Graph g;
  const NodeId in_a = g.input("obs_a", {cfg.batch_size, dim});
  const NodeId in_b = g.input("obs_b", {cfg.batch_size, dim});
  const double s = std::sqrt(6.0 / (dim + dim));
  const NodeId enc = g.param("enc", Tensor::uniform({dim, dim}, -s, s, rng));
  const NodeId dec = g.param("dec", Tensor::uniform({dim, dim}, -s, s, rng));

  const NodeId code_a = g.matmul(in_a, enc);
  const NodeId code_b = g.matmul(in_b, enc);
  const NodeId recon_a = g.matmul(code_a, dec);
  const NodeId recon_b = g.matmul(code_b, dec);
  const NodeId loss_o = g.add(g.mse(in_a, recon_a), g.mse(in_b, recon_b));
  std::vector<NodeId> roots;
  for (int k = 0; k < n; ++k) {
    auto [hyb_a, hyb_b] = build_swap(g, code_a, code_b, k, layout);
    const NodeId ls = g.add(g.mse(in_a, g.matmul(hyb_a, dec)), g.mse(in_b, g.matmul(hyb_b, dec)));
    roots.push_back(cfg.alpha > 0.0 ? g.add(loss_o, g.scale(ls, cfg.alpha)) : loss_o);
  }

  AdamState adam = AdamState::init({&g.value(enc), &g.value(dec)}, cfg.lr);

  LinearDsdResult result;
  double prev_loss = std::numeric_limits<double>::infinity();
  int rising_streak = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    const int k = rng.index(n);
    Tensor sem_a = sample_semantics(world, cfg.batch_size, rng);
    Tensor sem_b = sample_semantics(world, cfg.batch_size, rng);
    // Pairs from group k: the k-th semantic is shared, the rest free.
    for (int r = 0; r < cfg.batch_size; ++r)
      for (int c = k * d; c < (k + 1) * d; ++c) sem_b.at(r, c) = sem_a.at(r, c);
    const std::map<std::string, Tensor> feeds = {{"obs_a", observe(world, sem_a)},
                                                 {"obs_b", observe(world, sem_b)}};
    const NodeId root = roots[static_cast<std::size_t>(k)];
    g.eval(feeds, root);
    g.backward_from(root);
    std::vector<Tensor*> params = {&g.mutable_value(enc), &g.mutable_value(dec)};
    std::vector<const Tensor*> grads = {&g.grad(enc), &g.grad(dec)};
    adam_step(params, grads, adam);

    const double loss = g.value(root).data[0];
    rising_streak = loss > prev_loss ? rising_streak + 1 : 0;
    prev_loss = loss;

    if ((step + 1) % cfg.measure_every == 0 || step + 1 == cfg.steps) {
      Rng mrng(derive_seed(cfg.seed, "linear-measure", static_cast<std::uint64_t>(step)));
      RatePoint point;
      point.step = step + 1;
      point.rates = measure_rates(g.value(enc), world, cfg.measure_samples, mrng);
      point.loss = loss;
      result.trajectory.push_back(std::move(point));
    }
    if (rising_streak >= 100) {
      result.diverged = true;
      result.divergence_step = step + 1;
      break;
    }
  }
  result.encoder = g.value(enc);
  result.decoder = g.value(dec);
  return result;
}

}  // namespace dsd
