#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dsd/model.hpp"
#include "dsd/square_dataset.hpp"
#include "dsd/trainer.hpp"

namespace dsd {

// Codes for one split with the ground-truth factor class per row.
struct CodeTable {
  Tensor codes;  // rows x layout.total()
  std::vector<std::array<int, kNumFactors>> labels;
  CodeLayout layout;

  int rows() const { return codes.rank() == 2 ? codes.shape[0] : 0; }
};

// Encodes both members of every pair; row order is (a0, b0, a1, b1, ...).
inline CodeTable build_code_table(const std::vector<PairRecord>& pairs,
                                  const AutoencoderParams& params, const ModelConfig& cfg,
                                  const DatasetManifest& manifest) {
  const int d = cfg.input_dim();
  const int rows = static_cast<int>(pairs.size()) * 2;
  if (rows == 0) throw Error("code table: no pairs to encode");
  Tensor images = Tensor::zeros({rows, d});
  CodeTable table;
  table.layout = cfg.layout;
  table.labels.reserve(static_cast<std::size_t>(rows));
  for (int i = 0; i < static_cast<int>(pairs.size()); ++i) {
    const PairRecord& rec = pairs[static_cast<std::size_t>(i)];
    std::copy(rec.image_a.data.begin(), rec.image_a.data.end(),
              images.data.begin() + static_cast<std::ptrdiff_t>(2 * i) * d);
    std::copy(rec.image_b.data.begin(), rec.image_b.data.end(),
              images.data.begin() + static_cast<std::ptrdiff_t>(2 * i + 1) * d);
    for (const SquareFactors* f : {&rec.factors_a, &rec.factors_b}) {
      std::array<int, kNumFactors> cls{};
      for (int factor = 0; factor < kNumFactors; ++factor)
        cls[static_cast<std::size_t>(factor)] = factor_class(*f, factor, manifest);
      table.labels.push_back(cls);
    }
  }
  table.codes = encode_batch(images, params, cfg);
  return table;
}

// Majority-vote kNN with Euclidean distance. Ties on distance resolve by
// train-row order, ties on votes by the lowest class index, so the
// result is deterministic and invariant to permutations of the table.
inline double knn_accuracy(const CodeTable& train, const CodeTable& test, int part,
                           int target_factor, int k_neighbors = 5) {
  if (!(train.layout == test.layout)) throw Error("knn: layouts differ");
  if (train.rows() == 0 || test.rows() == 0) throw Error("knn: empty code table");
  if (target_factor < 0 || target_factor >= kNumFactors) throw Error("knn: unknown factor");
  if (k_neighbors < 1) throw Error("knn: k_neighbors must be >= 1");
  const int total = train.layout.total();
  int lo = 0, hi = total;
  if (part >= 0) {
    if (part >= train.layout.parts) throw Error("knn: part index out of range");
    lo = train.layout.lo(part);
    hi = train.layout.hi(part);
  }
  const int n_train = train.rows();
  const int n_test = test.rows();
  const int k = std::min(k_neighbors, n_train);

  int max_class = 0;
  for (const auto& l : train.labels)
    max_class = std::max(max_class, l[static_cast<std::size_t>(target_factor)]);
  std::vector<int> votes(static_cast<std::size_t>(max_class) + 1);

  std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(n_train));
  int hits = 0;
  for (int q = 0; q < n_test; ++q) {
    const double* qrow = test.codes.data.data() + static_cast<std::size_t>(q) * total;
    for (int t = 0; t < n_train; ++t) {
      const double* trow = train.codes.data.data() + static_cast<std::size_t>(t) * total;
      double acc = 0.0;
      for (int c = lo; c < hi; ++c) {
        const double d = qrow[c] - trow[c];
        acc += d * d;
      }
      dist[static_cast<std::size_t>(t)] = {acc, t};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    std::fill(votes.begin(), votes.end(), 0);
    for (int i = 0; i < k; ++i) {
      const int cls = train.labels[static_cast<std::size_t>(dist[static_cast<std::size_t>(i)].second)]
                                  [static_cast<std::size_t>(target_factor)];
      ++votes[static_cast<std::size_t>(cls)];
    }
    int best_class = 0;
    for (std::size_t c = 1; c < votes.size(); ++c)
      if (votes[c] > votes[static_cast<std::size_t>(best_class)]) best_class = static_cast<int>(c);
    const int truth = test.labels[static_cast<std::size_t>(q)][static_cast<std::size_t>(target_factor)];
    if (best_class == truth) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n_test);
}

// q/p table: accuracy of every factor from every single part, plus from
// the whole code.
struct AccuracyReport {
  std::vector<std::vector<double>> part_factor;  // [part][factor]
  std::vector<double> whole;                     // [factor]
};

inline AccuracyReport evaluate_codes(const CodeTable& train, const CodeTable& test,
                                     int k_neighbors = 5) {
  AccuracyReport r;
  const int n = train.layout.parts;
  r.part_factor.assign(static_cast<std::size_t>(n),
                       std::vector<double>(static_cast<std::size_t>(kNumFactors), 0.0));
  r.whole.assign(static_cast<std::size_t>(kNumFactors), 0.0);
  for (int factor = 0; factor < kNumFactors; ++factor) {
    for (int part = 0; part < n; ++part)
      r.part_factor[static_cast<std::size_t>(part)][static_cast<std::size_t>(factor)] =
          knn_accuracy(train, test, part, factor, k_neighbors);
    r.whole[static_cast<std::size_t>(factor)] = knn_accuracy(train, test, -1, factor, k_neighbors);
  }
  return r;
}

// Mean over factors of the designated part's accuracy (the paper's q).
inline double mean_partwise(const AccuracyReport& r) {
  double acc = 0.0;
  int n = 0;
  for (std::size_t k = 0; k < r.part_factor.size() && k < r.whole.size(); ++k) {
    if (k < static_cast<std::size_t>(kNumFactors)) {
      acc += r.part_factor[k][k];
      ++n;
    }
  }
  return n ? acc / n : 0.0;
}

inline nlohmann::json accuracy_report_to_json(const AccuracyReport& r) {
  return nlohmann::json{{"part_factor", r.part_factor},
                        {"whole", r.whole},
                        {"mean_partwise", mean_partwise(r)}};
}

// --- portable pixmap output ------------------------------------------------

// Affine map from [-1, 1] to [0, 255], rounding half up.
inline unsigned char pixel_to_byte(double v) {
  const double scaled = std::floor((v + 1.0) * 0.5 * 255.0 + 0.5);
  return static_cast<unsigned char>(std::clamp(scaled, 0.0, 255.0));
}

inline void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.shape[0] != 3) throw Error("ppm: expected a {3,H,W} tensor");
  const int h = image.shape[1], w = image.shape[2];
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("ppm: cannot open '" + path + "'");
  os << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        row[static_cast<std::size_t>(c) * 3 + ch] =
            pixel_to_byte(image.data[plane * ch + static_cast<std::size_t>(r) * w + c]);
      }
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw IoError("ppm: write failed for '" + path + "'");
}

// Rows of (I_A, I_B, hybrid_A, hybrid_B) tiles for the requested part.
inline Tensor hybrid_grid_image(const std::vector<PairRecord>& pairs,
                                const AutoencoderParams& params, const ModelConfig& cfg, int k) {
  if (pairs.empty()) throw Error("hybrid grid: no pairs");
  const int canvas = cfg.canvas;
  const int rows = static_cast<int>(pairs.size());
  Tensor grid = Tensor::zeros({3, rows * canvas, 4 * canvas});
  const auto blit = [&](const Tensor& tile, int row, int col) {
    for (int ch = 0; ch < 3; ++ch)
      for (int r = 0; r < canvas; ++r)
        for (int c = 0; c < canvas; ++c) {
          grid.data[(static_cast<std::size_t>(ch) * rows * canvas + row * canvas + r) *
                        (4 * canvas) +
                    static_cast<std::size_t>(col) * canvas + c] =
              tile.data[(static_cast<std::size_t>(ch) * canvas + r) * canvas + c];
        }
  };
  for (int i = 0; i < rows; ++i) {
    const PairRecord& rec = pairs[static_cast<std::size_t>(i)];
    const Code code_a = encode(rec.image_a, params, cfg);
    const Code code_b = encode(rec.image_b, params, cfg);
    auto [hyb_a, hyb_b] = swap_part(code_a, code_b, k);
    blit(rec.image_a, i, 0);
    blit(rec.image_b, i, 1);
    blit(decode(hyb_a, params, cfg), i, 2);
    blit(decode(hyb_b, params, cfg), i, 3);
  }
  return grid;
}

inline void hybrid_grid(const std::vector<PairRecord>& pairs, const AutoencoderParams& params,
                        const ModelConfig& cfg, int k, const std::string& path) {
  write_ppm(path, hybrid_grid_image(pairs, params, cfg, k));
}

// --- supervision-rate sweep and the primary/dual ablation ------------------

// In-memory dataset generation, shared by sweep arms and tests.
inline SquareDataset generate_dataset(const DatasetManifest& m) {
  m.validate();
  SquareDataset ds;
  ds.manifest = m;
  {
    Rng rng(derive_seed(m.seed, "split-train"));
    ds.train = generate_split(m, m.train_pairs, m.labeled_train_pairs(), rng);
  }
  {
    Rng rng(derive_seed(m.seed, "split-val"));
    ds.val =
        generate_split(m, m.val_pairs, static_cast<int>(m.supervision_rate * m.val_pairs), rng);
  }
  {
    Rng rng(derive_seed(m.seed, "split-test"));
    ds.test =
        generate_split(m, m.test_pairs, static_cast<int>(m.supervision_rate * m.test_pairs), rng);
  }
  return ds;
}

struct ArmResult {
  double rate = 0.0;
  std::uint64_t seed = 0;
  bool dual_swap = true;
  AccuracyReport report;
  double final_val_recon = 0.0;
  std::vector<StepReport> curve;
};

// Trains one (rate, seed, framework) arm on a freshly generated dataset
// and evaluates the kNN table on the test split.
inline ArmResult run_arm(const DatasetManifest& base_manifest, const ModelConfig& model_cfg,
                         const TrainConfig& base_cfg, double rate, std::uint64_t seed_index,
                         bool dual_swap, const std::string& out_dir = {}) {
  DatasetManifest manifest = base_manifest;
  manifest.supervision_rate = rate;
  manifest.seed = derive_seed(base_manifest.seed, "arm-data", seed_index);
  TrainConfig cfg = base_cfg;
  cfg.supervision_rate = rate;
  cfg.seed = derive_seed(base_cfg.seed, "arm-train", seed_index);
  cfg.dual_swap = dual_swap;

  const SquareDataset data = generate_dataset(manifest);
  FitOptions opts;
  opts.out_dir = out_dir;
  FitResult fitres = fit(model_cfg, cfg, data, opts);

  const CodeTable train_codes = build_code_table(data.train, fitres.final_params, model_cfg, manifest);
  const CodeTable test_codes = build_code_table(data.test, fitres.final_params, model_cfg, manifest);

  ArmResult arm;
  arm.rate = rate;
  arm.seed = seed_index;
  arm.dual_swap = dual_swap;
  arm.report = evaluate_codes(train_codes, test_codes);
  arm.final_val_recon = fitres.val_recon.empty() ? 0.0 : fitres.val_recon.back();
  arm.curve = std::move(fitres.reports);
  return arm;
}

struct RateSummary {
  double rate = 0.0;
  std::vector<ArmResult> arms;  // one per seed
  double mean_partwise = 0.0;
  double min_partwise = 0.0;
  double max_partwise = 0.0;
};

inline RateSummary summarize_rate(double rate, std::vector<ArmResult> arms) {
  RateSummary s;
  s.rate = rate;
  s.arms = std::move(arms);
  s.mean_partwise = 0.0;
  s.min_partwise = 1.0;
  s.max_partwise = 0.0;
  for (const ArmResult& a : s.arms) {
    const double v = mean_partwise(a.report);
    s.mean_partwise += v;
    s.min_partwise = std::min(s.min_partwise, v);
    s.max_partwise = std::max(s.max_partwise, v);
  }
  if (!s.arms.empty()) s.mean_partwise /= static_cast<double>(s.arms.size());
  return s;
}

inline nlohmann::json rate_summary_to_json(const RateSummary& s) {
  nlohmann::json arms = nlohmann::json::array();
  for (const ArmResult& a : s.arms) {
    arms.push_back({{"seed", a.seed},
                    {"dual_swap", a.dual_swap},
                    {"final_val_recon", a.final_val_recon},
                    {"report", accuracy_report_to_json(a.report)}});
  }
  return nlohmann::json{{"rate", s.rate},
                        {"mean_partwise", s.mean_partwise},
                        {"min_partwise", s.min_partwise},
                        {"max_partwise", s.max_partwise},
                        {"arms", arms}};
}

// One summary per rate, each averaged over `num_seeds` independent arms.
// Arms are independent; `jobs` bounds how many train concurrently.
inline std::vector<RateSummary> supervision_sweep(const std::vector<double>& rates,
                                                  const DatasetManifest& manifest,
                                                  const ModelConfig& model_cfg,
                                                  const TrainConfig& base_cfg, int num_seeds,
                                                  int jobs = 1) {
  for (double r : rates)
    if (r < 0.0 || r > 1.0) throw Error("sweep: rates must lie in [0,1]");
  if (num_seeds < 1) throw Error("sweep: need at least one seed");

  struct Task {
    std::size_t rate_index;
    double rate;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (std::size_t ri = 0; ri < rates.size(); ++ri)
    for (int s = 0; s < num_seeds; ++s)
      tasks.push_back({ri, rates[ri], static_cast<std::uint64_t>(s)});

  std::vector<ArmResult> results(tasks.size());
  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
  std::atomic<std::size_t> next{0};
  const auto worker = [&]() {
    for (;;) {
      const std::size_t t = next.fetch_add(1);
      if (t >= tasks.size()) return;
      results[t] = run_arm(manifest, model_cfg, base_cfg, tasks[t].rate, tasks[t].seed, true);
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  std::vector<RateSummary> out;
  for (std::size_t ri = 0; ri < rates.size(); ++ri) {
    std::vector<ArmResult> arms;
    for (std::size_t t = 0; t < tasks.size(); ++t)
      if (tasks[t].rate_index == ri) arms.push_back(std::move(results[t]));
    out.push_back(summarize_rate(rates[ri], std::move(arms)));
  }
  return out;
}

struct AblationResult {
  RateSummary dual;
  RateSummary primary;
};

// Same data and seeds for both arms; the only difference is whether the
// unlabeled phase swaps (dual) or reduces to plain reconstruction.
inline AblationResult ablation_primary_vs_dual(const DatasetManifest& manifest,
                                               const ModelConfig& model_cfg,
                                               const TrainConfig& base_cfg, double rate,
                                               int num_seeds) {
  AblationResult result;
  std::vector<ArmResult> dual_arms, primary_arms;
  for (int s = 0; s < num_seeds; ++s) {
    dual_arms.push_back(
        run_arm(manifest, model_cfg, base_cfg, rate, static_cast<std::uint64_t>(s), true));
    primary_arms.push_back(
        run_arm(manifest, model_cfg, base_cfg, rate, static_cast<std::uint64_t>(s), false));
  }
  result.dual = summarize_rate(rate, std::move(dual_arms));
  result.primary = summarize_rate(rate, std::move(primary_arms));
  return result;
}

}  // namespace dsd
