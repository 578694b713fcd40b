#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dsd/adam.hpp"
#include "dsd/graph.hpp"
#include "dsd/losses.hpp"
#include "dsd/model.hpp"
#include "dsd/square_dataset.hpp"

namespace dsd {

struct TrainConfig {
  double alpha = 5.0;             // swap-loss balance
  double beta = 0.2;              // dual-loss balance
  double lr = 1e-4;
  int batch_size = 64;
  int epochs = 100;
  double supervision_rate = 1.0;  // informational; the dataset carries the labels
  std::uint64_t seed = 0;
  bool couple_swap_index = true;  // unlabeled swap reuses the labeled batch's k
  bool dual_swap = true;          // false = primary framework (no unlabeled swap)
  int checkpoint_every = 0;       // epochs; 0 = final checkpoint only

  void validate() const {
    if (alpha < 0.0 || beta < 0.0) throw Error("train config: alpha/beta must be >= 0");
    if (supervision_rate < 0.0 || supervision_rate > 1.0)
      throw Error("train config: supervision_rate must be in [0,1]");
    if (batch_size <= 0 || epochs < 0) throw Error("train config: bad batch size or epochs");
    if (lr < 0.0) throw Error("train config: negative learning rate");
  }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"alpha", c.alpha},
                        {"beta", c.beta},
                        {"lr", c.lr},
                        {"batch_size", c.batch_size},
                        {"epochs", c.epochs},
                        {"supervision_rate", c.supervision_rate},
                        {"seed", c.seed},
                        {"couple_swap_index", c.couple_swap_index},
                        {"dual_swap", c.dual_swap},
                        {"checkpoint_every", c.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  const auto fetch = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(out);
    } catch (const nlohmann::json::exception&) {
      throw IoError(std::string("train config: invalid value for key '") + key + "'");
    }
  };
  fetch("alpha", c.alpha);
  fetch("beta", c.beta);
  fetch("lr", c.lr);
  fetch("batch_size", c.batch_size);
  fetch("epochs", c.epochs);
  fetch("supervision_rate", c.supervision_rate);
  fetch("seed", c.seed);
  fetch("couple_swap_index", c.couple_swap_index);
  fetch("dual_swap", c.dual_swap);
  fetch("checkpoint_every", c.checkpoint_every);
  c.validate();
  return c;
}

// Loss roots of the dual-swap objective over a pair of input nodes.
// Index k selects which code part an iteration swaps.
struct DsdLossRoots {
  NodeId original = 0;              // L_o
  std::vector<NodeId> swap_term;    // L_s per k
  std::vector<NodeId> primary;      // L_p = L_o + alpha * L_s per k
  std::vector<NodeId> dual_term;    // L_d per k
  std::vector<NodeId> unlabeled;    // L_u = L_o + beta * L_d per k
};

inline DsdLossRoots build_dsd_losses(Graph& g, const ModelConfig& cfg, const GraphParams& gp,
                                     NodeId in_a, NodeId in_b, double alpha, double beta) {
  const int n = cfg.layout.parts;
  DsdLossRoots roots;
  const NodeId code_a = build_encoder(g, cfg, gp, in_a);
  const NodeId code_b = build_encoder(g, cfg, gp, in_b);
  const NodeId recon_a = build_decoder(g, cfg, gp, code_a);
  const NodeId recon_b = build_decoder(g, cfg, gp, code_b);
  roots.original = g.add(g.mse(in_a, recon_a), g.mse(in_b, recon_b));

  roots.swap_term.reserve(static_cast<std::size_t>(n));
  roots.primary.reserve(static_cast<std::size_t>(n));
  roots.dual_term.reserve(static_cast<std::size_t>(n));
  roots.unlabeled.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    auto [hyb_a, hyb_b] = build_swap(g, code_a, code_b, k, cfg.layout);
    const NodeId hybrid_a = build_decoder(g, cfg, gp, hyb_a);
    const NodeId hybrid_b = build_decoder(g, cfg, gp, hyb_b);
    const NodeId ls = g.add(g.mse(in_a, hybrid_a), g.mse(in_b, hybrid_b));
    roots.swap_term.push_back(ls);
    roots.primary.push_back(g.add(roots.original, g.scale(ls, alpha)));

    // Dual stage: re-encode the hybrids, swap part k back, decode.
    const NodeId second_a = build_encoder(g, cfg, gp, hybrid_a);
    const NodeId second_b = build_encoder(g, cfg, gp, hybrid_b);
    auto [back_a, back_b] = build_swap(g, second_a, second_b, k, cfg.layout);
    const NodeId final_a = build_decoder(g, cfg, gp, back_a);
    const NodeId final_b = build_decoder(g, cfg, gp, back_b);
    const NodeId ld = g.add(g.mse(in_a, final_a), g.mse(in_b, final_b));
    roots.dual_term.push_back(ld);
    roots.unlabeled.push_back(g.add(roots.original, g.scale(ld, beta)));
  }
  return roots;
}

enum class Phase { kLabeled, kUnlabeled };

struct StepReport {
  int epoch = 0;
  int iteration = 0;
  Phase phase = Phase::kLabeled;
  int k = 0;
  double original = 0.0;  // L_o
  double aux = 0.0;       // L_s (labeled) or L_d (unlabeled)
  double total = 0.0;
  double wall_ms = 0.0;
};

inline nlohmann::json step_report_to_json(const StepReport& r) {
  nlohmann::json j{{"epoch", r.epoch},
                   {"iter", r.iteration},
                   {"phase", r.phase == Phase::kLabeled ? "labeled" : "unlabeled"},
                   {"k", r.k},
                   {"lo", r.original},
                   {"total", r.total},
                   {"wall_ms", r.wall_ms}};
  j[r.phase == Phase::kLabeled ? "ls" : "ld"] = r.aux;
  return j;
}

// Runs Algorithm-1 style training: per iteration one labeled update on
// L_p = L_o + alpha*L_s, then one unlabeled update on L_u = L_o +
// beta*L_d (or plain L_o for the primary framework). Owns the parameters
// exclusively while training; instances are independent.
class Trainer {
 public:
  Trainer(ModelConfig model_cfg, TrainConfig train_cfg, AutoencoderParams initial)
      : model_cfg_(std::move(model_cfg)), cfg_(std::move(train_cfg)) {
    model_cfg_.validate();
    cfg_.validate();
    build_graph(initial);
    std::vector<const Tensor*> param_views;
    for (NodeId id : graph_params_.ids) param_views.push_back(&graph_.value(id));
    adam_ = AdamState::init(param_views, cfg_.lr);
  }

  const ModelConfig& model_config() const { return model_cfg_; }
  const TrainConfig& config() const { return cfg_; }
  AdamState& optimizer() { return adam_; }

  AutoencoderParams params() const {
    AutoencoderParams p;
    for (std::size_t i = 0; i < graph_params_.ids.size(); ++i)
      p.tensors.emplace_back(graph_params_.names[i], graph_.value(graph_params_.ids[i]));
    return p;
  }

  void load_params(const AutoencoderParams& p) {
    if (p.tensors.size() != graph_params_.ids.size())
      throw Error("trainer: checkpoint parameter count does not match the model");
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
      if (p.tensors[i].first != graph_params_.names[i] ||
          p.tensors[i].second.shape != graph_.value(graph_params_.ids[i]).shape)
        throw Error("trainer: checkpoint tensor '" + p.tensors[i].first + "' does not match");
      graph_.mutable_value(graph_params_.ids[i]) = p.tensors[i].second;
    }
  }

  // One epoch: a pass over the unlabeled pairs (or the labeled ones when
  // no unlabeled pair exists), with labeled batches resampled per
  // iteration from the group the shared k selects.
  std::vector<StepReport> train_epoch(const SquareDataset& data, int epoch) {
    const std::vector<PairRecord>& pairs = data.train;
    if (pairs.empty()) throw Error("train_epoch: empty training split");
    const int n = model_cfg_.layout.parts;

    std::vector<std::vector<int>> groups(static_cast<std::size_t>(n));
    std::vector<int> unlabeled;
    for (int i = 0; i < static_cast<int>(pairs.size()); ++i) {
      const int label = pairs[static_cast<std::size_t>(i)].label;
      if (label < 0) {
        unlabeled.push_back(i);
      } else if (label < n) {
        groups[static_cast<std::size_t>(label)].push_back(i);
      } else {
        throw Error("train_epoch: pair label " + std::to_string(label) +
                    " exceeds the code layout's " + std::to_string(n) + " parts");
      }
    }
    std::vector<int> nonempty_groups;
    for (int k = 0; k < n; ++k)
      if (!groups[static_cast<std::size_t>(k)].empty()) nonempty_groups.push_back(k);
    const bool has_labeled = !nonempty_groups.empty();
    const bool has_unlabeled = !unlabeled.empty();
    if (!has_labeled && !has_unlabeled) throw Error("train_epoch: no usable pairs");

    Rng rng(derive_seed(cfg_.seed, "epoch", static_cast<std::uint64_t>(epoch)));
    shuffle(unlabeled, rng);

    const int active = has_unlabeled ? static_cast<int>(unlabeled.size())
                                     : static_cast<int>(pairs.size() - unlabeled.size());
    const int iterations = std::max(1, active / cfg_.batch_size);

    std::vector<StepReport> reports;
    reports.reserve(static_cast<std::size_t>(iterations) * 2);
    for (int it = 0; it < iterations; ++it) {
      int shared_k = -1;
      if (has_labeled) {
        shared_k = nonempty_groups[static_cast<std::size_t>(rng.index(
            static_cast<int>(nonempty_groups.size())))];
        const auto& group = groups[static_cast<std::size_t>(shared_k)];
        std::vector<int> batch(static_cast<std::size_t>(cfg_.batch_size));
        for (int& idx : batch) idx = group[static_cast<std::size_t>(
            rng.index(static_cast<int>(group.size())))];
        reports.push_back(run_step(pairs, batch, Phase::kLabeled, shared_k, epoch, it));
      }
      if (has_unlabeled) {
        const int k = (cfg_.couple_swap_index && shared_k >= 0) ? shared_k : rng.index(n);
        std::vector<int> batch;
        const int base = it * cfg_.batch_size;
        for (int b = 0; b < cfg_.batch_size; ++b)
          batch.push_back(unlabeled[static_cast<std::size_t>((base + b) %
                                                             static_cast<int>(unlabeled.size()))]);
        reports.push_back(run_step(pairs, batch, Phase::kUnlabeled, k, epoch, it));
      }
    }
    return reports;
  }

  // Mean per-element reconstruction error over a split; the overfitting
  // signal logged once per epoch.
  double validation_recon(const std::vector<PairRecord>& pairs) {
    if (pairs.empty()) return 0.0;
    const AutoencoderParams p = params();
    const int d = model_cfg_.input_dim();
    double acc = 0.0;
    std::size_t count = 0;
    const int chunk = 256;
    for (std::size_t start = 0; start < pairs.size() * 2; start += chunk) {
      const std::size_t rows = std::min<std::size_t>(chunk, pairs.size() * 2 - start);
      Tensor batch = Tensor::zeros({static_cast<int>(rows), d});
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t flat = start + r;
        const PairRecord& rec = pairs[flat / 2];
        const Tensor& img = (flat % 2 == 0) ? rec.image_a : rec.image_b;
        std::copy(img.data.begin(), img.data.end(),
                  batch.data.begin() + static_cast<std::ptrdiff_t>(r) * d);
      }
      Tensor recon = decode_batch(encode_batch(batch, p, model_cfg_), p, model_cfg_);
      acc += squared_error(batch, recon, LossNorm::kUnnormalized);
      count += rows * static_cast<std::size_t>(d);
    }
    return acc / static_cast<double>(count);
  }

 private:
  static void shuffle(std::vector<int>& v, Rng& rng) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      const int j = rng.index(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

  void build_graph(const AutoencoderParams& initial) {
    const int b = cfg_.batch_size;
    const int d = model_cfg_.input_dim();
    input_a_ = graph_.input("image_a", {b, d});
    input_b_ = graph_.input("image_b", {b, d});
    graph_params_ = register_params(graph_, initial);
    roots_ = build_dsd_losses(graph_, model_cfg_, graph_params_, input_a_, input_b_, cfg_.alpha,
                              cfg_.beta);
    graph_.mark_output("loss_original", roots_.original);
  }

  StepReport run_step(const std::vector<PairRecord>& pairs, const std::vector<int>& batch,
                      Phase phase, int k, int epoch, int iteration) {
    const auto t0 = std::chrono::steady_clock::now();
    const int d = model_cfg_.input_dim();
    Tensor feed_a = Tensor::zeros({cfg_.batch_size, d});
    Tensor feed_b = Tensor::zeros({cfg_.batch_size, d});
    for (int r = 0; r < cfg_.batch_size; ++r) {
      const PairRecord& rec = pairs[static_cast<std::size_t>(batch[static_cast<std::size_t>(r)])];
      std::copy(rec.image_a.data.begin(), rec.image_a.data.end(),
                feed_a.data.begin() + static_cast<std::ptrdiff_t>(r) * d);
      std::copy(rec.image_b.data.begin(), rec.image_b.data.end(),
                feed_b.data.begin() + static_cast<std::ptrdiff_t>(r) * d);
    }
    const std::map<std::string, Tensor> feeds = {{"image_a", std::move(feed_a)},
                                                 {"image_b", std::move(feed_b)}};

    NodeId root;
    if (phase == Phase::kLabeled) {
      root = roots_.primary[static_cast<std::size_t>(k)];
    } else {
      root = cfg_.dual_swap ? roots_.unlabeled[static_cast<std::size_t>(k)] : roots_.original;
    }
    graph_.eval(feeds, root);
    graph_.backward_from(root);

    std::vector<Tensor*> param_values;
    std::vector<const Tensor*> param_grads;
    for (NodeId id : graph_params_.ids) {
      param_values.push_back(&graph_.mutable_value(id));
      param_grads.push_back(&graph_.grad(id));
    }
    adam_step(param_values, param_grads, adam_);

    StepReport r;
    r.epoch = epoch;
    r.iteration = iteration;
    r.phase = phase;
    r.k = k;
    r.original = graph_.value(roots_.original).data[0];
    if (phase == Phase::kLabeled) {
      r.aux = graph_.value(roots_.swap_term[static_cast<std::size_t>(k)]).data[0];
    } else {
      r.aux = cfg_.dual_swap ? graph_.value(roots_.dual_term[static_cast<std::size_t>(k)]).data[0]
                             : 0.0;
    }
    r.total = graph_.value(root).data[0];
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    return r;
  }

  ModelConfig model_cfg_;
  TrainConfig cfg_;
  Graph graph_;
  GraphParams graph_params_;
  AdamState adam_{};
  NodeId input_a_ = 0;
  NodeId input_b_ = 0;
  DsdLossRoots roots_;
};

// --- full runs with metrics and checkpoints -------------------------------

struct TrainingState {
  AutoencoderParams params;
  AdamState adam;
  int next_epoch = 0;
};

inline void save_training_state(const std::string& path, const Trainer& trainer,
                                const AdamState& adam, int next_epoch) {
  const AutoencoderParams p = trainer.params();
  ckpt::NamedTensors out = p.tensors;
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    out.emplace_back("opt.m." + p.tensors[i].first, adam.first_moment[i]);
    out.emplace_back("opt.v." + p.tensors[i].first, adam.second_moment[i]);
  }
  out.emplace_back("meta", Tensor({2}, {static_cast<double>(next_epoch),
                                        static_cast<double>(adam.step)}));
  ckpt::save(path, out);
}

inline AutoencoderParams params_from_checkpoint(const ckpt::NamedTensors& tensors) {
  AutoencoderParams p;
  for (const auto& [name, tensor] : tensors) {
    if (name.rfind("opt.", 0) == 0 || name == "meta") continue;
    p.tensors.emplace_back(name, tensor);
  }
  return p;
}

inline TrainingState load_training_state(const std::string& path, double lr) {
  const ckpt::NamedTensors tensors = ckpt::load(path);
  TrainingState s;
  s.params = params_from_checkpoint(tensors);
  std::vector<const Tensor*> views;
  for (const auto& [name, tensor] : s.params.tensors) views.push_back(&tensor);
  s.adam = AdamState::init(views, lr);
  for (std::size_t i = 0; i < s.params.tensors.size(); ++i) {
    const Tensor* m = ckpt::find(tensors, "opt.m." + s.params.tensors[i].first);
    const Tensor* v = ckpt::find(tensors, "opt.v." + s.params.tensors[i].first);
    if (!m || !v) throw IoError("checkpoint: optimizer state missing for resume");
    s.adam.first_moment[i] = *m;
    s.adam.second_moment[i] = *v;
  }
  if (const Tensor* meta = ckpt::find(tensors, "meta")) {
    s.next_epoch = static_cast<int>(meta->data[0]);
    s.adam.step = static_cast<std::int64_t>(meta->data[1]);
  } else {
    throw IoError("checkpoint: missing meta record for resume");
  }
  return s;
}

struct FitResult {
  std::vector<StepReport> reports;
  std::vector<double> val_recon;  // one entry per epoch
  AutoencoderParams final_params;
};

struct FitOptions {
  std::string out_dir;          // empty = no files written
  bool write_metrics = true;
  std::string resume_checkpoint;
};

// Trains for config.epochs epochs, streaming JSON-lines metrics and
// periodic checkpoints. On a numerical failure the last written
// checkpoint stays on disk and the error propagates.
inline FitResult fit(const ModelConfig& model_cfg, const TrainConfig& cfg,
                     const SquareDataset& data, const FitOptions& opts = {}) {
  namespace fs = std::filesystem;
  Rng init_rng(derive_seed(cfg.seed, "init"));
  AutoencoderParams initial = AutoencoderParams::init(model_cfg, init_rng);
  int start_epoch = 0;

  Trainer trainer(model_cfg, cfg, initial);
  if (!opts.resume_checkpoint.empty()) {
    TrainingState state = load_training_state(opts.resume_checkpoint, cfg.lr);
    trainer.load_params(state.params);
    AdamState& adam = trainer.optimizer();
    adam.step = state.adam.step;
    adam.first_moment = std::move(state.adam.first_moment);
    adam.second_moment = std::move(state.adam.second_moment);
    start_epoch = state.next_epoch;
  }

  std::ofstream metrics;
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    if (opts.write_metrics) {
      const auto mode = opts.resume_checkpoint.empty() ? std::ios::trunc : std::ios::app;
      metrics.open(fs::path(opts.out_dir) / "metrics.jsonl", mode);
      if (!metrics) throw IoError("fit: cannot open metrics file in '" + opts.out_dir + "'");
    }
  }

  FitResult result;
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<StepReport> reports = trainer.train_epoch(data, epoch);
    const double val = trainer.validation_recon(data.val);
    result.val_recon.push_back(val);
    if (metrics.is_open()) {
      for (const StepReport& r : reports) metrics << step_report_to_json(r).dump() << '\n';
      metrics << nlohmann::json{{"epoch", epoch}, {"phase", "val"}, {"recon_mse", val}}.dump()
              << '\n';
      metrics.flush();
    }
    for (StepReport& r : reports) result.reports.push_back(std::move(r));
    if (!opts.out_dir.empty() && cfg.checkpoint_every > 0 &&
        (epoch + 1) % cfg.checkpoint_every == 0) {
      save_training_state((fs::path(opts.out_dir) / "checkpoint_last.dsdw").string(), trainer,
                          trainer.optimizer(), epoch + 1);
    }
  }
  result.final_params = trainer.params();
  if (!opts.out_dir.empty()) {
    save_training_state((fs::path(opts.out_dir) / "checkpoint_final.dsdw").string(), trainer,
                        trainer.optimizer(), cfg.epochs);
    std::ofstream mc(fs::path(opts.out_dir) / "model.json");
    mc << model_config_to_json(model_cfg).dump(2) << '\n';
    std::ofstream tc(fs::path(opts.out_dir) / "train_config.json");
    tc << train_config_to_json(cfg).dump(2) << '\n';
  }
  return result;
}

}  // namespace dsd
