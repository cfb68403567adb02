#pragma once
// Optimizers (SGD, bias-corrected Adam), the inverse-sqrt warmup schedule,
// synthetic seq2seq tasks, and a deterministic training loop with divergence
// detection, per-epoch checkpointing, and per-epoch norm bookkeeping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tlab/blocks.hpp"
#include "tlab/checkpoint.hpp"
#include "tlab/rng.hpp"

namespace tlab {

// ---------------------------------------------------------------------------
// Optimizers and schedule

enum class OptimKind { SGD, Adam };

inline const char* to_string(OptimKind k) { return k == OptimKind::SGD ? "sgd" : "adam"; }

inline OptimKind optim_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptimKind::SGD;
  if (s == "adam") return OptimKind::Adam;
  throw std::invalid_argument("unknown optimizer kind: " + s);
}

struct OptimConfig {
  OptimKind kind = OptimKind::Adam;
  double lr_max = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps_adam = 1e-8;
  int warmup_steps = 8000;   // scaled down for desk-size runs by callers
  double weight_decay = 0.0; // L2 term added to the raw gradient when nonzero
};

// Linear ramp to lr_max over the warmup window, then inverse-sqrt decay.
// warmup_steps <= 0 disables the schedule entirely (constant lr_max), which
// is what the SGD-proportionality diagnostics run with.
inline double lr_schedule(std::int64_t t, const OptimConfig& cfg) {
  if (t < 1) throw std::invalid_argument("lr_schedule: step count starts at 1");
  if (cfg.warmup_steps <= 0) return cfg.lr_max;
  double w = static_cast<double>(cfg.warmup_steps);
  double td = static_cast<double>(t);
  return td <= w ? cfg.lr_max * td / w : cfg.lr_max * std::sqrt(w / td);
}

// First/second moments per parameter, in the model's canonical parameter
// order, plus the shared step counter.
struct OptimState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;
};

inline OptimState make_optim_state(const Model& model) {
  OptimState st;
  for (auto& [name, p] : model.named_params()) {
    st.m.emplace_back(p.values().size(), 0.0);
    st.v.emplace_back(p.values().size(), 0.0);
  }
  return st;
}

inline void sgd_step(Model& model, double lr, double weight_decay = 0.0) {
  for (auto& [name, p] : model.named_params()) {
    auto& w = p.values();
    const auto& g = p.grad();
    for (std::size_t k = 0; k < w.size(); ++k)
      w[k] -= lr * (g[k] + weight_decay * w[k]);
  }
}

inline void adam_step(Model& model, OptimState& st, double lr, const OptimConfig& cfg) {
  auto params = model.named_params();
  if (st.m.size() != params.size() || st.v.size() != params.size())
    throw std::invalid_argument("adam_step: state does not match the model's parameters");
  st.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].second.values();
    const auto& g = params[i].second.grad();
    auto& m = st.m[i];
    auto& v = st.v[i];
    if (m.size() != w.size())
      throw std::invalid_argument("adam_step: moment shape mismatch for " + params[i].first);
    for (std::size_t k = 0; k < w.size(); ++k) {
      double gk = g[k] + cfg.weight_decay * w[k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
      double mhat = m[k] / bc1;
      double vhat = v[k] / bc2;
      w[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps_adam);
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic seq2seq tasks

enum class TaskKind { Copy, Reverse };

inline const char* to_string(TaskKind k) { return k == TaskKind::Copy ? "copy" : "reverse"; }

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "copy") return TaskKind::Copy;
  if (s == "reverse") return TaskKind::Reverse;
  throw std::invalid_argument("unknown task kind: " + s);
}

struct SyntheticTask {
  TaskKind kind = TaskKind::Copy;
  int vocab = 16;  // tokens drawn from [1, vocab-1]; 0 stays reserved for BOS
  int min_len = 4;
  int max_len = 8;
  std::uint64_t seed = 0;
};

// Fresh batch for an absolute step index. Stateless: the stream is keyed by
// (task seed, step), so resumed runs draw identical data.
inline Batch task_batch(const SyntheticTask& task, int n_seq, std::int64_t step) {
  if (task.vocab < 3) throw std::invalid_argument("task_batch: vocab must be at least 3");
  if (task.min_len < 1 || task.max_len < task.min_len)
    throw std::invalid_argument("task_batch: bad length range");
  if (n_seq < 1) throw std::invalid_argument("task_batch: need at least one sequence");
  Rng r = Rng(task.seed).stream("task.step" + std::to_string(step));
  Batch b;
  for (int s = 0; s < n_seq; ++s) {
    int len = r.uniform_int(task.min_len, task.max_len);
    std::vector<int> src(len);
    for (int& tok : src) tok = r.uniform_int(1, task.vocab - 1);
    std::vector<int> tgt = src;
    if (task.kind == TaskKind::Reverse) std::reverse(tgt.begin(), tgt.end());
    b.src.push_back(std::move(src));
    b.tgt.push_back(std::move(tgt));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  std::int64_t steps = 2000;
  int batch_size = 8;
  std::int64_t checkpoint_every = 0;  // steps per epoch; 0 disables checkpoints
  std::string checkpoint_dir;         // required when checkpoint_every > 0
  std::uint64_t seed = 0;             // dropout stream seed
};

struct TrainStep {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // global L2 over all parameters
};

// Epoch-level norm bookkeeping for the weight matrices: the L2 norm of the
// summed per-step gradients, the L2 norm of the net weight change, and the
// weight norm at epoch start (the baseline for relative norms).
struct EpochNorms {
  int epoch = 0;
  std::map<std::string, double> grad_norm;
  std::map<std::string, double> update_norm;
  std::map<std::string, double> weight_norm;
};

struct TrainRecord {
  std::vector<TrainStep> steps;
  std::vector<EpochNorms> epochs;
  std::vector<std::string> checkpoints;
  double initial_loss = 0.0;
  bool diverged = false;
};

namespace detail_train {

inline double l2(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

}  // namespace detail_train

// Serializes optimizer moments into a snapshot's extra arrays so resumed
// runs continue bit-identically.
inline void optim_state_to_snapshot(const OptimState& st, const Model& model, Snapshot& snap) {
  auto params = model.named_params();
  if (st.m.size() != params.size())
    throw std::invalid_argument("optim_state_to_snapshot: state/model mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto shape = std::make_pair(static_cast<std::uint64_t>(params[i].second.rows()),
                                static_cast<std::uint64_t>(params[i].second.cols()));
    snap.extra["optim.m." + params[i].first] = {shape, st.m[i]};
    snap.extra["optim.v." + params[i].first] = {shape, st.v[i]};
  }
  snap.meta["optim.t"] = st.t;
}

inline OptimState optim_state_from_snapshot(const Snapshot& snap) {
  OptimState st = make_optim_state(snap.model);
  auto params = snap.model.named_params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto im = snap.extra.find("optim.m." + params[i].first);
    auto iv = snap.extra.find("optim.v." + params[i].first);
    if (im == snap.extra.end() || iv == snap.extra.end())
      throw std::runtime_error("optim_state_from_snapshot: missing moments for " +
                               params[i].first);
    if (im->second.second.size() != st.m[i].size())
      throw std::runtime_error("optim_state_from_snapshot: moment size mismatch for " +
                               params[i].first);
    st.m[i] = im->second.second;
    st.v[i] = iv->second.second;
  }
  auto it = snap.meta.find("optim.t");
  if (it == snap.meta.end()) throw std::runtime_error("optim_state_from_snapshot: missing step");
  st.t = it->second;
  return st;
}

// Teacher-forced training on a synthetic task. Deterministic given the task
// seed and TrainConfig seed: batches and dropout masks are keyed by the
// absolute step index, so a run resumed from a checkpoint replays the exact
// same trajectory. `start_step` is the number of steps already taken.
//
// Divergence: the flag is set when the loss exceeds 10x the first recorded
// loss after the warmup window, or when the forward pass produces non-finite
// values (surfacing as numeric_error). A diverged run stops early and
// returns the truncated record.
inline TrainRecord train(Model& model, const SyntheticTask& task, const OptimConfig& ocfg,
                         const TrainConfig& tcfg, OptimState* state = nullptr,
                         std::int64_t start_step = 0, double initial_loss_hint = 0.0) {
  if (tcfg.steps < 1) throw std::invalid_argument("train: need at least one step");
  if (tcfg.batch_size < 1) throw std::invalid_argument("train: batch size must be positive");
  if (tcfg.checkpoint_every < 0) throw std::invalid_argument("train: bad checkpoint interval");
  if (tcfg.checkpoint_every > 0 && tcfg.checkpoint_dir.empty())
    throw std::invalid_argument("train: checkpoint interval set but no directory given");
  if (task.vocab > model.cfg.src_vocab || task.vocab > model.cfg.tgt_vocab)
    throw std::invalid_argument("train: task vocabulary exceeds the model's");
  if (task.max_len > model.cfg.max_len)
    throw std::invalid_argument("train: task length exceeds the model's position table");

  OptimState local;
  OptimState* st = state;
  if (!st) {
    local = make_optim_state(model);
    st = &local;
  }
  auto params = model.named_params();
  auto weights = model.weight_matrices();

  TrainRecord rec;
  rec.initial_loss = initial_loss_hint;

  EpochNorms epoch;
  std::vector<std::vector<double>> epoch_grad_sum;
  std::vector<std::vector<double>> epoch_w_start;
  auto begin_epoch = [&](int index) {
    epoch = EpochNorms{};
    epoch.epoch = index;
    epoch_grad_sum.clear();
    epoch_w_start.clear();
    for (auto& [name, w] : weights) {
      epoch_grad_sum.emplace_back(w.values().size(), 0.0);
      epoch_w_start.push_back(w.values());
      epoch.weight_norm[name] = detail_train::l2(w.values());
    }
  };
  auto close_epoch = [&]() {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      const auto& name = weights[i].first;
      epoch.grad_norm[name] = detail_train::l2(epoch_grad_sum[i]);
      std::vector<double> delta = weights[i].second.values();
      for (std::size_t k = 0; k < delta.size(); ++k) delta[k] -= epoch_w_start[i][k];
      epoch.update_norm[name] = detail_train::l2(delta);
    }
    rec.epochs.push_back(epoch);
  };

  std::int64_t epoch_len = tcfg.checkpoint_every > 0 ? tcfg.checkpoint_every : tcfg.steps;
  int epoch_index = static_cast<int>(start_step / epoch_len);
  begin_epoch(epoch_index);

  for (std::int64_t s = 1; s <= tcfg.steps; ++s) {
    std::int64_t t = start_step + s;
    Batch batch = task_batch(task, tcfg.batch_size, t);
    Rng drop = Rng(tcfg.seed).stream("train.dropout.step" + std::to_string(t));
    ForwardOptions opts;
    opts.train = model.cfg.dropout > 0.0;
    opts.rng = &drop;

    for (auto& [name, p] : params) p.zero_grad();
    double loss_val = 0.0;
    try {
      Tensor loss = model_loss(model, batch, opts);
      backward(loss);
      loss_val = loss.values()[0];
    } catch (const numeric_error&) {
      rec.diverged = true;
      break;
    }

    double gsq = 0.0;
    for (auto& [name, p] : params) {
      const auto& g = p.grad();
      for (double gv : g) gsq += gv * gv;
    }
    for (std::size_t i = 0; i < weights.size(); ++i) {
      const auto& g = weights[i].second.grad();
      for (std::size_t k = 0; k < g.size(); ++k) epoch_grad_sum[i][k] += g[k];
    }

    double lr = lr_schedule(t, ocfg);
    if (ocfg.kind == OptimKind::SGD)
      sgd_step(model, lr, ocfg.weight_decay);
    else
      adam_step(model, *st, lr, ocfg);

    rec.steps.push_back({t, loss_val, lr, std::sqrt(gsq)});
    if (rec.initial_loss == 0.0) rec.initial_loss = loss_val;
    if (!std::isfinite(loss_val) ||
        (t > ocfg.warmup_steps && loss_val > 10.0 * rec.initial_loss)) {
      rec.diverged = true;
      break;
    }

    if (t % epoch_len == 0) {
      close_epoch();
      if (tcfg.checkpoint_every > 0) {
        Snapshot snap;
        snap.model = model;
        optim_state_to_snapshot(*st, model, snap);
        snap.meta["step"] = t;
        snap.meta["epoch"] = epoch_index;
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04d.tlab", epoch_index);
        std::string path = tcfg.checkpoint_dir + "/" + name;
        save_checkpoint(path, snap);
        rec.checkpoints.push_back(path);
      }
      ++epoch_index;
      if (s < tcfg.steps) begin_epoch(epoch_index);
    }
  }

  if (!rec.steps.empty() && rec.steps.back().step % epoch_len != 0 && !rec.diverged)
    close_epoch();
  return rec;
}

// Mean eval-mode loss over fresh batches drawn from the task's stream at
// step keys disjoint from any finite training run.
inline double eval_loss(const Model& model, const SyntheticTask& task, int n_batches,
                        int batch_size) {
  if (n_batches < 1) throw std::invalid_argument("eval_loss: need at least one batch");
  ForwardOptions opts;
  double acc = 0.0;
  for (int b = 0; b < n_batches; ++b) {
    Batch batch = task_batch(task, batch_size, -1 - static_cast<std::int64_t>(b));
    Tensor loss = model_loss(model, batch, opts);
    acc += loss.values()[0];
  }
  return acc / n_batches;
}

}  // namespace tlab
