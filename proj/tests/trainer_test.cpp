#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "tlab/blocks.hpp"
#include "tlab/diagnostics.hpp"
#include "tlab/init.hpp"
#include "tlab/rng.hpp"
#include "tlab/trainer.hpp"

using namespace tlab;

namespace {

ModelConfig tiny_config(ArchVariant v = ArchVariant::PreLN) {
  ModelConfig c;
  c.variant = v;
  c.n_enc = 1;
  c.n_dec = 1;
  c.d_model = 16;
  c.heads = 2;
  c.d_ff = 32;
  c.src_vocab = 8;
  c.tgt_vocab = 8;
  c.max_len = 8;
  c.dropout = 0.0;
  return c;
}

Model tiny_model(std::uint64_t seed, ArchVariant v = ArchVariant::PreLN) {
  ModelConfig c = tiny_config(v);
  Model m = make_model(c);
  init_standard(m, InitSpec{}, seed);
  return m;
}

SyntheticTask tiny_task() {
  SyntheticTask t;
  t.vocab = 8;
  t.min_len = 3;
  t.max_len = 5;
  t.seed = 11;
  return t;
}

std::vector<double> flat_params(const Model& m) {
  std::vector<double> out;
  for (auto& [n, p] : m.named_params())
    out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}

std::string fresh_dir(const char* tag) {
  auto dir = std::filesystem::temp_directory_path() / (std::string("tlab_trainer_") + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace

TEST(Schedule, LinearRampThenInverseSqrt) {
  OptimConfig c;
  c.lr_max = 1e-3;
  c.warmup_steps = 8000;
  EXPECT_DOUBLE_EQ(lr_schedule(8000, c), 1e-3);
  EXPECT_DOUBLE_EQ(lr_schedule(32000, c), 5e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(1, c), 1.25e-7);
  EXPECT_THROW(lr_schedule(0, c), std::invalid_argument);
  c.warmup_steps = 0;
  EXPECT_DOUBLE_EQ(lr_schedule(1, c), 1e-3);
  EXPECT_DOUBLE_EQ(lr_schedule(123456, c), 1e-3);
}

TEST(Sgd, ZeroGradLeavesParamsAlone) {
  Model m = tiny_model(1);
  std::vector<double> before = flat_params(m);
  for (auto& [n, p] : m.named_params()) p.zero_grad();
  sgd_step(m, 0.5);
  EXPECT_EQ(flat_params(m), before);
}

TEST(Sgd, SingleEntryHandValue) {
  Model m = tiny_model(2);
  for (auto& [n, p] : m.named_params()) p.zero_grad();
  Tensor w1 = m.encoder[1].w1;
  w1.values()[0] = 1.0;
  w1.grad()[0] = 2.0;
  sgd_step(m, 0.1);
  EXPECT_DOUBLE_EQ(w1.values()[0], 0.8);
}

TEST(Sgd, MatchesHandRolledLoop) {
  Model m = tiny_model(3);
  Rng r(99);
  std::vector<double> want;
  for (auto& [n, p] : m.named_params()) {
    auto& g = p.grad();
    for (std::size_t k = 0; k < g.size(); ++k) {
      g[k] = r.normal(0.0, 1.0);
      want.push_back(p.values()[k] - 0.05 * g[k]);
    }
  }
  sgd_step(m, 0.05);
  std::vector<double> got = flat_params(m);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], want[k], 1e-15);
}

TEST(Adam, FirstStepIsSignLikeAndBounded) {
  Model m = tiny_model(4);
  OptimConfig c;
  c.lr_max = 1e-3;
  OptimState st = make_optim_state(m);
  std::vector<double> before = flat_params(m);
  Rng r(7);
  // gradients spanning 12 orders of magnitude; Adam's first step must move
  // every entry by ~lr regardless
  std::vector<double> scales = {1e-6, 1e-2, 1.0, 1e6};
  std::size_t i = 0;
  for (auto& [n, p] : m.named_params()) {
    auto& g = p.grad();
    for (auto& gv : g) gv = scales[i++ % scales.size()] * (r.uniform() < 0.5 ? -1.0 : 1.0);
  }
  adam_step(m, st, c.lr_max, c);
  std::vector<double> after = flat_params(m);
  i = 0;
  for (auto& [n, p] : m.named_params()) {
    const auto& g = p.grad();
    for (std::size_t k = 0; k < g.size(); ++k, ++i) {
      double delta = after[i] - before[i];
      EXPECT_LE(std::abs(delta), c.lr_max * (1.0 + 1e-12));
      if (std::abs(g[k]) > 1e-4) {
        EXPECT_NEAR(delta, -c.lr_max * (g[k] > 0 ? 1.0 : -1.0), c.lr_max * 1e-3);
      }
    }
  }
  EXPECT_EQ(st.t, 1);
}

TEST(Adam, ZeroGradNeverMoves) {
  Model m = tiny_model(5);
  OptimConfig c;
  OptimState st = make_optim_state(m);
  std::vector<double> before = flat_params(m);
  for (int s = 0; s < 3; ++s) {
    for (auto& [n, p] : m.named_params()) p.zero_grad();
    adam_step(m, st, 1e-3, c);
  }
  EXPECT_EQ(flat_params(m), before);
}

TEST(Adam, ThreeStepScalarMatchesHandSequence) {
  Model m = tiny_model(6);
  OptimConfig c;
  c.beta1 = 0.9;
  c.beta2 = 0.98;
  c.eps_adam = 1e-8;
  OptimState st = make_optim_state(m);
  Tensor w = m.encoder[0].wq;
  w.values()[0] = 0.5;
  std::vector<double> gs = {2.0, -1.0, 0.25};
  double lr = 1e-2;

  // independent scalar recomputation of the update rule
  double mm = 0.0, vv = 0.0, ww = 0.5;
  for (int t = 1; t <= 3; ++t) {
    double g = gs[t - 1];
    mm = 0.9 * mm + 0.1 * g;
    vv = 0.98 * vv + 0.02 * g * g;
    double mhat = mm / (1.0 - std::pow(0.9, t));
    double vhat = vv / (1.0 - std::pow(0.98, t));
    ww -= lr * mhat / (std::sqrt(vhat) + 1e-8);
  }

  for (int t = 1; t <= 3; ++t) {
    for (auto& [n, p] : m.named_params()) p.zero_grad();
    w.grad()[0] = gs[t - 1];
    adam_step(m, st, lr, c);
  }
  EXPECT_NEAR(w.values()[0], ww, 1e-12);
  EXPECT_EQ(st.t, 3);
}

TEST(Adam, RejectsMismatchedState) {
  Model m = tiny_model(7);
  ModelConfig big_cfg = tiny_config();
  big_cfg.n_enc = 2;
  Model bigger = make_model(big_cfg);
  OptimState st = make_optim_state(bigger);
  OptimConfig c;
  EXPECT_THROW(adam_step(m, st, 1e-3, c), std::invalid_argument);
}

TEST(Task, CopyAndReverseAreDeterministicFunctions) {
  SyntheticTask t = tiny_task();
  Batch b = task_batch(t, 6, 42);
  ASSERT_EQ(b.src.size(), 6u);
  for (std::size_t s = 0; s < b.src.size(); ++s) {
    EXPECT_EQ(b.tgt[s], b.src[s]);
    EXPECT_GE(static_cast<int>(b.src[s].size()), t.min_len);
    EXPECT_LE(static_cast<int>(b.src[s].size()), t.max_len);
    for (int tok : b.src[s]) {
      EXPECT_GE(tok, 1);
      EXPECT_LT(tok, t.vocab);
    }
  }
  t.kind = TaskKind::Reverse;
  Batch rb = task_batch(t, 6, 42);
  for (std::size_t s = 0; s < rb.src.size(); ++s) {
    std::vector<int> rev(rb.src[s].rbegin(), rb.src[s].rend());
    EXPECT_EQ(rb.tgt[s], rev);
  }
}

TEST(Task, StreamsAreStatelessInStep) {
  SyntheticTask t = tiny_task();
  Batch a = task_batch(t, 4, 7);
  Batch b = task_batch(t, 4, 7);
  Batch c = task_batch(t, 4, 8);
  EXPECT_EQ(a.src, b.src);
  EXPECT_NE(a.src, c.src);
  EXPECT_THROW(task_batch(t, 0, 1), std::invalid_argument);
  t.vocab = 2;
  EXPECT_THROW(task_batch(t, 1, 1), std::invalid_argument);
}

TEST(Train, ZeroLrLeavesModelAndEvalLossUnchanged) {
  Model m = tiny_model(10);
  SyntheticTask task = tiny_task();
  double before_eval = eval_loss(m, task, 2, 4);
  std::vector<double> before = flat_params(m);
  OptimConfig oc;
  oc.kind = OptimKind::SGD;
  oc.lr_max = 0.0;
  oc.warmup_steps = 0;
  TrainConfig tc;
  tc.steps = 5;
  tc.batch_size = 4;
  TrainRecord rec = train(m, task, oc, tc);
  EXPECT_EQ(flat_params(m), before);
  EXPECT_DOUBLE_EQ(eval_loss(m, task, 2, 4), before_eval);
  EXPECT_FALSE(rec.diverged);
  ASSERT_EQ(rec.steps.size(), 5u);
}

TEST(Train, IdenticalSeedsGiveBitIdenticalCurves) {
  ModelConfig cfg = tiny_config();
  cfg.dropout = 0.1;  // exercises the step-keyed dropout stream
  SyntheticTask task = tiny_task();
  OptimConfig oc;
  oc.lr_max = 3e-4;
  oc.warmup_steps = 10;
  TrainConfig tc;
  tc.steps = 20;
  tc.batch_size = 4;
  tc.seed = 5;

  auto run = [&] {
    Model m = make_model(cfg);
    init_standard(m, InitSpec{}, 33);
    return train(m, task, oc, tc);
  };
  TrainRecord a = run();
  TrainRecord b = run();
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    EXPECT_EQ(a.steps[i].loss, b.steps[i].loss);
    EXPECT_EQ(a.steps[i].grad_norm, b.steps[i].grad_norm);
  }
}

TEST(Train, DivergenceFlagTripsOnExplodingRun) {
  Model m = tiny_model(12, ArchVariant::PostLN);
  SyntheticTask task = tiny_task();
  OptimConfig oc;
  oc.kind = OptimKind::SGD;
  oc.lr_max = 50.0;
  oc.warmup_steps = 0;
  TrainConfig tc;
  tc.steps = 50;
  tc.batch_size = 4;
  TrainRecord rec = train(m, task, oc, tc);
  EXPECT_TRUE(rec.diverged);
  EXPECT_LT(rec.steps.size(), 50u);
}

TEST(Train, ResumeFromCheckpointIsBitConsistent) {
  ModelConfig cfg = tiny_config();
  cfg.dropout = 0.1;
  SyntheticTask task = tiny_task();
  OptimConfig oc;
  oc.lr_max = 1e-3;
  oc.warmup_steps = 20;
  TrainConfig tc;
  tc.steps = 40;
  tc.batch_size = 4;
  tc.seed = 9;
  tc.checkpoint_every = 20;

  tc.checkpoint_dir = fresh_dir("full");
  Model full = make_model(cfg);
  init_standard(full, InitSpec{}, 77);
  TrainRecord full_rec = train(full, task, oc, tc);
  ASSERT_EQ(full_rec.checkpoints.size(), 2u);

  Snapshot snap = load_checkpoint(full_rec.checkpoints[0]);
  OptimState st = optim_state_from_snapshot(snap);
  ASSERT_EQ(snap.meta.at("step"), 20);
  TrainConfig tc2 = tc;
  tc2.steps = 20;
  tc2.checkpoint_dir = fresh_dir("resumed");
  TrainRecord tail = train(snap.model, task, oc, tc2, &st, snap.meta.at("step"));

  auto a = full.named_params();
  auto b = snap.model.named_params();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_EQ(a[i].second.values(), b[i].second.values()) << a[i].first;
  ASSERT_EQ(tail.steps.size(), 20u);
  EXPECT_EQ(tail.steps.back().loss, full_rec.steps.back().loss);
}

TEST(Train, SgdEpochNormsAreProportional) {
  Model m = tiny_model(14);
  SyntheticTask task = tiny_task();
  OptimConfig oc;
  oc.kind = OptimKind::SGD;
  oc.lr_max = 1e-3;
  oc.warmup_steps = 0;  // constant lr makes update = -lr * summed gradient
  TrainConfig tc;
  tc.steps = 30;
  tc.batch_size = 4;
  tc.checkpoint_every = 10;
  tc.checkpoint_dir = fresh_dir("sgdnorm");
  TrainRecord rec = train(m, task, oc, tc);
  ASSERT_EQ(rec.epochs.size(), 3u);

  std::vector<std::map<std::string, double>> gs, us;
  for (const auto& e : rec.epochs) {
    gs.push_back(e.grad_norm);
    us.push_back(e.update_norm);
  }
  ParamNormSeries series = track_param_norms(gs, us);
  for (const auto& pt : series.points) EXPECT_NEAR(pt.grad_rel, pt.update_rel, 1e-6);
}

TEST(Train, AdamTightensUpdateSpreadOverAttentionMatrices) {
  Model m = tiny_model(15, ArchVariant::PreLN);
  SyntheticTask task = tiny_task();
  OptimConfig oc;
  oc.kind = OptimKind::Adam;
  oc.lr_max = 1e-3;
  oc.warmup_steps = 10;
  TrainConfig tc;
  tc.steps = 40;
  tc.batch_size = 4;
  tc.checkpoint_every = 40;
  tc.checkpoint_dir = fresh_dir("adamnorm");
  TrainRecord rec = train(m, task, oc, tc);
  ASSERT_GE(rec.epochs.size(), 1u);

  auto is_attention = [](const std::string& n) {
    auto leaf = n.substr(n.rfind('.') + 1);
    return leaf == "wq" || leaf == "wk" || leaf == "wv1" || leaf == "wv2";
  };
  std::vector<double> gn, un;
  for (const auto& [name, v] : rec.epochs.back().grad_norm)
    if (is_attention(name)) gn.push_back(v);
  for (const auto& [name, v] : rec.epochs.back().update_norm)
    if (is_attention(name)) un.push_back(v);
  ASSERT_GE(gn.size(), 8u);
  EXPECT_LT(spread_max_min(un), spread_max_min(gn));
}

TEST(Train, LossFallsOnCopyTask) {
  Model m = tiny_model(16, ArchVariant::PreLN);
  SyntheticTask task = tiny_task();
  OptimConfig oc;
  oc.lr_max = 2e-3;
  oc.warmup_steps = 30;
  TrainConfig tc;
  tc.steps = 150;
  tc.batch_size = 4;
  TrainRecord rec = train(m, task, oc, tc);
  ASSERT_EQ(rec.steps.size(), 150u);
  EXPECT_FALSE(rec.diverged);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += rec.steps[i].loss;
    tail += rec.steps[rec.steps.size() - 1 - i].loss;
  }
  EXPECT_LT(tail, 0.6 * head);
}

TEST(Train, RejectsInconsistentSetups) {
  Model m = tiny_model(17);
  SyntheticTask task = tiny_task();
  OptimConfig oc;
  TrainConfig tc;
  tc.steps = 0;
  EXPECT_THROW(train(m, task, oc, tc), std::invalid_argument);
  tc.steps = 1;
  tc.checkpoint_every = 5;
  tc.checkpoint_dir.clear();
  EXPECT_THROW(train(m, task, oc, tc), std::invalid_argument);
  tc.checkpoint_every = 0;
  SyntheticTask big = task;
  big.vocab = 99;
  EXPECT_THROW(train(m, big, oc, tc), std::invalid_argument);
  SyntheticTask lng = task;
  lng.max_len = 100;
  EXPECT_THROW(train(m, lng, oc, tc), std::invalid_argument);
}
