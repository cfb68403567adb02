#pragma once

// Weight initialization schemes and the profiled-shortcut-scale pipeline:
// standard init, a variance-profiling forward pass, shortcut scales
// omega_i = max(1, sqrt(sum_{j<i} Var[f_j])), and the exact fold of omega
// into the neighbouring LayerNorm that turns an Admin model into a plain
// Post-LN model with identical outputs.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tlab/blocks.hpp"
#include "tlab/rng.hpp"
#include "tlab/variance_oracle.hpp"

namespace tlab {

enum class InitScheme { XavierUniform, ScaledUniform };

inline InitScheme init_scheme_from_string(const std::string& s) {
  if (s == "xavier") return InitScheme::XavierUniform;
  if (s == "scaled") return InitScheme::ScaledUniform;
  throw std::invalid_argument("unknown init scheme '" + s + "' (xavier|scaled)");
}

// Family rule plus optional per-role element-variance overrides (used by
// balanced experiment configs to equalize branch variances).
//   XavierUniform: Var[w] = gain^2 * 2 / (fan_in + fan_out)
//   ScaledUniform: Var[w] = gain^2 / fan_in
// Weights are drawn uniform(-a, a) with a = sqrt(3 Var).
struct InitSpec {
  InitScheme scheme = InitScheme::XavierUniform;
  double gain = 1.0;
  std::optional<double> qk_var;      // W^Q, W^K
  std::optional<double> dec_qk_var;  // W^Q, W^K of decoder sub-layers (self and cross)
  std::optional<double> value_var;    // W^V1, W^V2
  std::optional<double> ffn_var;      // W^1, W^2
  std::optional<double> embed_var;    // raw embedding entries (before sqrt(D) scaling)
  std::optional<double> out_var;      // output projection

  double family_var(std::size_t fan_in, std::size_t fan_out) const {
    switch (scheme) {
      case InitScheme::XavierUniform:
        return gain * gain * 2.0 / static_cast<double>(fan_in + fan_out);
      case InitScheme::ScaledUniform:
        return gain * gain / static_cast<double>(fan_in);
    }
    return 0.0;
  }

  double var_for(const std::string& name, std::size_t fan_in, std::size_t fan_out) const {
    auto leaf = name.substr(name.rfind('.') + 1);
    if (leaf == "wq" || leaf == "wk") {
      if (dec_qk_var && name.rfind("dec.", 0) == 0) return *dec_qk_var;
      if (qk_var) return *qk_var;
    }
    if ((leaf == "wv1" || leaf == "wv2") && value_var) return *value_var;
    if ((leaf == "w1" || leaf == "w2") && ffn_var) return *ffn_var;
    if ((leaf == "src_embed" || leaf == "tgt_embed") && embed_var) return *embed_var;
    if (leaf == "out_proj" && out_var) return *out_var;
    return family_var(fan_in, fan_out);
  }
};

// Fills every weight matrix from its own named stream of Rng(seed), records
// the nominal element variance in model.init_var, and resets gamma = 1,
// nu = 0, omega = 1. Same (spec, seed) always reproduces the same weights.
inline void init_standard(Model& m, const InitSpec& spec, std::uint64_t seed) {
  Rng root(seed);
  m.init_var.clear();
  for (auto& [name, t] : m.weight_matrices()) {
    double var = spec.var_for(name, t.rows(), t.cols());
    double a = std::sqrt(3.0 * var);
    Rng rng = root.stream("init." + name);
    for (auto& v : t.values()) v = rng.uniform(-a, a);
    m.init_var[name] = var;
  }
  auto reset_norms = [](std::vector<SubLayer>& stack) {
    for (auto& sl : stack) {
      std::fill(sl.gamma.values().begin(), sl.gamma.values().end(), 1.0);
      std::fill(sl.nu.values().begin(), sl.nu.values().end(), 0.0);
      std::fill(sl.omega.values().begin(), sl.omega.values().end(), 1.0);
    }
  };
  reset_norms(m.encoder);
  reset_norms(m.decoder);
  for (Tensor t : {m.enc_final_gamma, m.dec_final_gamma})
    if (t.defined()) std::fill(t.values().begin(), t.values().end(), 1.0);
  for (Tensor t : {m.enc_final_nu, m.dec_final_nu})
    if (t.defined()) std::fill(t.values().begin(), t.values().end(), 0.0);
}

// Element variance of the sinusoid table over the first L positions; used
// to size embeddings so the combined stream enters the stack near unit
// variance.
inline double position_encoding_var(const ModelConfig& cfg, int L) {
  auto table = sinusoid_table(std::min(L, cfg.max_len), cfg.d_model);
  return var_of(table);
}

// Experiment init for the stability measurements. The variance laws treat
// positions as independent samples, so the spec keeps the stream close to
// that regime: embeddings carry several times the position-table energy
// (the table's low-frequency dimensions are nearly constant across
// positions, i.e. a component shared by every row, and must stay a small
// fraction of the total), and the query/key scale is raised so attention
// rows concentrate on few keys instead of averaging all positions
// (averaging replicates one vector into every row, which breaks
// cross-position independence after a single sub-layer). Branch output
// factors start from the depth-1 closed forms, feed-forward
// 0.5*D*D_ff*v^2 = 1 and value path D^2 * (L * P_h) * v^2 = 1 with P_h
// measured at this query/key scale; calibrate_branch_gains then pins the
// realized branch variances.
inline InitSpec balanced_init_spec(const ModelConfig& cfg, int seq_len, std::uint64_t seed) {
  InitSpec spec;
  spec.scheme = InitScheme::ScaledUniform;
  double d = cfg.d_model, f = cfg.d_ff;
  spec.ffn_var = std::sqrt(2.0 / (d * f));
  spec.qk_var = 3.5 / d;  // score std ~ 3.5 on a unit-variance stream
  // Decoder attention instead keeps a nearly flat score distribution. The
  // score path feeds gradient back to the query stream in proportion to this
  // scale without any matching forward-variance contribution, and on the
  // decoder side that return would both mask the cross-attention leak toward
  // the encoder and inflate every self-attention ratio, swamping the
  // cumulative decay the depth measurements look for.
  spec.dec_qk_var = 0.1 / d;
  spec.embed_var = 8.0 / d;
  Rng rng = Rng(seed).stream("balanced.ph");
  PhEstimate ph = estimate_Ph(cfg.d_model, cfg.heads, seq_len, *spec.qk_var, *spec.qk_var,
                              cfg.scaled_attention, 200000, rng);
  spec.value_var = std::sqrt(1.0 / (d * d * ph.row_sum_sq));
  return spec;
}

namespace detail_init {

// pooled population variance across the same-index tensor of many traces
inline double pooled_var(const std::vector<ActivationTrace>& traces,
                         const std::function<const Tensor&(const ActivationTrace&)>& pick) {
  double sum = 0.0, sum2 = 0.0;
  std::size_t n = 0;
  for (const auto& tr : traces) {
    for (double v : pick(tr).values()) {
      sum += v;
      sum2 += v * v;
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("pooled_var: nothing traced");
  double mu = sum / static_cast<double>(n);
  return sum2 / static_cast<double>(n) - mu * mu;
}

}  // namespace detail_init

// Rescales each sub-layer's output factor (W^V2 or W^2) so the measured
// branch output variance on the probe batch is target_var. The closed
// forms above assume iid stream rows; real streams are anisotropic (the
// sinusoid table contributes a component shared by every position, and
// repeated tokens share embedding rows), which inflates attention branch
// variance in a depth-dependent way. A few measure-and-rescale sweeps pin
// every branch regardless. init_var is updated to match, so perturbation
// sizing stays consistent. Requires omega = 1 (run before any
// shortcut-scale setup).
inline void calibrate_branch_gains(Model& m, const Batch& probe, double target_var = 1.0,
                                   int sweeps = 3) {
  if (!(target_var > 0.0)) throw std::invalid_argument("calibrate_branch_gains: target_var <= 0");
  ForwardOptions opts;  // eval mode
  for (int it = 0; it < sweeps; ++it) {
    std::vector<ActivationTrace> enc_traces, dec_traces;
    if (m.cfg.n_dec > 0) {
      model_loss(m, probe, opts, &enc_traces, &dec_traces);
    } else {
      enc_traces.resize(probe.src.size());
      for (std::size_t s = 0; s < probe.src.size(); ++s)
        encoder_forward(m, probe.src[s], opts, &enc_traces[s]);
    }
    auto rescale = [&](std::vector<SubLayer>& stack, const std::vector<ActivationTrace>& traces,
                       const char* side) {
      for (std::size_t i = 0; i < stack.size(); ++i) {
        double var = detail_init::pooled_var(
            traces, [i](const ActivationTrace& t) -> const Tensor& { return t.entries[i].a; });
        if (!(var > 0.0)) throw std::runtime_error("calibrate_branch_gains: dead branch");
        double s = std::sqrt(target_var / var);
        Tensor w = stack[i].kind == SubLayerKind::FeedForward ? stack[i].w2 : stack[i].wv2;
        for (auto& v : w.values()) v *= s;
        std::string name = std::string(side) + "." + std::to_string(i) + "." +
                           (stack[i].kind == SubLayerKind::FeedForward ? "w2" : "wv2");
        m.init_var.at(name) *= s * s;
      }
    };
    rescale(m.encoder, enc_traces, "enc");
    if (m.cfg.n_dec > 0) rescale(m.decoder, dec_traces, "dec");
  }
}

// ---------------------------------------------------------------------------
// Profiling and shortcut-scale initialization

struct ProfileRecord {
  std::vector<double> enc_var_f, enc_var_b;  // per encoder sub-layer, 1-based order
  std::vector<double> dec_var_f, dec_var_b;
  std::size_t tokens = 0;
};

constexpr std::size_t kProfileTokenCap = 8192;

// One dropout-free forward pass over the batch recording Var[f_i] and
// Var[b_i] per sub-layer of both stacks. The model must be in Admin wiring
// with untouched shortcut scales (omega = 1): profiling describes the
// pre-scale network.
inline ProfileRecord admin_profile(const Model& m, const Batch& batch) {
  if (m.cfg.variant != ArchVariant::Admin)
    throw std::invalid_argument("admin_profile: model is not Admin-wired");
  for (const auto* stack : {&m.encoder, &m.decoder})
    for (const auto& sl : *stack)
      for (double w : sl.omega.values())
        if (w != 1.0) throw std::invalid_argument("admin_profile: omega already set (expected 1)");
  std::size_t tokens = 0;
  for (auto& s : batch.src) tokens += s.size();
  for (auto& t : batch.tgt) tokens += t.size();
  if (tokens > kProfileTokenCap)
    throw std::invalid_argument("admin_profile: profiling batch exceeds " +
                                std::to_string(kProfileTokenCap) + " tokens");
  ForwardOptions opts;  // eval mode: profiling never uses dropout
  std::vector<ActivationTrace> enc_traces, dec_traces;
  if (m.cfg.n_dec > 0) {
    model_loss(m, batch, opts, &enc_traces, &dec_traces);
  } else {
    // encoder-only stack: trace the encoder pass alone
    enc_traces.resize(batch.src.size());
    for (std::size_t s = 0; s < batch.src.size(); ++s)
      encoder_forward(m, batch.src[s], opts, &enc_traces[s]);
  }
  ProfileRecord rec;
  rec.tokens = tokens;
  for (std::size_t i = 0; i < m.encoder.size(); ++i) {
    rec.enc_var_f.push_back(detail_init::pooled_var(
        enc_traces, [i](const ActivationTrace& t) -> const Tensor& { return t.entries[i].a; }));
    rec.enc_var_b.push_back(detail_init::pooled_var(
        enc_traces, [i](const ActivationTrace& t) -> const Tensor& { return t.entries[i].b; }));
  }
  for (std::size_t i = 0; i < m.decoder.size(); ++i) {
    rec.dec_var_f.push_back(detail_init::pooled_var(
        dec_traces, [i](const ActivationTrace& t) -> const Tensor& { return t.entries[i].a; }));
    rec.dec_var_b.push_back(detail_init::pooled_var(
        dec_traces, [i](const ActivationTrace& t) -> const Tensor& { return t.entries[i].b; }));
  }
  return rec;
}

inline void save_profile(const std::string& path, const ProfileRecord& rec) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_profile: cannot open " + path);
  f << "tokens " << rec.tokens << "\n";
  char buf[64];
  auto line = [&](const char* side, std::size_t i, double vf, double vb) {
    std::snprintf(buf, sizeof buf, "%s %zu %.17e %.17e\n", side, i + 1, vf, vb);
    f << buf;
  };
  for (std::size_t i = 0; i < rec.enc_var_f.size(); ++i)
    line("enc", i, rec.enc_var_f[i], rec.enc_var_b[i]);
  for (std::size_t i = 0; i < rec.dec_var_f.size(); ++i)
    line("dec", i, rec.dec_var_f[i], rec.dec_var_b[i]);
}

inline ProfileRecord load_profile(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_profile: cannot open " + path);
  ProfileRecord rec;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    if (tag == "tokens") {
      is >> rec.tokens;
    } else if (tag == "enc" || tag == "dec") {
      std::size_t i;
      double vf, vb;
      if (!(is >> i >> vf >> vb)) throw std::runtime_error("load_profile: bad line '" + line + "'");
      auto& vfs = tag == "enc" ? rec.enc_var_f : rec.dec_var_f;
      auto& vbs = tag == "enc" ? rec.enc_var_b : rec.dec_var_b;
      if (i != vfs.size() + 1) throw std::runtime_error("load_profile: out-of-order index");
      vfs.push_back(vf);
      vbs.push_back(vb);
    } else {
      throw std::runtime_error("load_profile: unknown tag '" + tag + "'");
    }
  }
  return rec;
}

// Sets omega_i = max(1, sqrt(sum_{j<i} Var[f_j])) per stack (each stack's
// sum starts fresh; the empty sum makes omega_1 = 1, and the floor keeps
// every shortcut at least as strong as plain residual wiring). Because each
// later shortcut carries the accumulated branch energy, Var[b_i] ~ i *
// Var[f] when branch variances are uniform and at least 1 (below that the
// floor pins early shortcuts to 1), which is what makes the self-dependency
// fall off as 1/i; the dependency measurements therefore calibrate branches
// to unit variance. Weights are expected to be exactly the ones profiling
// saw: with named deterministic init streams, re-initializing with the same
// spec and seed is the identity, so this function only touches the shortcut
// scales.
inline void admin_initialize(Model& m, const ProfileRecord& rec) {
  if (m.cfg.variant != ArchVariant::Admin)
    throw std::invalid_argument("admin_initialize: model is not Admin-wired");
  if (rec.enc_var_f.size() != m.encoder.size() || rec.dec_var_f.size() != m.decoder.size())
    throw std::invalid_argument("admin_initialize: profile does not match model depth");
  auto apply = [](std::vector<SubLayer>& stack, const std::vector<double>& var_f) {
    double acc = 0.0;
    for (std::size_t i = 0; i < stack.size(); ++i) {
      if (!(var_f[i] >= 0.0))
        throw std::invalid_argument("admin_initialize: negative branch variance in profile");
      double w = std::max(1.0, std::sqrt(acc));
      std::fill(stack[i].omega.values().begin(), stack[i].omega.values().end(), w);
      acc += var_f[i];
    }
  };
  apply(m.encoder, rec.enc_var_f);
  apply(m.decoder, rec.dec_var_f);
}

// Measurement-grade setup of an Admin model: unit branch variances measured
// on the shortcut-scaled stream itself. calibrate_branch_gains pins branches
// with omega = 1, but setting the shortcut scales reshapes the stream deeper
// sub-layers see, so branch variances drift once omega is applied (attention
// drifts most, since its output rides on cross-position structure that the
// accumulating shortcut changes). Alternating a calibration pass on the
// current wiring with the shortcut-scale law for unit variances converges
// in about two rounds to the joint fixed point: Var[f_i] = 1 on the scaled
// stream and omega_i = max(1, sqrt(i-1)), which is where the 1/i
// self-dependency holds without the floor interfering. The training
// pipeline (profile + initialize) is unaffected; this is for the dependency
// and drift measurements.
inline void admin_calibrate(Model& m, const Batch& probe, int rounds = 2) {
  if (m.cfg.variant != ArchVariant::Admin)
    throw std::invalid_argument("admin_calibrate: model is not Admin-wired");
  if (rounds < 1) throw std::invalid_argument("admin_calibrate: rounds < 1");
  auto law = [](std::vector<SubLayer>& stack) {
    for (std::size_t i = 0; i < stack.size(); ++i) {
      double w = std::max(1.0, std::sqrt(static_cast<double>(i)));
      std::fill(stack[i].omega.values().begin(), stack[i].omega.values().end(), w);
    }
  };
  for (int r = 0; r < rounds; ++r) {
    calibrate_branch_gains(m, probe, 1.0);
    law(m.encoder);
    law(m.decoder);
  }
}

// ---------------------------------------------------------------------------
// Exact removal of the shortcut scales

// Folds each omega_i into the LayerNorm of sub-layer i-1 (gamma, nu *= omega_i)
// and compensates the matrices of sub-layer i that read the stream:
// feed-forward scales W^1 along its input dimension by 1/omega; self-attention
// scales W^Q, W^V1 (input rows) and W^K (input columns, as K is applied
// transposed) the same way; encoder-attention only W^Q, since its K/V read
// the encoder output whose LN is not being folded. The first sub-layer of a
// stack has no producing LN, so its omega must already be 1 (the empty-sum
// floor guarantees this). Afterwards the model computes bit-for-bit the
// same function with plain Post-LN wiring.
inline void reparameterize(Model& m) {
  if (m.cfg.variant != ArchVariant::Admin)
    throw std::invalid_argument("reparameterize: model is not Admin-wired");
  std::size_t d = static_cast<std::size_t>(m.cfg.d_model);
  auto fold_stack = [&](std::vector<SubLayer>& stack) {
    for (std::size_t i = 0; i < stack.size(); ++i) {
      SubLayer& sl = stack[i];
      const std::vector<double> w = sl.omega.values();
      for (double x : w)
        if (!(x > 0.0)) throw std::invalid_argument("reparameterize: nonpositive omega");
      if (i == 0) {
        for (double x : w)
          if (std::abs(x - 1.0) > 1e-12)
            throw std::invalid_argument("reparameterize: first sub-layer omega must be 1");
        continue;  // nothing to fold
      }
      SubLayer& prev = stack[i - 1];
      for (std::size_t j = 0; j < d; ++j) {
        prev.gamma.values()[j] *= w[j];
        prev.nu.values()[j] *= w[j];
      }
      auto scale_rows = [&](Tensor t) {
        std::size_t cols = t.cols();
        for (std::size_t r = 0; r < d; ++r) {
          double s = 1.0 / w[r];
          double* row = &t.values()[r * cols];
          for (std::size_t c = 0; c < cols; ++c) row[c] *= s;
        }
      };
      auto scale_cols = [&](Tensor t) {
        std::size_t cols = t.cols();
        for (std::size_t r = 0; r < t.rows(); ++r) {
          double* row = &t.values()[r * cols];
          for (std::size_t c = 0; c < cols; ++c) row[c] /= w[c];
        }
      };
      switch (sl.kind) {
        case SubLayerKind::FeedForward:
          scale_rows(sl.w1);
          break;
        case SubLayerKind::SelfAttention:
          scale_rows(sl.wq);
          scale_cols(sl.wk);  // K is applied as x . W^K_h^T: x meets the columns
          scale_rows(sl.wv1);
          break;
        case SubLayerKind::EncoderAttention:
          scale_rows(sl.wq);
          break;
      }
      std::fill(sl.omega.values().begin(), sl.omega.values().end(), 1.0);
    }
  };
  fold_stack(m.encoder);
  fold_stack(m.decoder);
  m.cfg.variant = ArchVariant::PostLN;
}

}  // namespace tlab
