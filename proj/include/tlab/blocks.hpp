#pragma once

// Encoder-decoder transformer blocks with selectable residual wiring.
//
// Four wirings of the same sub-layers are supported:
//   PostLN : x_i = LN(x_{i-1} + f(x_{i-1}))
//   PreLN  : x_i = x_{i-1} + f(LN(x_{i-1})), one extra LN on top of a stack
//   Admin  : x_i = LN(omega_i (.) x_{i-1} + f(x_{i-1}))
//   Hybrid : PostLN encoder + PreLN decoder
//
// Encoder layers are [SelfAttention, FeedForward]; decoder layers are
// [SelfAttention, EncoderAttention, FeedForward]. Attention splits D into
// H head blocks; per head the value path is x W1_h W2_h (two D x D/H and
// D/H x D factors) rather than a single output projection, so each of the
// four attention matrices has a well-defined element variance at init.
//
// Forward passes can record an ActivationTrace per sequence: the branch
// output a_i, the pre-LN sum b_i (PostLN/Admin only) and the sub-layer
// output x_i as live tensors, so diagnostics can read both values and,
// after backward, gradients at every point of the stream.

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tlab/rng.hpp"
#include "tlab/tensor.hpp"

namespace tlab {

enum class ArchVariant { PostLN, PreLN, Admin, Hybrid };
enum class SubLayerKind { SelfAttention, EncoderAttention, FeedForward };
enum class Wiring { PostLN, PreLN, Admin };

inline const char* to_string(ArchVariant v) {
  switch (v) {
    case ArchVariant::PostLN: return "postln";
    case ArchVariant::PreLN: return "preln";
    case ArchVariant::Admin: return "admin";
    case ArchVariant::Hybrid: return "hybrid";
  }
  return "?";
}

inline ArchVariant variant_from_string(const std::string& s) {
  if (s == "postln") return ArchVariant::PostLN;
  if (s == "preln") return ArchVariant::PreLN;
  if (s == "admin") return ArchVariant::Admin;
  if (s == "hybrid") return ArchVariant::Hybrid;
  throw std::invalid_argument("unknown variant '" + s + "' (postln|preln|admin|hybrid)");
}

inline const char* to_string(SubLayerKind k) {
  switch (k) {
    case SubLayerKind::SelfAttention: return "self_attention";
    case SubLayerKind::EncoderAttention: return "encoder_attention";
    case SubLayerKind::FeedForward: return "feed_forward";
  }
  return "?";
}

struct SubLayer {
  SubLayerKind kind;
  // attention factors, all stored D x D; W^Q and W^V1 are column-blocked
  // per head, W^K and W^V2 are row-blocked (head h of W^K is the D/H x D
  // slice applied as x . W^K_h^T)
  Tensor wq, wk, wv1, wv2;
  // position-wise feed-forward factors
  Tensor w1, w2;  // D x D_ff, D_ff x D
  // this sub-layer's LayerNorm (post-positioned for PostLN/Admin, input-
  // positioned for PreLN) and the Admin shortcut scale
  Tensor gamma, nu, omega;  // 1 x D
};

struct ModelConfig {
  ArchVariant variant = ArchVariant::PostLN;
  int n_enc = 2;
  int n_dec = 2;
  int d_model = 32;
  int heads = 2;
  int d_ff = 64;
  int src_vocab = 16;
  int tgt_vocab = 16;
  int max_len = 64;
  double dropout = 0.0;       // residual-branch and attention-weight rate
  bool scaled_attention = true;  // divide scores by sqrt(D/H)
  double ln_eps = 1e-5;

  void validate() const {
    if (d_model <= 0 || heads <= 0 || d_ff <= 0) throw std::invalid_argument("ModelConfig: nonpositive dims");
    if (d_model % heads != 0) throw std::invalid_argument("ModelConfig: d_model must be divisible by heads");
    if (n_enc < 0 || n_dec < 0) throw std::invalid_argument("ModelConfig: negative layer count");
    if (n_enc == 0 && n_dec > 0) throw std::invalid_argument("ModelConfig: decoder requires an encoder");
    if (src_vocab < 2 || tgt_vocab < 2) throw std::invalid_argument("ModelConfig: vocab too small");
    if (max_len <= 0) throw std::invalid_argument("ModelConfig: max_len must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("ModelConfig: dropout outside [0,1)");
  }
};

// classic fixed sinusoidal position table, rows = positions
inline std::vector<double> sinusoid_table(int max_len, int d) {
  std::vector<double> t(static_cast<std::size_t>(max_len) * d);
  for (int pos = 0; pos < max_len; ++pos) {
    for (int j = 0; j < d; j += 2) {
      double freq = std::pow(10000.0, -static_cast<double>(j) / d);
      t[static_cast<std::size_t>(pos) * d + j] = std::sin(pos * freq);
      if (j + 1 < d) t[static_cast<std::size_t>(pos) * d + j + 1] = std::cos(pos * freq);
    }
  }
  return t;
}

struct Model {
  ModelConfig cfg;
  Tensor src_embed, tgt_embed;  // V x D, scaled by sqrt(D) at lookup
  std::vector<SubLayer> encoder;  // 2 * n_enc
  std::vector<SubLayer> decoder;  // 3 * n_dec
  // stack-top LayerNorms, only present where the stack wiring is PreLN
  Tensor enc_final_gamma, enc_final_nu;
  Tensor dec_final_gamma, dec_final_nu;
  Tensor out_proj;  // D x tgt_vocab
  std::vector<double> pos_table;  // max_len x D, constant
  // nominal element variance each weight matrix was drawn with
  std::map<std::string, double> init_var;

  Wiring enc_wiring() const {
    switch (cfg.variant) {
      case ArchVariant::PreLN: return Wiring::PreLN;
      case ArchVariant::Admin: return Wiring::Admin;
      default: return Wiring::PostLN;  // PostLN and Hybrid
    }
  }
  Wiring dec_wiring() const {
    switch (cfg.variant) {
      case ArchVariant::PreLN:
      case ArchVariant::Hybrid: return Wiring::PreLN;
      case ArchVariant::Admin: return Wiring::Admin;
      default: return Wiring::PostLN;
    }
  }

  // canonical parameter enumeration; checkpointing and the optimizers rely
  // on this order being stable
  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("src_embed", src_embed);
    if (cfg.n_dec > 0) out.emplace_back("tgt_embed", tgt_embed);
    auto push_stack = [&out](const char* side, const std::vector<SubLayer>& stack) {
      for (std::size_t i = 0; i < stack.size(); ++i) {
        const SubLayer& sl = stack[i];
        std::string p = std::string(side) + "." + std::to_string(i) + ".";
        if (sl.kind == SubLayerKind::FeedForward) {
          out.emplace_back(p + "w1", sl.w1);
          out.emplace_back(p + "w2", sl.w2);
        } else {
          out.emplace_back(p + "wq", sl.wq);
          out.emplace_back(p + "wk", sl.wk);
          out.emplace_back(p + "wv1", sl.wv1);
          out.emplace_back(p + "wv2", sl.wv2);
        }
        out.emplace_back(p + "gamma", sl.gamma);
        out.emplace_back(p + "nu", sl.nu);
        out.emplace_back(p + "omega", sl.omega);
      }
    };
    push_stack("enc", encoder);
    push_stack("dec", decoder);
    if (enc_final_gamma.defined()) {
      out.emplace_back("enc_final.gamma", enc_final_gamma);
      out.emplace_back("enc_final.nu", enc_final_nu);
    }
    if (dec_final_gamma.defined()) {
      out.emplace_back("dec_final.gamma", dec_final_gamma);
      out.emplace_back("dec_final.nu", dec_final_nu);
    }
    if (cfg.n_dec > 0) out.emplace_back("out_proj", out_proj);
    return out;
  }

  // trainable weight matrices only (no norms, no omega); these are the
  // tensors perturbation experiments and per-matrix norm tracking touch
  std::vector<std::pair<std::string, Tensor>> weight_matrices() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& [name, t] : named_params()) {
      auto leaf = name.substr(name.rfind('.') + 1);
      if (leaf == "gamma" || leaf == "nu" || leaf == "omega") continue;
      out.emplace_back(name, t);
    }
    return out;
  }
};

// Allocates all parameters: weights zero, gamma = 1, nu = 0, omega = 1.
// Values are filled in by the init module.
inline Model make_model(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  std::size_t d = static_cast<std::size_t>(cfg.d_model);
  auto ones = [d]() {
    Tensor t = Tensor::leaf(1, d, true);
    for (auto& v : t.values()) v = 1.0;
    return t;
  };
  auto zeros = [d]() { return Tensor::leaf(1, d, true); };
  auto make_sublayer = [&](SubLayerKind kind) {
    SubLayer sl;
    sl.kind = kind;
    if (kind == SubLayerKind::FeedForward) {
      sl.w1 = Tensor::leaf(d, cfg.d_ff, true);
      sl.w2 = Tensor::leaf(cfg.d_ff, d, true);
    } else {
      sl.wq = Tensor::leaf(d, d, true);
      sl.wk = Tensor::leaf(d, d, true);
      sl.wv1 = Tensor::leaf(d, d, true);
      sl.wv2 = Tensor::leaf(d, d, true);
    }
    sl.gamma = ones();
    sl.nu = zeros();
    sl.omega = ones();
    return sl;
  };
  m.src_embed = Tensor::leaf(cfg.src_vocab, d, true);
  if (cfg.n_dec > 0) {
    m.tgt_embed = Tensor::leaf(cfg.tgt_vocab, d, true);
    m.out_proj = Tensor::leaf(d, cfg.tgt_vocab, true);
  }
  for (int i = 0; i < cfg.n_enc; ++i) {
    m.encoder.push_back(make_sublayer(SubLayerKind::SelfAttention));
    m.encoder.push_back(make_sublayer(SubLayerKind::FeedForward));
  }
  for (int i = 0; i < cfg.n_dec; ++i) {
    m.decoder.push_back(make_sublayer(SubLayerKind::SelfAttention));
    m.decoder.push_back(make_sublayer(SubLayerKind::EncoderAttention));
    m.decoder.push_back(make_sublayer(SubLayerKind::FeedForward));
  }
  if (m.enc_wiring() == Wiring::PreLN) {
    m.enc_final_gamma = ones();
    m.enc_final_nu = zeros();
  }
  if (cfg.n_dec > 0 && m.dec_wiring() == Wiring::PreLN) {
    m.dec_final_gamma = ones();
    m.dec_final_nu = zeros();
  }
  m.pos_table = sinusoid_table(cfg.max_len, cfg.d_model);
  return m;
}

// ---------------------------------------------------------------------------
// Forward passes

struct TraceEntry {
  SubLayerKind kind = SubLayerKind::SelfAttention;
  Tensor a;  // branch output f(.) before dropout
  Tensor b;  // pre-LN sum; undefined for PreLN wiring
  Tensor x;  // sub-layer output
};

struct ActivationTrace {
  Tensor x0;                       // embedding + position stream entering the stack
  std::vector<TraceEntry> entries;
};

struct ForwardOptions {
  bool train = false;   // enables dropout (rate from ModelConfig)
  Rng* rng = nullptr;   // required when train && dropout > 0
};

inline Tensor ffn_forward(const Tensor& x, const SubLayer& sl) {
  return matmul(relu(matmul(x, sl.w1)), sl.w2);
}

// Multi-head attention, queries from x_q, keys/values from x_kv.
// Head h: softmax(x_q W^Q_h (x_kv W^K_h^T)^T / sqrt(D/H)) x_kv W^V1_h W^V2_h,
// summed over heads. The causal flag restricts row t to keys <= t.
inline Tensor mha_forward(const Tensor& x_q, const Tensor& x_kv, const SubLayer& sl,
                          const ModelConfig& cfg, bool causal, const ForwardOptions& opts) {
  std::size_t d = static_cast<std::size_t>(cfg.d_model);
  std::size_t h = static_cast<std::size_t>(cfg.heads);
  std::size_t dh = d / h;
  std::size_t lq = x_q.rows(), lk = x_kv.rows();
  std::optional<std::vector<std::uint8_t>> keep;
  if (causal) {
    if (lq != lk) throw shape_error("mha_forward: causal mask needs square scores");
    keep.emplace(lq * lk, 0);
    for (std::size_t i = 0; i < lq; ++i)
      for (std::size_t j = 0; j <= i; ++j) (*keep)[i * lk + j] = 1;
  }
  Tensor out;
  for (std::size_t head = 0; head < h; ++head) {
    std::size_t c0 = head * dh, c1 = (head + 1) * dh;
    Tensor q = matmul(x_q, slice_cols(sl.wq, c0, c1));          // lq x dh
    Tensor k = matmul_nt(x_kv, slice_rows(sl.wk, c0, c1));      // lk x dh
    Tensor scores = matmul_nt(q, k);                            // lq x lk
    if (cfg.scaled_attention) scores = mul_scalar(scores, 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor probs = row_softmax(scores, keep ? &*keep : nullptr);
    if (opts.train && cfg.dropout > 0.0) {
      if (!opts.rng) throw std::invalid_argument("mha_forward: train-mode dropout needs an rng");
      probs = dropout(probs, cfg.dropout, *opts.rng, true);
    }
    Tensor v = matmul(x_kv, slice_cols(sl.wv1, c0, c1));        // lk x dh
    Tensor head_out = matmul(matmul(probs, v), slice_rows(sl.wv2, c0, c1));  // lq x d
    out = out.defined() ? add(out, head_out) : head_out;
  }
  return out;
}

// One sub-layer under the given wiring. enc_out is only consulted for
// EncoderAttention. The returned tensor is x_i; if trace is non-null the
// intermediate tensors are recorded.
inline Tensor sublayer_forward(const Tensor& x_prev, const SubLayer& sl, Wiring wiring,
                               const ModelConfig& cfg, const Tensor* enc_out, bool causal,
                               const ForwardOptions& opts, TraceEntry* trace = nullptr) {
  Tensor u = x_prev;
  if (wiring == Wiring::PreLN) u = layer_norm(x_prev, sl.gamma, sl.nu, cfg.ln_eps);

  Tensor a;
  switch (sl.kind) {
    case SubLayerKind::SelfAttention:
      a = mha_forward(u, u, sl, cfg, causal, opts);
      break;
    case SubLayerKind::EncoderAttention:
      if (!enc_out) throw std::invalid_argument("sublayer_forward: EncoderAttention without encoder output");
      a = mha_forward(u, *enc_out, sl, cfg, /*causal=*/false, opts);
      break;
    case SubLayerKind::FeedForward:
      a = ffn_forward(u, sl);
      break;
  }

  Tensor ad = a;
  if (opts.train && cfg.dropout > 0.0) {
    if (!opts.rng) throw std::invalid_argument("sublayer_forward: train-mode dropout needs an rng");
    ad = dropout(a, cfg.dropout, *opts.rng, true);
  }

  Tensor b, x;
  switch (wiring) {
    case Wiring::PostLN:
      b = add(x_prev, ad);
      x = layer_norm(b, sl.gamma, sl.nu, cfg.ln_eps);
      break;
    case Wiring::PreLN:
      x = add(x_prev, ad);
      break;
    case Wiring::Admin:
      b = add(scale_elementwise(x_prev, sl.omega), ad);
      x = layer_norm(b, sl.gamma, sl.nu, cfg.ln_eps);
      break;
  }
  if (trace) {
    trace->kind = sl.kind;
    trace->a = a;
    trace->b = b;
    trace->x = x;
  }
  return x;
}

// embeddings * sqrt(D) + sinusoid positions
inline Tensor embed_sequence(const Model& m, const Tensor& table, const std::vector<int>& ids) {
  if (static_cast<int>(ids.size()) > m.cfg.max_len)
    throw std::invalid_argument("embed_sequence: sequence longer than max_len");
  std::size_t d = static_cast<std::size_t>(m.cfg.d_model);
  Tensor e = mul_scalar(embed(table, ids), std::sqrt(static_cast<double>(m.cfg.d_model)));
  std::vector<double> pos(ids.size() * d);
  std::copy_n(m.pos_table.begin(), pos.size(), pos.begin());
  return add(e, Tensor::from(ids.size(), d, std::move(pos)));
}

inline Tensor encoder_forward(const Model& m, const std::vector<int>& src,
                              const ForwardOptions& opts, ActivationTrace* trace = nullptr) {
  if (m.cfg.n_enc == 0) throw std::invalid_argument("encoder_forward: model has no encoder");
  Tensor x = embed_sequence(m, m.src_embed, src);
  if (trace) {
    trace->x0 = x;
    trace->entries.clear();
  }
  Wiring w = m.enc_wiring();
  for (const SubLayer& sl : m.encoder) {
    TraceEntry e;
    x = sublayer_forward(x, sl, w, m.cfg, nullptr, /*causal=*/false, opts, trace ? &e : nullptr);
    if (trace) trace->entries.push_back(std::move(e));
  }
  if (w == Wiring::PreLN) x = layer_norm(x, m.enc_final_gamma, m.enc_final_nu, m.cfg.ln_eps);
  return x;
}

inline Tensor decoder_forward(const Model& m, const std::vector<int>& tgt_in,
                              const Tensor& enc_out, const ForwardOptions& opts,
                              ActivationTrace* trace = nullptr) {
  if (m.cfg.n_dec == 0) throw std::invalid_argument("decoder_forward: model has no decoder");
  Tensor x = embed_sequence(m, m.tgt_embed, tgt_in);
  if (trace) {
    trace->x0 = x;
    trace->entries.clear();
  }
  Wiring w = m.dec_wiring();
  for (const SubLayer& sl : m.decoder) {
    TraceEntry e;
    bool causal = sl.kind == SubLayerKind::SelfAttention;
    x = sublayer_forward(x, sl, w, m.cfg, &enc_out, causal, opts, trace ? &e : nullptr);
    if (trace) trace->entries.push_back(std::move(e));
  }
  if (w == Wiring::PreLN) x = layer_norm(x, m.dec_final_gamma, m.dec_final_nu, m.cfg.ln_eps);
  return x;
}

// logits over the target vocabulary for one (src, tgt_in) pair
inline Tensor model_forward(const Model& m, const std::vector<int>& src,
                            const std::vector<int>& tgt_in, const ForwardOptions& opts,
                            ActivationTrace* enc_trace = nullptr,
                            ActivationTrace* dec_trace = nullptr) {
  Tensor enc = encoder_forward(m, src, opts, enc_trace);
  Tensor dec = decoder_forward(m, tgt_in, enc, opts, dec_trace);
  return matmul(dec, m.out_proj);
}

// ---------------------------------------------------------------------------
// Batched teacher-forced loss

constexpr int kBosToken = 0;  // reserved in every target vocabulary

struct Batch {
  std::vector<std::vector<int>> src;
  std::vector<std::vector<int>> tgt;  // labels; decoder input is BOS + tgt[:-1]
};

// Mean cross-entropy over all target positions in the batch. Sequences are
// processed independently (ragged lengths are fine, no padding token
// exists). Traces, when requested, get one entry per sequence.
inline Tensor model_loss(const Model& m, const Batch& batch, const ForwardOptions& opts,
                         std::vector<ActivationTrace>* enc_traces = nullptr,
                         std::vector<ActivationTrace>* dec_traces = nullptr) {
  if (batch.src.size() != batch.tgt.size() || batch.src.empty())
    throw std::invalid_argument("model_loss: batch src/tgt mismatch or empty");
  if (enc_traces) enc_traces->assign(batch.src.size(), {});
  if (dec_traces) dec_traces->assign(batch.src.size(), {});
  std::size_t total = 0;
  for (auto& t : batch.tgt) total += t.size();
  if (total == 0) throw std::invalid_argument("model_loss: no target tokens");
  Tensor loss;
  for (std::size_t s = 0; s < batch.src.size(); ++s) {
    const auto& tgt = batch.tgt[s];
    if (tgt.empty()) throw std::invalid_argument("model_loss: empty target sequence");
    std::vector<int> tgt_in(tgt.size());
    tgt_in[0] = kBosToken;
    std::copy(tgt.begin(), tgt.end() - 1, tgt_in.begin() + 1);
    Tensor logits = model_forward(m, batch.src[s], tgt_in, opts,
                                  enc_traces ? &(*enc_traces)[s] : nullptr,
                                  dec_traces ? &(*dec_traces)[s] : nullptr);
    Tensor li = mul_scalar(cross_entropy(logits, tgt),
                           static_cast<double>(tgt.size()) / static_cast<double>(total));
    loss = loss.defined() ? add(loss, li) : li;
  }
  return loss;
}

}  // namespace tlab
