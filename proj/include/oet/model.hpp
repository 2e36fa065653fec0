#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace oet {

// ---------------------------------------------------------------------------
// Byte-level tokenizer. Token ids 0..255 are raw byte values; 256 is BOS,
// 257 is EOS. encode/decode are total and exactly inverse over byte strings.
// ---------------------------------------------------------------------------

using TokenSeq = std::vector<int>;

struct Vocab {
  static constexpr int size = 258;
  static constexpr int bos_id = 256;
  static constexpr int eos_id = 257;
};

TokenSeq encode(std::string_view text);

// Ids >= 256 (BOS/EOS) are skipped, everything else maps back to its byte.
std::string decode(const TokenSeq& tokens);

// Half-open index range [begin, end). Used both for byte spans in assembled
// prompts and token spans (identical under the byte tokenizer).
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t len() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool operator==(const Span&) const = default;
};

// ---------------------------------------------------------------------------
// Decoder-only transformer, all math in 64-bit floats.
//
// Architecture: learned token + position embeddings, pre-norm blocks
// (LayerNorm -> causal multi-head attention -> residual, LayerNorm -> GELU
// MLP with 4x expansion -> residual), final LayerNorm, untied output
// projection. Weight matrices are row-major (input dim x output dim), so a
// projection is y = x W + b.
// ---------------------------------------------------------------------------

struct ModelConfig {
  int layers = 2;
  int d_model = 64;
  int heads = 4;
  int context = 512;
  int vocab = Vocab::size;

  int head_dim() const { return d_model / heads; }
  int d_ff() const { return 4 * d_model; }
  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  std::vector<double> ln1_g, ln1_b;        // d
  std::vector<double> wq, wk, wv, wo;      // d x d
  std::vector<double> bq, bk, bv, bo;      // d
  std::vector<double> ln2_g, ln2_b;        // d
  std::vector<double> w_fc, b_fc;          // d x 4d, 4d
  std::vector<double> w_proj, b_proj;      // 4d x d, d
};

struct ModelWeights {
  ModelConfig config;
  std::vector<double> wte;                 // vocab x d
  std::vector<double> wpe;                 // context x d
  std::vector<LayerWeights> layers;
  std::vector<double> lnf_g, lnf_b;        // d
  std::vector<double> w_out;               // d x vocab

  std::size_t param_count() const;
};

// Visits every parameter tensor in the fixed serialization order:
// wte, wpe, then per layer (ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo,
// ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj), then lnf_g, lnf_b, w_out.
template <class W, class F>
void for_each_param_tensor(W& w, F&& f) {
  f(w.wte);
  f(w.wpe);
  for (auto& l : w.layers) {
    f(l.ln1_g);
    f(l.ln1_b);
    f(l.wq);
    f(l.bq);
    f(l.wk);
    f(l.bk);
    f(l.wv);
    f(l.bv);
    f(l.wo);
    f(l.bo);
    f(l.ln2_g);
    f(l.ln2_b);
    f(l.w_fc);
    f(l.b_fc);
    f(l.w_proj);
    f(l.b_proj);
  }
  f(w.lnf_g);
  f(w.lnf_b);
  f(w.w_out);
}

// Allocates all tensors at their configured shapes, zero-filled.
ModelWeights make_zero_weights(const ModelConfig& config = {});

// Seeded random init (normal, std 0.02 for embeddings and projections,
// LayerNorm gains 1 / biases 0). Deterministic for a fixed seed.
ModelWeights make_random_weights(std::uint64_t seed, const ModelConfig& config = {});

// --- weight file ------------------------------------------------------------
// Little-endian binary: 32-byte header (magic "OETW", u32 format version,
// u32 layers/d_model/heads/context/vocab, u32 reserved = 0), then every
// parameter as little-endian f64 in for_each_param_tensor order.
inline constexpr std::uint32_t kWeightFormatVersion = 1;

void save_weights(const ModelWeights& w, const std::string& path);
ModelWeights load_weights(const std::string& path);

// --- inference / loss -------------------------------------------------------

// Next-token logits; row i is the distribution over token i+1.
// Throws std::length_error if tokens is empty or longer than the context.
std::vector<double> forward(const ModelWeights& w, const TokenSeq& tokens);

// Negative log-likelihood of `target` given `prompt`, summed over target
// tokens (nats). Loss rows share one forward pass over prompt ++ target.
double nll_loss(const ModelWeights& w, const TokenSeq& prompt, const TokenSeq& target);

struct LossGrad {
  double loss = 0.0;
  // span_len x vocab; entry (i, t) = d loss / d onehot(position begin+i)[t],
  // taking the embedding lookup as onehot x embedding-matrix.
  std::vector<double> grad;
  std::size_t span_len = 0;

  double at(std::size_t pos, int token) const { return grad[pos * Vocab::size + token]; }
};

// Analytic gradient w.r.t. the one-hot encoding of each position in
// adv_span (a token index range inside `prompt`). loss equals
// nll_loss(w, prompt, target) bit-exactly (same forward pass).
LossGrad loss_grad_onehot(const ModelWeights& w, const TokenSeq& prompt, Span adv_span,
                          const TokenSeq& target);

// Gradient w.r.t. the embedding inputs of adv_span positions
// (span_len x d_model). This is the continuous-space gradient the
// embedding-domain optimizers consume.
struct EmbedGrad {
  double loss = 0.0;
  std::vector<double> grad;  // span_len x d_model
  std::size_t span_len = 0;
};
EmbedGrad loss_grad_embed(const ModelWeights& w, const TokenSeq& prompt, Span adv_span,
                          const TokenSeq& target);

// Relaxed span: position i of the span is embedded as soft[i] x wte (a
// mixing row over the vocab; rows need not be normalized). Returns the loss
// and its gradient w.r.t. the soft rows. With exact one-hot rows the loss
// equals nll_loss on the corresponding hard sequence.
struct SoftGrad {
  double loss = 0.0;
  std::vector<double> grad;  // span_len x vocab
  std::size_t span_len = 0;
};
SoftGrad loss_grad_soft(const ModelWeights& w, const TokenSeq& prefix,
                        const std::vector<double>& soft_span, std::size_t span_len,
                        const TokenSeq& suffix, const TokenSeq& target);

// Loss of the relaxed sequence without the gradient.
double soft_loss(const ModelWeights& w, const TokenSeq& prefix,
                 const std::vector<double>& soft_span, std::size_t span_len,
                 const TokenSeq& suffix, const TokenSeq& target);

// --- sampling ---------------------------------------------------------------

// Autoregressive sampling. temperature == 0 is exact argmax (ties -> lowest
// token id). Stops at EOS (not emitted) or max_new_tokens; if the context
// fills up mid-generation the tokens produced so far are returned.
// Deterministic for fixed (weights, prompt, temperature, seed).
TokenSeq sample(const ModelWeights& w, const TokenSeq& prompt, double temperature,
                int max_new_tokens, std::uint64_t seed);

// --- gradient verification ---------------------------------------------------

// Central-difference check of loss_grad_onehot on sampled (position, token)
// coordinates: coordinates with the largest analytic magnitude per position
// plus the current token. Returns max |analytic - cd| / max(|analytic|, |cd|, 1e-12).
double finite_diff_check(const ModelWeights& w, const TokenSeq& prompt, Span adv_span,
                         const TokenSeq& target, double step,
                         int coords_per_position = 8);

// --- tiny trainer -------------------------------------------------------------

// Plain SGD on next-token NLL over text lines, each framed BOS ... EOS and
// truncated to the context. Returns the mean loss of the final pass.
// Only here so a locally "instruction-ish" model can be produced; nothing
// downstream depends on trained behavior.
double sgd_train(ModelWeights& w, const std::vector<std::string>& lines, int steps,
                 double learning_rate, std::uint64_t seed);

}  // namespace oet
