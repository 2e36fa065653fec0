#pragma once

// Shared forward/backward machinery for the toy transformer. Everything here
// is internal to the library; the public surface lives in oet/model.hpp.

#include <cstddef>
#include <vector>

#include "oet/model.hpp"

namespace oet::detail {

inline constexpr double kLnEps = 1e-5;

double gelu(double x);
double gelu_grad(double x);

// Per-layer activations kept for the backward pass.
struct LayerActs {
  std::vector<double> x_in;      // len x d, residual stream entering the layer
  std::vector<double> ln1_norm;  // len x d, (x - mu) * rstd
  std::vector<double> ln1_rstd;  // len
  std::vector<double> ln1_out;   // len x d, post gain/bias
  std::vector<double> q, k, v;   // len x d
  std::vector<double> att;       // heads x len x len, causal softmax probs
  std::vector<double> att_mix;   // len x d, per-head weighted values, pre-Wo
  std::vector<double> x_mid;     // len x d, residual after attention
  std::vector<double> ln2_norm;  // len x d
  std::vector<double> ln2_rstd;  // len
  std::vector<double> ln2_out;   // len x d
  std::vector<double> h_pre;     // len x 4d
  std::vector<double> h_act;     // len x 4d
};

struct Workspace {
  int len = 0;
  std::vector<double> x0;        // len x d, wte(+soft) + wpe
  std::vector<LayerActs> layers;
  std::vector<double> final_in;  // len x d, residual entering the final norm
  std::vector<double> lnf_norm;  // len x d
  std::vector<double> lnf_rstd;  // len
  std::vector<double> lnf_out;   // len x d
};

// x0 rows for hard tokens: wte[token] + wpe[pos]. Throws std::length_error /
// std::out_of_range on bad lengths or token ids.
void embed_hard(const ModelWeights& w, const TokenSeq& tokens, Workspace& ws);

// x0 with a relaxed span: positions [span_begin, span_begin+span_len) are
// embedded as soft_row x wte; the rest come from prefix/suffix tokens.
void embed_soft(const ModelWeights& w, const TokenSeq& prefix, const double* soft,
                std::size_t span_len, const TokenSeq& suffix, Workspace& ws);

// Runs the block stack over ws.x0, filling all activations through lnf_out.
void forward_stack(const ModelWeights& w, Workspace& ws);

// Logits for rows [row_begin, row_end): out has (row_end - row_begin) x vocab.
void logits_rows(const ModelWeights& w, const Workspace& ws, int row_begin, int row_end,
                 std::vector<double>& out);

// NLL of `target` given that the prompt occupies the first prompt_len
// positions of ws. When d_lnf_out is non-null it receives d loss / d lnf_out
// (len x d, zero outside the loss rows); param_grads, when non-null,
// accumulates d w_out.
double loss_rows(const ModelWeights& w, const Workspace& ws, std::size_t prompt_len,
                 const TokenSeq& target, std::vector<double>* d_lnf_out,
                 ModelWeights* param_grads);

// Backprop through the stack. d_lnf_out is consumed; dx0 receives the
// gradient w.r.t. the embedded inputs. param_grads, when non-null,
// accumulates every layer gradient (embeddings excluded -- the caller owns
// the embedding lookup).
void backward_stack(const ModelWeights& w, const Workspace& ws, std::vector<double>& d_lnf_out,
                    std::vector<double>& dx0, ModelWeights* param_grads);

}  // namespace oet::detail
