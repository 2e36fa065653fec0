#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "model_internal.hpp"
#include "oet/model.hpp"

namespace oet {
namespace detail {
namespace {

void layer_norm_backward(const std::vector<double>& dy, const std::vector<double>& norm,
                         const std::vector<double>& rstd, const std::vector<double>& g,
                         int len, int d, std::vector<double>& dx, std::vector<double>* dg,
                         std::vector<double>* db) {
  dx.assign(static_cast<std::size_t>(len) * d, 0.0);
  for (int i = 0; i < len; ++i) {
    const double* dyr = &dy[static_cast<std::size_t>(i) * d];
    const double* nr = &norm[static_cast<std::size_t>(i) * d];
    double* dxr = &dx[static_cast<std::size_t>(i) * d];
    double m1 = 0.0;
    double m2 = 0.0;
    for (int j = 0; j < d; ++j) {
      const double dn = dyr[j] * g[static_cast<std::size_t>(j)];
      m1 += dn;
      m2 += dn * nr[j];
    }
    m1 /= d;
    m2 /= d;
    const double rs = rstd[static_cast<std::size_t>(i)];
    for (int j = 0; j < d; ++j) {
      const double dn = dyr[j] * g[static_cast<std::size_t>(j)];
      dxr[j] = rs * (dn - m1 - nr[j] * m2);
    }
    if (dg) {
      for (int j = 0; j < d; ++j) {
        (*dg)[static_cast<std::size_t>(j)] += dyr[j] * nr[j];
        (*db)[static_cast<std::size_t>(j)] += dyr[j];
      }
    }
  }
}

// Backward of y = x W + b. dx is accumulated (+=) so residual paths can share
// one buffer; dw/db accumulate when supplied.
void linear_backward(const std::vector<double>& x, const std::vector<double>& wmat,
                     const std::vector<double>& dy, int len, int in, int out,
                     std::vector<double>& dx, std::vector<double>* dw, std::vector<double>* db) {
  for (int i = 0; i < len; ++i) {
    const double* dyr = &dy[static_cast<std::size_t>(i) * out];
    double* dxr = &dx[static_cast<std::size_t>(i) * in];
    for (int j = 0; j < in; ++j) {
      const double* wrow = &wmat[static_cast<std::size_t>(j) * out];
      double acc = 0.0;
      for (int o = 0; o < out; ++o) acc += dyr[o] * wrow[o];
      dxr[j] += acc;
    }
  }
  if (dw) {
    for (int i = 0; i < len; ++i) {
      const double* xr = &x[static_cast<std::size_t>(i) * in];
      const double* dyr = &dy[static_cast<std::size_t>(i) * out];
      for (int j = 0; j < in; ++j) {
        const double xv = xr[j];
        if (xv == 0.0) continue;
        double* dwr = &(*dw)[static_cast<std::size_t>(j) * out];
        for (int o = 0; o < out; ++o) dwr[o] += xv * dyr[o];
      }
      for (int o = 0; o < out; ++o) (*db)[static_cast<std::size_t>(o)] += dyr[o];
    }
  }
}

}  // namespace

void backward_stack(const ModelWeights& w, const Workspace& ws, std::vector<double>& d_lnf_out,
                    std::vector<double>& dx0, ModelWeights* pg) {
  const int len = ws.len;
  const int d = w.config.d_model;
  const int ff = w.config.d_ff();
  const int heads = w.config.heads;
  const int hd = w.config.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // Final norm.
  std::vector<double> dx;
  layer_norm_backward(d_lnf_out, ws.lnf_norm, ws.lnf_rstd, w.lnf_g, len, d, dx,
                      pg ? &pg->lnf_g : nullptr, pg ? &pg->lnf_b : nullptr);

  std::vector<double> d_ln_out(static_cast<std::size_t>(len) * d);
  std::vector<double> dh_act(static_cast<std::size_t>(len) * ff);
  std::vector<double> dh_pre(static_cast<std::size_t>(len) * ff);
  std::vector<double> dq(static_cast<std::size_t>(len) * d);
  std::vector<double> dk(static_cast<std::size_t>(len) * d);
  std::vector<double> dv(static_cast<std::size_t>(len) * d);
  std::vector<double> datt_mix(static_cast<std::size_t>(len) * d);
  std::vector<double> dp(static_cast<std::size_t>(len));

  for (int li = w.config.layers - 1; li >= 0; --li) {
    const LayerWeights& lw = w.layers[static_cast<std::size_t>(li)];
    LayerWeights* lg = pg ? &pg->layers[static_cast<std::size_t>(li)] : nullptr;
    const LayerActs& a = ws.layers[static_cast<std::size_t>(li)];

    // MLP branch: dx is d(x_out); residual passes it straight to x_mid.
    std::fill(dh_act.begin(), dh_act.end(), 0.0);
    linear_backward(a.h_act, lw.w_proj, dx, len, ff, d, dh_act,
                    lg ? &lg->w_proj : nullptr, lg ? &lg->b_proj : nullptr);
    for (std::size_t idx = 0; idx < dh_pre.size(); ++idx) {
      dh_pre[idx] = dh_act[idx] * gelu_grad(a.h_pre[idx]);
    }
    std::fill(d_ln_out.begin(), d_ln_out.end(), 0.0);
    linear_backward(a.ln2_out, lw.w_fc, dh_pre, len, d, ff, d_ln_out,
                    lg ? &lg->w_fc : nullptr, lg ? &lg->b_fc : nullptr);

    std::vector<double> dx_mid;
    layer_norm_backward(d_ln_out, a.ln2_norm, a.ln2_rstd, lw.ln2_g, len, d, dx_mid,
                        lg ? &lg->ln2_g : nullptr, lg ? &lg->ln2_b : nullptr);
    for (std::size_t idx = 0; idx < dx_mid.size(); ++idx) dx_mid[idx] += dx[idx];

    // Attention branch: dx_mid is d(x_mid); residual passes it to x_in.
    std::fill(datt_mix.begin(), datt_mix.end(), 0.0);
    linear_backward(a.att_mix, lw.wo, dx_mid, len, d, d, datt_mix,
                    lg ? &lg->wo : nullptr, lg ? &lg->bo : nullptr);

    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    for (int h = 0; h < heads; ++h) {
      const int hoff = h * hd;
      const double* att_h = &a.att[static_cast<std::size_t>(h) * len * len];
      for (int i = 0; i < len; ++i) {
        const double* prow = &att_h[static_cast<std::size_t>(i) * len];
        const double* dmix = &datt_mix[static_cast<std::size_t>(i) * d + hoff];

        double dot_pd = 0.0;
        for (int j = 0; j <= i; ++j) {
          const double* vj = &a.v[static_cast<std::size_t>(j) * d + hoff];
          double acc = 0.0;
          for (int c = 0; c < hd; ++c) acc += dmix[c] * vj[c];
          dp[static_cast<std::size_t>(j)] = acc;
          dot_pd += prow[j] * acc;

          double* dvj = &dv[static_cast<std::size_t>(j) * d + hoff];
          const double p = prow[j];
          for (int c = 0; c < hd; ++c) dvj[c] += p * dmix[c];
        }

        const double* qi = &a.q[static_cast<std::size_t>(i) * d + hoff];
        double* dqi = &dq[static_cast<std::size_t>(i) * d + hoff];
        for (int j = 0; j <= i; ++j) {
          const double ds = prow[j] * (dp[static_cast<std::size_t>(j)] - dot_pd) * scale;
          if (ds == 0.0) continue;
          const double* kj = &a.k[static_cast<std::size_t>(j) * d + hoff];
          double* dkj = &dk[static_cast<std::size_t>(j) * d + hoff];
          for (int c = 0; c < hd; ++c) {
            dqi[c] += ds * kj[c];
            dkj[c] += ds * qi[c];
          }
        }
      }
    }

    std::fill(d_ln_out.begin(), d_ln_out.end(), 0.0);
    linear_backward(a.ln1_out, lw.wq, dq, len, d, d, d_ln_out,
                    lg ? &lg->wq : nullptr, lg ? &lg->bq : nullptr);
    linear_backward(a.ln1_out, lw.wk, dk, len, d, d, d_ln_out,
                    lg ? &lg->wk : nullptr, lg ? &lg->bk : nullptr);
    linear_backward(a.ln1_out, lw.wv, dv, len, d, d, d_ln_out,
                    lg ? &lg->wv : nullptr, lg ? &lg->bv : nullptr);

    std::vector<double> dx_in;
    layer_norm_backward(d_ln_out, a.ln1_norm, a.ln1_rstd, lw.ln1_g, len, d, dx_in,
                        lg ? &lg->ln1_g : nullptr, lg ? &lg->ln1_b : nullptr);
    for (std::size_t idx = 0; idx < dx_in.size(); ++idx) dx_in[idx] += dx_mid[idx];
    dx = std::move(dx_in);
  }

  dx0 = std::move(dx);
}

}  // namespace detail

namespace {

void check_span(const TokenSeq& prompt, Span span) {
  if (span.empty()) throw std::out_of_range("adv span is empty");
  if (span.end > prompt.size()) throw std::out_of_range("adv span exceeds prompt bounds");
}

// grad (rows x vocab) = dx0 rows (rows x d) dotted against every embedding row.
std::vector<double> project_onto_embeddings(const ModelWeights& w, const std::vector<double>& dx0,
                                            std::size_t row_begin, std::size_t rows) {
  const int d = w.config.d_model;
  const int vocab = w.config.vocab;
  std::vector<double> grad(rows * static_cast<std::size_t>(vocab), 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* drow = &dx0[(row_begin + i) * static_cast<std::size_t>(d)];
    double* grow = &grad[i * static_cast<std::size_t>(vocab)];
    for (int t = 0; t < vocab; ++t) {
      const double* te = &w.wte[static_cast<std::size_t>(t) * d];
      double acc = 0.0;
      for (int j = 0; j < d; ++j) acc += drow[j] * te[j];
      grow[t] = acc;
    }
  }
  return grad;
}

}  // namespace

LossGrad loss_grad_onehot(const ModelWeights& w, const TokenSeq& prompt, Span adv_span,
                          const TokenSeq& target) {
  if (prompt.empty()) throw std::length_error("loss_grad_onehot: empty prompt");
  if (target.empty()) throw std::length_error("loss_grad_onehot: empty target");
  check_span(prompt, adv_span);

  TokenSeq seq = prompt;
  seq.insert(seq.end(), target.begin(), target.end());
  detail::Workspace ws;
  detail::embed_hard(w, seq, ws);
  detail::forward_stack(w, ws);

  std::vector<double> d_lnf_out;
  LossGrad out;
  out.loss = detail::loss_rows(w, ws, prompt.size(), target, &d_lnf_out, nullptr);

  std::vector<double> dx0;
  detail::backward_stack(w, ws, d_lnf_out, dx0, nullptr);
  out.span_len = adv_span.len();
  out.grad = project_onto_embeddings(w, dx0, adv_span.begin, adv_span.len());
  return out;
}

EmbedGrad loss_grad_embed(const ModelWeights& w, const TokenSeq& prompt, Span adv_span,
                          const TokenSeq& target) {
  if (prompt.empty()) throw std::length_error("loss_grad_embed: empty prompt");
  if (target.empty()) throw std::length_error("loss_grad_embed: empty target");
  check_span(prompt, adv_span);

  TokenSeq seq = prompt;
  seq.insert(seq.end(), target.begin(), target.end());
  detail::Workspace ws;
  detail::embed_hard(w, seq, ws);
  detail::forward_stack(w, ws);

  std::vector<double> d_lnf_out;
  EmbedGrad out;
  out.loss = detail::loss_rows(w, ws, prompt.size(), target, &d_lnf_out, nullptr);

  std::vector<double> dx0;
  detail::backward_stack(w, ws, d_lnf_out, dx0, nullptr);

  const int d = w.config.d_model;
  out.span_len = adv_span.len();
  out.grad.assign(out.span_len * static_cast<std::size_t>(d), 0.0);
  std::copy(dx0.begin() + static_cast<std::ptrdiff_t>(adv_span.begin * static_cast<std::size_t>(d)),
            dx0.begin() + static_cast<std::ptrdiff_t>(adv_span.end * static_cast<std::size_t>(d)),
            out.grad.begin());
  return out;
}

SoftGrad loss_grad_soft(const ModelWeights& w, const TokenSeq& prefix,
                        const std::vector<double>& soft_span, std::size_t span_len,
                        const TokenSeq& suffix, const TokenSeq& target) {
  if (soft_span.size() != span_len * static_cast<std::size_t>(Vocab::size)) {
    throw std::invalid_argument("loss_grad_soft: soft span shape mismatch");
  }
  if (span_len == 0) throw std::invalid_argument("loss_grad_soft: empty span");
  if (target.empty()) throw std::length_error("loss_grad_soft: empty target");

  TokenSeq suffix_with_target = suffix;
  suffix_with_target.insert(suffix_with_target.end(), target.begin(), target.end());
  detail::Workspace ws;
  detail::embed_soft(w, prefix, soft_span.data(), span_len, suffix_with_target, ws);
  detail::forward_stack(w, ws);

  const std::size_t prompt_len = prefix.size() + span_len + suffix.size();
  std::vector<double> d_lnf_out;
  SoftGrad out;
  out.loss = detail::loss_rows(w, ws, prompt_len, target, &d_lnf_out, nullptr);

  std::vector<double> dx0;
  detail::backward_stack(w, ws, d_lnf_out, dx0, nullptr);
  out.span_len = span_len;
  out.grad = project_onto_embeddings(w, dx0, prefix.size(), span_len);
  return out;
}

}  // namespace oet
