#include "oet/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "model_internal.hpp"
#include "oet/rng.hpp"

namespace oet {

TokenSeq encode(std::string_view text) {
  TokenSeq out;
  out.reserve(text.size());
  for (unsigned char c : text) {
    out.push_back(static_cast<int>(c));
  }
  return out;
}

std::string decode(const TokenSeq& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int id : tokens) {
    if (id >= 0 && id < 256) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
  }
  return out;
}

std::size_t ModelWeights::param_count() const {
  std::size_t n = 0;
  for_each_param_tensor(*this, [&](const std::vector<double>& t) { n += t.size(); });
  return n;
}

ModelWeights make_zero_weights(const ModelConfig& config) {
  if (config.layers < 1 || config.d_model < 1 || config.heads < 1 ||
      config.d_model % config.heads != 0 || config.context < 1 || config.vocab != Vocab::size) {
    throw std::invalid_argument("make_zero_weights: bad model config");
  }
  const std::size_t d = static_cast<std::size_t>(config.d_model);
  const std::size_t ff = static_cast<std::size_t>(config.d_ff());
  const std::size_t v = static_cast<std::size_t>(config.vocab);

  ModelWeights w;
  w.config = config;
  w.wte.assign(v * d, 0.0);
  w.wpe.assign(static_cast<std::size_t>(config.context) * d, 0.0);
  w.layers.resize(static_cast<std::size_t>(config.layers));
  for (auto& l : w.layers) {
    l.ln1_g.assign(d, 0.0);
    l.ln1_b.assign(d, 0.0);
    l.wq.assign(d * d, 0.0);
    l.wk.assign(d * d, 0.0);
    l.wv.assign(d * d, 0.0);
    l.wo.assign(d * d, 0.0);
    l.bq.assign(d, 0.0);
    l.bk.assign(d, 0.0);
    l.bv.assign(d, 0.0);
    l.bo.assign(d, 0.0);
    l.ln2_g.assign(d, 0.0);
    l.ln2_b.assign(d, 0.0);
    l.w_fc.assign(d * ff, 0.0);
    l.b_fc.assign(ff, 0.0);
    l.w_proj.assign(ff * d, 0.0);
    l.b_proj.assign(d, 0.0);
  }
  w.lnf_g.assign(d, 0.0);
  w.lnf_b.assign(d, 0.0);
  w.w_out.assign(d * v, 0.0);
  return w;
}

namespace {

// Hand-rolled Box-Muller over mt19937_64 draws; std::normal_distribution is
// not bit-specified by the standard.
class NormalGen {
 public:
  explicit NormalGen(std::uint64_t seed) : rng_(seed) {}

  double next(double stddev) {
    if (has_spare_) {
      has_spare_ = false;
      return spare_ * stddev;
    }
    const double u1 = 1.0 - u64_to_unit_double(rng_());
    const double u2 = u64_to_unit_double(rng_());
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a) * stddev;
  }

 private:
  std::mt19937_64 rng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace

ModelWeights make_random_weights(std::uint64_t seed, const ModelConfig& config) {
  ModelWeights w = make_zero_weights(config);
  NormalGen gen(seed);
  const double std_init = 0.02;

  auto fill = [&](std::vector<double>& t) {
    for (double& x : t) {
      x = gen.next(std_init);
    }
  };
  auto ones = [](std::vector<double>& t) { std::fill(t.begin(), t.end(), 1.0); };

  fill(w.wte);
  fill(w.wpe);
  for (auto& l : w.layers) {
    ones(l.ln1_g);
    fill(l.wq);
    fill(l.wk);
    fill(l.wv);
    fill(l.wo);
    ones(l.ln2_g);
    fill(l.w_fc);
    fill(l.w_proj);
  }
  ones(w.lnf_g);
  fill(w.w_out);
  return w;
}

namespace detail {

double gelu(double x) {
  const double c = 0.7978845608028654;  // sqrt(2/pi)
  const double u = c * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double c = 0.7978845608028654;
  const double u = c * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

namespace {

void layer_norm_forward(const std::vector<double>& x, const std::vector<double>& g,
                        const std::vector<double>& b, int len, int d,
                        std::vector<double>& norm, std::vector<double>& rstd,
                        std::vector<double>& out) {
  norm.assign(static_cast<std::size_t>(len) * d, 0.0);
  rstd.assign(static_cast<std::size_t>(len), 0.0);
  out.assign(static_cast<std::size_t>(len) * d, 0.0);
  for (int i = 0; i < len; ++i) {
    const double* row = &x[static_cast<std::size_t>(i) * d];
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double dx = row[j] - mean;
      var += dx * dx;
    }
    var /= d;
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd[static_cast<std::size_t>(i)] = rs;
    double* nrow = &norm[static_cast<std::size_t>(i) * d];
    double* orow = &out[static_cast<std::size_t>(i) * d];
    for (int j = 0; j < d; ++j) {
      nrow[j] = (row[j] - mean) * rs;
      orow[j] = g[static_cast<std::size_t>(j)] * nrow[j] + b[static_cast<std::size_t>(j)];
    }
  }
}

// y[len x out] = x[len x in] W[in x out] + b
void linear_forward(const std::vector<double>& x, const std::vector<double>& wmat,
                    const std::vector<double>& bias, int len, int in, int out,
                    std::vector<double>& y) {
  y.assign(static_cast<std::size_t>(len) * out, 0.0);
  for (int i = 0; i < len; ++i) {
    const double* xrow = &x[static_cast<std::size_t>(i) * in];
    double* yrow = &y[static_cast<std::size_t>(i) * out];
    for (int o = 0; o < out; ++o) yrow[o] = bias[static_cast<std::size_t>(o)];
    for (int j = 0; j < in; ++j) {
      const double xv = xrow[j];
      if (xv == 0.0) continue;
      const double* wrow = &wmat[static_cast<std::size_t>(j) * out];
      for (int o = 0; o < out; ++o) yrow[o] += xv * wrow[o];
    }
  }
}

}  // namespace

void embed_hard(const ModelWeights& w, const TokenSeq& tokens, Workspace& ws) {
  const int d = w.config.d_model;
  const int len = static_cast<int>(tokens.size());
  if (len < 1) throw std::length_error("model: empty token sequence");
  if (len > w.config.context) throw std::length_error("model: sequence exceeds context length");
  ws.len = len;
  ws.x0.assign(static_cast<std::size_t>(len) * d, 0.0);
  for (int i = 0; i < len; ++i) {
    const int tok = tokens[static_cast<std::size_t>(i)];
    if (tok < 0 || tok >= w.config.vocab) throw std::out_of_range("model: token id out of vocab");
    const double* te = &w.wte[static_cast<std::size_t>(tok) * d];
    const double* pe = &w.wpe[static_cast<std::size_t>(i) * d];
    double* row = &ws.x0[static_cast<std::size_t>(i) * d];
    for (int j = 0; j < d; ++j) row[j] = te[j] + pe[j];
  }
}

void embed_soft(const ModelWeights& w, const TokenSeq& prefix, const double* soft,
                std::size_t span_len, const TokenSeq& suffix, Workspace& ws) {
  const int d = w.config.d_model;
  const int vocab = w.config.vocab;
  const std::size_t len = prefix.size() + span_len + suffix.size();
  if (len < 1) throw std::length_error("model: empty token sequence");
  if (len > static_cast<std::size_t>(w.config.context)) {
    throw std::length_error("model: sequence exceeds context length");
  }
  ws.len = static_cast<int>(len);
  ws.x0.assign(len * d, 0.0);

  auto embed_token = [&](std::size_t pos, int tok) {
    if (tok < 0 || tok >= vocab) throw std::out_of_range("model: token id out of vocab");
    const double* te = &w.wte[static_cast<std::size_t>(tok) * d];
    const double* pe = &w.wpe[pos * d];
    double* row = &ws.x0[pos * d];
    for (int j = 0; j < d; ++j) row[j] = te[j] + pe[j];
  };

  std::size_t pos = 0;
  for (int tok : prefix) embed_token(pos++, tok);
  for (std::size_t s = 0; s < span_len; ++s, ++pos) {
    const double* mix = soft + s * vocab;
    const double* pe = &w.wpe[pos * d];
    double* row = &ws.x0[pos * d];
    // Accumulating over the full vocab keeps an exact one-hot row bit-equal
    // to the hard embedding (zero terms leave the partial sum unchanged).
    for (int t = 0; t < vocab; ++t) {
      const double m = mix[static_cast<std::size_t>(t)];
      if (m == 0.0) continue;
      const double* te = &w.wte[static_cast<std::size_t>(t) * d];
      for (int j = 0; j < d; ++j) row[j] += m * te[j];
    }
    for (int j = 0; j < d; ++j) row[j] += pe[j];
  }
  for (int tok : suffix) embed_token(pos++, tok);
}

void forward_stack(const ModelWeights& w, Workspace& ws) {
  const int len = ws.len;
  const int d = w.config.d_model;
  const int ff = w.config.d_ff();
  const int heads = w.config.heads;
  const int hd = w.config.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  ws.layers.assign(static_cast<std::size_t>(w.config.layers), LayerActs{});
  const std::vector<double>* x = &ws.x0;

  for (int li = 0; li < w.config.layers; ++li) {
    const LayerWeights& lw = w.layers[static_cast<std::size_t>(li)];
    LayerActs& a = ws.layers[static_cast<std::size_t>(li)];
    a.x_in = *x;

    layer_norm_forward(a.x_in, lw.ln1_g, lw.ln1_b, len, d, a.ln1_norm, a.ln1_rstd, a.ln1_out);
    linear_forward(a.ln1_out, lw.wq, lw.bq, len, d, d, a.q);
    linear_forward(a.ln1_out, lw.wk, lw.bk, len, d, d, a.k);
    linear_forward(a.ln1_out, lw.wv, lw.bv, len, d, d, a.v);

    a.att.assign(static_cast<std::size_t>(heads) * len * len, 0.0);
    a.att_mix.assign(static_cast<std::size_t>(len) * d, 0.0);
    std::vector<double> scores(static_cast<std::size_t>(len));
    for (int h = 0; h < heads; ++h) {
      const int hoff = h * hd;
      double* att_h = &a.att[static_cast<std::size_t>(h) * len * len];
      for (int i = 0; i < len; ++i) {
        const double* qi = &a.q[static_cast<std::size_t>(i) * d + hoff];
        double smax = -std::numeric_limits<double>::infinity();
        for (int j = 0; j <= i; ++j) {
          const double* kj = &a.k[static_cast<std::size_t>(j) * d + hoff];
          double dot = 0.0;
          for (int c = 0; c < hd; ++c) dot += qi[c] * kj[c];
          scores[static_cast<std::size_t>(j)] = dot * scale;
          smax = std::max(smax, scores[static_cast<std::size_t>(j)]);
        }
        double denom = 0.0;
        double* prow = &att_h[static_cast<std::size_t>(i) * len];
        for (int j = 0; j <= i; ++j) {
          const double e = std::exp(scores[static_cast<std::size_t>(j)] - smax);
          prow[j] = e;
          denom += e;
        }
        const double inv = 1.0 / denom;
        double* mix = &a.att_mix[static_cast<std::size_t>(i) * d + hoff];
        for (int j = 0; j <= i; ++j) {
          prow[j] *= inv;
          const double* vj = &a.v[static_cast<std::size_t>(j) * d + hoff];
          const double p = prow[j];
          for (int c = 0; c < hd; ++c) mix[c] += p * vj[c];
        }
      }
    }

    a.x_mid.assign(static_cast<std::size_t>(len) * d, 0.0);
    {
      std::vector<double> att_out;
      linear_forward(a.att_mix, lw.wo, lw.bo, len, d, d, att_out);
      for (std::size_t idx = 0; idx < a.x_mid.size(); ++idx) {
        a.x_mid[idx] = a.x_in[idx] + att_out[idx];
      }
    }

    layer_norm_forward(a.x_mid, lw.ln2_g, lw.ln2_b, len, d, a.ln2_norm, a.ln2_rstd, a.ln2_out);
    linear_forward(a.ln2_out, lw.w_fc, lw.b_fc, len, d, ff, a.h_pre);
    a.h_act.resize(a.h_pre.size());
    for (std::size_t idx = 0; idx < a.h_pre.size(); ++idx) a.h_act[idx] = gelu(a.h_pre[idx]);

    std::vector<double> mlp_out;
    linear_forward(a.h_act, lw.w_proj, lw.b_proj, len, ff, d, mlp_out);
    // Residual result becomes the next layer's input; stash it where the
    // next iteration (or the final norm) picks it up.
    if (li + 1 < w.config.layers) {
      LayerActs& next = ws.layers[static_cast<std::size_t>(li + 1)];
      next.x_in.resize(static_cast<std::size_t>(len) * d);
      for (std::size_t idx = 0; idx < mlp_out.size(); ++idx) {
        next.x_in[idx] = a.x_mid[idx] + mlp_out[idx];
      }
      x = &next.x_in;
    } else {
      ws.lnf_out.resize(static_cast<std::size_t>(len) * d);  // reused as temp below
      for (std::size_t idx = 0; idx < mlp_out.size(); ++idx) {
        ws.lnf_out[idx] = a.x_mid[idx] + mlp_out[idx];
      }
    }
  }

  ws.final_in = std::move(ws.lnf_out);
  layer_norm_forward(ws.final_in, w.lnf_g, w.lnf_b, len, d, ws.lnf_norm, ws.lnf_rstd, ws.lnf_out);
}

void logits_rows(const ModelWeights& w, const Workspace& ws, int row_begin, int row_end,
                 std::vector<double>& out) {
  const int d = w.config.d_model;
  const int vocab = w.config.vocab;
  const int rows = row_end - row_begin;
  out.assign(static_cast<std::size_t>(rows) * vocab, 0.0);
  for (int r = 0; r < rows; ++r) {
    const double* frow = &ws.lnf_out[static_cast<std::size_t>(row_begin + r) * d];
    double* zrow = &out[static_cast<std::size_t>(r) * vocab];
    for (int j = 0; j < d; ++j) {
      const double f = frow[j];
      if (f == 0.0) continue;
      const double* wrow = &w.w_out[static_cast<std::size_t>(j) * vocab];
      for (int c = 0; c < vocab; ++c) zrow[c] += f * wrow[c];
    }
  }
}

double loss_rows(const ModelWeights& w, const Workspace& ws, std::size_t prompt_len,
                 const TokenSeq& target, std::vector<double>* d_lnf_out,
                 ModelWeights* param_grads) {
  const int d = w.config.d_model;
  const int vocab = w.config.vocab;
  const std::size_t k = target.size();
  const int row0 = static_cast<int>(prompt_len) - 1;

  std::vector<double> z;
  logits_rows(w, ws, row0, row0 + static_cast<int>(k), z);

  if (d_lnf_out) d_lnf_out->assign(static_cast<std::size_t>(ws.len) * d, 0.0);

  double loss = 0.0;
  std::vector<double> dz(static_cast<std::size_t>(vocab));
  for (std::size_t j = 0; j < k; ++j) {
    const int tgt = target[j];
    if (tgt < 0 || tgt >= vocab) throw std::out_of_range("model: target token id out of vocab");
    const double* zrow = &z[j * vocab];
    double zmax = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < vocab; ++c) zmax = std::max(zmax, zrow[c]);
    double sum = 0.0;
    for (int c = 0; c < vocab; ++c) sum += std::exp(zrow[c] - zmax);
    const double lse = zmax + std::log(sum);
    loss += lse - zrow[tgt];

    if (d_lnf_out) {
      const double inv = 1.0 / sum;
      for (int c = 0; c < vocab; ++c) dz[static_cast<std::size_t>(c)] = std::exp(zrow[c] - zmax) * inv;
      dz[static_cast<std::size_t>(tgt)] -= 1.0;

      const std::size_t row = prompt_len - 1 + j;
      const double* frow = &ws.lnf_out[row * d];
      double* drow = &(*d_lnf_out)[row * d];
      for (int c = 0; c < vocab; ++c) {
        const double g = dz[static_cast<std::size_t>(c)];
        if (g == 0.0) continue;
        for (int jj = 0; jj < d; ++jj) drow[jj] += g * w.w_out[static_cast<std::size_t>(jj) * vocab + c];
      }
      if (param_grads) {
        for (int jj = 0; jj < d; ++jj) {
          const double f = frow[jj];
          if (f == 0.0) continue;
          double* gw = &param_grads->w_out[static_cast<std::size_t>(jj) * vocab];
          for (int c = 0; c < vocab; ++c) gw[c] += f * dz[static_cast<std::size_t>(c)];
        }
      }
    }
  }
  return loss;
}

}  // namespace detail

std::vector<double> forward(const ModelWeights& w, const TokenSeq& tokens) {
  detail::Workspace ws;
  detail::embed_hard(w, tokens, ws);
  detail::forward_stack(w, ws);
  std::vector<double> logits;
  detail::logits_rows(w, ws, 0, ws.len, logits);
  return logits;
}

double nll_loss(const ModelWeights& w, const TokenSeq& prompt, const TokenSeq& target) {
  if (prompt.empty()) throw std::length_error("nll_loss: empty prompt");
  if (target.empty()) throw std::length_error("nll_loss: empty target");
  TokenSeq seq = prompt;
  seq.insert(seq.end(), target.begin(), target.end());
  detail::Workspace ws;
  detail::embed_hard(w, seq, ws);
  detail::forward_stack(w, ws);
  return detail::loss_rows(w, ws, prompt.size(), target, nullptr, nullptr);
}

double soft_loss(const ModelWeights& w, const TokenSeq& prefix,
                 const std::vector<double>& soft_span, std::size_t span_len,
                 const TokenSeq& suffix, const TokenSeq& target) {
  if (soft_span.size() != span_len * static_cast<std::size_t>(Vocab::size)) {
    throw std::invalid_argument("soft_loss: soft span shape mismatch");
  }
  if (target.empty()) throw std::length_error("soft_loss: empty target");
  TokenSeq suffix_with_target = suffix;
  suffix_with_target.insert(suffix_with_target.end(), target.begin(), target.end());
  detail::Workspace ws;
  detail::embed_soft(w, prefix, soft_span.data(), span_len, suffix_with_target, ws);
  detail::forward_stack(w, ws);
  const std::size_t prompt_len = prefix.size() + span_len + suffix.size();
  if (prompt_len == 0) throw std::length_error("soft_loss: empty prompt");
  return detail::loss_rows(w, ws, prompt_len, target, nullptr, nullptr);
}

TokenSeq sample(const ModelWeights& w, const TokenSeq& prompt, double temperature,
                int max_new_tokens, std::uint64_t seed) {
  if (max_new_tokens < 1) throw std::invalid_argument("sample: max_new_tokens must be >= 1");
  if (temperature < 0.0) throw std::invalid_argument("sample: negative temperature");

  const int vocab = w.config.vocab;
  std::mt19937_64 rng(seed);
  TokenSeq seq = prompt;
  TokenSeq out;
  std::vector<double> probs(static_cast<std::size_t>(vocab));

  while (static_cast<int>(out.size()) < max_new_tokens) {
    detail::Workspace ws;
    detail::embed_hard(w, seq, ws);
    detail::forward_stack(w, ws);
    std::vector<double> z;
    detail::logits_rows(w, ws, ws.len - 1, ws.len, z);

    int next = 0;
    if (temperature == 0.0) {
      double best = z[0];
      for (int c = 1; c < vocab; ++c) {
        if (z[static_cast<std::size_t>(c)] > best) {
          best = z[static_cast<std::size_t>(c)];
          next = c;
        }
      }
    } else {
      double zmax = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < vocab; ++c) zmax = std::max(zmax, z[static_cast<std::size_t>(c)] / temperature);
      double sum = 0.0;
      for (int c = 0; c < vocab; ++c) {
        probs[static_cast<std::size_t>(c)] = std::exp(z[static_cast<std::size_t>(c)] / temperature - zmax);
        sum += probs[static_cast<std::size_t>(c)];
      }
      const double r = u64_to_unit_double(rng()) * sum;
      double cum = 0.0;
      next = vocab - 1;
      for (int c = 0; c < vocab; ++c) {
        cum += probs[static_cast<std::size_t>(c)];
        if (r < cum) {
          next = c;
          break;
        }
      }
    }

    if (next == Vocab::eos_id) break;
    out.push_back(next);
    if (seq.size() + 1 > static_cast<std::size_t>(w.config.context)) break;
    seq.push_back(next);
  }
  return out;
}

double finite_diff_check(const ModelWeights& w, const TokenSeq& prompt, Span adv_span,
                         const TokenSeq& target, double step, int coords_per_position) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step must be positive");
  const LossGrad lg = loss_grad_onehot(w, prompt, adv_span, target);
  const int vocab = Vocab::size;

  const TokenSeq prefix(prompt.begin(), prompt.begin() + static_cast<std::ptrdiff_t>(adv_span.begin));
  const TokenSeq suffix(prompt.begin() + static_cast<std::ptrdiff_t>(adv_span.end), prompt.end());
  const std::size_t span_len = adv_span.len();

  // Relaxed copy of the current span: exact one-hot rows.
  std::vector<double> soft(span_len * static_cast<std::size_t>(vocab), 0.0);
  for (std::size_t i = 0; i < span_len; ++i) {
    soft[i * vocab + static_cast<std::size_t>(prompt[adv_span.begin + i])] = 1.0;
  }

  double max_rel = 0.0;
  for (std::size_t i = 0; i < span_len; ++i) {
    // Coordinates: the current token plus the largest-|analytic| entries.
    std::vector<int> order(static_cast<std::size_t>(vocab));
    for (int t = 0; t < vocab; ++t) order[static_cast<std::size_t>(t)] = t;
    const double* grow = &lg.grad[i * vocab];
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return std::abs(grow[a]) > std::abs(grow[b]); });

    std::vector<int> coords;
    coords.push_back(prompt[adv_span.begin + i]);
    for (int t : order) {
      if (static_cast<int>(coords.size()) >= coords_per_position) break;
      if (t != coords.front()) coords.push_back(t);
    }

    for (int t : coords) {
      double& cell = soft[i * vocab + static_cast<std::size_t>(t)];
      const double saved = cell;
      cell = saved + step;
      const double lp = soft_loss(w, prefix, soft, span_len, suffix, target);
      cell = saved - step;
      const double lm = soft_loss(w, prefix, soft, span_len, suffix, target);
      cell = saved;
      const double cd = (lp - lm) / (2.0 * step);
      const double a = grow[t];
      const double rel = std::abs(a - cd) / std::max({std::abs(a), std::abs(cd), 1e-12});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace oet
