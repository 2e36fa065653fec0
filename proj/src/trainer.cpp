#include <stdexcept>
#include <vector>

#include "model_internal.hpp"
#include "oet/model.hpp"
#include "oet/rng.hpp"

namespace oet {

namespace {

std::vector<std::vector<double>*> tensor_list(ModelWeights& w) {
  std::vector<std::vector<double>*> out;
  for_each_param_tensor(w, [&](std::vector<double>& t) { out.push_back(&t); });
  return out;
}

}  // namespace

double sgd_train(ModelWeights& w, const std::vector<std::string>& lines, int steps,
                 double learning_rate, std::uint64_t seed) {
  if (lines.empty()) throw std::invalid_argument("sgd_train: no training lines");
  if (steps < 1) throw std::invalid_argument("sgd_train: steps must be >= 1");

  const int d = w.config.d_model;
  Lcg64 rng(seed);
  ModelWeights grads = make_zero_weights(w.config);
  auto params = tensor_list(w);
  auto gtensors = tensor_list(grads);

  double last_loss = 0.0;
  for (int step = 0; step < steps; ++step) {
    const std::string& line = lines[static_cast<std::size_t>(rng.bounded(lines.size()))];
    TokenSeq tokens;
    tokens.push_back(Vocab::bos_id);
    for (int t : encode(line)) tokens.push_back(t);
    tokens.push_back(Vocab::eos_id);
    if (tokens.size() > static_cast<std::size_t>(w.config.context)) {
      tokens.resize(static_cast<std::size_t>(w.config.context));
    }
    if (tokens.size() < 2) continue;

    const TokenSeq target(tokens.begin() + 1, tokens.end());

    for (auto* g : gtensors) std::fill(g->begin(), g->end(), 0.0);

    detail::Workspace ws;
    detail::embed_hard(w, tokens, ws);
    detail::forward_stack(w, ws);

    std::vector<double> d_lnf_out;
    const double loss = detail::loss_rows(w, ws, 1, target, &d_lnf_out, &grads);

    std::vector<double> dx0;
    detail::backward_stack(w, ws, d_lnf_out, dx0, &grads);

    // Embedding gradients: the stack treats x0 as input, so fold dx0 into
    // the token and position tables here.
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const double* drow = &dx0[i * static_cast<std::size_t>(d)];
      double* te = &grads.wte[static_cast<std::size_t>(tokens[i]) * d];
      double* pe = &grads.wpe[i * static_cast<std::size_t>(d)];
      for (int j = 0; j < d; ++j) {
        te[j] += drow[j];
        pe[j] += drow[j];
      }
    }

    const double scale = learning_rate / static_cast<double>(target.size());
    for (std::size_t t = 0; t < params.size(); ++t) {
      std::vector<double>& p = *params[t];
      const std::vector<double>& g = *gtensors[t];
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= scale * g[i];
    }
    last_loss = loss / static_cast<double>(target.size());
  }
  return last_loss;
}

}  // namespace oet
