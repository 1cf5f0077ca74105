#include "dpllm/fitter.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "dpllm/kernels.hpp"

namespace dpllm {

InterpCoeffs interp_coeffs(double p, unsigned lower, unsigned upper) {
  if (!(p >= lower && p <= upper)) {
    std::ostringstream msg;
    msg << "precision " << p << " outside [" << lower << ", " << upper << "]";
    throw ConfigError(msg.str());
  }
  if (lower == upper) return {lower, upper, 1.0};
  unsigned l = static_cast<unsigned>(std::floor(p));
  if (l >= upper) l = upper - 1;
  return {l, l + 1, 1.0 - (p - l)};
}

double PrecisionParams::average(const std::map<LayerId, std::uint64_t>& params) const {
  double num = 0.0, den = 0.0;
  for (const auto& [id, v] : p) {
    const double m = static_cast<double>(params.at(id));
    num += v * m;
    den += m;
  }
  return num / den;
}

std::map<LayerId, std::uint64_t> layer_params(const BitPlaneStore& store) {
  std::map<LayerId, std::uint64_t> m;
  for (const auto& [id, layer] : store.layers()) {
    m[id] = static_cast<std::uint64_t>(layer.rows()) * layer.cols();
  }
  return m;
}

void interp_forward(const QuantizedLayer& layer, const InterpCoeffs& c, std::span<const double> x,
                    std::span<double> y) {
  if (c.r == 1.0 || c.l == c.h) {
    gemv(layer, c.l, x, y);
    return;
  }
  if (c.r == 0.0) {
    gemv(layer, c.h, x, y);
    return;
  }
  std::vector<double> yh(y.size());
  gemv(layer, c.l, x, y);
  gemv(layer, c.h, x, yh);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = c.r * y[i] + (1.0 - c.r) * yh[i];
}

double grad_p(const Matrix& delta_w, const Matrix& dy, const Matrix& x) {
  if (dy.rows() != x.rows() || dy.cols() != delta_w.rows() || x.cols() != delta_w.cols()) {
    throw ShapeError("grad_p operands have mismatched shapes");
  }
  const auto& k = kernels::active();
  std::vector<double> dwx(delta_w.rows());
  double g = 0.0;
  for (std::size_t t = 0; t < x.rows(); ++t) {
    k.gemv(delta_w.data(), delta_w.rows(), delta_w.cols(), x.row(t).data(), dwx.data());
    g += k.dot(dy.row(t).data(), dwx.data(), dwx.size());
  }
  return g;
}

double grad_p(const QuantizedLayer& layer, const InterpCoeffs& c, const Matrix& dy,
              const Matrix& x) {
  if (c.l == c.h) return 0.0;
  return grad_p(delta_weights(layer, c.l, c.h), dy, x);
}

double regularizer(const PrecisionParams& params, const std::map<LayerId, std::uint64_t>& m) {
  const double d = params.average(m) - params.target_bits;
  return params.alpha * d * d;
}

double regularized_loss(double loss, const PrecisionParams& params,
                        const std::map<LayerId, std::uint64_t>& m) {
  return loss + regularizer(params, m);
}

std::map<LayerId, double> regularizer_grad(const PrecisionParams& params,
                                           const std::map<LayerId, std::uint64_t>& m) {
  double total = 0.0;
  for (const auto& [id, v] : params.p) total += static_cast<double>(m.at(id));
  const double d = params.average(m) - params.target_bits;
  std::map<LayerId, double> g;
  for (const auto& [id, v] : params.p) {
    g[id] = 2.0 * params.alpha * d * static_cast<double>(m.at(id)) / total;
  }
  return g;
}

InterpProvider::InterpProvider(const BitPlaneStore& store, const PrecisionParams& params)
    : store_(&store) {
  for (const auto& [id, v] : params.p) coeffs_[id] = params.coeffs(id);
}

void InterpProvider::linear(LayerId id, std::size_t, std::span<const double> x,
                            std::span<double> y) {
  interp_forward(store_->layer(id), coeffs_.at(id), x, y);
}

void InterpProvider::linear_backward(LayerId id, std::size_t, std::span<const double> dy,
                                     std::span<double> dx) {
  const auto& c = coeffs_.at(id);
  const auto& layer = store_->layer(id);
  if (c.r == 1.0 || c.l == c.h) {
    gemv_t_acc(layer, c.l, dy, dx);
    return;
  }
  if (c.r == 0.0) {
    gemv_t_acc(layer, c.h, dy, dx);
    return;
  }
  std::vector<double> scaled(dy.size());
  for (std::size_t i = 0; i < dy.size(); ++i) scaled[i] = c.r * dy[i];
  gemv_t_acc(layer, c.l, scaled, dx);
  for (std::size_t i = 0; i < dy.size(); ++i) scaled[i] = (1.0 - c.r) * dy[i];
  gemv_t_acc(layer, c.h, scaled, dx);
}

double loss_and_grad_p(const ModelWeights& weights, const BitPlaneStore& store,
                       const PrecisionParams& params, std::span<const std::vector<Token>> samples,
                       std::map<LayerId, double>* grad) {
  if (samples.empty()) throw Error("empty calibration batch");
  const Transformer model(weights);
  InterpProvider provider(store, params);
  std::map<LayerId, Matrix> deltas;
  if (grad != nullptr) {
    grad->clear();
    for (const auto& [id, v] : params.p) {
      (*grad)[id] = 0.0;
      const auto c = params.coeffs(id);
      if (c.l != c.h) deltas.emplace(id, delta_weights(store.layer(id), c.l, c.h));
    }
  }
  double loss = 0.0;
  for (const auto& sample : samples) {
    if (grad == nullptr) {
      loss += model.teacher_forced_loss(sample, provider).loss;
      continue;
    }
    auto tape = model.forward_tape(sample, provider);
    const auto bundle = model.backward(*tape, provider, BackwardOptions{.weight_grads = false});
    loss += bundle.loss;
    for (const auto& [id, dw] : deltas) {
      (*grad)[id] += grad_p(dw, bundle.output_grads.at(id), bundle.inputs.at(id));
    }
  }
  const double inv = 1.0 / static_cast<double>(samples.size());
  if (grad != nullptr) {
    for (auto& [id, g] : *grad) g *= inv;
  }
  return loss * inv;
}

FitResult fit(const ModelWeights& weights, const BitPlaneStore& store, const BitAssignment& max_bits,
              std::span<const std::vector<Token>> calib, double target_bits,
              const FitHyper& hyper) {
  if (calib.empty()) throw Error("empty calibration set");
  if (hyper.batch_size == 0) throw ConfigError("batch size must be positive");
  const auto m = layer_params(store);

  PrecisionParams params;
  params.lower = store.b_min();
  params.target_bits = target_bits;
  params.alpha = hyper.alpha;
  for (const auto& [id, layer] : store.layers()) {
    const auto it = max_bits.bits.find(id);
    if (it == max_bits.bits.end()) throw ConfigError("max-precision plan lacks " + id.name());
    if (it->second < store.b_min() || it->second > store.n_bits()) {
      throw ConfigError("max precision of " + id.name() + " outside the store's range");
    }
    params.upper[id] = it->second;
  }
  const double max_avg = average_bits(params.upper, m);
  if (target_bits < params.lower - kAccountingEps ||
      target_bits > max_avg * (1.0 + kAccountingEps)) {
    std::ostringstream msg;
    msg << "target " << target_bits << " bits outside the reachable range [" << params.lower
        << ", " << max_avg << "]";
    throw InfeasibleError(msg.str());
  }
  for (const auto& [id, up] : params.upper) {
    params.p[id] = std::clamp(target_bits, static_cast<double>(params.lower),
                              static_cast<double>(up));
  }

  std::map<LayerId, double> m1, m2;
  for (const auto& [id, v] : params.p) {
    m1[id] = 0.0;
    m2[id] = 0.0;
  }
  std::vector<std::size_t> order(calib.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(hyper.seed);
  std::size_t step = 0;
  FitResult result;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      std::vector<std::vector<Token>> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + hyper.batch_size); ++i) {
        batch.push_back(calib[order[i]]);
      }
      std::map<LayerId, double> g;
      epoch_loss += loss_and_grad_p(weights, store, params, batch, &g);
      ++batches;
      const auto rg = regularizer_grad(params, m);
      ++step;
      const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
      for (auto& [id, p] : params.p) {
        const double grad = g.at(id) + rg.at(id);
        m1[id] = hyper.beta1 * m1[id] + (1.0 - hyper.beta1) * grad;
        m2[id] = hyper.beta2 * m2[id] + (1.0 - hyper.beta2) * grad * grad;
        const double mhat = m1[id] / bc1;
        const double vhat = m2[id] / bc2;
        p -= hyper.lr * hyper.weight_decay * p;
        p -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.adam_eps);
        p = std::clamp(p, static_cast<double>(params.lower),
                       static_cast<double>(params.upper.at(id)));
      }
    }
    FitEpochLog entry;
    entry.epoch = epoch + 1;
    entry.loss = epoch_loss / static_cast<double>(batches);
    entry.regularizer = regularizer(params, m);
    entry.avg_bits = params.average(m);
    result.log.push_back(entry);
  }
  result.params = std::move(params);
  return result;
}

void write_fit_log_csv(const std::vector<FitEpochLog>& log, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  out << "epoch,loss,regularizer,avg_bits\n";
  for (const auto& e : log) {
    out << e.epoch << ',' << e.loss << ',' << e.regularizer << ',' << e.avg_bits << '\n';
  }
}

}  // namespace dpllm
