#include "dpllm/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "dpllm/kernels.hpp"

namespace dpllm {

std::string_view estimator_kind_name(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::Exact:
      return "exact";
    case EstimatorKind::Linear:
      return "linear";
    case EstimatorKind::Projection:
      return "projection";
  }
  return "?";
}

EstimatorKind parse_estimator_kind(std::string_view s) {
  if (s == "exact") return EstimatorKind::Exact;
  if (s == "linear") return EstimatorKind::Linear;
  if (s == "projection") return EstimatorKind::Projection;
  throw ConfigError("unknown estimator kind '" + std::string(s) + "'");
}

std::string_view input_source_name(InputSource s) {
  return s == InputSource::Immediate ? "immediate" : "previous_residual";
}

InputSource parse_input_source(std::string_view s) {
  if (s == "immediate") return InputSource::Immediate;
  if (s == "previous_residual") return InputSource::PreviousResidual;
  throw ConfigError("unknown input source '" + std::string(s) + "'");
}

std::string_view async_mode_name(AsyncMode m) {
  return m == AsyncMode::PreviousToken ? "previous_token" : "preceding_block";
}

AsyncMode parse_async_mode(std::string_view s) {
  if (s == "previous_token") return AsyncMode::PreviousToken;
  if (s == "preceding_block") return AsyncMode::PrecedingBlock;
  throw ConfigError("unknown async mode '" + std::string(s) + "'");
}

InputSource resolve_input_source(LayerId id) {
  return is_residual_fed(id.kind) && id.block > 0 ? InputSource::PreviousResidual
                                                  : InputSource::Immediate;
}

NormSite norm_site(LayerKind kind) {
  switch (kind) {
    case LayerKind::Q:
    case LayerKind::K:
    case LayerKind::V:
    case LayerKind::O:
      return NormSite::Attention;
    default:
      return NormSite::Mlp;
  }
}

double exact_error(const Matrix& delta, std::span<const double> x) {
  if (x.size() != delta.cols()) throw ShapeError("exact_error: input length mismatch");
  std::vector<double> y(delta.rows());
  kernels::active().gemv(delta.data(), delta.rows(), delta.cols(), x.data(), y.data());
  return l2_norm(y);
}

double exact_error(const QuantizedLayer& layer, unsigned l, unsigned h, std::span<const double> x) {
  return exact_error(delta_weights(layer, l, h), x);
}

double ErrorEstimator::estimate(std::span<const double> x, const Matrix* delta) const {
  switch (kind) {
    case EstimatorKind::Exact:
      if (delta == nullptr) throw Error("exact estimator needs the weight delta");
      return exact_error(*delta, x);
    case EstimatorKind::Linear:
      return slope * l2_norm(x) + intercept;
    case EstimatorKind::Projection: {
      if (x.size() != g.cols()) throw ShapeError("projection estimate: input length mismatch");
      std::vector<double> y(g.rows());
      kernels::active().gemv(g.data(), g.rows(), g.cols(), x.data(), y.data());
      return l2_norm(y);
    }
  }
  return 0.0;
}

std::size_t ErrorEstimator::op_count(std::size_t rows, std::size_t cols) const {
  switch (kind) {
    case EstimatorKind::Exact:
      return rows * cols + rows;
    case EstimatorKind::Linear:
      return cols + 1;
    case EstimatorKind::Projection:
      return g.rows() * g.cols() + g.rows();
  }
  return 0;
}

ThresholdEntry translate_threshold(std::span<const double> sorted_errors, double p, unsigned l) {
  if (!(p >= l && p <= l + 1.0)) {
    std::ostringstream msg;
    msg << "precision " << p << " is outside the cell [" << l << ", " << l + 1 << "]";
    throw ConfigError(msg.str());
  }
  ThresholdEntry t;
  t.l = l;
  t.h = l + 1;
  t.r = 1.0 - (p - l);
  if (t.r >= 1.0) {
    t.threshold = kInf;
    return t;
  }
  if (t.r <= 0.0) {
    t.threshold = -kInf;
    return t;
  }
  if (sorted_errors.empty()) throw Error("threshold translation needs calibration errors");
  const double n = static_cast<double>(sorted_errors.size());
  // The small guard keeps r n that should be an integer from rounding up.
  auto idx = static_cast<std::int64_t>(std::ceil(t.r * n - 1e-9)) - 1;
  idx = std::clamp<std::int64_t>(idx, 0, static_cast<std::int64_t>(sorted_errors.size()) - 1);
  t.threshold = sorted_errors[static_cast<std::size_t>(idx)];
  return t;
}

LinearFit fit_linear(std::span<const double> errors, std::span<const double> norms,
                     double r2_gate) {
  if (errors.size() != norms.size()) throw ShapeError("fit_linear: length mismatch");
  LinearFit f;
  const std::size_t n = errors.size();
  if (n < 3) return f;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += norms[i];
    my += errors[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = norms[i] - mx, dy = errors[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  f.slope = sxx > 0.0 ? sxy / sxx : 0.0;
  f.intercept = my - f.slope * mx;
  if (syy == 0.0) {
    f.r2 = 1.0;
  } else {
    double ss_res = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = errors[i] - (f.slope * norms[i] + f.intercept);
      ss_res += e * e;
    }
    f.r2 = 1.0 - ss_res / syy;
  }
  f.accepted = f.r2 > r2_gate;
  return f;
}

ErrorEstimator build_projection_from(const Matrix& a, const Matrix& delta) {
  if (a.cols() != delta.rows() || a.rows() == 0) {
    throw ShapeError("projection matrix does not match the weight delta");
  }
  ErrorEstimator e;
  e.kind = EstimatorKind::Projection;
  e.g = Matrix(a.rows(), delta.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = e.g.row(i);
    for (std::size_t r = 0; r < delta.rows(); ++r) {
      const double s = a(i, r);
      if (s != 0.0) kernels::active().axpy(s, delta.row(r).data(), out.data(), out.size());
    }
  }
  return e;
}

ErrorEstimator build_projection(const Matrix& delta, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw ConfigError("projection dimension k must be at least 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix a(k, delta.rows());
  const double scale = 1.0 / std::sqrt(static_cast<double>(k));
  for (double& v : a.values()) v = nd(rng) * scale;
  auto e = build_projection_from(a, delta);
  e.seed = seed;
  return e;
}

double mean_relative_error(const ErrorEstimator& est, const Matrix& inputs,
                           std::span<const double> errors, const Matrix* delta) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    if (errors[i] <= 0.0) continue;
    s += std::abs(est.estimate(inputs.row(i), delta) - errors[i]) / errors[i];
    ++n;
  }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

namespace {

struct FitStats {
  double mse = 0.0;
  double mre = 0.0;
};

FitStats projection_stats(const Matrix& g, const Matrix& inputs, std::span<const double> errors) {
  const auto& k = kernels::active();
  std::vector<double> y(g.rows());
  FitStats s;
  std::size_t nrel = 0;
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    k.gemv(g.data(), g.rows(), g.cols(), inputs.row(i).data(), y.data());
    const double est = l2_norm(y);
    const double d = est - errors[i];
    s.mse += d * d;
    if (errors[i] > 0.0) {
      s.mre += std::abs(d) / errors[i];
      ++nrel;
    }
  }
  s.mse /= static_cast<double>(std::max<std::size_t>(1, inputs.rows()));
  s.mre = nrel == 0 ? 0.0 : s.mre / static_cast<double>(nrel);
  return s;
}

}  // namespace

CalibrationReport calibrate_projection(ErrorEstimator& est, const Matrix& inputs,
                                       std::span<const double> errors,
                                       const ProjectionCalibration& cfg) {
  if (est.kind != EstimatorKind::Projection) throw Error("not a projection estimator");
  if (inputs.rows() != errors.size() || inputs.cols() != est.g.cols()) {
    throw ShapeError("calibration inputs do not match the projection");
  }
  const auto& k = kernels::active();
  CalibrationReport rep;
  FitStats cur = projection_stats(est.g, inputs, errors);
  rep.mse_before = cur.mse;
  rep.mre_before = cur.mre;
  rep.mre_history.push_back(cur.mre);

  const std::size_t n = inputs.rows();
  double step = cfg.step;
  std::size_t rejected = 0;
  Matrix grad(est.g.rows(), est.g.cols());
  std::vector<double> y(est.g.rows());
  for (std::size_t epoch = 0; epoch < cfg.epochs && n > 0; ++epoch) {
    std::fill(grad.values().begin(), grad.values().end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = inputs.row(i);
      k.gemv(est.g.data(), est.g.rows(), est.g.cols(), x.data(), y.data());
      const double nrm = l2_norm(y);
      if (nrm == 0.0) continue;
      const double coef = 2.0 * (nrm - errors[i]) / (static_cast<double>(n) * nrm);
      for (std::size_t r = 0; r < y.size(); ++r) {
        k.axpy(coef * y[r], x.data(), grad.row(r).data(), x.size());
      }
    }
    Matrix trial = est.g;
    for (std::size_t i = 0; i < trial.size(); ++i) trial.data()[i] -= step * grad.data()[i];
    const FitStats next = projection_stats(trial, inputs, errors);
    const bool no_worse = next.mse <= cur.mse && next.mre <= cur.mre;
    const bool better = next.mse < cur.mse || next.mre < cur.mre;
    if (no_worse && better) {
      est.g = std::move(trial);
      cur = next;
      rep.mre_history.push_back(cur.mre);
      ++rep.accepted_epochs;
      step *= 2.0;
      rejected = 0;
    } else {
      step *= 0.5;
      if (++rejected >= cfg.patience) break;
    }
  }
  rep.mse_after = cur.mse;
  rep.mre_after = cur.mre;
  est.calibrated = rep.accepted_epochs > 0;
  rep.warning = cfg.epochs > 0 && n > 0 && rep.accepted_epochs == 0;
  return rep;
}

ResidualTracker::ResidualTracker(const ModelWeights& weights, AsyncMode mode)
    : weights_(&weights), mode_(mode), slots_(weights.config.n_blocks) {}

void ResidualTracker::observe(std::uint32_t block, NormSite site, std::size_t pos,
                              std::span<const double> residual) {
  Slot& s = slots_.at(block)[static_cast<std::size_t>(site)];
  if (s.current_pos && *s.current_pos != pos) {
    std::swap(s.previous, s.current);
    s.previous_pos = s.current_pos;
  }
  s.current.assign(residual.begin(), residual.end());
  s.current_pos = pos;
}

void ResidualTracker::clear() {
  for (auto& b : slots_) {
    for (auto& s : b) s = Slot{};
  }
}

std::optional<std::vector<double>> ResidualTracker::source(LayerId id, std::size_t pos) const {
  if (resolve_input_source(id) != InputSource::PreviousResidual) return std::nullopt;
  const NormSite site = norm_site(id.kind);
  const std::vector<double>* raw = nullptr;
  if (mode_ == AsyncMode::PreviousToken) {
    if (pos == 0) return std::nullopt;
    const Slot& s = slots_.at(id.block)[static_cast<std::size_t>(site)];
    if (s.current_pos && *s.current_pos == pos - 1) {
      raw = &s.current;
    } else if (s.previous_pos && *s.previous_pos == pos - 1) {
      raw = &s.previous;
    }
  } else {
    const Slot& s = slots_.at(id.block - 1)[static_cast<std::size_t>(site)];
    if (s.current_pos && *s.current_pos == pos) raw = &s.current;
  }
  if (raw == nullptr) return std::nullopt;
  std::vector<double> out(raw->size());
  rms_normalize(*raw, weights_->norm_gain(id.block, site), weights_->config.norm_eps, out);
  return out;
}

namespace {

class CaptureProvider final : public WeightProvider {
 public:
  CaptureProvider(const ModelWeights& weights, const BitPlaneStore& store,
                  const std::map<LayerId, unsigned>& max_bits,
                  const std::map<LayerId, InterpCoeffs>& pairs, const CaptureOptions& options,
                  std::size_t stride, std::map<LayerId, LayerCapture>& out)
      : inner_(store, max_bits), tracker_(weights, options.mode), options_(options),
        stride_(stride), out_(out) {
    for (const auto& [id, c] : pairs) {
      deltas_.emplace(id, delta_weights(store.layer(id), c.l, c.h));
      auto& cap = out_[id];
      cap.l = c.l;
      cap.h = c.h;
    }
  }

  void start_sample() { tracker_.clear(); }
  void set_token_index(std::size_t base) { base_ = base; }

  void observe_residual(std::uint32_t block, NormSite site, std::size_t pos,
                        std::span<const double> residual) override {
    tracker_.observe(block, site, pos, residual);
  }

  void linear(LayerId id, std::size_t pos, std::span<const double> x,
              std::span<double> y) override {
    inner_.linear(id, pos, x, y);
    const auto it = deltas_.find(id);
    if (it == deltas_.end()) return;
    auto& cap = out_.at(id);
    const double err = exact_error(it->second, x);
    std::optional<std::vector<double>> src;
    if (options_.async) src = tracker_.source(id, pos);
    const std::span<const double> s = src ? std::span<const double>(*src) : x;
    cap.errors.push_back(err);
    cap.input_norms.push_back(l2_norm(x));
    cap.source_norms.push_back(l2_norm(s));
    if ((base_ + pos) % stride_ == 0) {
      rows_[id].first.insert(rows_[id].first.end(), x.begin(), x.end());
      rows_[id].second.insert(rows_[id].second.end(), s.begin(), s.end());
      cap.sample_errors.push_back(err);
    }
  }

  void finish() {
    for (auto& [id, cap] : out_) {
      const std::size_t cols = deltas_.at(id).cols();
      const auto& [xs, ss] = rows_[id];
      const std::size_t n = xs.size() / cols;
      cap.inputs = Matrix(n, cols);
      cap.sources = Matrix(n, cols);
      std::copy(xs.begin(), xs.end(), cap.inputs.data());
      std::copy(ss.begin(), ss.end(), cap.sources.data());
      cap.sorted_errors = cap.errors;
      std::sort(cap.sorted_errors.begin(), cap.sorted_errors.end());
    }
  }

 private:
  QuantizedProvider inner_;
  ResidualTracker tracker_;
  CaptureOptions options_;
  std::size_t stride_;
  std::size_t base_ = 0;
  std::map<LayerId, Matrix> deltas_;
  std::map<LayerId, std::pair<std::vector<double>, std::vector<double>>> rows_;
  std::map<LayerId, LayerCapture>& out_;
};

}  // namespace

std::map<LayerId, LayerCapture> collect_error_samples(
    const ModelWeights& weights, const BitPlaneStore& store,
    const std::map<LayerId, unsigned>& max_bits, const std::map<LayerId, InterpCoeffs>& pairs,
    std::span<const std::vector<Token>> calib, const CaptureOptions& options) {
  if (calib.empty()) throw Error("empty calibration set");
  std::size_t total = 0;
  for (const auto& s : calib) total += s.size();
  const std::size_t cap = std::max<std::size_t>(1, options.max_inputs);
  const std::size_t stride = std::max<std::size_t>(1, (total + cap - 1) / cap);

  std::map<LayerId, LayerCapture> out;
  CaptureProvider provider(weights, store, max_bits, pairs, options, stride, out);
  const Transformer model(weights);
  std::size_t base = 0;
  for (const auto& sample : calib) {
    provider.start_sample();
    provider.set_token_index(base);
    model.forward(sample, provider);
    base += sample.size();
  }
  provider.finish();
  return out;
}

EstimatorBuild build_estimator(LayerId id, const LayerCapture& capture, const QuantizedLayer& layer,
                               const EstimatorConfig& config) {
  EstimatorBuild b;
  b.estimator.l = capture.l;
  b.estimator.h = capture.h;
  if (config.mode == EstimatorMode::Exact) {
    b.estimator.kind = EstimatorKind::Exact;
    b.estimator.source = InputSource::Immediate;
    return b;
  }
  const InputSource source =
      config.async ? resolve_input_source(id) : InputSource::Immediate;
  const bool from_source = source == InputSource::PreviousResidual;
  const Matrix& rows = from_source ? capture.sources : capture.inputs;
  const auto& norms = from_source ? capture.source_norms : capture.input_norms;

  const Matrix delta = delta_weights(layer, capture.l, capture.h);
  const std::uint64_t seed = config.seed ^ (0x9e3779b97f4a7c15ULL * (layer_index(id) + 1)) ^
                             (static_cast<std::uint64_t>(capture.l) << 56);
  ErrorEstimator proj = build_projection(delta, config.k, seed);
  proj.source = source;
  proj.l = capture.l;
  proj.h = capture.h;
  const auto rep = calibrate_projection(proj, rows, capture.sample_errors, config.calibration);
  if (rep.warning) {
    b.warnings.push_back(id.name() + ": projection calibration made no progress; kept uncalibrated");
  }
  proj.calib_mre = rep.mre_after;
  b.projection = rep;

  const LinearFit lin = fit_linear(capture.errors, norms, config.r2_gate);
  b.linear = lin;
  if (lin.accepted) {
    ErrorEstimator le;
    le.kind = EstimatorKind::Linear;
    le.source = source;
    le.l = capture.l;
    le.h = capture.h;
    le.slope = lin.slope;
    le.intercept = lin.intercept;
    le.r2 = lin.r2;
    le.calib_mre = mean_relative_error(le, rows, capture.sample_errors);
    if (le.calib_mre <= proj.calib_mre) {
      b.estimator = std::move(le);
      return b;
    }
  }
  b.estimator = std::move(proj);
  return b;
}

}  // namespace dpllm
