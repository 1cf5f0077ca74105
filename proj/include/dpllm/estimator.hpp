#pragma once

// Relative-error estimators ||(W_h - W_l) x|| and threshold translation.

#include <array>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpllm/fitter.hpp"
#include "dpllm/model.hpp"
#include "dpllm/quant.hpp"

namespace dpllm {

enum class EstimatorKind { Exact, Linear, Projection };
enum class InputSource { Immediate, PreviousResidual };
// What "previous residual" means for a residual-fed layer at (block, pos):
// the same block's norm input at pos - 1, or block - 1's norm input at pos.
enum class AsyncMode { PreviousToken, PrecedingBlock };

std::string_view estimator_kind_name(EstimatorKind k);
EstimatorKind parse_estimator_kind(std::string_view s);
std::string_view input_source_name(InputSource s);
InputSource parse_input_source(std::string_view s);
std::string_view async_mode_name(AsyncMode m);
AsyncMode parse_async_mode(std::string_view s);

// Q/K/V/Up in blocks > 0 read the previous residual; everything else, and
// block 0, reads its immediate input.
InputSource resolve_input_source(LayerId id);

NormSite norm_site(LayerKind kind);

struct ErrorEstimator {
  EstimatorKind kind = EstimatorKind::Exact;
  InputSource source = InputSource::Immediate;
  unsigned l = 0;
  unsigned h = 0;
  // Linear
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  // Projection
  Matrix g;  // k x cols
  std::uint64_t seed = 0;
  bool calibrated = false;
  // Mean relative error on the calibration set at selection time.
  double calib_mre = 0.0;

  std::size_t k() const { return g.rows(); }
  // `delta` is W_h - W_l, required by Exact only.
  double estimate(std::span<const double> x, const Matrix* delta) const;
  // Multiply-adds per estimate.
  std::size_t op_count(std::size_t rows, std::size_t cols) const;
};

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct ThresholdEntry {
  LayerId layer;
  double threshold = kInf;  // select W_h when estimate > threshold
  double r = 1.0;           // fraction of inputs served with W_l
  unsigned l = 0;
  unsigned h = 0;
};

double exact_error(const Matrix& delta, std::span<const double> x);
double exact_error(const QuantizedLayer& layer, unsigned l, unsigned h, std::span<const double> x);

// r = 1 - (p - l); T = sorted[ceil(r n) - 1]. r = 1 gives +inf, r = 0 gives -inf.
ThresholdEntry translate_threshold(std::span<const double> sorted_errors, double p, unsigned l);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  bool accepted = false;
};

// Least squares of error on ||x||; accepted iff r2 > gate. Under 3 samples is a rejection.
LinearFit fit_linear(std::span<const double> errors, std::span<const double> norms,
                     double r2_gate = 0.9);

// A ~ N(0, 1/k) of shape k x rows; G = A delta.
ErrorEstimator build_projection(const Matrix& delta, std::size_t k, std::uint64_t seed);
ErrorEstimator build_projection_from(const Matrix& a, const Matrix& delta);

struct ProjectionCalibration {
  std::size_t epochs = 200;
  double step = 1e-3;
  std::size_t patience = 5;  // consecutive rejected epochs before stopping
};

struct CalibrationReport {
  double mse_before = 0.0;
  double mse_after = 0.0;
  double mre_before = 0.0;
  double mre_after = 0.0;
  std::size_t accepted_epochs = 0;
  std::vector<double> mre_history;  // per accepted state, starting with the initial G
  bool warning = false;
};

// Gradient descent on MSE(||G x||, e). A step is kept only when neither the
// MSE nor the mean relative error increases; the step doubles after a kept
// epoch and halves after a rejected one.
CalibrationReport calibrate_projection(ErrorEstimator& est, const Matrix& inputs,
                                       std::span<const double> errors,
                                       const ProjectionCalibration& cfg = {});

// Mean |estimate - e| / e over entries with e > 0.
double mean_relative_error(const ErrorEstimator& est, const Matrix& inputs,
                           std::span<const double> errors, const Matrix* delta = nullptr);

// Residual-stream bookkeeping for asynchronous estimation.
class ResidualTracker {
 public:
  ResidualTracker(const ModelWeights& weights, AsyncMode mode);
  void observe(std::uint32_t block, NormSite site, std::size_t pos,
               std::span<const double> residual);
  void clear();
  // Normalized source vector for a residual-fed layer at `pos`, if one exists.
  std::optional<std::vector<double>> source(LayerId id, std::size_t pos) const;
  AsyncMode mode() const { return mode_; }

 private:
  struct Slot {
    std::vector<double> current, previous;
    std::optional<std::size_t> current_pos, previous_pos;
  };
  const ModelWeights* weights_;
  AsyncMode mode_;
  std::vector<std::array<Slot, 2>> slots_;
};

struct LayerCapture {
  unsigned l = 0;
  unsigned h = 0;
  std::vector<double> errors;        // exact ||dW x|| per token, in token order
  std::vector<double> input_norms;   // ||x|| per token
  std::vector<double> source_norms;  // ||source vector|| per token
  std::vector<double> sorted_errors;
  // Strided subsample of tokens kept for projection fitting: immediate input,
  // source vector and exact error per row.
  Matrix inputs;
  Matrix sources;
  std::vector<double> sample_errors;
};

struct CaptureOptions {
  bool async = true;
  AsyncMode mode = AsyncMode::PreviousToken;
  std::size_t max_inputs = 512;
};

// Forward passes over `calib` with every layer at max_bits[i]; records the
// exact error of each (l, h) pair in `pairs` for every token.
std::map<LayerId, LayerCapture> collect_error_samples(
    const ModelWeights& weights, const BitPlaneStore& store,
    const std::map<LayerId, unsigned>& max_bits, const std::map<LayerId, InterpCoeffs>& pairs,
    std::span<const std::vector<Token>> calib, const CaptureOptions& options = {});

enum class EstimatorMode { Exact, Hybrid };

struct EstimatorConfig {
  EstimatorMode mode = EstimatorMode::Hybrid;
  std::size_t k = 64;
  double r2_gate = 0.9;
  std::uint64_t seed = 0;
  bool async = true;
  ProjectionCalibration calibration;
};

struct EstimatorBuild {
  ErrorEstimator estimator;
  std::optional<LinearFit> linear;
  std::optional<CalibrationReport> projection;
  std::vector<std::string> warnings;
};

// Exact: the estimator is exact on the immediate input. Hybrid: linear when it
// passes the R^2 gate and is at least as accurate as the calibrated
// projection, otherwise the projection.
EstimatorBuild build_estimator(LayerId id, const LayerCapture& capture, const QuantizedLayer& layer,
                               const EstimatorConfig& config);

}  // namespace dpllm
