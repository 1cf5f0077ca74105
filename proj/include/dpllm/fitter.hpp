#pragma once

// Learns a fractional average precision p_i per layer by gradient descent on
// the calibration loss, with each layer's product replaced by the
// interpolation r W_l x + (1 - r) W_h x of its two neighbouring precisions.

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "dpllm/allocator.hpp"
#include "dpllm/model.hpp"
#include "dpllm/quant.hpp"

namespace dpllm {

struct InterpCoeffs {
  unsigned l = 0;
  unsigned h = 0;
  double r = 1.0;  // weight on W_l
};

// l = floor(p), h = l + 1, r = 1 - (p - l). An integer p takes the cell above
// it (r = 1) so the gradient stays informative; p = upper takes the cell below
// (r = 0). A layer with lower == upper degenerates to l = h.
InterpCoeffs interp_coeffs(double p, unsigned lower, unsigned upper);

struct PrecisionParams {
  std::map<LayerId, double> p;
  std::map<LayerId, unsigned> upper;  // B[i]
  unsigned lower = 3;                 // b_min
  double target_bits = 0.0;
  double alpha = 1.0;

  InterpCoeffs coeffs(LayerId id) const { return interp_coeffs(p.at(id), lower, upper.at(id)); }
  // sum p M / sum M
  double average(const std::map<LayerId, std::uint64_t>& params) const;
};

std::map<LayerId, std::uint64_t> layer_params(const BitPlaneStore& store);

// y = r W_l x + (1 - r) W_h x; integer p evaluates a single product.
void interp_forward(const QuantizedLayer& layer, const InterpCoeffs& c, std::span<const double> x,
                    std::span<double> y);

// sum over positions of <dy_t, (W_h - W_l) x_t>; rows of `dy` and `x` are positions.
double grad_p(const QuantizedLayer& layer, const InterpCoeffs& c, const Matrix& dy,
              const Matrix& x);
double grad_p(const Matrix& delta_w, const Matrix& dy, const Matrix& x);

// L + alpha (avg - target)^2
double regularized_loss(double loss, const PrecisionParams& params,
                        const std::map<LayerId, std::uint64_t>& m);
double regularizer(const PrecisionParams& params, const std::map<LayerId, std::uint64_t>& m);
// d/dp_i of the regularizer: 2 alpha (avg - target) M_i / sum M
std::map<LayerId, double> regularizer_grad(const PrecisionParams& params,
                                           const std::map<LayerId, std::uint64_t>& m);

// Every layer served through interp_forward at its current coefficients.
class InterpProvider final : public WeightProvider {
 public:
  InterpProvider(const BitPlaneStore& store, const PrecisionParams& params);
  void linear(LayerId id, std::size_t pos, std::span<const double> x, std::span<double> y) override;
  void linear_backward(LayerId id, std::size_t pos, std::span<const double> dy,
                       std::span<double> dx) override;

 private:
  const BitPlaneStore* store_;
  std::map<LayerId, InterpCoeffs> coeffs_;
};

struct FitHyper {
  std::size_t epochs = 5;
  double lr = 0.01;
  double alpha = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;  // sample shuffling per epoch
};

struct FitEpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;         // mean calibration loss over the epoch's batches
  double regularizer = 0.0;  // at the end of the epoch
  double avg_bits = 0.0;     // at the end of the epoch
};

struct FitResult {
  PrecisionParams params;
  std::vector<FitEpochLog> log;
};

// Per-layer gradient of the mean loss over `samples` with respect to p.
// Returns the mean loss.
double loss_and_grad_p(const ModelWeights& weights, const BitPlaneStore& store,
                       const PrecisionParams& params, std::span<const std::vector<Token>> samples,
                       std::map<LayerId, double>* grad);

// Starts at p_i = clamp(target, b_min, B[i]); clamps after every update.
// Throws InfeasibleError when the target lies outside [b_min, avg(B)].
FitResult fit(const ModelWeights& weights, const BitPlaneStore& store, const BitAssignment& max_bits,
              std::span<const std::vector<Token>> calib, double target_bits,
              const FitHyper& hyper = {});

void write_fit_log_csv(const std::vector<FitEpochLog>& log, const std::filesystem::path& path);

}  // namespace dpllm
