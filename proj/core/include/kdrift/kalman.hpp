#pragma once

#include <Eigen/Dense>
#include <string>

#include "kdrift/nn.hpp"

namespace kdrift {

/// Per-parameter nonnegative noise/uncertainty values, same length and
/// layout as the ParamVector they describe.
using NoiseVector = Eigen::ArrayXd;

/// How a gradient becomes a nonnegative noise value. Gradients are signed
/// while variances cannot be, so the default squares them; `abs` is the
/// alternative reading, selectable from configuration.
enum class NoiseTransform { square, abs };

struct KalmanOptions {
  /// Lower bound kept on the error covariance P, both at initialization
  /// and after every update. Without it P contracts to zero and the gain
  /// pins at zero, freezing the filter permanently.
  double covariance_floor = 1e-12;
  /// Lower bound on the measurement noise R; also guards the gain
  /// denominator P + R against zero.
  double noise_floor = 1e-12;
  NoiseTransform transform = NoiseTransform::square;

  void validate() const;
};

/// Diagonal filter state over the network parameters: the estimate x-hat
/// and one error-covariance entry per parameter. The state model is
/// fixed: identity transition and observation, no process noise, so the
/// predict step changes nothing and all arithmetic is elementwise.
struct KalmanState {
  ParamVector estimate;
  Eigen::ArrayXd covariance;  // entries >= covariance_floor, finite
};

/// grad -> max(transform(grad), floor), elementwise.
NoiseVector gradient_noise(const GradientVector& grad, double floor,
                           NoiseTransform transform);

/// estimate = pretrained; covariance = floored transform of the
/// pre-training-set mean gradient. Rejects non-finite gradients.
KalmanState init_kalman(const ParamVector& pretrained,
                        const GradientVector& pretrain_grad,
                        const KalmanOptions& options);

/// R for the current batch: floored transform of the gradient of the
/// post-SGD model params_k on that same batch.
NoiseVector measurement_noise(const Architecture& arch,
                              const ParamVector& params_k, const Batch& batch,
                              const KalmanOptions& options);

/// Identity prediction: the system is assumed stationary between
/// batches, so estimate and covariance pass through unchanged.
KalmanState kalman_predict(KalmanState state);

/// K = P / (P + R), elementwise; every entry lands in [0, 1].
Eigen::ArrayXd kalman_gain(const Eigen::ArrayXd& p_pred,
                           const NoiseVector& r);

/// estimate' = estimate + K (measurement - estimate), clamped into the
/// closed interval between the two so rounding can never overshoot;
/// covariance' = max((1 - K) P, covariance_floor).
KalmanState kalman_update(const KalmanState& state,
                          const ParamVector& measurement,
                          const NoiseVector& r, double covariance_floor);

/// Flat little-endian checkpoint: magic "KDKF", version, length, floor,
/// estimate array, covariance array.
void save_kalman_state(const std::string& path, const KalmanState& state,
                       double covariance_floor);

struct KalmanCheckpoint {
  KalmanState state;
  double covariance_floor;
};
KalmanCheckpoint load_kalman_state(const std::string& path);

/// Same container for a bare ParamVector, magic "KDPV".
void save_params(const std::string& path, const ParamVector& params);
ParamVector load_params(const std::string& path);

}  // namespace kdrift
