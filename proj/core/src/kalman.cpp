#include "kdrift/kalman.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "kdrift/errors.hpp"

namespace kdrift {

namespace {

void check_same_size(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }
}

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kKalmanMagic[4] = {'K', 'D', 'K', 'F'};
constexpr char kParamsMagic[4] = {'K', 'D', 'P', 'V'};

void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& in, void* p, std::size_t n,
                const std::string& path) {
  if (!in.read(static_cast<char*>(p), static_cast<std::streamsize>(n))) {
    throw DataError(DataError::Code::truncated, path + ": truncated checkpoint");
  }
}

std::ifstream open_checkpoint(const std::string& path, const char magic[4]) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError(DataError::Code::io, path + ": cannot open");
  }
  char got[4];
  read_bytes(in, got, 4, path);
  if (std::memcmp(got, magic, 4) != 0) {
    throw DataError(DataError::Code::wrong_magic,
                    path + ": wrong checkpoint magic");
  }
  std::uint32_t version = 0;
  read_bytes(in, &version, sizeof(version), path);
  if (version != kCheckpointVersion) {
    throw DataError(DataError::Code::wrong_magic,
                    path + ": unsupported checkpoint version");
  }
  return in;
}

}  // namespace

void KalmanOptions::validate() const {
  if (!(covariance_floor > 0.0)) {
    throw ConfigError("noise_floor", "covariance floor must be positive");
  }
  if (!(noise_floor > 0.0)) {
    throw ConfigError("noise_floor", "noise floor must be positive");
  }
}

NoiseVector gradient_noise(const GradientVector& grad, double floor,
                           NoiseTransform transform) {
  if (!grad.allFinite()) {
    throw std::invalid_argument("gradient contains non-finite entries");
  }
  if (!(floor > 0.0)) {
    throw std::invalid_argument("floor must be positive");
  }
  NoiseVector noise = transform == NoiseTransform::square
                          ? NoiseVector(grad.array().square())
                          : NoiseVector(grad.array().abs());
  return noise.max(floor);
}

KalmanState init_kalman(const ParamVector& pretrained,
                        const GradientVector& pretrain_grad,
                        const KalmanOptions& options) {
  options.validate();
  check_same_size(pretrained.size(), pretrain_grad.size(), "init_kalman");
  if (!pretrained.allFinite()) {
    throw std::invalid_argument("pretrained params contain non-finite entries");
  }
  KalmanState state;
  state.estimate = pretrained;
  state.covariance =
      gradient_noise(pretrain_grad, options.covariance_floor, options.transform);
  return state;
}

NoiseVector measurement_noise(const Architecture& arch,
                              const ParamVector& params_k, const Batch& batch,
                              const KalmanOptions& options) {
  options.validate();
  const LossGrad lg = loss_and_grad(arch, params_k, batch);
  return gradient_noise(lg.grad, options.noise_floor, options.transform);
}

KalmanState kalman_predict(KalmanState state) { return state; }

Eigen::ArrayXd kalman_gain(const Eigen::ArrayXd& p_pred,
                           const NoiseVector& r) {
  check_same_size(p_pred.size(), r.size(), "kalman_gain");
  if ((p_pred < 0.0).any() || (r < 0.0).any()) {
    throw std::invalid_argument("kalman_gain: negative covariance or noise");
  }
  const Eigen::ArrayXd denom = p_pred + r;
  if ((denom <= 0.0).any()) {
    throw std::invalid_argument("kalman_gain: zero denominator");
  }
  return p_pred / denom;
}

KalmanState kalman_update(const KalmanState& state,
                          const ParamVector& measurement,
                          const NoiseVector& r, double covariance_floor) {
  check_same_size(state.estimate.size(), measurement.size(), "kalman_update");
  check_same_size(state.estimate.size(), r.size(), "kalman_update");
  const Eigen::ArrayXd gain = kalman_gain(state.covariance, r);

  const Eigen::ArrayXd prior = state.estimate.array();
  const Eigen::ArrayXd meas = measurement.array();
  Eigen::ArrayXd fused = prior + gain * (meas - prior);
  // Clamp into the prior/measurement interval; rounding of the fused
  // expression may overshoot by an ulp, and the convex-combination
  // invariant is exact.
  fused = fused.max(prior.min(meas)).min(prior.max(meas));

  KalmanState next;
  next.estimate = fused.matrix();
  next.covariance = ((1.0 - gain) * state.covariance).max(covariance_floor);
  if (!next.estimate.allFinite() || !next.covariance.allFinite()) {
    throw std::runtime_error("kalman_update produced non-finite values");
  }
  return next;
}

void save_kalman_state(const std::string& path, const KalmanState& state,
                       double covariance_floor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataError::Code::io, path + ": cannot open");
  write_bytes(out, kKalmanMagic, 4);
  write_bytes(out, &kCheckpointVersion, sizeof(kCheckpointVersion));
  const std::uint64_t n = static_cast<std::uint64_t>(state.estimate.size());
  write_bytes(out, &n, sizeof(n));
  write_bytes(out, &covariance_floor, sizeof(covariance_floor));
  write_bytes(out, state.estimate.data(), n * sizeof(double));
  write_bytes(out, state.covariance.data(), n * sizeof(double));
  if (!out) throw DataError(DataError::Code::io, path + ": write failed");
}

KalmanCheckpoint load_kalman_state(const std::string& path) {
  std::ifstream in = open_checkpoint(path, kKalmanMagic);
  std::uint64_t n = 0;
  read_bytes(in, &n, sizeof(n), path);
  KalmanCheckpoint cp;
  read_bytes(in, &cp.covariance_floor, sizeof(double), path);
  cp.state.estimate.resize(static_cast<Eigen::Index>(n));
  cp.state.covariance.resize(static_cast<Eigen::Index>(n));
  read_bytes(in, cp.state.estimate.data(), n * sizeof(double), path);
  read_bytes(in, cp.state.covariance.data(), n * sizeof(double), path);
  return cp;
}

void save_params(const std::string& path, const ParamVector& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataError::Code::io, path + ": cannot open");
  write_bytes(out, kParamsMagic, 4);
  write_bytes(out, &kCheckpointVersion, sizeof(kCheckpointVersion));
  const std::uint64_t n = static_cast<std::uint64_t>(params.size());
  write_bytes(out, &n, sizeof(n));
  write_bytes(out, params.data(), n * sizeof(double));
  if (!out) throw DataError(DataError::Code::io, path + ": write failed");
}

ParamVector load_params(const std::string& path) {
  std::ifstream in = open_checkpoint(path, kParamsMagic);
  std::uint64_t n = 0;
  read_bytes(in, &n, sizeof(n), path);
  ParamVector params(static_cast<Eigen::Index>(n));
  read_bytes(in, params.data(), n * sizeof(double), path);
  return params;
}

}  // namespace kdrift
