#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "kdrift/data.hpp"

namespace kdrift {

/// All weights and biases of the network in one flat vector. Layout, per
/// affine layer l (fan_in = layer_sizes[l], fan_out = layer_sizes[l+1]):
/// the weight matrix W_l (fan_in x fan_out, column-major) followed by the
/// bias vector b_l. The Kalman filter treats this vector as its state.
using ParamVector = Eigen::VectorXd;

/// Same length and layout as ParamVector.
using GradientVector = Eigen::VectorXd;

struct Architecture {
  std::vector<int> layer_sizes;  // input dim, hidden dims..., output dim

  int input_dim() const { return layer_sizes.front(); }
  int num_classes() const { return layer_sizes.back(); }
  int num_layers() const { return static_cast<int>(layer_sizes.size()) - 1; }

  std::int64_t param_count() const;
  std::int64_t layer_offset(int layer) const;

  /// Throws std::invalid_argument unless there are >= 2 layer sizes, all
  /// positive.
  void validate() const;
};

/// Weights uniform in (-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero,
/// drawn layer by layer in storage order from a mt19937_64 seeded with
/// `seed`. Identical (arch, seed) gives bit-identical output.
ParamVector init_params(const Architecture& arch, std::uint64_t seed);

/// Hidden layers: affine then ReLU. Final layer: affine only (logits).
Eigen::MatrixXd forward(const Architecture& arch, const ParamVector& params,
                        const Eigen::MatrixXd& images);

struct LossGrad {
  double loss;          // mean softmax cross-entropy over the batch
  GradientVector grad;  // exact gradient in ParamVector layout
};

/// Loss uses the log-sum-exp form with max subtraction, so it is stable
/// for any logit magnitude. ReLU derivative at exactly 0 is taken as 0.
LossGrad loss_and_grad(const Architecture& arch, const ParamVector& params,
                       const Batch& batch);

/// params - lr * grad, elementwise. Rejects lr <= 0.
ParamVector sgd_step(const ParamVector& params, const GradientVector& grad,
                     double lr);

/// Fraction of samples whose argmax logit equals the label. Ties resolve
/// to the lowest class index. Samples are processed in fixed-size chunks
/// and correctness is counted in integers, so the result does not depend
/// on evaluation order.
double evaluate(const Architecture& arch, const ParamVector& params,
                const Dataset& dataset);

/// Exact mean gradient of the whole dataset, accumulated over fixed-order
/// chunks weighted by chunk size. Also returns the mean loss.
LossGrad dataset_loss_and_grad(const Architecture& arch,
                               const ParamVector& params,
                               const Dataset& dataset, int chunk_size = 4096);

}  // namespace kdrift
