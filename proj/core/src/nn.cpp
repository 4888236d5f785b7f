#include "kdrift/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "kdrift/rng.hpp"

namespace kdrift {

namespace {

using Eigen::Index;
using Eigen::Map;
using Eigen::MatrixXd;
using Eigen::VectorXd;

Map<const MatrixXd> weight_view(const Architecture& arch,
                                const ParamVector& params, int layer) {
  const Index fan_in = arch.layer_sizes[layer];
  const Index fan_out = arch.layer_sizes[layer + 1];
  return {params.data() + arch.layer_offset(layer), fan_in, fan_out};
}

Map<const VectorXd> bias_view(const Architecture& arch,
                              const ParamVector& params, int layer) {
  const Index fan_in = arch.layer_sizes[layer];
  const Index fan_out = arch.layer_sizes[layer + 1];
  return {params.data() + arch.layer_offset(layer) + fan_in * fan_out,
          fan_out};
}

Map<MatrixXd> weight_view_mut(const Architecture& arch, VectorXd& params,
                              int layer) {
  const Index fan_in = arch.layer_sizes[layer];
  const Index fan_out = arch.layer_sizes[layer + 1];
  return {params.data() + arch.layer_offset(layer), fan_in, fan_out};
}

Map<VectorXd> bias_view_mut(const Architecture& arch, VectorXd& params,
                            int layer) {
  const Index fan_in = arch.layer_sizes[layer];
  const Index fan_out = arch.layer_sizes[layer + 1];
  return {params.data() + arch.layer_offset(layer) + fan_in * fan_out,
          fan_out};
}

void check_shapes(const Architecture& arch, const ParamVector& params,
                  Index image_dim) {
  arch.validate();
  if (params.size() != arch.param_count()) {
    throw std::invalid_argument("params length does not match architecture");
  }
  if (image_dim != arch.input_dim()) {
    throw std::invalid_argument("image width does not match input dim");
  }
}

}  // namespace

std::int64_t Architecture::param_count() const {
  std::int64_t total = 0;
  for (int l = 0; l + 1 < static_cast<int>(layer_sizes.size()); ++l) {
    total += std::int64_t(layer_sizes[l]) * layer_sizes[l + 1] +
             layer_sizes[l + 1];
  }
  return total;
}

std::int64_t Architecture::layer_offset(int layer) const {
  std::int64_t off = 0;
  for (int l = 0; l < layer; ++l) {
    off += std::int64_t(layer_sizes[l]) * layer_sizes[l + 1] +
           layer_sizes[l + 1];
  }
  return off;
}

void Architecture::validate() const {
  if (layer_sizes.size() < 2) {
    throw std::invalid_argument("architecture needs at least 2 layer sizes");
  }
  for (int s : layer_sizes) {
    if (s <= 0) {
      throw std::invalid_argument("layer sizes must be positive");
    }
  }
}

ParamVector init_params(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  ParamVector params = ParamVector::Zero(arch.param_count());
  std::mt19937_64 gen(seed);
  for (int l = 0; l < arch.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(double(arch.layer_sizes[l]));
    auto w = weight_view_mut(arch, params, l);
    for (Index c = 0; c < w.cols(); ++c) {
      for (Index r = 0; r < w.rows(); ++r) {
        w(r, c) = uniform_range(gen, -bound, bound);
      }
    }
    // biases stay zero
  }
  return params;
}

Eigen::MatrixXd forward(const Architecture& arch, const ParamVector& params,
                        const Eigen::MatrixXd& images) {
  check_shapes(arch, params, images.cols());
  MatrixXd h = images;
  for (int l = 0; l < arch.num_layers(); ++l) {
    MatrixXd z = h * weight_view(arch, params, l);
    z.rowwise() += bias_view(arch, params, l).transpose();
    if (l + 1 < arch.num_layers()) {
      h = z.cwiseMax(0.0);
    } else {
      h = std::move(z);
    }
  }
  return h;
}

LossGrad loss_and_grad(const Architecture& arch, const ParamVector& params,
                       const Batch& batch) {
  check_shapes(arch, params, batch.images.cols());
  const Index n = batch.images.rows();
  if (n < 1 || static_cast<Index>(batch.labels.size()) != n) {
    throw std::invalid_argument("batch images/labels mismatch");
  }
  for (int label : batch.labels) {
    if (label < 0 || label >= arch.num_classes()) {
      throw std::invalid_argument("label out of range");
    }
  }

  const int layers = arch.num_layers();

  // Forward, keeping pre- and post-activation per layer.
  std::vector<MatrixXd> acts;  // acts[l] = input to layer l
  acts.reserve(layers + 1);
  acts.push_back(batch.images);
  std::vector<MatrixXd> pre;  // pre[l] = affine output of layer l
  pre.reserve(layers);
  for (int l = 0; l < layers; ++l) {
    MatrixXd z = acts.back() * weight_view(arch, params, l);
    z.rowwise() += bias_view(arch, params, l).transpose();
    pre.push_back(z);
    if (l + 1 < layers) {
      acts.push_back(pre.back().cwiseMax(0.0));
    }
  }
  const MatrixXd& logits = pre.back();

  // Softmax cross-entropy via log-sum-exp.
  double loss = 0.0;
  MatrixXd delta(n, arch.num_classes());  // softmax - onehot, scaled by 1/n
  for (Index i = 0; i < n; ++i) {
    const double zmax = logits.row(i).maxCoeff();
    const Eigen::ArrayXd shifted = logits.row(i).transpose().array() - zmax;
    const Eigen::ArrayXd ex = shifted.exp();
    const double sum = ex.sum();
    loss += std::log(sum) - shifted(batch.labels[static_cast<std::size_t>(i)]);
    delta.row(i) = (ex / sum).matrix().transpose();
    delta(i, batch.labels[static_cast<std::size_t>(i)]) -= 1.0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  loss *= inv_n;
  delta *= inv_n;

  // Backward.
  GradientVector grad = GradientVector::Zero(params.size());
  MatrixXd dz = std::move(delta);
  for (int l = layers - 1; l >= 0; --l) {
    weight_view_mut(arch, grad, l).noalias() = acts[l].transpose() * dz;
    bias_view_mut(arch, grad, l) = dz.colwise().sum().transpose();
    if (l > 0) {
      MatrixXd dh = dz * weight_view(arch, params, l).transpose();
      dz = ((pre[l - 1].array() > 0.0).cast<double>() * dh.array()).matrix();
    }
  }

  if (!std::isfinite(loss) || !grad.allFinite()) {
    throw std::runtime_error("loss_and_grad produced non-finite values");
  }
  return {loss, std::move(grad)};
}

ParamVector sgd_step(const ParamVector& params, const GradientVector& grad,
                     double lr) {
  if (!(lr > 0.0)) {
    throw std::invalid_argument("lr must be positive");
  }
  if (params.size() != grad.size()) {
    throw std::invalid_argument("params/grad shape mismatch");
  }
  ParamVector next = params - lr * grad;
  if (!next.allFinite()) {
    throw std::runtime_error("sgd_step produced non-finite parameters");
  }
  return next;
}

double evaluate(const Architecture& arch, const ParamVector& params,
                const Dataset& dataset) {
  if (dataset.size() < 1) {
    throw std::invalid_argument("evaluate: empty dataset");
  }
  check_shapes(arch, params, dataset.dim());

  constexpr Index kChunk = 2048;
  std::int64_t correct = 0;
  Eigen::MatrixXd chunk;
  for (Index start = 0; start < dataset.size(); start += kChunk) {
    const Index count = std::min(kChunk, dataset.size() - start);
    chunk = dataset.images.middleRows(start, count).cast<double>();
    const MatrixXd logits = forward(arch, params, chunk);
    for (Index i = 0; i < count; ++i) {
      Index best = 0;
      double best_val = logits(i, 0);
      for (Index c = 1; c < logits.cols(); ++c) {
        if (logits(i, c) > best_val) {  // strict: ties keep the lowest index
          best_val = logits(i, c);
          best = c;
        }
      }
      if (best == dataset.labels[static_cast<std::size_t>(start + i)]) {
        ++correct;
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

LossGrad dataset_loss_and_grad(const Architecture& arch,
                               const ParamVector& params,
                               const Dataset& dataset, int chunk_size) {
  dataset.validate();
  if (chunk_size < 1) {
    throw std::invalid_argument("chunk_size must be >= 1");
  }
  const double total = static_cast<double>(dataset.size());
  GradientVector grad = GradientVector::Zero(params.size());
  double loss = 0.0;
  for (Index start = 0; start < dataset.size();
       start += static_cast<Index>(chunk_size)) {
    const Index count =
        std::min<Index>(chunk_size, dataset.size() - start);
    Batch batch;
    batch.images = dataset.images.middleRows(start, count).cast<double>();
    batch.labels.assign(dataset.labels.begin() + start,
                        dataset.labels.begin() + start + count);
    const LossGrad lg = loss_and_grad(arch, params, batch);
    const double w = static_cast<double>(count) / total;
    grad += w * lg.grad;
    loss += w * lg.loss;
  }
  return {loss, std::move(grad)};
}

}  // namespace kdrift
