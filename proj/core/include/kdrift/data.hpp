#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kdrift/errors.hpp"

namespace kdrift {

/// Images are stored row-major, one sample per row, pixel values already
/// normalized to [0,1] (raw byte / 255). float storage keeps a full MNIST
/// split under 200 MB; all arithmetic downstream runs in double.
using ImageMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Dataset {
  ImageMatrix images;       // n x dim
  std::vector<int> labels;  // n entries in [0, num_classes)

  Eigen::Index size() const { return images.rows(); }
  Eigen::Index dim() const { return images.cols(); }

  /// Throws std::invalid_argument unless n >= 1, rows == labels and all
  /// pixels are finite.
  void validate() const;
};

/// One mini-batch, materialized in double for training math.
struct Batch {
  Eigen::MatrixXd images;   // batch_size x dim
  std::vector<int> labels;  // batch_size entries

  Eigen::Index size() const { return images.rows(); }
};

struct Transform {
  enum class Kind { identity, permute_pixels, shift_labels };

  Kind kind = Kind::identity;
  std::uint64_t seed = 0;  // permute_pixels only
  int offset = 0;          // shift_labels only, in [1, 10)

  static Transform identity() { return {}; }
  static Transform permute_pixels(std::uint64_t seed) {
    return {Kind::permute_pixels, seed, 0};
  }
  static Transform shift_labels(int offset) {
    return {Kind::shift_labels, 0, offset};
  }
};

struct TaskSpec {
  std::string name;
  Transform transform;
  int epochs = 1;
};

/// Ordered drift sequence. Task 0 is the pre-training task and must use
/// the identity transform.
struct TaskSequence {
  std::vector<TaskSpec> tasks;

  void validate() const;  // throws ConfigError
};

/// Names the tasks of a sequence; kinds: "original", "permuted",
/// "label_shift". Epochs apply uniformly to every task.
struct SequenceConfig {
  std::vector<std::string> tasks = {"original", "permuted", "label_shift"};
  std::uint64_t permute_seed = 12345;
  int label_offset = 1;
  int epochs_per_task = 5;
};

/// Parses a big-endian IDX image/label file pair (magics 0x00000803 and
/// 0x00000801), checks that the sample counts agree and normalizes pixels
/// by /255. Throws DataError with a distinct code per failure mode.
Dataset load_mnist(const std::string& images_path,
                   const std::string& labels_path);

/// Writes a dataset back to the IDX pair format read by load_mnist.
/// Pixels are quantized to bytes with round-to-nearest, so datasets whose
/// values lie on the k/255 grid round-trip exactly.
void write_idx(const Dataset& dataset, const std::string& images_path,
               const std::string& labels_path, int rows = 0, int cols = 0);

/// Seed-derived bijection on [0, dim).
std::vector<int> pixel_permutation(std::uint64_t seed, int dim);
std::vector<int> inverse_permutation(const std::vector<int>& perm);

/// Reorders every row: output pixel j = input pixel perm[j].
Dataset permute_images(const Dataset& dataset, const std::vector<int>& perm);

/// Pure: returns a new dataset, the input is never touched.
Dataset apply_transform(const Dataset& dataset, const Transform& transform);

/// First (n - val_count) rows become the train split, the last val_count
/// rows the validation split.
std::pair<Dataset, Dataset> split_train_val(const Dataset& dataset,
                                            int val_count);

inline std::int64_t num_batches(std::int64_t n, int batch_size) {
  return (n + batch_size - 1) / batch_size;
}

/// Single-consumer stream of shuffled mini-batches. The index order is a
/// permutation of [0, n) derived from epoch_seed; the final partial batch
/// is included. Deterministic given (dataset, batch_size, epoch_seed).
class BatchStream {
 public:
  BatchStream(const Dataset& dataset, int batch_size, std::uint64_t epoch_seed);

  std::optional<Batch> next();
  std::int64_t total_batches() const {
    return num_batches(static_cast<std::int64_t>(order_.size()), batch_size_);
  }

 private:
  const Dataset* dataset_;
  std::vector<std::int32_t> order_;
  std::size_t pos_ = 0;
  int batch_size_;
};

/// Builds the drift sequence from names. Rejects unknown kinds and a
/// non-identity first task.
TaskSequence make_task_sequence(const SequenceConfig& config);

}  // namespace kdrift
