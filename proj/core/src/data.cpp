#include "kdrift/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "kdrift/rng.hpp"

namespace kdrift {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_u32_be(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw DataError(DataError::Code::truncated,
                    path + ": truncated header");
  }
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

void write_u32_be(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::ifstream open_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError(DataError::Code::io, path + ": cannot open");
  }
  return in;
}

}  // namespace

void Dataset::validate() const {
  if (images.rows() < 1) {
    throw std::invalid_argument("dataset: no samples");
  }
  if (images.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw std::invalid_argument("dataset: image/label count mismatch");
  }
  if (!images.allFinite()) {
    throw std::invalid_argument("dataset: non-finite pixel");
  }
}

void TaskSequence::validate() const {
  if (tasks.empty()) {
    throw ConfigError("tasks", "sequence must contain at least one task");
  }
  if (tasks.front().transform.kind != Transform::Kind::identity) {
    throw ConfigError("tasks", "first task must use the identity transform");
  }
  for (const TaskSpec& t : tasks) {
    if (t.epochs < 1) {
      throw ConfigError("epochs_per_task", "epochs must be >= 1");
    }
  }
}

Dataset load_mnist(const std::string& images_path,
                   const std::string& labels_path) {
  std::ifstream img = open_binary(images_path);
  const std::uint32_t img_magic = read_u32_be(img, images_path);
  if (img_magic != kImageMagic) {
    char msg[128];
    std::snprintf(msg, sizeof(msg), "%s: wrong magic 0x%08x (want 0x%08x)",
                  images_path.c_str(), img_magic, kImageMagic);
    throw DataError(DataError::Code::wrong_magic, msg);
  }
  const std::uint32_t n = read_u32_be(img, images_path);
  const std::uint32_t rows = read_u32_be(img, images_path);
  const std::uint32_t cols = read_u32_be(img, images_path);
  const std::size_t dim = std::size_t(rows) * cols;
  if (n == 0 || dim == 0) {
    throw DataError(DataError::Code::truncated,
                    images_path + ": empty image file");
  }

  std::vector<unsigned char> pixels(std::size_t(n) * dim);
  if (!img.read(reinterpret_cast<char*>(pixels.data()),
                static_cast<std::streamsize>(pixels.size()))) {
    throw DataError(DataError::Code::truncated,
                    images_path + ": truncated pixel data");
  }

  std::ifstream lab = open_binary(labels_path);
  const std::uint32_t lab_magic = read_u32_be(lab, labels_path);
  if (lab_magic != kLabelMagic) {
    char msg[128];
    std::snprintf(msg, sizeof(msg), "%s: wrong magic 0x%08x (want 0x%08x)",
                  labels_path.c_str(), lab_magic, kLabelMagic);
    throw DataError(DataError::Code::wrong_magic, msg);
  }
  const std::uint32_t n_labels = read_u32_be(lab, labels_path);
  if (n_labels != n) {
    throw DataError(DataError::Code::count_mismatch,
                    labels_path + ": " + std::to_string(n_labels) +
                        " labels for " + std::to_string(n) + " images");
  }
  std::vector<unsigned char> raw_labels(n_labels);
  if (!lab.read(reinterpret_cast<char*>(raw_labels.data()),
                static_cast<std::streamsize>(raw_labels.size()))) {
    throw DataError(DataError::Code::truncated,
                    labels_path + ": truncated label data");
  }

  Dataset out;
  out.images.resize(n, static_cast<Eigen::Index>(dim));
  for (std::uint32_t i = 0; i < n; ++i) {
    float* row = out.images.row(i).data();
    const unsigned char* src = pixels.data() + std::size_t(i) * dim;
    for (std::size_t j = 0; j < dim; ++j) {
      row[j] = static_cast<float>(src[j]) / 255.0f;
    }
  }
  out.labels.assign(raw_labels.begin(), raw_labels.end());
  out.validate();
  return out;
}

void write_idx(const Dataset& dataset, const std::string& images_path,
               const std::string& labels_path, int rows, int cols) {
  dataset.validate();
  if (rows == 0 && cols == 0) {
    // Square image assumed when the caller does not give a geometry.
    const int side = static_cast<int>(std::lround(
        std::sqrt(static_cast<double>(dataset.dim()))));
    if (static_cast<Eigen::Index>(side) * side != dataset.dim()) {
      throw std::invalid_argument("write_idx: non-square dim needs rows/cols");
    }
    rows = cols = side;
  }
  if (static_cast<Eigen::Index>(rows) * cols != dataset.dim()) {
    throw std::invalid_argument("write_idx: rows*cols != dataset dim");
  }

  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw DataError(DataError::Code::io, images_path + ": cannot open");
  write_u32_be(img, kImageMagic);
  write_u32_be(img, static_cast<std::uint32_t>(dataset.size()));
  write_u32_be(img, static_cast<std::uint32_t>(rows));
  write_u32_be(img, static_cast<std::uint32_t>(cols));
  std::vector<unsigned char> buf(static_cast<std::size_t>(dataset.dim()));
  for (Eigen::Index i = 0; i < dataset.size(); ++i) {
    const float* row = dataset.images.row(i).data();
    for (Eigen::Index j = 0; j < dataset.dim(); ++j) {
      buf[static_cast<std::size_t>(j)] = static_cast<unsigned char>(
          std::lround(static_cast<double>(row[j]) * 255.0));
    }
    img.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
  }
  if (!img) throw DataError(DataError::Code::io, images_path + ": write failed");

  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw DataError(DataError::Code::io, labels_path + ": cannot open");
  write_u32_be(lab, kLabelMagic);
  write_u32_be(lab, static_cast<std::uint32_t>(dataset.size()));
  for (int label : dataset.labels) {
    const unsigned char b = static_cast<unsigned char>(label);
    lab.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!lab) throw DataError(DataError::Code::io, labels_path + ": write failed");
}

std::vector<int> pixel_permutation(std::uint64_t seed, int dim) {
  std::vector<int> perm(static_cast<std::size_t>(dim));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 gen(seed);
  shuffle_portable(perm, gen);
  return perm;
}

std::vector<int> inverse_permutation(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  }
  return inv;
}

Dataset permute_images(const Dataset& dataset, const std::vector<int>& perm) {
  if (static_cast<Eigen::Index>(perm.size()) != dataset.dim()) {
    throw std::invalid_argument("permute_images: permutation size mismatch");
  }
  Dataset out;
  out.labels = dataset.labels;
  out.images.resize(dataset.size(), dataset.dim());
  for (Eigen::Index i = 0; i < dataset.size(); ++i) {
    const float* src = dataset.images.row(i).data();
    float* dst = out.images.row(i).data();
    for (std::size_t j = 0; j < perm.size(); ++j) {
      dst[j] = src[perm[j]];
    }
  }
  return out;
}

Dataset apply_transform(const Dataset& dataset, const Transform& transform) {
  switch (transform.kind) {
    case Transform::Kind::identity:
      return dataset;
    case Transform::Kind::permute_pixels:
      return permute_images(
          dataset, pixel_permutation(transform.seed,
                                     static_cast<int>(dataset.dim())));
    case Transform::Kind::shift_labels: {
      Dataset out;
      out.images = dataset.images;
      out.labels.reserve(dataset.labels.size());
      for (int label : dataset.labels) {
        out.labels.push_back((label + transform.offset) % 10);
      }
      return out;
    }
  }
  throw std::invalid_argument("apply_transform: unknown kind");
}

std::pair<Dataset, Dataset> split_train_val(const Dataset& dataset,
                                            int val_count) {
  if (val_count < 1 || val_count >= dataset.size()) {
    throw std::invalid_argument("split_train_val: bad val_count");
  }
  const Eigen::Index n_train = dataset.size() - val_count;
  Dataset train, val;
  train.images = dataset.images.topRows(n_train);
  train.labels.assign(dataset.labels.begin(), dataset.labels.begin() + n_train);
  val.images = dataset.images.bottomRows(val_count);
  val.labels.assign(dataset.labels.begin() + n_train, dataset.labels.end());
  return {std::move(train), std::move(val)};
}

BatchStream::BatchStream(const Dataset& dataset, int batch_size,
                         std::uint64_t epoch_seed)
    : dataset_(&dataset), batch_size_(batch_size) {
  if (batch_size < 1) {
    throw std::invalid_argument("batch_size must be >= 1");
  }
  order_.resize(static_cast<std::size_t>(dataset.size()));
  std::iota(order_.begin(), order_.end(), 0);
  std::mt19937_64 gen(epoch_seed);
  shuffle_portable(order_, gen);
}

std::optional<Batch> BatchStream::next() {
  if (pos_ >= order_.size()) return std::nullopt;
  const std::size_t count =
      std::min<std::size_t>(static_cast<std::size_t>(batch_size_),
                            order_.size() - pos_);
  Batch batch;
  batch.images.resize(static_cast<Eigen::Index>(count), dataset_->dim());
  batch.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::int32_t idx = order_[pos_ + i];
    batch.images.row(static_cast<Eigen::Index>(i)) =
        dataset_->images.row(idx).cast<double>();
    batch.labels[i] = dataset_->labels[static_cast<std::size_t>(idx)];
  }
  pos_ += count;
  return batch;
}

TaskSequence make_task_sequence(const SequenceConfig& config) {
  TaskSequence seq;
  for (const std::string& name : config.tasks) {
    TaskSpec spec;
    spec.name = name;
    spec.epochs = config.epochs_per_task;
    if (name == "original" || name == "identity") {
      spec.transform = Transform::identity();
    } else if (name == "permuted") {
      spec.transform = Transform::permute_pixels(config.permute_seed);
    } else if (name == "label_shift") {
      if (config.label_offset < 1 || config.label_offset >= 10) {
        throw ConfigError("label_offset", "must be in [1, 10)");
      }
      spec.transform = Transform::shift_labels(config.label_offset);
    } else {
      throw ConfigError("tasks", "unknown task kind '" + name + "'");
    }
    seq.tasks.push_back(std::move(spec));
  }
  seq.validate();
  return seq;
}

}  // namespace kdrift
