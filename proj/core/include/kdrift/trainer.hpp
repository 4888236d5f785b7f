#pragma once

#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "kdrift/data.hpp"
#include "kdrift/kalman.hpp"
#include "kdrift/nn.hpp"

namespace kdrift {

enum class Learner { conventional, kalman };

const char* learner_name(Learner learner);

struct TrainerConfig {
  Architecture arch{{784, 256, 10}};
  double lr = 0.1;
  int batch_size = 64;
  int epochs_per_task = 5;
  double noise_floor = 1e-12;
  NoiseTransform noise_transform = NoiseTransform::square;
  int eval_every = 50;  // batches between evaluations
  std::uint64_t seed = 42;

  /// Throws ConfigError naming the first violated field.
  void validate() const;

  /// The single noise_floor bounds both P and R. Tests that need the two
  /// limits split can pass a hand-built KalmanOptions to
  /// train_task_kalman instead.
  KalmanOptions kalman_options() const {
    return {noise_floor, noise_floor, noise_transform};
  }
};

struct MetricRecord {
  std::int64_t global_step = 0;
  int task_index = 0;
  Learner learner = Learner::conventional;
  double acc_pretrain_val = 0.0;
  double acc_pretrain_test = 0.0;
  double acc_current_val = 0.0;
  double loss = 0.0;
};

/// Append-only record stream; cli-bench binds it to files. Must tolerate
/// appends from concurrent lineages.
class MetricSink {
 public:
  virtual ~MetricSink() = default;
  virtual void append(const MetricRecord& record) = 0;
};

class VectorSink final : public MetricSink {
 public:
  void append(const MetricRecord& record) override {
    std::lock_guard<std::mutex> lock(mutex_);
    records_.push_back(record);
  }
  std::vector<MetricRecord> take() {
    std::lock_guard<std::mutex> lock(mutex_);
    return std::move(records_);
  }

 private:
  std::mutex mutex_;
  std::vector<MetricRecord> records_;
};

enum class Split { train, val, test };

const char* split_name(Split split);

/// One read of a task's arrays: which task's data, which split, and which
/// task was being trained when the read happened. Training data read
/// outside its own task is a replay violation; the task-0 validation and
/// test splits are the fixed measurement sets and stay readable for the
/// whole run.
struct AccessEvent {
  Learner lineage = Learner::conventional;
  int data_task = 0;
  Split split = Split::train;
  int active_task = 0;
  std::int64_t global_step = 0;
};

class AccessLog {
 public:
  void record(const AccessEvent& event) {
    std::lock_guard<std::mutex> lock(mutex_);
    events_.push_back(event);
  }
  std::vector<AccessEvent> snapshot() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return events_;
  }

 private:
  mutable std::mutex mutex_;
  std::vector<AccessEvent> events_;
};

bool is_replay_violation(const AccessEvent& event);
std::int64_t count_replay_violations(const std::vector<AccessEvent>& events);

/// The raw MNIST splits. Task datasets are materialized from train/val at
/// each task boundary and freed when the task ends; test is only ever
/// used as the task-0 evaluation set.
struct DataBundle {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Everything a task loop needs besides the model: the task's transformed
/// data, the fixed evaluation sets, step bookkeeping and instrumentation.
struct TaskEnv {
  const Dataset* train = nullptr;
  const Dataset* current_val = nullptr;
  const Dataset* pretrain_val = nullptr;
  const Dataset* pretrain_test = nullptr;
  int task_index = 0;
  std::int64_t start_step = 0;
  Learner lineage = Learner::conventional;
  AccessLog* access_log = nullptr;  // optional
  /// Test hook, called after every SGD/filter step with the carried model.
  std::function<void(std::int64_t, const ParamVector&)> on_step;
};

/// Per-batch: loss_and_grad then sgd_step. Evaluates every eval_every
/// batches and once at the task end, emitting ceil(batches/eval_every)
/// records. Both learners share the same epoch shuffle seeds, derived
/// from (config.seed, task_index, epoch).
ParamVector train_task_conventional(const ParamVector& params,
                                    const TaskSpec& task,
                                    const TrainerConfig& config,
                                    const TaskEnv& env, MetricSink& sink);

struct KalmanTaskResult {
  ParamVector params;  // the carried fused estimate
  KalmanState state;
};

/// Per batch D_k: m_k = sgd_step(estimate, grad on D_k); R from the
/// gradient of m_k on D_k; identity predict; K from the prior covariance;
/// fuse; the fused estimate is carried forward and evaluated. Metric
/// cadence matches the conventional learner. `options` overrides the
/// config-derived KalmanOptions (used by the gain-limit tests).
KalmanTaskResult train_task_kalman(
    const ParamVector& params, const KalmanState& state, const TaskSpec& task,
    const TrainerConfig& config, const TaskEnv& env, MetricSink& sink,
    const std::optional<KalmanOptions>& options = std::nullopt);

struct PretrainResult {
  ParamVector params;
  KalmanState state;
  std::int64_t steps = 0;
  double final_val_acc = 0.0;
  double final_test_acc = 0.0;
  double p0_median = 0.0;  // median initial covariance entry
};

/// Task-0 training: init_params, plain SGD via train_task_conventional,
/// then the full-train-set mean gradient seeds the filter covariance.
/// Records are emitted tagged Learner::conventional; run_experiment
/// mirrors them into the kalman series.
PretrainResult pretrain(const TrainerConfig& config, const TaskSpec& task0,
                        const DataBundle& data, MetricSink& sink,
                        AccessLog* access_log = nullptr);

enum class LearnerSelection { conventional_only, kalman_only, both };

struct ExperimentOptions {
  LearnerSelection learners = LearnerSelection::both;
  /// 0 = take KALMAN_DRIFT_THREADS from the environment, defaulting to
  /// the number of lineages. 1 forces sequential lineages.
  int threads = 0;
  bool record_access = true;
};

struct TaskOutcome {
  std::string task_name;
  int task_index = 0;
  std::int64_t end_step = 0;
  double acc_pretrain_val = 0.0;
  double acc_pretrain_test = 0.0;
  double acc_current_val = 0.0;
};

struct LearnerSeries {
  std::vector<TaskOutcome> tasks;  // tasks 1..end (task 0 is shared)
  /// End-of-task-0 accuracy minus end-of-final-task accuracy on the
  /// pretrain sets; 0 for a single-task sequence.
  double drop_pretrain_val = 0.0;
  double drop_pretrain_test = 0.0;
};

struct ExperimentReport {
  TrainerConfig config;
  std::vector<std::string> task_names;
  std::vector<MetricRecord> records;  // merged, sorted by (step, learner)
  std::int64_t pretrain_steps = 0;
  double pretrain_final_val = 0.0;
  double pretrain_final_test = 0.0;
  double p0_median = 0.0;
  std::optional<LearnerSeries> conventional;
  std::optional<LearnerSeries> kalman;
  std::vector<AccessEvent> access_events;  // sorted snapshot
  std::int64_t replay_violations = 0;
  std::optional<ParamVector> conventional_params;
  std::optional<KalmanState> kalman_state;
};

/// Runs pretraining once, clones the model into the selected lineages and
/// drives each through tasks 1..end. Lineages share only the pretrained
/// starting point and the immutable evaluation sets; task data is
/// materialized per lineage at the task boundary and freed at task end.
ExperimentReport run_experiment(const TrainerConfig& config,
                                const TaskSequence& sequence,
                                const DataBundle& data,
                                const ExperimentOptions& options = {});

}  // namespace kdrift
