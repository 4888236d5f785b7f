#include "kdrift/trainer.hpp"

#include <algorithm>
#include <cstdlib>
#include <future>
#include <utility>

#include "kdrift/errors.hpp"
#include "kdrift/rng.hpp"

namespace kdrift {

namespace {

std::uint64_t epoch_seed(std::uint64_t base, int task_index, int epoch) {
  // Shared by both lineages so they see identical batch schedules.
  return mix_seed(base, std::uint64_t(task_index) * 1000003ULL +
                            std::uint64_t(epoch));
}

void check_env(const TaskEnv& env) {
  if (!env.train || !env.current_val || !env.pretrain_val ||
      !env.pretrain_test) {
    throw std::invalid_argument("task env: missing dataset");
  }
}

/// Shared metric cadence: evaluate after every eval_every-th batch and at
/// the task end, which yields exactly ceil(total_batches / eval_every)
/// records per task.
class EvalEmitter {
 public:
  EvalEmitter(const TrainerConfig& config, const TaskEnv& env,
              MetricSink& sink, std::int64_t total_batches)
      : config_(config), env_(env), sink_(sink), total_(total_batches) {}

  void after_batch(std::int64_t step, const ParamVector& params, double loss) {
    ++done_;
    if (env_.on_step) env_.on_step(step, params);
    if (done_ % config_.eval_every == 0 || done_ == total_) {
      emit(step, params, loss);
    }
  }

 private:
  void emit(std::int64_t step, const ParamVector& params, double loss) {
    MetricRecord rec;
    rec.global_step = step;
    rec.task_index = env_.task_index;
    rec.learner = env_.lineage;
    rec.loss = loss;
    rec.acc_pretrain_val =
        eval_split(params, *env_.pretrain_val, 0, Split::val, step);
    rec.acc_pretrain_test =
        eval_split(params, *env_.pretrain_test, 0, Split::test, step);
    rec.acc_current_val =
        env_.current_val == env_.pretrain_val
            ? rec.acc_pretrain_val
            : eval_split(params, *env_.current_val, env_.task_index,
                         Split::val, step);
    sink_.append(rec);
  }

  double eval_split(const ParamVector& params, const Dataset& dataset,
                    int data_task, Split split, std::int64_t step) {
    if (env_.access_log) {
      env_.access_log->record(
          {env_.lineage, data_task, split, env_.task_index, step});
    }
    return evaluate(config_.arch, params, dataset);
  }

  const TrainerConfig& config_;
  const TaskEnv& env_;
  MetricSink& sink_;
  std::int64_t total_;
  std::int64_t done_ = 0;
};

void log_train_read(const TaskEnv& env, std::int64_t step) {
  if (env.access_log) {
    env.access_log->record(
        {env.lineage, env.task_index, Split::train, env.task_index, step});
  }
}

int resolve_threads(const ExperimentOptions& options, int lineages) {
  if (options.threads > 0) return options.threads;
  if (const char* raw = std::getenv("KALMAN_DRIFT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(raw, &end, 10);
    if (end != raw && *end == '\0' && v >= 1) return static_cast<int>(v);
  }
  return lineages;
}

double covariance_median(const Eigen::ArrayXd& cov) {
  std::vector<double> values(cov.data(), cov.data() + cov.size());
  const std::size_t mid = (values.size() - 1) / 2;  // lower median
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  return values[mid];
}

}  // namespace

const char* learner_name(Learner learner) {
  return learner == Learner::conventional ? "conventional" : "kalman";
}

const char* split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

void TrainerConfig::validate() const {
  try {
    arch.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("arch", e.what());
  }
  if (!(lr > 0.0)) throw ConfigError("lr", "must be positive");
  if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (epochs_per_task < 1) throw ConfigError("epochs_per_task", "must be >= 1");
  if (!(noise_floor > 0.0)) throw ConfigError("noise_floor", "must be positive");
  if (eval_every < 1) throw ConfigError("eval_every", "must be >= 1");
}

bool is_replay_violation(const AccessEvent& event) {
  if (event.split == Split::train) {
    return event.active_task != event.data_task;
  }
  // Task-0 validation and test are the run-long measurement sets.
  if (event.data_task == 0) return false;
  return event.active_task != event.data_task;
}

std::int64_t count_replay_violations(const std::vector<AccessEvent>& events) {
  return std::count_if(events.begin(), events.end(), is_replay_violation);
}

ParamVector train_task_conventional(const ParamVector& params,
                                    const TaskSpec& task,
                                    const TrainerConfig& config,
                                    const TaskEnv& env, MetricSink& sink) {
  config.validate();
  check_env(env);
  if (task.epochs < 1) {
    throw ConfigError("epochs_per_task", "must be >= 1");
  }

  ParamVector current = params;
  const std::int64_t total =
      num_batches(env.train->size(), config.batch_size) * task.epochs;
  EvalEmitter emitter(config, env, sink, total);
  std::int64_t step = env.start_step;

  for (int epoch = 0; epoch < task.epochs; ++epoch) {
    BatchStream stream(*env.train, config.batch_size,
                       epoch_seed(config.seed, env.task_index, epoch));
    while (auto batch = stream.next()) {
      log_train_read(env, step + 1);
      const LossGrad lg = loss_and_grad(config.arch, current, *batch);
      current = sgd_step(current, lg.grad, config.lr);
      ++step;
      emitter.after_batch(step, current, lg.loss);
    }
  }
  return current;
}

KalmanTaskResult train_task_kalman(
    const ParamVector& params, const KalmanState& state, const TaskSpec& task,
    const TrainerConfig& config, const TaskEnv& env, MetricSink& sink,
    const std::optional<KalmanOptions>& options) {
  config.validate();
  check_env(env);
  if (task.epochs < 1) {
    throw ConfigError("epochs_per_task", "must be >= 1");
  }
  if (state.estimate.size() != params.size() ||
      state.covariance.size() != params.size()) {
    throw std::invalid_argument("kalman state/params shape mismatch");
  }
  const KalmanOptions opts = options.value_or(config.kalman_options());
  opts.validate();

  // The estimate is the carried model; `params` seeds it.
  KalmanState current{params, state.covariance};
  const std::int64_t total =
      num_batches(env.train->size(), config.batch_size) * task.epochs;
  EvalEmitter emitter(config, env, sink, total);
  std::int64_t step = env.start_step;

  for (int epoch = 0; epoch < task.epochs; ++epoch) {
    BatchStream stream(*env.train, config.batch_size,
                       epoch_seed(config.seed, env.task_index, epoch));
    while (auto batch = stream.next()) {
      log_train_read(env, step + 1);
      const LossGrad lg = loss_and_grad(config.arch, current.estimate, *batch);
      const ParamVector measured =
          sgd_step(current.estimate, lg.grad, config.lr);
      const NoiseVector r =
          measurement_noise(config.arch, measured, *batch, opts);
      KalmanState predicted = kalman_predict(std::move(current));
      current = kalman_update(predicted, measured, r, opts.covariance_floor);
      ++step;
      emitter.after_batch(step, current.estimate, lg.loss);
    }
  }
  return {current.estimate, std::move(current)};
}

PretrainResult pretrain(const TrainerConfig& config, const TaskSpec& task0,
                        const DataBundle& data, MetricSink& sink,
                        AccessLog* access_log) {
  config.validate();
  if (task0.transform.kind != Transform::Kind::identity) {
    throw ConfigError("tasks", "pretrain task must use the identity transform");
  }

  TaskEnv env;
  env.train = &data.train;
  env.current_val = &data.val;
  env.pretrain_val = &data.val;
  env.pretrain_test = &data.test;
  env.task_index = 0;
  env.start_step = 0;
  env.lineage = Learner::conventional;
  env.access_log = access_log;

  ParamVector params = init_params(config.arch, config.seed);
  params = train_task_conventional(params, task0, config, env, sink);

  const std::int64_t steps =
      num_batches(data.train.size(), config.batch_size) * task0.epochs;
  if (access_log) {
    access_log->record(
        {Learner::conventional, 0, Split::train, 0, steps});
  }
  const LossGrad full = dataset_loss_and_grad(config.arch, params, data.train);
  const KalmanState state =
      init_kalman(params, full.grad, config.kalman_options());

  PretrainResult result;
  result.params = std::move(params);
  result.state = state;
  result.steps = steps;
  if (access_log) {
    access_log->record({Learner::conventional, 0, Split::val, 0, steps});
    access_log->record({Learner::conventional, 0, Split::test, 0, steps});
  }
  result.final_val_acc = evaluate(config.arch, result.params, data.val);
  result.final_test_acc = evaluate(config.arch, result.params, data.test);
  result.p0_median = covariance_median(state.covariance);
  return result;
}

ExperimentReport run_experiment(const TrainerConfig& config,
                                const TaskSequence& sequence,
                                const DataBundle& data,
                                const ExperimentOptions& options) {
  config.validate();
  sequence.validate();
  data.train.validate();
  data.val.validate();
  data.test.validate();
  if (data.train.dim() != config.arch.input_dim()) {
    throw ConfigError("arch",
                      "input dim " + std::to_string(config.arch.input_dim()) +
                          " does not match dataset dim " +
                          std::to_string(data.train.dim()));
  }
  const int max_label = *std::max_element(data.train.labels.begin(),
                                          data.train.labels.end());
  if (max_label >= config.arch.num_classes()) {
    throw ConfigError("arch", "fewer output classes than dataset labels");
  }

  const bool run_conv = options.learners != LearnerSelection::kalman_only;
  const bool run_kal = options.learners != LearnerSelection::conventional_only;

  AccessLog log;
  AccessLog* logp = options.record_access ? &log : nullptr;

  VectorSink pretrain_sink;
  const PretrainResult pre =
      pretrain(config, sequence.tasks.front(), data, pretrain_sink, logp);
  const std::vector<MetricRecord> pretrain_records = pretrain_sink.take();

  struct LineageResult {
    std::vector<MetricRecord> records;
    LearnerSeries series;
    ParamVector final_params;
    KalmanState final_state;
  };

  auto run_lineage = [&](Learner lineage) -> LineageResult {
    LineageResult out;
    ParamVector params = pre.params;
    KalmanState state = pre.state;
    std::int64_t step = pre.steps;
    for (std::size_t t = 1; t < sequence.tasks.size(); ++t) {
      const TaskSpec& task = sequence.tasks[t];
      // Materialized fresh per task and freed at task end; nothing else
      // keeps a task's training arrays alive.
      const Dataset task_train = apply_transform(data.train, task.transform);
      const Dataset task_val = apply_transform(data.val, task.transform);

      TaskEnv env;
      env.train = &task_train;
      env.current_val = &task_val;
      env.pretrain_val = &data.val;
      env.pretrain_test = &data.test;
      env.task_index = static_cast<int>(t);
      env.start_step = step;
      env.lineage = lineage;
      env.access_log = logp;

      VectorSink task_sink;
      if (lineage == Learner::conventional) {
        params = train_task_conventional(params, task, config, env, task_sink);
      } else {
        KalmanTaskResult res =
            train_task_kalman(params, state, task, config, env, task_sink);
        params = std::move(res.params);
        state = std::move(res.state);
      }
      std::vector<MetricRecord> task_records = task_sink.take();
      step += num_batches(task_train.size(), config.batch_size) * task.epochs;

      const MetricRecord& last = task_records.back();
      TaskOutcome outcome;
      outcome.task_name = task.name;
      outcome.task_index = static_cast<int>(t);
      outcome.end_step = step;
      outcome.acc_pretrain_val = last.acc_pretrain_val;
      outcome.acc_pretrain_test = last.acc_pretrain_test;
      outcome.acc_current_val = last.acc_current_val;
      out.series.tasks.push_back(outcome);

      out.records.insert(out.records.end(), task_records.begin(),
                         task_records.end());
    }
    if (!out.series.tasks.empty()) {
      out.series.drop_pretrain_val =
          pre.final_val_acc - out.series.tasks.back().acc_pretrain_val;
      out.series.drop_pretrain_test =
          pre.final_test_acc - out.series.tasks.back().acc_pretrain_test;
    }
    out.final_params = std::move(params);
    out.final_state = std::move(state);
    return out;
  };

  const int lineages = (run_conv ? 1 : 0) + (run_kal ? 1 : 0);
  const int threads = resolve_threads(options, lineages);

  LineageResult conv_res, kal_res;
  if (run_conv && run_kal && threads >= 2) {
    auto kal_future =
        std::async(std::launch::async, run_lineage, Learner::kalman);
    conv_res = run_lineage(Learner::conventional);
    kal_res = kal_future.get();
  } else {
    if (run_conv) conv_res = run_lineage(Learner::conventional);
    if (run_kal) kal_res = run_lineage(Learner::kalman);
  }

  ExperimentReport report;
  report.config = config;
  for (const TaskSpec& t : sequence.tasks) report.task_names.push_back(t.name);
  report.pretrain_steps = pre.steps;
  report.pretrain_final_val = pre.final_val_acc;
  report.pretrain_final_test = pre.final_test_acc;
  report.p0_median = pre.p0_median;

  // Task-0 progression is shared; mirror it into each selected series.
  for (const MetricRecord& rec : pretrain_records) {
    if (run_conv) {
      MetricRecord r = rec;
      r.learner = Learner::conventional;
      report.records.push_back(r);
    }
    if (run_kal) {
      MetricRecord r = rec;
      r.learner = Learner::kalman;
      report.records.push_back(r);
    }
  }
  report.records.insert(report.records.end(), conv_res.records.begin(),
                        conv_res.records.end());
  report.records.insert(report.records.end(), kal_res.records.begin(),
                        kal_res.records.end());
  std::sort(report.records.begin(), report.records.end(),
            [](const MetricRecord& a, const MetricRecord& b) {
              if (a.global_step != b.global_step)
                return a.global_step < b.global_step;
              if (a.task_index != b.task_index)
                return a.task_index < b.task_index;
              return static_cast<int>(a.learner) < static_cast<int>(b.learner);
            });

  if (run_conv) {
    report.conventional = std::move(conv_res.series);
    report.conventional_params = std::move(conv_res.final_params);
  }
  if (run_kal) {
    report.kalman = std::move(kal_res.series);
    report.kalman_state = std::move(kal_res.final_state);
  }

  report.access_events = log.snapshot();
  std::sort(report.access_events.begin(), report.access_events.end(),
            [](const AccessEvent& a, const AccessEvent& b) {
              if (a.global_step != b.global_step)
                return a.global_step < b.global_step;
              if (a.lineage != b.lineage)
                return static_cast<int>(a.lineage) < static_cast<int>(b.lineage);
              if (a.data_task != b.data_task) return a.data_task < b.data_task;
              if (a.split != b.split)
                return static_cast<int>(a.split) < static_cast<int>(b.split);
              return a.active_task < b.active_task;
            });
  report.replay_violations = count_replay_violations(report.access_events);
  return report;
}

}  // namespace kdrift
