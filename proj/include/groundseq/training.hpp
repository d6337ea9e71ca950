#pragma once

#include "groundseq/adam.hpp"
#include "groundseq/checkpoint.hpp"
#include "groundseq/data.hpp"
#include "groundseq/inference.hpp"
#include "groundseq/solver.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace groundseq {

enum class Stage { Pretrain, Finetune };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct TrainConfig {
  Stage stage = Stage::Pretrain;
  double learning_rate = 3e-4;
  int batch_size = 16;
  int max_steps = 1000;
  std::uint64_t seed = 0;
  std::map<Task, double> task_mix = {{Task::Ground, 0.5}, {Task::Caption, 0.5}};
  bool freeze_image_encoder = false;
  int eval_every = 0;  // checkpoint interval in steps; 0 saves only at the end
  int log_every = 10;
  int warmup_steps = 0;
  double clip_norm = 1.0;

  /// Stage defaults: pretrain lr 3e-4 over an even task mix, finetune lr 3e-5 on GROUND only.
  static TrainConfig defaults(Stage stage);
  void validate() const;
};

/// Task-mix weights out of tolerance, non-positive rates and the like.
class TrainConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CaptionTooLongError : public std::length_error {
 public:
  using std::length_error::length_error;
};

/// A task in the mix has no samples to draw from.
class TaskStarvationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or activation; carries the step it happened on.
class NanLossError : public NumericError {
 public:
  NanLossError(std::int64_t step, const std::string& what)
      : NumericError("non-finite training loss at step " + std::to_string(step) + ": " + what), step(step) {}
  std::int64_t step;
};

struct TargetSequence {
  std::vector<int> tokens;
  std::vector<std::uint8_t> mask;  // set on every position after the task token
};

/// GROUND: [BOS, TASK_GROUND, x0, y0, x1, y1, EOS]; CAPTION: [BOS, TASK_CAPTION, words..., EOS].
TargetSequence build_target_sequence(const Sample& sample, const Vocabulary& v, const CoordBinSpec& spec,
                                     int max_gen_len);

/// Teacher-forcing view of a batch: prefix rows predict the next target.
struct TeacherBatch {
  std::vector<std::vector<int>> prefixes;  // sequence minus its last token
  std::vector<int> targets;                // [batch * T], padded with PAD
  std::vector<std::uint8_t> mask;          // [batch * T]
  Index length = 0;                        // T
};

TeacherBatch make_teacher_batch(const std::vector<TargetSequence>& seqs);

struct StepResult {
  double loss = 0;
  double grad_norm = 0;
  bool clip_fired = false;
  double learning_rate = 0;
};

struct MetricRecord {
  std::int64_t step = 0;
  Stage stage = Stage::Pretrain;
  Task task = Task::Ground;
  double loss = 0;
  double learning_rate = 0;
  bool clip_fired = false;

  std::string to_json_line() const;
};

/// Mean masked cross-entropy over a batch; records on the active tape, if any.
template <typename Scalar>
Tensor<Scalar> teacher_forced_loss(const GroundingModel<Scalar>& model, const Vocabulary& v,
                                   std::span<const Sample* const> batch) {
  std::vector<const Image*> images;
  std::vector<std::vector<int>> instr;
  std::vector<TargetSequence> seqs;
  for (const Sample* s : batch) {
    images.push_back(&s->image);
    instr.push_back(instruction_ids(s->instruction, v, model.config.encoder));
    seqs.push_back(build_target_sequence(*s, v, model.config.bins, model.config.solver.max_gen_len));
  }
  const auto tb = make_teacher_batch(seqs);
  const auto mem = build_memory<Scalar>(images, instr, model.config, model.params);
  const auto logits = decoder_logits<Scalar>(mem, tb.prefixes, model.config.solver, model.params);
  return cross_entropy_masked(logits, tb.targets, tb.mask);
}

/// Owns parameters, optimizer state and the run RNG for one training stage.
template <typename Scalar>
class Trainer {
 public:
  Trainer(GroundingModel<Scalar> model, Vocabulary vocab, TrainConfig cfg)
      : model_(std::move(model)), vocab_(std::move(vocab)), cfg_(std::move(cfg)), rng_(derive_seed(cfg_.seed, "training")) {
    cfg_.validate();
    model_.params = model_.params.clone();  // the caller's tensors are never trained in place
    if (model_.config.solver.vocab_size != vocab_.size()) {
      throw CompatibilityError("model vocab_size " + std::to_string(model_.config.solver.vocab_size) +
                               " differs from vocabulary size " + std::to_string(vocab_.size()));
    }
    reset_optimizer();
  }

  /// Continues a run from a checkpoint: parameters, optimizer, step and RNG.
  static Trainer resume(const Checkpoint& ckpt, TrainConfig cfg) {
    Trainer t(GroundingModel<Scalar>{ckpt.config, ckpt.params.template cast<Scalar>()}, ckpt.vocab(), std::move(cfg));
    if (ckpt.optimizer) {
      const auto& o = *ckpt.optimizer;
      t.opt_.beta1 = o.beta1;
      t.opt_.beta2 = o.beta2;
      t.opt_.eps = o.eps;
      t.opt_.step_count = o.step_count;
      for (std::size_t i = 0; i < o.first_moment.size(); ++i) {
        t.opt_.first_moment[i] = o.first_moment[i].template cast<Scalar>();
        t.opt_.second_moment[i] = o.second_moment[i].template cast<Scalar>();
      }
    }
    t.step_ = ckpt.global_step;
    if (!ckpt.rng_state.empty()) t.rng_.set_state(ckpt.rng_state);
    return t;
  }

  const GroundingModel<Scalar>& model() const { return model_; }
  GroundingModel<Scalar>& model() { return model_; }
  const Vocabulary& vocab() const { return vocab_; }
  const TrainConfig& config() const { return cfg_; }
  std::int64_t step() const { return step_; }
  Rng& rng() { return rng_; }
  const AdamState<Scalar>& optimizer() const { return opt_; }

  void reset_optimizer() {
    std::vector<Tensor<Scalar>> ps;
    for (const auto& [name, t] : model_.params) ps.push_back(t);
    opt_ = AdamState<Scalar>::for_parameters(ps, cfg_.learning_rate);
  }

  double current_learning_rate() const {
    if (cfg_.warmup_steps <= 0) return cfg_.learning_rate;
    const double frac = static_cast<double>(step_ + 1) / cfg_.warmup_steps;
    return cfg_.learning_rate * std::min(1.0, frac);
  }

  /// Forward, masked cross-entropy, backward, clip, Adam. Advances the step counter.
  StepResult train_step(std::span<const Sample* const> batch) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    for (const Sample* s : batch) {
      if (cfg_.stage == Stage::Finetune && s->task != Task::Ground) {
        throw std::invalid_argument("train_step: finetuning accepts GROUND samples only");
      }
    }
    const std::int64_t this_step = step_ + 1;
    const bool frozen = cfg_.freeze_image_encoder;
    for (auto& [name, t] : model_.params) {
      t.set_requires_grad(!(frozen && is_image_param(name)));
      t.zero_grad();
    }

    StepResult result;
    try {
      Tape<Scalar> tape;
      TapeScope<Scalar> scope(tape);
      auto loss = forward_loss(batch);
      result.loss = static_cast<double>(loss.item());
      if (!std::isfinite(result.loss)) throw NumericError("loss is " + std::to_string(result.loss));
      backward(loss);
    } catch (const NanLossError&) {
      throw;
    } catch (const NumericError& e) {
      throw NanLossError(this_step, e.what());
    }

    std::vector<Tensor<Scalar>> params;
    std::vector<Matrix<Scalar>> grads;
    for (auto& [name, t] : model_.params) {
      params.push_back(t);
      if (t.requires_grad() && t.has_grad()) grads.push_back(t.grad());
      else grads.push_back(Matrix<Scalar>::Zero(t.rows(), t.cols()));
      t.set_requires_grad(true);
    }
    result.grad_norm = clip_global_norm<Scalar>(grads, cfg_.clip_norm);
    if (!std::isfinite(result.grad_norm)) throw NanLossError(this_step, "gradient norm is not finite");
    result.clip_fired = result.grad_norm > cfg_.clip_norm;
    result.learning_rate = current_learning_rate();
    opt_.learning_rate = result.learning_rate;
    adam_step<Scalar>(params, grads, opt_);
    step_ = this_step;
    return result;
  }

  /// Snapshot of everything needed to continue bit-for-bit.
  Checkpoint checkpoint() const {
    Checkpoint c;
    c.config = model_.config;
    c.vocab_text = vocab_.serialize();
    c.vocab_hash = vocab_.hash();
    c.params = model_.params.template cast<double>();
    OptimizerSnapshot o;
    o.learning_rate = cfg_.learning_rate;
    o.beta1 = opt_.beta1;
    o.beta2 = opt_.beta2;
    o.eps = opt_.eps;
    o.step_count = opt_.step_count;
    for (std::size_t i = 0; i < opt_.first_moment.size(); ++i) {
      o.first_moment.push_back(opt_.first_moment[i].template cast<double>());
      o.second_moment.push_back(opt_.second_moment[i].template cast<double>());
    }
    c.optimizer = std::move(o);
    c.global_step = step_;
    c.rng_state = rng_.state();
    c.metadata["stage"] = to_string(cfg_.stage);
    c.metadata["seed"] = std::to_string(cfg_.seed);
    c.metadata["scalar"] = sizeof(Scalar) == 4 ? "float32" : "float64";
    return c;
  }

  Tensor<Scalar> forward_loss(std::span<const Sample* const> batch) const {
    return teacher_forced_loss(model_, vocab_, batch);
  }

  static bool is_image_param(const std::string& name) { return name.rfind("image.", 0) == 0; }

 private:
  GroundingModel<Scalar> model_;
  Vocabulary vocab_;
  TrainConfig cfg_;
  Rng rng_;
  AdamState<Scalar> opt_;
  std::int64_t step_ = 0;
};

/// Callbacks a training run reports through.
struct TrainHooks {
  std::function<void(const MetricRecord&)> on_metric;
  std::function<void(const Checkpoint&)> on_checkpoint;
  /// Returning true stops the run after the current step (used to simulate interruption).
  std::function<bool(std::int64_t step)> should_stop;
};

/// Draws a task by the mix weights, then batch_size samples of that task with replacement.
class TaskMixSampler {
 public:
  TaskMixSampler(const std::vector<Sample>& pool, const std::map<Task, double>& mix);

  Task draw_task(Rng& rng) const;
  std::vector<const Sample*> draw_batch(Task task, int batch_size, Rng& rng) const;

 private:
  std::map<Task, double> mix_;
  std::map<Task, std::vector<const Sample*>> by_task_;
};

/// Runs trainer steps until cfg.max_steps, sampling batches per the task mix.
template <typename Scalar>
void run_training(Trainer<Scalar>& trainer, const std::vector<Sample>& pool, const TrainHooks& hooks = {}) {
  const auto& cfg = trainer.config();
  const TaskMixSampler sampler(pool, cfg.task_mix);
  while (trainer.step() < cfg.max_steps) {
    const Task task = sampler.draw_task(trainer.rng());
    const auto batch = sampler.draw_batch(task, cfg.batch_size, trainer.rng());
    const StepResult r = trainer.train_step(batch);
    const std::int64_t step = trainer.step();
    if (hooks.on_metric && (step - 1) % cfg.log_every == 0) {
      hooks.on_metric(MetricRecord{step, cfg.stage, task, r.loss, r.learning_rate, r.clip_fired});
    }
    const bool last = step == cfg.max_steps;
    if (hooks.on_checkpoint && (last || (cfg.eval_every > 0 && step % cfg.eval_every == 0))) {
      hooks.on_checkpoint(trainer.checkpoint());
    }
    if (hooks.should_stop && hooks.should_stop(step)) return;
  }
  if (cfg.max_steps == 0 && hooks.on_checkpoint) hooks.on_checkpoint(trainer.checkpoint());
}

/// Mixed-task pretraining from a fresh model.
template <typename Scalar>
Checkpoint run_pretrain(const TrainConfig& cfg, const std::vector<Sample>& pool, GroundingModel<Scalar> model,
                        const Vocabulary& vocab, const TrainHooks& hooks = {}) {
  if (cfg.stage != Stage::Pretrain) throw TrainConfigError("run_pretrain needs a PRETRAIN config");
  Trainer<Scalar> trainer(std::move(model), vocab, cfg);
  run_training(trainer, pool, hooks);
  return trainer.checkpoint();
}

/// Finetuning from `base` with a fresh optimizer and step counter. The
/// finetune task mix is GROUND only, so CAPTION samples in `pool` are never drawn.
template <typename Scalar>
Checkpoint run_finetune(const TrainConfig& cfg, const std::vector<Sample>& pool, const Checkpoint& base,
                        const ModelConfig& expected, const TrainHooks& hooks = {}) {
  if (cfg.stage != Stage::Finetune) throw TrainConfigError("run_finetune needs a FINETUNE config");
  check_architecture(base, expected);
  if (!(base.config == expected)) throw CompatibilityError("base checkpoint config differs from the finetune config");
  Trainer<Scalar> trainer(GroundingModel<Scalar>{base.config, base.params.template cast<Scalar>()}, base.vocab(), cfg);
  run_training(trainer, pool, hooks);
  return trainer.checkpoint();
}

/// Continues an interrupted run of either stage.
template <typename Scalar>
Checkpoint resume_training(const TrainConfig& cfg, const std::vector<Sample>& pool, const Checkpoint& from,
                           const TrainHooks& hooks = {}) {
  auto trainer = Trainer<Scalar>::resume(from, cfg);
  run_training(trainer, pool, hooks);
  return trainer.checkpoint();
}

}  // namespace groundseq
