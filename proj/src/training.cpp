#include "groundseq/training.hpp"

#include <json.hpp>

#include <cmath>

namespace groundseq {

std::string to_string(Stage s) { return s == Stage::Pretrain ? "PRETRAIN" : "FINETUNE"; }

Stage stage_from_string(const std::string& s) {
  if (s == "PRETRAIN") return Stage::Pretrain;
  if (s == "FINETUNE") return Stage::Finetune;
  throw TrainConfigError("unknown stage '" + s + "'");
}

TrainConfig TrainConfig::defaults(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  if (stage == Stage::Finetune) {
    c.learning_rate = 3e-5;
    c.task_mix = {{Task::Ground, 1.0}};
  }
  return c;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw TrainConfigError("learning_rate must be positive");
  if (batch_size < 1) throw TrainConfigError("batch_size must be at least 1");
  if (max_steps < 0) throw TrainConfigError("max_steps must be non-negative");
  if (log_every < 1) throw TrainConfigError("log_every must be at least 1");
  if (eval_every < 0) throw TrainConfigError("eval_every must be non-negative");
  if (warmup_steps < 0) throw TrainConfigError("warmup_steps must be non-negative");
  if (!(clip_norm > 0)) throw TrainConfigError("clip_norm must be positive");
  if (task_mix.empty()) throw TrainConfigError("task_mix is empty");
  double total = 0;
  for (const auto& [task, w] : task_mix) {
    if (!(w > 0)) throw TrainConfigError("task_mix weight for " + to_string(task) + " must be positive");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw TrainConfigError("task_mix weights must sum to 1");
  if (stage == Stage::Finetune && (task_mix.size() != 1 || !task_mix.count(Task::Ground))) {
    throw TrainConfigError("finetuning trains on GROUND only");
  }
}

TargetSequence build_target_sequence(const Sample& sample, const Vocabulary& v, const CoordBinSpec& spec,
                                     int max_gen_len) {
  TargetSequence seq;
  if (sample.task == Task::Ground) {
    if (!sample.target_box) throw std::invalid_argument("GROUND sample '" + sample.sample_id + "' has no target box");
    const auto box = encode_box(*sample.target_box, spec, v);
    seq.tokens = {Vocabulary::kBos, Vocabulary::kTaskGround, box[0], box[1], box[2], box[3], Vocabulary::kEos};
  } else {
    if (!sample.caption) throw std::invalid_argument("CAPTION sample '" + sample.sample_id + "' has no caption");
    const auto words = encode_text(*sample.caption, v);
    if (static_cast<int>(words.size()) > max_gen_len - 3) {
      throw CaptionTooLongError("caption of sample '" + sample.sample_id + "' has " + std::to_string(words.size()) +
                                " tokens, limit is " + std::to_string(max_gen_len - 3));
    }
    seq.tokens = {Vocabulary::kBos, Vocabulary::kTaskCaption};
    seq.tokens.insert(seq.tokens.end(), words.begin(), words.end());
    seq.tokens.push_back(Vocabulary::kEos);
  }
  seq.mask.assign(seq.tokens.size(), 1);
  seq.mask[0] = seq.mask[1] = 0;
  return seq;
}

TeacherBatch make_teacher_batch(const std::vector<TargetSequence>& seqs) {
  TeacherBatch tb;
  for (const auto& s : seqs) {
    if (s.tokens.size() < 2 || s.tokens.size() != s.mask.size()) {
      throw std::invalid_argument("make_teacher_batch: malformed target sequence");
    }
    tb.length = std::max<Index>(tb.length, static_cast<Index>(s.tokens.size()) - 1);
  }
  const Index batch = static_cast<Index>(seqs.size());
  tb.targets.assign(batch * tb.length, Vocabulary::kPad);
  tb.mask.assign(batch * tb.length, 0);
  for (Index b = 0; b < batch; ++b) {
    const auto& s = seqs[b];
    tb.prefixes.emplace_back(s.tokens.begin(), s.tokens.end() - 1);
    for (std::size_t t = 0; t + 1 < s.tokens.size(); ++t) {
      tb.targets[b * tb.length + t] = s.tokens[t + 1];
      tb.mask[b * tb.length + t] = s.mask[t + 1];
    }
  }
  return tb;
}

std::string MetricRecord::to_json_line() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["stage"] = to_string(stage);
  j["task"] = to_string(task);
  j["loss"] = loss;
  j["lr"] = learning_rate;
  j["clip_fired"] = clip_fired;
  return j.dump();
}

TaskMixSampler::TaskMixSampler(const std::vector<Sample>& pool, const std::map<Task, double>& mix) : mix_(mix) {
  for (const auto& [task, w] : mix_) by_task_[task];
  for (const auto& s : pool) {
    const auto it = by_task_.find(s.task);
    if (it != by_task_.end()) it->second.push_back(&s);
  }
  for (const auto& [task, samples] : by_task_) {
    if (samples.empty()) {
      throw TaskStarvationError("task " + to_string(task) + " has weight " + std::to_string(mix_.at(task)) +
                                " but no samples");
    }
  }
}

Task TaskMixSampler::draw_task(Rng& rng) const {
  const double u = rng.uniform();
  double acc = 0;
  for (const auto& [task, w] : mix_) {
    acc += w;
    if (u < acc) return task;
  }
  return mix_.rbegin()->first;
}

std::vector<const Sample*> TaskMixSampler::draw_batch(Task task, int batch_size, Rng& rng) const {
  const auto& pool = by_task_.at(task);
  std::vector<const Sample*> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    out.push_back(pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))]);
  }
  return out;
}

}  // namespace groundseq
