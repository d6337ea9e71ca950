#include "commands.hpp"

#include "groundseq/checkpoint.hpp"
#include "groundseq/data.hpp"
#include "groundseq/eval.hpp"
#include "groundseq/inference.hpp"
#include "groundseq/training.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace groundseq::cli {

namespace fs = std::filesystem;

namespace {

/// Thrown for bad flag combinations discovered after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// Maps library exceptions onto the exit-code contract.
template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const CompatibilityError& e) {
    err << "incompatible: " << e.what() << "\n";
    return kCompat;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
  if (!f) throw std::runtime_error("short write to " + p.string());
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

ModelConfig model_config_for(const RunConfig& rc, const DatasetManifest& m, const Vocabulary& v) {
  ModelConfig mc = rc.model;
  mc.encoder.frame_width = m.frame_w;
  mc.encoder.frame_height = m.frame_h;
  mc.bins = CoordBinSpec{m.num_bins, static_cast<double>(m.frame_w), static_cast<double>(m.frame_h)};
  mc.solver.vocab_size = v.size();
  try {
    mc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return mc;
}

template <typename Scalar>
Checkpoint train_stage(const TrainArgs& a, const RunConfig& rc, const ModelConfig& mc, const Dataset& ds,
                       const std::optional<Checkpoint>& base, std::ostream& out) {
  const auto pool = ds.load_split(a.split);
  std::size_t n_ground = 0;
  for (const auto& s : pool) n_ground += s.task == Task::Ground;

  const bool resuming = a.resume.has_value();
  ensure_parent(a.ckpt_out);
  std::ofstream metrics(metrics_path(a.ckpt_out), resuming ? std::ios::app : std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + metrics_path(a.ckpt_out).string());
  std::ofstream log(log_path(a.ckpt_out), resuming ? std::ios::app : std::ios::trunc);
  RunConfig effective = rc;
  effective.model = mc;
  log << "[" << timestamp() << "] start " << to_string(rc.train.stage) << (resuming ? " (resume)" : "") << "\n"
      << effective.to_text() << "data = " << ds.dir().string() << "\nsplit = " << a.split << "\n";

  TrainHooks hooks;
  hooks.on_metric = [&](const MetricRecord& m) {
    metrics << m.to_json_line() << '\n';
    metrics.flush();
  };
  hooks.on_checkpoint = [&](const Checkpoint& c) {
    const bool last = c.global_step == rc.train.max_steps;
    const fs::path p = last ? a.ckpt_out : fs::path(a.ckpt_out.string() + ".step" + std::to_string(c.global_step));
    save_checkpoint(p, c);
    log << "[" << timestamp() << "] checkpoint step " << c.global_step << " -> " << p.string() << "\n";
  };
  hooks.should_stop = [&](std::int64_t) { return false; };

  Checkpoint result;
  if (resuming) {
    const auto from = load_checkpoint(*a.resume);
    check_architecture(from, mc);
    if (!(from.config == mc)) throw CompatibilityError("resume checkpoint config differs from the run config");
    check_vocab(from, ds.vocab());
    result = resume_training<Scalar>(rc.train, pool, from, hooks);
  } else if (rc.train.stage == Stage::Pretrain) {
    auto model = GroundingModel<Scalar>::initialize(mc, rc.train.seed);
    result = run_pretrain<Scalar>(rc.train, pool, std::move(model), ds.vocab(), hooks);
  } else {
    result = run_finetune<Scalar>(rc.train, pool, *base, mc, hooks);
  }
  log << "[" << timestamp() << "] done at step " << result.global_step << "\n";
  out << "stage=" << to_string(rc.train.stage) << " steps=" << result.global_step << " samples=" << pool.size()
      << " ground=" << n_ground << "\n";
  out << "checkpoint=" << a.ckpt_out.string() << "\n";
  return result;
}

int run_training_command(const TrainArgs& a, Stage stage, std::ostream& out) {
  if (stage == Stage::Finetune && !a.init && !a.resume) throw UsageError("finetune requires --init CKPT");
  const RunConfig rc = effective_run_config(a, stage);
  const Dataset ds = Dataset::open(a.data);
  if (!ds.has_split(a.split)) throw DatasetError("dataset has no split '" + a.split + "'");
  const ModelConfig mc = model_config_for(rc, ds.manifest(), ds.vocab());

  std::optional<Checkpoint> base;
  if (stage == Stage::Finetune && !a.resume) {
    base = load_checkpoint(*a.init);
    check_vocab(*base, ds.vocab());
    check_architecture(*base, mc);
  }
  if (rc.precision == Precision::Float32) train_stage<float>(a, rc, mc, ds, base, out);
  else train_stage<double>(a, rc, mc, ds, base, out);
  return kOk;
}

}  // namespace

fs::path metrics_path(const fs::path& ckpt_out) { return fs::path(ckpt_out.string() + ".metrics.jsonl"); }
fs::path log_path(const fs::path& ckpt_out) { return fs::path(ckpt_out.string() + ".log"); }

RunConfig effective_run_config(const TrainArgs& a, Stage stage) {
  KeyValues kv;
  if (a.config) kv = load_key_values(*a.config);
  for (const auto& o : a.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    const auto parsed = parse_key_values(o);
    for (const auto& [k, v] : parsed) kv[k] = v;
  }
  if (a.seed) kv["seed"] = std::to_string(*a.seed);
  if (a.max_steps) kv["max_steps"] = std::to_string(*a.max_steps);
  return RunConfig::from_key_values(kv, stage);
}

int cmd_gen_data(const GenDataArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    GenerateConfig cfg;
    cfg.n = a.n;
    cfg.seed = a.seed;
    cfg.caption_frac = a.caption_frac;
    cfg.min_objects = a.min_objects;
    cfg.max_objects = a.max_objects;
    cfg.num_bins = a.num_bins;
    GeneratedDataset g;
    try {
      g = generate_dataset(cfg);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    write_dataset(g.manifest, g.samples, g.vocab, a.out);
    std::size_t captions = 0;
    for (const auto& s : g.samples) captions += s.task == Task::Caption;
    out << "wrote " << g.samples.size() << " samples to " << a.out.string() << "\n";
    out << "train=" << g.manifest.splits["train"].size() << " val=" << g.manifest.splits["val"].size()
        << " test=" << g.manifest.splits["test"].size() << "\n";
    out << "ground=" << g.samples.size() - captions << " caption=" << captions << "\n";
    out << "vocab_size=" << g.vocab.size() << " vocab_hash=" << g.vocab.hash_hex() << "\n";
    return kOk;
  });
}

int cmd_pretrain(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] { return run_training_command(a, Stage::Pretrain, out); });
}

int cmd_finetune(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] { return run_training_command(a, Stage::Finetune, out); });
}

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (a.beam < 1) throw UsageError("--beam must be at least 1");
    const Dataset ds = Dataset::open(a.data);
    if (!ds.has_split(a.split)) {
      std::string names;
      for (const auto& n : ds.split_names()) names += (names.empty() ? "" : ", ") + n;
      throw DatasetError("no split named '" + a.split + "'; available splits: " + names);
    }
    const Checkpoint ckpt = load_checkpoint(a.ckpt);
    check_vocab(ckpt, ds.vocab());
    if (ckpt.config.bins.num_bins != ds.manifest().num_bins ||
        ckpt.config.encoder.frame_width != ds.manifest().frame_w ||
        ckpt.config.encoder.frame_height != ds.manifest().frame_h) {
      throw CompatibilityError("checkpoint frame or bin grid differs from the dataset");
    }
    const GroundingModel<double> model{ckpt.config, ckpt.params};
    const Vocabulary vocab = ckpt.vocab();

    std::vector<Sample> samples;
    for (auto& s : ds.load_split(a.split)) {
      if (s.task == Task::Ground) samples.push_back(std::move(s));
    }
    const auto preds = predict_samples(model, vocab, std::span<const Sample>(samples), a.beam);
    const auto gts = ground_truths(samples);
    const auto result = evaluate(preds, gts, a.threshold);

    fs::create_directories(a.out);
    write_predictions(a.out / "predictions.jsonl", preds);
    write_eval_result(a.out / "eval_result.json", result);
    if (a.render) {
      fs::create_directories(a.out / "overlays");
      for (std::size_t i = 0; i < samples.size(); ++i) {
        write_text(a.out / "overlays" / (samples[i].sample_id + ".svg"), render_overlay(samples[i], preds[i]));
      }
    }
    out << "split=" << a.split << " n_samples=" << result.n_samples << " n_correct=" << result.n_correct
        << " n_malformed=" << result.n_malformed << " mean_iou=" << fixed4(result.mean_iou) << "\n";
    out << "AP50=" << fixed4(result.ap50) << "\n";
    return kOk;
  });
}

int cmd_infer(const InferArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (a.beam < 1) throw UsageError("--beam must be at least 1");
    const Image src = read_ppm(a.image);
    const Checkpoint ckpt = load_checkpoint(a.ckpt);
    const GroundingModel<double> model{ckpt.config, ckpt.params};
    const Vocabulary vocab = ckpt.vocab();
    const auto lb = Letterbox::fit(src.width, src.height, ckpt.config.encoder.frame_width,
                                   ckpt.config.encoder.frame_height);
    const Image frame = letterbox_image(src, lb);
    const auto result = predict_grounding(model, vocab, frame, a.instruction, a.beam);
    out << render_box_text(lb.to_source(result.box)) << "\n";
    out << "wellformed=" << (result.wellformed ? "true" : "false") << "\n";
    if (a.render) {
      ensure_parent(*a.render);
      write_text(*a.render, render_overlay(frame, a.instruction, std::nullopt, make_prediction("infer", result)));
    }
    return kOk;
  });
}

int cmd_leaderboard(const LeaderboardArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::vector<LeaderboardRow> rows;
    if (a.input) {
      std::ifstream f(*a.input, std::ios::binary);
      if (!f) throw std::runtime_error("cannot read " + a.input->string());
      std::ostringstream os;
      os << f.rdbuf();
      rows = leaderboard_from_json(os.str());
    } else {
      rows = talk2car_leaderboard();
    }
    for (const auto& spec : a.add) {
      const auto eq = spec.rfind('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("--add expects NAME=AP50");
      try {
        rows.push_back({spec.substr(0, eq), std::stod(spec.substr(eq + 1))});
      } catch (const std::logic_error&) {
        throw UsageError("--add expects a numeric AP50 in '" + spec + "'");
      }
    }
    LeaderboardTable table;
    try {
      table = leaderboard_table(std::move(rows));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    out << table.text;
    if (a.json_out) write_text(*a.json_out, table.json);
    return kOk;
  });
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Instruction grounding as sequence generation: data, training, evaluation"};
  app.name("groundseq");
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic grounding dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--n", gen.n, "Number of samples");
  gen_cmd->add_option("--seed", gen.seed, "Seed");
  gen_cmd->add_option("--caption-frac", gen.caption_frac, "Fraction of CAPTION samples");
  gen_cmd->add_option("--min-objects", gen.min_objects, "Fewest objects per scene");
  gen_cmd->add_option("--max-objects", gen.max_objects, "Most objects per scene");
  gen_cmd->add_option("--num-bins", gen.num_bins, "Coordinate bins per axis");

  TrainArgs pre, fine;
  std::uint64_t pre_seed = 0, fine_seed = 0;
  int pre_steps = 0, fine_steps = 0;
  auto add_train_flags = [](CLI::App* cmd, TrainArgs& t, std::uint64_t& seed, int& steps) {
    cmd->add_option("--data", t.data, "Dataset directory")->required();
    cmd->add_option("--config", t.config, "key = value config file");
    cmd->add_option("--ckpt-out", t.ckpt_out, "Checkpoint to write")->required();
    cmd->add_option("--resume", t.resume, "Continue an interrupted run from this checkpoint");
    cmd->add_option("--seed", seed, "Seed (overrides the config file)");
    cmd->add_option("--max-steps", steps, "Step budget (overrides the config file)");
    cmd->add_option("--set", t.overrides, "key=value override, repeatable");
    cmd->add_option("--split", t.split, "Split to train on");
  };
  auto* pre_cmd = app.add_subcommand("pretrain", "Mixed-task pretraining");
  add_train_flags(pre_cmd, pre, pre_seed, pre_steps);
  auto* fine_cmd = app.add_subcommand("finetune", "GROUND-only finetuning from a pretrained checkpoint");
  add_train_flags(fine_cmd, fine, fine_seed, fine_steps);
  fine_cmd->add_option("--init", fine.init, "Base checkpoint");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  eval_cmd->add_option("--split", ev.split, "Split name");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();
  eval_cmd->add_option("--beam", ev.beam, "Beam width (1 = greedy)");
  eval_cmd->add_option("--threshold", ev.threshold, "IoU threshold");
  eval_cmd->add_flag("--render", ev.render, "Write an SVG overlay per sample");

  InferArgs inf;
  auto* infer_cmd = app.add_subcommand("infer", "Ground one instruction in one image");
  infer_cmd->add_option("--image", inf.image, "PPM image")->required();
  infer_cmd->add_option("--instruction", inf.instruction, "Instruction text")->required();
  infer_cmd->add_option("--ckpt", inf.ckpt, "Checkpoint")->required();
  infer_cmd->add_option("--render", inf.render, "SVG overlay path");
  infer_cmd->add_option("--beam", inf.beam, "Beam width (1 = greedy)");

  LeaderboardArgs lb;
  auto* lb_cmd = app.add_subcommand("leaderboard", "Print the Talk2Car AP50 leaderboard");
  lb_cmd->add_option("--input", lb.input, "JSON list of {model, ap50} rows");
  lb_cmd->add_option("--json-out", lb.json_out, "Write the sorted table as JSON");
  lb_cmd->add_option("--add", lb.add, "Extra NAME=AP50 row, repeatable");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  }

  if (*gen_cmd) return cmd_gen_data(gen, out, err);
  if (*pre_cmd) {
    if (pre_cmd->count("--seed")) pre.seed = pre_seed;
    if (pre_cmd->count("--max-steps")) pre.max_steps = pre_steps;
    return cmd_pretrain(pre, out, err);
  }
  if (*fine_cmd) {
    if (fine_cmd->count("--seed")) fine.seed = fine_seed;
    if (fine_cmd->count("--max-steps")) fine.max_steps = fine_steps;
    return cmd_finetune(fine, out, err);
  }
  if (*eval_cmd) return cmd_eval(ev, out, err);
  if (*infer_cmd) return cmd_infer(inf, out, err);
  if (*lb_cmd) return cmd_leaderboard(lb, out, err);
  return kUsage;
}

}  // namespace groundseq::cli
