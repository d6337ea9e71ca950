#include "groundseq/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace groundseq {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

int to_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing text");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // shortest form that reads back exactly
  for (int prec = 1; prec <= 17; ++prec) {
    char tmp[40];
    std::snprintf(tmp, sizeof tmp, "%.*g", prec, v);
    if (std::stod(tmp) == v) return tmp;
  }
  return buf;
}

}  // namespace

KeyValues parse_key_values(std::string_view text) {
  KeyValues kv;
  std::istringstream is{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, value).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
  }
  return kv;
}

KeyValues load_key_values(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read config file " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  return parse_key_values(os.str());
}

std::map<Task, double> parse_task_mix(const std::string& s) {
  std::map<Task, double> mix;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, ',')) {
    const auto colon = part.find(':');
    if (colon == std::string::npos) throw ConfigError("task_mix entries look like GROUND:0.5");
    const std::string task = trim(std::string_view(part).substr(0, colon));
    const double w = to_double("task_mix", trim(std::string_view(part).substr(colon + 1)));
    try {
      if (!mix.emplace(task_from_string(task), w).second) throw ConfigError("task_mix names " + task + " twice");
    } catch (const DatasetError& e) {
      throw ConfigError(std::string("task_mix: ") + e.what());
    }
  }
  if (mix.empty()) throw ConfigError("task_mix is empty");
  return mix;
}

std::string task_mix_string(const std::map<Task, double>& mix) {
  std::string out;
  for (const auto& [task, w] : mix) {
    if (!out.empty()) out += ',';
    out += to_string(task) + ":" + fmt_double(w);
  }
  return out;
}

RunConfig RunConfig::from_key_values(const KeyValues& kv, Stage stage) {
  RunConfig rc;
  rc.train = TrainConfig::defaults(stage);
  auto& e = rc.model.encoder;
  auto& s = rc.model.solver;
  auto& t = rc.train;

  const std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters = {
      {"d_model", [&](auto& k, auto& v) { e.d_model = s.d_model = to_int(k, v); }},
      {"n_heads", [&](auto& k, auto& v) { e.n_heads = s.n_heads = to_int(k, v); }},
      {"n_layers_img", [&](auto& k, auto& v) { e.n_layers_img = to_int(k, v); }},
      {"n_layers_txt", [&](auto& k, auto& v) { e.n_layers_txt = to_int(k, v); }},
      {"n_enc_layers", [&](auto& k, auto& v) { s.n_enc_layers = to_int(k, v); }},
      {"n_dec_layers", [&](auto& k, auto& v) { s.n_dec_layers = to_int(k, v); }},
      {"patch_size", [&](auto& k, auto& v) { e.patch_size = to_int(k, v); }},
      {"max_instr_len", [&](auto& k, auto& v) { e.max_instr_len = to_int(k, v); }},
      {"max_gen_len", [&](auto& k, auto& v) { s.max_gen_len = to_int(k, v); }},
      {"ffn_mult", [&](auto& k, auto& v) { e.ffn_mult = s.ffn_mult = to_int(k, v); }},
      {"learning_rate", [&](auto& k, auto& v) { t.learning_rate = to_double(k, v); }},
      {"batch_size", [&](auto& k, auto& v) { t.batch_size = to_int(k, v); }},
      {"max_steps", [&](auto& k, auto& v) { t.max_steps = to_int(k, v); }},
      {"seed", [&](auto& k, auto& v) { t.seed = to_u64(k, v); }},
      {"task_mix", [&](auto&, auto& v) { t.task_mix = parse_task_mix(v); }},
      {"freeze_image_encoder", [&](auto& k, auto& v) { t.freeze_image_encoder = to_bool(k, v); }},
      {"eval_every", [&](auto& k, auto& v) { t.eval_every = to_int(k, v); }},
      {"log_every", [&](auto& k, auto& v) { t.log_every = to_int(k, v); }},
      {"warmup_steps", [&](auto& k, auto& v) { t.warmup_steps = to_int(k, v); }},
      {"clip_norm", [&](auto& k, auto& v) { t.clip_norm = to_double(k, v); }},
      {"precision",
       [&](auto& k, auto& v) {
         if (v == "float32") rc.precision = Precision::Float32;
         else if (v == "float64") rc.precision = Precision::Float64;
         else throw ConfigError("'" + k + "' must be float32 or float64");
       }},
  };
  for (const auto& [key, value] : kv) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(key, value);
  }
  try {
    t.validate();
  } catch (const TrainConfigError& err) {
    throw ConfigError(err.what());
  }
  return rc;
}

std::string RunConfig::to_text() const {
  const auto& e = model.encoder;
  const auto& s = model.solver;
  const auto& t = train;
  const std::map<std::string, std::string> all = {
      {"stage", to_string(t.stage)},
      {"d_model", std::to_string(e.d_model)},
      {"n_heads", std::to_string(e.n_heads)},
      {"n_layers_img", std::to_string(e.n_layers_img)},
      {"n_layers_txt", std::to_string(e.n_layers_txt)},
      {"n_enc_layers", std::to_string(s.n_enc_layers)},
      {"n_dec_layers", std::to_string(s.n_dec_layers)},
      {"patch_size", std::to_string(e.patch_size)},
      {"frame", std::to_string(e.frame_width) + "x" + std::to_string(e.frame_height)},
      {"num_bins", std::to_string(model.bins.num_bins)},
      {"vocab_size", std::to_string(s.vocab_size)},
      {"max_instr_len", std::to_string(e.max_instr_len)},
      {"max_gen_len", std::to_string(s.max_gen_len)},
      {"ffn_mult", std::to_string(e.ffn_mult)},
      {"learning_rate", fmt_double(t.learning_rate)},
      {"batch_size", std::to_string(t.batch_size)},
      {"max_steps", std::to_string(t.max_steps)},
      {"seed", std::to_string(t.seed)},
      {"task_mix", task_mix_string(t.task_mix)},
      {"freeze_image_encoder", t.freeze_image_encoder ? "true" : "false"},
      {"eval_every", std::to_string(t.eval_every)},
      {"log_every", std::to_string(t.log_every)},
      {"warmup_steps", std::to_string(t.warmup_steps)},
      {"clip_norm", fmt_double(t.clip_norm)},
      {"precision", precision == Precision::Float32 ? "float32" : "float64"},
  };
  std::string out;
  for (const auto& [k, v] : all) out += k + " = " + v + "\n";
  return out;
}

}  // namespace groundseq
