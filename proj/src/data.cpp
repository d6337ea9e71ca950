#include "groundseq/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace groundseq {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::array<ShapeKind, 3> kShapes = {ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle};
constexpr std::array<Color, 5> kColors = {Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Gray};
constexpr std::array<SizeClass, 2> kSizes = {SizeClass::Small, SizeClass::Large};

constexpr std::array<std::uint8_t, 3> kBackground = {217, 217, 217};

std::array<std::uint8_t, 3> rgb(Color c) {
  switch (c) {
    case Color::Red: return {220, 40, 40};
    case Color::Green: return {40, 170, 60};
    case Color::Blue: return {40, 70, 220};
    case Color::Yellow: return {235, 200, 30};
    case Color::Gray: return {110, 110, 110};
  }
  return {0, 0, 0};
}

enum Attr : unsigned { kColorAttr = 1, kShapeAttr = 2, kSizeAttr = 4 };

struct Template {
  const char* text;
  unsigned attrs;
};

// {c} color, {s} shape, {z} size
constexpr std::array<Template, 10> kTemplates = {{
    {"pull up next to the {c} {s}", kColorAttr | kShapeAttr},
    {"stop near the {z} {c} {s}", kColorAttr | kShapeAttr | kSizeAttr},
    {"park behind the {c} {s}", kColorAttr | kShapeAttr},
    {"stop vehicle next to the {z} {s}", kShapeAttr | kSizeAttr},
    {"take a left turn after that {c} {s}", kColorAttr | kShapeAttr},
    {"pull over beside the {z} {c} {s}", kColorAttr | kShapeAttr | kSizeAttr},
    {"drive towards the {c} object", kColorAttr},
    {"slow down near that {s}", kShapeAttr},
    {"watch out for the {z} {c} one", kColorAttr | kSizeAttr},
    {"wait next to the {s} that is {c}", kColorAttr | kShapeAttr},
}};

bool matches(const SceneObject& a, const SceneObject& b, unsigned attrs) {
  return (!(attrs & kColorAttr) || a.color == b.color) && (!(attrs & kShapeAttr) || a.shape == b.shape) &&
         (!(attrs & kSizeAttr) || a.size == b.size);
}

bool unique_under(const std::vector<SceneObject>& objs, std::size_t i, unsigned attrs) {
  for (std::size_t j = 0; j < objs.size(); ++j) {
    if (j != i && matches(objs[i], objs[j], attrs)) return false;
  }
  return true;
}

std::string fill(const char* tmpl, const std::string& c, const std::string& s, const std::string& z) {
  std::string out;
  for (const char* p = tmpl; *p; ++p) {
    if (p[0] == '{' && p[1] && p[2] == '}') {
      out += p[1] == 'c' ? c : p[1] == 's' ? s : z;
      p += 2;
    } else {
      out += *p;
    }
  }
  return out;
}

bool boxes_clear(const BBox& a, const BBox& b, int gap) {
  return a.x1 + gap <= b.x0 || b.x1 + gap <= a.x0 || a.y1 + gap <= b.y0 || b.y1 + gap <= a.y0;
}

bool inside_shape(const SceneObject& o, double px, double py) {
  const double cx = (o.box.x0 + o.box.x1) / 2;
  const double cy = (o.box.y0 + o.box.y1) / 2;
  switch (o.shape) {
    case ShapeKind::Square:
      return px >= o.box.x0 && px < o.box.x1 && py >= o.box.y0 && py < o.box.y1;
    case ShapeKind::Circle: {
      const double r = o.box.width() / 2;
      return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
    }
    case ShapeKind::Triangle: {
      // apex at top centre, base along the bottom edge
      if (py < o.box.y0 || py > o.box.y1) return false;
      const double t = (py - o.box.y0) / o.box.height();
      const double half = t * o.box.width() / 2;
      return px >= cx - half && px <= cx + half;
    }
  }
  return false;
}

void rasterize(Image& img, const SceneObject& o) {
  const auto col = rgb(o.color);
  const int x_lo = std::max(0, static_cast<int>(o.box.x0));
  const int x_hi = std::min(img.width, static_cast<int>(std::ceil(o.box.x1)));
  const int y_lo = std::max(0, static_cast<int>(o.box.y0));
  const int y_hi = std::min(img.height, static_cast<int>(std::ceil(o.box.y1)));
  for (int y = y_lo; y < y_hi; ++y) {
    for (int x = x_lo; x < x_hi; ++x) {
      if (!inside_shape(o, x + 0.5, y + 0.5)) continue;
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<float>(col[c]) / 255.0f;
    }
  }
}

template <typename T, std::size_t N>
T pick(const std::array<T, N>& options, Rng& rng) {
  return options[static_cast<std::size_t>(rng.uniform_int(0, N - 1))];
}

std::string json_dump(const json& j) { return j.dump(2) + "\n"; }

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DatasetError("missing file " + p.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace

std::string to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
  }
  return "?";
}

std::string to_string(Color c) {
  switch (c) {
    case Color::Red: return "red";
    case Color::Green: return "green";
    case Color::Blue: return "blue";
    case Color::Yellow: return "yellow";
    case Color::Gray: return "gray";
  }
  return "?";
}

std::string to_string(SizeClass s) { return s == SizeClass::Small ? "small" : "large"; }

std::string to_string(Task t) { return t == Task::Ground ? "GROUND" : "CAPTION"; }

Task task_from_string(const std::string& s) {
  if (s == "GROUND") return Task::Ground;
  if (s == "CAPTION") return Task::Caption;
  throw DatasetError("unknown task '" + s + "'");
}

Scene generate_scene(std::uint64_t seed, int n_objects, const SceneConfig& cfg) {
  if (n_objects < 2 || n_objects > 5) throw std::invalid_argument("generate_scene: n_objects must be in 2..5");
  Rng rng(derive_seed(seed, "scene"));

  Scene scene;
  // attributes first; redraw until some (shape, color) pair is unique
  std::vector<SceneObject> objs(n_objects);
  for (;;) {
    for (auto& o : objs) {
      o.shape = pick(kShapes, rng);
      o.color = pick(kColors, rng);
      o.size = pick(kSizes, rng);
    }
    bool any_unique = false;
    for (std::size_t i = 0; i < objs.size() && !any_unique; ++i) any_unique = unique_under(objs, i, kColorAttr | kShapeAttr);
    if (any_unique) break;
  }

  for (std::size_t i = 0; i < objs.size(); ++i) {
    auto& o = objs[i];
    const bool small = o.size == SizeClass::Small;
    const int side = static_cast<int>(rng.uniform_int(small ? cfg.small_min : cfg.large_min,
                                                      small ? cfg.small_max : cfg.large_max));
    if (side > cfg.frame_width || side > cfg.frame_height) throw PlacementError("object larger than frame");
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      const double x0 = static_cast<double>(rng.uniform_int(0, cfg.frame_width - side));
      const double y0 = static_cast<double>(rng.uniform_int(0, cfg.frame_height - side));
      o.box = BBox{x0, y0, x0 + side, y0 + side};
      placed = std::all_of(objs.begin(), objs.begin() + static_cast<std::ptrdiff_t>(i),
                           [&](const SceneObject& other) { return boxes_clear(o.box, other.box, cfg.gap); });
    }
    if (!placed) {
      throw PlacementError("could not place object " + std::to_string(i) + " of " + std::to_string(n_objects) +
                           " after 1000 attempts");
    }
  }

  scene.image = Image(cfg.frame_width, cfg.frame_height);
  for (int y = 0; y < cfg.frame_height; ++y) {
    for (int x = 0; x < cfg.frame_width; ++x) {
      for (int c = 0; c < 3; ++c) scene.image.at(x, y, c) = static_cast<float>(kBackground[c]) / 255.0f;
    }
  }
  for (const auto& o : objs) rasterize(scene.image, o);
  scene.objects = std::move(objs);
  return scene;
}

Instruction generate_instruction(const std::vector<SceneObject>& objects, Rng& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    for (const auto& t : kTemplates) {
      if (unique_under(objects, i, t.attrs)) {
        candidates.push_back(i);
        break;
      }
    }
  }
  if (candidates.empty()) throw NoUniqueReferentError("no object can be singled out by any template");
  const std::size_t target = candidates[static_cast<std::size_t>(rng.uniform_int(0, candidates.size() - 1))];

  std::vector<const Template*> usable;
  for (const auto& t : kTemplates) {
    if (unique_under(objects, target, t.attrs)) usable.push_back(&t);
  }
  const Template* t = usable[static_cast<std::size_t>(rng.uniform_int(0, usable.size() - 1))];
  const auto& o = objects[target];
  return Instruction{fill(t->text, to_string(o.color), to_string(o.shape), to_string(o.size)), target};
}

std::string describe_objects(const std::vector<SceneObject>& objects) {
  std::vector<const SceneObject*> ordered;
  for (const auto& o : objects) ordered.push_back(&o);
  std::stable_sort(ordered.begin(), ordered.end(), [](const SceneObject* a, const SceneObject* b) {
    return a->box.x0 < b->box.x0 || (a->box.x0 == b->box.x0 && a->box.y0 < b->box.y0);
  });
  std::string out;
  for (const auto* o : ordered) {
    if (!out.empty()) out += " and ";
    out += "a " + to_string(o->color) + " " + to_string(o->shape);
  }
  return out;
}

Sample make_caption_sample(const std::vector<SceneObject>& objects) {
  if (objects.empty()) throw std::invalid_argument("make_caption_sample: empty scene");
  Sample s;
  s.task = Task::Caption;
  s.instruction = kCaptionPrompt;
  s.caption = describe_objects(objects);
  return s;
}

std::vector<std::string> synthetic_lexicon() {
  std::vector<std::string> lines;
  for (const auto& t : kTemplates) {
    for (auto c : kColors) {
      for (auto s : kShapes) {
        for (auto z : kSizes) lines.push_back(fill(t.text, to_string(c), to_string(s), to_string(z)));
      }
    }
  }
  lines.push_back(kCaptionPrompt);
  lines.push_back("a and");
  return lines;
}

std::array<std::size_t, 3> split_sizes(std::size_t n) {
  constexpr std::array<std::size_t, 3> weights = {8349, 1163, 2447};
  constexpr std::size_t total = 8349 + 1163 + 2447;
  std::array<std::size_t, 3> out{};
  std::array<std::size_t, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    out[i] = n * weights[i] / total;
    rem[i] = n * weights[i] % total;
    assigned += out[i];
  }
  std::array<std::size_t, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++out[order[k % 3]];
  return out;
}

std::string DatasetManifest::to_json() const {
  json j;
  j["version"] = version;
  j["frame"] = {frame_w, frame_h};
  j["num_bins"] = num_bins;
  j["splits"] = json::object();
  for (const auto& [name, ids] : splits) j["splits"][name] = ids;
  j["samples"] = json::object();
  for (const auto& [id, r] : samples) {
    json s;
    s["image"] = r.image;
    s["task"] = to_string(r.task);
    s["instruction"] = r.instruction;
    s["box"] = r.box ? json(r.box->as_array()) : json(nullptr);
    s["caption"] = r.caption ? json(*r.caption) : json(nullptr);
    j["samples"][id] = std::move(s);
  }
  return json_dump(j);
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  DatasetManifest m;
  try {
    const json j = json::parse(text);
    m.version = j.at("version").get<std::string>();
    if (m.version != kVersion) throw DatasetError("manifest version '" + m.version + "', expected " + kVersion);
    m.frame_w = j.at("frame").at(0).get<int>();
    m.frame_h = j.at("frame").at(1).get<int>();
    m.num_bins = j.at("num_bins").get<int>();
    for (const auto& [name, ids] : j.at("splits").items()) {
      if (name != "train" && name != "val" && name != "test") throw DatasetError("unknown split '" + name + "'");
      m.splits[name] = ids.get<std::vector<std::string>>();
    }
    for (const auto& [id, s] : j.at("samples").items()) {
      SampleRecord r;
      r.image = s.at("image").get<std::string>();
      r.task = task_from_string(s.at("task").get<std::string>());
      r.instruction = s.at("instruction").get<std::string>();
      if (!s.at("box").is_null()) r.box = BBox::from_array(s.at("box").get<std::array<double, 4>>());
      if (!s.at("caption").is_null()) r.caption = s.at("caption").get<std::string>();
      m.samples.emplace(id, std::move(r));
    }
  } catch (const json::exception& e) {
    throw DatasetError(std::string("malformed manifest: ") + e.what());
  }
  std::set<std::string> seen;
  for (const auto& [name, ids] : m.splits) {
    for (const auto& id : ids) {
      if (!seen.insert(id).second) throw DatasetError("sample id '" + id + "' listed twice across splits");
      if (!m.samples.count(id)) throw DatasetError("split '" + name + "' names unknown sample '" + id + "'");
    }
  }
  return m;
}

void write_dataset(const DatasetManifest& manifest, const std::vector<Sample>& samples, const Vocabulary& vocab,
                   const fs::path& out_dir) {
  std::set<std::string> ids;
  for (const auto& s : samples) {
    if (!ids.insert(s.sample_id).second) throw DatasetError("duplicate sample id '" + s.sample_id + "'");
  }
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw DatasetError("cannot create " + (out_dir / "images").string() + ": " + ec.message());
  for (const auto& s : samples) {
    const auto it = manifest.samples.find(s.sample_id);
    if (it == manifest.samples.end()) throw DatasetError("sample '" + s.sample_id + "' missing from manifest");
    write_ppm(out_dir / it->second.image, s.image);
  }
  {
    std::ofstream f(out_dir / kVocabFile, std::ios::binary);
    if (!f) throw DatasetError("cannot write " + (out_dir / kVocabFile).string());
    f << vocab.serialize();
  }
  std::ofstream f(out_dir / kManifestFile, std::ios::binary);
  if (!f) throw DatasetError("cannot write " + (out_dir / kManifestFile).string());
  f << manifest.to_json();
  if (!f) throw DatasetError("short write to manifest");
}

Dataset Dataset::open(const fs::path& dir) {
  Dataset d;
  d.dir_ = dir;
  d.manifest_ = DatasetManifest::from_json(read_text(dir / kManifestFile));
  d.vocab_ = Vocabulary::parse(read_text(dir / kVocabFile));
  if (d.vocab_.num_bins() != d.manifest_.num_bins) throw DatasetError("vocab.txt bin count disagrees with manifest");
  return d;
}

std::vector<std::string> Dataset::split_names() const {
  std::vector<std::string> out;
  for (const auto& [name, ids] : manifest_.splits) out.push_back(name);
  return out;
}

Sample Dataset::load(const std::string& sample_id) const {
  const auto it = manifest_.samples.find(sample_id);
  if (it == manifest_.samples.end()) throw DatasetError("unknown sample id '" + sample_id + "'");
  const auto& r = it->second;
  Sample s;
  s.sample_id = sample_id;
  s.task = r.task;
  s.instruction = r.instruction;
  s.target_box = r.box;
  s.caption = r.caption;
  const fs::path p = dir_ / r.image;
  if (!fs::exists(p)) throw DatasetError("missing image file for sample '" + sample_id + "': " + p.string());
  s.image = read_ppm(p);
  return s;
}

std::vector<Sample> Dataset::load_split(const std::string& split) const {
  const auto it = manifest_.splits.find(split);
  if (it == manifest_.splits.end()) throw DatasetError("no split named '" + split + "'");
  std::vector<Sample> out;
  out.reserve(it->second.size());
  for (const auto& id : it->second) out.push_back(load(id));
  return out;
}

GeneratedDataset generate_dataset(const GenerateConfig& cfg) {
  if (cfg.caption_frac < 0 || cfg.caption_frac > 1) throw std::invalid_argument("caption fraction must be in [0,1]");
  if (cfg.min_objects < 2 || cfg.max_objects > 5 || cfg.min_objects > cfg.max_objects) {
    throw std::invalid_argument("object counts must satisfy 2 <= min <= max <= 5");
  }
  GeneratedDataset out;
  auto& m = out.manifest;
  m.frame_w = cfg.scene.frame_width;
  m.frame_h = cfg.scene.frame_height;
  m.num_bins = cfg.num_bins;

  const auto sizes = split_sizes(cfg.n);
  const std::array<const char*, 3> split_names = {"train", "val", "test"};
  for (const char* name : split_names) m.splits[name];

  Rng plan(derive_seed(cfg.seed, "data"));
  const int width = static_cast<int>(std::to_string(cfg.n > 0 ? cfg.n - 1 : 0).size());
  for (std::size_t i = 0; i < cfg.n; ++i) {
    std::string id = std::to_string(i);
    id = "s" + std::string(static_cast<std::size_t>(std::max(0, std::max(width, 6) - static_cast<int>(id.size()))), '0') + id;

    const bool caption = plan.uniform() < cfg.caption_frac;
    const int max_obj = caption ? std::min(cfg.max_objects, std::max(cfg.min_objects, cfg.caption_max_objects))
                                : cfg.max_objects;
    const int n_obj = static_cast<int>(plan.uniform_int(cfg.min_objects, max_obj));
    const std::uint64_t scene_seed = plan.next_u64();
    Scene scene = generate_scene(scene_seed, n_obj, cfg.scene);
    Rng local(derive_seed(scene_seed, "instruction"));

    Sample s;
    if (caption) {
      s = make_caption_sample(scene.objects);
    } else {
      const auto instr = generate_instruction(scene.objects, local);
      s.task = Task::Ground;
      s.instruction = instr.text;
      s.target_box = scene.objects[instr.target].box;
    }
    s.sample_id = id;
    s.image = std::move(scene.image);

    std::size_t split = 0;
    if (i >= sizes[0]) split = i >= sizes[0] + sizes[1] ? 2 : 1;
    m.splits[split_names[split]].push_back(id);
    m.samples[id] = SampleRecord{"images/" + id + ".ppm", s.task, s.instruction, s.target_box, s.caption};
    out.samples.push_back(std::move(s));
  }
  const auto lexicon = synthetic_lexicon();
  out.vocab = build_vocab(lexicon, CoordBinSpec{cfg.num_bins, static_cast<double>(m.frame_w),
                                                static_cast<double>(m.frame_h)});
  return out;
}

BBox box_from_xywh(double x, double y, double w, double h) {
  if (!(w > 0 && h > 0)) throw std::invalid_argument("box width and height must be positive");
  return {x, y, x + w, y + h};
}

std::vector<Talk2CarSample> load_talk2car_subset(const fs::path& path, int frame_w, int frame_h) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw DatasetError("talk2car file is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_array()) throw DatasetError("talk2car file must hold a JSON list of records");
  std::vector<Talk2CarSample> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& r = j[i];
    Talk2CarSample t;
    try {
      const auto xywh = r.at("box_xywh").get<std::array<double, 4>>();
      const auto wh = r.at("source_wh").get<std::array<double, 2>>();
      if (!(xywh[2] > 0 && xywh[3] > 0)) {
        throw DatasetError("talk2car record " + std::to_string(i) + ": non-positive box width or height");
      }
      t.source_box = box_from_xywh(xywh[0], xywh[1], xywh[2], xywh[3]);
      t.letterbox = Letterbox::fit(wh[0], wh[1], frame_w, frame_h);
      t.split = r.at("split").get<std::string>();
      t.sample.instruction = r.at("command").get<std::string>();
      const fs::path image_path = path.parent_path() / r.at("image").get<std::string>();
      Image src = read_ppm(image_path);
      if (src.width != static_cast<int>(wh[0]) || src.height != static_cast<int>(wh[1])) {
        throw DatasetError("talk2car record " + std::to_string(i) + ": image size differs from source_wh");
      }
      t.sample.image = letterbox_image(src, t.letterbox);
      t.sample.sample_id = r.contains("id") ? r.at("id").get<std::string>() : "t2c_" + std::to_string(i);
    } catch (const json::exception& e) {
      throw DatasetError("malformed talk2car record " + std::to_string(i) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw DatasetError("malformed talk2car record " + std::to_string(i) + ": " + e.what());
    }
    t.sample.task = Task::Ground;
    t.sample.target_box = t.letterbox.to_frame(t.source_box);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace groundseq
