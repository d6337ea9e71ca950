#pragma once

#include "groundseq/bbox.hpp"
#include "groundseq/image.hpp"
#include "groundseq/rng.hpp"
#include "groundseq/vocab.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace groundseq {

enum class ShapeKind { Circle, Square, Triangle };
enum class Color { Red, Green, Blue, Yellow, Gray };
enum class SizeClass { Small, Large };

std::string to_string(ShapeKind s);
std::string to_string(Color c);
std::string to_string(SizeClass s);

struct SceneObject {
  ShapeKind shape = ShapeKind::Circle;
  Color color = Color::Red;
  SizeClass size = SizeClass::Small;
  BBox box;

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct Scene {
  Image image;
  std::vector<SceneObject> objects;
};

struct SceneConfig {
  int frame_width = 128;
  int frame_height = 128;
  int small_min = 14;
  int small_max = 20;
  int large_min = 26;
  int large_max = 34;
  int gap = 2;  // minimum free pixels between object boxes
};

class PlacementError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic scene of n_objects (2..5) non-overlapping shapes on light gray.
/// At least one object has a (shape, color) pair no other object shares.
Scene generate_scene(std::uint64_t seed, int n_objects, const SceneConfig& cfg = {});

class NoUniqueReferentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Instruction {
  std::string text;
  std::size_t target = 0;  // index into the scene's objects
};

/// Referring instruction whose attribute words single out exactly one object.
Instruction generate_instruction(const std::vector<SceneObject>& objects, Rng& rng);

enum class Task { Ground, Caption };
std::string to_string(Task t);
Task task_from_string(const std::string& s);

struct Sample {
  std::string sample_id;
  Image image;
  std::string instruction;
  std::optional<BBox> target_box;
  std::optional<std::string> caption;
  Task task = Task::Ground;
};

inline constexpr const char* kCaptionPrompt = "describe the scene";

/// Left-to-right enumeration, e.g. "a red circle and a blue square".
std::string describe_objects(const std::vector<SceneObject>& objects);

/// CAPTION sample over `objects`; image left empty for the caller to attach.
Sample make_caption_sample(const std::vector<SceneObject>& objects);

/// Every word the synthetic generator can emit, one template instance per line.
std::vector<std::string> synthetic_lexicon();

/// train/val/test counts by largest remainder on the 8349:1163:2447 ratio.
std::array<std::size_t, 3> split_sizes(std::size_t n);

struct SampleRecord {
  std::string image;  // path relative to the dataset directory
  Task task = Task::Ground;
  std::string instruction;
  std::optional<BBox> box;
  std::optional<std::string> caption;
};

struct DatasetManifest {
  static constexpr const char* kVersion = "groundseq-ds-v1";
  std::string version = kVersion;
  int frame_w = 128;
  int frame_h = 128;
  int num_bins = 256;
  std::map<std::string, std::vector<std::string>> splits;
  std::map<std::string, SampleRecord> samples;

  std::string to_json() const;
  static DatasetManifest from_json(const std::string& text);
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kVocabFile = "vocab.txt";

/// Writes images (PPM), vocab.txt and finally manifest.json into out_dir.
void write_dataset(const DatasetManifest& manifest, const std::vector<Sample>& samples, const Vocabulary& vocab,
                   const std::filesystem::path& out_dir);

/// A dataset directory with lazily loaded images.
class Dataset {
 public:
  static Dataset open(const std::filesystem::path& dir);

  const DatasetManifest& manifest() const { return manifest_; }
  const Vocabulary& vocab() const { return vocab_; }
  const std::filesystem::path& dir() const { return dir_; }

  bool has_split(const std::string& split) const { return manifest_.splits.count(split) > 0; }
  std::vector<std::string> split_names() const;
  Sample load(const std::string& sample_id) const;
  std::vector<Sample> load_split(const std::string& split) const;

 private:
  std::filesystem::path dir_;
  DatasetManifest manifest_;
  Vocabulary vocab_{2, {}};
};

struct GenerateConfig {
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  double caption_frac = 0.0;
  int min_objects = 2;
  int max_objects = 4;
  int caption_max_objects = 3;
  int num_bins = 256;
  SceneConfig scene;
};

struct GeneratedDataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;
  Vocabulary vocab{2, {}};
};

GeneratedDataset generate_dataset(const GenerateConfig& cfg);

/// One converted Talk2Car-format record.
struct Talk2CarSample {
  Sample sample;
  std::string split;
  BBox source_box;      // corner form in source pixels
  Letterbox letterbox;  // source -> canonical frame
};

/// Reads a Talk2Car-subset JSON list; images resolve relative to the file.
std::vector<Talk2CarSample> load_talk2car_subset(const std::filesystem::path& path, int frame_w = 128,
                                                 int frame_h = 128);

/// [x, y, w, h] to corner form.
BBox box_from_xywh(double x, double y, double w, double h);

}  // namespace groundseq
