#pragma once

#include "groundseq/model.hpp"
#include "groundseq/vocab.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace groundseq {

/// Unreadable, truncated or corrupted checkpoint file.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A checkpoint, dataset or config that does not fit the model at hand.
class CompatibilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam moments keyed by parameter name (same order as the parameters).
struct OptimizerSnapshot {
  double learning_rate = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step_count = 0;
  std::vector<Matrix<double>> first_moment;
  std::vector<Matrix<double>> second_moment;
};

struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  ModelConfig config;
  std::string vocab_text;  // serialized vocabulary the token ids refer to
  std::uint64_t vocab_hash = 0;
  ModelParams<double> params;
  std::optional<OptimizerSnapshot> optimizer;
  std::int64_t global_step = 0;
  std::string rng_state;
  std::map<std::string, std::string> metadata;

  Vocabulary vocab() const;
};

/// Container bytes: magic, header length, JSON header, raw little-endian
/// float64 blobs, trailing FNV-1a checksum of everything before it.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Throws CompatibilityError unless the checkpoint's parameter names and
/// shapes are exactly those `cfg` produces.
void check_architecture(const Checkpoint& ckpt, const ModelConfig& cfg);

/// Throws CompatibilityError when the vocabularies differ.
void check_vocab(const Checkpoint& ckpt, const Vocabulary& v);

}  // namespace groundseq
