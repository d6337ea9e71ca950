#include "groundseq/checkpoint.hpp"

#include "groundseq/rng.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace groundseq {

using ojson = nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'G', 'S', 'Q', 'C', 'K', 'P', 'T', '\n'};

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in native little-endian order");

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t checksum(const std::uint8_t* data, std::size_t n) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(data), n));
}

ojson encoder_json(const EncoderConfig& e) {
  ojson j;
  j["frame_width"] = e.frame_width;
  j["frame_height"] = e.frame_height;
  j["patch_size"] = e.patch_size;
  j["d_model"] = e.d_model;
  j["n_layers_img"] = e.n_layers_img;
  j["n_layers_txt"] = e.n_layers_txt;
  j["n_heads"] = e.n_heads;
  j["max_instr_len"] = e.max_instr_len;
  j["ffn_mult"] = e.ffn_mult;
  return j;
}

ojson solver_json(const SolverConfig& s) {
  ojson j;
  j["n_enc_layers"] = s.n_enc_layers;
  j["n_dec_layers"] = s.n_dec_layers;
  j["n_heads"] = s.n_heads;
  j["d_model"] = s.d_model;
  j["max_gen_len"] = s.max_gen_len;
  j["vocab_size"] = s.vocab_size;
  j["ffn_mult"] = s.ffn_mult;
  return j;
}

ojson bins_json(const CoordBinSpec& b) {
  ojson j;
  j["num_bins"] = b.num_bins;
  j["extent_w"] = b.extent_w;
  j["extent_h"] = b.extent_h;
  return j;
}

ModelConfig config_from_json(const ojson& j) {
  ModelConfig c;
  const auto& e = j.at("encoder");
  c.encoder.frame_width = e.at("frame_width").get<int>();
  c.encoder.frame_height = e.at("frame_height").get<int>();
  c.encoder.patch_size = e.at("patch_size").get<int>();
  c.encoder.d_model = e.at("d_model").get<int>();
  c.encoder.n_layers_img = e.at("n_layers_img").get<int>();
  c.encoder.n_layers_txt = e.at("n_layers_txt").get<int>();
  c.encoder.n_heads = e.at("n_heads").get<int>();
  c.encoder.max_instr_len = e.at("max_instr_len").get<int>();
  c.encoder.ffn_mult = e.at("ffn_mult").get<int>();
  const auto& s = j.at("solver");
  c.solver.n_enc_layers = s.at("n_enc_layers").get<int>();
  c.solver.n_dec_layers = s.at("n_dec_layers").get<int>();
  c.solver.n_heads = s.at("n_heads").get<int>();
  c.solver.d_model = s.at("d_model").get<int>();
  c.solver.max_gen_len = s.at("max_gen_len").get<int>();
  c.solver.vocab_size = s.at("vocab_size").get<int>();
  c.solver.ffn_mult = s.at("ffn_mult").get<int>();
  const auto& b = j.at("bins");
  c.bins.num_bins = b.at("num_bins").get<int>();
  c.bins.extent_w = b.at("extent_w").get<double>();
  c.bins.extent_h = b.at("extent_h").get<double>();
  return c;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 15];
  return s;
}

std::uint64_t parse_hex64(const std::string& s) {
  if (s.size() != 16) throw CheckpointError("vocab hash must be 16 hex digits");
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else throw CheckpointError("vocab hash must be lowercase hex");
  }
  return v;
}

struct BlobWriter {
  std::vector<std::uint8_t> bytes;
  ojson index = ojson::array();

  void add(const std::string& name, const Shape& shape, const Matrix<double>& m) {
    ojson e;
    e["name"] = name;
    e["shape"] = shape;
    e["offset"] = bytes.size();
    e["count"] = m.size();
    index.push_back(std::move(e));
    const auto* p = reinterpret_cast<const std::uint8_t*>(m.data());
    bytes.insert(bytes.end(), p, p + m.size() * sizeof(double));
  }
};

Matrix<double> read_blob(const std::uint8_t* blobs, std::size_t blob_size, const ojson& entry, Index rows,
                         Index cols) {
  const auto offset = entry.at("offset").get<std::size_t>();
  const auto count = entry.at("count").get<std::size_t>();
  if (count != static_cast<std::size_t>(rows * cols)) throw CheckpointError("blob count disagrees with its shape");
  if (offset > blob_size || count * sizeof(double) > blob_size - offset) {
    throw CheckpointError("blob '" + entry.at("name").get<std::string>() + "' runs past the end of the file");
  }
  Matrix<double> m(rows, cols);
  std::memcpy(m.data(), blobs + offset, count * sizeof(double));
  return m;
}

}  // namespace

Vocabulary Checkpoint::vocab() const { return Vocabulary::parse(vocab_text); }

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  ojson header;
  header["format_version"] = Checkpoint::kFormatVersion;
  header["config"] = {{"encoder", encoder_json(ckpt.config.encoder)},
                      {"solver", solver_json(ckpt.config.solver)},
                      {"bins", bins_json(ckpt.config.bins)}};
  header["vocab_hash"] = hex64(ckpt.vocab_hash);
  header["vocab"] = ckpt.vocab_text;
  header["global_step"] = ckpt.global_step;
  header["rng_state"] = ckpt.rng_state;
  header["metadata"] = ckpt.metadata;

  BlobWriter blobs;
  std::vector<Shape> shapes;
  for (const auto& [name, t] : ckpt.params) {
    blobs.add(name, t.shape(), t.value());
    shapes.push_back(t.shape());
  }
  header["params"] = std::move(blobs.index);

  if (ckpt.optimizer) {
    const auto& o = *ckpt.optimizer;
    if (o.first_moment.size() != ckpt.params.size() || o.second_moment.size() != ckpt.params.size()) {
      throw CheckpointError("optimizer state does not cover every parameter");
    }
    ojson opt;
    opt["learning_rate"] = o.learning_rate;
    opt["beta1"] = o.beta1;
    opt["beta2"] = o.beta2;
    opt["eps"] = o.eps;
    opt["step_count"] = o.step_count;
    BlobWriter m1;
    m1.bytes = std::move(blobs.bytes);
    std::size_t i = 0;
    for (const auto& [name, t] : ckpt.params) {
      if (o.first_moment[i].size() != t.numel() || o.second_moment[i].size() != t.numel()) {
        throw CheckpointError("optimizer moment for '" + name + "' has the wrong size");
      }
      m1.add(name + "#m", shapes[i], o.first_moment[i]);
      m1.add(name + "#v", shapes[i], o.second_moment[i]);
      ++i;
    }
    opt["moments"] = std::move(m1.index);
    header["optimizer"] = std::move(opt);
    blobs.bytes = std::move(m1.bytes);
  } else {
    header["optimizer"] = nullptr;
  }

  const std::string head = header.dump();
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u64(out, head.size());
  out.insert(out.end(), head.begin(), head.end());
  out.insert(out.end(), blobs.bytes.begin(), blobs.bytes.end());
  put_u64(out, checksum(out.data(), out.size()));
  return out;
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof kMagic + 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const std::size_t body = bytes.size() - 8;
  if (get_u64(bytes.data() + body) != checksum(bytes.data(), body)) {
    throw CheckpointError("checkpoint checksum mismatch (file truncated or corrupted)");
  }
  const std::uint64_t head_len = get_u64(bytes.data() + sizeof kMagic);
  const std::size_t head_start = sizeof kMagic + 8;
  if (head_len > body - head_start) throw CheckpointError("checkpoint header length exceeds file size");
  const std::uint8_t* blobs = bytes.data() + head_start + head_len;
  const std::size_t blob_size = body - head_start - head_len;

  Checkpoint c;
  try {
    const auto header = ojson::parse(bytes.begin() + static_cast<std::ptrdiff_t>(head_start),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(head_start + head_len));
    const int version = header.at("format_version").get<int>();
    if (version != Checkpoint::kFormatVersion) {
      throw CheckpointError("unsupported checkpoint format version " + std::to_string(version));
    }
    c.config = config_from_json(header.at("config"));
    c.vocab_hash = parse_hex64(header.at("vocab_hash").get<std::string>());
    c.vocab_text = header.at("vocab").get<std::string>();
    c.global_step = header.at("global_step").get<std::int64_t>();
    c.rng_state = header.at("rng_state").get<std::string>();
    c.metadata = header.at("metadata").get<std::map<std::string, std::string>>();

    std::vector<std::pair<Index, Index>> dims;
    for (const auto& e : header.at("params")) {
      const auto shape = e.at("shape").get<Shape>();
      const auto [rows, cols] = Tensor<double>::matrix_dims(shape);
      dims.emplace_back(rows, cols);
      c.params.add(e.at("name").get<std::string>(), Tensor<double>(shape, read_blob(blobs, blob_size, e, rows, cols)));
    }
    const auto& opt = header.at("optimizer");
    if (!opt.is_null()) {
      OptimizerSnapshot o;
      o.learning_rate = opt.at("learning_rate").get<double>();
      o.beta1 = opt.at("beta1").get<double>();
      o.beta2 = opt.at("beta2").get<double>();
      o.eps = opt.at("eps").get<double>();
      o.step_count = opt.at("step_count").get<std::int64_t>();
      const auto& moments = opt.at("moments");
      if (moments.size() != 2 * dims.size()) throw CheckpointError("optimizer moment count mismatch");
      for (std::size_t i = 0; i < dims.size(); ++i) {
        o.first_moment.push_back(read_blob(blobs, blob_size, moments[2 * i], dims[i].first, dims[i].second));
        o.second_moment.push_back(read_blob(blobs, blob_size, moments[2 * i + 1], dims[i].first, dims[i].second));
      }
      c.optimizer = std::move(o);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (fnv1a64(c.vocab_text) != c.vocab_hash) throw CheckpointError("embedded vocabulary does not match its hash");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw CheckpointError("cannot write " + tmp.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

void check_architecture(const Checkpoint& ckpt, const ModelConfig& cfg) {
  Rng rng(0);
  const auto expected = init_model_params<double>(cfg, rng);
  for (const auto& [name, t] : expected) {
    if (!ckpt.params.contains(name)) throw CompatibilityError("checkpoint lacks parameter '" + name + "'");
    if (ckpt.params.at(name).shape() != t.shape()) {
      throw CompatibilityError("parameter '" + name + "' has shape " + shape_string(ckpt.params.at(name).shape()) +
                               " in the checkpoint but " + shape_string(t.shape()) + " under the config");
    }
  }
  if (expected.size() != ckpt.params.size()) {
    throw CompatibilityError("checkpoint holds " + std::to_string(ckpt.params.size()) + " parameters, config expects " +
                             std::to_string(expected.size()));
  }
}

void check_vocab(const Checkpoint& ckpt, const Vocabulary& v) {
  if (ckpt.vocab_hash != v.hash()) {
    throw CompatibilityError("vocabulary hash mismatch: checkpoint " + hex64(ckpt.vocab_hash) + ", dataset " +
                             v.hash_hex());
  }
}

}  // namespace groundseq
