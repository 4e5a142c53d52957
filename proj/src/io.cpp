/*
 * Copyright 2026 The SpikeMoE Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "spikemoe/io.hpp"

#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace spikemoe {

using Json = nlohmann::ordered_json;

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

Json lif_to_json(const LifParams& p) {
  Json j;
  j["u_th"] = p.u_th;
  j["v_reset"] = p.v_reset;
  j["beta"] = p.beta;
  j["surrogate_width"] = p.surrogate_width;
  j["surrogate"] = p.surrogate == SurrogateKind::kArctan ? "arctan" : "rectangular";
  return j;
}

LifParams lif_from_json(const Json& j, LifParams p) {
  for (const auto& [key, value] : j.items()) {
    if (key == "u_th") p.u_th = value.get<double>();
    else if (key == "v_reset") p.v_reset = value.get<double>();
    else if (key == "beta") p.beta = value.get<double>();
    else if (key == "surrogate_width") p.surrogate_width = value.get<double>();
    else if (key == "surrogate") {
      const auto name = value.get<std::string>();
      if (name == "arctan") p.surrogate = SurrogateKind::kArctan;
      else if (name == "rectangular") p.surrogate = SurrogateKind::kRectangular;
      else throw FormatError("unknown surrogate '" + name + "'");
    } else {
      throw FormatError("unknown lif key '" + key + "'");
    }
  }
  return p;
}

}  // namespace

std::string config_to_json(const ModelConfig& cfg) {
  Json j;
  j["layers"] = cfg.layers;
  j["embed_dim"] = cfg.embed_dim;
  j["heads"] = cfg.heads;
  j["num_experts"] = cfg.num_experts;
  j["top_k"] = cfg.top_k;
  j["timesteps"] = cfg.timesteps;
  j["num_classes"] = cfg.num_classes;
  j["image_size"] = cfg.image_size;
  j["patch_size"] = cfg.patch_size;
  j["in_channels"] = cfg.in_channels;
  j["expert_hidden"] = cfg.expert_hidden;
  j["prompt_len"] = cfg.prompt_len;
  j["input"] = cfg.input == InputKind::kEvents ? "events" : "static";
  j["lif"] = lif_to_json(cfg.lif);
  j["alpha_aux"] = cfg.alpha_aux;
  j["loss"] = cfg.loss == LossMode::kTet ? "tet" : "ce";
  j["label_smoothing"] = cfg.label_smoothing;
  j["shared_expert"] = cfg.shared_expert;
  j["force_shared"] = cfg.force_shared;
  j["init_gain"] = cfg.init_gain;
  j["init_seed"] = cfg.init_seed;
  return j.dump(2);
}

ModelConfig config_from_json(const std::string& text, ModelConfig cfg) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "layers") cfg.layers = value.get<Index>();
      else if (key == "embed_dim") cfg.embed_dim = value.get<Index>();
      else if (key == "heads") cfg.heads = value.get<Index>();
      else if (key == "num_experts") cfg.num_experts = value.get<Index>();
      else if (key == "top_k") cfg.top_k = value.get<Index>();
      else if (key == "timesteps") cfg.timesteps = value.get<Index>();
      else if (key == "num_classes") cfg.num_classes = value.get<Index>();
      else if (key == "image_size") cfg.image_size = value.get<Index>();
      else if (key == "patch_size") cfg.patch_size = value.get<Index>();
      else if (key == "in_channels") cfg.in_channels = value.get<Index>();
      else if (key == "expert_hidden") cfg.expert_hidden = value.get<Index>();
      else if (key == "prompt_len") cfg.prompt_len = value.get<Index>();
      else if (key == "input") cfg.input = value.get<std::string>() == "events" ? InputKind::kEvents : InputKind::kStatic;
      else if (key == "lif") cfg.lif = lif_from_json(value, cfg.lif);
      else if (key == "alpha_aux") cfg.alpha_aux = value.get<double>();
      else if (key == "loss") {
        const auto name = value.get<std::string>();
        if (name == "tet") cfg.loss = LossMode::kTet;
        else if (name == "ce") cfg.loss = LossMode::kMeanLogit;
        else throw FormatError("unknown loss '" + name + "'");
      } else if (key == "label_smoothing") cfg.label_smoothing = value.get<double>();
      else if (key == "shared_expert") cfg.shared_expert = value.get<bool>();
      else if (key == "force_shared") cfg.force_shared = value.get<bool>();
      else if (key == "init_gain") cfg.init_gain = value.get<double>();
      else if (key == "init_seed") cfg.init_seed = value.get<std::uint64_t>();
      else throw FormatError("unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad config value: ") + e.what());
  }
  return cfg;
}

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_ += s;
  }
  void tensor(const NamedTensor& t) {
    if (static_cast<Index>(t.values.size()) != numel(t.shape)) {
      throw ContractError("tensor " + t.name + " holds " + std::to_string(t.values.size()) + " values for shape " +
                          to_string(t.shape));
    }
    str(t.name);
    u32(static_cast<std::uint32_t>(t.shape.size()));
    for (Index d : t.shape) u64(static_cast<std::uint64_t>(d));
    for (float v : t.values) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      u32(bits);
    }
  }
  void tensors(const std::vector<NamedTensor>& ts) {
    u32(static_cast<std::uint32_t>(ts.size()));
    for (const auto& t : ts) tensor(t);
  }
  std::string take() { return std::move(bytes_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string bytes_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  NamedTensor tensor() {
    NamedTensor t;
    t.name = str();
    const std::uint32_t rank = u32();
    if (rank > 8) throw FormatError("tensor " + t.name + " has implausible rank " + std::to_string(rank));
    Index count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = static_cast<Index>(u64());
      if (d < 0 || (d > 0 && count > static_cast<Index>(bytes_.size()) / d)) {
        throw FormatError("tensor " + t.name + " has implausible extent");
      }
      t.shape.push_back(d);
      count *= d;
    }
    need(static_cast<std::size_t>(count) * 4);
    t.values.resize(static_cast<std::size_t>(count));
    for (auto& v : t.values) {
      const std::uint32_t bits = u32();
      std::memcpy(&v, &bits, 4);
    }
    return t;
  }
  std::vector<NamedTensor> tensors() {
    const std::uint32_t n = u32();
    std::vector<NamedTensor> out;
    for (std::uint32_t i = 0; i < n; ++i) out.push_back(tensor());
    return out;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("checkpoint truncated at byte offset " + std::to_string(pos_));
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  std::string out(Checkpoint::kMagic, 8);
  w.u32(Checkpoint::kVersion);
  w.str(config_to_json(ckpt.config));
  w.tensors(ckpt.tensors);
  w.u8(ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    w.u64(static_cast<std::uint64_t>(ckpt.optimizer->step));
    w.tensors(ckpt.optimizer->first_moment);
    w.tensors(ckpt.optimizer->second_moment);
  }
  w.str(ckpt.metrics_json);
  return out + w.take();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 8, Checkpoint::kMagic) != 0) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  const std::string body = bytes.substr(8);
  Reader r(body);
  const std::uint32_t version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(Checkpoint::kVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.config = config_from_json(r.str());
  ckpt.tensors = r.tensors();
  const std::uint8_t has_opt = r.u8();
  if (has_opt > 1) throw FormatError("bad optimizer flag");
  if (has_opt) {
    OptimizerSnapshot opt;
    opt.step = static_cast<std::int64_t>(r.u64());
    opt.first_moment = r.tensors();
    opt.second_moment = r.tensors();
    ckpt.optimizer = std::move(opt);
  }
  ckpt.metrics_json = r.str();
  if (!r.done()) throw FormatError("trailing bytes at offset " + std::to_string(r.pos() + 8));
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

template <typename Scalar>
Checkpoint capture_checkpoint(SpikingMoeModel<Scalar>& model) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  for (const auto& p : model.parameters()) {
    const auto& v = p.var.value();
    ckpt.tensors.push_back({p.name, p.var.shape(), std::vector<float>(v.data(), v.data() + v.size())});
  }
  for (const auto& b : model.buffers()) {
    const auto& v = *b.data;
    ckpt.tensors.push_back({b.name, {v.size()}, std::vector<float>(v.data(), v.data() + v.size())});
  }
  return ckpt;
}

template <typename Scalar>
void restore_checkpoint(const Checkpoint& ckpt, SpikingMoeModel<Scalar>& model) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : ckpt.tensors) by_name[t.name] = &t;
  auto params = model.parameters();
  auto buffers = model.buffers();
  auto lookup = [&](const std::string& name, const Shape& shape) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw ContractError("checkpoint lacks tensor " + name);
    if (it->second->shape != shape) {
      throw DimensionError("tensor " + name + ": checkpoint shape " + to_string(it->second->shape) +
                           " does not match model shape " + to_string(shape));
    }
    return it->second;
  };
  // Validate everything before touching the model.
  for (const auto& p : params) lookup(p.name, p.var.shape());
  for (const auto& b : buffers) lookup(b.name, {b.data->size()});
  for (auto& p : params) {
    const auto* t = lookup(p.name, p.var.shape());
    auto& dst = p.var.mutable_value();
    for (Index i = 0; i < dst.size(); ++i) dst[i] = static_cast<Scalar>(t->values[static_cast<std::size_t>(i)]);
  }
  for (auto& b : buffers) {
    const auto* t = lookup(b.name, {b.data->size()});
    for (Index i = 0; i < b.data->size(); ++i) (*b.data)[i] = static_cast<Scalar>(t->values[static_cast<std::size_t>(i)]);
  }
}

std::string encode_npy(const Shape& shape, const std::vector<float>& values) {
  if (static_cast<Index>(values.size()) != numel(shape)) throw ContractError("npy value count does not match shape");
  std::string dims;
  for (std::size_t i = 0; i < shape.size(); ++i) dims += std::to_string(shape[i]) + (shape.size() == 1 ? "," : (i + 1 < shape.size() ? ", " : ""));
  std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': (" + dims + "), }";
  const std::size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');
  std::string out("\x93NUMPY\x01\x00", 8);
  out.push_back(static_cast<char>(header.size() & 0xff));
  out.push_back(static_cast<char>((header.size() >> 8) & 0xff));
  out += header;
  const std::size_t base = out.size();
  out.resize(base + values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &values[i], 4);
    for (int b = 0; b < 4; ++b) out[base + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  return out;
}

NamedTensor decode_npy(const std::string& bytes) {
  if (bytes.size() < 10 || bytes.compare(0, 6, "\x93NUMPY") != 0) throw FormatError("not an npy file");
  if (bytes[6] != 1) throw FormatError("unsupported npy version");
  const std::size_t hlen = static_cast<unsigned char>(bytes[8]) | (static_cast<std::size_t>(static_cast<unsigned char>(bytes[9])) << 8);
  if (10 + hlen > bytes.size()) throw FormatError("truncated npy header");
  const std::string header = bytes.substr(10, hlen);
  if (header.find("'<f4'") == std::string::npos || header.find("False") == std::string::npos) {
    throw FormatError("only little-endian C-order float32 npy is supported");
  }
  const auto open = header.find('(');
  const auto close = header.find(')', open);
  if (open == std::string::npos || close == std::string::npos) throw FormatError("npy header lacks shape");
  NamedTensor t;
  std::stringstream dims(header.substr(open + 1, close - open - 1));
  std::string item;
  while (std::getline(dims, item, ',')) {
    if (item.find_first_not_of(' ') == std::string::npos) continue;
    t.shape.push_back(std::stoll(item));
  }
  const auto count = static_cast<std::size_t>(numel(t.shape));
  if (10 + hlen + count * 4 != bytes.size()) throw FormatError("npy payload size does not match shape");
  t.values.resize(count);
  std::memcpy(t.values.data(), bytes.data() + 10 + hlen, count * 4);
  return t;
}

template Checkpoint capture_checkpoint<float>(SpikingMoeModel<float>&);
template Checkpoint capture_checkpoint<double>(SpikingMoeModel<double>&);
template void restore_checkpoint<float>(const Checkpoint&, SpikingMoeModel<float>&);
template void restore_checkpoint<double>(const Checkpoint&, SpikingMoeModel<double>&);

}  // namespace spikemoe
