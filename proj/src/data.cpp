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

#include "spikemoe/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "spikemoe/io.hpp"

namespace spikemoe {

namespace {

constexpr Index kCifarSide = 32;
constexpr Index kCifarPixels = 3 * kCifarSide * kCifarSide;
constexpr Index kCifarRecord = kCifarPixels + 1;
constexpr char kDatasetMagic[9] = "SPMOEDAT";
constexpr std::uint32_t kDatasetVersion = 1;

float quantize(double v) { return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f; }

}  // namespace

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kCifar10Binary: return "cifar10-binary";
    case DatasetKind::kSyntheticStatic: return "synthetic-static";
    case DatasetKind::kSyntheticEvents: return "synthetic-events";
  }
  return "unknown";
}

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "cifar10-binary" || name == "cifar10") return DatasetKind::kCifar10Binary;
  if (name == "synthetic-static") return DatasetKind::kSyntheticStatic;
  if (name == "synthetic-events") return DatasetKind::kSyntheticEvents;
  throw ContractError("unknown dataset kind '" + name + "'");
}

Dataset Dataset::subset(std::span<const Index> indices) const {
  Dataset out = *this;
  out.data.clear();
  out.labels.clear();
  out.data.reserve(indices.size() * static_cast<std::size_t>(sample_numel()));
  for (Index i : indices) {
    if (i < 0 || i >= size()) throw ContractError("sample index " + std::to_string(i) + " out of range");
    const auto s = sample(i);
    out.data.insert(out.data.end(), s.begin(), s.end());
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

Dataset load_cifar10_file(const std::filesystem::path& file, Index limit) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open " + file.string());
  Dataset ds;
  ds.input = InputKind::kStatic;
  ds.channels = 3;
  ds.height = kCifarSide;
  ds.width = kCifarSide;
  ds.num_classes = 10;
  std::vector<unsigned char> record(static_cast<std::size_t>(kCifarRecord));
  std::uint64_t offset = 0;
  while (limit == 0 || ds.size() < limit) {
    in.read(reinterpret_cast<char*>(record.data()), kCifarRecord);
    const auto got = static_cast<Index>(in.gcount());
    if (got == 0) break;
    if (got != kCifarRecord) {
      throw FormatError(file.string() + ": truncated record at byte offset " + std::to_string(offset) + " (" +
                        std::to_string(got) + " of " + std::to_string(kCifarRecord) + " bytes)");
    }
    if (record[0] > 9) {
      throw FormatError(file.string() + ": label " + std::to_string(record[0]) + " at byte offset " +
                        std::to_string(offset) + " out of range");
    }
    ds.labels.push_back(record[0]);
    for (Index p = 0; p < kCifarPixels; ++p) ds.data.push_back(static_cast<float>(record[1 + p]) / 255.0f);
    offset += kCifarRecord;
  }
  return ds;
}

Dataset load_cifar10(const std::filesystem::path& path, bool train, Index limit) {
  if (!std::filesystem::is_directory(path)) return load_cifar10_file(path, limit);
  std::vector<std::filesystem::path> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) files.push_back(path / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    files.push_back(path / "test_batch.bin");
  }
  Dataset all;
  for (const auto& f : files) {
    if (!std::filesystem::exists(f)) continue;
    Dataset part = load_cifar10_file(f, limit == 0 ? 0 : limit - all.size());
    if (all.labels.empty()) {
      all = std::move(part);
    } else {
      all.data.insert(all.data.end(), part.data.begin(), part.data.end());
      all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
    }
    if (limit != 0 && all.size() >= limit) break;
  }
  if (all.labels.empty()) throw FormatError("no CIFAR-10 records found under " + path.string());
  return all;
}

namespace {

// Fixed per-class colour, independent of the sample seed so that separately
// generated splits share class definitions.
float class_colour(int cls, Index channel) {
  const double golden = 0.6180339887498949;
  const double f = std::fmod(static_cast<double>((cls + 1) * (channel + 2)) * golden, 1.0);
  return static_cast<float>(0.3 + 0.7 * f);
}

Dataset gen_static(std::mt19937_64& rng, Index count, Index side, int classes) {
  Dataset ds;
  ds.input = InputKind::kStatic;
  ds.channels = 3;
  ds.height = side;
  ds.width = side;
  ds.num_classes = classes;
  ds.data.resize(static_cast<std::size_t>(count * 3 * side * side));
  std::normal_distribution<double> noise(0.0, 0.04);
  std::normal_distribution<double> jitter(0.0, 0.4);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, classes - 1);
  const double sigma = std::max(1.0, static_cast<double>(side) / (2.5 * classes));
  for (Index i = 0; i < count; ++i) {
    const int cls = pick(rng);
    ds.labels.push_back(cls);
    // Row encodes the class; the column is free so horizontal flips keep labels.
    const double cy = (cls + 0.5) * static_cast<double>(side) / classes + jitter(rng);
    const double cx = static_cast<double>(side) * (0.25 + 0.5 * unit(rng));
    const double amp = 0.6 + 0.4 * unit(rng);
    float* img = ds.data.data() + i * 3 * side * side;
    for (Index c = 0; c < 3; ++c) {
      for (Index y = 0; y < side; ++y) {
        for (Index x = 0; x < side; ++x) {
          const double dy = static_cast<double>(y) - cy;
          const double dx = static_cast<double>(x) - cx;
          const double blob = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
          const double v = 0.1 + amp * class_colour(cls, c) * blob + noise(rng);
          img[(c * side + y) * side + x] = quantize(v);
        }
      }
    }
  }
  return ds;
}

Dataset gen_events(std::mt19937_64& rng, Index count, Index side, int classes, Index steps) {
  Dataset ds;
  ds.input = InputKind::kEvents;
  ds.channels = 2;
  ds.height = side;
  ds.width = side;
  ds.timesteps = steps;
  ds.num_classes = classes;
  ds.data.assign(static_cast<std::size_t>(count * steps * 2 * side * side), 0.0f);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, classes - 1);
  const double speed = std::max(1.0, static_cast<double>(side) / 16.0);
  auto stamp = [side](float* frame, double px, double py) {
    for (Index oy = 0; oy < 2; ++oy) {
      for (Index ox = 0; ox < 2; ++ox) {
        const auto x = static_cast<Index>(std::floor(px)) + ox;
        const auto y = static_cast<Index>(std::floor(py)) + oy;
        if (x >= 0 && x < side && y >= 0 && y < side) frame[y * side + x] = 1.0f;
      }
    }
  };
  for (Index i = 0; i < count; ++i) {
    const int cls = pick(rng);
    ds.labels.push_back(cls);
    const double angle = 2.0 * std::numbers::pi * cls / classes;
    const double vx = speed * std::cos(angle);
    const double vy = speed * std::sin(angle);
    const double span = static_cast<double>(side) / 4.0;
    const double x0 = static_cast<double>(side) / 2.0 + span * (unit(rng) - 0.5);
    const double y0 = static_cast<double>(side) / 2.0 + span * (unit(rng) - 0.5);
    float* sample = ds.data.data() + i * steps * 2 * side * side;
    for (Index t = 0; t < steps; ++t) {
      float* on = sample + (t * 2 + 0) * side * side;
      float* off = sample + (t * 2 + 1) * side * side;
      const double tt = static_cast<double>(t);
      stamp(on, x0 + vx * tt, y0 + vy * tt);
      stamp(off, x0 + vx * (tt - 1), y0 + vy * (tt - 1));
      for (Index p = 0; p < side * side; ++p) {
        if (on[p] != 0.0f) off[p] = 0.0f;
        if (unit(rng) < 0.002) (unit(rng) < 0.5 ? on : off)[p] = 1.0f;
      }
    }
  }
  return ds;
}

}  // namespace

Dataset gen_synthetic(DatasetKind kind, std::uint64_t seed, Index count, Index image_size, int num_classes,
                      Index timesteps) {
  if (count <= 0) throw ContractError("synthetic dataset needs a positive count");
  if (num_classes < 2) throw ContractError("synthetic dataset needs at least two classes");
  if (image_size < 4) throw ContractError("synthetic image size must be at least 4");
  std::mt19937_64 rng(seed);
  switch (kind) {
    case DatasetKind::kSyntheticStatic: return gen_static(rng, count, image_size, num_classes);
    case DatasetKind::kSyntheticEvents:
      if (timesteps <= 0) throw ContractError("event dataset needs positive timesteps");
      return gen_events(rng, count, image_size, num_classes, timesteps);
    case DatasetKind::kCifar10Binary: break;
  }
  throw ContractError("gen_synthetic cannot generate " + to_string(kind));
}

Dataset load_dataset(const DatasetSpec& spec, bool train) {
  Dataset ds;
  if (!spec.path.empty() && spec.kind != DatasetKind::kCifar10Binary) {
    ds = load_dataset_file(spec.path);
    if (spec.count > 0 && spec.count < ds.size()) {
      std::vector<Index> head(static_cast<std::size_t>(spec.count));
      std::iota(head.begin(), head.end(), Index{0});
      ds = ds.subset(head);
    }
  } else if (spec.kind == DatasetKind::kCifar10Binary) {
    ds = load_cifar10(spec.path, train, spec.count);
  } else {
    // Test split draws from a different stream of the same generator.
    const std::uint64_t seed = train ? spec.seed : spec.seed ^ 0x9e3779b97f4a7c15ULL;
    ds = gen_synthetic(spec.kind, seed, spec.count > 0 ? spec.count : 1024, spec.image_size, spec.num_classes,
                       spec.timesteps);
  }
  if (!spec.mean.empty()) ds.mean = spec.mean;
  if (!spec.stddev.empty()) ds.stddev = spec.stddev;
  return ds;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double fraction, std::uint64_t seed) {
  if (fraction < 0 || fraction >= 1) throw ContractError("split fraction must lie in [0, 1)");
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto held = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(order.size())));
  std::vector<Index> first(order.begin(), order.end() - static_cast<std::ptrdiff_t>(held));
  std::vector<Index> second(order.end() - static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  return {data.subset(first), data.subset(second)};
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  nlohmann::ordered_json header;
  header["input"] = data.input == InputKind::kStatic ? "static" : "events";
  header["count"] = data.size();
  header["timesteps"] = data.timesteps;
  header["channels"] = data.channels;
  header["height"] = data.height;
  header["width"] = data.width;
  header["num_classes"] = data.num_classes;
  header["mean"] = data.mean;
  header["stddev"] = data.stddev;
  const std::string text = header.dump();

  std::string bytes(kDatasetMagic, 8);
  auto put_u32 = [&bytes](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put_u32(kDatasetVersion);
  put_u32(static_cast<std::uint32_t>(text.size()));
  bytes += text;
  for (int y : data.labels) put_u32(static_cast<std::uint32_t>(y));
  for (float v : data.data) {
    const float q = quantize(v);
    if (q != v) throw ContractError("dataset value " + std::to_string(v) + " is not a multiple of 1/255");
    bytes.push_back(static_cast<char>(std::lround(v * 255.0f)));
  }
  write_file_atomic(path, bytes);
}

Dataset load_dataset_file(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size()) {
      throw FormatError(path.string() + ": truncated at byte offset " + std::to_string(pos));
    }
  };
  auto get_u32 = [&]() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  };
  need(8);
  if (bytes.compare(0, 8, kDatasetMagic) != 0) throw FormatError(path.string() + ": not a dataset file");
  pos = 8;
  const std::uint32_t version = get_u32();
  if (version != kDatasetVersion) {
    throw FormatError(path.string() + ": dataset version " + std::to_string(version) + " unsupported");
  }
  const std::uint32_t hlen = get_u32();
  need(hlen);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  pos += hlen;
  Dataset ds;
  try {
    ds.input = header.at("input").get<std::string>() == "events" ? InputKind::kEvents : InputKind::kStatic;
    ds.timesteps = header.at("timesteps").get<Index>();
    ds.channels = header.at("channels").get<Index>();
    ds.height = header.at("height").get<Index>();
    ds.width = header.at("width").get<Index>();
    ds.num_classes = header.at("num_classes").get<int>();
    ds.mean = header.at("mean").get<std::vector<float>>();
    ds.stddev = header.at("stddev").get<std::vector<float>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  const auto count = header.at("count").get<Index>();
  for (Index i = 0; i < count; ++i) ds.labels.push_back(static_cast<int>(get_u32()));
  const auto n = static_cast<std::size_t>(count * ds.sample_numel());
  need(n);
  ds.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.data[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i])) / 255.0f;
  pos += n;
  if (pos != bytes.size()) throw FormatError(path.string() + ": trailing bytes at offset " + std::to_string(pos));
  return ds;
}

Batch make_batch(const Dataset& data, std::span<const Index> indices, const AugmentConfig& aug, std::mt19937_64* rng) {
  const auto batch = static_cast<Index>(indices.size());
  const Index c = data.channels;
  const Index h = data.height;
  const Index w = data.width;
  const Index steps = data.input == InputKind::kEvents ? data.timesteps : 1;
  const Index plane = h * w;
  Array<float> out = Array<float>::Zero(steps * batch * c * plane);
  Batch b;
  b.labels.reserve(indices.size());
  for (Index bi = 0; bi < batch; ++bi) {
    const Index i = indices[static_cast<std::size_t>(bi)];
    if (i < 0 || i >= data.size()) throw ContractError("sample index " + std::to_string(i) + " out of range");
    b.labels.push_back(data.labels[static_cast<std::size_t>(i)]);
    bool flip = false;
    Index dx = 0;
    Index dy = 0;
    if (rng) {
      if (aug.flip) flip = std::uniform_int_distribution<int>(0, 1)(*rng) == 1;
      if (aug.pad > 0 && data.input == InputKind::kStatic) {
        std::uniform_int_distribution<Index> shift(-aug.pad, aug.pad);
        dx = shift(*rng);
        dy = shift(*rng);
      }
    }
    const auto src = data.sample(i);
    for (Index t = 0; t < steps; ++t) {
      for (Index ch = 0; ch < c; ++ch) {
        const float m = data.mean.empty() ? 0.0f : data.mean[static_cast<std::size_t>(ch)];
        const float s = data.stddev.empty() ? 1.0f : data.stddev[static_cast<std::size_t>(ch)];
        const float* in = src.data() + (t * c + ch) * plane;
        float* dst = out.data() + ((t * batch + bi) * c + ch) * plane;
        for (Index y = 0; y < h; ++y) {
          for (Index x = 0; x < w; ++x) {
            const Index sy = y + dy;
            const Index sx0 = x + dx;
            const Index sx = flip ? w - 1 - sx0 : sx0;
            const float v = (sy >= 0 && sy < h && sx0 >= 0 && sx0 < w) ? in[sy * w + sx] : 0.0f;
            dst[y * w + x] = (v - m) / s;
          }
        }
      }
    }
  }
  if (data.input == InputKind::kEvents) {
    b.input = Var<float>::constant({steps, batch, c, h, w}, std::move(out));
  } else {
    b.input = Var<float>::constant({batch, c, h, w}, std::move(out));
  }
  return b;
}

}  // namespace spikemoe
