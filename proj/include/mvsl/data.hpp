// Dataset plumbing: a minimal binary tensor container, JSON manifests,
// deterministic synthetic dataset generation, few-shot episode sampling,
// base/novel splitting, and classification metrics.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvsl/dsg.hpp"
#include "mvsl/encoders.hpp"
#include "mvsl/errors.hpp"
#include "mvsl/prng.hpp"
#include "mvsl/tensor.hpp"

namespace mvsl::data {

// ---- tensor container -------------------------------------------------------
// layout: "MVSL" | version byte | rank u32 LE | dims u32 LE each | f32 LE payload

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> v;

  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t x) {
  unsigned char b[4] = {static_cast<unsigned char>(x), static_cast<unsigned char>(x >> 8),
                        static_cast<unsigned char>(x >> 16), static_cast<unsigned char>(x >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError(std::string("tensor read: truncated ") + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float x) {
  std::uint32_t bits;
  static_assert(sizeof(bits) == sizeof(x));
  std::memcpy(&bits, &x, 4);
  put_u32(out, bits);
}

inline void put_u64(std::ostream& out, std::uint64_t x) {
  put_u32(out, static_cast<std::uint32_t>(x));
  put_u32(out, static_cast<std::uint32_t>(x >> 32));
}

inline std::uint64_t get_u64(std::istream& in, const char* what) {
  std::uint64_t lo = get_u32(in, what);
  std::uint64_t hi = get_u32(in, what);
  return lo | (hi << 32);
}

inline void put_f64(std::ostream& out, double x) {
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(x));
  std::memcpy(&bits, &x, 8);
  put_u64(out, bits);
}

inline double get_f64(std::istream& in, const char* what) {
  std::uint64_t bits = get_u64(in, what);
  double x;
  std::memcpy(&x, &bits, 8);
  return x;
}

inline float get_f32(std::istream& in, const char* what) {
  std::uint32_t bits = get_u32(in, what);
  float x;
  std::memcpy(&x, &bits, 4);
  return x;
}

}  // namespace detail

inline void save_tensor(const Tensor& t, const std::string& path) {
  if (t.v.size() != t.count()) throw InputError("save_tensor: payload size does not match dims");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_tensor: cannot write '" + path + "'");
  out.write("MVSL", 4);
  out.put(static_cast<char>(1));  // version
  detail::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) detail::put_u32(out, d);
  for (float x : t.v) detail::put_f32(out, x);
  if (!out) throw IoError("save_tensor: write failed for '" + path + "'");
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_tensor: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "MVSL")
    throw IoError("load_tensor: '" + path + "' is not a tensor container (bad magic)");
  int version = in.get();
  if (version != 1) throw IncompatError("load_tensor: unsupported container version");
  std::uint32_t rank = detail::get_u32(in, "rank");
  if (rank > 8) throw IoError("load_tensor: implausible rank");
  Tensor t;
  for (std::uint32_t i = 0; i < rank; ++i) t.dims.push_back(detail::get_u32(in, "dims"));
  std::size_t n = t.count();
  if (n > (1u << 26)) throw IoError("load_tensor: implausible element count");
  t.v.reserve(n);
  for (std::size_t i = 0; i < n; ++i) t.v.push_back(detail::get_f32(in, "payload"));
  return t;
}

// ---- manifests -----------------------------------------------------------------

struct SampleRef {
  std::string path;  // relative to the manifest directory
  int label = 0;
  std::string split;  // train | val | test

  bool operator==(const SampleRef&) const = default;
};

struct DatasetManifest {
  std::vector<std::string> class_names;
  std::string prompt_corpus;  // optional, relative path
  std::vector<SampleRef> samples;
  std::string base_dir;  // set on load; not serialized

  int n_classes() const { return static_cast<int>(class_names.size()); }

  std::string resolve(const std::string& rel) const {
    if (rel.empty() || rel.front() == '/') return rel;
    return base_dir.empty() ? rel : base_dir + "/" + rel;
  }

  void validate() const {
    if (class_names.empty()) throw InputError("DatasetManifest: no classes");
    for (const auto& s : samples) {
      if (s.label < 0 || s.label >= n_classes())
        throw InputError("DatasetManifest: label out of range for '" + s.path + "'");
      if (s.split != "train" && s.split != "val" && s.split != "test")
        throw InputError("DatasetManifest: unknown split '" + s.split + "'");
    }
  }
};

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  m.validate();
  nlohmann::json j;
  j["classes"] = m.class_names;
  if (!m.prompt_corpus.empty()) j["prompt_corpus"] = m.prompt_corpus;
  j["samples"] = nlohmann::json::array();
  for (const auto& s : m.samples)
    j["samples"].push_back({{"path", s.path}, {"label", s.label}, {"split", s.split}});
  std::ofstream out(path);
  if (!out) throw IoError("save_manifest: cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_manifest: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_manifest: '" + path + "' is not valid JSON: " + e.what());
  }
  DatasetManifest m;
  try {
    m.class_names = j.at("classes").get<std::vector<std::string>>();
    m.prompt_corpus = j.value("prompt_corpus", std::string{});
    for (const auto& s : j.at("samples"))
      m.samples.push_back({s.at("path").get<std::string>(), s.at("label").get<int>(),
                           s.at("split").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("load_manifest: malformed manifest: ") + e.what());
  }
  m.base_dir = std::filesystem::path(path).parent_path().string();
  m.validate();
  for (const auto& s : m.samples)
    if (!std::filesystem::exists(m.resolve(s.path)))
      throw IoError("load_manifest: sample tensor missing: '" + m.resolve(s.path) + "'");
  return m;
}

// ---- synthetic dataset ----------------------------------------------------------

// Per-class mean images are random block patterns on a 4x4-aligned grid; each
// sample is mean + Gaussian pixel noise, clamped to [0,1]. Deterministic in
// (C, per_class, sigma, seed).
inline DatasetManifest generate_synthetic(int n_classes, int per_class, double sigma,
                                          std::uint64_t seed, const std::string& out_dir,
                                          int side = 16, int channels = 1) {
  if (n_classes < 2) throw ConfigError("generate_synthetic: need at least 2 classes");
  if (per_class < 2) throw ConfigError("generate_synthetic: need at least 2 samples per class");
  if (sigma < 0.0) throw ConfigError("generate_synthetic: sigma must be nonnegative");
  if (side % 4 != 0) throw ConfigError("generate_synthetic: side must be a multiple of 4");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("generate_synthetic: cannot create '" + out_dir + "'");

  DatasetManifest m;
  m.base_dir = out_dir;
  const int cells = side / 4;
  const int n_train = (per_class * 6) / 10;
  const int n_val = (per_class * 2) / 10;

  dsg::PromptCorpus corpus;
  corpus.modality = "synthetic";

  for (int c = 0; c < n_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof(name), "class_%02d", c);
    m.class_names.push_back(name);
    corpus.class_names.push_back(name);
    corpus.prompts.push_back({std::string("a synthetic pattern of ") + name,
                              std::string("a grid texture resembling ") + name,
                              std::string("an image showing the layout of ") + name,
                              std::string("a noisy sample of the ") + name + " pattern"});

    // class mean: per-4x4-cell intensity in [0.2, 0.8]
    SplitMix64 mean_rng(derive_seed(seed, 0xC1A5500000000000ULL + static_cast<std::uint64_t>(c)));
    std::vector<double> cell(static_cast<std::size_t>(cells) * cells * channels);
    for (auto& x : cell) x = 0.2 + 0.6 * mean_rng.next_uniform();

    SplitMix64 noise_rng(derive_seed(seed, 0x4015E00000000000ULL + static_cast<std::uint64_t>(c)));
    for (int i = 0; i < per_class; ++i) {
      Tensor t;
      t.dims = {static_cast<std::uint32_t>(channels), static_cast<std::uint32_t>(side),
                static_cast<std::uint32_t>(side)};
      t.v.resize(t.count());
      std::size_t idx = 0;
      for (int ch = 0; ch < channels; ++ch)
        for (int y = 0; y < side; ++y)
          for (int x = 0; x < side; ++x) {
            double mu = cell[static_cast<std::size_t>((ch * cells + y / 4) * cells + x / 4)];
            double v = mu + sigma * noise_rng.next_normal();
            t.v[idx++] = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
      char fname[40];
      std::snprintf(fname, sizeof(fname), "class_%02d_%03d.mvsl", c, i);
      save_tensor(t, out_dir + "/" + fname);
      std::string split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
      m.samples.push_back({fname, c, split});
    }
  }

  dsg::save_prompt_corpus(corpus, out_dir + "/corpus.json");
  m.prompt_corpus = "corpus.json";
  save_manifest(m, out_dir + "/manifest.json");
  return m;
}

// ---- episodes --------------------------------------------------------------------

struct FewShotEpisode {
  int k = 0;
  std::vector<int> support;  // indices into manifest.samples, class-major
  std::vector<int> query;    // test-split indices, manifest order
};

inline FewShotEpisode sample_episode(const DatasetManifest& m, int k, std::uint64_t seed) {
  if (k < 1) throw ConfigError("sample_episode: K must be at least 1");
  m.validate();
  FewShotEpisode ep;
  ep.k = k;
  for (int c = 0; c < m.n_classes(); ++c) {
    std::vector<int> pool;
    for (std::size_t i = 0; i < m.samples.size(); ++i)
      if (m.samples[i].label == c && m.samples[i].split == "train")
        pool.push_back(static_cast<int>(i));
    if (static_cast<int>(pool.size()) < k)
      throw InputError("sample_episode: class '" + m.class_names[static_cast<std::size_t>(c)] +
                       "' has " + std::to_string(pool.size()) + " train samples, needs " +
                       std::to_string(k));
    SplitMix64 rng(derive_seed(seed, 0xE9150DE000000000ULL + static_cast<std::uint64_t>(c)));
    rng.shuffle(pool);
    for (int i = 0; i < k; ++i) ep.support.push_back(pool[static_cast<std::size_t>(i)]);
  }
  for (std::size_t i = 0; i < m.samples.size(); ++i)
    if (m.samples[i].split == "test") ep.query.push_back(static_cast<int>(i));
  return ep;
}

// ---- base / novel splitting ---------------------------------------------------------

inline std::pair<DatasetManifest, DatasetManifest> base_novel_split(const DatasetManifest& m) {
  if (m.n_classes() < 2) throw InputError("base_novel_split: need at least 2 classes");
  const int n_base = (m.n_classes() + 1) / 2;  // first ceil(C/2) classes are base
  DatasetManifest base, novel;
  base.base_dir = novel.base_dir = m.base_dir;
  base.prompt_corpus = novel.prompt_corpus = m.prompt_corpus;
  for (int c = 0; c < m.n_classes(); ++c)
    (c < n_base ? base : novel).class_names.push_back(m.class_names[static_cast<std::size_t>(c)]);
  for (const auto& s : m.samples) {
    if (s.label < n_base)
      base.samples.push_back(s);
    else
      novel.samples.push_back({s.path, s.label - n_base, s.split});
  }
  return {std::move(base), std::move(novel)};
}

// ---- image loading ------------------------------------------------------------------

inline enc::ImageBatch load_images(const DatasetManifest& m, const std::vector<int>& indices,
                                   std::vector<int>* labels = nullptr) {
  if (indices.empty()) throw InputError("load_images: empty index list");
  enc::ImageBatch batch;
  if (labels) labels->clear();
  for (std::size_t n = 0; n < indices.size(); ++n) {
    int i = indices[n];
    if (i < 0 || i >= static_cast<int>(m.samples.size()))
      throw InputError("load_images: sample index out of range");
    const auto& s = m.samples[static_cast<std::size_t>(i)];
    Tensor t = load_tensor(m.resolve(s.path));
    if (t.dims.size() != 3 || t.dims[1] != t.dims[2])
      throw IncompatError("load_images: expected a (channels, side, side) tensor in '" + s.path +
                          "'");
    if (n == 0) {
      batch = enc::ImageBatch(static_cast<int>(indices.size()), static_cast<int>(t.dims[0]),
                              static_cast<int>(t.dims[1]));
    } else if (static_cast<int>(t.dims[0]) != batch.channels ||
               static_cast<int>(t.dims[1]) != batch.side) {
      throw IncompatError("load_images: inconsistent tensor shapes in dataset");
    }
    std::size_t per = t.count();
    for (std::size_t j = 0; j < per; ++j)
      batch.v[n * per + j] = static_cast<double>(t.v[j]);
    if (labels) labels->push_back(s.label);
  }
  batch.validate();
  return batch;
}

// ---- metrics --------------------------------------------------------------------------

inline double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw InputError("accuracy: prediction/label lists must be equal length and nonempty");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (predictions[i] == labels[i]) ++correct;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(predictions.size());
}

inline std::vector<double> per_class_accuracy(const std::vector<int>& predictions,
                                              const std::vector<int>& labels, int n_classes) {
  std::vector<double> correct(static_cast<std::size_t>(n_classes), 0.0);
  std::vector<double> total(static_cast<std::size_t>(n_classes), 0.0);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes) throw InputError("per_class_accuracy: bad label");
    total[static_cast<std::size_t>(labels[i])] += 1.0;
    if (predictions[i] == labels[i]) correct[static_cast<std::size_t>(labels[i])] += 1.0;
  }
  std::vector<double> out(static_cast<std::size_t>(n_classes), 0.0);
  for (int c = 0; c < n_classes; ++c)
    out[static_cast<std::size_t>(c)] =
        total[static_cast<std::size_t>(c)] > 0.0
            ? 100.0 * correct[static_cast<std::size_t>(c)] / total[static_cast<std::size_t>(c)]
            : 0.0;
  return out;
}

inline double harmonic_mean(double a, double b) {
  if (a < 0.0 || b < 0.0) throw InputError("harmonic_mean: accuracies must be nonnegative");
  if (a == 0.0 || b == 0.0) return 0.0;
  return 2.0 * a * b / (a + b);
}

struct MetricsReport {
  std::string protocol;  // fewshot | base2novel | zeroshot
  int k = 0;
  std::vector<std::uint64_t> seeds;
  double acc = 0.0;  // percent (mean over seeds when aggregated)
  std::vector<double> per_class;
  bool has_base_novel = false;
  double base = 0.0, novel = 0.0, hm = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["protocol"] = protocol;
    if (k > 0) j["K"] = k;
    j["seeds"] = seeds;
    j["accuracy"] = acc;
    j["per_class"] = per_class;
    if (has_base_novel) {
      j["base"] = base;
      j["novel"] = novel;
      j["hm"] = hm;
    }
    return j;
  }
};

}  // namespace mvsl::data
