// Datasets (CIFAR-10 binary format, synthetic sets) and the checkpoint
// container. Checkpoints are little-endian fixed-width binary with explicit
// dtype tags, so sizes are diffable and the format is language-portable.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "instabnn/bitops.hpp"
#include "instabnn/tensor.hpp"

namespace instabnn {

struct Sample {
  Tensor image;  // (1, C, H, W), normalized
  int label = 0;
};

struct Dataset {
  std::vector<Sample> samples;
  int num_classes = 0;
  bool augment = false;  // pad-4 random crop + horizontal flip at batch time

  std::size_t size() const { return samples.size(); }
  Shape image_shape() const {
    detail::check(!samples.empty(), "dataset: empty");
    return samples[0].image.shape();
  }
};

// ---------------------------------------------------------------------------
// CIFAR-10 binary layout: 3073-byte records, 1 label byte + 3072 pixel bytes
// in channel-major RGB order.

inline constexpr float kCifarMean[3] = {0.4914f, 0.4822f, 0.4465f};
inline constexpr float kCifarStd[3] = {0.2470f, 0.2435f, 0.2616f};

inline Dataset load_cifar10_file(const std::string& path, bool augment = false,
                                 std::size_t limit = 0) {
  std::ifstream in(path, std::ios::binary);
  detail::check(static_cast<bool>(in), "cifar: cannot open " + path);
  in.seekg(0, std::ios::end);
  const std::streamoff bytes = in.tellg();
  in.seekg(0);
  detail::check(bytes > 0 && bytes % 3073 == 0,
                "cifar: " + path + " is truncated (size " + std::to_string(bytes) +
                    " not a multiple of 3073)");
  std::size_t records = static_cast<std::size_t>(bytes / 3073);
  if (limit > 0) records = std::min(records, limit);

  Dataset ds;
  ds.num_classes = 10;
  ds.augment = augment;
  ds.samples.reserve(records);
  std::vector<unsigned char> rec(3073);
  for (std::size_t r = 0; r < records; ++r) {
    in.read(reinterpret_cast<char*>(rec.data()), 3073);
    detail::check(static_cast<bool>(in), "cifar: short read in " + path);
    const int label = rec[0];
    detail::check(label <= 9, "cifar: label byte " + std::to_string(label) +
                                  " out of range in " + path);
    Sample s;
    s.label = label;
    s.image = Tensor(Shape{1, 3, 32, 32});
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 1024; ++i) {
        const float raw = rec[1 + c * 1024 + i] / 255.0f;
        s.image[c * 1024 + i] = (raw - kCifarMean[c]) / kCifarStd[c];
      }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

struct Cifar10 {
  Dataset train, test;
};

// Standard directory layout: data_batch_1..5.bin + test_batch.bin. Missing
// trailing batch files are tolerated (subset directories).
inline Cifar10 load_cifar10(const std::string& dir, std::size_t train_limit = 0,
                            std::size_t test_limit = 0) {
  namespace fs = std::filesystem;
  Cifar10 out;
  out.train.num_classes = out.test.num_classes = 10;
  out.train.augment = true;
  for (int b = 1; b <= 5; ++b) {
    const std::string path =
        (fs::path(dir) / ("data_batch_" + std::to_string(b) + ".bin")).string();
    if (!fs::exists(path)) break;
    const std::size_t remaining =
        train_limit > 0 ? train_limit - out.train.samples.size() : 0;
    Dataset part = load_cifar10_file(path, true, remaining);
    for (auto& s : part.samples) out.train.samples.push_back(std::move(s));
    if (train_limit > 0 && out.train.samples.size() >= train_limit) break;
  }
  detail::check(!out.train.samples.empty(), "cifar: no training batches in " + dir);
  out.test = load_cifar10_file((fs::path(dir) / "test_batch.bin").string(), false,
                               test_limit);
  out.test.augment = false;
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic datasets

// separable2: 3x8x8 images whose classes are linearly separable by
// construction, with margin: mean(ch0) - mean(ch1) is forced into
// [0.3, 0.8] for class 1 and the negative band for class 0.
// blobs10: ten fixed class templates plus noise, balanced classes.
inline Dataset synth_dataset(const std::string& kind, int n, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.5);
  Dataset ds;
  if (kind == "separable2") {
    detail::check(n >= 2, "synth: separable2 needs n >= 2");
    ds.num_classes = 2;
    std::uniform_real_distribution<double> band(0.3, 0.8);
    for (int i = 0; i < n; ++i) {
      Sample s;
      s.label = i % 2;
      s.image = Tensor(Shape{1, 3, 8, 8});
      for (std::size_t j = 0; j < s.image.numel(); ++j)
        s.image[j] = static_cast<float>(noise(rng));
      double m0 = 0.0, m1 = 0.0;
      for (int j = 0; j < 64; ++j) {
        m0 += s.image[j];
        m1 += s.image[64 + j];
      }
      const double score = (m0 - m1) / 64.0;
      const double target = s.label == 1 ? band(rng) : -band(rng);
      const float shift = static_cast<float>(target - score);
      for (int j = 0; j < 64; ++j) s.image[j] += shift;
      ds.samples.push_back(std::move(s));
    }
  } else if (kind == "blobs10") {
    detail::check(n >= 10, "synth: blobs10 needs n >= 10 (one per class)");
    ds.num_classes = 10;
    std::vector<Tensor> templates;
    std::normal_distribution<double> tdist(0.0, 0.8);
    for (int k = 0; k < 10; ++k) {
      Tensor t(Shape{1, 3, 8, 8});
      for (std::size_t j = 0; j < t.numel(); ++j)
        t[j] = static_cast<float>(tdist(rng));
      templates.push_back(std::move(t));
    }
    std::normal_distribution<double> jitter(0.0, 0.3);
    for (int i = 0; i < n; ++i) {
      Sample s;
      s.label = i % 10;
      s.image = templates[s.label];
      for (std::size_t j = 0; j < s.image.numel(); ++j)
        s.image[j] += static_cast<float>(jitter(rng));
      ds.samples.push_back(std::move(s));
    }
  } else {
    throw std::invalid_argument("unknown synthetic dataset: " + kind);
  }
  return ds;
}

// The closed-form separator for separable2 (used as a test oracle).
inline int separable2_rule(const Tensor& image) {
  double m0 = 0.0, m1 = 0.0;
  for (int j = 0; j < 64; ++j) {
    m0 += image[j];
    m1 += image[64 + j];
  }
  return m0 - m1 > 0.0 ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Checkpoints

enum class CkptDtype : std::uint8_t { kF32 = 0, kBits = 1, kI32 = 2 };

struct CheckpointEntry {
  std::string name;
  CkptDtype dtype = CkptDtype::kF32;
  Shape shape{1, 1, 1, 1};
  std::vector<float> f32;
  std::vector<std::uint64_t> bits;  // packed payload for kBits
  std::vector<std::int32_t> i32;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  void add_f32(const std::string& name, const Tensor& t) {
    check_unique(name);
    CheckpointEntry e;
    e.name = name;
    e.shape = t.shape();
    e.f32 = t.vec();
    entries.push_back(std::move(e));
  }

  void add_vector(const std::string& name, const std::vector<float>& v) {
    check_unique(name);
    CheckpointEntry e;
    e.name = name;
    e.shape = Shape{1, static_cast<int>(v.size()), 1, 1};
    e.f32 = v;
    entries.push_back(std::move(e));
  }

  void add_bits(const std::string& name, const BitTensor& b) {
    check_unique(name);
    CheckpointEntry e;
    e.name = name;
    e.dtype = CkptDtype::kBits;
    e.shape = b.shape();
    e.bits = b.words();
    entries.push_back(std::move(e));
  }

  void add_i32(const std::string& name, const std::vector<std::int32_t>& v) {
    check_unique(name);
    CheckpointEntry e;
    e.name = name;
    e.dtype = CkptDtype::kI32;
    e.shape = Shape{1, static_cast<int>(v.size()), 1, 1};
    e.i32 = v;
    entries.push_back(std::move(e));
  }

 private:
  void check_unique(const std::string& name) const {
    detail::check(find(name) == nullptr, "checkpoint: duplicate entry " + name);
  }
};

namespace ckptdetail {

inline constexpr char kMagic[8] = {'I', 'B', 'N', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  detail::check(static_cast<bool>(is), "checkpoint: unexpected end of file");
  return v;
}

inline void put_string(std::ostream& os, const std::string& s, bool long_len) {
  if (long_len)
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  else
    put<std::uint16_t>(os, static_cast<std::uint16_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, bool long_len) {
  const std::size_t n = long_len ? get<std::uint32_t>(is) : get<std::uint16_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  detail::check(static_cast<bool>(is), "checkpoint: unexpected end of file");
  return s;
}

}  // namespace ckptdetail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  detail::check(static_cast<bool>(os), "checkpoint: cannot write " + path);
  os.write(ckptdetail::kMagic, 8);
  ckptdetail::put<std::uint32_t>(os, ckptdetail::kVersion);
  ckptdetail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.meta.size()));
  for (const auto& [k, v] : ckpt.meta) {
    ckptdetail::put_string(os, k, false);
    ckptdetail::put_string(os, v, true);
  }
  ckptdetail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    ckptdetail::put_string(os, e.name, false);
    ckptdetail::put<std::uint8_t>(os, static_cast<std::uint8_t>(e.dtype));
    for (int d : {e.shape.n, e.shape.c, e.shape.h, e.shape.w})
      ckptdetail::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    switch (e.dtype) {
      case CkptDtype::kF32:
        detail::check(e.f32.size() == e.shape.numel(),
                      "checkpoint: payload size mismatch in " + e.name);
        ckptdetail::put<std::uint64_t>(os, e.f32.size() * 4);
        os.write(reinterpret_cast<const char*>(e.f32.data()),
                 static_cast<std::streamsize>(e.f32.size() * 4));
        break;
      case CkptDtype::kBits: {
        const std::size_t words_per_map =
            (static_cast<std::size_t>(e.shape.h) * e.shape.w + 63) / 64;
        detail::check(e.bits.size() ==
                          words_per_map * e.shape.n * e.shape.c,
                      "checkpoint: packed payload size mismatch in " + e.name);
        ckptdetail::put<std::uint64_t>(os, e.bits.size() * 8);
        os.write(reinterpret_cast<const char*>(e.bits.data()),
                 static_cast<std::streamsize>(e.bits.size() * 8));
        break;
      }
      case CkptDtype::kI32:
        detail::check(e.i32.size() == e.shape.numel(),
                      "checkpoint: payload size mismatch in " + e.name);
        ckptdetail::put<std::uint64_t>(os, e.i32.size() * 4);
        os.write(reinterpret_cast<const char*>(e.i32.data()),
                 static_cast<std::streamsize>(e.i32.size() * 4));
        break;
    }
  }
  detail::check(static_cast<bool>(os), "checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  detail::check(static_cast<bool>(is), "checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  detail::check(static_cast<bool>(is) &&
                    std::memcmp(magic, ckptdetail::kMagic, 8) == 0,
                "checkpoint: bad magic in " + path);
  const auto version = ckptdetail::get<std::uint32_t>(is);
  detail::check(version == ckptdetail::kVersion,
                "checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  const auto meta_n = ckptdetail::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < meta_n; ++i) {
    std::string k = ckptdetail::get_string(is, false);
    ckpt.meta[k] = ckptdetail::get_string(is, true);
  }
  const auto entries_n = ckptdetail::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < entries_n; ++i) {
    CheckpointEntry e;
    e.name = ckptdetail::get_string(is, false);
    detail::check(ckpt.find(e.name) == nullptr,
                  "checkpoint: duplicate entry " + e.name);
    e.dtype = static_cast<CkptDtype>(ckptdetail::get<std::uint8_t>(is));
    e.shape.n = static_cast<int>(ckptdetail::get<std::uint32_t>(is));
    e.shape.c = static_cast<int>(ckptdetail::get<std::uint32_t>(is));
    e.shape.h = static_cast<int>(ckptdetail::get<std::uint32_t>(is));
    e.shape.w = static_cast<int>(ckptdetail::get<std::uint32_t>(is));
    const auto payload = ckptdetail::get<std::uint64_t>(is);
    switch (e.dtype) {
      case CkptDtype::kF32:
        detail::check(payload == e.shape.numel() * 4,
                      "checkpoint: payload size mismatch in " + e.name);
        e.f32.resize(payload / 4);
        is.read(reinterpret_cast<char*>(e.f32.data()),
                static_cast<std::streamsize>(payload));
        break;
      case CkptDtype::kBits: {
        const std::size_t words_per_map =
            (static_cast<std::size_t>(e.shape.h) * e.shape.w + 63) / 64;
        detail::check(payload == words_per_map * e.shape.n * e.shape.c * 8,
                      "checkpoint: packed payload size mismatch in " + e.name);
        e.bits.resize(payload / 8);
        is.read(reinterpret_cast<char*>(e.bits.data()),
                static_cast<std::streamsize>(payload));
        break;
      }
      case CkptDtype::kI32:
        detail::check(payload == e.shape.numel() * 4,
                      "checkpoint: payload size mismatch in " + e.name);
        e.i32.resize(payload / 4);
        is.read(reinterpret_cast<char*>(e.i32.data()),
                static_cast<std::streamsize>(payload));
        break;
      default:
        throw std::invalid_argument("checkpoint: unknown dtype tag in " + e.name);
    }
    detail::check(static_cast<bool>(is), "checkpoint: unexpected end of file");
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

}  // namespace instabnn
