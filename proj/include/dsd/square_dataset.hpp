#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsd/checkpoint.hpp"
#include "dsd/rng.hpp"
#include "dsd/tensor.hpp"

namespace dsd {

// The three Square semantics, in the order the latent layout uses them.
enum Factor : int {
  kSquareColor = 0,
  kPosition = 1,
  kBackgroundColor = 2,
};
constexpr int kNumFactors = 3;

constexpr int kPaletteSize = 6;
// Saturated palette in the model's pixel range [-1, 1].
constexpr double kPalette[kPaletteSize][3] = {
    {+1, -1, -1},  // red
    {-1, +1, -1},  // green
    {-1, -1, +1},  // blue
    {+1, +1, -1},  // yellow
    {+1, -1, +1},  // magenta
    {-1, +1, +1},  // cyan
};

struct SquareFactors {
  int square_color = 0;
  int background_color = 1;
  int row = 0;
  int col = 0;
};

struct DatasetManifest {
  int train_pairs = 0;
  int val_pairs = 0;
  int test_pairs = 0;
  double supervision_rate = 1.0;
  double disturb_rate = 0.0;   // fraction of labeled pairs given a wrong group
  int canvas = 16;
  int square_side = 4;
  int position_step = 4;       // squares sit on this grid so position is a class
  int palette = kPaletteSize;
  std::uint64_t seed = 0;

  int grid_per_side() const { return (canvas - square_side) / position_step + 1; }
  int position_classes() const { return grid_per_side() * grid_per_side(); }
  int pixels_per_image() const { return 3 * canvas * canvas; }

  int factor_classes(int factor) const {
    return factor == kPosition ? position_classes() : palette;
  }

  void validate() const {
    if (train_pairs < 0 || val_pairs < 0 || test_pairs < 0)
      throw Error("manifest: negative pair count");
    if (supervision_rate < 0.0 || supervision_rate > 1.0)
      throw Error("manifest: supervision_rate must be in [0,1]");
    if (disturb_rate < 0.0 || disturb_rate > 1.0)
      throw Error("manifest: disturb_rate must be in [0,1]");
    if (canvas <= 0 || square_side <= 0 || square_side > canvas)
      throw Error("manifest: square must fit the canvas");
    if (position_step <= 0 || (canvas - square_side) % position_step != 0)
      throw Error("manifest: position_step must tile the canvas minus the square");
    if (palette < 2 || palette > kPaletteSize)
      throw Error("manifest: palette must have 2.." + std::to_string(kPaletteSize) + " colors");
  }

  int labeled_train_pairs() const {
    return static_cast<int>(supervision_rate * train_pairs);
  }
};

inline int position_class(const SquareFactors& f, const DatasetManifest& m) {
  return (f.row / m.position_step) * m.grid_per_side() + f.col / m.position_step;
}

inline int factor_class(const SquareFactors& f, int factor, const DatasetManifest& m) {
  switch (factor) {
    case kSquareColor: return f.square_color;
    case kPosition: return position_class(f, m);
    case kBackgroundColor: return f.background_color;
  }
  throw Error("unknown factor index " + std::to_string(factor));
}

inline void validate_factors(const SquareFactors& f, const DatasetManifest& m) {
  if (f.square_color < 0 || f.square_color >= m.palette || f.background_color < 0 ||
      f.background_color >= m.palette)
    throw Error("factors: palette index out of range");
  if (f.square_color == f.background_color)
    throw Error("factors: square and background colors must differ");
  if (f.row < 0 || f.col < 0 || f.row + m.square_side > m.canvas ||
      f.col + m.square_side > m.canvas)
    throw Error("factors: square out of canvas bounds");
}

// Rasterizes one observation as a {3, canvas, canvas} tensor.
inline Tensor render_square(const SquareFactors& f, const DatasetManifest& m) {
  validate_factors(f, m);
  Tensor img = Tensor::zeros({3, m.canvas, m.canvas});
  for (int c = 0; c < 3; ++c) {
    const double bg = kPalette[f.background_color][c];
    const double fg = kPalette[f.square_color][c];
    double* plane = img.data.data() + static_cast<std::size_t>(c) * m.canvas * m.canvas;
    std::fill_n(plane, m.canvas * m.canvas, bg);
    for (int r = f.row; r < f.row + m.square_side; ++r)
      std::fill_n(plane + static_cast<std::size_t>(r) * m.canvas + f.col, m.square_side, fg);
  }
  return img;
}

struct PairRecord {
  Tensor image_a;
  Tensor image_b;
  int label = -1;  // group index, -1 = unlabeled
  SquareFactors factors_a;
  SquareFactors factors_b;
};

inline SquareFactors sample_factors(Rng& rng, const DatasetManifest& m) {
  SquareFactors f;
  f.square_color = rng.index(m.palette);
  f.background_color = rng.index(m.palette - 1);
  if (f.background_color >= f.square_color) ++f.background_color;
  f.row = rng.index(m.grid_per_side()) * m.position_step;
  f.col = rng.index(m.grid_per_side()) * m.position_step;
  return f;
}

namespace detail {

// Draws a palette color distinct from `exclude`.
inline int color_excluding(Rng& rng, int exclude, int palette) {
  int c = rng.index(palette - 1);
  return c >= exclude ? c + 1 : c;
}

}  // namespace detail

// Two factor draws that agree exactly on factor k and are independent
// otherwise; the color-distinctness constraint is honored per image.
inline PairRecord sample_labeled_pair(Rng& rng, int k, const DatasetManifest& m) {
  if (k < 0 || k >= kNumFactors) throw Error("sample_labeled_pair: group index out of range");
  SquareFactors a, b;
  switch (k) {
    case kSquareColor: {
      const int shared = rng.index(m.palette);
      a.square_color = b.square_color = shared;
      a.background_color = detail::color_excluding(rng, shared, m.palette);
      b.background_color = detail::color_excluding(rng, shared, m.palette);
      a.row = rng.index(m.grid_per_side()) * m.position_step;
      a.col = rng.index(m.grid_per_side()) * m.position_step;
      b.row = rng.index(m.grid_per_side()) * m.position_step;
      b.col = rng.index(m.grid_per_side()) * m.position_step;
      break;
    }
    case kPosition: {
      const int row = rng.index(m.grid_per_side()) * m.position_step;
      const int col = rng.index(m.grid_per_side()) * m.position_step;
      a.row = b.row = row;
      a.col = b.col = col;
      a.square_color = rng.index(m.palette);
      a.background_color = detail::color_excluding(rng, a.square_color, m.palette);
      b.square_color = rng.index(m.palette);
      b.background_color = detail::color_excluding(rng, b.square_color, m.palette);
      break;
    }
    case kBackgroundColor: {
      const int shared = rng.index(m.palette);
      a.background_color = b.background_color = shared;
      a.square_color = detail::color_excluding(rng, shared, m.palette);
      b.square_color = detail::color_excluding(rng, shared, m.palette);
      a.row = rng.index(m.grid_per_side()) * m.position_step;
      a.col = rng.index(m.grid_per_side()) * m.position_step;
      b.row = rng.index(m.grid_per_side()) * m.position_step;
      b.col = rng.index(m.grid_per_side()) * m.position_step;
      break;
    }
  }
  PairRecord rec;
  rec.factors_a = a;
  rec.factors_b = b;
  rec.label = k;
  rec.image_a = render_square(a, m);
  rec.image_b = render_square(b, m);
  return rec;
}

inline PairRecord sample_unlabeled_pair(Rng& rng, const DatasetManifest& m) {
  PairRecord rec;
  rec.factors_a = sample_factors(rng, m);
  rec.factors_b = sample_factors(rng, m);
  rec.label = -1;
  rec.image_a = render_square(rec.factors_a, m);
  rec.image_b = render_square(rec.factors_b, m);
  return rec;
}

struct SquareDataset {
  DatasetManifest manifest;
  std::vector<PairRecord> train;
  std::vector<PairRecord> val;
  std::vector<PairRecord> test;

  const std::vector<PairRecord>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw Error("unknown split '" + name + "'");
  }
};

// --- manifest JSON ------------------------------------------------------

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  return nlohmann::json{{"train_pairs", m.train_pairs},
                        {"val_pairs", m.val_pairs},
                        {"test_pairs", m.test_pairs},
                        {"supervision_rate", m.supervision_rate},
                        {"disturb_rate", m.disturb_rate},
                        {"canvas", m.canvas},
                        {"square_side", m.square_side},
                        {"position_step", m.position_step},
                        {"palette", m.palette},
                        {"seed", m.seed}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  const auto require = [&](const char* key) -> const nlohmann::json& {
    auto it = j.find(key);
    if (it == j.end()) throw IoError(std::string("manifest: missing key '") + key + "'");
    return *it;
  };
  const auto fetch = [&](const char* key, auto& out) {
    try {
      require(key).get_to(out);
    } catch (const nlohmann::json::exception&) {
      throw IoError(std::string("manifest: invalid value for key '") + key + "'");
    }
  };
  fetch("train_pairs", m.train_pairs);
  fetch("val_pairs", m.val_pairs);
  fetch("test_pairs", m.test_pairs);
  fetch("supervision_rate", m.supervision_rate);
  if (j.contains("disturb_rate")) fetch("disturb_rate", m.disturb_rate);
  if (j.contains("canvas")) fetch("canvas", m.canvas);
  if (j.contains("square_side")) fetch("square_side", m.square_side);
  if (j.contains("position_step")) fetch("position_step", m.position_step);
  if (j.contains("palette")) fetch("palette", m.palette);
  fetch("seed", m.seed);
  m.validate();
  return m;
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("manifest: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest: malformed JSON in '" + path + "': " + e.what());
  }
  return manifest_from_json(j);
}

// --- DSDD binary pair files ----------------------------------------------

namespace dsdd {

constexpr char kMagic[4] = {'D', 'S', 'D', 'D'};
constexpr std::uint32_t kVersion = 1;

inline void write_i32(std::ostream& os, std::int32_t v) {
  ckpt::write_u32(os, static_cast<std::uint32_t>(v));
}

inline std::int32_t read_i32(std::istream& is) {
  return static_cast<std::int32_t>(ckpt::read_u32(is));
}

inline void save_split(const std::string& path, const std::vector<PairRecord>& pairs,
                       const DatasetManifest& m) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("dataset: cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  ckpt::write_u32(os, kVersion);
  ckpt::write_u32(os, static_cast<std::uint32_t>(m.canvas));
  ckpt::write_u32(os, static_cast<std::uint32_t>(m.canvas));
  ckpt::write_u32(os, 3);  // channels
  ckpt::write_u32(os, static_cast<std::uint32_t>(m.palette));
  ckpt::write_u32(os, static_cast<std::uint32_t>(pairs.size()));
  const auto write_factors = [&](const SquareFactors& f) {
    write_i32(os, f.square_color);
    write_i32(os, f.background_color);
    write_i32(os, position_class(f, m));
  };
  for (const PairRecord& p : pairs) {
    write_i32(os, p.label);
    write_factors(p.factors_a);
    write_factors(p.factors_b);
    ckpt::write_f64(os, p.image_a.data.data(), p.image_a.numel());
    ckpt::write_f64(os, p.image_b.data.data(), p.image_b.numel());
  }
  if (!os) throw IoError("dataset: write failed for '" + path + "'");
}

inline std::vector<PairRecord> load_split(const std::string& path, const DatasetManifest& m) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("dataset: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("dataset: '" + path + "' is not a DSDD file");
  if (ckpt::read_u32(is) != kVersion) throw IoError("dataset: unsupported version in '" + path + "'");
  const int h = static_cast<int>(ckpt::read_u32(is));
  const int w = static_cast<int>(ckpt::read_u32(is));
  const int channels = static_cast<int>(ckpt::read_u32(is));
  const int palette = static_cast<int>(ckpt::read_u32(is));
  if (h != m.canvas || w != m.canvas || channels != 3 || palette != m.palette)
    throw IoError("dataset: '" + path + "' does not match the manifest geometry");
  const std::uint32_t count = ckpt::read_u32(is);
  const auto read_factors = [&]() {
    SquareFactors f;
    f.square_color = read_i32(is);
    f.background_color = read_i32(is);
    const int pos = read_i32(is);
    f.row = pos / m.grid_per_side() * m.position_step;
    f.col = pos % m.grid_per_side() * m.position_step;
    return f;
  };
  std::vector<PairRecord> pairs;
  pairs.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    PairRecord p;
    p.label = read_i32(is);
    if (p.label < -1 || p.label >= kNumFactors)
      throw IoError("dataset: pair " + std::to_string(i) + " has invalid label");
    p.factors_a = read_factors();
    p.factors_b = read_factors();
    p.image_a = Tensor::zeros({3, m.canvas, m.canvas});
    p.image_b = Tensor::zeros({3, m.canvas, m.canvas});
    ckpt::read_f64(is, p.image_a.data.data(), p.image_a.numel());
    ckpt::read_f64(is, p.image_b.data.data(), p.image_b.numel());
    validate_factors(p.factors_a, m);
    validate_factors(p.factors_b, m);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace dsdd

// Generates one split: `labeled` group-annotated pairs followed by
// unlabeled ones, each split on its own RNG stream.
inline std::vector<PairRecord> generate_split(const DatasetManifest& m, int pairs, int labeled,
                                              Rng& rng) {
  std::vector<PairRecord> out;
  out.reserve(pairs);
  for (int i = 0; i < labeled; ++i) {
    const int k = rng.index(kNumFactors);
    PairRecord rec = sample_labeled_pair(rng, k, m);
    if (m.disturb_rate > 0.0 && rng.uniform() < m.disturb_rate) {
      // Disturbed pair: annotation points at a wrong group.
      int wrong = rng.index(kNumFactors - 1);
      if (wrong >= k) ++wrong;
      rec.label = wrong;
    }
    out.push_back(std::move(rec));
  }
  for (int i = labeled; i < pairs; ++i) out.push_back(sample_unlabeled_pair(rng, m));
  return out;
}

struct BuildSummary {
  int labeled_train = 0;
  int unlabeled_train = 0;
};

// Writes train/val/test DSDD files plus the manifest JSON. Labeled pairs
// with disturb_rate 0 are verified to agree on their group factor before
// anything hits disk.
inline BuildSummary build_dataset(const DatasetManifest& m, const std::string& out_dir) {
  m.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  SquareDataset ds;
  ds.manifest = m;
  const int labeled = m.labeled_train_pairs();
  {
    Rng rng(derive_seed(m.seed, "split-train"));
    ds.train = generate_split(m, m.train_pairs, labeled, rng);
  }
  {
    Rng rng(derive_seed(m.seed, "split-val"));
    ds.val = generate_split(m, m.val_pairs, static_cast<int>(m.supervision_rate * m.val_pairs), rng);
  }
  {
    Rng rng(derive_seed(m.seed, "split-test"));
    ds.test = generate_split(m, m.test_pairs, static_cast<int>(m.supervision_rate * m.test_pairs), rng);
  }

  if (m.disturb_rate == 0.0) {
    for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
      for (const PairRecord& p : *split) {
        if (p.label >= 0 &&
            factor_class(p.factors_a, p.label, m) != factor_class(p.factors_b, p.label, m)) {
          throw Error("build_dataset: labeled pair does not share its group factor");
        }
      }
    }
  }

  dsdd::save_split((fs::path(out_dir) / "train.dsdd").string(), ds.train, m);
  dsdd::save_split((fs::path(out_dir) / "val.dsdd").string(), ds.val, m);
  dsdd::save_split((fs::path(out_dir) / "test.dsdd").string(), ds.test, m);
  std::ofstream mf(fs::path(out_dir) / "manifest.json");
  if (!mf) throw IoError("dataset: cannot write manifest in '" + out_dir + "'");
  mf << manifest_to_json(m).dump(2) << '\n';

  BuildSummary s;
  s.labeled_train = labeled;
  s.unlabeled_train = m.train_pairs - labeled;
  return s;
}

inline SquareDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  SquareDataset ds;
  ds.manifest = load_manifest((fs::path(dir) / "manifest.json").string());
  ds.train = dsdd::load_split((fs::path(dir) / "train.dsdd").string(), ds.manifest);
  ds.val = dsdd::load_split((fs::path(dir) / "val.dsdd").string(), ds.manifest);
  ds.test = dsdd::load_split((fs::path(dir) / "test.dsdd").string(), ds.manifest);
  return ds;
}

}  // namespace dsd
