#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dbl/encoders.hpp"
#include "dbl/matrix.hpp"
#include "dbl/rng.hpp"

namespace dbl {

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw shape_error("unknown split '" + s + "'");
}

// Recipe for a synthetic paired-modality dataset: every image and each of its
// captions are noisy projections of one shared latent vector, so retrieval is
// learnable and its difficulty is a single knob (sigma).
struct LatentSpec {
  int d_z = 16;                // shared latent width
  int d_img = 16;              // image token width
  int d_txt = 16;              // text token width
  int captions_per_image = 5;  // caption group size (C)
  double sigma = 0.3;          // per-token noise scale
  int image_tokens = 4;        // tokens per image (K)
  int text_tokens = 4;         // tokens per caption (L)
  int train_images = 700;
  int val_images = 100;
  int test_images = 200;

  int total_images() const { return train_images + val_images + test_images; }
  int total_captions() const { return total_images() * captions_per_image; }

  void validate() const {
    if (d_z < 1 || d_img < 1 || d_txt < 1) throw shape_error("LatentSpec: dims must be >= 1");
    if (d_z > d_img || d_z > d_txt)
      throw shape_error("LatentSpec: latent dim must not exceed either token dim");
    if (captions_per_image < 1) throw shape_error("LatentSpec: captions_per_image must be >= 1");
    if (sigma < 0.0) throw shape_error("LatentSpec: sigma must be >= 0");
    if (image_tokens < 1 || text_tokens < 1)
      throw shape_error("LatentSpec: token counts must be >= 1");
    if (train_images < 2 || val_images < 1 || test_images < 1)
      throw shape_error("LatentSpec: split sizes too small");
  }
};

// Images are laid out in split order (train, then val, then test); caption c
// belongs to image c / C. Everything regenerates bit-identically from
// (spec, seed), so files on disk carry only the recipe plus a checksum.
struct PairDataset {
  LatentSpec spec;
  uint64_t seed = 0;
  Matrix map_img, map_txt;           // d_z x d_img / d_z x d_txt, orthonormal rows
  Matrix latents;                    // total_images x d_z
  std::vector<Matrix> image_tokens;  // per image: K x d_img
  std::vector<Matrix> text_tokens;   // per caption: L x d_txt

  int image_of_caption(int caption) const { return caption / spec.captions_per_image; }

  int split_begin(Split s) const {
    switch (s) {
      case Split::train: return 0;
      case Split::val: return spec.train_images;
      case Split::test: return spec.train_images + spec.val_images;
    }
    return 0;
  }
  int split_size(Split s) const {
    switch (s) {
      case Split::train: return spec.train_images;
      case Split::val: return spec.val_images;
      case Split::test: return spec.test_images;
    }
    return 0;
  }
};

// Rows spanning an orthonormal subspace: Gram-Schmidt over seeded normal
// draws. Guarantees the latent is linearly recoverable from either modality.
inline Matrix orthonormal_rows(int rows, int cols, RngStream& rng) {
  if (rows > cols) throw shape_error("orthonormal_rows: rows must not exceed cols");
  Matrix m = rng.normal_matrix(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < i; ++j) {
      double dot = 0.0;
      for (int k = 0; k < cols; ++k) dot += m(i, k) * m(j, k);
      for (int k = 0; k < cols; ++k) m(i, k) -= dot * m(j, k);
    }
    const double norm = row_norm(m, i);
    if (norm < 1e-9) throw numeric_error("orthonormal_rows: degenerate draw");
    for (int k = 0; k < cols; ++k) m(i, k) /= norm;
  }
  return m;
}

// Deterministic generation. Draw order is part of the format: the modality
// maps first (stream "maps"), then all latents (stream "latents"), then the
// token noise (stream "noise") image by image — K image tokens, then the
// image's C captions with L tokens each.
inline PairDataset generate(const LatentSpec& spec, uint64_t seed) {
  spec.validate();
  PairDataset ds;
  ds.spec = spec;
  ds.seed = seed;
  RngStream master(seed);
  RngStream maps = master.fork("maps");
  ds.map_img = orthonormal_rows(spec.d_z, spec.d_img, maps);
  ds.map_txt = orthonormal_rows(spec.d_z, spec.d_txt, maps);
  RngStream latents = master.fork("latents");
  ds.latents = latents.normal_matrix(spec.total_images(), spec.d_z);
  RngStream noise = master.fork("noise");

  ds.image_tokens.reserve(spec.total_images());
  ds.text_tokens.reserve(spec.total_captions());
  Matrix z(1, spec.d_z);
  for (int i = 0; i < spec.total_images(); ++i) {
    for (int k = 0; k < spec.d_z; ++k) z(0, k) = ds.latents(i, k);
    const Matrix base_img = matmul(z, ds.map_img);
    Matrix img(spec.image_tokens, spec.d_img);
    for (int r = 0; r < spec.image_tokens; ++r)
      for (int c = 0; c < spec.d_img; ++c)
        img(r, c) = base_img(0, c) + spec.sigma * noise.normal();
    ds.image_tokens.push_back(std::move(img));

    const Matrix base_txt = matmul(z, ds.map_txt);
    for (int cap = 0; cap < spec.captions_per_image; ++cap) {
      Matrix txt(spec.text_tokens, spec.d_txt);
      for (int r = 0; r < spec.text_tokens; ++r)
        for (int c = 0; c < spec.d_txt; ++c)
          txt(r, c) = base_txt(0, c) + spec.sigma * noise.normal();
      ds.text_tokens.push_back(std::move(txt));
    }
  }
  return ds;
}

// FNV-1a over the raw bytes of every generated array, in generation order.
inline uint64_t dataset_checksum(const PairDataset& ds) {
  uint64_t h = 14695981039346656037ULL;
  auto mix = [&h](const Matrix& m) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.raw().data());
    const size_t n = m.size() * sizeof(double);
    for (size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  mix(ds.map_img);
  mix(ds.map_txt);
  mix(ds.latents);
  for (const auto& m : ds.image_tokens) mix(m);
  for (const auto& m : ds.text_tokens) mix(m);
  return h;
}

inline nlohmann::json spec_to_json(const LatentSpec& s) {
  return {{"latent_dim", s.d_z},
          {"image_dim", s.d_img},
          {"text_dim", s.d_txt},
          {"captions_per_image", s.captions_per_image},
          {"sigma", s.sigma},
          {"image_tokens", s.image_tokens},
          {"text_tokens", s.text_tokens},
          {"train_images", s.train_images},
          {"val_images", s.val_images},
          {"test_images", s.test_images}};
}

inline LatentSpec spec_from_json(const nlohmann::json& j) {
  LatentSpec s;
  s.d_z = j.at("latent_dim").get<int>();
  s.d_img = j.at("image_dim").get<int>();
  s.d_txt = j.at("text_dim").get<int>();
  s.captions_per_image = j.at("captions_per_image").get<int>();
  s.sigma = j.at("sigma").get<double>();
  s.image_tokens = j.at("image_tokens").get<int>();
  s.text_tokens = j.at("text_tokens").get<int>();
  s.train_images = j.at("train_images").get<int>();
  s.val_images = j.at("val_images").get<int>();
  s.test_images = j.at("test_images").get<int>();
  return s;
}

// Datasets ship as recipe + checksum; arrays are regenerated on load and the
// checksum is verified, so a stale or foreign file cannot slip through.
inline void save_dataset(const std::string& path, const PairDataset& ds) {
  nlohmann::json j = {{"spec", spec_to_json(ds.spec)},
                      {"seed", ds.seed},
                      {"checksum", dataset_checksum(ds)}};
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw shape_error("dataset: cannot open '" + path + "' for writing");
  os << j.dump(2) << "\n";
  if (!os) throw shape_error("dataset: write failed for '" + path + "'");
}

inline PairDataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw shape_error("dataset: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw shape_error("dataset: bad JSON in '" + path + "': " + e.what());
  }
  PairDataset ds = generate(spec_from_json(j.at("spec")), j.at("seed").get<uint64_t>());
  const uint64_t expect = j.at("checksum").get<uint64_t>();
  const uint64_t got = dataset_checksum(ds);
  if (got != expect)
    throw numeric_error("dataset: checksum mismatch for '" + path + "' (file " +
                        std::to_string(expect) + ", regenerated " + std::to_string(got) + ")");
  return ds;
}

// One training batch: N distinct images, one caption each, so every
// off-diagonal cell of the batch similarity matrix is a true negative.
struct Batch {
  std::vector<int> images;    // dataset image ids
  std::vector<int> captions;  // dataset caption ids, captions[i] pairs images[i]
};

// Epoch batching: shuffle the split's images, pick one caption per image
// uniformly (in shuffled order), chunk into size-n batches, and drop a final
// fragment only when it is too small to contain a negative.
inline std::vector<Batch> epoch_batches(const PairDataset& ds, Split split, int n,
                                        RngStream& rng) {
  if (n < 2) throw shape_error("epoch_batches: batch size must be >= 2");
  const int begin = ds.split_begin(split);
  const int count = ds.split_size(split);
  if (count == 0) throw shape_error("epoch_batches: empty split");
  std::vector<int> images(count);
  for (int i = 0; i < count; ++i) images[i] = begin + i;
  rng.shuffle(images);
  std::vector<int> captions(count);
  const int c = ds.spec.captions_per_image;
  for (int i = 0; i < count; ++i)
    captions[i] = images[i] * c + static_cast<int>(rng.index(static_cast<uint64_t>(c)));

  std::vector<Batch> out;
  for (int at = 0; at < count; at += n) {
    const int take = std::min(n, count - at);
    if (take < 2) break;
    Batch b;
    b.images.assign(images.begin() + at, images.begin() + at + take);
    b.captions.assign(captions.begin() + at, captions.begin() + at + take);
    out.push_back(std::move(b));
  }
  return out;
}

inline TokenBatch token_batch(const PairDataset& ds, const Batch& b) {
  TokenBatch tb;
  tb.image_tokens.reserve(b.images.size());
  tb.text_tokens.reserve(b.captions.size());
  for (int id : b.images) tb.image_tokens.push_back(ds.image_tokens[id]);
  for (int id : b.captions) tb.text_tokens.push_back(ds.text_tokens[id]);
  tb.validate();
  return tb;
}

// A full retrieval gallery for one split: every image against every caption
// of that split, captions grouped contiguously per image (group i = columns
// [i*C, (i+1)*C)).
struct SplitView {
  std::vector<Matrix> image_tokens;
  std::vector<Matrix> text_tokens;
  int captions_per_image = 1;
};

inline SplitView split_view(const PairDataset& ds, Split split) {
  const int begin = ds.split_begin(split);
  const int count = ds.split_size(split);
  if (count == 0) throw shape_error("split_view: empty split");
  SplitView v;
  v.captions_per_image = ds.spec.captions_per_image;
  v.image_tokens.reserve(count);
  v.text_tokens.reserve(static_cast<size_t>(count) * v.captions_per_image);
  for (int i = begin; i < begin + count; ++i) {
    v.image_tokens.push_back(ds.image_tokens[i]);
    for (int c = 0; c < v.captions_per_image; ++c)
      v.text_tokens.push_back(ds.text_tokens[i * v.captions_per_image + c]);
  }
  return v;
}

}  // namespace dbl
