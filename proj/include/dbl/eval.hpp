#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dbl/matrix.hpp"

namespace dbl {

// Gallery layout contract: S is images x captions with captions grouped
// contiguously, so the positives of image row i are columns
// [i*C, (i+1)*C) and the matching image of caption column j is j / C.

enum class Direction { image_to_text, text_to_image };

// How MD (mean separation of positives from negatives) is computed:
// `mean_difference` is mean(positive cells) - mean(negative cells);
// `hardest_negative` averages, per query in both directions, the positive
// score (mean of the group for image queries) minus the best negative.
enum class MdMode { mean_difference, hardest_negative };

struct RetrievalReport {
  double r1_i2t = 0.0, r5_i2t = 0.0, r10_i2t = 0.0;
  double r1_t2i = 0.0, r5_t2i = 0.0, r10_t2i = 0.0;
  double rsum = 0.0;
  double md = 0.0;
};

namespace detail {

inline void check_gallery(const Matrix& s, int captions_per_image) {
  if (captions_per_image < 1) throw shape_error("gallery: captions_per_image must be >= 1");
  if (s.cols() != s.rows() * captions_per_image)
    throw shape_error("gallery: expected " + std::to_string(s.rows()) + "x" +
                      std::to_string(s.rows() * captions_per_image) + ", got " +
                      std::to_string(s.rows()) + "x" + std::to_string(s.cols()));
}

// 1-based rank of candidate `target` within `scores`; ties lose to the
// lower index, so ranking is deterministic.
template <typename At>
int rank_of(int target, int count, At&& score_at) {
  const double st = score_at(target);
  int ahead = 0;
  for (int j = 0; j < count; ++j) {
    if (j == target) continue;
    const double sj = score_at(j);
    if (sj > st || (sj == st && j < target)) ++ahead;
  }
  return ahead + 1;
}

}  // namespace detail

// Percentage of queries whose ground truth lands in the top-k candidates.
// Image queries succeed if any caption of their group makes the cut; caption
// queries have exactly one correct image.
inline double recall_at_k(const Matrix& s, int captions_per_image, int k, Direction dir) {
  detail::check_gallery(s, captions_per_image);
  if (k < 1) throw shape_error("recall_at_k: k must be >= 1");
  int hits = 0;
  if (dir == Direction::image_to_text) {
    for (int i = 0; i < s.rows(); ++i) {
      int best_rank = s.cols() + 1;
      for (int c = 0; c < captions_per_image; ++c) {
        const int col = i * captions_per_image + c;
        best_rank = std::min(best_rank, detail::rank_of(col, s.cols(),
                                                        [&](int j) { return s(i, j); }));
      }
      if (best_rank <= k) ++hits;
    }
    return 100.0 * hits / s.rows();
  }
  for (int col = 0; col < s.cols(); ++col) {
    const int truth = col / captions_per_image;
    if (detail::rank_of(truth, s.rows(), [&](int i) { return s(i, col); }) <= k) ++hits;
  }
  return 100.0 * hits / s.cols();
}

inline double mean_distance(const Matrix& s, int captions_per_image,
                            MdMode mode = MdMode::mean_difference) {
  detail::check_gallery(s, captions_per_image);
  const int c = captions_per_image;
  if (mode == MdMode::mean_difference) {
    double pos = 0.0, neg = 0.0;
    long long npos = 0, nneg = 0;
    for (int i = 0; i < s.rows(); ++i)
      for (int j = 0; j < s.cols(); ++j) {
        if (j / c == i) {
          pos += s(i, j);
          ++npos;
        } else {
          neg += s(i, j);
          ++nneg;
        }
      }
    if (nneg == 0) throw shape_error("mean_distance: gallery has no negatives");
    return pos / npos - neg / nneg;
  }
  // Per-query: positive (group mean for image queries) minus hardest negative.
  double total = 0.0;
  for (int i = 0; i < s.rows(); ++i) {
    double pos = 0.0, hardest = -2.0;
    for (int j = 0; j < s.cols(); ++j) {
      if (j / c == i)
        pos += s(i, j) / c;
      else
        hardest = std::max(hardest, s(i, j));
    }
    total += pos - hardest;
  }
  for (int j = 0; j < s.cols(); ++j) {
    const int truth = j / c;
    double hardest = -2.0;
    for (int i = 0; i < s.rows(); ++i)
      if (i != truth) hardest = std::max(hardest, s(i, j));
    total += s(truth, j) - hardest;
  }
  return total / (s.rows() + s.cols());
}

inline RetrievalReport report(const Matrix& s, int captions_per_image,
                              MdMode mode = MdMode::mean_difference) {
  RetrievalReport r;
  r.r1_i2t = recall_at_k(s, captions_per_image, 1, Direction::image_to_text);
  r.r5_i2t = recall_at_k(s, captions_per_image, 5, Direction::image_to_text);
  r.r10_i2t = recall_at_k(s, captions_per_image, 10, Direction::image_to_text);
  r.r1_t2i = recall_at_k(s, captions_per_image, 1, Direction::text_to_image);
  r.r5_t2i = recall_at_k(s, captions_per_image, 5, Direction::text_to_image);
  r.r10_t2i = recall_at_k(s, captions_per_image, 10, Direction::text_to_image);
  r.rsum = r.r1_i2t + r.r5_i2t + r.r10_i2t + r.r1_t2i + r.r5_t2i + r.r10_t2i;
  r.md = mean_distance(s, captions_per_image, mode);
  return r;
}

inline nlohmann::ordered_json report_json(const RetrievalReport& r) {
  nlohmann::ordered_json j;
  j["r1_i2t"] = r.r1_i2t;
  j["r5_i2t"] = r.r5_i2t;
  j["r10_i2t"] = r.r10_i2t;
  j["r1_t2i"] = r.r1_t2i;
  j["r5_t2i"] = r.r5_t2i;
  j["r10_t2i"] = r.r10_t2i;
  j["rsum"] = r.rsum;
  j["md"] = r.md;
  return j;
}

// Similarity distribution over the gallery: 100 uniform bins spanning
// [-1, 1], separate series for positive and negative cells. Out-of-range
// values (float drift) clamp into the edge bins.
struct Histogram {
  static constexpr int bins = 100;
  std::array<long long, bins> pos{};
  std::array<long long, bins> neg{};
};

inline Histogram histogram(const Matrix& s, int captions_per_image) {
  detail::check_gallery(s, captions_per_image);
  Histogram h;
  for (int i = 0; i < s.rows(); ++i)
    for (int j = 0; j < s.cols(); ++j) {
      const double x = std::min(1.0, std::max(-1.0, s(i, j)));
      int bin = static_cast<int>((x + 1.0) * (Histogram::bins / 2.0));
      if (bin == Histogram::bins) bin = Histogram::bins - 1;
      if (j / captions_per_image == i)
        ++h.pos[bin];
      else
        ++h.neg[bin];
    }
  return h;
}

inline std::string histogram_csv(const Histogram& h) {
  std::string out = "bin_lo,bin_hi,pos_count,neg_count\n";
  char line[96];
  for (int b = 0; b < Histogram::bins; ++b) {
    const double lo = -1.0 + 2.0 * b / Histogram::bins;
    const double hi = -1.0 + 2.0 * (b + 1) / Histogram::bins;
    std::snprintf(line, sizeof(line), "%.2f,%.2f,%lld,%lld\n", lo, hi, h.pos[b], h.neg[b]);
    out += line;
  }
  return out;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw shape_error("cannot open '" + path + "' for writing");
  os << content;
  if (!os) throw shape_error("write failed for '" + path + "'");
}

}  // namespace dbl
