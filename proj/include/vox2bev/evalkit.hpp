#pragma once

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vox2bev/dataset.hpp"
#include "vox2bev/geom.hpp"

namespace vox2bev {

// One-pass-evaluation conventions: 21 evenly spaced thresholds; overlaps
// count with strict ">", center distances with "<=".
inline double success_from_ious(const std::vector<double>& ious) {
  if (ious.empty()) throw std::invalid_argument("success: no frames");
  // A run where every frame overlaps its ground truth perfectly scores 100
  // exactly; the strict ">" threshold average below tops out under 100, so
  // 100 is reached if and only if every IoU equals 1.
  bool all_perfect = true;
  for (double x : ious)
    if (x != 1.0) {
      all_perfect = false;
      break;
    }
  if (all_perfect) return 100.0;
  double auc = 0.0;
  for (int k = 0; k <= 20; ++k) {
    const double tau = static_cast<double>(k) * 0.05;
    int64_t hit = 0;
    for (double x : ious)
      if (x > tau) ++hit;
    auc += static_cast<double>(hit) / static_cast<double>(ious.size());
  }
  return 100.0 * auc / 21.0;
}

inline double precision_from_distances(const std::vector<double>& dists) {
  if (dists.empty()) throw std::invalid_argument("precision: no frames");
  double auc = 0.0;
  for (int k = 0; k <= 20; ++k) {
    const double tau = static_cast<double>(k) * 0.1;
    int64_t hit = 0;
    for (double x : dists)
      if (x <= tau) ++hit;
    auc += static_cast<double>(hit) / static_cast<double>(dists.size());
  }
  return 100.0 * auc / 21.0;
}

inline std::vector<double> frame_ious(const std::vector<Box3D>& preds, const std::vector<Box3D>& gts) {
  if (preds.size() != gts.size() || preds.empty()) throw std::invalid_argument("metrics: pred/gt length mismatch");
  std::vector<double> out(preds.size());
  for (size_t i = 0; i < preds.size(); ++i) out[i] = iou3d(preds[i], gts[i]);
  return out;
}

inline std::vector<double> frame_distances(const std::vector<Box3D>& preds, const std::vector<Box3D>& gts) {
  if (preds.size() != gts.size() || preds.empty()) throw std::invalid_argument("metrics: pred/gt length mismatch");
  std::vector<double> out(preds.size());
  for (size_t i = 0; i < preds.size(); ++i) out[i] = center_distance(preds[i], gts[i]);
  return out;
}

inline double success(const std::vector<Box3D>& preds, const std::vector<Box3D>& gts) {
  return success_from_ious(frame_ious(preds, gts));
}

inline double precision(const std::vector<Box3D>& preds, const std::vector<Box3D>& gts) {
  return precision_from_distances(frame_distances(preds, gts));
}

// ---------------------------------------------------------------------------
// Per-frame table and sparsity bucketing
// ---------------------------------------------------------------------------

struct FrameScore {
  std::string sequence_id;
  std::string category;
  int64_t frame = 0;
  int64_t points_in_gt = 0;
  double iou = 0;
  double distance = 0;
};

inline std::vector<FrameScore> score_frames(const std::vector<Sequence>& dataset,
                                            const std::map<std::string, std::vector<Box3D>>& results) {
  validate_results(dataset, results);
  std::vector<FrameScore> out;
  for (const auto& seq : dataset) {
    const auto& preds = results.at(seq.id);
    for (size_t t = 0; t < seq.frames.size(); ++t) {
      FrameScore fs;
      fs.sequence_id = seq.id;
      fs.category = seq.category;
      fs.frame = static_cast<int64_t>(t);
      fs.points_in_gt = points_in_box(seq.frames[t]);
      fs.iou = iou3d(preds[t], seq.frames[t].box);
      fs.distance = center_distance(preds[t], seq.frames[t].box);
      out.push_back(fs);
    }
  }
  return out;
}

struct BucketMetrics {
  std::string name;
  int64_t frames = 0;
  double success = 0;
  double precision = 0;
};

struct MetricsReport {
  int64_t frames = 0;
  double success = 0;
  double precision = 0;
  std::vector<BucketMetrics> buckets;
};

inline MetricsReport compute_metrics(const std::vector<FrameScore>& scores) {
  if (scores.empty()) throw std::invalid_argument("compute_metrics: no frames");
  MetricsReport rep;
  rep.frames = static_cast<int64_t>(scores.size());
  std::vector<double> ious, dists;
  for (const auto& s : scores) {
    ious.push_back(s.iou);
    dists.push_back(s.distance);
  }
  rep.success = success_from_ious(ious);
  rep.precision = precision_from_distances(dists);
  return rep;
}

// Frames split by in-GT-box point count against the per-category threshold
// (inclusive "sparse" side). Categories without a threshold form their own
// bucket. Bucket frame counts always partition the total.
inline MetricsReport compute_metrics_bucketed(const std::vector<FrameScore>& scores,
                                              const std::map<std::string, int64_t>& thresholds) {
  MetricsReport rep = compute_metrics(scores);
  std::map<std::string, std::vector<const FrameScore*>> groups;
  for (const auto& s : scores) {
    auto it = thresholds.find(s.category);
    std::string key;
    if (it == thresholds.end())
      key = "unbucketed:" + s.category;
    else
      key = s.category + (s.points_in_gt <= it->second ? ":sparse" : ":dense");
    groups[key].push_back(&s);
  }
  for (const auto& [name, members] : groups) {
    BucketMetrics bm;
    bm.name = name;
    bm.frames = static_cast<int64_t>(members.size());
    std::vector<double> ious, dists;
    for (const FrameScore* s : members) {
      ious.push_back(s->iou);
      dists.push_back(s->distance);
    }
    bm.success = success_from_ious(ious);
    bm.precision = precision_from_distances(dists);
    rep.buckets.push_back(bm);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Point-count statistics
// ---------------------------------------------------------------------------

struct HistogramBin {
  int64_t lo = 0;      // inclusive
  int64_t hi = -1;     // exclusive; -1 = unbounded
  int64_t count = 0;
};

// Bin edges e0 < e1 < ... < ek define [e0,e1), ..., [e_{k-1},e_k), [e_k,inf).
inline std::vector<HistogramBin> point_stats(const std::vector<Sequence>& dataset, const std::vector<int64_t>& edges) {
  if (dataset.empty()) throw std::invalid_argument("point_stats: empty dataset");
  if (edges.empty()) throw std::invalid_argument("point_stats: need at least one bin edge");
  for (size_t i = 1; i < edges.size(); ++i)
    if (edges[i] <= edges[i - 1]) throw std::invalid_argument("point_stats: edges must be strictly increasing");
  std::vector<HistogramBin> bins;
  for (size_t i = 0; i + 1 < edges.size(); ++i) bins.push_back({edges[i], edges[i + 1], 0});
  bins.push_back({edges.back(), -1, 0});
  for (const auto& seq : dataset)
    for (const auto& fr : seq.frames) {
      const int64_t n = points_in_box(fr);
      if (n < edges.front()) continue;
      for (auto& b : bins)
        if (n >= b.lo && (b.hi < 0 || n < b.hi)) {
          ++b.count;
          break;
        }
    }
  return bins;
}

}  // namespace vox2bev
