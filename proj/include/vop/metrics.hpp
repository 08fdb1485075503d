#pragma once

// Retrieval quality against geometric ground truth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "vop/geometry.hpp"
#include "vop/records_io.hpp"

namespace vop {

// Ground truth keyed by unordered image pair; lookups re-orient the stored
// positives to (query patch, db patch).
class GroundTruth {
 public:
  GroundTruth() = default;
  explicit GroundTruth(const std::vector<GtMatchSet>& sets) {
    for (const auto& gt : sets) sets_[{gt.image_i, gt.image_j}] = gt;
  }

  const GtMatchSet* find(const std::string& a, const std::string& b, bool& flipped) const {
    if (auto it = sets_.find({a, b}); it != sets_.end()) {
      flipped = false;
      return &it->second;
    }
    if (auto it = sets_.find({b, a}); it != sets_.end()) {
      flipped = true;
      return &it->second;
    }
    return nullptr;
  }

  std::uint64_t image_overlap(const std::string& a, const std::string& b) const {
    bool flipped = false;
    const auto* gt = find(a, b, flipped);
    return gt ? gt->image_overlap : 0;
  }

  std::vector<PatchPair> positives(const std::string& query, const std::string& db) const {
    bool flipped = false;
    const auto* gt = find(query, db, flipped);
    if (gt == nullptr) return {};
    if (!flipped) return gt->positives;
    std::vector<PatchPair> out;
    for (const auto& [p, q] : gt->positives) out.emplace_back(q, p);
    return out;
  }

  std::map<std::pair<std::string, std::string>, std::uint64_t> overlaps() const {
    std::map<std::pair<std::string, std::string>, std::uint64_t> out;
    for (const auto& [key, gt] : sets_) out[key] = gt.image_overlap;
    return out;
  }

 private:
  std::map<std::pair<std::string, std::string>, GtMatchSet> sets_;
};

struct QueryMargin {
  std::string query;
  // Best GT-positive score minus best GT-negative score among the ranked
  // items; NaN when either side is absent.
  double margin = std::numeric_limits<double>::quiet_NaN();
};

struct RetrievalMetrics {
  std::map<std::size_t, double> recall_at_k;
  double mean_patch_precision = 0.0;
  double mean_patch_recall = 0.0;
  std::size_t patch_precision_count = 0;
  std::size_t patch_recall_count = 0;
  std::vector<QueryMargin> margins;
  std::size_t queries = 0;
};

// A db image is GT-positive for a query when its image overlap is at least
// `positive_threshold`. Queries without any positive count as misses. Patch
// precision/recall average over ranked pairs that have predictions / GT
// positives respectively.
inline RetrievalMetrics evaluate_retrieval(const std::vector<QueryResult>& results,
                                           const GroundTruth& gt,
                                           const std::vector<std::size_t>& ks,
                                           std::uint64_t positive_threshold = 1) {
  if (positive_threshold == 0) throw ValidationError("positive threshold must be >= 1");
  RetrievalMetrics m;
  m.queries = results.size();
  for (auto k : ks) {
    if (k == 0) throw ValidationError("recall@k needs k >= 1");
    m.recall_at_k[k] = 0.0;
  }
  double precision_sum = 0.0, recall_sum = 0.0;
  for (const auto& r : results) {
    std::size_t first_hit = std::numeric_limits<std::size_t>::max();
    double best_pos = -std::numeric_limits<double>::infinity();
    double best_neg = -std::numeric_limits<double>::infinity();
    for (std::size_t rank = 0; rank < r.ranked.size(); ++rank) {
      const auto& item = r.ranked[rank];
      const bool positive = gt.image_overlap(r.query, item.db) >= positive_threshold;
      if (positive) {
        first_hit = std::min(first_hit, rank);
        best_pos = std::max(best_pos, item.score);
      } else {
        best_neg = std::max(best_neg, item.score);
      }
      const auto truth = gt.positives(r.query, item.db);
      std::set<PatchPair> truth_set(truth.begin(), truth.end());
      std::size_t hits = 0;
      for (const auto& pm : item.matches) {
        hits += truth_set.count({pm.query_patch, pm.db_patch});
      }
      if (!item.matches.empty()) {
        precision_sum += double(hits) / double(item.matches.size());
        ++m.patch_precision_count;
      }
      if (!truth.empty()) {
        recall_sum += double(hits) / double(truth.size());
        ++m.patch_recall_count;
      }
    }
    for (auto& [k, v] : m.recall_at_k) {
      if (first_hit < k) v += 1.0;
    }
    QueryMargin qm{r.query};
    if (std::isfinite(best_pos) && std::isfinite(best_neg)) qm.margin = best_pos - best_neg;
    m.margins.push_back(qm);
  }
  if (!results.empty()) {
    for (auto& [k, v] : m.recall_at_k) v /= double(results.size());
  }
  if (m.patch_precision_count) m.mean_patch_precision = precision_sum / double(m.patch_precision_count);
  if (m.patch_recall_count) m.mean_patch_recall = recall_sum / double(m.patch_recall_count);
  return m;
}

inline nlohmann::json metrics_to_json(const RetrievalMetrics& m) {
  nlohmann::json j;
  j["queries"] = m.queries;
  j["recall_at_k"] = nlohmann::json::object();
  for (const auto& [k, v] : m.recall_at_k) j["recall_at_k"][std::to_string(k)] = v;
  j["mean_patch_precision"] = m.mean_patch_precision;
  j["mean_patch_recall"] = m.mean_patch_recall;
  j["margins"] = nlohmann::json::array();
  for (const auto& qm : m.margins) {
    j["margins"].push_back({{"query", qm.query},
                            {"margin", std::isnan(qm.margin) ? nlohmann::json(nullptr)
                                                             : nlohmann::json(qm.margin)}});
  }
  return j;
}

inline std::string metrics_to_csv(const RetrievalMetrics& m) {
  std::string out = "k,recall\n";
  for (const auto& [k, v] : m.recall_at_k) {
    out += std::to_string(k) + "," + nlohmann::json(v).dump() + "\n";
  }
  return out;
}

}  // namespace vop
