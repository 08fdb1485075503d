#pragma once

// Patch-embedding database and overlap-voting retrieval.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vop/core_types.hpp"
#include "vop/radius_search.hpp"

namespace vop {

struct Neighbor {
  std::uint32_t entry = 0;  // image * n_patches + patch
  std::uint32_t image = 0;
  std::uint32_t patch = 0;
  double similarity = 0.0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

// All patch embeddings of a database, searchable by exact radius queries.
// Entry e belongs to image e / n_patches, patch e % n_patches. Degenerate
// (zero) embeddings are stored but never returned.
class PatchIndex {
 public:
  PatchIndex() : entries_(std::make_shared<RowMatrixXf>()) {}

  explicit PatchIndex(const std::vector<ImageEmbeddings>& db) : PatchIndex() {
    if (db.empty()) return;
    grid_ = db.front().grid();
    dim_ = db.front().dim();
    has_cls_ = db.front().cls_emb().has_value();
    for (const auto& img : db) {
      if (!(img.grid() == grid_) || img.dim() != dim_) {
        throw ValidationError("build_index: image '" + img.image_id() +
                              "' has a different grid or dimension");
      }
      has_cls_ = has_cls_ && img.cls_emb().has_value();
    }
    const std::size_t n = std::size_t(grid_.n_patches());
    auto entries = std::make_shared<RowMatrixXf>(Eigen::Index(db.size() * n), dim_);
    std::vector<std::uint32_t> live;
    degenerate_.assign(db.size() * n, false);
    if (has_cls_) cls_.resize(Eigen::Index(db.size()), dim_);
    for (std::size_t i = 0; i < db.size(); ++i) {
      ids_.push_back(db[i].image_id());
      entries->middleRows(Eigen::Index(i * n), Eigen::Index(n)) = db[i].patch_embs();
      for (std::size_t p = 0; p < n; ++p) {
        if (db[i].is_degenerate(int(p))) {
          degenerate_[i * n + p] = true;
        } else {
          live.push_back(std::uint32_t(i * n + p));
        }
      }
      if (has_cls_) cls_.row(Eigen::Index(i)) = db[i].cls_emb()->transpose();
    }
    entries_ = entries;
    tree_ = BallTree(entries_, std::move(live));
  }

  std::size_t size() const { return ids_.size(); }  // N
  std::size_t entry_count() const { return std::size_t(entries_->rows()); }
  int n_patches() const { return grid_.n_patches(); }
  int dim() const { return dim_; }
  const PatchGrid& grid() const { return grid_; }
  const std::vector<std::string>& ids() const { return ids_; }
  bool has_cls() const { return has_cls_; }
  const RowMatrixXf& cls() const { return cls_; }
  const RowMatrixXf& entries() const { return *entries_; }
  bool is_degenerate(std::size_t entry) const { return degenerate_[entry]; }
  bool uses_tree() const { return tree_.uses_tree(); }

  std::span<const float> entry(std::size_t e) const {
    return {entries_->data() + e * std::size_t(dim_), std::size_t(dim_)};
  }

  std::optional<std::size_t> find(const std::string& id) const {
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (ids_[i] == id) return i;
    }
    return std::nullopt;
  }

  // Every live entry with similarity >= epsilon, optionally restricted to the
  // images flagged in `allowed`, sorted by entry.
  std::vector<Neighbor> radius_neighbors(std::span<const float> query, double epsilon,
                                         const std::vector<bool>* allowed = nullptr) const {
    std::vector<Neighbor> out;
    if (ids_.empty()) return out;
    if (query.size() != std::size_t(dim_)) {
      throw ValidationError("radius query has dimension " + std::to_string(query.size()) +
                            ", index has " + std::to_string(dim_));
    }
    const auto n = std::uint32_t(n_patches());
    tree_.query(
        query, epsilon,
        [&](std::uint32_t id) { return allowed == nullptr || (*allowed)[id / n]; },
        [&](std::uint32_t id, double s) { out.push_back({id, id / n, id % n, s}); });
    std::sort(out.begin(), out.end(),
              [](const Neighbor& a, const Neighbor& b) { return a.entry < b.entry; });
    return out;
  }

 private:
  PatchGrid grid_;
  int dim_ = 0;
  std::vector<std::string> ids_;
  std::shared_ptr<const RowMatrixXf> entries_;
  std::vector<bool> degenerate_;
  bool has_cls_ = false;
  RowMatrixXf cls_;
  BallTree tree_;
};

inline PatchIndex build_index(const std::vector<ImageEmbeddings>& db) {
  return PatchIndex(db);
}

// Median cosine similarity of `sample_count` random (query patch, db patch)
// pairs, rounded to two decimals.
inline double calibrate_radius(const std::vector<ImageEmbeddings>& queries,
                               const PatchIndex& index, std::size_t sample_count,
                               std::mt19937_64& rng) {
  if (queries.empty() || index.size() == 0 || sample_count == 0) {
    throw ValidationError("calibrate_radius needs at least one query, one database "
                          "image and one sample");
  }
  std::uniform_int_distribution<std::size_t> pick_query(0, queries.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_entry(0, index.entry_count() - 1);
  std::vector<double> sims;
  sims.reserve(sample_count);
  for (std::size_t s = 0; s < sample_count; ++s) {
    const auto& q = queries[pick_query(rng)];
    std::uniform_int_distribution<int> pick_patch(0, q.n_patches() - 1);
    const auto row = q.patch_embs().row(pick_patch(rng));
    const auto e = index.entry(pick_entry(rng));
    if (std::size_t(row.size()) != e.size()) {
      throw ValidationError("calibrate_radius: dimension mismatch");
    }
    sims.push_back(similarity(row.data(), e.data(), e.size()));
  }
  std::sort(sims.begin(), sims.end());
  const std::size_t m = sims.size() / 2;
  const double median = sims.size() % 2 ? sims[m] : 0.5 * (sims[m - 1] + sims[m]);
  return std::round(median * 100.0) / 100.0;
}

// Database ordinals ranked by global-embedding similarity (descending, lower
// ordinal first on ties), truncated to `shortlist_size`.
inline std::vector<std::uint32_t> cls_prefilter(std::span<const float> query_cls,
                                                const PatchIndex& index,
                                                std::size_t shortlist_size) {
  if (!index.has_cls()) throw ValidationError("prefilter requested but the index has no CLS embeddings");
  if (query_cls.size() != std::size_t(index.dim())) {
    throw ValidationError("prefilter: query CLS has the wrong dimension");
  }
  std::vector<std::pair<double, std::uint32_t>> ranked;
  for (std::size_t i = 0; i < index.size(); ++i) {
    const float* c = index.cls().data() + i * std::size_t(index.dim());
    ranked.emplace_back(similarity(query_cls.data(), c, query_cls.size()), std::uint32_t(i));
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  const std::size_t n = std::min(shortlist_size, ranked.size());
  std::vector<std::uint32_t> out;
  for (std::size_t k = 0; k < n; ++k) out.push_back(ranked[k].second);
  return out;
}

// Per query patch: t = (n_id / n_d) * ln(N / n_i), n_id = all neighbors of the
// patch, n_i = images holding at least one of them, n_d = n_patches * N.
// Patches without neighbors get 0.
inline std::vector<double> tfidf_weights(const std::vector<std::vector<Neighbor>>& neighbors,
                                         std::size_t db_images, int n_patches) {
  std::vector<double> weights(neighbors.size(), 0.0);
  if (db_images == 0) return weights;
  const double n_d = double(n_patches) * double(db_images);
  for (std::size_t p = 0; p < neighbors.size(); ++p) {
    const auto& list = neighbors[p];
    if (list.empty()) continue;
    std::vector<std::uint32_t> images;
    images.reserve(list.size());
    for (const auto& nb : list) images.push_back(nb.image);
    std::sort(images.begin(), images.end());
    const auto n_i = double(std::unique(images.begin(), images.end()) - images.begin());
    weights[p] = double(list.size()) / n_d * std::log(double(db_images) / n_i);
  }
  return weights;
}

enum class VoteMode { kHard, kSoft };

struct PatchMatch {
  int query_patch = 0;
  int db_patch = 0;
  double similarity = 0.0;
};

struct OverlapScore {
  std::string query_id;
  std::string db_id;
  std::uint32_t db_ordinal = 0;
  double score = 0.0;
  VoteMode mode = VoteMode::kHard;
  std::vector<PatchMatch> matches;
};

inline bool any_nonzero(const std::vector<double>& w) {
  return std::any_of(w.begin(), w.end(), [](double x) { return x != 0.0; });
}

// Overlap of the query with database image `db_ordinal`: each query patch is
// paired with its most similar neighbor in that image (lower patch on ties);
// hard mode adds w_p, soft mode adds w_p * (similarity - epsilon). Weights
// apply only if at least one is non-zero; otherwise every w_p is 1.
// `neighbors[p]` must be sorted by entry, as radius_neighbors() returns it.
inline OverlapScore vote_overlap(const ImageEmbeddings& query, const PatchIndex& index,
                                 std::uint32_t db_ordinal,
                                 const std::vector<std::vector<Neighbor>>& neighbors,
                                 double epsilon, VoteMode mode,
                                 const std::vector<double>& weights = {}) {
  OverlapScore out;
  out.query_id = query.image_id();
  out.db_id = index.ids().at(db_ordinal);
  out.db_ordinal = db_ordinal;
  out.mode = mode;
  const bool weighted = any_nonzero(weights);
  const auto n = std::uint32_t(index.n_patches());
  const std::uint32_t lo = db_ordinal * n, hi = lo + n;
  std::vector<double> votes;
  for (std::size_t p = 0; p < neighbors.size(); ++p) {
    const auto& list = neighbors[p];
    auto it = std::lower_bound(list.begin(), list.end(), lo,
                               [](const Neighbor& nb, std::uint32_t e) { return nb.entry < e; });
    const Neighbor* best = nullptr;
    for (; it != list.end() && it->entry < hi; ++it) {
      if (it->similarity < epsilon) continue;
      if (best == nullptr || it->similarity > best->similarity) best = &*it;
    }
    if (best == nullptr) continue;
    const double w = weighted ? weights[p] : 1.0;
    votes.push_back(mode == VoteMode::kHard ? w : w * std::max(best->similarity - epsilon, 0.0));
    out.matches.push_back({int(p), int(best->patch), best->similarity});
  }
  // Summed in ascending order so equal multisets of votes give equal scores.
  std::sort(votes.begin(), votes.end());
  for (double v : votes) out.score += v;
  return out;
}

struct RetrievalOptions {
  bool prefilter = true;
  std::size_t shortlist = 100;
  VoteMode mode = VoteMode::kHard;
  bool tfidf = true;
  std::optional<double> epsilon;  // unset: calibrate against the query
  std::size_t calibration_samples = 100;
  std::uint64_t seed = 0;
};

// Neighbor lists of every query patch (empty for degenerate patches).
inline std::vector<std::vector<Neighbor>> query_neighbors(const ImageEmbeddings& query,
                                                          const PatchIndex& index,
                                                          double epsilon,
                                                          const std::vector<bool>* allowed) {
  std::vector<std::vector<Neighbor>> out(std::size_t(query.n_patches()));
  for (int p = 0; p < query.n_patches(); ++p) {
    if (query.is_degenerate(p)) continue;
    const auto row = query.patch_embs().row(p);
    out[std::size_t(p)] =
        index.radius_neighbors({row.data(), std::size_t(row.size())}, epsilon, allowed);
  }
  return out;
}

// Ranked database images for one query: optional CLS shortlist, radius search,
// TF-IDF weights, voting, then sort by score (ties: CLS similarity, then lower
// ordinal). Returns at most k results.
inline std::vector<OverlapScore> retrieve_topk(const ImageEmbeddings& query,
                                               const PatchIndex& index, std::size_t k,
                                               const RetrievalOptions& opts = {}) {
  if (k == 0 || index.size() == 0) return {};
  if (query.dim() != index.dim() || !(query.grid() == index.grid())) {
    throw ValidationError("query '" + query.image_id() +
                          "' does not match the index grid/dimension");
  }
  std::vector<std::uint32_t> candidates;
  if (opts.prefilter) {
    if (!query.cls_emb()) {
      throw ValidationError("prefilter requested but query '" + query.image_id() +
                            "' has no CLS embedding");
    }
    const auto& c = *query.cls_emb();
    candidates = cls_prefilter({c.data(), std::size_t(c.size())}, index, opts.shortlist);
  } else {
    for (std::size_t i = 0; i < index.size(); ++i) candidates.push_back(std::uint32_t(i));
  }
  double epsilon = 0.0;
  if (opts.epsilon) {
    epsilon = *opts.epsilon;
  } else {
    std::mt19937_64 rng(opts.seed);
    epsilon = calibrate_radius({query}, index, opts.calibration_samples, rng);
  }
  std::vector<bool> allowed(index.size(), false);
  for (auto c : candidates) allowed[c] = true;
  const auto neighbors = query_neighbors(query, index, epsilon, &allowed);
  const auto weights = opts.tfidf
                           ? tfidf_weights(neighbors, candidates.size(), index.n_patches())
                           : std::vector<double>{};

  std::vector<double> cls_sim(index.size(), 0.0);
  const bool use_cls = query.cls_emb() && index.has_cls();
  std::vector<OverlapScore> scores;
  for (auto c : candidates) {
    scores.push_back(vote_overlap(query, index, c, neighbors, epsilon, opts.mode, weights));
    if (use_cls) {
      cls_sim[c] = similarity(query.cls_emb()->data(),
                              index.cls().data() + std::size_t(c) * std::size_t(index.dim()),
                              std::size_t(index.dim()));
    }
  }
  std::sort(scores.begin(), scores.end(), [&](const OverlapScore& a, const OverlapScore& b) {
    if (a.score != b.score) return a.score > b.score;
    if (cls_sim[a.db_ordinal] != cls_sim[b.db_ordinal]) {
      return cls_sim[a.db_ordinal] > cls_sim[b.db_ordinal];
    }
    return a.db_ordinal < b.db_ordinal;
  });
  if (scores.size() > k) scores.resize(k);
  return scores;
}

// Average-pools factor x factor blocks of patch embeddings, then
// re-normalizes. factor == rows_cols leaves a single patch.
inline ImageEmbeddings pool_patches(const ImageEmbeddings& emb, int factor) {
  const PatchGrid coarse = emb.grid().coarsen(factor);
  if (factor == 1) return emb;
  const int fine_side = emb.grid().rows_cols();
  const int side = coarse.rows_cols();
  RowMatrixXd pooled = RowMatrixXd::Zero(coarse.n_patches(), emb.dim());
  for (int r = 0; r < fine_side; ++r) {
    for (int c = 0; c < fine_side; ++c) {
      const int target = (r / factor) * side + (c / factor);
      pooled.row(target) += emb.patch_embs().row(r * fine_side + c).cast<double>();
    }
  }
  pooled /= double(factor * factor);
  return ImageEmbeddings(emb.image_id(), pooled.cast<float>(), emb.cls_emb(), coarse);
}

}  // namespace vop
