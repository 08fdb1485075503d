#pragma once

// Connected-components experiment over retrieved image pairs: edges are
// visited rank by rank over all queries; an edge is verified only when it
// would join two components.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vop/error.hpp"

namespace vop {

// Disjoint sets with union by size and path compression.
class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n), size_(n, 1), components_(n) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }

  std::size_t find(std::size_t x) {
    std::size_t root = x;
    while (parent_[root] != root) root = parent_[root];
    while (parent_[x] != root) {
      const std::size_t next = parent_[x];
      parent_[x] = root;
      x = next;
    }
    return root;
  }

  bool connected(std::size_t a, std::size_t b) { return find(a) == find(b); }

  // Returns false when a and b were already in one set.
  bool unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (size_[a] < size_[b]) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
    --components_;
    return true;
  }

  std::size_t component_count() const { return components_; }
  std::size_t component_size(std::size_t x) { return size_[find(x)]; }

  std::size_t max_component_size() {
    std::size_t best = 0;
    for (std::size_t i = 0; i < parent_.size(); ++i) {
      if (parent_[i] == i) best = std::max(best, size_[i]);
    }
    return best;
  }

 private:
  std::vector<std::size_t> parent_;
  std::vector<std::size_t> size_;
  std::size_t components_;
};

struct Verification {
  bool verified = false;
  int inlier_count = 0;
};

// (query id, db id) -> verdict; must be deterministic for a fixed setup.
using EdgeVerifier = std::function<Verification(const std::string&, const std::string&)>;

// Accepts an edge when its ground-truth image overlap reaches `threshold`;
// with probability `flip_probability` the verdict is inverted, decided by a
// hash of (seed, query, db) so it does not depend on visiting order.
class OverlapThresholdVerifier {
 public:
  OverlapThresholdVerifier(std::map<std::pair<std::string, std::string>, std::uint64_t> overlaps,
                           std::uint64_t threshold, double flip_probability = 0.0,
                           std::uint64_t seed = 0)
      : overlaps_(std::move(overlaps)),
        threshold_(threshold),
        flip_probability_(flip_probability),
        seed_(seed) {
    if (!(flip_probability >= 0.0 && flip_probability <= 1.0)) {
      throw ValidationError("flip probability must be in [0, 1]");
    }
  }

  Verification operator()(const std::string& query, const std::string& db) const {
    std::uint64_t overlap = 0;
    if (auto it = overlaps_.find({query, db}); it != overlaps_.end()) {
      overlap = it->second;
    } else if (auto jt = overlaps_.find({db, query}); jt != overlaps_.end()) {
      overlap = jt->second;
    }
    bool ok = overlap >= threshold_;
    if (flip_probability_ > 0.0) {
      std::seed_seq seq{seed_, std::hash<std::string>{}(query), std::hash<std::string>{}(db)};
      std::mt19937_64 rng(seq);
      if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < flip_probability_) ok = !ok;
    }
    return {ok, int(std::min<std::uint64_t>(overlap, std::uint64_t(INT32_MAX)))};
  }

 private:
  std::map<std::pair<std::string, std::string>, std::uint64_t> overlaps_;
  std::uint64_t threshold_;
  double flip_probability_;
  std::uint64_t seed_;
};

struct QueryRanking {
  std::string query;
  std::vector<std::string> ranked;  // best first
};

enum class EdgeVerdict { kSkipped, kSuccess, kFailure };

struct ProcessedEdge {
  std::size_t query = 0;  // image ordinals
  std::size_t db = 0;
  std::size_t rank = 0;
  EdgeVerdict verdict = EdgeVerdict::kSkipped;
};

// Statistics in percent, as in the experiment's summary table.
struct PoseGraphStats {
  double max_cc_size = 0.0;  // largest component / images
  double final_cc = 0.0;     // components / images
  double idx_last = 0.0;     // processed edges / all edges
  double skipped = 0.0;      // of processed edges
  double success = 0.0;
  double failure = 0.0;
};

struct PoseGraphRun {
  std::size_t n_images = 0;
  std::size_t total_edges = 0;
  std::vector<ProcessedEdge> edges;
  std::vector<std::size_t> cc_trace;  // components before any edge, then after each
  std::size_t skipped = 0, success = 0, failure = 0;
  std::size_t max_component_size = 0;
  PoseGraphStats stats;
};

struct PoseGraphOptions {
  std::size_t repetitions = 1;
  bool terminate_on_single_cc = false;
  std::uint64_t seed = 0;
  std::size_t trace_points = 101;
};

struct PoseGraphSummary {
  std::size_t n_images = 0;
  std::size_t total_edges = 0;
  std::vector<double> x;         // processed edges / all edges
  std::vector<double> mean_cc;   // components / images, averaged
  std::vector<double> std_cc;
  PoseGraphStats stats;          // averaged over repetitions
  std::vector<PoseGraphRun> runs;
};

// Query visiting order for one repetition.
inline std::vector<std::size_t> shuffled_query_order(std::size_t n_queries, std::uint64_t seed,
                                                     std::size_t repetition) {
  std::vector<std::size_t> order(n_queries);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{seed, std::uint64_t(repetition)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// One pass: round r takes every query's rank-r edge in `order`.
inline PoseGraphRun run_pose_graph_once(const std::vector<std::string>& images,
                                        const std::vector<QueryRanking>& rankings,
                                        const EdgeVerifier& verifier,
                                        const std::vector<std::size_t>& order,
                                        bool terminate_on_single_cc) {
  std::unordered_map<std::string, std::size_t> ordinal;
  for (std::size_t i = 0; i < images.size(); ++i) ordinal.emplace(images[i], i);
  const auto lookup = [&](const std::string& id) {
    auto it = ordinal.find(id);
    if (it == ordinal.end()) throw ValidationError("pose graph: unknown image id '" + id + "'");
    return it->second;
  };
  std::vector<std::size_t> query_ord;
  std::vector<std::vector<std::size_t>> ranked_ord;
  std::size_t max_rank = 0;
  PoseGraphRun run;
  run.n_images = images.size();
  for (const auto& qr : rankings) {
    query_ord.push_back(lookup(qr.query));
    std::vector<std::size_t> r;
    for (const auto& id : qr.ranked) r.push_back(lookup(id));
    max_rank = std::max(max_rank, r.size());
    run.total_edges += r.size();
    ranked_ord.push_back(std::move(r));
  }
  UnionFind uf(images.size());
  run.cc_trace.push_back(uf.component_count());
  bool done = terminate_on_single_cc && uf.component_count() <= 1;
  for (std::size_t rank = 0; rank < max_rank && !done; ++rank) {
    for (std::size_t qi : order) {
      if (rank >= ranked_ord[qi].size()) continue;
      const std::size_t q = query_ord[qi], db = ranked_ord[qi][rank];
      ProcessedEdge edge{q, db, rank, EdgeVerdict::kSkipped};
      if (uf.connected(q, db)) {
        ++run.skipped;
      } else if (verifier(images[q], images[db]).verified) {
        uf.unite(q, db);
        edge.verdict = EdgeVerdict::kSuccess;
        ++run.success;
      } else {
        edge.verdict = EdgeVerdict::kFailure;
        ++run.failure;
      }
      run.edges.push_back(edge);
      run.cc_trace.push_back(uf.component_count());
      if (terminate_on_single_cc && uf.component_count() == 1) {
        done = true;
        break;
      }
    }
  }
  run.max_component_size = images.empty() ? 0 : uf.max_component_size();
  const double n = double(std::max<std::size_t>(images.size(), 1));
  const double processed = double(run.edges.size());
  run.stats.max_cc_size = 100.0 * double(run.max_component_size) / n;
  run.stats.final_cc = 100.0 * double(uf.component_count()) / n;
  run.stats.idx_last = run.total_edges ? 100.0 * processed / double(run.total_edges) : 0.0;
  if (processed > 0) {
    run.stats.skipped = 100.0 * double(run.skipped) / processed;
    run.stats.success = 100.0 * double(run.success) / processed;
    run.stats.failure = 100.0 * double(run.failure) / processed;
  }
  return run;
}

// Repeats the pass with shuffled query orders and averages the traces on a
// common axis: x = processed / total edges, y = components / images. A trace
// that terminated early keeps its last value.
inline PoseGraphSummary run_pose_graph(const std::vector<std::string>& images,
                                       const std::vector<QueryRanking>& rankings,
                                       const EdgeVerifier& verifier,
                                       const PoseGraphOptions& opts = {}) {
  if (rankings.empty()) throw ValidationError("pose graph: no retrievals");
  if (opts.repetitions == 0 || opts.trace_points < 2) {
    throw ValidationError("pose graph: need >= 1 repetition and >= 2 trace points");
  }
  PoseGraphSummary summary;
  summary.n_images = images.size();
  for (std::size_t rep = 0; rep < opts.repetitions; ++rep) {
    const auto order = shuffled_query_order(rankings.size(), opts.seed, rep);
    summary.runs.push_back(
        run_pose_graph_once(images, rankings, verifier, order, opts.terminate_on_single_cc));
  }
  summary.total_edges = summary.runs.front().total_edges;
  const std::size_t points = opts.trace_points;
  const double n = double(std::max<std::size_t>(images.size(), 1));
  summary.x.resize(points);
  summary.mean_cc.assign(points, 0.0);
  summary.std_cc.assign(points, 0.0);
  for (std::size_t k = 0; k < points; ++k) {
    summary.x[k] = double(k) / double(points - 1);
    const auto step = std::size_t(std::llround(summary.x[k] * double(summary.total_edges)));
    double sum = 0.0, sum2 = 0.0;
    for (const auto& run : summary.runs) {
      const double y = double(run.cc_trace[std::min(step, run.cc_trace.size() - 1)]) / n;
      sum += y;
      sum2 += y * y;
    }
    const double reps = double(summary.runs.size());
    summary.mean_cc[k] = sum / reps;
    summary.std_cc[k] = std::sqrt(std::max(0.0, sum2 / reps - summary.mean_cc[k] * summary.mean_cc[k]));
  }
  for (const auto& run : summary.runs) {
    summary.stats.max_cc_size += run.stats.max_cc_size;
    summary.stats.final_cc += run.stats.final_cc;
    summary.stats.idx_last += run.stats.idx_last;
    summary.stats.skipped += run.stats.skipped;
    summary.stats.success += run.stats.success;
    summary.stats.failure += run.stats.failure;
  }
  const double reps = double(summary.runs.size());
  for (double* v : {&summary.stats.max_cc_size, &summary.stats.final_cc, &summary.stats.idx_last,
                    &summary.stats.skipped, &summary.stats.success, &summary.stats.failure}) {
    *v /= reps;
  }
  return summary;
}

inline std::string pose_graph_trace_csv(const PoseGraphSummary& s) {
  std::ostringstream os;
  os.precision(17);
  os << "normalized_pairs_processed,normalized_cc,std\n";
  for (std::size_t k = 0; k < s.x.size(); ++k) {
    os << s.x[k] << ',' << s.mean_cc[k] << ',' << s.std_cc[k] << '\n';
  }
  return os.str();
}

}  // namespace vop
