#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"

namespace vop {
namespace {

const PatchGrid kSmallGrid(56, 14);  // 4 x 4 patches

ImageEmbeddings RandomImage(const std::string& id, const PatchGrid& grid, int dim,
                            std::mt19937_64& rng) {
  const RowMatrixXf m = oracle::random_matrix(grid.n_patches(), dim, rng);
  Eigen::VectorXf cls = m.colwise().sum().transpose();
  return ImageEmbeddings(id, m, cls, grid);
}

std::vector<ImageEmbeddings> RandomDb(std::size_t n, const PatchGrid& grid, int dim,
                                      std::mt19937_64& rng) {
  std::vector<ImageEmbeddings> db;
  for (std::size_t i = 0; i < n; ++i) db.push_back(RandomImage("db" + std::to_string(i), grid, dim, rng));
  return db;
}

// Images whose patches sit near a few shared centres, so radius queries with
// a high threshold can prune whole subtrees.
std::vector<ImageEmbeddings> ClusteredDb(std::size_t n, int dim, std::mt19937_64& rng) {
  const RowMatrixXf centres = oracle::random_matrix(12, dim, rng);
  std::uniform_int_distribution<int> pick(0, 11);
  std::normal_distribution<float> g(0.0f, 0.3f);
  std::vector<ImageEmbeddings> db;
  for (std::size_t i = 0; i < n; ++i) {
    RowMatrixXf m(kSmallGrid.n_patches(), dim);
    for (int p = 0; p < m.rows(); ++p) {
      m.row(p) = centres.row(pick(rng));
      for (int d = 0; d < dim; ++d) m(p, d) += g(rng);
    }
    db.emplace_back("c" + std::to_string(i), m, Eigen::VectorXf(m.colwise().sum().transpose()),
                    kSmallGrid);
  }
  return db;
}

std::vector<bool> NoSkip(const PatchIndex& index) {
  std::vector<bool> skip(index.entry_count());
  for (std::size_t e = 0; e < skip.size(); ++e) skip[e] = index.is_degenerate(e);
  return skip;
}

TEST(BuildIndex, EmptyDatabase) {
  const auto index = build_index({});
  EXPECT_EQ(index.size(), 0u);
  EXPECT_EQ(index.entry_count(), 0u);
  const std::vector<float> q(8, 0.5f);
  EXPECT_TRUE(index.radius_neighbors(q, -1.0).empty());
  std::mt19937_64 rng(1);
  EXPECT_TRUE(retrieve_topk(RandomImage("q", kSmallGrid, 8, rng), index, 5).empty());
}

TEST(BuildIndex, EntryCountIsImagesTimesPatches) {
  std::mt19937_64 rng(2);
  const auto index = build_index(RandomDb(10, PatchGrid(), 4, rng));
  EXPECT_EQ(index.size(), 10u);
  EXPECT_EQ(index.entry_count(), 2560u);
  EXPECT_EQ(index.n_patches(), 256);
  EXPECT_TRUE(index.uses_tree());
}

TEST(BuildIndex, RejectsMixedShapes) {
  std::mt19937_64 rng(3);
  std::vector<ImageEmbeddings> db{RandomImage("a", kSmallGrid, 8, rng),
                                  RandomImage("b", kSmallGrid, 6, rng)};
  EXPECT_THROW(build_index(db), ValidationError);
  db.back() = RandomImage("b", PatchGrid(28, 14), 8, rng);
  EXPECT_THROW(build_index(db), ValidationError);
}

TEST(RadiusNeighbors, MatchesLinearScan) {
  std::mt19937_64 rng(4);
  for (const bool clustered : {false, true}) {
    const auto db = clustered ? ClusteredDb(60, 16, rng) : RandomDb(60, kSmallGrid, 16, rng);
    const auto index = build_index(db);
    ASSERT_TRUE(index.uses_tree());
    const auto skip = NoSkip(index);
    for (int t = 0; t < 100; ++t) {
      const auto& img = db[std::size_t(t) % db.size()];
      RowMatrixXf qm = img.patch_embs().row(t % 16);
      for (int d = 0; d < 16; ++d) qm(0, d) += 0.2f * float(t % 3) * oracle::random_matrix(1, 1, rng)(0, 0);
      qm.row(0).normalize();
      for (double eps : {-0.5, 0.0, 0.3, 0.8, 0.95}) {
        const auto got = index.radius_neighbors({qm.data(), 16}, eps);
        const auto want = oracle::linear_scan(index.entries(), skip, qm.data(), eps);
        std::set<std::uint32_t> got_set;
        for (const auto& nb : got) {
          got_set.insert(nb.entry);
          EXPECT_EQ(nb.image, nb.entry / 16);
          EXPECT_EQ(nb.patch, nb.entry % 16);
          EXPECT_GE(nb.similarity, eps);
        }
        EXPECT_EQ(got_set, want) << "eps " << eps << " query " << t;
        EXPECT_EQ(got_set.size(), got.size());
      }
    }
  }
}

TEST(RadiusNeighbors, RestrictionAndExtremes) {
  std::mt19937_64 rng(5);
  auto db = RandomDb(20, kSmallGrid, 8, rng);
  // Image 20 duplicates image 3.
  db.emplace_back("dup", db[3].patch_embs(), db[3].cls_emb(), kSmallGrid);
  const auto index = build_index(db);
  const auto row = db[3].patch_embs().row(5);
  const std::span<const float> q(row.data(), 8);

  EXPECT_EQ(index.radius_neighbors(q, -1.0).size(), index.entry_count());
  std::vector<bool> allowed(index.size(), false);
  allowed[2] = allowed[7] = true;
  const auto restricted = index.radius_neighbors(q, -1.0, &allowed);
  ASSERT_EQ(restricted.size(), 32u);
  for (const auto& nb : restricted) EXPECT_TRUE(nb.image == 2 || nb.image == 7);

  for (double eps : {1.0 - 1e-6, 1.0 + 1e-9}) {
    for (const auto& nb : index.radius_neighbors(q, eps)) {
      EXPECT_EQ(index.entries().row(nb.entry), row) << eps;
    }
  }
  const auto near_one = index.radius_neighbors(q, 1.0 - 1e-6);
  ASSERT_EQ(near_one.size(), 2u);
  EXPECT_EQ(near_one[0].entry, 3u * 16u + 5u);
  EXPECT_EQ(near_one[1].entry, 20u * 16u + 5u);
  EXPECT_TRUE(index.radius_neighbors(q, 1.1).empty());
  EXPECT_THROW(index.radius_neighbors(std::span<const float>(row.data(), 4), 0.0),
               ValidationError);
}

TEST(RadiusNeighbors, DegenerateEntriesNeverReturned) {
  RowMatrixXf m = RowMatrixXf::Ones(16, 4);
  m.row(3).setZero();
  const auto index = build_index({ImageEmbeddings("z", m, std::nullopt, kSmallGrid)});
  const std::vector<float> q{0.5f, 0.5f, 0.5f, 0.5f};
  const auto got = index.radius_neighbors(q, -1.0);
  EXPECT_EQ(got.size(), 15u);
  for (const auto& nb : got) EXPECT_NE(nb.entry, 3u);
}

TEST(CalibrateRadius, IdenticalEmbeddingsGiveOne) {
  RowMatrixXf m = RowMatrixXf::Ones(16, 8);
  std::vector<ImageEmbeddings> db{ImageEmbeddings("a", m, std::nullopt, kSmallGrid),
                                  ImageEmbeddings("b", m, std::nullopt, kSmallGrid)};
  std::mt19937_64 rng(6);
  EXPECT_EQ(calibrate_radius(db, build_index(db), 100, rng), 1.0);
}

TEST(CalibrateRadius, RandomHighDimensionalNearZero) {
  std::mt19937_64 rng(7);
  const auto db = RandomDb(10, kSmallGrid, 1024, rng);
  const auto queries = RandomDb(5, kSmallGrid, 1024, rng);
  const auto index = build_index(db);
  std::mt19937_64 a(8), b(8);
  const double eps = calibrate_radius(queries, index, 100, a);
  EXPECT_NEAR(eps, 0.0, 0.05);
  EXPECT_EQ(eps, calibrate_radius(queries, index, 100, b));
  EXPECT_EQ(std::round(eps * 100.0) / 100.0, eps);
  EXPECT_THROW(calibrate_radius({}, index, 100, a), ValidationError);
  EXPECT_THROW(calibrate_radius(queries, build_index({}), 100, a), ValidationError);
}

TEST(ClsPrefilter, MatchesSortOracle) {
  std::mt19937_64 rng(9);
  const auto db = RandomDb(30, kSmallGrid, 8, rng);
  const auto index = build_index(db);
  const auto q = RandomImage("q", kSmallGrid, 8, rng);
  const auto& c = *q.cls_emb();
  std::vector<std::pair<double, std::uint32_t>> want;
  for (std::uint32_t i = 0; i < 30; ++i) {
    double s = 0.0;
    for (int d = 0; d < 8; ++d) s += double(c[d]) * double((*db[i].cls_emb())[d]);
    want.emplace_back(-s, i);
  }
  std::sort(want.begin(), want.end());
  const auto got = cls_prefilter({c.data(), 8}, index, 10);
  ASSERT_EQ(got.size(), 10u);
  for (std::size_t k = 0; k < 10; ++k) EXPECT_EQ(got[k], want[k].second);

  const auto all = cls_prefilter({c.data(), 8}, index, 100);
  ASSERT_EQ(all.size(), 30u);
  EXPECT_EQ(std::set<std::uint32_t>(all.begin(), all.end()).size(), 30u);

  const auto& c7 = *db[7].cls_emb();
  EXPECT_EQ(cls_prefilter({c7.data(), 8}, index, 3).front(), 7u);
}

TEST(ClsPrefilter, MissingClsRaises) {
  std::mt19937_64 rng(10);
  const RowMatrixXf m = oracle::random_matrix(16, 8, rng);
  const ImageEmbeddings bare("a", m, std::nullopt, kSmallGrid);
  const auto index = build_index({bare});
  const std::vector<float> c(8, 1.0f);
  EXPECT_THROW(cls_prefilter(c, index, 5), ValidationError);
  const auto with_cls = build_index({RandomImage("b", kSmallGrid, 8, rng)});
  EXPECT_THROW(retrieve_topk(bare, with_cls, 3), ValidationError);
}

std::vector<Neighbor> Hits(std::initializer_list<std::uint32_t> images) {
  std::vector<Neighbor> out;
  std::uint32_t k = 0;
  for (auto img : images) out.push_back({img * 256 + k, img, k++, 0.9});
  return out;
}

TEST(Tfidf, FormulaCases) {
  const std::vector<std::vector<Neighbor>> nbs{
      Hits({1, 1, 4, 4}),                          // n_id 4, n_i 2
      Hits({0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9}),     // n_i = N
      {},                                          // n_i = 0
  };
  const auto w = tfidf_weights(nbs, 10, 256);
  ASSERT_EQ(w.size(), 3u);
  EXPECT_NEAR(w[0], 4.0 / 2560.0 * std::log(5.0), 1e-15);
  EXPECT_EQ(w[1], 0.0);
  EXPECT_EQ(w[2], 0.0);
  EXPECT_EQ(tfidf_weights(nbs, 0, 256), std::vector<double>(3, 0.0));
}

TEST(Tfidf, Invariants) {
  std::mt19937_64 rng(11);
  const auto db = RandomDb(25, kSmallGrid, 6, rng);
  const auto index = build_index(db);
  const auto q = RandomImage("q", kSmallGrid, 6, rng);
  const auto nbs = query_neighbors(q, index, 0.4, nullptr);
  const auto w = tfidf_weights(nbs, 25, 16);
  for (std::size_t p = 0; p < nbs.size(); ++p) {
    std::set<std::uint32_t> imgs;
    for (const auto& nb : nbs[p]) imgs.insert(nb.image);
    EXPECT_LE(imgs.size(), 25u);
    EXPECT_GE(nbs[p].size(), imgs.size());
    EXPECT_GE(w[p], 0.0);
    const double want = imgs.empty() ? 0.0
                                     : double(nbs[p].size()) / 400.0 *
                                           std::log(25.0 / double(imgs.size()));
    EXPECT_NEAR(w[p], want, 1e-15);
  }
}

TEST(VoteOverlap, MatchesBruteForce) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const auto db = RandomDb(8, kSmallGrid, 5, rng);
    const auto index = build_index(db);
    const auto q = RandomImage("q", kSmallGrid, 5, rng);
    const double eps = 0.2 * (trial % 5);
    const auto nbs = query_neighbors(q, index, eps, nullptr);
    const auto w = tfidf_weights(nbs, 8, 16);
    for (std::uint32_t j = 0; j < 8; ++j) {
      for (const auto mode : {VoteMode::kHard, VoteMode::kSoft}) {
        for (const auto* weights : {&w, static_cast<const std::vector<double>*>(nullptr)}) {
          const auto got = vote_overlap(q, index, j, nbs, eps, mode, weights ? *weights : std::vector<double>{});
          const double want = oracle::brute_force_vote(q, db[j], eps, mode == VoteMode::kSoft,
                                                       weights ? *weights : std::vector<double>{});
          EXPECT_NEAR(got.score, want, 1e-12);
        }
      }
    }
  }
}

TEST(VoteOverlap, SelfAndEmptyCases) {
  std::mt19937_64 rng(13);
  const auto db = RandomDb(5, PatchGrid(), 16, rng);
  const auto index = build_index(db);
  const auto nbs = query_neighbors(db[2], index, 0.5, nullptr);
  const auto self = vote_overlap(db[2], index, 2, nbs, 0.5, VoteMode::kHard);
  EXPECT_EQ(self.score, 256.0);
  EXPECT_EQ(self.matches.size(), 256u);
  for (const auto& m : self.matches) EXPECT_EQ(m.query_patch, m.db_patch);

  const auto none = query_neighbors(db[2], index, 1.5, nullptr);
  for (const auto mode : {VoteMode::kHard, VoteMode::kSoft}) {
    EXPECT_EQ(vote_overlap(db[2], index, 1, none, 1.5, mode).score, 0.0);
  }
}

TEST(VoteOverlap, HardScoreIsIntegerAndMonotoneInEpsilon) {
  std::mt19937_64 rng(14);
  const auto db = RandomDb(10, kSmallGrid, 4, rng);
  const auto index = build_index(db);
  const auto q = RandomImage("q", kSmallGrid, 4, rng);
  std::vector<double> last(10, 1e9);
  for (double eps = -1.0; eps <= 1.0; eps += 0.1) {
    const auto nbs = query_neighbors(q, index, eps, nullptr);
    for (std::uint32_t j = 0; j < 10; ++j) {
      const double s = vote_overlap(q, index, j, nbs, eps, VoteMode::kHard).score;
      EXPECT_EQ(s, std::floor(s));
      EXPECT_LE(s, 16.0);
      EXPECT_LE(s, last[j]);
      last[j] = s;
    }
  }
}

TEST(RetrieveTopk, SelfRanksFirstAndOrderIsTotal) {
  std::mt19937_64 rng(15);
  const auto db = RandomDb(12, kSmallGrid, 8, rng);
  const auto index = build_index(db);
  RetrievalOptions opts;
  opts.epsilon = 0.3;
  for (std::size_t i = 0; i < db.size(); ++i) {
    const auto ranked = retrieve_topk(db[i], index, 3, opts);
    ASSERT_EQ(ranked.size(), 3u);
    EXPECT_EQ(ranked.front().db_id, db[i].image_id());
  }
  opts.prefilter = false;
  const auto all = retrieve_topk(db[0], index, 12, opts);
  ASSERT_EQ(all.size(), 12u);
  for (std::size_t k = 1; k < all.size(); ++k) EXPECT_GE(all[k - 1].score, all[k].score);
  std::set<std::string> ids;
  for (const auto& s : all) ids.insert(s.db_id);
  EXPECT_EQ(ids.size(), 12u);
  EXPECT_TRUE(retrieve_topk(db[0], index, 0, opts).empty());
  EXPECT_EQ(retrieve_topk(db[0], index, 50, opts).size(), 12u);
}

TEST(RetrieveTopk, ShortlistLimitsCandidates) {
  std::mt19937_64 rng(16);
  const auto db = RandomDb(12, kSmallGrid, 8, rng);
  const auto index = build_index(db);
  RetrievalOptions opts;
  opts.shortlist = 4;
  opts.epsilon = 0.0;
  const auto& c = *db[5].cls_emb();
  const auto shortlist = cls_prefilter({c.data(), 8}, index, 4);
  const auto ranked = retrieve_topk(db[5], index, 10, opts);
  ASSERT_EQ(ranked.size(), 4u);
  for (const auto& s : ranked) {
    EXPECT_NE(std::find(shortlist.begin(), shortlist.end(), s.db_ordinal), shortlist.end());
  }
}

TEST(RetrieveTopk, ScaleInvariant) {
  std::mt19937_64 rng(17);
  const auto db = RandomDb(10, kSmallGrid, 8, rng);
  std::vector<ImageEmbeddings> scaled;
  for (const auto& e : db) {
    scaled.emplace_back(e.image_id(), RowMatrixXf(e.patch_embs() * 7.5f),
                        Eigen::VectorXf(*e.cls_emb() * 0.25f), kSmallGrid);
  }
  const auto q = RandomImage("q", kSmallGrid, 8, rng);
  const ImageEmbeddings q2("q", RowMatrixXf(q.patch_embs() * 3.0f),
                           Eigen::VectorXf(*q.cls_emb() * 2.0f), kSmallGrid);
  RetrievalOptions opts;
  opts.seed = 3;
  const auto a = retrieve_topk(q, build_index(db), 10, opts);
  const auto b = retrieve_topk(q2, build_index(scaled), 10, opts);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].db_id, b[k].db_id);
    EXPECT_NEAR(a[k].score, b[k].score, 1e-9);
  }
}

// Per query, database embeddings are built so that the similarity of query
// patch p to its Eq.-3 partner b is count(p, b) / C and zero elsewhere. Soft
// voting at epsilon 0 then scores every database image by its directional
// overlap divided by C.
TEST(RetrieveTopk, GroundTruthEncodedEmbeddingsRecoverArgmax) {
  synthetic::WallSceneOptions wopts;
  wopts.dim = 4;
  wopts.seed = 18;
  const auto scene = synthetic::make_wall_scene(wopts);
  const PatchGrid grid;
  const int n = grid.n_patches();
  const GroundTruth gt(synthetic::supervise_scene(scene));
  std::size_t checked = 0;
  for (std::size_t qi = 0; qi < scene.features.size(); ++qi) {
    std::vector<OverlapMatrix> mats;
    std::vector<std::uint64_t> overlap;
    for (std::size_t j = 0; j < scene.features.size(); ++j) {
      if (j == qi) continue;
      mats.push_back(depth_correspondence_overlap(scene.depths[qi], scene.depths[j],
                                                  scene.cameras[qi], scene.cameras[j], grid, {}));
      overlap.push_back(image_overlap(mats.back()).first);
      if (qi < j) {
        EXPECT_EQ(overlap.back(), gt.image_overlap(scene.features[qi].image_id(),
                                                   scene.features[j].image_id()));
      }
    }
    // Column weights: rows whose arg-max lands on column b.
    std::vector<RowMatrixXd> codes;
    double scale = 0.0;
    for (const auto& m : mats) {
      RowMatrixXd code = RowMatrixXd::Zero(n, 2 * n);
      for (const auto& [p, b] : image_overlap(m).second) code(b, p) = m.at(p, b);
      scale = std::max(scale, code.rowwise().norm().maxCoeff());
      codes.push_back(std::move(code));
    }
    std::vector<ImageEmbeddings> db;
    std::vector<std::string> ids;
    for (std::size_t k = 0; k < codes.size(); ++k) {
      RowMatrixXd code = codes[k] / scale;
      for (int b = 0; b < n; ++b) {
        code(b, n + b) = std::sqrt(std::max(0.0, 1.0 - code.row(b).squaredNorm()));
      }
      ids.push_back("d" + std::to_string(k));
      db.emplace_back(ids.back(), RowMatrixXf(code.cast<float>()), std::nullopt, grid);
    }
    const ImageEmbeddings query("q", RowMatrixXf(RowMatrixXf::Identity(n, 2 * n)), std::nullopt,
                                grid);
    RetrievalOptions opts;
    opts.prefilter = false;
    opts.tfidf = false;
    opts.mode = VoteMode::kSoft;
    opts.epsilon = 0.0;
    const auto ranked = retrieve_topk(query, build_index(db), 1, opts);
    ASSERT_EQ(ranked.size(), 1u);
    const auto best = *std::max_element(overlap.begin(), overlap.end());
    ASSERT_GT(best, 0u);
    EXPECT_EQ(overlap[ranked[0].db_ordinal], best) << "query " << qi;
    EXPECT_NEAR(ranked[0].score * scale, double(best), 1e-3 * double(best));
    ++checked;
  }
  EXPECT_EQ(checked, 20u);
}

TEST(PoolPatches, Cases) {
  std::mt19937_64 rng(19);
  const auto e = RandomImage("a", PatchGrid(), 8, rng);
  const auto same = pool_patches(e, 1);
  EXPECT_EQ(same.patch_embs(), e.patch_embs());

  const auto one = pool_patches(e, 16);
  ASSERT_EQ(one.n_patches(), 1);
  Eigen::VectorXd mean = e.patch_embs().cast<double>().colwise().sum().transpose();
  mean.normalize();
  EXPECT_LT((one.patch_embs().row(0).transpose().cast<double>() - mean).cwiseAbs().maxCoeff(), 1e-6);

  const auto four = pool_patches(e, 4);
  ASSERT_EQ(four.n_patches(), 16);
  for (int br = 0; br < 4; ++br) {
    for (int bc = 0; bc < 4; ++bc) {
      Eigen::VectorXd s = Eigen::VectorXd::Zero(8);
      for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
          s += e.patch_embs().row((br * 4 + r) * 16 + bc * 4 + c).transpose().cast<double>();
        }
      }
      s.normalize();
      EXPECT_LT((four.patch_embs().row(br * 4 + bc).transpose().cast<double>() - s)
                    .cwiseAbs()
                    .maxCoeff(),
                1e-6);
    }
  }
  EXPECT_THROW(pool_patches(e, 3), ValidationError);
  EXPECT_THROW(pool_patches(e, 0), ValidationError);
}

}  // namespace
}  // namespace vop
