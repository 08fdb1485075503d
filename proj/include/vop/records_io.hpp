#pragma once

// JSON-lines records exchanged between commands: supervision pairs, retrieval
// results, and the index sidecar.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vop/binary_io.hpp"
#include "vop/feature_io.hpp"
#include "vop/geometry.hpp"
#include "vop/index.hpp"

namespace vop {

// {"i", "j", "n_patches", "pos": [[p,q],...], "neg_sampled": [[p,q],...],
//  "overlap_fraction", "image_overlap"}
inline nlohmann::json gt_to_json(const GtMatchSet& gt) {
  nlohmann::json j;
  j["i"] = gt.image_i;
  j["j"] = gt.image_j;
  j["n_patches"] = gt.n_patches;
  j["pos"] = nlohmann::json::array();
  for (const auto& [p, q] : gt.positives) j["pos"].push_back({p, q});
  j["neg_sampled"] = nlohmann::json::array();
  for (const auto& [p, q] : gt.negatives) j["neg_sampled"].push_back({p, q});
  j["overlap_fraction"] = gt.overlap_fraction;
  j["image_overlap"] = gt.image_overlap;
  return j;
}

inline GtMatchSet gt_from_json(const nlohmann::json& j) {
  GtMatchSet gt;
  try {
    gt.image_i = j.at("i").get<std::string>();
    gt.image_j = j.at("j").get<std::string>();
    gt.n_patches = j.value("n_patches", kDefaultImageSide / kDefaultPatchSide *
                                            (kDefaultImageSide / kDefaultPatchSide));
    const auto pairs = [&](const char* key) {
      std::vector<PatchPair> out;
      if (!j.contains(key)) return out;
      for (const auto& e : j.at(key)) {
        const int p = e.at(0).get<int>(), q = e.at(1).get<int>();
        if (p < 0 || q < 0 || p >= gt.n_patches || q >= gt.n_patches) {
          throw ValidationError("patch index out of range in pair " + gt.image_i + "/" +
                                gt.image_j);
        }
        out.emplace_back(p, q);
      }
      return out;
    };
    gt.positives = pairs("pos");
    gt.negatives = pairs("neg_sampled");
    gt.overlap_fraction = j.at("overlap_fraction").get<double>();
    gt.image_overlap = j.value("image_overlap", std::uint64_t(gt.positives.size()));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad supervision record: ") + e.what());
  }
  if (!(gt.overlap_fraction >= 0.0 && gt.overlap_fraction <= 1.0)) {
    throw ValidationError("overlap_fraction out of [0, 1] for " + gt.image_i + "/" + gt.image_j);
  }
  return gt;
}

inline std::vector<nlohmann::json> read_json_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

inline void write_json_lines(const std::filesystem::path& path,
                             const std::vector<nlohmann::json>& records) {
  std::string text;
  for (const auto& r : records) text += r.dump() + "\n";
  io::write_text_atomic(path, text);
}

inline std::vector<GtMatchSet> read_supervision(const std::filesystem::path& path) {
  std::vector<GtMatchSet> out;
  for (const auto& j : read_json_lines(path)) out.push_back(gt_from_json(j));
  return out;
}

inline void write_supervision(const std::filesystem::path& path,
                              const std::vector<GtMatchSet>& sets) {
  std::vector<nlohmann::json> records;
  for (const auto& gt : sets) records.push_back(gt_to_json(gt));
  write_json_lines(path, records);
}

struct RankedItem {
  std::string db;
  double score = 0.0;
  std::vector<PatchMatch> matches;
};

struct QueryResult {
  std::string query;
  std::vector<RankedItem> ranked;
};

inline QueryResult to_query_result(const std::string& query,
                                   const std::vector<OverlapScore>& scores) {
  QueryResult r{query, {}};
  for (const auto& s : scores) r.ranked.push_back({s.db_id, s.score, s.matches});
  return r;
}

// {"query": id, "ranked": [{"db": id, "score": f, "matches": [[p,q,d],...]}]}
inline nlohmann::json result_to_json(const QueryResult& r) {
  nlohmann::json j;
  j["query"] = r.query;
  j["ranked"] = nlohmann::json::array();
  for (const auto& item : r.ranked) {
    nlohmann::json m = nlohmann::json::array();
    for (const auto& pm : item.matches) m.push_back({pm.query_patch, pm.db_patch, pm.similarity});
    j["ranked"].push_back({{"db", item.db}, {"score", item.score}, {"matches", m}});
  }
  return j;
}

inline QueryResult result_from_json(const nlohmann::json& j) {
  QueryResult r;
  try {
    r.query = j.at("query").get<std::string>();
    for (const auto& e : j.at("ranked")) {
      RankedItem item{e.at("db").get<std::string>(), e.at("score").get<double>(), {}};
      if (e.contains("matches")) {
        for (const auto& m : e.at("matches")) {
          item.matches.push_back({m.at(0).get<int>(), m.at(1).get<int>(), m.at(2).get<double>()});
        }
      }
      r.ranked.push_back(std::move(item));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad retrieval record: ") + e.what());
  }
  return r;
}

inline std::vector<QueryResult> read_results(const std::filesystem::path& path) {
  std::vector<QueryResult> out;
  for (const auto& j : read_json_lines(path)) out.push_back(result_from_json(j));
  return out;
}

inline void write_results(const std::filesystem::path& path,
                          const std::vector<QueryResult>& results) {
  std::vector<nlohmann::json> records;
  for (const auto& r : results) records.push_back(result_to_json(r));
  write_json_lines(path, records);
}

// Index on disk: `<base>.vopf` with the database embeddings and `<base>.json`
// with N, the grid, epsilon and the TF-IDF constants.
struct IndexSidecar {
  std::size_t n_images = 0;
  int image_side = kDefaultImageSide;
  int patch_side = kDefaultPatchSide;
  int dim = 0;
  std::optional<double> epsilon;
  std::string embeddings_file;
  std::vector<std::string> ids;
};

inline std::filesystem::path index_embeddings_path(const std::filesystem::path& base) {
  auto p = base;
  p += ".vopf";
  return p;
}

inline std::filesystem::path index_sidecar_path(const std::filesystem::path& base) {
  auto p = base;
  p += ".json";
  return p;
}

inline void save_index(const std::filesystem::path& base, const std::vector<ImageEmbeddings>& db,
                       std::optional<double> epsilon) {
  const auto vopf = index_embeddings_path(base);
  write_embeddings(db, vopf);
  nlohmann::json j;
  const PatchGrid grid = db.empty() ? PatchGrid() : db.front().grid();
  j["N"] = db.size();
  j["grid"] = {{"image_side", grid.image_side()},
               {"patch_side", grid.patch_side()},
               {"n_patches", grid.n_patches()}};
  j["dim"] = db.empty() ? 0 : db.front().dim();
  j["epsilon"] = epsilon ? nlohmann::json(*epsilon) : nlohmann::json(nullptr);
  j["tfidf"] = {{"N", db.size()}, {"n_d", std::size_t(grid.n_patches()) * db.size()}};
  j["embeddings_file"] = vopf.filename().string();
  j["ids"] = nlohmann::json::array();
  for (const auto& e : db) j["ids"].push_back(e.image_id());
  io::write_text_atomic(index_sidecar_path(base), j.dump(2) + "\n");
}

inline IndexSidecar read_index_sidecar(const std::filesystem::path& base) {
  const auto path = index_sidecar_path(base);
  IndexSidecar s;
  try {
    const auto j = nlohmann::json::parse(io::read_text(path));
    s.n_images = j.at("N").get<std::size_t>();
    s.image_side = j.at("grid").at("image_side").get<int>();
    s.patch_side = j.at("grid").at("patch_side").get<int>();
    s.dim = j.at("dim").get<int>();
    if (!j.at("epsilon").is_null()) s.epsilon = j.at("epsilon").get<double>();
    s.embeddings_file = j.at("embeddings_file").get<std::string>();
    s.ids = j.at("ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad index sidecar '" + path.string() + "': " + e.what());
  }
  if (s.ids.size() != s.n_images) throw ValidationError("index sidecar: N does not match ids");
  return s;
}

struct LoadedIndex {
  IndexSidecar sidecar;
  std::vector<ImageEmbeddings> db;
  PatchIndex index;
};

inline LoadedIndex load_index(const std::filesystem::path& base) {
  LoadedIndex out;
  out.sidecar = read_index_sidecar(base);
  const auto vopf = base.parent_path() / out.sidecar.embeddings_file;
  out.db = read_embeddings(vopf, out.sidecar.image_side);
  if (out.db.size() != out.sidecar.n_images) {
    throw CorruptionError("index embeddings hold " + std::to_string(out.db.size()) +
                          " images, sidecar says " + std::to_string(out.sidecar.n_images));
  }
  for (std::size_t i = 0; i < out.db.size(); ++i) {
    if (out.db[i].image_id() != out.sidecar.ids[i]) {
      throw CorruptionError("index embeddings and sidecar disagree on image " + std::to_string(i));
    }
  }
  out.index = build_index(out.db);
  return out;
}

}  // namespace vop
