#pragma once

// Subcommands of the `vop` tool. run_cli() parses arguments, runs one command
// and maps library errors onto exit codes:
//   0 success, 1 validation/format, 2 I/O, 3 numerical failure.
// Diagnostics go to the error stream as one JSON object per line.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vop/vop.hpp"

namespace vop::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode { kOk = 0, kValidation = 1, kIo = 2, kNumerical = 3 };

class Diagnostics {
 public:
  Diagnostics(std::ostream& err, std::string command) : err_(err), command_(std::move(command)) {}

  void emit(const std::string& level, const std::string& message, json extra = json::object()) {
    extra["level"] = level;
    extra["command"] = command_;
    extra["message"] = message;
    err_ << extra.dump() << '\n';
  }
  void info(const std::string& m, json extra = json::object()) { emit("info", m, std::move(extra)); }
  void error(const std::string& m, json extra = json::object()) { emit("error", m, std::move(extra)); }
  void set_command(std::string c) { command_ = std::move(c); }

 private:
  std::ostream& err_;
  std::string command_;
};

// Flags shared by all subcommands, merged over the JSON config.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  json config = json::object();

  void load() {
    if (!config_path.empty()) {
      try {
        config = json::parse(io::read_text(config_path));
      } catch (const json::exception& e) {
        throw ValidationError("config '" + config_path + "': " + e.what());
      }
      if (!config.is_object()) throw ValidationError("config must be a JSON object");
    }
  }

  std::uint64_t require_seed() const {
    if (seed) return *seed;
    if (config.contains("seed")) {
      try {
        return config.at("seed").get<std::uint64_t>();
      } catch (const json::exception&) {
        throw ValidationError("config seed must be a non-negative integer");
      }
    }
    throw ValidationError("a seed is required (config \"seed\" or --seed)");
  }

  json section(const std::string& name) const {
    if (!config.contains(name)) return json::object();
    if (!config.at(name).is_object()) throw ValidationError("config section '" + name + "' must be an object");
    return config.at(name);
  }
};

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError("config key '" + key + "': " + e.what());
  }
}

inline PatchGrid grid_from_config(const json& cfg) {
  return PatchGrid(get_or(cfg, "image_side", kDefaultImageSide),
                   get_or(cfg, "patch_side", kDefaultPatchSide));
}

// ---------------------------------------------------------------- supervise

struct SuperviseArgs {
  std::string manifest;
  std::string out;
};

inline int cmd_supervise(const Common& common, const SuperviseArgs& args, Diagnostics& diag) {
  const json cfg = common.section("supervise");
  const std::uint64_t seed = common.require_seed();
  const auto manifest = load_manifest(args.manifest);
  const PatchGrid grid = grid_from_config(common.config);
  DepthSupervisionOptions opts;
  opts.stride = get_or(cfg, "stride", opts.stride);
  opts.max_reprojection_px = get_or(cfg, "max_reprojection_px", opts.max_reprojection_px);
  opts.max_relative_depth = get_or(cfg, "max_relative_depth", opts.max_relative_depth);
  const auto negatives = get_or<std::size_t>(cfg, "negatives_per_pair", 32);

  std::map<std::string, DepthMap> depths;
  const auto depth_of = [&](const ManifestImage& img) -> const DepthMap& {
    auto it = depths.find(img.id);
    if (it != depths.end()) return it->second;
    if (!img.depth) throw ValidationError("image '" + img.id + "' has no depth map");
    return depths.emplace(img.id, read_pgm_depth(*img.depth, img.depth_scale)).first->second;
  };
  std::vector<GtMatchSet> sets;
  for (std::size_t k = 0; k < manifest.pairs.size(); ++k) {
    const auto& a = manifest.find(manifest.pairs[k].first);
    const auto& b = manifest.find(manifest.pairs[k].second);
    if (!a.camera || !b.camera) {
      throw ValidationError("pair " + a.id + "/" + b.id + " needs posed cameras");
    }
    auto gt = build_supervision_depth(a.id, b.id, depth_of(a), depth_of(b), *a.camera, *b.camera,
                                      grid, opts);
    sample_negatives(gt, negatives, seed + k);
    sets.push_back(std::move(gt));
  }
  write_supervision(args.out, sets);
  diag.info("wrote supervision", {{"pairs", sets.size()}, {"out", args.out}});
  return kOk;
}

// -------------------------------------------------------------------- train

struct TrainArgs {
  std::string features;
  std::string supervision;
  std::string manifest;  // optional, for scene labels
  std::string out;
  std::string log;
};

// Scene label per image: from the manifest when it names scenes, otherwise
// connected components of the overlap graph.
inline std::vector<int> derive_scenes(const std::vector<ImageFeatures>& images,
                                      const std::vector<GtMatchSet>& sets,
                                      const std::optional<Manifest>& manifest) {
  std::map<std::string, std::size_t> ordinal;
  for (std::size_t i = 0; i < images.size(); ++i) ordinal[images[i].image_id()] = i;
  std::vector<int> scene(images.size(), -1);
  if (manifest) {
    std::map<std::string, int> names;
    bool any = false;
    for (const auto& img : manifest->images) any = any || !img.scene.empty();
    if (any) {
      for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& name = manifest->find(images[i].image_id()).scene;
        auto it = names.emplace(name, int(names.size())).first;
        scene[i] = it->second;
      }
      return scene;
    }
  }
  UnionFind uf(images.size());
  for (const auto& gt : sets) {
    if (gt.positives.empty()) continue;
    auto a = ordinal.find(gt.image_i), b = ordinal.find(gt.image_j);
    if (a != ordinal.end() && b != ordinal.end()) uf.unite(a->second, b->second);
  }
  std::map<std::size_t, int> label;
  for (std::size_t i = 0; i < images.size(); ++i) {
    scene[i] = label.emplace(uf.find(i), int(label.size())).first->second;
  }
  return scene;
}

inline std::pair<SupervisionStore, SupervisionStore> split_store(
    const std::vector<ImageFeatures>& images, const std::vector<int>& scene,
    const std::vector<GtMatchSet>& sets, double val_fraction, std::uint64_t seed) {
  const int n_scenes = scene.empty() ? 0 : *std::max_element(scene.begin(), scene.end()) + 1;
  std::vector<int> order(static_cast<std::size_t>(n_scenes));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  int n_val = n_scenes < 2 ? 0 : std::max(1, int(std::lround(val_fraction * n_scenes)));
  n_val = std::min(n_val, n_scenes - 1);
  std::set<int> val_scenes(order.begin(), order.begin() + n_val);

  SupervisionStore train, val;
  std::map<std::string, std::pair<bool, std::size_t>> where;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const bool is_val = val_scenes.count(scene[i]) > 0;
    auto& store = is_val ? val : train;
    where[images[i].image_id()] = {is_val, store.images.size()};
    store.images.push_back(images[i]);
    store.scene.push_back(scene[i]);
  }
  for (const auto& gt : sets) {
    auto a = where.find(gt.image_i), b = where.find(gt.image_j);
    if (a == where.end() || b == where.end()) {
      throw ValidationError("supervision pair " + gt.image_i + "/" + gt.image_j +
                            " refers to an image missing from the features");
    }
    if (a->second.first != b->second.first) continue;
    auto& store = a->second.first ? val : train;
    store.pairs.push_back({a->second.second, b->second.second, gt.positives, gt.overlap_fraction});
  }
  if (val_scenes.empty()) val = train;
  return {std::move(train), std::move(val)};
}

inline int cmd_train(const Common& common, const TrainArgs& args, Diagnostics& diag) {
  const json cfg = common.section("train");
  TrainConfig tc;
  tc.seed = common.require_seed();
  tc.epochs = get_or(cfg, "epochs", tc.epochs);
  tc.batch_size = get_or(cfg, "batch_size", tc.batch_size);
  tc.learning_rate = get_or(cfg, "learning_rate", tc.learning_rate);
  tc.augment_strength = get_or(cfg, "augment_strength", tc.augment_strength);
  tc.steps_per_epoch = get_or(cfg, "steps_per_epoch", tc.steps_per_epoch);
  tc.loss.margin = get_or(cfg, "margin", tc.loss.margin);
  tc.loss.negative_pair_fraction = get_or(cfg, "negative_pair_fraction", tc.loss.negative_pair_fraction);
  tc.loss.min_overlap = get_or(cfg, "min_overlap", tc.loss.min_overlap);
  tc.loss.max_overlap = get_or(cfg, "max_overlap", tc.loss.max_overlap);
  const double dropout = get_or(cfg, "dropout", 0.1);
  const double val_fraction = get_or(cfg, "val_fraction", 0.2);

  const auto images = read_features(args.features, grid_from_config(common.config).image_side());
  if (images.empty()) throw ValidationError("no images in '" + args.features + "'");
  const auto sets = read_supervision(args.supervision);
  std::optional<Manifest> manifest;
  if (!args.manifest.empty()) manifest = load_manifest(args.manifest);
  const auto scene = derive_scenes(images, sets, manifest);
  auto [train_set, val_set] = split_store(images, scene, sets, val_fraction, tc.seed);

  const int input_dim = images.front().dim();
  const auto dims = get_or(cfg, "dims", default_layer_dims(input_dim, 256, 2));
  TrainState state;
  state.head = EncoderHead<float>::initialize(dims, dropout, tc.seed);
  diag.info("training", {{"train_images", train_set.images.size()},
                         {"val_images", val_set.images.size()},
                         {"train_pairs", train_set.pairs.size()},
                         {"val_pairs", val_set.pairs.size()}});
  const auto result = train(std::move(state), train_set, val_set, tc);

  std::string csv = "epoch,train_loss,val_loss\n";
  for (const auto& e : result.log) {
    csv += std::to_string(e.epoch) + "," + json(e.train_loss).dump() + "," +
           json(e.val_loss).dump() + "\n";
    diag.info("epoch", {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
  }
  write_checkpoint(result.best.head, fs::path(args.out));
  io::write_text_atomic(args.log.empty() ? args.out + ".loss.csv" : args.log, csv);
  diag.info("wrote checkpoint", {{"best_epoch", result.best_epoch}, {"out", args.out}});
  return kOk;
}

// -------------------------------------------------------------------- embed

struct EmbedArgs {
  std::string checkpoint;
  std::string features;
  std::string out;
  int pool_factor = 1;
};

inline int cmd_embed(const Common& common, const EmbedArgs& args, Diagnostics& diag) {
  const auto head = read_checkpoint<float>(args.checkpoint);
  const int side = grid_from_config(common.config).image_side();
  const auto images = read_features(args.features, side);
  std::vector<ImageEmbeddings> out;
  out.reserve(images.size());
  for (const auto& img : images) {
    if (img.dim() != head.input_dim()) {
      throw ValidationError("image '" + img.image_id() + "' has feature dimension " +
                            std::to_string(img.dim()) + ", checkpoint expects " +
                            std::to_string(head.input_dim()));
    }
    auto emb = embed_image(head, img);
    out.push_back(args.pool_factor == 1 ? std::move(emb) : pool_patches(emb, args.pool_factor));
  }
  write_embeddings(out, args.out);
  diag.info("wrote embeddings", {{"images", out.size()}, {"out", args.out}});
  return kOk;
}

// -------------------------------------------------------------------- index

struct IndexArgs {
  std::string embeddings;
  std::string out;
  std::optional<double> epsilon;
};

inline int cmd_index(const Common& common, const IndexArgs& args, Diagnostics& diag) {
  const json cfg = common.section("index");
  const int side = grid_from_config(common.config).image_side();
  const auto db = read_embeddings(args.embeddings, side);
  std::optional<double> epsilon = args.epsilon;
  if (!epsilon && cfg.contains("epsilon")) epsilon = get_or(cfg, "epsilon", 0.0);
  if (!epsilon && !db.empty()) {
    std::mt19937_64 rng(common.require_seed());
    const auto index = build_index(db);
    epsilon = calibrate_radius(db, index, get_or<std::size_t>(cfg, "calibration_samples", 100), rng);
  }
  if (epsilon && !(*epsilon >= -1.0 && *epsilon <= 1.0)) {
    throw ValidationError("epsilon must lie in [-1, 1]");
  }
  save_index(args.out, db, epsilon);
  diag.info("wrote index", {{"images", db.size()},
                            {"epsilon", epsilon ? json(*epsilon) : json(nullptr)},
                            {"out", args.out}});
  return kOk;
}

// -------------------------------------------------------------------- query

struct QueryArgs {
  std::string index;
  std::string queries;
  std::string out;
  std::size_t top_k = 10;
  std::string mode = "hard";
  std::string weights = "tfidf";
  bool no_prefilter = false;
  std::optional<std::size_t> shortlist;
  std::optional<double> epsilon;
  bool exclude_self = false;
  int pool_factor = 1;
};

inline int cmd_query(const Common& common, const QueryArgs& args, Diagnostics& diag) {
  const json cfg = common.section("query");
  const int side = grid_from_config(common.config).image_side();
  auto loaded = load_index(args.index);
  auto queries = read_embeddings(args.queries, side);
  if (args.pool_factor != 1) {
    for (auto& q : queries) q = pool_patches(q, args.pool_factor);
  }
  RetrievalOptions opts;
  opts.prefilter = !args.no_prefilter && get_or(cfg, "prefilter", true);
  opts.shortlist = args.shortlist.value_or(get_or(cfg, "shortlist", opts.shortlist));
  if (args.mode != "hard" && args.mode != "soft") throw ValidationError("--mode must be hard or soft");
  opts.mode = args.mode == "hard" ? VoteMode::kHard : VoteMode::kSoft;
  if (args.weights != "tfidf" && args.weights != "uniform") {
    throw ValidationError("--weights must be tfidf or uniform");
  }
  opts.tfidf = args.weights == "tfidf";
  opts.epsilon = args.epsilon ? args.epsilon : loaded.sidecar.epsilon;
  if (opts.epsilon && !(*opts.epsilon >= -1.0 && *opts.epsilon <= 1.0)) {
    throw ValidationError("epsilon must lie in [-1, 1]");
  }
  opts.seed = common.seed.value_or(get_or<std::uint64_t>(common.config, "seed", 0));
  std::vector<QueryResult> results;
  for (const auto& q : queries) {
    const std::size_t k = args.top_k == 0 ? 0 : args.top_k + (args.exclude_self ? 1 : 0);
    auto scores = retrieve_topk(q, loaded.index, k, opts);
    if (args.exclude_self) {
      std::erase_if(scores, [&](const OverlapScore& s) { return s.db_id == q.image_id(); });
      if (scores.size() > args.top_k) scores.resize(args.top_k);
    }
    results.push_back(to_query_result(q.image_id(), scores));
  }
  write_results(args.out, results);
  diag.info("wrote retrievals", {{"queries", results.size()}, {"out", args.out}});
  return kOk;
}

// --------------------------------------------------------------------- eval

struct EvalArgs {
  std::string results;
  std::string gt;
  std::string out;
  std::vector<std::size_t> ks{1, 5, 10};
  std::uint64_t threshold = 1;
};

inline int cmd_eval(const Common&, const EvalArgs& args, Diagnostics& diag) {
  const auto results = read_results(args.results);
  const GroundTruth gt(read_supervision(args.gt));
  const auto m = evaluate_retrieval(results, gt, args.ks, args.threshold);
  io::write_text_atomic(args.out, metrics_to_json(m).dump(2) + "\n");
  fs::path csv = args.out;
  csv.replace_extension(".csv");
  io::write_text_atomic(csv, metrics_to_csv(m));
  json summary = json::object();
  for (const auto& [k, v] : m.recall_at_k) summary["recall@" + std::to_string(k)] = v;
  diag.info("metrics", summary);
  return kOk;
}

// ---------------------------------------------------------------- posegraph

struct PoseGraphArgs {
  std::string results;
  std::string gt;
  std::string out_trace;
  std::string out_stats;
  std::uint64_t theta = 1;
  double p_noise = 0.0;
  std::size_t repetitions = 100;
  bool terminate = false;
  std::optional<std::size_t> top_k;
};

inline int cmd_posegraph(const Common& common, const PoseGraphArgs& args, Diagnostics& diag) {
  const std::uint64_t seed = common.require_seed();
  const auto results = read_results(args.results);
  const auto sets = read_supervision(args.gt);
  std::vector<std::string> images;
  std::set<std::string> seen;
  const auto add = [&](const std::string& id) {
    if (seen.insert(id).second) images.push_back(id);
  };
  std::vector<QueryRanking> rankings;
  for (const auto& r : results) {
    add(r.query);
    QueryRanking qr{r.query, {}};
    for (const auto& item : r.ranked) {
      if (args.top_k && qr.ranked.size() >= *args.top_k) break;
      add(item.db);
      qr.ranked.push_back(item.db);
    }
    rankings.push_back(std::move(qr));
  }
  for (const auto& gt : sets) {
    add(gt.image_i);
    add(gt.image_j);
  }
  const GroundTruth truth(sets);
  const OverlapThresholdVerifier verifier(truth.overlaps(), args.theta, args.p_noise, seed);
  PoseGraphOptions opts;
  opts.repetitions = args.repetitions;
  opts.terminate_on_single_cc = args.terminate;
  opts.seed = seed;
  const auto summary = run_pose_graph(images, rankings, verifier, opts);
  io::write_text_atomic(args.out_trace, pose_graph_trace_csv(summary));
  const json stats = {{"n_images", summary.n_images},
                      {"total_edges", summary.total_edges},
                      {"repetitions", summary.runs.size()},
                      {"max_cc_size", summary.stats.max_cc_size},
                      {"cc", summary.stats.final_cc},
                      {"idx_last", summary.stats.idx_last},
                      {"skipped", summary.stats.skipped},
                      {"success", summary.stats.success},
                      {"failure", summary.stats.failure}};
  io::write_text_atomic(args.out_stats, stats.dump(2) + "\n");
  diag.info("pose graph", stats);
  return kOk;
}

// ------------------------------------------------------------------ driver

inline int run_cli(int argc, const char* const* argv, std::ostream& err) {
  CLI::App app{"Patch-overlap image retrieval"};
  app.require_subcommand(1);
  Common common;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON config file");
    sub->add_option("--seed", common.seed, "Random seed (overrides config)");
  };

  SuperviseArgs sup;
  auto* s = app.add_subcommand("supervise", "Patch supervision from posed depth");
  add_common(s);
  s->add_option("--manifest", sup.manifest)->required();
  s->add_option("--out", sup.out)->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the encoder head");
  add_common(t);
  t->add_option("--features", tr.features)->required();
  t->add_option("--supervision", tr.supervision)->required();
  t->add_option("--manifest", tr.manifest, "Manifest with scene labels");
  t->add_option("--out", tr.out)->required();
  t->add_option("--log", tr.log, "Loss CSV (default <out>.loss.csv)");

  EmbedArgs em;
  auto* e = app.add_subcommand("embed", "Embed backbone features");
  add_common(e);
  e->add_option("--checkpoint", em.checkpoint)->required();
  e->add_option("--features", em.features)->required();
  e->add_option("--out", em.out)->required();
  e->add_option("--pool-factor", em.pool_factor)->check(CLI::PositiveNumber);

  IndexArgs ix;
  auto* i = app.add_subcommand("index", "Build a database index");
  add_common(i);
  i->add_option("--embeddings", ix.embeddings)->required();
  i->add_option("--out", ix.out, "Output base path (writes <out>.json and <out>.vopf)")->required();
  i->add_option("--epsilon", ix.epsilon, "Fixed radius instead of calibration");

  QueryArgs qa;
  auto* q = app.add_subcommand("query", "Retrieve database images");
  add_common(q);
  q->add_option("--index", qa.index)->required();
  q->add_option("--queries", qa.queries)->required();
  q->add_option("--out", qa.out)->required();
  q->add_option("--top-k", qa.top_k);
  q->add_option("--mode", qa.mode)->check(CLI::IsMember({"hard", "soft"}));
  q->add_option("--weights", qa.weights)->check(CLI::IsMember({"tfidf", "uniform"}));
  q->add_flag("--no-prefilter", qa.no_prefilter);
  q->add_option("--shortlist", qa.shortlist);
  q->add_option("--epsilon", qa.epsilon);
  q->add_option("--pool-factor", qa.pool_factor)->check(CLI::PositiveNumber);
  q->add_flag("--exclude-self", qa.exclude_self, "Drop the query's own id from its results");

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "Retrieval metrics against ground truth");
  add_common(v);
  v->add_option("--results", ev.results)->required();
  v->add_option("--gt", ev.gt)->required();
  v->add_option("--out", ev.out)->required();
  v->add_option("--k", ev.ks);
  v->add_option("--threshold", ev.threshold, "Minimum image overlap of a positive");

  PoseGraphArgs pg;
  auto* p = app.add_subcommand("posegraph", "Connected-components experiment");
  add_common(p);
  p->add_option("--results", pg.results)->required();
  p->add_option("--gt", pg.gt)->required();
  p->add_option("--out-trace", pg.out_trace)->required();
  p->add_option("--out-stats", pg.out_stats)->required();
  p->add_option("--theta", pg.theta);
  p->add_option("--p-noise", pg.p_noise);
  p->add_option("--repetitions", pg.repetitions);
  p->add_flag("--terminate", pg.terminate, "Stop once all images are connected");
  p->add_option("--top-k", pg.top_k);

  Diagnostics diag(err, "vop");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    diag.error(ex.what());
    return kValidation;
  }
  CLI::App* sub = app.get_subcommands().front();
  diag.set_command(sub->get_name());
  try {
    common.load();
    if (sub == s) return cmd_supervise(common, sup, diag);
    if (sub == t) return cmd_train(common, tr, diag);
    if (sub == e) return cmd_embed(common, em, diag);
    if (sub == i) return cmd_index(common, ix, diag);
    if (sub == q) return cmd_query(common, qa, diag);
    if (sub == v) return cmd_eval(common, ev, diag);
    return cmd_posegraph(common, pg, diag);
  } catch (const ValidationError& ex) {
    diag.error(ex.what(), {{"kind", "validation"}});
    return kValidation;
  } catch (const IoError& ex) {
    diag.error(ex.what(), {{"kind", "io"}});
    return kIo;
  } catch (const NumericalError& ex) {
    diag.error(ex.what(), {{"kind", "numerical"}});
    return kNumerical;
  } catch (const fs::filesystem_error& ex) {
    diag.error(ex.what(), {{"kind", "io"}});
    return kIo;
  } catch (const Error& ex) {
    diag.error(ex.what(), {{"kind", "error"}});
    return kValidation;
  }
}

}  // namespace vop::cli
