#pragma once

// Batch sampling, feature-space augmentation and the Adam training loop for
// the encoder head.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vop/core_types.hpp"
#include "vop/encoder.hpp"
#include "vop/geometry.hpp"

namespace vop {

struct LossConfig {
  double margin = 1.0;
  double negative_pair_fraction = 0.5;  // share of image pairs without overlap
  double min_overlap = 0.10;            // positive image pairs are drawn from
  double max_overlap = 0.70;            // [min_overlap, max_overlap]

  void validate() const {
    if (!(margin > 0.0 && margin <= 1.0)) {
      throw ValidationError("loss margin must be in (0, 1]");
    }
    for (double f : {negative_pair_fraction, min_overlap, max_overlap}) {
      if (!(f >= 0.0 && f <= 1.0)) {
        throw ValidationError("loss composition fractions must be in [0, 1]");
      }
    }
    if (min_overlap > max_overlap) {
      throw ValidationError("min_overlap exceeds max_overlap");
    }
  }
};

struct TrainingPair {
  std::size_t query = 0;  // index into SupervisionStore::images
  std::size_t db = 0;
  std::vector<PatchPair> positives;
  double overlap_fraction = 0.0;
};

// Images with scene labels plus supervised image pairs. Images from different
// scenes are assumed not to overlap.
struct SupervisionStore {
  std::vector<ImageFeatures> images;
  std::vector<int> scene;  // parallel to images
  std::vector<TrainingPair> pairs;

  std::vector<std::size_t> eligible_pairs(const LossConfig& cfg) const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const double f = pairs[k].overlap_fraction;
      if (f >= cfg.min_overlap && f <= cfg.max_overlap) out.push_back(k);
    }
    return out;
  }

  bool has_distinct_scenes() const {
    for (std::size_t k = 1; k < scene.size(); ++k) {
      if (scene[k] != scene[0]) return true;
    }
    return false;
  }
};

struct BatchSample {
  std::size_t query = 0;
  std::size_t db = 0;
  const std::vector<PatchPair>* positives = nullptr;  // null: all labels false
  bool negative_image_pair() const { return positives == nullptr; }
};

namespace detail {

inline BatchSample draw_negative(const SupervisionStore& store, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, store.images.size() - 1);
  for (;;) {
    const std::size_t a = pick(rng), b = pick(rng);
    if (store.scene[a] != store.scene[b]) return {a, b, nullptr};
  }
}

}  // namespace detail

// floor(batch_size * negative_pair_fraction) image pairs from distinct
// scenes, the rest drawn from supervised pairs inside the overlap bounds.
inline std::vector<BatchSample> sample_batch(const SupervisionStore& store,
                                             const LossConfig& cfg,
                                             std::size_t batch_size,
                                             std::mt19937_64& rng) {
  if (store.scene.size() != store.images.size()) {
    throw ValidationError("supervision store: scene labels do not match images");
  }
  const auto eligible = store.eligible_pairs(cfg);
  const auto n_neg = std::size_t(double(batch_size) * cfg.negative_pair_fraction);
  const std::size_t n_pos = batch_size - n_neg;
  if (n_pos > 0 && eligible.empty()) {
    throw SamplingError("no positive image pairs with overlap in [" +
                        std::to_string(cfg.min_overlap) + ", " +
                        std::to_string(cfg.max_overlap) + "]");
  }
  if (n_neg > 0 && !store.has_distinct_scenes()) {
    throw SamplingError("no negative image pairs: all images share one scene");
  }
  std::vector<BatchSample> batch;
  batch.reserve(batch_size);
  for (std::size_t k = 0; k < n_neg; ++k) batch.push_back(detail::draw_negative(store, rng));
  if (n_pos > 0) {
    std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
    for (std::size_t k = 0; k < n_pos; ++k) {
      const auto& pair = store.pairs[eligible[pick(rng)]];
      batch.push_back({pair.query, pair.db, &pair.positives});
    }
  }
  return batch;
}

// Feature-space stand-in for photometric augmentation: per-image gain in
// [1 - strength, 1 + strength] plus Gaussian noise with standard deviation
// strength * (std of the input entries).
inline RowMatrixXf augment_features(const RowMatrixXf& feats, std::mt19937_64& rng,
                                   double strength) {
  if (strength <= 0.0 || feats.size() == 0) return feats;
  const double mean = feats.cast<double>().mean();
  const double var = (feats.cast<double>().array() - mean).square().mean();
  std::uniform_real_distribution<double> gain_dist(1.0 - strength, 1.0 + strength);
  const float gain = float(gain_dist(rng));
  std::normal_distribution<float> noise(0.0f, float(strength * std::sqrt(var)));
  RowMatrixXf out(feats.rows(), feats.cols());
  for (Eigen::Index i = 0; i < feats.size(); ++i) {
    out.data()[i] = gain * feats.data()[i] + noise(rng);
  }
  return out;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  LayerTensors<Scalar> first_moment;
  LayerTensors<Scalar> second_moment;
  std::int64_t step = 0;
};

template <typename Scalar>
void adam_update(EncoderHead<Scalar>& head, AdamState<Scalar>& state,
                 const LayerTensors<Scalar>& grads, double lr,
                 const AdamConfig& cfg = {}) {
  if (state.first_moment.empty()) {
    state.first_moment = head.zeros_like();
    state.second_moment = head.zeros_like();
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  const auto b1 = Scalar(cfg.beta1), b2 = Scalar(cfg.beta2);
  const auto step_size = Scalar(lr / c1);
  const auto inv_c2 = Scalar(1.0 / c2);
  const auto eps = Scalar(cfg.eps);
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
    param.array() -= step_size * m.array() / ((v.array() * inv_c2).sqrt() + eps);
  };
  auto& layers = head.mutable_layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    update(layers[l].weights, state.first_moment[l].weights,
           state.second_moment[l].weights, grads[l].weights);
    update(layers[l].bias, state.first_moment[l].bias, state.second_moment[l].bias,
           grads[l].bias);
  }
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 1e-4;
  double augment_strength = 0.1;
  // Batches per epoch; 0 sizes an epoch so every eligible positive pair is
  // drawn once in expectation.
  std::size_t steps_per_epoch = 0;
  std::uint64_t seed = 0;
  LossConfig loss;
  AdamConfig adam;
};

struct TrainState {
  EncoderHead<float> head;
  AdamState<float> optimizer;
  std::size_t epoch = 0;
  std::uint64_t rng_seed = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct PairStatistics {
  double loss = 0.0;
  double mean_positive_similarity = 0.0;
  double mean_negative_similarity = 0.0;
  std::size_t positive_count = 0;
  std::size_t negative_count = 0;
};

// Fixed evaluation set: every eligible pair plus as many negative image pairs
// drawn with `seed`.
inline std::vector<BatchSample> validation_samples(const SupervisionStore& store,
                                                   const LossConfig& cfg,
                                                   std::uint64_t seed) {
  std::vector<BatchSample> out;
  const auto eligible = store.eligible_pairs(cfg);
  std::mt19937_64 rng(seed);
  if (store.has_distinct_scenes()) {
    for (std::size_t k = 0; k < eligible.size(); ++k) {
      out.push_back(detail::draw_negative(store, rng));
    }
  }
  for (auto k : eligible) {
    const auto& pair = store.pairs[k];
    out.push_back({pair.query, pair.db, &pair.positives});
  }
  return out;
}

// Mean loss and similarity statistics with dropout off.
template <typename Scalar>
PairStatistics evaluate_pairs(const EncoderHead<Scalar>& head,
                              const SupervisionStore& store,
                              const std::vector<BatchSample>& samples, double margin) {
  PairStatistics stats;
  if (samples.empty()) return stats;
  double pos_sum = 0.0, neg_sum = 0.0;
  // Embed each image once.
  std::vector<int> needed(store.images.size(), 0);
  for (const auto& s : samples) needed[s.query] = needed[s.db] = 1;
  std::vector<Mat<Scalar>> emb(store.images.size());
  for (std::size_t i = 0; i < store.images.size(); ++i) {
    if (!needed[i]) continue;
    emb[i] = head.forward(store.images[i].patch_feats().template cast<Scalar>(), false)
                 .embeddings;
  }
  for (const auto& s : samples) {
    const auto& eq = emb[s.query];
    const auto& edb = emb[s.db];
    const Mat<Scalar> labels = label_matrix<Scalar>(
        int(eq.rows()), int(edb.rows()),
        s.positives ? *s.positives : std::vector<PatchPair>{});
    stats.loss += contrastive_loss(eq, edb, labels, margin).loss;
    const Mat<Scalar> sim = eq * edb.transpose();
    for (Eigen::Index i = 0; i < sim.rows(); ++i) {
      for (Eigen::Index j = 0; j < sim.cols(); ++j) {
        if (labels(i, j) != Scalar(0)) {
          pos_sum += double(sim(i, j));
          ++stats.positive_count;
        } else {
          neg_sum += double(sim(i, j));
          ++stats.negative_count;
        }
      }
    }
  }
  stats.loss /= double(samples.size());
  if (stats.positive_count) stats.mean_positive_similarity = pos_sum / double(stats.positive_count);
  if (stats.negative_count) stats.mean_negative_similarity = neg_sum / double(stats.negative_count);
  return stats;
}

struct TrainResult {
  TrainState best;   // checkpoint with the lowest validation loss
  TrainState last;
  std::size_t best_epoch = 0;
  std::vector<EpochLog> log;
};

namespace detail {

inline std::string describe_batch(const SupervisionStore& store,
                                  const std::vector<BatchSample>& batch) {
  std::ostringstream os;
  os << "[";
  for (std::size_t k = 0; k < batch.size(); ++k) {
    if (k) os << ", ";
    os << store.images[batch[k].query].image_id() << "/"
       << store.images[batch[k].db].image_id();
  }
  os << "]";
  return os.str();
}

}  // namespace detail

// Adam on mini-batches of image pairs; after every epoch the validation loss
// decides whether the head becomes the best checkpoint. Deterministic for a
// fixed config seed.
inline TrainResult train(TrainState state, const SupervisionStore& train_set,
                         const SupervisionStore& val_set, const TrainConfig& cfg) {
  cfg.loss.validate();
  if (cfg.batch_size == 0) throw ValidationError("batch size must be positive");
  if (!(cfg.learning_rate >= 0.0)) throw ValidationError("learning rate must be >= 0");
  const auto eligible = train_set.eligible_pairs(cfg.loss);
  std::size_t steps = cfg.steps_per_epoch;
  if (steps == 0) {
    const double per_batch =
        double(cfg.batch_size) * (1.0 - cfg.loss.negative_pair_fraction);
    steps = std::max<std::size_t>(
        1, std::size_t(std::ceil(double(eligible.size()) / std::max(per_batch, 1.0))));
  }
  const auto val_samples = validation_samples(val_set, cfg.loss, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  if (val_samples.empty()) throw SamplingError("validation set has no samples");

  state.rng_seed = cfg.seed;
  std::mt19937_64 rng(cfg.seed);
  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  const auto& head0 = state.head;
  if (head0.input_dim() != train_set.images.front().dim()) {
    throw ValidationError("feature dimension " +
                          std::to_string(train_set.images.front().dim()) +
                          " does not match encoder input " +
                          std::to_string(head0.input_dim()));
  }

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    double epoch_loss = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      const auto batch = sample_batch(train_set, cfg.loss, cfg.batch_size, rng);
      auto grads = state.head.zeros_like();
      double batch_loss = 0.0;
      for (const auto& sample : batch) {
        std::mt19937_64 sample_rng(rng());
        const auto& fq = train_set.images[sample.query];
        const auto& fdb = train_set.images[sample.db];
        const RowMatrixXf xq = augment_features(fq.patch_feats(), sample_rng, cfg.augment_strength);
        const RowMatrixXf xdb = augment_features(fdb.patch_feats(), sample_rng, cfg.augment_strength);
        const Mat<float> labels = label_matrix<float>(
            fq.n_patches(), fdb.n_patches(),
            sample.positives ? *sample.positives : std::vector<PatchPair>{});
        auto pg = pair_loss_and_gradient<float>(state.head, xq, xdb, labels,
                                                cfg.loss.margin, true, &sample_rng);
        batch_loss += pg.loss;
        for (std::size_t l = 0; l < grads.size(); ++l) {
          grads[l].weights += pg.grads[l].weights;
          grads[l].bias += pg.grads[l].bias;
        }
      }
      batch_loss /= double(batch.size());
      if (!std::isfinite(batch_loss)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(e + 1) +
                             ", step " + std::to_string(s + 1) + ", batch " +
                             detail::describe_batch(train_set, batch));
      }
      const float inv = 1.0f / float(batch.size());
      for (auto& g : grads) {
        g.weights *= inv;
        g.bias *= inv;
      }
      adam_update(state.head, state.optimizer, grads, cfg.learning_rate, cfg.adam);
      epoch_loss += batch_loss;
    }
    state.epoch = e + 1;
    const double val_loss =
        evaluate_pairs(state.head, val_set, val_samples, cfg.loss.margin).loss;
    if (!std::isfinite(val_loss)) {
      throw NumericalError("non-finite validation loss at epoch " + std::to_string(e + 1));
    }
    result.log.push_back({e + 1, epoch_loss / double(steps), val_loss});
    if (val_loss < best_val) {
      best_val = val_loss;
      result.best = state;
      result.best_epoch = e + 1;
    }
  }
  if (result.log.empty()) result.best = state;
  result.last = std::move(state);
  return result;
}

}  // namespace vop
