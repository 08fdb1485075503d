#pragma once

// MLP encoder head over frozen backbone patch features:
//   linear -> [GELU -> dropout -> linear] x (L-1) -> row L2 normalization
// with hand-written backward passes and the patch-level contrastive loss.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vop/core_types.hpp"
#include "vop/error.hpp"

namespace vop {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Exact GELU, x * Phi(x) with Phi the standard normal CDF.
template <typename Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x / std::sqrt(Scalar(2))));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x / std::sqrt(Scalar(2))));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) / std::sqrt(Scalar(2 * M_PI));
  return cdf + x * pdf;
}

template <typename Scalar>
struct DenseLayer {
  Mat<Scalar> weights;  // out x in
  Vec<Scalar> bias;     // out

  template <typename Other>
  DenseLayer<Other> cast() const {
    return {weights.template cast<Other>(), bias.template cast<Other>()};
  }
};

// Per-layer tensors shaped like the head's parameters (gradients, moments).
template <typename Scalar>
using LayerTensors = std::vector<DenseLayer<Scalar>>;

template <typename Scalar>
struct ForwardCache {
  std::vector<Mat<Scalar>> pre_activations;  // linear outputs, one per layer
  std::vector<Mat<Scalar>> dropout_scale;    // per hidden layer, 0 or 1/(1-p)
  std::vector<Mat<Scalar>> layer_inputs;     // what each linear layer consumed
  Vec<Scalar> norms;                         // pre-normalization row norms
};

template <typename Scalar>
struct ForwardResult {
  Mat<Scalar> embeddings;        // unit rows, or zero rows when degenerate
  std::vector<bool> degenerate;  // pre-norm L2 below kDegenerateNorm
  ForwardCache<Scalar> cache;
};

template <typename Scalar>
class EncoderHead {
 public:
  EncoderHead() = default;

  EncoderHead(std::vector<int> layer_dims, LayerTensors<Scalar> layers,
              double dropout_rate)
      : dims_(std::move(layer_dims)),
        layers_(std::move(layers)),
        dropout_rate_(dropout_rate) {
    validate();
  }

  // Weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  static EncoderHead initialize(std::vector<int> layer_dims, double dropout_rate,
                                std::uint64_t seed) {
    if (layer_dims.size() < 2) {
      throw ValidationError("encoder needs at least one layer");
    }
    std::mt19937_64 rng(seed);
    LayerTensors<Scalar> layers;
    for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
      const int in = layer_dims[l], out = layer_dims[l + 1];
      if (in <= 0 || out <= 0) throw ValidationError("layer dims must be positive");
      const double bound = 1.0 / std::sqrt(double(in));
      std::uniform_real_distribution<double> u(-bound, bound);
      DenseLayer<Scalar> layer{Mat<Scalar>(out, in), Vec<Scalar>(out)};
      for (Eigen::Index i = 0; i < layer.weights.size(); ++i) {
        layer.weights.data()[i] = Scalar(u(rng));
      }
      for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = Scalar(u(rng));
      layers.push_back(std::move(layer));
    }
    return EncoderHead(std::move(layer_dims), std::move(layers), dropout_rate);
  }

  const std::vector<int>& layer_dims() const { return dims_; }
  const LayerTensors<Scalar>& layers() const { return layers_; }
  LayerTensors<Scalar>& mutable_layers() { return layers_; }
  double dropout_rate() const { return dropout_rate_; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += std::size_t(l.weights.size() + l.bias.size());
    return n;
  }

  template <typename Other>
  EncoderHead<Other> cast() const {
    LayerTensors<Other> layers;
    for (const auto& l : layers_) layers.push_back(l.template cast<Other>());
    return EncoderHead<Other>(dims_, std::move(layers), dropout_rate_);
  }

  LayerTensors<Scalar> zeros_like() const {
    LayerTensors<Scalar> z;
    for (const auto& l : layers_) {
      z.push_back({Mat<Scalar>::Zero(l.weights.rows(), l.weights.cols()),
                   Vec<Scalar>::Zero(l.bias.size())});
    }
    return z;
  }

  void validate() const {
    if (dims_.size() != layers_.size() + 1 || layers_.empty()) {
      throw ValidationError("encoder layer dims do not match layer count");
    }
    if (!(dropout_rate_ >= 0.0 && dropout_rate_ < 1.0)) {
      throw ValidationError("dropout rate must be in [0, 1)");
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      if (layer.weights.cols() != dims_[l] || layer.weights.rows() != dims_[l + 1] ||
          layer.bias.size() != dims_[l + 1]) {
        throw ValidationError("encoder layer " + std::to_string(l) +
                              " has incompatible shape");
      }
      if (!layer.weights.allFinite() || !layer.bias.allFinite()) {
        throw ValidationError("encoder layer " + std::to_string(l) +
                              " has non-finite parameters");
      }
    }
  }

  // Dropout is applied only when `training` is set; masks come from `rng`.
  ForwardResult<Scalar> forward(const Mat<Scalar>& feats, bool training,
                                std::mt19937_64* rng = nullptr) const {
    if (feats.cols() != input_dim()) {
      throw ValidationError("encoder expects " + std::to_string(input_dim()) +
                            "-dim input, got " + std::to_string(feats.cols()));
    }
    if (training && dropout_rate_ > 0.0 && rng == nullptr) {
      throw ValidationError("training forward with dropout needs an rng");
    }
    ForwardResult<Scalar> out;
    auto& cache = out.cache;
    Mat<Scalar> current = feats;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (l > 0) {
        current = current.unaryExpr([](Scalar v) { return gelu(v); });
        if (training && dropout_rate_ > 0.0) {
          Mat<Scalar> mask(current.rows(), current.cols());
          std::bernoulli_distribution keep(1.0 - dropout_rate_);
          const Scalar scale = Scalar(1.0 / (1.0 - dropout_rate_));
          for (Eigen::Index i = 0; i < mask.size(); ++i) {
            mask.data()[i] = keep(*rng) ? scale : Scalar(0);
          }
          current = current.cwiseProduct(mask);
          cache.dropout_scale.push_back(std::move(mask));
        } else {
          cache.dropout_scale.emplace_back();
        }
      }
      cache.layer_inputs.push_back(current);
      Mat<Scalar> pre = current * layers_[l].weights.transpose();
      pre.rowwise() += layers_[l].bias.transpose();
      cache.pre_activations.push_back(pre);
      current = std::move(pre);
    }
    out.embeddings.resize(current.rows(), current.cols());
    out.degenerate.assign(std::size_t(current.rows()), false);
    cache.norms.resize(current.rows());
    for (Eigen::Index r = 0; r < current.rows(); ++r) {
      const Scalar norm = current.row(r).norm();
      cache.norms[r] = norm;
      if (double(norm) < kDegenerateNorm) {
        out.embeddings.row(r).setZero();
        out.degenerate[std::size_t(r)] = true;
      } else {
        out.embeddings.row(r) = current.row(r) / norm;
      }
    }
    return out;
  }

  // Parameter gradients given d(loss)/d(embeddings) for a forward() result.
  LayerTensors<Scalar> backward(const ForwardResult<Scalar>& fwd,
                                const Mat<Scalar>& grad_embeddings) const {
    const auto& cache = fwd.cache;
    const auto& emb = fwd.embeddings;
    // Through e = u / |u|: du = (de - e <de, e>) / |u|.
    Mat<Scalar> grad(emb.rows(), emb.cols());
    for (Eigen::Index r = 0; r < emb.rows(); ++r) {
      if (fwd.degenerate[std::size_t(r)]) {
        grad.row(r).setZero();
        continue;
      }
      const Scalar dot = grad_embeddings.row(r).dot(emb.row(r));
      grad.row(r) = (grad_embeddings.row(r) - dot * emb.row(r)) / cache.norms[r];
    }
    LayerTensors<Scalar> grads = zeros_like();
    for (std::size_t l = layers_.size(); l-- > 0;) {
      grads[l].weights.noalias() = grad.transpose() * cache.layer_inputs[l];
      grads[l].bias = grad.colwise().sum().transpose();
      if (l == 0) break;
      Mat<Scalar> grad_in = grad * layers_[l].weights;
      if (cache.dropout_scale[l - 1].size() > 0) {
        grad_in = grad_in.cwiseProduct(cache.dropout_scale[l - 1]);
      }
      const auto& pre = cache.pre_activations[l - 1];
      grad = grad_in.cwiseProduct(pre.unaryExpr([](Scalar v) { return gelu_derivative(v); }));
    }
    return grads;
  }

 private:
  std::vector<int> dims_;
  LayerTensors<Scalar> layers_;
  double dropout_rate_ = 0.0;
};

// Default head: 1024 -> 256 projection followed by two 256 -> 256 layers.
inline std::vector<int> default_layer_dims(int backbone_dim = 1024, int embed_dim = 256,
                                           int hidden_layers = 2) {
  std::vector<int> dims{backbone_dim, embed_dim};
  for (int i = 0; i < hidden_layers; ++i) dims.push_back(embed_dim);
  return dims;
}

template <typename Scalar>
struct LossResult {
  double loss = 0.0;
  Mat<Scalar> grad_query;
  Mat<Scalar> grad_db;
};

// Mean over all (query patch, db patch) pairs of
//   l * (margin - d)^2 + (1 - l) * d^2,   d = <e_q, e_db>,
// with labels l in {0, 1}. Both penalties are added.
template <typename Scalar>
LossResult<Scalar> contrastive_loss(const Mat<Scalar>& emb_query,
                                    const Mat<Scalar>& emb_db,
                                    const Mat<Scalar>& labels, double margin) {
  if (emb_query.cols() != emb_db.cols() || labels.rows() != emb_query.rows() ||
      labels.cols() != emb_db.rows()) {
    throw ValidationError("contrastive_loss: shape mismatch");
  }
  if (emb_query.rows() == 0 || emb_db.rows() == 0) {
    throw ValidationError("contrastive_loss: empty batch");
  }
  if (!(margin > 0.0 && margin <= 1.0)) {
    throw ValidationError("contrastive_loss: margin must be in (0, 1]");
  }
  const Scalar inv = Scalar(1.0 / (double(emb_query.rows()) * double(emb_db.rows())));
  const Scalar sigma = Scalar(margin);
  const Mat<Scalar> sim = emb_query * emb_db.transpose();
  Mat<Scalar> dsim(sim.rows(), sim.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    double row = 0.0;
    for (Eigen::Index j = 0; j < sim.cols(); ++j) {
      const Scalar d = sim(i, j);
      if (labels(i, j) != Scalar(0)) {
        row += double((sigma - d) * (sigma - d));
        dsim(i, j) = Scalar(-2) * (sigma - d) * inv;
      } else {
        row += double(d * d);
        dsim(i, j) = Scalar(2) * d * inv;
      }
    }
    total += row;
  }
  LossResult<Scalar> out;
  out.loss = total * double(inv);
  out.grad_query = dsim * emb_db;
  out.grad_db = dsim.transpose() * emb_query;
  return out;
}

template <typename Scalar>
Mat<Scalar> label_matrix(int n_query, int n_db,
                         const std::vector<std::pair<int, int>>& positives) {
  Mat<Scalar> labels = Mat<Scalar>::Zero(n_query, n_db);
  for (const auto& [p, q] : positives) labels(p, q) = Scalar(1);
  return labels;
}

// Loss and parameter gradients for one image pair, query and db patches
// passed through the head in a single stacked batch.
template <typename Scalar>
struct PairGradient {
  double loss = 0.0;
  LayerTensors<Scalar> grads;
};

template <typename Scalar>
PairGradient<Scalar> pair_loss_and_gradient(const EncoderHead<Scalar>& head,
                                            const Mat<Scalar>& feats_query,
                                            const Mat<Scalar>& feats_db,
                                            const Mat<Scalar>& labels, double margin,
                                            bool training, std::mt19937_64* rng) {
  Mat<Scalar> stacked(feats_query.rows() + feats_db.rows(), feats_query.cols());
  stacked.topRows(feats_query.rows()) = feats_query;
  stacked.bottomRows(feats_db.rows()) = feats_db;
  const auto fwd = head.forward(stacked, training, rng);
  const Mat<Scalar> eq = fwd.embeddings.topRows(feats_query.rows());
  const Mat<Scalar> edb = fwd.embeddings.bottomRows(feats_db.rows());
  auto loss = contrastive_loss(eq, edb, labels, margin);
  Mat<Scalar> grad(stacked.rows(), eq.cols());
  grad.topRows(eq.rows()) = loss.grad_query;
  grad.bottomRows(edb.rows()) = loss.grad_db;
  return {loss.loss, head.backward(fwd, grad)};
}

// Embeds whole images with dropout off. The global embedding is the
// re-normalized mean of the patch embeddings.
template <typename Scalar>
ImageEmbeddings embed_image(const EncoderHead<Scalar>& head, const ImageFeatures& feats) {
  const Mat<Scalar> x = feats.patch_feats().template cast<Scalar>();
  const auto fwd = head.forward(x, /*training=*/false);
  const RowMatrixXf emb = fwd.embeddings.template cast<float>();
  Eigen::VectorXf cls = emb.colwise().sum().transpose();
  return ImageEmbeddings(feats.image_id(), emb, cls, feats.grid());
}

}  // namespace vop
