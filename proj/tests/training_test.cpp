#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "oracles.hpp"

namespace vop {
namespace {

SupervisionStore SmallSeparable(std::uint64_t seed, int scenes = 12, int dim = 32) {
  synthetic::SeparableOptions opts;
  opts.scenes = scenes;
  opts.images_per_scene = 4;
  opts.max_shift = 3;
  opts.dim = dim;
  opts.grid = PatchGrid(112, 14);
  opts.seed = seed;
  return synthetic::make_separable_dataset(opts);
}

TrainConfig SmallConfig(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-3;
  cfg.steps_per_epoch = 8;
  cfg.seed = seed;
  return cfg;
}

TrainState FreshState(int input_dim, std::uint64_t seed) {
  TrainState s;
  s.head = EncoderHead<float>::initialize({input_dim, 32, 32, 32}, 0.1, seed);
  return s;
}

std::string Serialize(const EncoderHead<float>& head) {
  std::ostringstream os;
  write_checkpoint(head, os);
  return os.str();
}

TEST(SampleBatch, Composition) {
  const auto store = SmallSeparable(1);
  LossConfig cfg;
  cfg.min_overlap = 0.0;
  cfg.max_overlap = 1.0;
  std::mt19937_64 rng(2);
  const auto batch = sample_batch(store, cfg, 64, rng);
  ASSERT_EQ(batch.size(), 64u);
  std::size_t negatives = 0;
  for (const auto& s : batch) {
    if (s.negative_image_pair()) {
      ++negatives;
      EXPECT_NE(store.scene[s.query], store.scene[s.db]);
    } else {
      EXPECT_EQ(store.scene[s.query], store.scene[s.db]);
    }
  }
  EXPECT_EQ(negatives, 32u);

  std::mt19937_64 odd(3);
  std::size_t odd_neg = 0;
  for (const auto& s : sample_batch(store, cfg, 7, odd)) odd_neg += s.negative_image_pair();
  EXPECT_EQ(odd_neg, 3u);
}

TEST(SampleBatch, PositivesRespectOverlapBounds) {
  synthetic::SeparableOptions opts;
  opts.scenes = 20;
  opts.max_shift = 12;
  opts.dim = 4;
  opts.seed = 4;
  const auto store = synthetic::make_separable_dataset(opts);
  LossConfig cfg;
  std::mt19937_64 rng(5);
  std::size_t checked = 0;
  while (checked < 10000) {
    for (const auto& s : sample_batch(store, cfg, 64, rng)) {
      if (s.negative_image_pair()) continue;
      const double f = double(s.positives->size()) / 256.0;
      EXPECT_GE(f, 0.10);
      EXPECT_LE(f, 0.70);
      ++checked;
    }
  }
}

TEST(SampleBatch, MissingCategoryRaises) {
  auto store = SmallSeparable(6);
  LossConfig cfg;
  cfg.min_overlap = 0.99;
  cfg.max_overlap = 0.995;
  std::mt19937_64 rng(7);
  try {
    sample_batch(store, cfg, 8, rng);
    FAIL() << "expected SamplingError";
  } catch (const SamplingError& e) {
    EXPECT_NE(std::string(e.what()).find("positive"), std::string::npos);
  }

  std::fill(store.scene.begin(), store.scene.end(), 0);
  cfg.min_overlap = 0.0;
  cfg.max_overlap = 1.0;
  try {
    sample_batch(store, cfg, 8, rng);
    FAIL() << "expected SamplingError";
  } catch (const SamplingError& e) {
    EXPECT_NE(std::string(e.what()).find("negative"), std::string::npos);
  }
}

TEST(Augment, StrengthZeroIsIdentity) {
  std::mt19937_64 rng(8);
  const RowMatrixXf x = oracle::random_matrix(10, 16, rng);
  EXPECT_EQ(augment_features(x, rng, 0.0), x);
}

TEST(Augment, SeededAndBounded) {
  std::mt19937_64 src(9);
  const RowMatrixXf x = oracle::random_matrix(16, 64, src);
  std::mt19937_64 a(10), b(10);
  EXPECT_EQ(augment_features(x, a, 0.1), augment_features(x, b, 0.1));

  // Unit-variance inputs: output std is sqrt(E[g^2] + s^2) with g ~ U[0.9, 1.1].
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  std::mt19937_64 rng(11);
  for (int k = 0; k < 2000; ++k) {
    const RowMatrixXf y = augment_features(x, rng, 0.1);
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      sum += y.data()[i];
      sq += double(y.data()[i]) * y.data()[i];
      ++n;
    }
  }
  const double mean = sum / double(n);
  const double in_mean = x.cast<double>().mean();
  const double in_std = std::sqrt((x.cast<double>().array() - in_mean).square().mean());
  const double out_std = std::sqrt(sq / double(n) - mean * mean);
  EXPECT_GE(out_std / in_std, 1.0);
  EXPECT_LE(out_std / in_std, 1.11);
  EXPECT_NEAR(out_std / in_std, std::sqrt(1.0 + 0.01 / 3.0 + 0.01), 0.01);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto head = EncoderHead<double>::initialize({3, 2}, 0.0, 1);
  const auto before = head;
  auto grads = head.zeros_like();
  grads[0].weights.setConstant(0.5);
  grads[0].weights(0, 0) = -2.0;
  grads[0].bias.setConstant(3.0);
  AdamState<double> st;
  adam_update(head, st, grads, 0.01);
  // Bias-corrected first step is lr * g / (|g| + eps).
  const Mat<double> dw = head.layers()[0].weights - before.layers()[0].weights;
  EXPECT_NEAR(dw(0, 0), 0.01, 1e-9);
  EXPECT_NEAR(dw(1, 2), -0.01, 1e-9);
  EXPECT_NEAR(head.layers()[0].bias[1] - before.layers()[0].bias[1], -0.01, 1e-9);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto head = EncoderHead<float>::initialize({4, 3}, 0.0, 2);
  const auto before = head;
  AdamState<float> st;
  adam_update(head, st, head.zeros_like(), 0.1);
  EXPECT_EQ(head.layers()[0].weights, before.layers()[0].weights);
}

TEST(Train, ZeroLearningRateKeepsParametersBitIdentical) {
  const auto store = SmallSeparable(12);
  auto cfg = SmallConfig(13);
  cfg.learning_rate = 0.0;
  cfg.epochs = 2;
  const auto state = FreshState(32, 14);
  const auto res = train(state, store, store, cfg);
  EXPECT_EQ(Serialize(res.last.head), Serialize(state.head));
  ASSERT_EQ(res.log.size(), 2u);
  EXPECT_EQ(res.log[0].val_loss, res.log[1].val_loss);
}

TEST(Train, ValidationLossDecreasesOnSeparableData) {
  const auto train_set = SmallSeparable(15);
  const auto val_set = SmallSeparable(16, 6);
  const auto res = train(FreshState(32, 17), train_set, val_set, SmallConfig(18));
  ASSERT_EQ(res.log.size(), 5u);
  for (std::size_t e = 1; e < res.log.size(); ++e) {
    EXPECT_LT(res.log[e].val_loss, res.log[e - 1].val_loss) << "epoch " << e + 1;
  }
  EXPECT_EQ(res.best_epoch, 5u);
}

TEST(Train, SameSeedSameCheckpoint) {
  const auto store = SmallSeparable(19);
  auto cfg = SmallConfig(20);
  cfg.epochs = 2;
  const auto a = train(FreshState(32, 21), store, store, cfg);
  const auto b = train(FreshState(32, 21), store, store, cfg);
  EXPECT_EQ(Serialize(a.best.head), Serialize(b.best.head));
  cfg.seed = 22;
  const auto c = train(FreshState(32, 21), store, store, cfg);
  EXPECT_NE(Serialize(a.best.head), Serialize(c.best.head));
}

TEST(Train, NonFiniteLossRaises) {
  const auto store = SmallSeparable(23);
  auto state = FreshState(32, 24);
  state.head.mutable_layers()[1].weights(0, 0) = std::numeric_limits<float>::quiet_NaN();
  try {
    train(state, store, store, SmallConfig(25));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos);
  }
}

TEST(Train, RejectsBadConfig) {
  const auto store = SmallSeparable(26);
  auto cfg = SmallConfig(27);
  cfg.batch_size = 0;
  EXPECT_THROW(train(FreshState(32, 1), store, store, cfg), ValidationError);
  cfg = SmallConfig(27);
  cfg.loss.margin = 0.0;
  EXPECT_THROW(train(FreshState(32, 1), store, store, cfg), ValidationError);
  EXPECT_THROW(train(FreshState(16, 1), store, store, SmallConfig(27)), ValidationError);
}

TEST(EvaluatePairs, SeparatesAfterTraining) {
  const auto store = SmallSeparable(28);
  auto cfg = SmallConfig(29);
  cfg.epochs = 8;
  const auto res = train(FreshState(32, 30), store, store, cfg);
  const auto samples = validation_samples(store, cfg.loss, 31);
  const auto stats = evaluate_pairs(res.best.head, store, samples, 1.0);
  EXPECT_GT(stats.mean_positive_similarity - stats.mean_negative_similarity, 0.3);
  EXPECT_GT(stats.positive_count, 0u);
}

}  // namespace
}  // namespace vop
