#include <gtest/gtest.h>

#include <filesystem>

#include "cvdmp/cvae.hpp"
#include "cvdmp/dataset.hpp"
#include "support/gradient_suite.hpp"

using namespace cvdmp;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 8;
  c.rng_seed = 5;
  c.arch.conv1_channels = 4;
  c.arch.conv2_channels = 6;
  c.arch.hidden1 = 16;
  c.arch.hidden2 = 16;
  return c;
}

DatasetBundle small_bundle() {
  AugmentConfig a;
  a.copies_per_demo = 6;
  return augment(digit_templates({1, 2}), a);
}

ForceProfile template_force(int digit) {
  const DmpConfig cfg;
  return inverse_dynamics(cfg, digit_template(digit, cfg));
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cvdmp_test_cvae";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Model, EncodeAndDecodeAreDeterministic) {
  const CvaeModel m = make_model(CvaeArchitecture{}, {1, 2, 3, 7}, 3);
  const ForceProfile f = template_force(3);
  const LatentCode a = encode(m, f, 3), b = encode(m, f, 3);
  EXPECT_EQ(a.mu, b.mu);
  EXPECT_EQ(a.log_var, b.log_var);
  EXPECT_EQ(a.z, a.mu);
  const DmpConfig cfg;
  EXPECT_EQ(decode(m, cfg, a.z, 3).f, decode(m, cfg, a.z, 3).f);
}

TEST(Model, ZeroHeadWeightsGiveBiasAsPosteriorMean) {
  CvaeModel m = make_model(CvaeArchitecture{}, {1, 2}, 4);
  auto head = m.encoder_head.parameters();
  head[0]->fill(0.0);
  for (std::size_t i = 0; i < head[1]->size(); ++i) (*head[1])[i] = 0.1 * static_cast<double>(i);
  const LatentCode c = encode(m, template_force(1), 1);
  for (Eigen::Index i = 0; i < c.mu.size(); ++i) {
    EXPECT_DOUBLE_EQ(c.mu[i], 0.1 * static_cast<double>(i));
    EXPECT_DOUBLE_EQ(c.log_var[i], 0.1 * static_cast<double>(i + c.mu.size()));
  }
}

TEST(Model, NoiseShiftsLatentByStandardDeviation) {
  CvaeModel m = make_model(CvaeArchitecture{}, {1}, 4);
  auto head = m.encoder_head.parameters();
  head[0]->fill(0.0);
  head[1]->fill(0.0);  // mu = 0, log_var = 0
  const Vec noise = Vec::LinSpaced(4, -1.0, 1.0);
  EXPECT_EQ(encode(m, template_force(1), 1, noise).z, noise);
}

TEST(Model, UnknownTaskListsVocabulary) {
  const CvaeModel m = make_model(CvaeArchitecture{}, {1, 2, 3, 7}, 3);
  try {
    decode(m, DmpConfig{}, Vec::Zero(4), 9);
    FAIL() << "expected UsageError";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("{1, 2, 3, 7}"), std::string::npos) << e.what();
  }
}

TEST(Model, WrongForceLengthIsRejected) {
  const CvaeModel m = make_model(CvaeArchitecture{}, {1}, 3);
  DmpConfig cfg;
  cfg.n_steps = 60;
  const ForceProfile f = inverse_dynamics(cfg, digit_template(1, cfg));
  EXPECT_THROW(encode(m, f, 1), DataError);
}

TEST(Model, PackAndUnpackAreInverse) {
  CvaeModel m = make_model(CvaeArchitecture{}, {1}, 1);
  m.force_mean = (Vec(2) << 3.0, -1.0).finished();
  m.force_scale = (Vec(2) << 20.0, 0.5).finished();
  const ForceProfile f = template_force(2);
  const nn::Tensor packed = pack_force(m, f).reshaped({1, m.arch.force_length()});
  const ForceProfile back = unpack_force(m, packed, f.phase);
  EXPECT_LT((back.f - f.f).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Elbo, IdentityDecoderAndStandardPosteriorGiveZero) {
  // Zero every weight: mu = log_var = 0 so KL = 0; with zero noise the
  // decoder emits zeros, which is the standardized target when the force
  // equals the stored mean.
  CvaeModel m = make_model(testing_support::tiny_architecture(), {1, 2}, 1);
  for (nn::Network* net : {&m.encoder_trunk, &m.encoder_head, &m.decoder})
    for (nn::Tensor* p : net->parameters()) p->fill(0.0);
  m.force_mean = (Vec(2) << 1.5, -2.0).finished();
  ForceProfile f;
  f.f = Mat(16, 2);
  f.f.col(0).setConstant(1.5);
  f.f.col(1).setConstant(-2.0);
  f.phase = Vec::LinSpaced(16, 1.0, 0.1);
  const ElboResult r = elbo_loss(m, f, 2, 1.0, Vec::Zero(3));
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(r.kl, 0.0);
}

TEST(Elbo, KlWeightZeroLeavesReconstruction) {
  std::mt19937_64 rng(8);
  const CvaeModel m = testing_support::tiny_model(rng);
  ForceProfile f;
  f.f = testing_support::random_mat(16, 2, rng);
  f.phase = Vec::LinSpaced(16, 1.0, 0.1);
  const Vec noise = Vec::Constant(3, 0.3);
  const ElboResult r0 = elbo_loss(m, f, 1, 0.0, noise);
  const ElboResult r1 = elbo_loss(m, f, 1, 0.7, noise);
  EXPECT_EQ(r0.loss, r0.reconstruction);
  EXPECT_EQ(r0.reconstruction, r1.reconstruction);
  EXPECT_DOUBLE_EQ(r1.loss, r1.reconstruction + 0.7 * r1.kl);
  EXPECT_GT(r1.kl, 0.0);
}

TEST(Elbo, ReconstructionGradientMatchesFiniteDifferences) {
  const auto e = testing_support::elbo_suite(20, 201, true);
  EXPECT_LT(e.max_error, e.tolerance);
}

TEST(Elbo, TotalGradientMatchesFiniteDifferences) {
  const auto e = testing_support::elbo_suite(20, 202, false);
  EXPECT_LT(e.max_error, e.tolerance);
}

TEST(Train, SingleEpochSingleSampleBatchRuns) {
  TrainConfig c = small_config();
  c.epochs = 1;
  c.batch_size = 1;
  const CvaeModel m = train(digit_templates({1, 3}), c);
  ASSERT_EQ(m.training.loss_curve.size(), 1u);
  EXPECT_TRUE(std::isfinite(m.training.loss_curve[0]));
  EXPECT_EQ(m.training.samples, 2u);
  EXPECT_EQ(m.vocabulary, (std::vector<int>{1, 3}));
}

TEST(Train, RepeatedRunsAreBitIdentical) {
  const DatasetBundle b = small_bundle();
  const TrainConfig c = small_config();
  EXPECT_EQ(serialize(train(b, c)), serialize(train(b, c)));
}

TEST(Train, ThreadCountDoesNotChangeResult) {
  const DatasetBundle b = small_bundle();
  TrainConfig c = small_config();
  const std::string one = serialize(train(b, c));
  c.threads = 3;
  EXPECT_EQ(one, serialize(train(b, c)));
}

TEST(Train, StoresStandardizationAndAnchors) {
  const DatasetBundle b = small_bundle();
  const CvaeModel m = train(b, small_config());
  EXPECT_GT(m.force_scale.minCoeff(), 0.0);
  // templates start at [0, 1]; copies share the start exactly
  EXPECT_LT((m.anchor(1).start - Vec::Unit(2, 1)).norm(), 1e-12);
  EXPECT_LT((m.anchor(2).goal - Vec::Unit(2, 0)).norm(), 1e-2);
}

TEST(Train, InvalidConfigIsRejected) {
  TrainConfig c = small_config();
  c.epochs = 0;
  EXPECT_THROW(train(small_bundle(), c), UsageError);
  EXPECT_THROW(train(DatasetBundle{}, small_config()), DataError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const CvaeModel m = train(small_bundle(), small_config());
  const ArtifactStamp stamp{5, "abcd0123"};
  const auto path = temp_file("round_trip.ckpt");
  save(m, path, &stamp);
  const CvaeModel back = load(path);
  EXPECT_EQ(serialize(back), serialize(m));
  const auto a = detail::all_parameters(m), b = detail::all_parameters(back);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->buffer(), b[i]->buffer());
  const ForceProfile f = template_force(1);
  EXPECT_EQ(encode(m, f, 1).mu, encode(back, f, 1).mu);
  EXPECT_EQ(m.training.loss_curve, back.training.loss_curve);
}

TEST(Checkpoint, CorruptedParameterByteFailsChecksum) {
  std::string bytes = serialize(make_model(CvaeArchitecture{}, {1, 2}, 2));
  bytes[bytes.size() - 100] ^= 0x01;
  EXPECT_THROW(deserialize(bytes), ChecksumError);
}

TEST(Checkpoint, NewerVersionNamesBothVersions) {
  std::string bytes = serialize(make_model(CvaeArchitecture{}, {1}, 2));
  bytes[8] = 2;
  try {
    deserialize(bytes);
    FAIL() << "expected CheckpointVersionError";
  } catch (const CheckpointVersionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("version 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("version 1"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, TruncationIsDetected) {
  const std::string bytes = serialize(make_model(CvaeArchitecture{}, {1}, 2));
  EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() - 8)), TruncatedFileError);
  EXPECT_THROW(deserialize(bytes.substr(0, 30)), TruncatedFileError);
  EXPECT_THROW(deserialize(bytes.substr(0, 10)), TruncatedFileError);
}

TEST(Checkpoint, BadMagicAndTrailingBytesAreDataErrors) {
  std::string bytes = serialize(make_model(CvaeArchitecture{}, {1}, 2));
  EXPECT_THROW(deserialize(bytes + "x"), DataError);
  bytes[0] = 'X';
  EXPECT_THROW(deserialize(bytes), DataError);
}

TEST(Checkpoint, MissingFileIsReported) {
  EXPECT_THROW(load(temp_file("does_not_exist.ckpt")), Error);
}
