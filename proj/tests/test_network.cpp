#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "safs/network.hpp"
#include "safs/pruning.hpp"

using namespace safs;
using namespace safs::network;
using activations::OperatorId;

namespace {

// Parameter count from layer shapes, computed without the library.
std::size_t lenet5_count_by_hand() {
  const std::size_t conv1 = 6 * 1 * 5 * 5 + 6;
  const std::size_t conv2 = 16 * 6 * 5 * 5 + 16;
  const std::size_t fc1 = 400 * 120 + 120, fc2 = 120 * 84 + 84, fc3 = 84 * 10 + 10;
  return conv1 + conv2 + fc1 + fc2 + fc3;
}

}  // namespace

TEST(LeNet5, TopologyAndParameterCount) {
  Model m = build_lenet5(0);
  EXPECT_EQ(m.depth(), 4u);
  EXPECT_EQ(lenet5_count_by_hand(), 61706u);
  EXPECT_EQ(m.parameter_count(), 61706u);
  std::vector<std::string> names;
  for (const auto& p : m.parameters()) names.push_back(p.name);
  EXPECT_EQ(names, (std::vector<std::string>{"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc1.weight",
                                             "fc1.bias", "fc2.weight", "fc2.bias", "fc3.weight", "fc3.bias"}));
}

TEST(LeNet5, ZeroImageGivesTenFiniteLogits) {
  Model m = build_lenet5(1);
  engine::Tape tape(engine::GradMode::disabled);
  auto y = m.forward(tape, engine::Tensor::zeros({1, 1, 28, 28}));
  EXPECT_EQ(y.shape(), (engine::Shape{1, 10}));
  for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
  auto y5 = m.forward(tape, engine::Tensor::zeros({5, 1, 28, 28}));
  EXPECT_EQ(y5.shape(), (engine::Shape{5, 10}));
}

TEST(LeNet5, KaimingUniformBoundsAndZeroBias) {
  Model m = build_lenet5(2);
  for (const auto& l : m.layers()) {
    const auto& s = l.weight.shape();
    const double fan_in = l.kind == LayerKind::conv ? s[1] * s[2] * s[3] : s[0];
    const double bound = std::sqrt(6.0 / fan_in);
    for (double w : l.weight.data()) EXPECT_LE(std::abs(w), bound);
    for (double b : l.bias.data()) EXPECT_EQ(b, 0.0);
  }
}

TEST(Build, SeedDeterminism) {
  auto flat = [](const Model& m) {
    std::vector<double> v;
    for (const auto& p : m.parameters()) v.insert(v.end(), p.tensor.data().begin(), p.tensor.data().end());
    return v;
  };
  EXPECT_EQ(flat(build_lenet5(5)), flat(build_lenet5(5)));
  EXPECT_NE(flat(build_lenet5(5)), flat(build_lenet5(6)));
}

TEST(Mlp, DepthAndCounts) {
  EXPECT_EQ(build_mlp({784, 32, 10}, 0).depth(), 1u);
  Model m = build_mlp({4, 8, 8, 2}, 0);
  EXPECT_EQ(m.depth(), 2u);
  EXPECT_EQ(m.parameter_count(), 4u * 8 + 8 + 8 * 8 + 8 + 8 * 2 + 2);
  EXPECT_EQ(m.parameter_count(), 130u);
  Model lin = build_mlp({2, 2}, 0);
  EXPECT_EQ(lin.depth(), 0u);
  EXPECT_THROW(build_mlp({3}, 0), ContractError);
}

TEST(SetActivations, DefaultsAndRoundTrip) {
  Model m = build_lenet5(0);
  m.set_activations(search::uniform_chromosome(4, OperatorId::Swish));
  for (const auto& a : m.activations()) {
    EXPECT_EQ(a.op, OperatorId::Swish);
    EXPECT_EQ(a.alpha, 1.0);
    EXPECT_EQ(a.beta, 1.0);
  }
  const search::Chromosome order{{OperatorId::Symlog, OperatorId::Acon, OperatorId::Swish, OperatorId::HardSwish}};
  const std::vector<Scale> scales{{1.5, 0.5}, {2, 1}, {1, 3}, {0.25, 0.75}};
  m.set_activations(order, scales);
  EXPECT_EQ(m.chromosome(), order);
  EXPECT_EQ(m.scales(), scales);
  EXPECT_THROW(m.set_activations(search::uniform_chromosome(3, OperatorId::Tanh)), ContractError);
  EXPECT_THROW(m.set_activations(order, std::vector<Scale>(2)), ContractError);
}

TEST(Snapshot, BinaryRoundTripIsBitExact) {
  Model m = build_lenet5(4);
  m.set_activations({{OperatorId::Symlog, OperatorId::Acon, OperatorId::Swish, OperatorId::HardSwish}},
                    std::vector<Scale>{{1.25, 0.5}, {1, 1}, {0.1, 3}, {2, 2}});
  m.set_scales_trainable(true);
  auto mask = pruning::magnitude_prune(m, 0.9);
  pruning::apply_mask(m, mask);
  const NetworkSnapshot s = m.snapshot(mask);

  std::stringstream buf;
  write_snapshot(s, buf);
  const NetworkSnapshot r = read_snapshot(buf);
  EXPECT_EQ(r.spec, s.spec);
  EXPECT_EQ(r.ops, s.ops);
  EXPECT_EQ(r.scales_trainable, true);
  ASSERT_TRUE(r.mask.has_value());
  EXPECT_EQ(*r.mask, mask);
  ASSERT_EQ(r.tensors.size(), s.tensors.size());
  for (std::size_t i = 0; i < s.tensors.size(); ++i) {
    EXPECT_EQ(r.tensors[i].name, s.tensors[i].name);
    EXPECT_EQ(r.tensors[i].tensor.shape(), s.tensors[i].tensor.shape());
    for (std::size_t j = 0; j < s.tensors[i].tensor.numel(); ++j)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(r.tensors[i].tensor.data()[j]),
                std::bit_cast<std::uint64_t>(s.tensors[i].tensor.data()[j]));
  }
  Model back = Model::from_snapshot(r);
  EXPECT_EQ(back.chromosome(), m.chromosome());
  EXPECT_EQ(back.scales(), m.scales());
}

TEST(Snapshot, RejectsBadMagicAndTruncation) {
  std::stringstream bad("NOTASNAPSHOT");
  EXPECT_THROW(read_snapshot(bad), FormatError);
  std::stringstream buf;
  write_snapshot(build_mlp({4, 3, 2}, 0).snapshot(), buf);
  std::string bytes = buf.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(read_snapshot(cut), FormatError);
}
