#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "anrot/checkpoint.hpp"
#include "anrot/network.hpp"
#include "test_support.hpp"

namespace anrot {
namespace {

using test::micro_arch;
using test::random_tensor;

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Scalar-loop channel attention: gate_c = sigmoid(mlp(avg_c) + mlp(max_c)).
Tensor<double> naive_channel_attention(const Tensor<double>& x, const ChannelAttentionParams<double>& p) {
  const int C = x.channels(), H = x.height(), W = x.width(), R = p.w1.dim(0);
  Tensor<double> out(x.dims());
  for (int b = 0; b < x.batch(); ++b) {
    std::vector<double> avg(C, 0.0), mx(C, -1e300);
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          avg[c] += x.at(b, c, i, j) / (H * W);
          mx[c] = std::max(mx[c], x.at(b, c, i, j));
        }
    auto mlp = [&](const std::vector<double>& v) {
      std::vector<double> h(R), o(C);
      for (int r = 0; r < R; ++r) {
        h[r] = p.b1[r];
        for (int c = 0; c < C; ++c) h[r] += p.w1[static_cast<std::size_t>(r * C + c)] * v[c];
        h[r] = std::max(0.0, h[r]);
      }
      for (int c = 0; c < C; ++c) {
        o[c] = p.b2[c];
        for (int r = 0; r < R; ++r) o[c] += p.w2[static_cast<std::size_t>(c * R + r)] * h[r];
      }
      return o;
    };
    const auto a = mlp(avg), m = mlp(mx);
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) out.at(b, c, i, j) = x.at(b, c, i, j) * sigmoid(a[c] + m[c]);
  }
  return out;
}

// Scalar-loop spatial attention with zero padding.
Tensor<double> naive_spatial_attention(const Tensor<double>& x, const SpatialAttentionParams<double>& p) {
  const int C = x.channels(), H = x.height(), W = x.width(), K = p.w.dim(2), pad = K / 2;
  Tensor<double> out(x.dims());
  for (int b = 0; b < x.batch(); ++b) {
    std::vector<double> maps(static_cast<std::size_t>(2 * H * W));
    auto at = [&](int ch, int i, int j) -> double& { return maps[static_cast<std::size_t>((ch * H + i) * W + j)]; };
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        double s = 0.0, m = -1e300;
        for (int c = 0; c < C; ++c) {
          s += x.at(b, c, i, j);
          m = std::max(m, x.at(b, c, i, j));
        }
        at(0, i, j) = s / C;
        at(1, i, j) = m;
      }
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        double s = p.b[0];
        for (int ch = 0; ch < 2; ++ch)
          for (int u = 0; u < K; ++u)
            for (int v = 0; v < K; ++v) {
              const int ii = i + u - pad, jj = j + v - pad;
              if (ii >= 0 && ii < H && jj >= 0 && jj < W) s += p.w.at(0, ch, u, v) * at(ch, ii, jj);
            }
        for (int c = 0; c < C; ++c) out.at(b, c, i, j) = x.at(b, c, i, j) * sigmoid(s);
      }
  }
  return out;
}

double max_abs(const Tensor<double>& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

ChannelAttentionParams<double> random_channel_params(std::mt19937_64& rng, int C, int R) {
  return {random_tensor(rng, {R, C}), random_tensor(rng, {R}), random_tensor(rng, {C, R}), random_tensor(rng, {C})};
}

TEST(ChannelAttention, ZeroMlpHalvesInput) {
  std::mt19937_64 rng(1);
  const auto x = random_tensor(rng, {2, 4, 3, 3});
  ChannelAttentionParams<double> p{Tensor<double>({2, 4}), Tensor<double>({2}), Tensor<double>({4, 2}),
                                   Tensor<double>({4})};
  const auto y = channel_attention(x, p);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y[i], 0.5 * x[i]);
}

TEST(ChannelAttention, ZeroInputGivesZero) {
  std::mt19937_64 rng(2);
  const auto y = channel_attention(Tensor<double>({1, 4, 3, 3}), random_channel_params(rng, 4, 2));
  EXPECT_EQ(max_abs(y), 0.0);
}

TEST(ChannelAttention, MatchesScalarReference) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_tensor(rng, {1, 4, 3, 3});
    const auto p = random_channel_params(rng, 4, 2);
    const auto got = channel_attention(x, p), want = naive_channel_attention(x, p);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
  }
}

TEST(ChannelAttention, RejectsMismatchedParameters) {
  std::mt19937_64 rng(4);
  EXPECT_THROW(channel_attention(random_tensor(rng, {1, 3, 2, 2}), random_channel_params(rng, 4, 2)),
               ContractViolation);
}

TEST(SpatialAttention, ZeroKernelHalvesInput) {
  std::mt19937_64 rng(5);
  const auto x = random_tensor(rng, {1, 4, 5, 5});
  const auto y = spatial_attention(x, SpatialAttentionParams<double>{Tensor<double>({1, 2, 3, 3}), Tensor<double>({1})});
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y[i], 0.5 * x[i]);
}

TEST(SpatialAttention, ConstantOverChannelsGivesEqualPooledMaps) {
  // with identical channels, mean and max maps coincide, so swapping the two
  // kernel halves must not change the output
  std::mt19937_64 rng(6);
  const auto plane = random_tensor(rng, {1, 1, 5, 5});
  Tensor<double> x({1, 3, 5, 5});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 25; ++i) x[c * 25 + i] = plane[i];
  const auto w = random_tensor(rng, {1, 2, 3, 3});
  Tensor<double> swapped({1, 2, 3, 3});
  for (int i = 0; i < 9; ++i) {
    swapped[i] = w[9 + i];
    swapped[9 + i] = w[i];
  }
  const Tensor<double> b({1}, 0.2);
  const auto y1 = spatial_attention(x, {w, b}), y2 = spatial_attention(x, {swapped, b});
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y1[i], y2[i], 1e-12);
}

TEST(SpatialAttention, MatchesScalarReference) {
  std::mt19937_64 rng(7);
  for (int k : {3, 5}) {
    const auto x = random_tensor(rng, {1, 4, 5, 5});
    const SpatialAttentionParams<double> p{random_tensor(rng, {1, 2, k, k}), random_tensor(rng, {1})};
    const auto got = spatial_attention(x, p), want = naive_spatial_attention(x, p);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
  }
}

TEST(Attention, GatesNeverAmplify) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor(rng, {2, 8, 4, 4}, -3.0, 3.0);
    const auto c = channel_attention(x, random_channel_params(rng, 8, 2));
    const auto s = spatial_attention(c, SpatialAttentionParams<double>{random_tensor(rng, {1, 2, 3, 3}, -2, 2),
                                                                       random_tensor(rng, {1})});
    EXPECT_LE(max_abs(c), max_abs(x));
    EXPECT_LE(max_abs(s), max_abs(c));
  }
}

TEST(ParamCount, EmptyStateIsZero) { EXPECT_EQ(param_count(ModelState<float>{}).total, 0u); }

TEST(ParamCount, SingleConvHandCount) {
  std::vector<detail::ShapeSpec> specs;
  detail::conv_spec(specs, "c", 1, 8, 3);
  std::size_t n = 0;
  for (const auto& s : specs) {
    std::size_t k = 1;
    for (int d : s.dims) k *= static_cast<std::size_t>(d);
    n += k;
  }
  EXPECT_EQ(n, 80u);
}

TEST(ParamCount, DefaultConv4AttnIsPinned) {
  // hand count: blocks 384 + 18624 + 37056 + 37056, two attention blocks of
  // 2227, heads 4160, decoder 2112 + 36928 + 36928 + 18464 + 289
  const auto st = init_model<float>(Architecture{}, 1);
  const auto pc = param_count(st);
  EXPECT_EQ(pc.total, 196455u);
  EXPECT_EQ(pc.groups.at("enc.att2.mlp1") + pc.groups.at("enc.att2.mlp2") + pc.groups.at("enc.att2.spatial"), 2227u);
}

TEST(Architecture, ValidationErrors) {
  Architecture a;
  a.backbone = "vgg";
  EXPECT_THROW(a.validate(), ConfigError);
  a = Architecture{};
  a.height = 8;  // four halvings of 8 leave 0
  EXPECT_THROW(a.validate(), ConfigError);
  a = Architecture{};
  a.reduction = 5;
  EXPECT_THROW(a.validate(), ConfigError);
  a = Architecture{};
  a.spatial_kernel = 4;
  EXPECT_THROW(a.validate(), ConfigError);
  a = Architecture{};
  a.attention_after = {5};
  EXPECT_THROW(a.validate(), ConfigError);
  EXPECT_NO_THROW(Architecture::resnet12().validate());
}

TEST(Architecture, JsonRoundTrip) {
  auto a = micro_arch();
  EXPECT_EQ(Architecture::from_json(a.to_json()), a);
}

TEST(Encode, DeterministicAndBatchEquivariant) {
  const auto arch = micro_arch();
  const auto st = init_model<double>(arch, 3);
  std::mt19937_64 rng(9);
  const auto x = random_tensor(rng, {3, 1, 8, 8}, 0.0, 1.0);
  const auto a = encode(x, st), b = encode(x, st);
  EXPECT_EQ(a.final_feature_map, b.final_feature_map);
  ASSERT_EQ(a.q.size(), 3u);
  EXPECT_EQ(a.q[0].dim(), static_cast<std::size_t>(arch.latent_dim));
  const std::vector<int> perm = {2, 0, 1};
  std::vector<Tensor<double>> rows;
  for (int p : perm) rows.push_back(batch_slice(x, p, 1));
  const auto c = encode(concat_batch(rows), st);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < arch.latent_dim; ++j) {
      EXPECT_NEAR(c.q[i].mean()[j], a.q[perm[i]].mean()[j], 1e-12);
      EXPECT_NEAR(c.q[i].var()[j], a.q[perm[i]].var()[j], 1e-12);
    }
  }
}

TEST(Encode, ZeroNetworkGivesHeadBiases) {
  const auto arch = micro_arch();
  auto st = init_model<double>(arch, 4);
  for (auto& [name, t] : st.params)
    for (auto& v : t.storage()) v = 0.0;
  for (int j = 0; j < arch.latent_dim; ++j) {
    st.params.at("head.mu.b")[j] = 0.1 * (j + 1);
    st.params.at("head.logvar.b")[j] = -0.5 * j;
  }
  const auto e = encode(Tensor<double>({1, 1, 8, 8}), st);
  for (int j = 0; j < arch.latent_dim; ++j) {
    EXPECT_NEAR(e.q[0].mean()[j], 0.1 * (j + 1), 1e-15);
    EXPECT_NEAR(e.q[0].var()[j], std::exp(-0.5 * j), 1e-7);
  }
}

TEST(Encode, RejectsWrongInputShape) {
  const auto st = init_model<double>(micro_arch(), 4);
  EXPECT_THROW(encode(Tensor<double>({1, 2, 8, 8}), st), ContractViolation);
  EXPECT_THROW(encode(Tensor<double>({1, 1, 6, 8}), st), ContractViolation);
}

TEST(Decode, OutputMatchesInputDims) {
  for (int d : {8, 32, 64}) {
    auto arch = micro_arch(true, d, 8);
    arch.in_channels = 3;
    const auto st = init_model<double>(arch, 5);
    std::mt19937_64 rng(d);
    const auto z = random_tensor(rng, {2, d});
    const auto img = decode(z, st);
    EXPECT_EQ(img.dims(), (std::vector<int>{2, 3, 8, 8}));
    EXPECT_EQ(decode(z, st), img);
    for (double v : img.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Decode, ZeroNetworkGivesSigmoidOfBias) {
  const auto arch = micro_arch();
  auto st = init_model<double>(arch, 6);
  for (auto& [name, t] : st.params)
    for (auto& v : t.storage()) v = 0.0;
  st.params.at("dec.stage2.conv.b")[0] = 0.3;
  const auto img = decode(std::vector<double>(static_cast<std::size_t>(arch.latent_dim), 0.0), st);
  for (double v : img.data()) EXPECT_NEAR(v, sigmoid(0.3), 1e-15);
  EXPECT_THROW(decode(std::vector<double>{1.0}, st), ContractViolation);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto st = init_model<float>(micro_arch(), 7);
  st.meta["trained_robust"] = true;
  std::stringstream a;
  save_checkpoint(a, st);
  const auto back = load_checkpoint<float>(a);
  std::stringstream b;
  save_checkpoint(b, back);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(back.arch, st.arch);
  EXPECT_EQ(back.params, st.params);
  EXPECT_TRUE(back.meta.value("trained_robust", false));
}

TEST(Checkpoint, DoubleStateRoundsToStorage) {
  const auto st = init_model<double>(micro_arch(), 8);
  std::stringstream s;
  save_checkpoint(s, st);
  EXPECT_EQ(load_checkpoint<double>(s).params, round_to_storage(st).params);
}

TEST(Checkpoint, RejectsCorruptInput) {
  const auto st = init_model<float>(micro_arch(), 9);
  std::stringstream s;
  save_checkpoint(s, st);
  const std::string bytes = s.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() / 2));
  EXPECT_ANY_THROW(load_checkpoint<float>(truncated));
  std::stringstream bad_magic("XXXX" + bytes.substr(4));
  EXPECT_THROW(load_checkpoint<float>(bad_magic), ConfigError);
}

TEST(InitModel, SeedDeterminesParameters) {
  EXPECT_EQ(init_model<float>(micro_arch(), 1).params, init_model<float>(micro_arch(), 1).params);
  EXPECT_NE(init_model<float>(micro_arch(), 1).params, init_model<float>(micro_arch(), 2).params);
}

}  // namespace
}  // namespace anrot
