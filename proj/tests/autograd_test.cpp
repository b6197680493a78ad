#include <gtest/gtest.h>

#include <random>

#include "anrot/autograd.hpp"
#include "anrot/network.hpp"
#include "test_support.hpp"

namespace anrot {
namespace {

using Params = std::map<std::string, Tensor<double>>;
using Vars = std::map<std::string, ad::Var>;
using test::check_tape;
using test::project;
using test::random_tensor;

constexpr double kTol = 1e-4;

#define EXPECT_GRAD_OK(report)                                  \
  do {                                                          \
    const auto r_ = (report);                                   \
    EXPECT_GT(r_.checked, 0u);                                  \
    EXPECT_LE(r_.max_rel, kTol) << r_.worst;                    \
  } while (0)

std::mt19937_64& rng() {
  static std::mt19937_64 r(1234);
  return r;
}

TEST(Tape, BackwardContracts) {
  ad::Tape<double> t;
  auto x = t.variable(Tensor<double>({3}, 1.0));
  EXPECT_THROW(t.backward(x), ContractViolation);  // not a scalar
  auto s = ad::sum(t, x);
  t.backward(s);
  EXPECT_EQ(t.grad(x), Tensor<double>({3}, 1.0));
  EXPECT_THROW(t.backward(s), ContractViolation);
  ad::Tape<double> other;
  EXPECT_THROW(other.backward(ad::Var{}), ContractViolation);
}

TEST(Tape, ConstantsTakeNoGradient) {
  ad::Tape<double> t;
  auto c = t.constant(Tensor<double>({2}, 3.0));
  auto v = t.variable(Tensor<double>({2}, 2.0));
  auto y = ad::sum(t, ad::mul(t, c, v));
  EXPECT_FALSE(t.needs_grad(c));
  t.backward(y);
  EXPECT_EQ(t.grad(c), Tensor<double>({2}, 0.0));
  EXPECT_EQ(t.grad(v), Tensor<double>({2}, 3.0));
}

TEST(Tape, WeightedSumReachesLaterTerms) {
  ad::Tape<double> t;
  auto a = t.constant(Tensor<double>({1}, 1.0));
  auto b = t.variable(Tensor<double>({1}, 2.0));
  auto y = ad::weighted_sum(t, {a, b}, {0.5, 3.0});
  EXPECT_EQ(t.value(y)[0], 6.5);
  t.backward(y);
  EXPECT_EQ(t.grad(b)[0], 3.0);
}

TEST(Ops, Elementwise) {
  Params p{{"a", random_tensor(rng(), {2, 3, 4})}, {"b", random_tensor(rng(), {2, 3, 4})}};
  EXPECT_GRAD_OK(check_tape(p, [](ad::Tape<double>& t, const Vars& v) {
    auto a = v.at("a"), b = v.at("b");
    auto y = ad::add(t, ad::mul(t, ad::sigmoid(t, a), ad::square(t, b)),
                     ad::scale(t, ad::exp_plus(t, b, 0.3), 0.7));
    y = ad::sub(t, y, ad::leaky_relu(t, ad::relu(t, a), 0.1));
    return project(t, ad::reshape(t, y, {24}));
  }));
}

TEST(Ops, Conv2dWithBiasAndPadding) {
  for (int pad : {0, 1}) {
    Params p{{"x", random_tensor(rng(), {2, 3, 5, 6})},
             {"w", random_tensor(rng(), {4, 3, 3, 3})},
             {"b", random_tensor(rng(), {4})}};
    EXPECT_GRAD_OK(check_tape(p, [pad](ad::Tape<double>& t, const Vars& v) {
      return project(t, ad::conv2d(t, v.at("x"), v.at("w"), v.at("b"), pad));
    }));
  }
}

TEST(Ops, Conv2dMatchesDirectLoop) {
  auto x = random_tensor(rng(), {2, 2, 5, 4});
  auto w = random_tensor(rng(), {3, 2, 3, 3});
  ad::Tape<double> t;
  auto y = t.value(ad::conv2d(t, t.constant(x), t.constant(w), ad::Var{}, 1));
  for (int b = 0; b < 2; ++b)
    for (int o = 0; o < 3; ++o)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j) {
          double acc = 0;
          for (int c = 0; c < 2; ++c)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = i + ky - 1, ix = j + kx - 1;
                if (iy >= 0 && iy < 5 && ix >= 0 && ix < 4) acc += x.at(b, c, iy, ix) * w.at(o, c, ky, kx);
              }
          EXPECT_NEAR(y.at(b, o, i, j), acc, 1e-12);
        }
}

TEST(Ops, Conv2dRejectsChannelMismatch) {
  ad::Tape<double> t;
  auto x = t.constant(Tensor<double>({1, 2, 4, 4}));
  auto w = t.constant(Tensor<double>({1, 3, 3, 3}));
  EXPECT_THROW(ad::conv2d(t, x, w, ad::Var{}, 1), ContractViolation);
}

TEST(Ops, PoolingAndChannelReductions) {
  Params p{{"x", random_tensor(rng(), {2, 3, 6, 5})}};
  EXPECT_GRAD_OK(check_tape(p, [](ad::Tape<double>& t, const Vars& v) {
    auto x = v.at("x");
    auto a = project(t, ad::maxpool2(t, x), 1);
    auto b = project(t, ad::global_avg_pool(t, x), 2);
    auto c = project(t, ad::global_max_pool(t, x), 3);
    auto d = project(t, ad::concat_channels(t, ad::channel_mean(t, x), ad::channel_max(t, x)), 4);
    return ad::weighted_sum(t, {a, b, c, d}, {1.0, 1.0, 1.0, 1.0});
  }));
}

TEST(Ops, MaxPoolFloorsOddSizes) {
  ad::Tape<double> t;
  auto y = ad::maxpool2(t, t.constant(Tensor<double>({1, 1, 5, 3})));
  EXPECT_EQ(t.value(y).dims(), (std::vector<int>{1, 1, 2, 1}));
}

TEST(Ops, ScaleShiftLinearGates) {
  Params p{{"x", random_tensor(rng(), {2, 3, 4, 4})}, {"s", random_tensor(rng(), {3})},
           {"h", random_tensor(rng(), {3})},          {"g", random_tensor(rng(), {2, 3})},
           {"m", random_tensor(rng(), {2, 1, 4, 4})}, {"w", random_tensor(rng(), {5, 3})},
           {"b", random_tensor(rng(), {5})}};
  EXPECT_GRAD_OK(check_tape(p, [](ad::Tape<double>& t, const Vars& v) {
    auto y = ad::scale_shift(t, v.at("x"), v.at("s"), v.at("h"));
    y = ad::gate_channels(t, y, v.at("g"));
    y = ad::gate_spatial(t, y, v.at("m"));
    auto z = ad::linear(t, ad::global_avg_pool(t, y), v.at("w"), v.at("b"));
    return ad::weighted_sum(t, {project(t, y, 5), project(t, z, 6)}, {1.0, 1.0});
  }));
}

TEST(Ops, ResizeAndMixRows) {
  Params p{{"x", random_tensor(rng(), {2, 2, 3, 3})}, {"r", random_tensor(rng(), {3, 4})}};
  std::vector<double> A{0.5, 0.5, 0.0, 0.2, 0.3, 0.5};
  EXPECT_GRAD_OK(check_tape(p, [A](ad::Tape<double>& t, const Vars& v) {
    auto a = project(t, ad::resize_nearest(t, v.at("x"), 6, 7), 7);
    auto b = project(t, ad::mix_rows(t, v.at("r"), A, 2), 8);
    return ad::weighted_sum(t, {a, b}, {1.0, 1.0});
  }));
}

TEST(Ops, ReparameterizeOp) {
  Params p{{"mu", random_tensor(rng(), {3, 4})}, {"var", random_tensor(rng(), {3, 4}, 0.2, 2.0)}};
  auto noise = random_tensor(rng(), {3, 4}, -2, 2);
  EXPECT_GRAD_OK(check_tape(p, [noise](ad::Tape<double>& t, const Vars& v) {
    return project(t, ad::reparameterize(t, v.at("mu"), v.at("var"), noise));
  }));
}

TEST(Ops, PairDistances) {
  for (auto metric : {ad::PairMetric::HellingerSq, ad::PairMetric::KL}) {
    Params p{{"ma", random_tensor(rng(), {3, 4})},
             {"va", random_tensor(rng(), {3, 4}, 0.3, 2.0)},
             {"mb", random_tensor(rng(), {2, 4})},
             {"vb", random_tensor(rng(), {2, 4}, 0.3, 2.0)}};
    std::vector<std::pair<int, int>> pairs{{0, 0}, {0, 1}, {1, 1}, {2, 0}, {2, 1}};
    EXPECT_GRAD_OK(check_tape(p, [&](ad::Tape<double>& t, const Vars& v) {
      return project(t, ad::pair_distances(t, v.at("ma"), v.at("va"), v.at("mb"), v.at("vb"),
                                           pairs, metric));
    }));
  }
}

TEST(Ops, PairDistancesMatchClosedForm) {
  ad::Tape<double> t;
  auto m = t.constant(Tensor<double>({2, 1}, std::vector<double>{0, 1}));
  auto v = t.constant(Tensor<double>({2, 1}, std::vector<double>{1, 1}));
  auto y = ad::pair_distances(t, m, v, m, v, {{0, 1}, {1, 1}}, ad::PairMetric::HellingerSq);
  EXPECT_NEAR(t.value(y)[0], hellinger_sq(DiagGaussian({0}, {1}), DiagGaussian({1}, {1})), 1e-15);
  EXPECT_EQ(t.value(y)[1], 0.0);
  auto k = ad::pair_distances(t, m, v, m, v, {{1, 0}}, ad::PairMetric::KL);
  EXPECT_NEAR(t.value(k)[0], 0.5, 1e-15);
}

TEST(Ops, SoftmaxXentWithMask) {
  Params p{{"l", random_tensor(rng(), {4, 3}, -2, 2)}};
  EXPECT_GRAD_OK(check_tape(p, [](ad::Tape<double>& t, const Vars& v) {
    return ad::softmax_xent(t, v.at("l"), {0, 2, 1, 1}, {true, false, true, true});
  }));
  ad::Tape<double> t;
  auto l = t.constant(Tensor<double>({1, 2}, std::vector<double>{0.0, 0.0}));
  EXPECT_NEAR(t.value(ad::softmax_xent(t, l, {1}))[0], std::log(2.0), 1e-15);
}

TEST(Ops, L1AndPriorPenalty) {
  auto target = random_tensor(rng(), {2, 5});
  for (auto k : {PenaltyType::HellingerELBO, PenaltyType::KL_ELBO, PenaltyType::WassersteinELBO}) {
    Params p{{"a", random_tensor(rng(), {2, 5})},
             {"m", random_tensor(rng(), {2, 5})},
             {"v", random_tensor(rng(), {2, 5}, 0.3, 2.0)}};
    EXPECT_GRAD_OK(check_tape(p, [&](ad::Tape<double>& t, const Vars& v) {
      auto a = ad::l1_mean(t, v.at("a"), target);
      auto b = ad::prior_penalty(t, v.at("m"), v.at("v"), PenaltyKind(k, 0.6));
      return ad::weighted_sum(t, {a, b}, {1.0, 0.5});
    }));
  }
}

TEST(Ops, PriorPenaltyAveragesRows) {
  ad::Tape<double> t;
  auto m = t.constant(Tensor<double>({2, 1}, std::vector<double>{1, 0}));
  auto v = t.constant(Tensor<double>({2, 1}, std::vector<double>{1, 4}));
  auto y = ad::prior_penalty(t, m, v, PenaltyKind(PenaltyType::KL_ELBO));
  EXPECT_NEAR(t.value(y)[0], 0.5 * (0.5 + kl_elbo_penalty(DiagGaussian({0}, {4}))), 1e-15);
}

// -- network-level gradients -----------------------------------------------

Params as_params(const ModelState<double>& st) { return st.params; }

TEST(NetworkGrad, ChannelAndSpatialAttention) {
  Params p{{"psi", random_tensor(rng(), {2, 4, 5, 5})},
           {"w1", random_tensor(rng(), {2, 4})},
           {"b1", random_tensor(rng(), {2})},
           {"w2", random_tensor(rng(), {4, 2})},
           {"b2", random_tensor(rng(), {4})},
           {"sw", random_tensor(rng(), {1, 2, 3, 3})},
           {"sb", random_tensor(rng(), {1})}};
  EXPECT_GRAD_OK(check_tape(p, [](ad::Tape<double>& t, const Vars& v) {
    auto y = channel_attention_on(t, v.at("psi"), v.at("w1"), v.at("b1"), v.at("w2"), v.at("b2"));
    y = spatial_attention_on(t, y, v.at("sw"), v.at("sb"));
    return project(t, y);
  }));
}

TEST(NetworkGrad, EncoderHeadsAndInput) {
  auto arch = test::micro_arch();
  auto st = init_model<double>(arch, 5);
  for (auto& [k, v] : st.params)  // move biases and gates off zero
    if (k.ends_with(".b") || k.ends_with("shift"))
      for (auto& e : v.storage()) e = 0.1 * std::sin(static_cast<double>(&e - v.storage().data()) + 1.0);
  Params p = as_params(st);
  p.emplace("x", random_tensor(rng(), {2, 1, 8, 8}, 0, 1));
  EXPECT_GRAD_OK(check_tape(p, [&](ad::Tape<double>& t, const Vars& v) {
    auto e = encode_on(t, v, arch, v.at("x"));
    return ad::weighted_sum(t, {project(t, e.mean, 1), project(t, e.var, 2)}, {1.0, 1.0});
  }));
}

TEST(NetworkGrad, Decoder) {
  auto arch = test::micro_arch();
  auto st = init_model<double>(arch, 6);
  Params p = as_params(st);
  p.emplace("z", random_tensor(rng(), {2, arch.latent_dim}));
  auto target = random_tensor(rng(), {2, 1, 8, 8}, 0, 1);
  EXPECT_GRAD_OK(check_tape(p, [&](ad::Tape<double>& t, const Vars& v) {
    return project(t, decode_on(t, v, arch, v.at("z")));
  }));
}

TEST(NetworkGrad, Resnet12Block) {
  Architecture arch = test::micro_arch(true, 3, 8);
  arch.backbone = "resnet12-attn";
  auto st = init_model<double>(arch, 7);
  Params p = as_params(st);
  p.emplace("x", random_tensor(rng(), {1, 1, 8, 8}, 0, 1));
  EXPECT_GRAD_OK(check_tape(p, [&](ad::Tape<double>& t, const Vars& v) {
    auto e = encode_on(t, v, arch, v.at("x"));
    return project(t, e.mean);
  }));
}

}  // namespace
}  // namespace anrot
