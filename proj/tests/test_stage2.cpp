#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fpnet/stage2.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace fpnet;
using testing::random_tensor;

namespace {

template <typename T>
struct Scope {
  ParamStore<T> params;
  TensorDict<T> buffers;
  std::mt19937_64 rng;
  explicit Scope(std::uint64_t seed = 1) : rng(seed) {}
  nn::Builder<T> builder(const std::string& prefix) { return nn::Builder<T>(params, buffers, rng, prefix); }
};

template <typename T>
void randomize(Tensor<T>& t, std::mt19937_64& rng, double scale = 0.3) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& v : t.mutable_data()) v = static_cast<T>(u(rng));
}

// out[n,c,i,j] = next[n,c,i/2,j/2] * sigmoid(g[n,0,i/2,j/2])
oracle::Array prior_ref(const Tensor32& next, const Tensor32& g) {
  const Shape s = next.shape();
  oracle::Array y(s.n(), s.c(), 2 * s.h(), 2 * s.w());
  for (std::size_t n = 0; n < s.n(); ++n)
    for (std::size_t c = 0; c < s.c(); ++c)
      for (std::size_t i = 0; i < 2 * s.h(); ++i)
        for (std::size_t j = 0; j < 2 * s.w(); ++j) {
          const double gate = 1.0 / (1.0 + std::exp(-static_cast<double>(g.at(n, 0, i / 2, j / 2))));
          y.at(n, c, i, j) = next.at(n, c, i / 2, j / 2) * gate;
        }
  return y;
}

// A[n,0,i,j] = (1/C) sum_c a[n,c,i,j] b[n,c,i,j]
oracle::Array affinity_ref(const Tensor32& a, const Tensor32& b) {
  const Shape s = a.shape();
  oracle::Array y(s.n(), 1, s.h(), s.w());
  for (std::size_t n = 0; n < s.n(); ++n)
    for (std::size_t i = 0; i < s.h(); ++i)
      for (std::size_t j = 0; j < s.w(); ++j) {
        double acc = 0;
        for (std::size_t c = 0; c < s.c(); ++c) acc += static_cast<double>(a.at(n, c, i, j)) * b.at(n, c, i, j);
        y.at(n, 0, i, j) = acc / static_cast<double>(s.c());
      }
  return y;
}

oracle::Array bconv_ref(const nn::ConvBN<float>& b, const oracle::Array& x) {
  const std::size_t k = b.conv().weight().shape().h();
  return oracle::relu(oracle::bn(oracle::conv(x, oracle::from(b.conv().weight()), {}, 1, k / 2),
                                 oracle::vec(b.bn().gamma()), oracle::vec(b.bn().beta()),
                                 oracle::vec(b.bn().running_mean()), oracle::vec(b.bn().running_var())));
}

}  // namespace

TEST_CASE("channel reduction adapter shapes") {
  Scope<float> s;
  auto reduce = nn::bconv(s.builder("r"), 256, 64, 1);
  auto same = nn::bconv(s.builder("s"), 64, 64, 1);
  std::mt19937_64 rng(1);
  CHECK(reduce.forward(random_tensor<float>({1, 256, 8, 8}, rng), {false}).shape() == Shape{1, 64, 8, 8});
  CHECK(same.forward(random_tensor<float>({1, 64, 8, 8}, rng), {false}).shape() == Shape{1, 64, 8, 8});
}

TEST_CASE("prior_correct oracle and gate limits") {
  std::mt19937_64 rng(2);
  const Tensor32 next = random_tensor<float>({2, 64, 4, 4}, rng), g = random_tensor<float>({2, 1, 4, 4}, rng, -4, 4);
  const Tensor32 out = prior_correct(next, PriorMask<float>(g));
  CHECK(out.shape() == Shape{2, 64, 8, 8});
  CHECK(oracle::max_abs_diff(oracle::from(out), prior_ref(next, g)) <= 1e-6);

  const Tensor32 open = prior_correct(next, PriorMask<float>(Tensor32::full({2, 1, 4, 4}, 40.f)));
  CHECK(testing::max_abs_diff(open, ops::upsample_nearest(next, 2)) <= 1e-6);
  const Tensor32 shut = prior_correct(next, PriorMask<float>(Tensor32::full({2, 1, 4, 4}, -40.f)));
  for (float v : shut.data()) CHECK(std::abs(v) <= 1e-6f);

  CHECK_THROWS_AS(PriorMask<float>(random_tensor<float>({2, 2, 4, 4}, rng)), UsageError);
  CHECK_THROWS_AS(prior_correct(next, PriorMask<float>(random_tensor<float>({2, 1, 8, 8}, rng))), DimensionError);
}

TEST_CASE("channel_correlate affinity oracle and limits") {
  Scope<float> s;
  CFM<float> cfm(s.builder("cfm"), 8, 4);
  std::mt19937_64 rng(3);
  const Tensor32 a = random_tensor<float>({2, 8, 6, 6}, rng), b = random_tensor<float>({2, 8, 6, 6}, rng);
  const auto maps = cfm.channel_correlate(a, b, {false});
  CHECK(maps.affinity.shape() == Shape{2, 1, 6, 6});
  CHECK(maps.alpha.shape() == Shape{2, 8, 6, 6});
  CHECK(maps.beta.shape() == Shape{2, 8, 6, 6});
  CHECK(oracle::max_abs_diff(oracle::from(maps.affinity), affinity_ref(a, b)) <= 1e-6);

  // self inner product of a constant-channel pixel
  const Tensor32 v = Tensor32::full({1, 8, 3, 3}, 0.7f);
  const auto self = cfm.channel_correlate(v, v, {false});
  for (float x : self.affinity.data()) CHECK(x == doctest::Approx(0.49).epsilon(1e-6));

  // orthogonal channel supports: alpha, beta reduce to the conv biases of a zero bottleneck input
  std::vector<float> lo(8 * 9, 0.f), hi(8 * 9, 0.f);
  std::fill(lo.begin(), lo.begin() + 4 * 9, 1.f);
  std::fill(hi.begin() + 4 * 9, hi.end(), 1.f);
  for (auto& x : s.params.at("cfm.alpha.bias").mutable_data()) x = 0.25f;
  for (auto& x : s.params.at("cfm.beta.bias").mutable_data()) x = -0.5f;
  const auto orth = cfm.channel_correlate(Tensor32::from({1, 8, 3, 3}, lo), Tensor32::from({1, 8, 3, 3}, hi), {false});
  for (float x : orth.affinity.data()) CHECK(x == 0.f);
  const Tensor32 zero_in = cfm.bottleneck().forward(Tensor32::zeros({1, 1, 3, 3}), {false});
  for (float x : zero_in.data()) CHECK(x == 0.f);
  for (float x : orth.alpha.data()) CHECK(x == 0.25f);
  for (float x : orth.beta.data()) CHECK(x == -0.5f);

  CHECK_THROWS_AS(cfm.channel_correlate(a, random_tensor<float>({2, 8, 3, 3}, rng), {false}), DimensionError);
  CHECK_THROWS_AS(cfm.channel_correlate(random_tensor<float>({2, 4, 6, 6}, rng), b, {false}), DimensionError);
}

TEST_CASE("modulate_fuse oracle and residual limits") {
  Scope<float> s;
  CFM<float> cfm(s.builder("cfm"), 6, 4);
  std::mt19937_64 rng(4);
  const Tensor32 cur = random_tensor<float>({1, 6, 5, 5}, rng), corr = random_tensor<float>({1, 6, 5, 5}, rng);
  ModulationMaps<float> maps{Tensor32(), random_tensor<float>({1, 6, 5, 5}, rng), random_tensor<float>({1, 6, 5, 5}, rng)};
  const Tensor32 out = cfm.modulate_fuse(cur, corr, maps, {false});
  const oracle::Array ref = oracle::add(
      oracle::from(corr), oracle::add(oracle::mul(bconv_ref(cfm.moduland(), oracle::from(cur)), oracle::from(maps.alpha)),
                                      oracle::from(maps.beta)));
  CHECK(oracle::max_abs_diff(oracle::from(out), ref) <= 1e-6);

  const ModulationMaps<float> zero{Tensor32(), Tensor32::zeros({1, 6, 5, 5}), Tensor32::zeros({1, 6, 5, 5})};
  CHECK(testing::bit_equal(cfm.modulate_fuse(cur, corr, zero, {false}), corr));
  const ModulationMaps<float> beta0{Tensor32(), maps.alpha, Tensor32::zeros({1, 6, 5, 5})};
  CHECK(testing::bit_equal(cfm.modulate_fuse(Tensor32::zeros({1, 6, 5, 5}), corr, beta0, {false}), corr));

  CHECK_THROWS_AS(cfm.modulate_fuse(cur, random_tensor<float>({1, 6, 4, 4}, rng), maps, {false}), DimensionError);
}

TEST_CASE("cfm equals sequential composition and keeps the fusion width") {
  Scope<float> s;
  CFM<float> cfm(s.builder("cfm"), 8, 4);
  randomize(s.params.at("cfm.alpha.weight"), s.rng);
  randomize(s.params.at("cfm.beta.weight"), s.rng);
  randomize(s.params.at("cfm.alpha.bias"), s.rng);
  std::mt19937_64 rng(5);
  const Tensor32 cur = random_tensor<float>({2, 8, 8, 8}, rng), next = random_tensor<float>({2, 8, 4, 4}, rng);
  const PriorMask<float> prior(random_tensor<float>({2, 1, 4, 4}, rng, -3, 3));
  const Tensor32 out = cfm.forward(cur, next, prior, {false});
  CHECK(out.shape() == Shape{2, 8, 8, 8});
  const Tensor32 corr = prior_correct(next, prior);
  const Tensor32 seq = cfm.modulate_fuse(cur, corr, cfm.channel_correlate(cur, corr, {false}), {false});
  CHECK(testing::bit_equal(out, seq));
  CHECK_THROWS_AS(cfm.forward(cur, random_tensor<float>({2, 6, 4, 4}, rng), prior, {false}), DimensionError);
}

TEST_CASE("fresh cfm returns the prior-corrected feature bit for bit") {
  std::mt19937_64 rng(6);
  for (int draw = 0; draw < 10; ++draw) {
    Scope<float> s(30 + draw);
    CFM<float> cfm(s.builder("cfm"), 16, 4);
    const Tensor32 cur = random_tensor<float>({2, 16, 8, 8}, rng, -2, 2), next = random_tensor<float>({2, 16, 4, 4}, rng, -2, 2);
    const PriorMask<float> prior(random_tensor<float>({2, 1, 4, 4}, rng, -5, 5));
    for (bool training : {false, true}) {
      CHECK(testing::bit_equal(cfm.forward(cur, next, prior, {training}), prior_correct(next, prior)));
    }
  }
}

TEST_CASE("cfm and adapter gradient checks in double precision") {
  Scope<double> s;
  CFM<double> cfm(s.builder("cfm"), 4, 3);
  auto reduce = nn::bconv(s.builder("reduce"), 6, 4, 1);
  // move off the zero initialization so every path carries gradient
  for (const char* n : {"cfm.alpha.weight", "cfm.beta.weight", "cfm.alpha.bias", "cfm.beta.bias"})
    randomize(s.params.at(n), s.rng);
  std::mt19937_64 rng(7);
  const Tensor<double> x = random_tensor<double>({2, 6, 6, 6}, rng), next = random_tensor<double>({2, 4, 3, 3}, rng);
  const Tensor<double> g = random_tensor<double>({2, 1, 3, 3}, rng);
  const Tensor<double> r = random_tensor<double>({2, 4, 6, 6}, rng);
  std::function<Tensor<double>()> loss = [&]() {
    const nn::Context ctx{true};
    return ops::sum(ops::mul(cfm.forward(reduce.forward(x, ctx), next, PriorMask<double>(g), ctx), r));
  };
  const auto rep = testing::check_param_gradient<double>(s.params, loss, 250, rng, 1e-6, 1e-3);
  INFO(rep.worst_where);
  CHECK(rep.checked == 250);
  CHECK(rep.pass_fraction() >= 0.99);
}
