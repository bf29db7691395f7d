#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fpnet/nn.hpp"
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
  nn::Builder<T> builder(const std::string& prefix = "m") { return nn::Builder<T>(params, buffers, rng, prefix); }
};

Tensor32 scaled(const Tensor32& t, float a) {
  std::vector<float> v(t.data().begin(), t.data().end());
  for (auto& x : v) x *= a;
  return Tensor32::from(t.shape(), std::move(v));
}

}  // namespace

TEST_CASE("bconv shapes, range and zero fixed point") {
  Scope<float> s;
  auto block = nn::bconv(s.builder(), 64, 32, 3);
  std::mt19937_64 rng(3);
  const Tensor32 x = random_tensor<float>({1, 64, 16, 16}, rng);
  const Tensor32 y = block.forward(x, {false});
  CHECK(y.shape() == Shape{1, 32, 16, 16});
  for (float v : y.data()) CHECK(v >= 0.f);

  const Tensor32 z = block.forward(Tensor32::zeros({1, 64, 16, 16}), {false});
  for (float v : z.data()) CHECK(v == 0.f);

  auto one = nn::bconv(s.builder("one"), 8, 4, 1);
  CHECK(one.forward(random_tensor<float>({2, 8, 5, 7}, rng), {true}).shape() == Shape{2, 4, 5, 7});
  CHECK_THROWS_AS(block.forward(random_tensor<float>({1, 63, 16, 16}, rng), {false}), DimensionError);
}

TEST_CASE("bconv matches conv -> batch norm -> relu oracle in inference mode") {
  Scope<float> s;
  auto block = nn::bconv(s.builder(), 3, 5, 3);
  std::mt19937_64 rng(4);
  // non-trivial running statistics and affine parameters
  for (auto& [name, t] : s.buffers) {
    for (auto& v : t.mutable_data()) v = name.find("var") != std::string::npos ? 0.5f + 0.1f : 0.2f;
  }
  for (auto& v : s.params.at("m.bn.gamma").mutable_data()) v = 1.5f;
  for (auto& v : s.params.at("m.bn.beta").mutable_data()) v = -0.1f;
  const Tensor32 x = random_tensor<float>({2, 3, 6, 6}, rng);
  const auto ref = oracle::relu(oracle::bn(oracle::conv(oracle::from(x), oracle::from(block.conv().weight()), {}, 1, 1),
                                           oracle::vec(block.bn().gamma()), oracle::vec(block.bn().beta()),
                                           oracle::vec(block.bn().running_mean()),
                                           oracle::vec(block.bn().running_var())));
  CHECK(oracle::max_abs_diff(oracle::from(block.forward(x, {false})), ref) < 1e-5);
}

TEST_CASE("channel split and frequency pair invariants") {
  CHECK(nn::split_channels(16, 0.5).high == 8);
  CHECK(nn::split_channels(16, 0.5).low == 8);
  CHECK(nn::split_channels(5, 0.5).high == 3);
  CHECK(nn::split_channels(5, 0.5).low == 2);
  CHECK(nn::split_channels(10, 0.25).high == 8);
  CHECK(nn::split_channels(10, 0.25).low == 2);
  CHECK_THROWS_AS(nn::split_channels(16, 0.0), UsageError);
  CHECK_THROWS_AS(nn::split_channels(16, 1.0), UsageError);

  std::mt19937_64 rng(5);
  const Tensor32 x = random_tensor<float>({2, 6, 8, 10}, rng);
  const auto pair = nn::to_freq_pair(x, 0.5);
  CHECK(pair.high.shape() == Shape{2, 3, 8, 10});
  CHECK(pair.low.shape() == Shape{2, 3, 4, 5});
  const auto ref = oracle::pool2(oracle::slice(oracle::from(x), 3, 3));
  CHECK(oracle::max_abs_diff(oracle::from(pair.low), ref) < 1e-6);
  CHECK_NOTHROW(nn::check_freq_pair(pair, "pair"));

  // odd extents pool with a partial edge
  const auto odd = nn::to_freq_pair(random_tensor<float>({1, 4, 7, 5}, rng), 0.5);
  CHECK(odd.low.shape() == Shape{1, 2, 4, 3});

  CHECK_THROWS_AS(nn::to_freq_pair(random_tensor<float>({1, 1, 8, 8}, rng), 0.5), UsageError);
  nn::FreqPair<float> bad{random_tensor<float>({1, 2, 8, 8}, rng), random_tensor<float>({1, 2, 8, 8}, rng)};
  CHECK_THROWS_AS(nn::check_freq_pair(bad, "bad"), DimensionError);
}

TEST_CASE("octave conv shapes and input validation") {
  Scope<float> s;
  nn::OctaveConv<float> oc(s.builder(), 32, 32, 0.5);
  std::mt19937_64 rng(6);
  nn::FreqPair<float> x{random_tensor<float>({1, 16, 16, 16}, rng), random_tensor<float>({1, 16, 8, 8}, rng)};
  const auto y = oc.forward(x);
  CHECK(y.high.shape() == Shape{1, 16, 16, 16});
  CHECK(y.low.shape() == Shape{1, 16, 8, 8});

  nn::FreqPair<float> wrong_res{x.high, random_tensor<float>({1, 16, 16, 16}, rng)};
  CHECK_THROWS_AS(oc.forward(wrong_res), DimensionError);
  nn::FreqPair<float> wrong_ch{random_tensor<float>({1, 15, 16, 16}, rng), x.low};
  CHECK_THROWS_AS(oc.forward(wrong_ch), DimensionError);
  CHECK_THROWS_AS(oc.forward({x.high, Tensor32()}), DimensionError);
}

TEST_CASE("octave conv equals composition oracle on 50 random draws") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> ch(2, 8), ext(3, 9), kern(0, 1), batch(1, 2);
  double worst = 0;
  for (int draw = 0; draw < 50; ++draw) {
    Scope<float> s(100 + draw);
    const std::size_t cin = ch(rng), cout = ch(rng), k = kern(rng) ? 3 : 1, h = ext(rng), w = ext(rng);
    nn::OctaveConv<float> oc(s.builder(), cin, cout, 0.5, nn::FreqBranches::both, k);
    // non-zero biases so the bias placement is exercised
    for (const char* b : {"m.b_h", "m.b_l"})
      for (auto& v : s.params.at(b).mutable_data()) v = std::uniform_real_distribution<float>(-1, 1)(rng);
    const std::size_t n = batch(rng);
    const auto split = oc.in_split();
    nn::FreqPair<float> x{random_tensor<float>({n, split.high, h, w}, rng),
                          random_tensor<float>({n, split.low, (h + 1) / 2, (w + 1) / 2}, rng)};
    const auto y = oc.forward(x);
    CHECK_NOTHROW(nn::check_freq_pair(y, "octave output"));
    const auto [rh, rl] = oracle::octave(oracle::from(x.high), oracle::from(x.low), oc);
    worst = std::max({worst, oracle::max_abs_diff(oracle::from(y.high), rh),
                      oracle::max_abs_diff(oracle::from(y.low), rl)});
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("octave conv reduces to vanilla conv when cross terms vanish") {
  Scope<float> s;
  nn::OctaveConv<float> oc(s.builder(), 12, 10, 0.5);
  for (auto& v : s.params.at("m.w_hl").mutable_data()) v = 0.f;
  std::mt19937_64 rng(8);
  const Tensor32 xh = random_tensor<float>({1, 6, 8, 8}, rng);
  const auto y = oc.forward({xh, Tensor32::zeros({1, 6, 4, 4})});
  const Tensor32 vanilla = ops::conv2d(xh, oc.w_hh(), Tensor32(), {1, 1, 1});
  CHECK(testing::bit_equal(y.high, vanilla));
  for (float v : y.low.data()) CHECK(v == 0.f);
}

TEST_CASE("octave conv is linear in its input") {
  Scope<float> s;
  nn::OctaveConv<float> oc(s.builder(), 8, 8, 0.5);
  std::mt19937_64 rng(9);
  const Tensor32 xh = random_tensor<float>({1, 4, 8, 8}, rng), xl = random_tensor<float>({1, 4, 4, 4}, rng);
  const auto y = oc.forward({xh, xl});
  const auto ya = oc.forward({scaled(xh, 2.5f), scaled(xl, 2.5f)});
  CHECK(testing::max_abs_diff(ya.high, scaled(y.high, 2.5f)) < 1e-5);
  CHECK(testing::max_abs_diff(ya.low, scaled(y.low, 2.5f)) < 1e-5);
}

TEST_CASE("single-branch octave conv builds only the selected branch") {
  Scope<float> s;
  nn::OctaveConv<float> hi(s.builder("hi"), 8, 8, 0.5, nn::FreqBranches::high);
  nn::OctaveConv<float> lo(s.builder("lo"), 8, 8, 0.5, nn::FreqBranches::low);
  CHECK(s.params.contains("hi.w_hh"));
  CHECK_FALSE(s.params.contains("hi.w_ll"));
  CHECK(s.params.contains("lo.w_hl"));
  CHECK_FALSE(s.params.contains("lo.w_lh"));
  std::mt19937_64 rng(10);
  nn::FreqPair<float> x{random_tensor<float>({1, 4, 8, 8}, rng), random_tensor<float>({1, 4, 4, 4}, rng)};
  CHECK(hi.forward(x).high.defined());
  CHECK_FALSE(hi.forward(x).low.defined());
  CHECK(lo.forward(x).low.defined());
  CHECK_FALSE(lo.forward(x).high.defined());
}

TEST_CASE("rfb preserves extents and maps channels") {
  Scope<float> s;
  nn::RFB<float> rfb(s.builder(), 64, 32);
  std::mt19937_64 rng(11);
  CHECK(rfb.forward(random_tensor<float>({1, 64, 64, 64}, rng), {false}).shape() == Shape{1, 32, 64, 64});
  CHECK(s.params.contains("m.b3.dilated.conv.weight"));
  CHECK(s.params.at("m.b3.dilated.conv.weight").shape() == Shape{32, 32, 3, 3});
}

TEST_CASE("sam attention range and constant input") {
  Scope<float> s;
  nn::SAM<float> sam(s.builder());
  std::mt19937_64 rng(12);
  const Tensor32 x = random_tensor<float>({2, 5, 9, 9}, rng, -3, 3);
  const Tensor32 att = sam.attention(x);
  CHECK(att.shape() == Shape{2, 1, 9, 9});
  for (float v : att.data()) {
    CHECK(v > 0.f);
    CHECK(v < 1.f);
  }
  const Tensor32 y = sam.forward(x);
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y.data()[i]) <= std::abs(x.data()[i]));

  // zero padding makes the 7x7 response position dependent within 3 pixels
  // of the border; the interior is constant
  const std::size_t E = 12;
  const Tensor32 c = Tensor32::full({1, 4, E, E}, 0.7f);
  const Tensor32 a = sam.attention(c);
  const float centre = a.at(0, 0, E / 2, E / 2);
  for (std::size_t i = 3; i + 3 < E; ++i)
    for (std::size_t j = 3; j + 3 < E; ++j) CHECK(a.at(0, 0, i, j) == doctest::Approx(centre).epsilon(1e-6));
  const Tensor32 out = sam.forward(c);
  for (std::size_t i = 3; i + 3 < E; ++i)
    for (std::size_t j = 3; j + 3 < E; ++j) CHECK(out.at(0, 2, i, j) == doctest::Approx(0.7f * centre).epsilon(1e-6));
}

TEST_CASE("block gradient checks in double precision") {
  std::mt19937_64 rng(13);
  auto run = [&](auto&& make, const Shape& in, std::size_t samples) {
    Scope<double> s;
    auto block = make(s.builder());
    Tensor<double> x = random_tensor<double>(in, rng);
    Tensor<double> xp = s.params.add("input", x);
    Tensor<double> r;
    std::function<Tensor<double>()> loss = [&]() {
      Tensor<double> y = block(xp);
      if (!r.defined()) r = random_tensor<double>(y.shape(), rng);
      return ops::sum(ops::mul(y, r));
    };
    const auto rep = testing::check_param_gradient<double>(s.params, loss, samples, rng, 1e-6, 1e-3);
    INFO(rep.worst_where);
    CHECK(rep.checked >= std::min<std::size_t>(samples, 50));
    CHECK(rep.pass_fraction() >= 0.99);
    return rep;
  };

  run([](nn::Builder<double> b) {
        auto blk = std::make_shared<nn::ConvBN<double>>(b, 3, 4, 3);
        return [blk](const Tensor<double>& x) { return blk->forward(x, {true}); };
      },
      {2, 3, 5, 5}, 120);
  run([](nn::Builder<double> b) {
        auto oc = std::make_shared<nn::OctaveConv<double>>(b, 6, 6, 0.5);
        return [oc](const Tensor<double>& x) {
          const auto y = oc->forward(nn::to_freq_pair(x, 0.5));
          return ops::add(y.high, ops::upsample_nearest(y.low, 2));
        };
      },
      {1, 6, 6, 6}, 200);
  run([](nn::Builder<double> b) {
        auto rfb = std::make_shared<nn::RFB<double>>(b, 3, 2);
        return [rfb](const Tensor<double>& x) { return rfb->forward(x, {true}); };
      },
      {2, 3, 8, 8}, 150);
  run([](nn::Builder<double> b) {
        auto sam = std::make_shared<nn::SAM<double>>(b);
        return [sam](const Tensor<double>& x) { return sam->forward(x); };
      },
      {1, 3, 6, 6}, 150);
}
