#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fpnet/stage1.hpp"
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
void zero(ParamStore<T>& ps, const std::string& name) {
  for (auto& v : ps.at(name).mutable_data()) v = T(0);
}

// Copies every parameter of `to` from the same-named parameter of `from`.
void copy_shared(const ParamStore<float>& from, ParamStore<float>& to) {
  for (auto& [name, t] : to.tensors()) {
    const auto src = from.at(name).data();
    std::copy(src.begin(), src.end(), t.mutable_data().begin());
  }
}

// bconv in inference mode with the module's own statistics.
oracle::Array bconv_ref(const nn::ConvBN<float>& b, const oracle::Array& x) {
  const std::size_t k = b.conv().weight().shape().h();
  return oracle::relu(oracle::bn(oracle::conv(x, oracle::from(b.conv().weight()), {}, 1, k / 2),
                                 oracle::vec(b.bn().gamma()), oracle::vec(b.bn().beta()),
                                 oracle::vec(b.bn().running_mean()), oracle::vec(b.bn().running_var())));
}

// Shifts BN statistics and affine parameters away from their identity
// defaults so the oracles exercise them.
void perturb(Scope<float>& s) {
  std::uniform_real_distribution<float> u(-0.3f, 0.3f);
  for (auto& [name, t] : s.buffers)
    for (auto& v : t.mutable_data()) v = name.find("var") != std::string::npos ? 1.0f + u(s.rng) : u(s.rng);
  for (auto& [name, t] : s.params.tensors()) {
    if (name.find(".bn.") == std::string::npos && name.find(".b_") == std::string::npos &&
        name.find("bias") == std::string::npos)
      continue;
    for (auto& v : t.mutable_data()) v += u(s.rng);
  }
}

}  // namespace

TEST_CASE("fpm output shape at the decoder width") {
  Scope<float> s;
  const std::size_t H = 256;
  FPM<float> fpm(s.builder("fpm3"), 160, 32, 0.5);
  std::mt19937_64 rng(2);
  const Tensor32 x = random_tensor<float>({1, 160, H / 16, H / 16}, rng);
  CHECK(fpm.forward(x, {false}).shape() == Shape{1, 32, H / 16, H / 16});
  CHECK_THROWS_AS(fpm.forward(random_tensor<float>({1, 64, 16, 16}, rng), {false}), DimensionError);
}

TEST_CASE("fpm equals hand-composed split -> octave -> adapters -> add pipeline") {
  std::mt19937_64 rng(3);
  for (int draw = 0; draw < 10; ++draw) {
    Scope<float> s(10 + draw);
    FPM<float> fpm(s.builder("fpm"), 8, 6, 0.5);
    perturb(s);
    const Tensor32 x = random_tensor<float>({2, 8, 8, 8}, rng);
    const auto& oc = fpm.octave();
    using namespace oracle;
    const Array ax = from(x);
    const Array xh = slice(ax, 0, 4), xl = pool2(slice(ax, 4, 4));
    const Array yh = add(conv(xh, from(oc.w_hh()), vec(oc.b_h()), 1, 1),
                         up_nearest(conv(xl, from(oc.w_lh()), {}, 1, 1), 2));
    const Array yl = add(conv(xl, from(oc.w_ll()), vec(oc.b_l()), 1, 1), conv(pool2(xh), from(oc.w_hl()), {}, 1, 1));
    const Array ref = add(bconv_ref(fpm.high_adapter(), yh), bconv_ref(fpm.low_adapter(), up_nearest(yl, 2)));
    CHECK(max_abs_diff(from(fpm.forward(x, {false})), ref) <= 1e-5);
  }
}

TEST_CASE("fpm with a vanished low branch is the high adapter of Y^H") {
  Scope<float> s;
  FPM<float> fpm(s.builder("fpm"), 8, 4, 0.5);
  for (const char* n : {"fpm.oct.w_ll", "fpm.oct.w_hl", "fpm.oct.b_l"}) zero(s.params, n);
  std::mt19937_64 rng(4);
  Tensor32 x = random_tensor<float>({1, 8, 8, 8}, rng);
  // zero low input
  auto v = x.mutable_data();
  std::fill(v.begin() + 4 * 64, v.end(), 0.f);
  const auto y = fpm.octave().forward(fpm.split(x));
  for (float l : y.low.data()) CHECK(l == 0.f);
  CHECK(testing::bit_equal(fpm.forward(x, {false}), fpm.high_adapter().forward(y.high, {false})));
}

TEST_CASE("zeroing one branch reproduces the single-branch module") {
  std::mt19937_64 rng(5);
  const Tensor32 x = random_tensor<float>({2, 8, 8, 8}, rng);
  for (auto mode : {nn::FreqBranches::high, nn::FreqBranches::low}) {
    Scope<float> both(7), single(8);
    FPM<float> full(both.builder("fpm"), 8, 4, 0.5);
    FPM<float> one(single.builder("fpm"), 8, 4, 0.5, mode);
    copy_shared(both.params, single.params);
    const bool keep_high = mode == nn::FreqBranches::high;
    const std::vector<std::string> dead = keep_high ? std::vector<std::string>{"fpm.oct.w_ll", "fpm.oct.w_hl", "fpm.oct.b_l"}
                                                    : std::vector<std::string>{"fpm.oct.w_hh", "fpm.oct.w_lh", "fpm.oct.b_h"};
    for (const auto& n : dead) zero(both.params, n);
    for (bool training : {false, true}) {
      CHECK(testing::bit_equal(full.forward(x, {training}), one.forward(x, {training})));
    }
  }
}

TEST_CASE("ncd equals straight-line oracle") {
  std::mt19937_64 rng(6);
  for (int draw = 0; draw < 5; ++draw) {
    Scope<float> s(20 + draw);
    const std::size_t W = 4;
    NCD<float> ncd(s.builder("ncd"), W);
    perturb(s);
    const Tensor32 f2 = random_tensor<float>({1, W, 16, 16}, rng), f3 = random_tensor<float>({1, W, 8, 8}, rng),
                   f4 = random_tensor<float>({1, W, 4, 4}, rng);
    const auto st = ncd.forward(f2, f3, f4, {false});

    using namespace oracle;
    auto g = [](const nn::ConvBN<float>& b, const Array& x) { return bconv_ref(b, up_nearest(x, 2)); };
    const Array f4p = g(ncd.up_f4(), from(f4));
    const Array f3p = mul(from(f3), g(ncd.up_f4_gate(), from(f4)));
    const Array inner = bconv_ref(ncd.cat_inner(), concat(up_nearest(f3p, 2), up_nearest(f4p, 2)));
    const Array f2p = bconv_ref(ncd.cat_outer(), concat(mul(from(f2), g(ncd.up_f3_gate(), f3p)), inner));
    const Array s1 = conv(f2p, from(ncd.head().weight()), vec(ncd.head().bias()), 1, 0);

    CHECK(max_abs_diff(from(st.f4_prime), f4p) <= 1e-5);
    CHECK(max_abs_diff(from(st.f3_prime), f3p) <= 1e-5);
    CHECK(max_abs_diff(from(st.f2_prime), f2p) <= 1e-5);
    CHECK(max_abs_diff(from(st.s1_logits), s1) <= 1e-5);
  }
}

TEST_CASE("ncd shapes, multiplicative identity and chain validation") {
  Scope<float> s;
  NCD<float> ncd(s.builder("ncd"), 32);
  std::mt19937_64 rng(7);
  const Tensor32 f2 = random_tensor<float>({1, 32, 16, 16}, rng), f4 = random_tensor<float>({1, 32, 4, 4}, rng);
  const Tensor32 ones = Tensor32::full({1, 32, 8, 8}, 1.f);
  const auto st = ncd.forward(f2, ones, f4, {false});
  CHECK(st.f2_prime.shape() == Shape{1, 32, 16, 16});
  CHECK(st.s1_logits.shape() == Shape{1, 1, 16, 16});
  CHECK(testing::bit_equal(st.f3_prime, NCD<float>::up_conv(ncd.up_f4_gate(), f4, {false})));

  CHECK_THROWS_AS(ncd.forward(f2, random_tensor<float>({1, 32, 7, 7}, rng), f4, {false}), DimensionError);
  CHECK_THROWS_AS(ncd.forward(f2, ones, random_tensor<float>({1, 32, 8, 8}, rng), {false}), DimensionError);
  CHECK_THROWS_AS(ncd.forward(f2, ones, random_tensor<float>({1, 16, 4, 4}, rng), {false}), DimensionError);
}

TEST_CASE("stage-one gradient check: three fpm + ncd + sigmoid + mean") {
  Scope<double> s;
  const std::size_t W = 4;
  FPM<double> fpm2(s.builder("fpm2"), 4, W, 0.5), fpm3(s.builder("fpm3"), 6, W, 0.5), fpm4(s.builder("fpm4"), 8, W, 0.5);
  NCD<double> ncd(s.builder("ncd"), W);
  std::mt19937_64 rng(8);
  const Tensor<double> x2 = random_tensor<double>({2, 4, 8, 8}, rng), x3 = random_tensor<double>({2, 6, 4, 4}, rng),
                       x4 = random_tensor<double>({2, 8, 2, 2}, rng);
  std::function<Tensor<double>()> loss = [&]() {
    const nn::Context ctx{true};
    const auto st = ncd.forward(fpm2.forward(x2, ctx), fpm3.forward(x3, ctx), fpm4.forward(x4, ctx), ctx);
    return ops::mean(ops::sigmoid(st.s1_logits));
  };
  const auto rep = testing::check_param_gradient<double>(s.params, loss, 250, rng, 1e-6, 1e-3);
  INFO(rep.worst_where);
  CHECK(rep.checked == 250);
  CHECK(rep.pass_fraction() >= 0.99);
}
