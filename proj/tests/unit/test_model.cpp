#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "cnnp/checkpoint.hpp"
#include "cnnp/kernels.hpp"
#include "support.hpp"

using namespace cnnp;
using namespace cnnp::testing;

namespace {

Architecture single_linear(Index in_c, Index hw, Index classes) {
  // A 1x1 identity-free conv is required by the architecture invariant; the
  // linear head is what the fixtures below exercise.
  Architecture a;
  a.input_shape = {in_c, hw, hw};
  a.layers = {LayerSpec::conv(in_c, in_c, 1), LayerSpec::flatten(), LayerSpec::linear(in_c * hw * hw, classes)};
  for (Index c = 0; c < classes; ++c) a.class_names.push_back("c" + std::to_string(c));
  return a;
}

Model identity_conv_linear(const Tensorf& w, const Tensorf& b) {
  Model m(single_linear(1, 2, w.dim(0)));
  m.set_params(0, {Tensorf({1, 1, 1, 1}, 1.0f), Tensorf({1}, 0.0f)});
  m.set_params(2, {w, b});
  return m;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("cnnp_test_model_" + name);
}

}  // namespace

TEST_CASE("forward pass examples") {
  SUBCASE("zero-weight model yields the final bias") {
    Model m(mnist_architecture());
    m.mutable_params(7).bias = Tensorf({10}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    Rng rng(1);
    const auto pass = forward_pass(m, random_tensor<float>({3, 1, 28, 28}, rng, 0, 1));
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 10; ++j) CHECK(pass.logits[i * 10 + j] == static_cast<float>(j));
  }
  SUBCASE("linear head equals a hand matrix product") {
    // x = [1,2,3,4]; W rows [1,0,0,0],[0,1,1,0],[1,1,1,1]; b = [0.5,0,-1]
    const Tensorf w({3, 4}, {1, 0, 0, 0, 0, 1, 1, 0, 1, 1, 1, 1});
    const Tensorf b({3}, {0.5f, 0.0f, -1.0f});
    const Model m = identity_conv_linear(w, b);
    const auto pass = forward_pass(m, Tensorf({1, 1, 2, 2}, {1, 2, 3, 4}));
    CHECK(pass.logits.shape() == Shape{1, 3});
    CHECK(pass.logits[0] == 1.5f);
    CHECK(pass.logits[1] == 5.0f);
    CHECK(pass.logits[2] == 9.0f);
  }
  SUBCASE("cache holds one entry per layer of the reference architecture") {
    const Model m = build_model(mnist_architecture(), 7);
    Rng rng(2);
    const auto pass = forward_pass(m, random_tensor<float>({2, 1, 28, 28}, rng, 0, 1));
    CHECK(pass.cache.inputs.size() == m.layer_count());
    CHECK(pass.cache.layers_run == 8);
    CHECK(pass.logits.shape() == Shape{2, 10});
    CHECK(feature_map(pass, m.architecture(), 0).shape() == Shape{2, 32, 26, 26});
    CHECK(feature_map(pass, m.architecture(), 3).shape() == Shape{2, 64, 11, 11});
  }
  SUBCASE("bad batch shape") {
    const Model m = build_model(mnist_architecture(), 7);
    CHECK_THROWS_AS(forward_pass(m, Tensorf({1, 1, 27, 28})), Error);
  }
}

TEST_CASE("backward pass") {
  const Architecture arch = toy_architecture(3, 4);
  SUBCASE("zero upstream gradient gives zero gradients") {
    const Model m = random_model(arch, 3);
    Rng rng(3);
    const auto pass = forward_pass(m, random_tensor<float>({2, 1, 8, 8}, rng));
    const auto g = backward_pass(m, pass.cache, Tensorf({2, 3}));
    for (std::size_t i = 0; i < m.layer_count(); ++i) {
      CHECK(g.params[i].weights.vec().isZero(0));
      CHECK(g.params[i].bias.vec().isZero(0));
      CHECK(g.feature_maps[i].vec().isZero(0));
    }
  }
  SUBCASE("all parameter gradients match finite differences in double") {
    for (int t = 0; t < 20; ++t) {
      CAPTURE(t);
      ModelState<double> m = random_model(arch, 100 + t).cast<double>();
      Rng rng(200 + t);
      const Tensord x = random_tensor<double>({3, 1, 8, 8}, rng);
      const std::vector<int> labels{0, 2, 1};
      const auto pass = forward_pass(m, x);
      const auto loss = softmax_cross_entropy(pass.logits, labels);
      const auto g = backward_pass(m, pass.cache, loss.grad_logits);
      for (std::size_t i : {0u, 2u, 6u}) {
        CAPTURE(i);
        auto& p = m.mutable_params(i);
        auto f = [&] { return softmax_cross_entropy(infer(m, x), labels).loss; };
        CHECK(relative_error(g.params[i].weights, numeric_gradient(p.weights, f)) <= 1e-4);
        CHECK(relative_error(g.params[i].bias, numeric_gradient(p.bias, f)) <= 1e-4);
      }
    }
  }
  SUBCASE("feature-map gradients are consistent with bias gradients") {
    // dL/db_c = sum over positions where the pre-activation is positive of dL/df_c.
    ModelState<double> m = random_model(arch, 42).cast<double>();
    Rng rng(43);
    const auto pass = forward_pass(m, random_tensor<double>({2, 1, 8, 8}, rng));
    const std::vector<int> labels{1, 2};
    const auto g = backward_pass(m, pass.cache, softmax_cross_entropy(pass.logits, labels).grad_logits);
    for (std::size_t conv : {0u, 2u}) {
      const Tensord& pre = pass.cache.inputs[conv + 1];
      const Tensord& fg = g.feature_maps[conv];
      REQUIRE(fg.shape() == pre.shape());
      const Index c = pre.dim(1), hw = pre.dim(2) * pre.dim(3);
      for (Index ch = 0; ch < c; ++ch) {
        double s = 0;
        for (Index n = 0; n < pre.dim(0); ++n)
          for (Index k = 0; k < hw; ++k) {
            const Index idx = (n * c + ch) * hw + k;
            if (pre[idx] > 0) s += fg[idx];
          }
        CHECK(s == doctest::Approx(g.params[conv].bias[ch]).epsilon(1e-9));
      }
    }
  }
  SUBCASE("dead ReLU channel has zero feature-map gradient") {
    Model m = random_model(arch, 5);
    auto& p = m.mutable_params(0);
    for (Index k = 0; k < 9; ++k) p.weights[k] = 0.0f;  // filter 0
    p.bias[0] = -1.0f;
    Rng rng(6);
    const auto pass = forward_pass(m, random_tensor<float>({2, 1, 8, 8}, rng));
    const std::vector<int> labels{0, 1};
    const auto g = backward_pass(m, pass.cache, softmax_cross_entropy(pass.logits, labels).grad_logits);
    // Post-activation map of filter 0 is zero; its gradient upstream of the
    // ReLU gate is zero too.
    const Tensorf& fm = feature_map(pass, arch, 0);
    const Tensorf grad_pre = relu_backward(pass.cache.inputs[1], g.feature_maps[0]);
    for (Index n = 0; n < 2; ++n)
      for (Index k = 0; k < 36; ++k) {
        CHECK(fm[(n * 3 + 0) * 36 + k] == 0.0f);
        CHECK(grad_pre[(n * 3 + 0) * 36 + k] == 0.0f);
      }
    CHECK(g.params[0].weights.matrix(3, 9).row(0).isZero(0));
  }
  SUBCASE("stale cache is rejected") {
    Model m = random_model(arch, 8);
    Rng rng(9);
    const auto pass = forward_pass(m, random_tensor<float>({1, 1, 8, 8}, rng));
    m.mutable_params(0).bias[0] += 1.0f;
    CHECK_THROWS_AS(backward_pass(m, pass.cache, Tensorf({1, 3})), Error);
    const Model copy = m;
    CHECK_THROWS_AS(backward_pass(copy, pass.cache, Tensorf({1, 3})), Error);
  }
}

TEST_CASE("build_model") {
  const Model a = build_model(mnist_architecture(), 17);
  CHECK(total_filters(a.architecture()) == 96);
  CHECK(bit_identical(a, build_model(mnist_architecture(), 17)));
  CHECK_FALSE(bit_identical(a, build_model(mnist_architecture(), 18)));
  CHECK(a.params(0).bias.vec().isZero(0));
  const double bound = std::sqrt(6.0 / 9.0);
  CHECK(a.params(0).weights.vec().cwiseAbs().maxCoeff() <= bound);

  Architecture bad = mnist_architecture();
  bad.layers[7].in_features = 1599;
  try {
    build_model(bad, 1);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::invalid_architecture);
    CHECK(std::string(e.what()).find("layer 7") != std::string::npos);
  }
  Architecture no_conv;
  no_conv.input_shape = {1, 2, 2};
  no_conv.layers = {LayerSpec::flatten(), LayerSpec::linear(4, 2)};
  no_conv.class_names = {"a", "b"};
  CHECK_THROWS_AS(build_model(no_conv, 1), Error);
}

TEST_CASE("predict") {
  SUBCASE("ties resolve to the lowest class") {
    const Model m(mnist_architecture());
    const auto labels = predict(m, Tensorf({4, 1, 28, 28}, 0.3f));
    for (int l : labels) CHECK(l == 0);
  }
  SUBCASE("hand-set linear weights") {
    // Class scores: c0 = x0, c1 = x1, c2 = x2 + x3.
    const Tensorf w({3, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 1});
    const Model m = identity_conv_linear(w, Tensorf({3}));
    const Tensorf x({3, 1, 2, 2}, {0, 0, 1, 1,  //
                                   5, 1, 1, 1,  //
                                   0, 3, 1, 0});
    CHECK(predict(m, x) == std::vector<int>{2, 0, 1});
  }
  SUBCASE("invariant to batch splitting") {
    const Model m = build_model(mnist_architecture(), 3);
    Rng rng(4);
    const Tensorf all = random_tensor<float>({7, 1, 28, 28}, rng, 0, 1);
    Tensorf a({3, 1, 28, 28}), b({4, 1, 28, 28});
    std::copy_n(all.data(), a.size(), a.data());
    std::copy_n(all.data() + a.size(), b.size(), b.data());
    auto joined = predict(m, a);
    const auto tail = predict(m, b);
    joined.insert(joined.end(), tail.begin(), tail.end());
    CHECK(predict(m, all) == joined);
  }
}

TEST_CASE("evaluate") {
  SUBCASE("constant predictor on a balanced set") {
    Dataset d = random_dataset(50, {1, 28, 28}, 10, 1);
    for (Index i = 0; i < 50; ++i) d.labels[static_cast<std::size_t>(i)] = static_cast<int>(i % 10);
    d.class_names.clear();
    for (int c = 0; c < 10; ++c) d.class_names.push_back(std::to_string(c));
    const Evaluation e = evaluate(Model(mnist_architecture()), d);
    CHECK(e.accuracy == doctest::Approx(0.1));
    CHECK(e.class_correct[0] == 5);
    CHECK(e.class_total[3] == 5);
  }
  SUBCASE("four-sample fixture") {
    const std::vector<int> preds{0, 1, 1, 2}, labels{0, 1, 2, 2};
    const Evaluation e = evaluate_predictions(preds, labels, 3);
    CHECK(e.accuracy == 0.75);
    CHECK(e.class_correct == std::vector<std::int64_t>{1, 1, 1});
    CHECK(e.class_total == std::vector<std::int64_t>{1, 1, 2});
  }
  SUBCASE("empty dataset") {
    const std::vector<int> none;
    CHECK_THROWS_AS(evaluate_predictions(none, none, 3), Error);
  }
}

TEST_CASE("parameter and FLOP accounting") {
  auto conv_arch = [](Index in, Index out, Index hw) {
    Architecture a;
    a.input_shape = {in, hw, hw};
    a.layers = {LayerSpec::conv(in, out, 3), LayerSpec::flatten(),
                LayerSpec::linear(out * (hw - 2) * (hw - 2), 2)};
    a.class_names = {"a", "b"};
    return a;
  };
  SUBCASE("closed forms") {
    const Architecture a = conv_arch(1, 32, 28);
    CHECK(count_params(a) - (2 * (32 * 26 * 26 + 1)) == 320);

    Architecture lin;
    lin.input_shape = {10, 1, 1};
    lin.layers = {LayerSpec::conv(10, 10, 1), LayerSpec::flatten(), LayerSpec::linear(10, 2)};
    lin.class_names = {"a", "b"};
    CHECK(count_params(lin) - 10 * 11 == 22);

    const Architecture f = conv_arch(1, 8, 28);
    CHECK(count_flops(f) - (2 * 8 * 26 * 26 * 2 + 2) == 102752);

    Architecture one;
    one.input_shape = {10, 1, 1};
    one.layers = {LayerSpec::conv(10, 10, 1), LayerSpec::flatten(), LayerSpec::linear(10, 1)};
    one.class_names = {"a"};
    CHECK(count_flops(one) - (2 * 10 * 10 + 10) == 21);

    Architecture bare;
    bare.input_shape = {10, 1, 1};
    bare.layers = {LayerSpec::flatten(), LayerSpec::linear(10, 1)};
    bare.class_names = {"a"};
    CHECK(count_flops(bare) == 21);
    CHECK(count_params(bare) == 11);
  }
  SUBCASE("relu, pool and flatten add no parameters") {
    Architecture a = conv_arch(1, 4, 6);
    Architecture b = a;
    b.layers.insert(b.layers.begin() + 1, LayerSpec::relu());
    CHECK(count_params(a) == count_params(b));
    CHECK(count_flops(b) - count_flops(a) == 4 * 4 * 4);
  }
  SUBCASE("reference architecture") {
    const Architecture a = mnist_architecture();
    CHECK(count_params(a) == 320 + 64 * (32 * 9 + 1) + 10 * 1601);
    const std::int64_t flops = (2 * 9 * 32 * 676 + 32 * 676) + 32 * 676 + 32 * 169 +
                               (2 * 288 * 64 * 121 + 64 * 121) + 64 * 121 + 64 * 25 + (2 * 1600 * 10 + 10);
    CHECK(count_flops(a) == flops);
  }
}

TEST_CASE("checkpoint round trip and errors") {
  const Model m = random_model(mnist_architecture(), 77);
  const auto path = temp_path("rt.cnpm");
  const auto written = save_checkpoint(m, path);
  CHECK(written == std::filesystem::file_size(path));
  const Model back = load_checkpoint(path);
  CHECK(bit_identical(m, back));
  CHECK(back.seed() == 77);
  CHECK(back.architecture() == m.architecture());

  // 4 magic + 4 version + 8 length + descriptor + 4 bytes per parameter.
  const std::string bytes = encode_checkpoint(m);
  std::uint64_t desc_len;
  std::memcpy(&desc_len, bytes.data() + 8, 8);
  CHECK(written == 16 + desc_len + 4 * static_cast<std::uint64_t>(count_params(m)));

  SUBCASE("evaluation survives the round trip") {
    const Dataset d = random_dataset(40, {1, 28, 28}, 10, 5);
    CHECK(evaluate(m, d).predictions == evaluate(back, d).predictions);
  }
  SUBCASE("bad magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    try {
      decode_checkpoint(bad);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::bad_magic);
      CHECK(std::string(e.what()).find("bad magic") != std::string::npos);
    }
  }
  SUBCASE("version mismatch") {
    std::string bad = bytes;
    bad[4] = 2;
    try {
      decode_checkpoint(bad);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::version_mismatch);
    }
  }
  SUBCASE("truncated") {
    for (std::size_t cut : {std::size_t{6}, std::size_t{20}, bytes.size() - 1}) {
      try {
        decode_checkpoint(bytes.substr(0, cut));
        FAIL("expected error");
      } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::truncated);
      }
    }
  }
  std::filesystem::remove(path);
}
