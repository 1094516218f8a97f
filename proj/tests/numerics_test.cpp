#include "catch_amalgamated.hpp"

#include "smb/checkpoint.hpp"
#include "smb/error.hpp"
#include "smb/gradcheck.hpp"
#include "smb/ops.hpp"
#include "smb/optim.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace smb::nn;
using Catch::Approx;

namespace {

Tensor leaf(Shape shape, std::vector<float> v) { return Tensor::from(std::move(shape), std::move(v), true); }

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("smb_numerics_" + name);
}

} // namespace

TEST_CASE("matmul forward", "[numerics]") {
    const Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    const Tensor y = matmul(eye, x);
    CHECK(std::vector<float>(y.data().begin(), y.data().end()) == std::vector<float>{1, 2, 3, 4, 5, 6});
    CHECK(matmul(Tensor::from({1, 1}, {2}), Tensor::from({1, 1}, {3})).item() == 6.0f);
    CHECK_THROWS_WITH(matmul(x, Tensor::from({2, 1}, {1, 1})),
                      Catch::Matchers::ContainsSubstring("[2x3]") && Catch::Matchers::ContainsSubstring("[2x1]"));
}

TEST_CASE("layer_norm forward", "[numerics]") {
    const Tensor gain = Tensor::from({2}, {1, 1});
    const Tensor bias = Tensor::from({2}, {0, 0});
    const Tensor c = layer_norm(Tensor::from({1, 2}, {3, 3}), gain, bias);
    CHECK(c.data()[0] == 0.0f);
    CHECK(c.data()[1] == 0.0f);
    const Tensor r = layer_norm(Tensor::from({1, 2}, {1, -1}), gain, bias);
    const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
    CHECK(r.data()[0] == Approx(expect).margin(1e-6));
    CHECK(r.data()[1] == Approx(-expect).margin(1e-6));
}

TEST_CASE("softmax_cross_entropy", "[numerics]") {
    const std::vector<std::int32_t> t0{0};
    const std::vector<std::uint8_t> on{1};
    CHECK(softmax_cross_entropy(Tensor::from({1, 2}, {0, 0}), t0, on).item() == Approx(0.693147).margin(1e-6));
    CHECK(softmax_cross_entropy(Tensor::from({1, 2}, {30, 0}), t0, on).item() < 1e-4);

    const std::vector<float> logits{0.2f, -1.0f, 0.5f, 2.0f, 0.1f, -0.3f, -2.0f, 1.5f, 0.0f};
    const std::vector<std::int32_t> targets{2, 0, 1};
    const std::vector<std::uint8_t> mask{1, 0, 1};
    double oracle = 0.0;
    for (int p : {0, 2}) {
        double z = 0.0;
        for (int j = 0; j < 3; ++j) {
            z += std::exp(static_cast<double>(logits[p * 3 + j]));
        }
        oracle -= std::log(std::exp(static_cast<double>(logits[p * 3 + targets[p]])) / z);
    }
    CHECK(softmax_cross_entropy(Tensor::from({3, 3}, logits), targets, mask).item() ==
          Approx(oracle / 2.0).margin(1e-6));
    const std::vector<std::uint8_t> none{0, 0, 0};
    CHECK_THROWS_WITH(softmax_cross_entropy(Tensor::from({3, 3}, logits), targets, none),
                      Catch::Matchers::ContainsSubstring("no supervised positions"));
}

TEST_CASE("masked_mse", "[numerics]") {
    const Tensor p = Tensor::from({2, 2}, {1, 2, 0, 0});
    const Tensor t = Tensor::from({2, 2}, {1, 4, 3, 4});
    CHECK(masked_mse(p, p, std::vector<std::size_t>{0, 1}).item() == 0.0f);
    CHECK(masked_mse(p, t, std::vector<std::size_t>{0}).item() == 4.0f);
    CHECK(masked_mse(p, t, std::vector<std::size_t>{0, 1}).item() == Approx((4.0 + 25.0) / 2.0));
    CHECK_THROWS(masked_mse(p, t, std::vector<std::size_t>{}));
}

TEST_CASE("gelu", "[numerics]") {
    const Tensor y = gelu(Tensor::from({3}, {0.0f, 10.0f, -10.0f}));
    CHECK(y.data()[0] == 0.0f);
    CHECK(y.data()[1] == Approx(10.0).margin(1e-3));
    CHECK(y.data()[2] == Approx(0.0).margin(1e-3));
}

TEST_CASE("backward accumulates and is linear", "[numerics][autograd]") {
    Tensor x = leaf({1}, {3.0f});
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = mul(x, x);
    tape.backward(y);
    CHECK(x.grad()[0] == 6.0f);
    tape.backward(y);
    CHECK(x.grad()[0] == 12.0f);

    x.zero_grad();
    Tape t2;
    TapeScope s2(t2);
    t2.backward(scale(mul(x, x), 2.5f));
    CHECK(x.grad()[0] == 15.0f);

    Tape t3;
    TapeScope s3(t3);
    const Tensor v = mul(leaf({2}, {1, 2}), leaf({2}, {3, 4}));
    CHECK_THROWS_AS(t3.backward(v), std::invalid_argument);
}

TEST_CASE("finite inputs up to 1e3 give finite outputs", "[numerics]") {
    const Tensor big = Tensor::from({2, 3}, {1e3f, -1e3f, 0.5f, 999.0f, -1.0f, 1e3f});
    CHECK_NOTHROW(gelu(big));
    CHECK_NOTHROW(layer_norm(big, Tensor::from({3}, {1, 1, 1}), Tensor::from({3}, {0, 0, 0})));
    CHECK_NOTHROW(softmax_cross_entropy(big, std::vector<std::int32_t>{1, 2}, std::vector<std::uint8_t>{1, 1}));
    CHECK_NOTHROW(self_attention(Tensor::from({2, 3}, {1e3f, 1e3f, 1e3f, -1e3f, -1e3f, 1e3f}), 1, true));
}

TEST_CASE("cosine schedule", "[numerics][optim]") {
    CHECK(cosine_lr(3, 100, 1e-3) == Approx(1e-3));
    CHECK(cosine_lr(100, 100, 1e-3) == Approx(0.0).margin(1e-15));
    CHECK(cosine_lr(0, 100, 1e-3) == 0.0);
    CHECK(cosine_lr(515, 1000, 1e-3) == Approx(5e-4).margin(1e-6 * 1e-3));
    CHECK_THROWS(cosine_lr(0, 0, 1e-3));
    CHECK_THROWS(cosine_lr(101, 100, 1e-3));
}

TEST_CASE("adamw step", "[numerics][optim]") {
    OptimizerState state;
    state.options.weight_decay = 0.0;
    SECTION("zero gradient and no decay leave parameters unchanged") {
        Tensor w = leaf({2, 2}, {1, 2, 3, 4});
        w.mutable_grad();
        adamw_step({{"w", w}}, state, 1e-2);
        CHECK(std::vector<float>(w.data().begin(), w.data().end()) == std::vector<float>{1, 2, 3, 4});
        CHECK_FALSE(w.has_grad());
    }
    SECTION("first step with unit gradient moves by the learning rate") {
        Tensor w = leaf({1}, {0.5f});
        w.mutable_grad()[0] = 1.0f;
        adamw_step({{"w", w}}, state, 1e-2);
        CHECK(w.data()[0] == Approx(0.5 - 1e-2).margin(1e-7));
    }
    SECTION("weight decay shrinks matrices by 1 - lr * wd") {
        state.options.weight_decay = 0.1;
        Tensor w = leaf({1, 2}, {2.0f, -4.0f});
        Tensor b = leaf({2}, {2.0f, -4.0f});
        w.mutable_grad();
        b.mutable_grad();
        adamw_step({{"w", w}, {"b", b}}, state, 0.5);
        CHECK(w.data()[0] == Approx(2.0 * (1.0 - 0.05)));
        CHECK(w.data()[1] == Approx(-4.0 * (1.0 - 0.05)));
        CHECK(b.data()[0] == 2.0f);
    }
    SECTION("missing gradient is an error") {
        Tensor w = leaf({1}, {0.5f});
        CHECK_THROWS_WITH(adamw_step({{"w", w}}, state, 1e-2), Catch::Matchers::ContainsSubstring("'w'"));
    }
    SECTION("identical state and gradients give identical bits") {
        OptimizerState s1 = state, s2 = state;
        Tensor a = leaf({3}, {0.1f, 0.2f, 0.3f});
        Tensor b = leaf({3}, {0.1f, 0.2f, 0.3f});
        for (int k = 0; k < 5; ++k) {
            for (Tensor* t : {&a, &b}) {
                auto g = t->mutable_grad();
                g[0] = 0.3f * static_cast<float>(k);
                g[1] = -1.0f;
                g[2] = 1e-3f;
            }
            adamw_step({{"p", a}}, s1, 3e-3);
            adamw_step({{"p", b}}, s2, 3e-3);
        }
        CHECK(std::vector<float>(a.data().begin(), a.data().end()) ==
              std::vector<float>(b.data().begin(), b.data().end()));
    }
}

TEST_CASE("gradient clipping", "[numerics][optim]") {
    Tensor w = leaf({2}, {0, 0});
    w.mutable_grad()[0] = 3.0f;
    w.mutable_grad()[1] = 4.0f;
    CHECK(clip_grad_norm({{"w", w}}, 1.0) == Approx(5.0));
    CHECK(grad_norm({{"w", w}}) == Approx(1.0).margin(1e-6));
}

TEST_CASE("checkpoint container round trip", "[numerics][checkpoint]") {
    const auto path = temp_file("roundtrip.ckpt");
    const std::vector<TensorRecord> records{{"a", {2, 2}, {1.5f, -2.0f, 3.25f, 1e-8f}}, {"b", {3}, {0, 1, 2}}};
    write_container(path, records);
    const auto back = read_container(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].name == "a");
    CHECK(back[0].shape == Shape{2, 2});
    CHECK(back[0].values == records[0].values);
    CHECK(back[1].values == records[1].values);

    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 3);
    CHECK_THROWS_AS(read_container(path), smb::DataError);
    std::filesystem::remove(path);
}

TEST_CASE("finite-difference suite", "[numerics][gradcheck]") {
    const auto results = smb::gradcheck::run();
    REQUIRE(results.size() >= 15);
    for (const auto& r : results) {
        INFO(r.name << " max rel err " << r.max_rel_error);
        CHECK(r.points == 10);
        CHECK(r.passed);
    }
    CHECK(smb::gradcheck::all_passed(results));

    smb::gradcheck::Options bad;
    bad.inject_bug = true;
    const auto broken = smb::gradcheck::run(bad);
    CHECK_FALSE(smb::gradcheck::all_passed(broken));
}
