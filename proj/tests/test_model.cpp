#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "gradcheck.hpp"
#include "sarjepa/checkpoint.hpp"
#include "sarjepa/errors.hpp"
#include "sarjepa/loss.hpp"
#include "sarjepa/model.hpp"

using namespace sarjepa;

namespace {

Mat<float> random_pixels(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Mat<float> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.patch = 4;
  cfg.embed_dim = 16;
  cfg.heads = 2;
  cfg.encoder_depth = 2;
  cfg.predictor_depth = 1;
  cfg.window = 3;
  cfg.target_dim = 10;
  return cfg;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("config validation and paper-faithful depth") {
    ModelConfig cfg;
    cfg.embed_dim = 130;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = ModelConfig{};
    cfg.paper_faithful = true;
    CHECK(cfg.resolved().predictor_depth == 8);
    const auto round = model_config_from_json(to_json(cfg));
    CHECK(round.paper_faithful);
    CHECK(round.embed_dim == cfg.embed_dim);
  }

  TEST_CASE("relative bias index clamps offsets") {
    const auto idx = relative_bias_index(3, 3, 2);
    // side 3, center (0,0) offset -> 4
    CHECK(idx(4, 4) == 4);
    CHECK(idx(0, 8) == 0);  // offset (-2,-2) clamps to (-1,-1)
    CHECK(idx(8, 0) == 8);
  }

  TEST_CASE("embedding keeps every token") {
    const auto cfg = small_config();
    const auto state = ModelState<float>::initialize(cfg, 1);
    const auto px = random_pixels(9, 16, 2);
    std::vector<bool> none(9, false), all(9, true);
    const auto a = embed_tokens(state, px, none);
    CHECK(a.rows() == 9);
    for (int i = 0; i < 9; ++i) CHECK_FALSE(a.row(i).isApprox(state.mask_token.row(0)));
    const auto b = embed_tokens(state, px, all);
    CHECK(b.rows() == 9);
    for (int i = 0; i < 9; ++i) CHECK(b.row(i) == state.mask_token.row(0));
    CHECK_THROWS_AS(embed_tokens(state, random_pixels(9, 15, 2), none), ValidationError);
  }

  TEST_CASE("prediction shape is tokens x target_dim") {
    const auto cfg = small_config();
    const auto state = ModelState<float>::initialize(cfg, 3);
    for (int count : {1, 3}) {
      const SeqLayout layout{3, 3, count};
      std::vector<bool> masked(static_cast<std::size_t>(layout.total()), false);
      masked[0] = true;
      const auto pred = encode_predict(state, random_pixels(layout.total(), 16, 4), masked, layout, nullptr);
      CHECK(pred.rows() == layout.total());
      CHECK(pred.cols() == cfg.target_dim);
    }
  }

  TEST_CASE("identical tokens without position bias give identical outputs") {
    const auto cfg = small_config();
    auto state = ModelState<float>::initialize(cfg, 5);
    for (auto& b : state.blocks) b.rel_bias.setZero();
    const SeqLayout layout{3, 3, 1};
    std::vector<bool> masked(9, true);
    const auto pred = encode_predict(state, random_pixels(9, 16, 6), masked, layout, nullptr);
    for (int i = 1; i < 9; ++i) CHECK((pred.row(i) - pred.row(0)).norm() < 1e-5f);
  }

  TEST_CASE("finite-difference gradient check") {
    for (const SeqLayout layout : {SeqLayout{2, 2, 2}, SeqLayout{3, 3, 1}}) {
      for (const auto& g : gradcheck::check(gradcheck::make_problem(11, layout))) {
        INFO(g.name);
        CHECK(g.rel_error < 1e-4);
      }
    }
  }

  TEST_CASE("mask token receives gradient only when something is masked") {
    const auto cfg = small_config();
    const auto state = ModelState<float>::initialize(cfg, 7);
    const SeqLayout layout{3, 3, 1};
    const auto px = random_pixels(9, 16, 8);
    const auto tgt = random_pixels(9, cfg.target_dim, 9);
    for (bool any : {false, true}) {
      std::vector<bool> masked(9, false);
      if (any) masked[4] = true;
      ForwardCache<float> cache;
      const auto pred = encode_predict(state, px, masked, layout, &cache);
      Mat<float> dpred;
      mim_loss<float>(pred, tgt, masked, layout, !any, &dpred);
      auto grad = ModelState<float>::zeros(cfg);
      backprop(state, cache, dpred, grad);
      CHECK((grad.mask_token.norm() > 0.0f) == any);
    }
  }

  TEST_CASE("forward-backward is bitwise reproducible") {
    const auto cfg = small_config();
    const SeqLayout layout{3, 3, 2};
    std::vector<bool> masked(18, false);
    for (int i = 0; i < 18; i += 3) masked[static_cast<std::size_t>(i)] = true;
    const auto px = random_pixels(18, 16, 10);
    const auto tgt = random_pixels(18, cfg.target_dim, 11);
    std::vector<ModelState<float>> grads;
    for (int run = 0; run < 2; ++run) {
      const auto state = ModelState<float>::initialize(cfg, 12);
      ForwardCache<float> cache;
      const auto pred = encode_predict(state, px, masked, layout, &cache);
      Mat<float> dpred;
      mim_loss<float>(pred, tgt, masked, layout, false, &dpred);
      grads.push_back(ModelState<float>::zeros(cfg));
      backprop(state, cache, dpred, grads.back());
    }
    auto a = grads[0].parameters();
    auto b = grads[1].parameters();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].value == *b[i].value);
  }

  TEST_CASE("checkpoint round trip preserves outputs exactly") {
    const auto cfg = small_config();
    const auto state = ModelState<float>::initialize(cfg, 13);
    const auto dir = std::filesystem::temp_directory_path() / "sarjepa_ckpt_test";
    CheckpointMeta meta;
    meta.global_step = 42;
    meta.seed = 99;
    save_checkpoint(dir, state, meta);
    const auto loaded = load_checkpoint(dir);
    CHECK(loaded.meta.global_step == 42);
    CHECK(loaded.meta.seed == 99);
    CHECK(state_hash(loaded.state) == state_hash(state));
    const SeqLayout layout{3, 3, 1};
    std::vector<bool> masked(9, false);
    masked[2] = true;
    const auto px = random_pixels(9, 16, 14);
    CHECK(encode_predict(state, px, masked, layout, nullptr) == encode_predict(loaded.state, px, masked, layout, nullptr));
    CHECK(std::filesystem::file_size(dir / "tensors.bin") == state.num_scalars() * 4);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("non-finite weights raise divergence") {
    const auto cfg = small_config();
    auto state = ModelState<float>::initialize(cfg, 15);
    state.blocks[0].fc1_w(0, 0) = std::numeric_limits<float>::infinity();
    std::vector<bool> masked(9, false);
    CHECK_THROWS_AS(encode_predict(state, random_pixels(9, 16, 1), masked, SeqLayout{3, 3, 1}, nullptr),
                    DivergenceError);
  }
}

TEST_SUITE("model") {
  TEST_CASE("loss identities") {
    const SeqLayout layout{2, 2, 2};
    Mat<double> t = Mat<double>::Random(8, 5);
    std::vector<bool> masked{true, false, false, true, false, true, true, true};
    CHECK(mim_loss<double>(t, t, masked, layout, false) == 0.0);
    Mat<double> p = t.array() + 1.0;
    CHECK(mim_loss<double>(p, t, masked, layout, false) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(mim_loss<double>(p, t, masked, layout, true) == doctest::Approx(1.0).epsilon(1e-12));
    std::vector<bool> none(8, false);
    CHECK_THROWS_AS(mim_loss<double>(p, t, none, layout, false), ValidationError);
  }

  TEST_CASE("loss matches a scalar double loop") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0, 1);
    const SeqLayout layout{4, 4, 1};
    Mat<double> p(16, 7), t(16, 7);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      p.data()[i] = n(rng);
      t.data()[i] = n(rng);
    }
    std::vector<bool> masked(16, false);
    for (int i : {1, 2, 5, 8, 9, 15}) masked[static_cast<std::size_t>(i)] = true;
    double want = 0;
    int m = 0;
    for (int i = 0; i < 16; ++i) {
      if (!masked[static_cast<std::size_t>(i)]) continue;
      double row = 0;
      for (int j = 0; j < 7; ++j) row += (p(i, j) - t(i, j)) * (p(i, j) - t(i, j));
      want += row / 7;
      ++m;
    }
    want /= m;
    CHECK(std::abs(mim_loss<double>(p, t, masked, layout, false) - want) < 1e-7);
  }

  TEST_CASE("loss is invariant to window order") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0, 1);
    MaskPlan plan;
    plan.mask_ratio = 0.5;
    for (int w = 0; w < 4; ++w) {
      MaskWindow win;
      win.rows = win.cols = 2;
      win.masked = {w % 4, (w + 1) % 4};
      std::sort(win.masked.begin(), win.masked.end());
      plan.windows.push_back(win);
    }
    Mat<double> p(16, 3), t(16, 3);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      p.data()[i] = n(rng);
      t.data()[i] = n(rng);
    }
    const double base = mim_loss(p, t, plan);
    const std::vector<int> order{2, 0, 3, 1};
    MaskPlan shuffled = plan;
    Mat<double> ps(16, 3), ts(16, 3);
    for (int k = 0; k < 4; ++k) {
      shuffled.windows[static_cast<std::size_t>(k)] = plan.windows[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
      ps.middleRows(k * 4, 4) = p.middleRows(order[static_cast<std::size_t>(k)] * 4, 4);
      ts.middleRows(k * 4, 4) = t.middleRows(order[static_cast<std::size_t>(k)] * 4, 4);
    }
    CHECK(mim_loss(ps, ts, shuffled) == doctest::Approx(base).epsilon(1e-12));
  }
}
