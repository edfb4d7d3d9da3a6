#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "sarjepa/checkpoint.hpp"
#include "sarjepa/errors.hpp"
#include "sarjepa/eval.hpp"

using namespace sarjepa;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.embed_dim = 32;
  m.heads = 2;
  m.encoder_depth = 2;
  m.predictor_depth = 1;
  m.mlp_ratio = 2;
  return m;
}

LabeledDataset balanced(int classes, int per_class) {
  LabeledDataset d;
  for (int c = 0; c < classes; ++c) d.class_names.push_back("c" + std::to_string(c));
  for (int i = 0; i < classes * per_class; ++i) {
    d.images.push_back(SarImage(16, 16, 1.0 + i));
    d.labels.push_back(i % classes);
  }
  return d;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("split with N+1 items per class leaves one test item per class") {
    const auto d = balanced(4, 6);
    const auto s = make_few_shot_split(d, 5, 1);
    CHECK(s.train.size() == 20);
    REQUIRE(s.test.size() == 4);
    std::set<int> cls;
    for (auto i : s.test) cls.insert(d.labels[i]);
    CHECK(cls.size() == 4);
    std::set<std::size_t> all(s.train.begin(), s.train.end());
    for (auto i : s.test) CHECK(all.insert(i).second);
  }

  TEST_CASE("split is deterministic per seed and exact per class") {
    const auto d = balanced(3, 20);
    const auto a = make_few_shot_split(d, 4, 9), b = make_few_shot_split(d, 4, 9);
    CHECK(a.train == b.train);
    CHECK(a.test == b.test);
    std::vector<int> counts(3, 0);
    for (auto i : a.train) ++counts[static_cast<std::size_t>(d.labels[i])];
    for (int c : counts) CHECK(c == 4);
    CHECK(make_few_shot_split(d, 4, 10).train != a.train);
  }

  TEST_CASE("train inclusion frequency is uniform") {
    const auto d = balanced(2, 10);
    std::vector<int> hits(d.size(), 0);
    for (int s = 0; s < 1000; ++s)
      for (auto i : make_few_shot_split(d, 3, static_cast<std::uint64_t>(s)).train) ++hits[i];
    for (int h : hits) CHECK(std::abs(h / 1000.0 - 0.3) <= 0.05);
  }

  TEST_CASE("small class is named in the error") {
    auto d = balanced(3, 5);
    d.class_names[2] = "ellipse";
    try {
      make_few_shot_split(d, 5, 0);
      FAIL("expected an error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("'c0'") != std::string::npos);
    }
    d.images.pop_back();
    d.labels.pop_back();
    d.images.push_back(SarImage(16, 16, 1.0));
    d.labels.push_back(0);
    try {
      make_few_shot_split(d, 4, 0);
      FAIL("expected an error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("'ellipse'") != std::string::npos);
    }
  }

  TEST_CASE("encoder features are deterministic with length d") {
    const auto state = ModelState<float>::initialize(small_model(), 4);
    const auto img = oracle::random_positive_image(32, 32, 7);
    const auto a = encode_image_features(state, img), b = encode_image_features(state, img);
    CHECK(a.size() == 32);
    CHECK((a - b).norm() == 0.0f);
    const Mat<float> batch = encode_features(state, {img, oracle::random_positive_image(32, 32, 8), img});
    CHECK((batch.row(0) - batch.row(2)).norm() == 0.0f);
    CHECK((batch.row(0).transpose() - a).norm() < 1e-5f);
  }

  TEST_CASE("permuting patch contents changes the features") {
    auto state = ModelState<float>::initialize(small_model(), 4);
    std::mt19937_64 rng(1);
    std::normal_distribution<float> n(0.0f, 0.5f);
    for (auto& b : state.blocks)
      for (Eigen::Index i = 0; i < b.rel_bias.size(); ++i) b.rel_bias.data()[i] = n(rng);
    const auto img = oracle::random_positive_image(32, 32, 12);
    Plane swapped = img.data;
    swapped.block(0, 0, 8, 8) = img.data.block(24, 16, 8, 8);
    swapped.block(24, 16, 8, 8) = img.data.block(0, 0, 8, 8);
    const auto a = encode_image_features(state, img), b = encode_image_features(state, SarImage(swapped));
    CHECK((a - b).norm() > 1e-5f);
  }

  TEST_CASE("single-class dataset scores 1") {
    const auto d = balanced(1, 8);
    const auto state = ModelState<float>::initialize(small_model(), 1);
    ProbeConfig c;
    c.epochs = 3;
    c.warmup_epochs = 1;
    CHECK(probe(state, make_few_shot_split(d, 2, 0), c, d).accuracy == 1.0);
  }

  TEST_CASE("zero classifier without training falls back to the lowest class") {
    const int classes = 5;
    Mat<float> feats = Mat<float>::Random(50, 6);
    std::vector<int> labels;
    for (int i = 0; i < 50; ++i) labels.push_back(i % classes);
    auto d = balanced(classes, 10);
    ProbeConfig c;
    c.epochs = 0;
    c.zero_init = true;
    const auto split = make_few_shot_split(d, 2, 3);
    const auto r = probe_features(feats, labels, classes, split, c);
    CHECK(r.accuracy == doctest::Approx(1.0 / classes).epsilon(1e-12));
    for (int p : r.predictions) CHECK(p == 0);
    Eigen::VectorXf tie(3);
    tie << 1.0f, 2.0f, 2.0f;
    CHECK(argmax_lowest(tie) == 1);
  }

  TEST_CASE("separable features are learned") {
    const int classes = 4, per = 60, dim = 8;
    Mat<float> feats(classes * per, dim);
    std::vector<int> labels;
    std::mt19937_64 rng(5);
    std::normal_distribution<float> n(0.0f, 0.3f);
    for (int i = 0; i < classes * per; ++i) {
      const int c = i % classes;
      for (int k = 0; k < dim; ++k) feats(i, k) = n(rng) + (k == c ? 3.0f : 0.0f) + 5.0f;
      labels.push_back(c);
    }
    const auto d = balanced(classes, per);
    const auto split = make_few_shot_split(d, 40, 2);
    const auto r = probe_features(feats, labels, classes, split, ProbeConfig{});
    CHECK(r.accuracy >= 0.95);
  }

  TEST_CASE("single repeat reproduces one probe and the mean matches the csv") {
    const auto d = generate_corpus(SceneSpec{}, 30, 4);
    const auto state = ModelState<float>::initialize(small_model(), 2);
    ProbeConfig c;
    c.epochs = 4;
    c.warmup_epochs = 1;
    c.seed = 6;
    const auto one = evaluate_few_shot(state, d, {2}, 1, c);
    const auto split = make_few_shot_split(d, 2, split_seed(6, 2, 0));
    CHECK(one.runs.front().accuracy == probe(state, split, c, d).accuracy);
    CHECK(one.summary.front().std == 0.0);

    const auto hash = state_hash(state);
    const auto table = evaluate_few_shot(state, d, {1, 3}, 3, c);
    CHECK(state_hash(state) == hash);
    REQUIRE(table.runs.size() == 6);
    const fs::path csv = fs::temp_directory_path() / "sarjepa_eval_metrics.csv";
    table.write_csv(csv);
    std::ifstream is(csv);
    std::string line;
    std::getline(is, line);
    CHECK(line == "shots,repeat,seed,mode,accuracy");
    double sum1 = 0;
    int rows = 0;
    while (std::getline(is, line)) {
      std::stringstream ss(line);
      std::string f[5];
      for (auto& x : f) std::getline(ss, x, ',');
      CHECK(f[3] == "linear");
      if (f[0] == "1") sum1 += std::stod(f[4]);
      ++rows;
    }
    CHECK(rows == 6);
    CHECK(std::abs(table.summary[0].mean - sum1 / 3) < 1e-9);
    for (const auto& s : table.summary) {
      CHECK(s.mean >= 0.0);
      CHECK(s.mean <= 1.0);
      CHECK(s.std >= 0.0);
    }
    fs::remove(csv);
  }

  TEST_CASE("finetune updates a private copy") {
    const auto d = generate_corpus(SceneSpec{}, 15, 4);
    const auto state = ModelState<float>::initialize(small_model(), 2);
    const auto hash = state_hash(state);
    ProbeConfig c;
    c.mode = ProbeMode::Finetune;
    c.epochs = 2;
    c.warmup_epochs = 1;
    const auto r = probe(state, make_few_shot_split(d, 1, 0), c, d);
    CHECK(r.accuracy >= 0.0);
    CHECK(r.accuracy <= 1.0);
    CHECK(state_hash(state) == hash);
    CHECK_THROWS_AS(parse_probe_mode("knn"), ValidationError);
  }

  TEST_CASE("attention distance of identity and uniform maps") {
    CHECK(mean_attention_distance(Eigen::MatrixXd::Identity(16, 16), 4, 4, 8) == 0.0);
    const Eigen::MatrixXd uniform = Eigen::MatrixXd::Constant(4, 4, 0.25);
    CHECK(mean_attention_distance(uniform, 2, 2, 8) == doctest::Approx(8 * (2 + std::sqrt(2.0)) / 4).epsilon(1e-12));
  }

  TEST_CASE("attention distance matches the double-loop oracle") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 20; ++t) {
      const int rows = 2 + t % 4, cols = 1 + t % 5, n = rows * cols;
      Eigen::MatrixXd a(n, n);
      for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = u(rng);
      for (int q = 0; q < n; ++q) a.row(q) /= a.row(q).sum();
      CHECK(std::abs(mean_attention_distance(a, rows, cols, 8) - oracle::attention_distance(a, rows, cols, 8)) < 1e-6);
    }
  }

  TEST_CASE("model attention distances are bounded by the grid diameter") {
    const auto state = ModelState<float>::initialize(small_model(), 3);
    std::vector<SarImage> imgs;
    for (int i = 0; i < 3; ++i) imgs.push_back(oracle::random_positive_image(32, 32, 50 + i));
    const auto rows = attention_distance(state, imgs);
    REQUIRE(rows.size() == 4);
    for (const auto& r : rows) {
      CHECK(r.mean_distance_px > 0.0);
      CHECK(r.mean_distance_px <= 8 * std::sqrt(18.0) + 1e-9);
    }
  }
}
