#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "sarjepa/checkpoint.hpp"
#include "sarjepa/cli.hpp"
#include "sarjepa/errors.hpp"
#include "sarjepa/dataset.hpp"
#include "sarjepa/features.hpp"
#include "sarjepa/image.hpp"
#include "sarjepa/imagery.hpp"
#include "sarjepa/rng.hpp"

using namespace sarjepa;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code = -1;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "sarjepa");
  std::ostringstream captured;
  auto* old = std::cerr.rdbuf(captured.rdbuf());
  Outcome o;
  try {
    o.code = run_cli(args);
  } catch (...) {
    std::cerr.rdbuf(old);
    throw;
  }
  std::cerr.rdbuf(old);
  o.err = captured.str();
  return o;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "sarjepa_cli_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path write_json(const fs::path& p, const json& j) {
  std::ofstream(p) << j.dump(2);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string c; std::getline(ss, c, ',');) out.push_back(c);
  return out;
}

json manifest(const fs::path& dir) { return json::parse(slurp(dir / "run_manifest.json")); }

// Small enough to pretrain in well under a second.
json tiny_pretrain() {
  return json{{"image_size", 32},    {"size_min", 8},      {"size_max", 16},     {"corpus_size", 10},  {"epochs", 2},        {"warmup_epochs", 1},
              {"batch_size", 5},     {"embed_dim", 16},    {"heads", 2},         {"encoder_depth", 1},
              {"predictor_depth", 1}, {"mlp_ratio", 2},    {"windows_per_image", 2},
              {"scales", {3, 5, 7, 9}}};
}

json tiny_probe() {
  return json{{"image_size", 32}, {"size_min", 8}, {"size_max", 16}, {"probe_per_class", 6}, {"epochs", 3}, {"batch_size", 10}};
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("content hashes match git blob hashes") {
    CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
    CHECK(git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    const fs::path d = scratch("hash");
    std::ofstream(d / "a.txt") << "hello\n";
    CHECK(content_hash(d / "a.txt") == "ce013625030ba8dba906f756967f9e9ca394464a");
    fs::create_directories(d / "sub");
    std::ofstream(d / "sub" / "b.txt") << "x";
    const std::string h1 = content_hash(d);
    CHECK(h1 == content_hash(d));
    std::ofstream(d / "sub" / "b.txt") << "y";
    CHECK(content_hash(d) != h1);
    CHECK_THROWS_AS(content_hash(d / "missing"), ValidationError);
  }

  TEST_CASE("gen writes a dataset and a manifest") {
    const fs::path d = scratch("gen");
    const auto cfg = write_json(d / "c.json", {{"count", 10}, {"image_size", 32}, {"size_min", 8}, {"size_max", 16}, {"looks", 2}});
    const auto o = run({"gen", "--config", cfg.string(), "--out", (d / "out").string(), "--seed", "3"});
    REQUIRE(o.code == 0);
    const auto m = manifest(d / "out");
    CHECK(m["status"] == "ok");
    CHECK(m["command"] == "gen");
    CHECK(m["seed"] == 3);
    CHECK(m["inputs"]["config"] == content_hash(cfg));
    CHECK(m["config"]["looks"] == 2);
    CHECK(m["input_hash"].get<std::string>().size() == 40);

    const auto back = read_dataset(d / "out", "train");
    SceneSpec scene;
    scene.image_size = 32;
    scene.looks = 2;
    scene.size_range = {8, 16};
    const auto want = synthetic_pretrain_corpus(scene, 10, 3);
    REQUIRE(back.size() == 10);
    CHECK(back.num_classes() == 5);
    // Stored as float32.
    double worst = 0;
    std::map<std::string, int> per_class;
    for (std::size_t i = 0; i < back.size(); ++i) per_class[back.class_names[back.labels[i]]]++;
    for (const auto& [name, n] : per_class) CHECK(n == 2);
    for (std::size_t i = 0; i < want.size(); ++i) {
      const fs::path f = d / "out" / "train" / want.class_names[want.labels[i]] /
                         ("img_0000" + std::to_string(i) + ".f32");
      const auto img = read_f32(f);
      worst = std::max(worst, ((img.data - want.images[i].data).abs() / want.images[i].data.abs()).maxCoeff());
    }
    CHECK(worst < 1e-6);
  }

  TEST_CASE("features output matches the library call") {
    const fs::path d = scratch("features");
    const SarImage img = apply_speckle(SarImage(48, 40, 2.0), 1, 9);
    write_f32(d / "x.f32", img);
    const auto o = run({"features", "--feature", "grlin", "--scales", "5,9,13,17", "--epsilon", "0.01", "--input",
                        (d / "x.f32").string(), "--out", (d / "y").string()});
    REQUIRE(o.code == 0);
    const auto meta = json::parse(slurp(d / "y" / "features.json"));
    CHECK(meta["channels"] == 4);
    CHECK(meta["height"] == 48);
    CHECK(meta["width"] == 40);
    CHECK(meta["kernel_kind"] == "linear");
    CHECK(meta["scales"] == json::array({5, 9, 13, 17}));

    RoaKernelBank bank;
    bank.scales = {5, 9, 13, 17};
    bank.epsilon = 0.01;
    const auto want = multi_scale_target(read_f32(d / "x.f32"), bank);
    std::ifstream in(d / "y" / "features.f32", std::ios::binary);
    std::vector<float> got(4 * 48 * 40);
    read_le_floats(in, got.data(), got.size());
    CHECK(in.peek() == std::char_traits<char>::eof());
    double worst = 0;
    for (int c = 0; c < 4; ++c)
      for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 40; ++x)
          worst = std::max(worst, std::abs(double(got[(c * 48 + y) * 40 + x]) - want.channels[c](y, x)));
    CHECK(worst < 1e-6);
    CHECK(manifest(d / "y")["inputs"]["image"] == content_hash(d / "x.f32"));
  }

  TEST_CASE("validation errors exit 1 and name the field") {
    const fs::path d = scratch("bad");
    json bad = tiny_pretrain();
    bad["epochs"] = 3;
    bad["warmup_epochs"] = 3;
    const auto cfg = write_json(d / "bad.json", bad);
    const auto o = run({"pretrain", "--config", cfg.string(), "--out", (d / "out").string()});
    CHECK(o.code == 1);
    CHECK(o.err.find("warmup_epochs") != std::string::npos);
    CHECK(manifest(d / "out")["status"].get<std::string>().find("warmup_epochs") != std::string::npos);

    json unknown = tiny_pretrain();
    unknown["learning_rate"] = 0.1;
    const auto o2 = run({"pretrain", "--config", write_json(d / "u.json", unknown).string(), "--out",
                         (d / "out2").string()});
    CHECK(o2.code == 1);
    CHECK(o2.err.find("learning_rate") != std::string::npos);

    CHECK(run({"pretrain", "--config", (d / "missing.json").string(), "--out", (d / "o3").string()}).code == 1);
    CHECK(run({"pretrain", "--config", write_json(d / "t.json", tiny_pretrain()).string(), "--out",
               (d / "o4").string(), "--mask-ratio", "1.5"})
              .code == 1);
    CHECK(run({"probe", "--out", (d / "o5").string()}).code == 1);  // no checkpoint
  }

  TEST_CASE("unknown flags and subcommands exit 1 with usage") {
    const fs::path d = scratch("usage");
    auto o = run({"pretrain", "--bogus", "--out", d.string()});
    CHECK(o.code == 1);
    CHECK(o.err.find("Usage") != std::string::npos);
    CHECK(run({"frobnicate"}).code == 1);
    CHECK(run({}).code == 1);
    CHECK(run({"gen"}).code == 1);  // --out missing
    CHECK(run({"pretrain", "--feature", "sift", "--out", d.string()}).code == 1);
  }

  TEST_CASE("pretrain, probe and attn produce their tables") {
    const fs::path d = scratch("pipeline");
    const auto pre = write_json(d / "pre.json", tiny_pretrain());
    REQUIRE(run({"pretrain", "--config", pre.string(), "--out", (d / "pre").string(), "--seed", "5"}).code == 0);
    const auto log = lines(d / "pre" / "runlog.csv");
    REQUIRE(log.size() == 3);
    CHECK(log[0] == "epoch,loss,lr,seconds,pred_variance");
    CHECK(fs::exists(d / "pre" / "checkpoint" / "manifest.json"));
    CHECK(fs::exists(d / "pre" / "checkpoint" / "tensors.bin"));
    const auto m = manifest(d / "pre");
    CHECK(m["seed"] == 5);
    CHECK(m["config"]["embed_dim"] == 16);
    CHECK(m["config"]["corpus_size"] == 10);

    const auto pro = write_json(d / "probe.json", tiny_probe());
    REQUIRE(run({"probe", "--config", pro.string(), "--checkpoint", (d / "pre" / "checkpoint").string(), "--out",
                 (d / "probe").string(), "--shots", "2,3", "--repeats", "2", "--seed", "5"})
                .code == 0);
    const auto metrics = lines(d / "probe" / "metrics.csv");
    REQUIRE(metrics.size() == 5);
    CHECK(metrics[0] == "shots,repeat,seed,mode,accuracy");
    CHECK(split_csv(metrics[1])[0] == "2");
    CHECK(split_csv(metrics[1])[3] == "linear");
    CHECK(split_csv(metrics[4])[0] == "3");
    CHECK(manifest(d / "probe")["inputs"]["checkpoint"] == content_hash(d / "pre" / "checkpoint"));

    REQUIRE(run({"attn", "--checkpoint", (d / "pre" / "checkpoint").string(), "--out", (d / "attn").string(),
                 "--config", write_json(d / "a.json", {{"image_size", 32}, {"size_min", 8}, {"size_max", 16}, {"num_images", 3}}).string()})
                .code == 0);
    const auto attn = lines(d / "attn" / "attn.csv");
    CHECK(attn[0] == "layer,head,mean_distance_px");
    CHECK(attn.size() == 1 + 1 * 2);  // encoder depth x heads
  }

  TEST_CASE("non-finite training exits 2") {
    const fs::path d = scratch("diverge");
    json cfg = tiny_pretrain();
    cfg["base_lr"] = 1e30;
    cfg["epochs"] = 3;
    const auto o = run({"pretrain", "--config", write_json(d / "c.json", cfg).string(), "--out",
                        (d / "out").string()});
    CHECK(o.code == 2);
    CHECK(fs::exists(d / "out" / "divergence.json"));
    CHECK(manifest(d / "out")["status"].get<std::string>().rfind("diverged", 0) == 0);
  }

  TEST_CASE("sweep validation") {
    const fs::path d = scratch("sweep_bad");
    CHECK(run({"sweep", "--config", write_json(d / "a.json", {{"axes", json::object()}}).string(), "--out",
               (d / "o1").string()})
              .code == 1);
    CHECK(run({"sweep", "--config", write_json(d / "b.json", {{"axes", {{"heads", {2, 4}}}}}).string(), "--out",
               (d / "o2").string()})
              .code == 1);
    CHECK(run({"sweep", "--config", write_json(d / "c.json", json::object()).string(), "--out",
               (d / "o3").string()})
              .code == 1);
    CHECK_THROWS_AS(sweep_grid(json::object(), PretrainConfig{}), ValidationError);
    const auto g = sweep_grid(json{{"model_size", {"tiny", "small"}}, {"epochs", {1, 2, 3}}}, PretrainConfig{});
    CHECK(g.size() == 6);
    CHECK(g[1].model_size == "tiny");
    CHECK(g[1].epochs == 2);
    CHECK_THROWS_AS(model_preset("huge"), ValidationError);
  }

  TEST_CASE("dataset-fraction sweep logs three corpus sizes") {
    const fs::path d = scratch("sweep_frac");
    json pre = tiny_pretrain();
    json probe = tiny_probe();
    for (const char* k : {"image_size", "size_min", "size_max"}) {
      pre.erase(k);
      probe.erase(k);
    }
    pre["corpus_size"] = 20;
    const json cfg{{"axes", {{"dataset_fraction", {0.25, 0.5, 1.0}}}},
                   {"pretrain", pre},
                   {"probe", probe},
                   {"scene", {{"image_size", 32}, {"size_min", 8}, {"size_max", 16}}},
                   {"seed", 4}};
    REQUIRE(run({"sweep", "--config", write_json(d / "s.json", cfg).string(), "--out", (d / "out").string(),
                 "--shots", "2", "--repeats", "2"})
                .code == 0);
    const auto rows = lines(d / "out" / "sweep.csv");
    REQUIRE(rows.size() == 4);
    CHECK(rows[0] ==
          "point,dataset_fraction,model_size,epochs,corpus_size,shots,accuracy_mean,accuracy_std,status,message");
    std::vector<std::string> sizes;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto cols = split_csv(rows[i]);
      CHECK(cols[8] == "ok");
      sizes.push_back(cols[4]);
    }
    CHECK(sizes == std::vector<std::string>{"5", "10", "20"});
    for (int i = 0; i < 3; ++i) CHECK(fs::exists(d / "out" / ("point_00" + std::to_string(i)) / "run_manifest.json"));
    CHECK(fs::exists(d / "out" / "run_manifest.json"));
  }

  TEST_CASE("single-point sweep equals a direct pretrain and probe") {
    const fs::path d = scratch("sweep_single");
    json pre = tiny_pretrain();
    json probe = tiny_probe();
    const json cfg{{"axes", {{"epochs", {2}}}}, {"pretrain", pre}, {"probe", probe}, {"seed", 11}};
    REQUIRE(run({"sweep", "--config", write_json(d / "s.json", cfg).string(), "--out", (d / "sweep").string(),
                 "--shots", "3", "--repeats", "3"})
                .code == 0);
    const auto row = split_csv(lines(d / "sweep" / "sweep.csv").at(1));
    REQUIRE(row[8] == "ok");

    REQUIRE(run({"pretrain", "--config", write_json(d / "p.json", pre).string(), "--out", (d / "pre").string(),
                 "--seed", "11"})
                .code == 0);
    REQUIRE(run({"probe", "--config", write_json(d / "q.json", probe).string(), "--checkpoint",
                 (d / "pre" / "checkpoint").string(), "--out", (d / "probe").string(), "--shots", "3", "--repeats",
                 "3", "--seed", "11"})
                .code == 0);
    const auto summary = split_csv(lines(d / "probe" / "summary.csv").at(1));
    CHECK(std::abs(std::stod(row[6]) - std::stod(summary[1])) <= 1e-9);
    CHECK(std::abs(std::stod(row[7]) - std::stod(summary[2])) <= 1e-9);
    CHECK(slurp(d / "sweep" / "point_000" / "checkpoint" / "tensors.bin") ==
          slurp(d / "pre" / "checkpoint" / "tensors.bin"));
  }

  TEST_CASE("parallel sweep matches sequential") {
    const fs::path d = scratch("sweep_parallel");
    const json cfg{{"axes", {{"epochs", {2, 3}}}}, {"pretrain", tiny_pretrain()}, {"probe", tiny_probe()},
                   {"seed", 2}};
    const auto c = write_json(d / "s.json", cfg);
    REQUIRE(run({"sweep", "--config", c.string(), "--out", (d / "seq").string(), "--shots", "2", "--repeats", "2"})
                .code == 0);
    REQUIRE(run({"sweep", "--config", c.string(), "--out", (d / "par").string(), "--shots", "2", "--repeats", "2",
                 "--parallel"})
                .code == 0);
    CHECK(slurp(d / "seq" / "sweep.csv") == slurp(d / "par" / "sweep.csv"));
    for (const char* p : {"point_000", "point_001"})
      CHECK(slurp(d / "seq" / p / "checkpoint" / "tensors.bin") == slurp(d / "par" / p / "checkpoint" / "tensors.bin"));
  }

  TEST_CASE("a failing sweep point is recorded and the sweep continues") {
    const fs::path d = scratch("sweep_fail");
    json pre = tiny_pretrain();
    pre["epochs"] = 3;
    pre["warmup_epochs"] = 2;
    const json cfg{{"axes", {{"epochs", {1, 3}}}}, {"pretrain", pre}, {"probe", tiny_probe()}};
    REQUIRE(run({"sweep", "--config", write_json(d / "s.json", cfg).string(), "--out", (d / "out").string(),
                 "--shots", "2", "--repeats", "1"})
                .code == 0);
    const auto rows = lines(d / "out" / "sweep.csv");
    REQUIRE(rows.size() == 3);
    CHECK(split_csv(rows[1])[8] == "failed");
    CHECK(rows[1].find("warmup_epochs") != std::string::npos);
    CHECK(split_csv(rows[2])[8] == "ok");
  }
}

TEST_SUITE("cli") {
  TEST_CASE("flags override the config file") {
    const fs::path d = scratch("precedence");
    const auto cfg =
        write_json(d / "c.json", {{"count", 5}, {"image_size", 32}, {"size_min", 8}, {"size_max", 16}, {"seed", 1}});
    REQUIRE(run({"gen", "--config", cfg.string(), "--out", (d / "a").string()}).code == 0);
    CHECK(manifest(d / "a")["seed"] == 1);
    REQUIRE(run({"gen", "--config", cfg.string(), "--out", (d / "b").string(), "--seed", "2"}).code == 0);
    CHECK(manifest(d / "b")["seed"] == 2);
    CHECK(content_hash(d / "a" / "train") != content_hash(d / "b" / "train"));
    REQUIRE(run({"gen", "--config", cfg.string(), "--out", (d / "c").string(), "--seed", "1"}).code == 0);
    CHECK(content_hash(d / "a" / "train") == content_hash(d / "c" / "train"));
  }
}
