#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "sarjepa/checkpoint.hpp"
#include "sarjepa/dataset.hpp"
#include "sarjepa/errors.hpp"
#include "sarjepa/loss.hpp"
#include "sarjepa/trainer.hpp"

using namespace sarjepa;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.embed_dim = 32;
  m.heads = 2;
  m.encoder_depth = 1;
  m.predictor_depth = 1;
  m.mlp_ratio = 2;
  return m;
}

PretrainConfig quick_config() {
  PretrainConfig c;
  c.epochs = 2;
  c.warmup_epochs = 1;
  c.batch_size = 4;
  c.windows_per_image = 2;
  c.seed = 11;
  c.checkpoint_every = 1;
  return c;
}

std::vector<SarImage> small_corpus(int n, std::uint64_t seed = 3) { return generate_corpus(SceneSpec{}, n, seed).images; }

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sarjepa_trainer_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("warmup must be shorter than the run") {
    PretrainConfig c;
    c.epochs = 5;
    c.warmup_epochs = 5;
    try {
      c.validate();
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("warmup_epochs") != std::string::npos);
    }
    c.warmup_epochs = 4;
    CHECK_NOTHROW(c.validate());
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
  }

  TEST_CASE("config json round trip") {
    PretrainConfig c;
    c.base_lr = 2e-3;
    c.feature = FeatureKind::SarHog;
    c.bank.scales = {3, 7};
    c.mask_mode = MaskMode::Global;
    c.mask_ratio = 0.5;
    c.seed = 1234567890123ULL;
    const PretrainConfig d = pretrain_config_from_json(to_json(c));
    CHECK(to_json(d) == to_json(c));
    CHECK_THROWS_AS(pretrain_config_from_json(nlohmann::json{{"epochs", "many"}}), ValidationError);
    CHECK_THROWS_AS(pretrain_config_from_json(nlohmann::json{{"feature", "sift"}}), ValidationError);
  }

  TEST_CASE("paper-faithful schedule and lr scaling") {
    PretrainConfig c;
    CHECK(c.peak_lr() == doctest::Approx(1e-3 * 32 / 256.0));
    c.paper_faithful = true;
    const auto r = c.resolved();
    CHECK(r.epochs == 200);
    CHECK(r.warmup_epochs == 20);
    CHECK(r.batch_size == 300);
    CHECK(r.beta2 == 0.95);
  }

  TEST_CASE("patchify standardizes and keeps raster order") {
    Plane p(16, 16);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) p(y, x) = 1.0 + y * 16 + x;
    const Mat<float> rows = patchify(SarImage(p), 8);
    REQUIRE(rows.rows() == 4);
    REQUIRE(rows.cols() == 64);
    CHECK(std::abs(rows.cast<double>().mean()) < 1e-6);
    CHECK(rows(1, 0) > rows(0, 7));  // patch (0,1) starts at column 8
    CHECK(rows(2, 0) > rows(1, 63));
    CHECK_THROWS_AS(patchify(SarImage(12, 12, 1.0), 8), ValidationError);
  }

  TEST_CASE("prepared samples align pixels, targets and masks") {
    const auto img = small_corpus(1).front();
    PretrainConfig c;
    c.aug = AugConfig::identity();
    const ModelConfig m = resolve_model_config(ModelConfig{}, c, 64);
    CHECK(m.target_dim == 256);
    const PreparedSample s = prepare_sample(img, c, m, 99);
    REQUIRE(s.plan.windows.size() == 4);
    CHECK(s.pixels.rows() == 64);
    CHECK(std::count(s.masked.begin(), s.masked.end(), true) == 48);
    const PatchTargets pt = patch_targets(compute_target(img, c.feature, c.bank, 8), 8);
    const Mat<float> pix = patchify(img, 8, m.log_input);
    const auto& w = s.plan.windows[2];
    for (int i = 0; i < w.size(); ++i) {
      const int g = w.grid_index(i, 8);
      CHECK((s.targets.row(32 + i) - pt.vectors.row(g).cast<float>()).norm() == 0.0f);
      CHECK((s.pixels.row(32 + i) - pix.row(g)).norm() == 0.0f);
    }
  }

  TEST_CASE("global mode uses one full-grid window") {
    PretrainConfig c;
    c.mask_mode = MaskMode::Global;
    const ModelConfig m = resolve_model_config(ModelConfig{}, c, 64);
    CHECK(m.window == 8);
    const PreparedSample s = prepare_sample(small_corpus(1).front(), c, m, 5);
    CHECK(s.plan.windows.size() == 1);
    CHECK(s.pixels.rows() == 64);
  }

  TEST_CASE("identical images with identical seeds give identical losses") {
    const auto img = small_corpus(1).front();
    PretrainConfig c;
    const ModelConfig m = resolve_model_config(small_model(), c, 64);
    const auto state = ModelState<float>::initialize(m, 8);
    std::vector<PreparedSample> samples;
    for (int i = 0; i < 4; ++i) samples.push_back(prepare_sample(img, c, m, 77));
    const auto losses = per_image_losses(state, make_batch(samples), false);
    REQUIRE(losses.size() == 4);
    for (double l : losses) CHECK(std::abs(l - losses.front()) <= 1e-7);
  }

  TEST_CASE("collapse diagnostic") {
    PretrainConfig c;
    const ModelConfig m = resolve_model_config(ModelConfig{}, c, 64);
    auto state = ModelState<float>::initialize(m, 21);
    const auto imgs = small_corpus(8, 40);
    std::vector<PreparedSample> samples;
    for (std::size_t i = 0; i < imgs.size(); ++i) samples.push_back(prepare_sample(imgs[i], c, m, 300 + i));
    const double fresh = collapse_diagnostic(state, make_batch(samples));
    CHECK(fresh > kCollapseThreshold);

    std::reverse(samples.begin(), samples.end());
    const double reversed = collapse_diagnostic(state, make_batch(samples));
    CHECK(std::abs(reversed - fresh) <= 1e-6 * fresh);

    state.head_w.setZero();
    CHECK(collapse_diagnostic(state, make_batch(samples)) == 0.0);
  }

  TEST_CASE("no-mask mode trains on all positions") {
    PretrainConfig c = quick_config();
    c.mask_ratio = 0.0;
    c.epochs = 1;
    c.warmup_epochs = 0;
    const auto res = pretrain(small_corpus(8), c, small_model());
    REQUIRE(res.log.epochs.size() == 1);
    CHECK(std::isfinite(res.log.epochs[0].loss));
    CHECK(res.log.epochs[0].loss > 0.0);
  }

  TEST_CASE("ratio that masks nothing is rejected in masked mode") {
    PretrainConfig c = quick_config();
    c.mask_ratio = 0.01;
    CHECK_THROWS_AS(pretrain(small_corpus(4), c, small_model()), ValidationError);
    CHECK_THROWS_AS(pretrain({}, quick_config(), small_model()), ValidationError);
  }

  TEST_CASE("runs are reproducible and write their artifacts") {
    const auto corpus = small_corpus(10);
    const fs::path a = scratch("a"), b = scratch("b");
    PretrainOptions oa, ob;
    oa.out_dir = a;
    ob.out_dir = b;
    int seen = 0;
    oa.on_epoch = [&](const EpochRecord& r) { CHECK(r.epoch == ++seen); };
    const auto ra = pretrain(corpus, quick_config(), small_model(), oa);
    const auto rb = pretrain(corpus, quick_config(), small_model(), ob);
    CHECK(seen == 2);
    CHECK(ra.steps == 6);
    CHECK(state_hash(ra.state) == state_hash(rb.state));
    REQUIRE(ra.log.epochs.size() == rb.log.epochs.size());
    for (std::size_t i = 0; i < ra.log.epochs.size(); ++i) {
      CHECK(ra.log.epochs[i].loss == rb.log.epochs[i].loss);
      CHECK(ra.log.epochs[i].lr == rb.log.epochs[i].lr);
      CHECK(ra.log.epochs[i].pred_variance == rb.log.epochs[i].pred_variance);
    }
    CHECK(slurp(a / "checkpoint" / "tensors.bin") == slurp(b / "checkpoint" / "tensors.bin"));
    CHECK(fs::exists(a / "checkpoints" / "epoch_0001" / "manifest.json"));
    const std::string log = slurp(a / "runlog.csv");
    CHECK(log.rfind("epoch,loss,lr,seconds,pred_variance\n", 0) == 0);
    CHECK(std::count(log.begin(), log.end(), '\n') == 3);

    const auto loaded = load_checkpoint(a / "checkpoint");
    CHECK(state_hash(loaded.state) == state_hash(ra.state));
    CHECK(loaded.meta.global_step == 6);

    auto other = quick_config();
    other.seed = 12;
    CHECK(state_hash(pretrain(corpus, other, small_model()).state) != state_hash(ra.state));
    fs::remove_all(a);
    fs::remove_all(b);
  }
}
