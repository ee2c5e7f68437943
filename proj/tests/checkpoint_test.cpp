#include <cmath>
#include <fstream>

#include "clinfuse/error.hpp"
#include "clinfuse/model_check.hpp"
#include "clinfuse/training.hpp"
#include "helpers.hpp"

using namespace clinfuse;
namespace fs = std::filesystem;

namespace {

TrainingState trained_state(int epochs, std::uint64_t seed = 0) {
  const Dataset data = overfit_fixture(seed);
  TrainConfig cfg = overfit_train_config(seed);
  cfg.epochs = epochs;
  TrainingState st = make_training_state(tiny_model_config(), cfg);
  // Exercise two Adam steps per epoch.
  cfg.batch_size = 4;
  train(st, data, cfg);
  st.stats = data.stats;
  return st;
}

void check_same(TrainingState& a, TrainingState& b) {
  const auto pa = named_parameters(a.params), pb = named_parameters(b.params);
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].tensor.value() == pb[i].tensor.value());
    CHECK(pb[i].tensor.requires_grad());
  }
  const auto ba = named_buffers(a.params), bb = named_buffers(b.params);
  REQUIRE(ba.size() == bb.size());
  for (std::size_t i = 0; i < ba.size(); ++i) {
    CHECK(ba[i].stats->mean == bb[i].stats->mean);
    CHECK(ba[i].stats->var == bb[i].stats->var);
  }
  REQUIRE(a.optimizer.m.size() == b.optimizer.m.size());
  for (std::size_t i = 0; i < a.optimizer.m.size(); ++i) {
    CHECK(a.optimizer.m[i] == b.optimizer.m[i]);
    CHECK(a.optimizer.v[i] == b.optimizer.v[i]);
  }
  CHECK(a.optimizer.step == b.optimizer.step);
  CHECK(a.epochs_done == b.epochs_done);
  CHECK(a.shuffle_rng == b.shuffle_rng);
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].mean_loss == b.log[i].mean_loss);
    CHECK(a.log[i].train_accuracy == b.log[i].train_accuracy);
    CHECK(a.log[i].wall_seconds == b.log[i].wall_seconds);
    CHECK(a.log[i].step == b.log[i].step);
  }
}

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("save then load restores the state exactly") {
  testing::TempDir tmp("ckpt_roundtrip");
  TrainingState st = trained_state(3);
  checkpoint_save(st, tmp.path() / "model.ckpt");
  CHECK(fs::exists(tmp.path() / "model.ckpt" / "manifest.txt"));
  CHECK(fs::exists(tmp.path() / "model.ckpt" / "tensors.bin"));
  CHECK_FALSE(fs::exists(tmp.path() / "model.ckpt.partial"));
  TrainingState back = checkpoint_load(tmp.path() / "model.ckpt", st.model);
  check_same(st, back);
  REQUIRE(back.stats.has_value());
  CHECK(back.stats->mean == st.stats->mean);
  CHECK(back.stats->stddev == st.stats->stddev);
  CHECK(back.stats->image_min == st.stats->image_min);
  CHECK(back.stats->image_max == st.stats->image_max);
  CHECK(variant_name(back.model.variant) == variant_name(st.model.variant));
}

TEST_CASE("a fresh state without optimizer moments round-trips") {
  testing::TempDir tmp("ckpt_fresh");
  TrainingState st = make_training_state(tiny_model_config(ModelVariant::ImageOnly), overfit_train_config());
  checkpoint_save(st, tmp.path() / "c");
  TrainingState back = checkpoint_load(tmp.path() / "c");
  check_same(st, back);
  CHECK_FALSE(back.stats.has_value());
  CHECK(back.model.variant == ModelVariant::ImageOnly);
}

TEST_CASE("saving over an existing checkpoint replaces it") {
  testing::TempDir tmp("ckpt_replace");
  const fs::path dir = tmp.path() / "c";
  checkpoint_save(trained_state(1), dir);
  TrainingState later = trained_state(2);
  checkpoint_save(later, dir);
  TrainingState back = checkpoint_load(dir);
  CHECK(back.epochs_done == 2);
  check_same(later, back);
  CHECK_FALSE(fs::exists(tmp.path() / "c.old"));
}

TEST_CASE("resuming from epoch k reproduces the uninterrupted run") {
  testing::TempDir tmp("ckpt_resume");
  const Dataset data = overfit_fixture(5);
  TrainConfig cfg = overfit_train_config(5);
  cfg.epochs = 8;
  cfg.batch_size = 3;
  cfg.checkpoint_every = 3;
  const ModelConfig model = tiny_model_config();

  TrainingState straight = make_training_state(model, cfg);
  std::vector<int> saves;
  train(straight, data, cfg, {{}, [&](const TrainingState& s) {
                                saves.push_back(s.epochs_done);
                                if (s.epochs_done == 3) checkpoint_save(s, tmp.path() / "at3");
                              }});
  CHECK(saves == std::vector<int>{3, 6, 8});

  TrainingState resumed = checkpoint_load(tmp.path() / "at3", model);
  CHECK(resumed.epochs_done == 3);
  train(resumed, data, cfg);
  REQUIRE(resumed.log.size() == straight.log.size());
  for (std::size_t i = 0; i < straight.log.size(); ++i) {
    INFO("epoch " << i + 1);
    CHECK(std::abs(resumed.log[i].mean_loss - straight.log[i].mean_loss) <= 1e-12);
    CHECK(resumed.log[i].step == straight.log[i].step);
  }
  const auto a = named_parameters(straight.params), b = named_parameters(resumed.params);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].tensor.value() == b[i].tensor.value());
}

TEST_CASE("loading rejects a different model") {
  testing::TempDir tmp("ckpt_variant");
  checkpoint_save(make_training_state(tiny_model_config(ModelVariant::FullModel), overfit_train_config()),
                  tmp.path() / "c");
  try {
    checkpoint_load(tmp.path() / "c", tiny_model_config(ModelVariant::ImageOnly));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("'full'") != std::string::npos);
    CHECK(msg.find("'image-only'") != std::string::npos);
  }
  ModelConfig wider = tiny_model_config();
  wider.clinical_hidden = 12;
  CHECK_THROWS_AS(checkpoint_load(tmp.path() / "c", wider), ConfigError);
}

TEST_CASE("damaged checkpoints are reported") {
  testing::TempDir tmp("ckpt_damage");
  const fs::path dir = tmp.path() / "c";
  checkpoint_save(trained_state(1), dir);
  const auto bin = dir / "tensors.bin";
  const auto manifest = dir / "manifest.txt";
  std::string manifest_text;
  {
    std::ifstream in(manifest);
    manifest_text.assign(std::istreambuf_iterator<char>(in), {});
  }

  SUBCASE("truncated tensor file") {
    fs::resize_file(bin, fs::file_size(bin) / 2);
    CHECK_THROWS_AS(checkpoint_load(dir), FormatError);
  }
  SUBCASE("truncated manifest") {
    std::ofstream(manifest) << manifest_text.substr(0, manifest_text.size() / 2);
    CHECK_THROWS_AS(checkpoint_load(dir), FormatError);
  }
  SUBCASE("missing tensor file") {
    fs::remove(bin);
    CHECK_THROWS_AS(checkpoint_load(dir), FormatError);
  }
  SUBCASE("shape disagreement") {
    const auto pos = manifest_text.find("tensor param/head.weight 2x");
    REQUIRE(pos != std::string::npos);
    std::string edited = manifest_text;
    edited.replace(pos, std::string("tensor param/head.weight 2x").size(), "tensor param/head.weight 3x");
    std::ofstream(manifest) << edited;
    CHECK_THROWS_AS(checkpoint_load(dir), FormatError);
  }
  SUBCASE("corrupted blob magic") {
    std::fstream f(bin, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_AS(checkpoint_load(dir), FormatError);
  }
  SUBCASE("missing directory") { CHECK_THROWS_AS(checkpoint_load(tmp.path() / "nope"), FormatError); }
}

}  // TEST_SUITE
