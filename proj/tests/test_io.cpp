#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fsdv/error.hpp"
#include "fsdv/pipeline.hpp"

using namespace fsdv;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fsdv_io_test_" + name);
  fs::remove_all(p);
  return p;
}

synth::DatasetConfig small_config() {
  synth::DatasetConfig c;
  c.base_scenes = 40;
  c.pool_scenes = 60;
  c.test_scenes = 6;
  c.points_per_cloud = 128;
  return c;
}

const synth::Dataset& dataset() {
  static const synth::Dataset ds = synth::generate_dataset(small_config(), 1);
  return ds;
}

cfg::RunConfig tiny_run() {
  cfg::RunConfig run;
  run.dataset = small_config();
  run.detector.widths = {8, 8, 16, 16};
  run.detector.head_hidden = 16;
  run.viewpoint.widths = {8, 8, 16, 16};
  run.viewpoint.crop_size = 32;
  run.viewpoint.point_hidden = 16;
  run.viewpoint.predictor_hidden = {32, 32};
  for (auto task : {train::Task::kDetection, train::Task::kViewpoint}) {
    for (auto phase : {synth::Phase::kBase, synth::Phase::kFinetune}) {
      auto& c = run.phase_config(task, phase);
      c.epochs = 1;
      c.max_steps = phase == synth::Phase::kBase ? 3 : 0;
      c.pool_size = 5;
    }
  }
  return run;
}

}  // namespace

TEST(Dataset, DiskRoundTripAndStableHash) {
  const auto& ds = dataset();
  const auto a = scratch("ds_a"), b = scratch("ds_b");
  const std::string ha = io::write_dataset(ds, a);
  EXPECT_EQ(io::write_dataset(synth::generate_dataset(small_config(), 3), b), ha);
  EXPECT_EQ(io::dataset_manifest_hash(a), ha);

  const auto back = io::read_dataset(a);
  EXPECT_EQ(back.base_classes, ds.base_classes);
  EXPECT_EQ(back.novel_classes, ds.novel_classes);
  ASSERT_EQ(back.splits.size(), ds.splits.size());
  for (const auto& [name, scenes] : ds.splits) {
    const auto& other = back.split(name);
    ASSERT_EQ(other.size(), scenes.size()) << name;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      ASSERT_EQ(other[i].objects.size(), scenes[i].objects.size());
      for (std::size_t o = 0; o < scenes[i].objects.size(); ++o) {
        const auto &x = scenes[i].objects[o], &y = other[i].objects[o];
        EXPECT_EQ(x.cls, y.cls);
        EXPECT_EQ(x.box, y.box);
        EXPECT_EQ(x.viewpoint, y.viewpoint);
      }
      ASSERT_EQ(other[i].image, scenes[i].image);
    }
  }
  ASSERT_EQ(back.point_clouds.size(), ds.point_clouds.size());
  for (std::size_t i = 0; i < ds.point_clouds.size(); ++i) {
    ASSERT_EQ(back.point_clouds[i].points.size(), ds.point_clouds[i].points.size());
    for (std::size_t p = 0; p < ds.point_clouds[i].points.size(); ++p)
      ASSERT_LT((back.point_clouds[i].points[p] - ds.point_clouds[i].points[p]).norm(), 1e-9);
  }
  fs::remove_all(b);

  // A tampered file fails digest verification.
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.path().extension() == ".ppm") {
      std::fstream f(e.path(), std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(-1, std::ios::end);
      f.put('\x7f');
      break;
    }
  }
  EXPECT_THROW(io::read_dataset(a), IoError);
  fs::remove_all(a);
}

TEST(Config, UnknownKeysRejectedByName) {
  auto j = io::to_json(synth::DatasetConfig{});
  EXPECT_NO_THROW(io::dataset_config_from_json(j));
  j["bogus_key"] = 1;
  try {
    io::dataset_config_from_json(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bogus_key"), std::string::npos);
  }
  auto r = cfg::to_json(tiny_run());
  EXPECT_EQ(cfg::to_json(cfg::run_config_from_json(r)), r);
  r["train"]["detection_base"]["learning_rate_typo"] = 0.1;
  try {
    cfg::run_config_from_json(r);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate_typo"), std::string::npos);
  }
}

TEST(Config, ModelConfigsRoundTrip) {
  const auto run = tiny_run();
  EXPECT_EQ(det::architecture_hash(cfg::detector_config_from_json(cfg::to_json(run.detector))),
            det::architecture_hash(run.detector));
  EXPECT_EQ(vp::architecture_hash(cfg::viewpoint_config_from_json(cfg::to_json(run.viewpoint))),
            vp::architecture_hash(run.viewpoint));
  const auto t = run.detection_base;
  EXPECT_EQ(cfg::to_json(cfg::train_config_from_json(cfg::to_json(t), {})), cfg::to_json(t));
}

TEST(Archive, BitwiseRoundTrip) {
  det::DetectorNet<float> net(tiny_run().detector, 5);
  const auto path = scratch("archive") / "params.bin";
  const auto a = net.params().export_archive();
  io::write_archive(a, path);
  const auto b = io::read_archive(path);
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, t] : a) {
    EXPECT_EQ(b.at(name).shape(), t.shape()) << name;
    EXPECT_EQ(b.at(name).values(), t.values()) << name;
  }
  fs::remove_all(path.parent_path());
  EXPECT_THROW(io::read_archive(path), IoError);
}

TEST(Checkpoint, SaveLoadAndRegistryDiff) {
  const auto& ds = dataset();
  auto run = tiny_run();
  const auto base = pipe::train_base(ds, "hash", train::Task::kDetection, run, run.detection_base);
  const auto dir = scratch("ckpt");
  ckpt::save_checkpoint(base.checkpoint, dir);
  const auto back = ckpt::load_checkpoint(dir);
  EXPECT_EQ(back.architecture_hash, base.checkpoint.architecture_hash);
  EXPECT_EQ(back.classes, base.checkpoint.classes);
  EXPECT_EQ(back.class_features, base.checkpoint.class_features);
  for (const auto& [name, t] : base.checkpoint.params) EXPECT_EQ(back.params.at(name).values(), t.values());

  auto registry = ds.classes;
  registry[2].name = "renamed";
  registry[5].symmetric = !registry[5].symmetric;
  try {
    ckpt::check_registry(back, registry);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("renamed"), std::string::npos) << msg;
    EXPECT_NE(msg.find(ds.classes[5].name), std::string::npos) << msg;
  }
  EXPECT_THROW(ckpt::load_viewpoint<float>(back), ConfigError);
  fs::remove_all(dir / "params.bin");
  EXPECT_THROW(ckpt::load_checkpoint(dir), IoError);
  fs::remove_all(dir);
}

TEST(ClassFeatures, RecomputedFromCheckpointMatchStored) {
  const auto& ds = dataset();
  auto run = tiny_run();
  for (auto task : {train::Task::kDetection, train::Task::kViewpoint}) {
    const auto base = pipe::train_base(ds, "hash", task, run, run.phase_config(task, synth::Phase::kBase));
    for (int k : {1, 3}) {
      auto fc = run.phase_config(task, synth::Phase::kFinetune);
      fc.shots = k;
      fc.seed = 11;
      const auto ft = pipe::finetune(ds, "hash", base.checkpoint, fc);
      const auto dir = scratch("features");
      ckpt::save_checkpoint(ft.checkpoint, dir);
      const auto loaded = ckpt::load_checkpoint(dir);
      fs::remove_all(dir);
      const auto again = pipe::recompute_class_features(ds, loaded);
      ASSERT_EQ(again.size(), loaded.class_features.size());
      for (const auto& [cls, f] : loaded.class_features) {
        ASSERT_EQ(again.at(cls).size(), f.size());
        for (std::size_t j = 0; j < f.size(); ++j) ASSERT_NEAR(again.at(cls)[j], f[j], 1e-9);
      }
      if (task == train::Task::kDetection) {
        const auto audit = pipe::audit_json(ft.log, ft.episode, ds);
        for (const auto& [name, entry] : audit["class_data"].items()) EXPECT_EQ(entry["count"], k) << name;
        for (const auto& [name, entry] : audit["supervised"].items()) EXPECT_EQ(entry["count"], k) << name;
        if (k == 1) {
          const auto net = ckpt::load_detector<float>(loaded);
          const auto& scenes = ds.split(ft.episode.split);
          for (const auto& [cls, pool] : ft.episode.class_pool) {
            ASSERT_EQ(pool.size(), 1u);
            EXPECT_EQ(loaded.class_features.at(cls),
                      det::encode_class_detection(
                          net, synth::build_detection_class_data(scenes[pool[0].scene], pool[0].object)));
          }
        }
      }
    }
  }
}

TEST(Checkpoint, FinetuneRefusesMismatchedRegistry) {
  const auto& ds = dataset();
  auto run = tiny_run();
  auto base = pipe::train_base(ds, "hash", train::Task::kViewpoint, run, run.viewpoint_base);
  base.checkpoint.registry[0].name = "other";
  EXPECT_THROW(pipe::finetune(ds, "hash", base.checkpoint, run.viewpoint_finetune), ConfigError);
}
