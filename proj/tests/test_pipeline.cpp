#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "act/pipeline.hpp"

using act::CheckpointMeta;
using act::ConfigError;
using act::ConfigFile;
using act::IoError;
using act::OptimizerMoments;
using act::RunConfig;

namespace fs = std::filesystem;

namespace {

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  EXPECT_TRUE(in.good()) << path;
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Fresh scratch directory per test, removed on destruction.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("act_pipe_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& name = "") const {
    return name.empty() ? path.string() : (path / name).string();
  }
};

// Small-everything config for fast end-to-end runs.
RunConfig tiny_config(const TempDir& dir, uint64_t seed = 7) {
  RunConfig c = RunConfig::from_text("");
  c.data_dir = dir.str("data");
  c.out_dir = dir.str("out");
  c.seed = seed;
  c.n_per_class = 8;
  c.points = 96;
  c.teacher.width = 16;
  c.teacher.depth = 2;
  c.teacher.heads = 2;
  c.teacher.n_groups = 8;
  c.teacher.group_k = 8;
  c.teacher.token_k = 2;
  c.teacher.vocab = 16;
  c.teacher.grid = 2;
  c.teacher.prompt_len = 2;
  c.foundation_steps = 8;
  c.foundation_batch = 2;
  c.dvae_steps = 8;
  c.dvae_batch = 2;
  c.dvae_eval_every = 4;
  c.dvae_eval_samples = 3;
  c.student.width = 16;
  c.student.depth = 2;
  c.student.dec_depth = 1;
  c.student.heads = 2;
  c.student.n_groups = 8;
  c.student.group_k = 8;
  c.mpm_steps = 8;
  c.mpm_batch = 2;
  c.probe.epochs = 3;
  c.probe.batch = 8;
  return c;
}

}  // namespace

TEST(Config, DefaultsParseAndDigestIsStable) {
  auto a = RunConfig::from_text("");
  auto b = RunConfig::from_text(act::default_config_text());
  EXPECT_EQ(a.canonical_text(), b.canonical_text());
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_EQ(a.teacher.vocab, 512);
  EXPECT_EQ(a.mask.ratio, 0.75);
}

TEST(Config, ExplicitDefaultEqualsOmitted) {
  auto omitted = RunConfig::from_text("");
  auto spelled = RunConfig::from_text("[teacher]\nvocab = 512\nwidth = 96\n");
  EXPECT_EQ(omitted.digest(), spelled.digest());
}

TEST(Config, DigestChangesWithAnyMeaningfulField) {
  const auto base = RunConfig::from_text("").digest();
  EXPECT_NE(base, RunConfig::from_text("[teacher]\nvocab = 256\n").digest());
  EXPECT_NE(base, RunConfig::from_text("[run]\nseed = 2\n").digest());
  EXPECT_NE(base, RunConfig::from_text("[mpm-train]\nmask_ratio = 0.6\n").digest());
  EXPECT_NE(base, RunConfig::from_text("[student]\ntarget = coordinates\nmetric = chamfer_l1\n").digest());
}

TEST(Config, CommentsAndWhitespaceDoNotMatter) {
  auto plain = RunConfig::from_text("[teacher]\nvocab = 128\n");
  auto noisy = RunConfig::from_text(
      "# a comment\n\n[teacher]\n  vocab   =    128   # inline comment\n\n");
  EXPECT_EQ(plain.digest(), noisy.digest());
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(RunConfig::from_text("[teacher]\nvocab = 128\nvocab = 64\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("[teacher]\nnot_a_key = 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("[teacher]\nvocab = twelve\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("[student]\nnormalize_targets = yes\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("vocab 128\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("[mpm-train]\nmask_ratio = 1.5\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("[student]\ntarget = coordinates\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("[student]\nn_groups = 4\n"), ConfigError);
}

TEST(Config, SectionlessAndTypedGetters) {
  auto f = ConfigFile::parse_text("top = 3\n[s]\nflag = true\nrate = 0.5\nname = abc\n");
  EXPECT_EQ(f.get_i64("top", 0), 3);
  EXPECT_TRUE(f.get_bool("s.flag", false));
  EXPECT_DOUBLE_EQ(f.get_f64("s.rate", 0.0), 0.5);
  EXPECT_EQ(f.get_str("s.name", ""), "abc");
  EXPECT_EQ(f.get_i64("absent", 42), 42);
  EXPECT_NO_THROW(f.reject_unknown_keys());
}

TEST(Dataset, GenCountsAndSplitSizes) {
  TempDir dir("gen");
  auto res = act::gen_dataset(dir.str("d"), 8, 64, 1);
  EXPECT_EQ(res.files, 64);
  ASSERT_EQ(res.manifests.size(), 3u);
  // 70/15/15 with floors: 8 -> 5 train, 1 val, 2 test per class
  EXPECT_EQ(act::read_manifest(res.manifests[0]).size(), 40u);
  EXPECT_EQ(act::read_manifest(res.manifests[1]).size(), 8u);
  EXPECT_EQ(act::read_manifest(res.manifests[2]).size(), 16u);
}

TEST(Dataset, SameSeedIsByteIdentical) {
  TempDir dir("regen");
  act::gen_dataset(dir.str("a"), 3, 48, 11);
  act::gen_dataset(dir.str("b"), 3, 48, 11);
  int compared = 0;
  for (const auto& e : fs::directory_iterator(dir.str("a"))) {
    const auto name = e.path().filename().string();
    EXPECT_EQ(read_bytes(e.path().string()), read_bytes(dir.str("b") + "/" + name)) << name;
    ++compared;
  }
  EXPECT_EQ(compared, 3 * 8 + 3);
  auto other = act::gen_dataset(dir.str("c"), 3, 48, 12);
  EXPECT_NE(read_bytes(dir.str("a") + "/sphere_000.txt"),
            read_bytes(dir.str("c") + "/sphere_000.txt"));
}

TEST(Dataset, EveryFileRoundtripsWithLabel) {
  TempDir dir("round");
  act::gen_dataset(dir.str("d"), 2, 32, 5);
  for (const char* split : {"train.txt", "val.txt", "test.txt"}) {
    for (const auto& e : act::read_manifest(dir.str("d") + "/" + split)) {
      int64_t label = -1;
      auto cloud = act::load_cloud<float>(dir.str("d") + "/" + e.path, &label);
      EXPECT_EQ(cloud.size(), 32u);
      EXPECT_EQ(label, e.label);
      EXPECT_GE(label, 0);
      EXPECT_LT(label, 8);
    }
  }
}

TEST(Dataset, LoadSplitNormalizes) {
  TempDir dir("norm");
  act::gen_dataset(dir.str("d"), 2, 64, 3);
  auto ds = act::load_split<float>(dir.str("d") + "/train.txt");
  ASSERT_GT(ds.size(), 0);
  for (const auto& cloud : ds.clouds) {
    double cx = 0, cy = 0, cz = 0, r2max = 0;
    for (const auto& p : cloud) {
      cx += p[0];
      cy += p[1];
      cz += p[2];
    }
    cx /= cloud.size();
    cy /= cloud.size();
    cz /= cloud.size();
    for (const auto& p : cloud) {
      r2max = std::max(r2max, double(p[0]) * p[0] + double(p[1]) * p[1] + double(p[2]) * p[2]);
    }
    EXPECT_NEAR(cx, 0.0, 1e-5);
    EXPECT_NEAR(cy, 0.0, 1e-5);
    EXPECT_NEAR(cz, 0.0, 1e-5);
    EXPECT_NEAR(std::sqrt(r2max), 1.0, 1e-5);
  }
}

TEST(Dataset, MissingFilesError) {
  TempDir dir("missing");
  EXPECT_THROW(act::load_cloud<float>(dir.str("nope.txt")), IoError);
  EXPECT_THROW(act::load_split<float>(dir.str("nope_manifest.txt")), IoError);
  std::ofstream(dir.str("empty.txt")).close();
  EXPECT_THROW(act::load_cloud<float>(dir.str("empty.txt")), IoError);
}

namespace {

// Two-tensor toy store for serialization tests.
act::ParamStoreT<float> toy_store(uint64_t seed) {
  act::ParamStoreT<float> ps;
  act::Rng rng(seed);
  auto a = act::TensorT<float>::zeros({3, 4});
  auto b = act::TensorT<float>::zeros({5});
  act::fill_normal(a, rng, 1.0);
  act::fill_normal(b, rng, 1.0);
  ps.add("alpha.w", a);
  ps.add("beta.b", b);
  return ps;
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  TempDir dir("ckpt");
  auto ps = toy_store(1);
  CheckpointMeta meta;
  meta.step = 123;
  meta.config_digest = 0xabcdef0123456789ULL;
  meta.rng_state = 42;
  act::save_checkpoint(dir.str("a.ckpt"), ps, meta);

  auto ps2 = toy_store(2);
  auto got = act::load_checkpoint(dir.str("a.ckpt"), ps2);
  EXPECT_EQ(got.step, 123u);
  EXPECT_EQ(got.config_digest, 0xabcdef0123456789ULL);
  EXPECT_EQ(got.rng_state, 42u);
  for (size_t i = 0; i < ps.entries().size(); ++i) {
    EXPECT_EQ(ps.entries()[i].tensor.v(), ps2.entries()[i].tensor.v());
  }
  act::save_checkpoint(dir.str("b.ckpt"), ps2, got);
  EXPECT_EQ(read_bytes(dir.str("a.ckpt")), read_bytes(dir.str("b.ckpt")));
}

TEST(Checkpoint, MomentsRoundtrip) {
  TempDir dir("moments");
  auto ps = toy_store(3);
  act::AdamWT<float>::Options opt;
  opt.lr = 1e-2;
  act::AdamWT<float> adam(ps, opt);
  for (auto& e : ps.entries()) {
    for (auto& g : e.tensor.g()) g = 0.5f;
  }
  adam.step();
  adam.step();

  CheckpointMeta meta;
  auto moments = act::collect_moments(adam);
  act::save_checkpoint(dir.str("m.ckpt"), ps, meta, &moments);

  auto ps2 = toy_store(4);
  act::AdamWT<float> adam2(ps2, opt);
  OptimizerMoments loaded;
  act::load_checkpoint(dir.str("m.ckpt"), ps2, &loaded);
  act::restore_moments(adam2, loaded);
  EXPECT_EQ(adam2.step_count(), 2);

  // both optimizers must now evolve identically
  for (auto& e : ps.entries())
    for (auto& g : e.tensor.g()) g = -0.25f;
  for (auto& e : ps2.entries())
    for (auto& g : e.tensor.g()) g = -0.25f;
  adam.step();
  adam2.step();
  for (size_t i = 0; i < ps.entries().size(); ++i) {
    EXPECT_EQ(ps.entries()[i].tensor.v(), ps2.entries()[i].tensor.v());
  }
}

TEST(Checkpoint, CorruptHeaderIsFormatError) {
  TempDir dir("corrupt");
  auto ps = toy_store(5);
  act::save_checkpoint(dir.str("c.ckpt"), ps, CheckpointMeta{});

  auto bytes = read_bytes(dir.str("c.ckpt"));
  auto bad = bytes;
  bad[0] = 'X';
  std::ofstream(dir.str("bad_magic.ckpt"), std::ios::binary) << bad;
  EXPECT_THROW(act::load_checkpoint(dir.str("bad_magic.ckpt"), ps),
               act::CheckpointFormatError);

  bad = bytes;
  bad[8] = 9;  // unsupported version
  std::ofstream(dir.str("bad_ver.ckpt"), std::ios::binary) << bad;
  EXPECT_THROW(act::load_checkpoint(dir.str("bad_ver.ckpt"), ps), act::CheckpointFormatError);

  std::ofstream(dir.str("trail.ckpt"), std::ios::binary) << bytes << "junk";
  EXPECT_THROW(act::load_checkpoint(dir.str("trail.ckpt"), ps), act::CheckpointFormatError);
}

TEST(Checkpoint, TruncationIsItsOwnError) {
  TempDir dir("trunc");
  auto ps = toy_store(6);
  act::save_checkpoint(dir.str("t.ckpt"), ps, CheckpointMeta{});
  const auto bytes = read_bytes(dir.str("t.ckpt"));
  for (size_t cut : {bytes.size() - 1, bytes.size() / 2, size_t{40}}) {
    std::ofstream(dir.str("cut.ckpt"), std::ios::binary) << bytes.substr(0, cut);
    EXPECT_THROW(act::load_checkpoint(dir.str("cut.ckpt"), ps),
                 act::CheckpointTruncatedError)
        << "cut at " << cut;
  }
}

TEST(Checkpoint, CrossModelLoadNamesOffenders) {
  TempDir dir("cross");
  auto cfg = tiny_config(dir);
  auto teacher = act::build_teacher<float>(cfg);
  act::save_checkpoint(dir.str("teacher.ckpt"), teacher.ps, CheckpointMeta{});

  auto student = act::build_student<float>(cfg);
  try {
    act::load_checkpoint(dir.str("teacher.ckpt"), student.ps);
    FAIL() << "expected a mismatch error";
  } catch (const act::CheckpointMismatchError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("problems"), std::string::npos);
    EXPECT_NE(msg.find("encoder"), std::string::npos) << msg;
    // no more than five offenders are spelled out
    size_t lines = 0;
    for (char ch : msg) lines += ch == '\n' ? 1 : 0;
    EXPECT_LE(lines, 5u);
  }
}

TEST(Checkpoint, ShapeMismatchIsDetected) {
  TempDir dir("shape");
  auto ps = toy_store(7);
  act::save_checkpoint(dir.str("s.ckpt"), ps, CheckpointMeta{});
  act::ParamStoreT<float> other;
  other.add("alpha.w", act::TensorT<float>::zeros({3, 5}));
  other.add("beta.b", act::TensorT<float>::zeros({5}));
  try {
    act::load_checkpoint(dir.str("s.ckpt"), other);
    FAIL() << "expected a mismatch error";
  } catch (const act::CheckpointMismatchError& e) {
    EXPECT_NE(std::string(e.what()).find("shape mismatch for alpha.w"), std::string::npos);
  }
}

TEST(Pipeline, TrainDvaeRerunIsByteIdentical) {
  TempDir dir("dvae");
  auto cfg = tiny_config(dir);
  act::cmd_gen_data(cfg);
  auto r1 = act::cmd_train_dvae(cfg);
  const auto csv1 = read_bytes(r1.metrics_path);
  const auto ckpt1 = read_bytes(r1.checkpoint_path);
  auto r2 = act::cmd_train_dvae(cfg);
  EXPECT_EQ(csv1, read_bytes(r2.metrics_path));
  EXPECT_EQ(ckpt1, read_bytes(r2.checkpoint_path));
  EXPECT_GT(csv1.size(), 0u);

  RunConfig other = cfg;
  other.seed = cfg.seed + 1;
  auto r3 = act::cmd_train_dvae(other);
  EXPECT_NE(ckpt1, read_bytes(r3.checkpoint_path));
}

TEST(Pipeline, MpmKeepsTeacherFrozenAndProbesDeterministically) {
  TempDir dir("mpm");
  auto cfg = tiny_config(dir);
  act::cmd_gen_data(cfg);
  act::cmd_train_dvae(cfg);

  const auto teacher_before = read_bytes(dir.str("out") + "/teacher.ckpt");
  auto r1 = act::cmd_train_mpm(cfg);
  EXPECT_EQ(teacher_before, read_bytes(dir.str("out") + "/teacher.ckpt"));
  EXPECT_LT(r1.loss_last, r1.loss_first);

  auto p1 = act::cmd_probe(cfg);
  auto p2 = act::cmd_probe(cfg);
  EXPECT_EQ(p1.accuracy, p2.accuracy);
  EXPECT_GE(p1.accuracy, 0.0);
  EXPECT_LE(p1.accuracy, 1.0);
  EXPECT_EQ(read_bytes(p1.metrics_path).substr(0, 22), "protocol,seed,accuracy");
}

TEST(Pipeline, EvalReconDebugIdentityHitsIdeals) {
  TempDir dir("ident");
  auto cfg = tiny_config(dir);
  act::cmd_gen_data(cfg);
  cfg.eval_debug_identity = true;
  auto r = act::cmd_eval_recon(cfg);
  EXPECT_EQ(r.mean.cd_l1, 0.0);
  EXPECT_EQ(r.mean.cd_l2, 0.0);
  EXPECT_EQ(r.mean.f_score, 1.0);
  EXPECT_NE(r.table.find("f_score"), std::string::npos);
}

TEST(Pipeline, EvalReconRepeatsExactly) {
  TempDir dir("recon");
  auto cfg = tiny_config(dir);
  act::cmd_gen_data(cfg);
  act::cmd_train_dvae(cfg);
  auto r1 = act::cmd_eval_recon(cfg);
  const auto bytes = read_bytes(r1.metrics_path);
  auto r2 = act::cmd_eval_recon(cfg);
  EXPECT_EQ(bytes, read_bytes(r2.metrics_path));
  EXPECT_GT(r1.mean.cd_l1, 0.0);
  EXPECT_GE(r1.mean.f_score, 0.0);
  EXPECT_LE(r1.mean.f_score, 1.0);
}

TEST(Pipeline, ExportFeaturesShape) {
  TempDir dir("export");
  auto cfg = tiny_config(dir);
  act::cmd_gen_data(cfg);
  act::cmd_train_dvae(cfg);
  act::cmd_train_mpm(cfg);
  auto r = act::cmd_export_features(cfg);
  EXPECT_EQ(r.rows, 8 * cfg.n_per_class);
  EXPECT_EQ(r.feature_dim, 2 * cfg.student.width);

  std::ifstream in(r.out_path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  auto count_cols = [](const std::string& s) {
    size_t n = 1;
    for (char ch : s) n += ch == ',' ? 1 : 0;
    return n;
  };
  EXPECT_EQ(count_cols(header), static_cast<size_t>(r.feature_dim) + 2);
  EXPECT_EQ(count_cols(row), static_cast<size_t>(r.feature_dim) + 2);

  const auto bytes = read_bytes(r.out_path);
  auto r2 = act::cmd_export_features(cfg);
  EXPECT_EQ(bytes, read_bytes(r2.out_path));
}

TEST(Probe, RandomBaselineRunsAndIsDeterministic) {
  TempDir dir("baseline");
  auto cfg = tiny_config(dir);
  act::cmd_gen_data(cfg);
  cfg.probe_checkpoint = "random";
  auto r1 = act::cmd_probe(cfg);
  auto r2 = act::cmd_probe(cfg);
  EXPECT_EQ(r1.accuracy, r2.accuracy);
}

TEST(Probe, LabelOutsideClassesIsDataError) {
  TempDir dir("labels");
  auto cfg = tiny_config(dir);
  act::cmd_gen_data(cfg);
  cfg.probe.classes = 4;  // dataset has 8
  cfg.probe_checkpoint = "random";
  EXPECT_THROW(act::cmd_probe(cfg), IoError);
}

TEST(Probe, DeepHeadAndFullProtocolRun) {
  TempDir dir("deep");
  auto cfg = tiny_config(dir);
  act::cmd_gen_data(cfg);
  cfg.probe_checkpoint = "random";
  cfg.probe.kind = act::ProbeKind::kMlp3;
  cfg.probe.epochs = 2;
  auto r3 = act::cmd_probe(cfg);
  EXPECT_GE(r3.accuracy, 0.0);
  EXPECT_LE(r3.accuracy, 1.0);

  cfg.probe.kind = act::ProbeKind::kFull;
  cfg.probe.epochs = 1;
  auto rf = act::cmd_probe(cfg);
  EXPECT_GE(rf.accuracy, 0.0);
  EXPECT_LE(rf.accuracy, 1.0);
}
