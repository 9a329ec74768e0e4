#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "act/checkpoint.hpp"
#include "act/config.hpp"
#include "act/dataset.hpp"
#include "act/distill.hpp"
#include "act/dvae.hpp"
#include "act/foundation.hpp"
#include "act/probe.hpp"

namespace act {

// Every knob of every command, resolved against defaults. The canonical
// serialization below is what the config digest hashes, so an explicitly
// written default and an omitted key produce the same digest.
struct RunConfig {
  // [data]
  std::string data_dir = "data";
  int64_t n_per_class = 64;
  int64_t points = 256;

  // [teacher]
  DvaeConfig teacher;

  // [foundation]
  std::string foundation_init = "surrogate";  // surrogate | random
  int64_t foundation_steps = 400;
  int64_t foundation_batch = 8;
  double foundation_lr = 1e-3;
  double foundation_mask_ratio = 0.5;

  // [dvae-train]  (reference-scale run: 150K steps, batch 64, lr 5e-4)
  int64_t dvae_steps = 2000;
  int64_t dvae_batch = 4;
  double dvae_lr = 5e-4;
  double dvae_weight_decay = 5e-2;
  int64_t dvae_warmup = 100;
  int64_t dvae_eval_every = 500;
  int64_t dvae_eval_samples = 16;
  std::string teacher_checkpoint = "teacher.ckpt";
  std::string dvae_metrics = "dvae_metrics.csv";

  // [student]
  StudentConfig student;

  // [mpm-train]  (reference-scale run: 300 epochs, batch 128, lr 1e-3)
  int64_t mpm_steps = 2000;
  int64_t mpm_batch = 4;
  double mpm_lr = 1e-3;
  double mpm_weight_decay = 5e-2;
  int64_t mpm_warmup = 100;
  int64_t mpm_log_every = 10;
  double lambda_kd = 0.0;
  MaskConfig mask;
  std::string student_checkpoint = "student.ckpt";
  std::string mpm_metrics = "mpm_metrics.csv";

  // [probe]
  ProbeProtocol probe;
  std::string probe_checkpoint = "student.ckpt";  // "random" probes a fresh init
  std::string probe_metrics = "probe_metrics.csv";

  // [eval]
  std::string eval_checkpoint = "teacher.ckpt";
  std::string eval_metrics = "recon_metrics.csv";
  bool eval_debug_identity = false;

  // [export]
  std::string export_checkpoint = "student.ckpt";
  std::string export_out = "features.csv";

  // [run]
  uint64_t seed = 1;
  std::string out_dir = ".";

  static RunConfig from_text(const std::string& text) {
    ConfigFile f = ConfigFile::parse_text(text);
    return resolve(f);
  }

  static RunConfig from_file(const std::string& path) {
    ConfigFile f = ConfigFile::parse_file(path);
    return resolve(f);
  }

  std::string canonical_text() const {
    std::ostringstream o;
    auto s = [&o](const char* k, const std::string& v) { o << k << "=" << v << "\n"; };
    auto i = [&o](const char* k, int64_t v) { o << k << "=" << v << "\n"; };
    auto d = [&o, &s](const char* k, double v) { s(k, detail::format_double(v)); };
    auto b = [&o](const char* k, bool v) { o << k << "=" << (v ? "true" : "false") << "\n"; };

    s("data.dir", data_dir);
    i("data.n_per_class", n_per_class);
    i("data.points", points);

    i("teacher.width", teacher.width);
    i("teacher.depth", teacher.depth);
    i("teacher.heads", teacher.heads);
    i("teacher.n_groups", teacher.n_groups);
    i("teacher.group_k", teacher.group_k);
    i("teacher.token_k", teacher.token_k);
    i("teacher.vocab", teacher.vocab);
    i("teacher.grid", teacher.grid);
    i("teacher.prompt_len", teacher.prompt_len);
    s("teacher.prompt_type", prompt_type_name(teacher.prompt_type));
    s("teacher.pos_mode", pos_mode_name(teacher.pos_mode));
    s("teacher.tuning", tuning_mode_name(teacher.tuning));
    d("teacher.hard_below_tau", teacher.hard_sample_below_tau);

    s("foundation.init", foundation_init);
    i("foundation.steps", foundation_steps);
    i("foundation.batch", foundation_batch);
    d("foundation.lr", foundation_lr);
    d("foundation.mask_ratio", foundation_mask_ratio);

    i("dvae-train.steps", dvae_steps);
    i("dvae-train.batch", dvae_batch);
    d("dvae-train.lr", dvae_lr);
    d("dvae-train.weight_decay", dvae_weight_decay);
    i("dvae-train.warmup", dvae_warmup);
    i("dvae-train.eval_every", dvae_eval_every);
    i("dvae-train.eval_samples", dvae_eval_samples);
    s("dvae-train.checkpoint", teacher_checkpoint);
    s("dvae-train.metrics", dvae_metrics);

    i("student.width", student.width);
    i("student.depth", student.depth);
    i("student.dec_depth", student.dec_depth);
    i("student.heads", student.heads);
    i("student.n_groups", student.n_groups);
    i("student.group_k", student.group_k);
    d("student.drop_path", student.drop_path);
    s("student.pos_mode", pos_mode_name(student.pos_mode));
    s("student.target", target_kind_name(student.target));
    s("student.metric", metric_kind_name(student.metric));
    b("student.normalize_targets", student.normalize_targets);
    b("student.aux_kd", student.aux_kd);

    i("mpm-train.steps", mpm_steps);
    i("mpm-train.batch", mpm_batch);
    d("mpm-train.lr", mpm_lr);
    d("mpm-train.weight_decay", mpm_weight_decay);
    i("mpm-train.warmup", mpm_warmup);
    i("mpm-train.log_every", mpm_log_every);
    d("mpm-train.lambda_kd", lambda_kd);
    s("mpm-train.mask_strategy", mask_strategy_name(mask.strategy));
    d("mpm-train.mask_ratio", mask.ratio);
    s("mpm-train.teacher_checkpoint", teacher_checkpoint);
    s("mpm-train.checkpoint", student_checkpoint);
    s("mpm-train.metrics", mpm_metrics);

    s("probe.protocol", probe_kind_name(probe.kind));
    i("probe.epochs", probe.epochs);
    i("probe.batch", probe.batch);
    d("probe.lr", probe.lr);
    i("probe.classes", probe.classes);
    d("probe.dropout", probe.dropout);
    s("probe.checkpoint", probe_checkpoint);
    s("probe.metrics", probe_metrics);

    s("eval.checkpoint", eval_checkpoint);
    s("eval.metrics", eval_metrics);
    b("eval.debug_identity", eval_debug_identity);

    s("export.checkpoint", export_checkpoint);
    s("export.out", export_out);

    i("run.seed", static_cast<int64_t>(seed));
    s("run.out_dir", out_dir);
    return o.str();
  }

  uint64_t digest() const { return detail::fnv1a64(canonical_text()); }

 private:
  static RunConfig resolve(ConfigFile& f) {
    RunConfig c;
    c.data_dir = f.get_str("data.dir", c.data_dir);
    c.n_per_class = f.get_i64("data.n_per_class", c.n_per_class);
    c.points = f.get_i64("data.points", c.points);

    c.teacher.width = f.get_i64("teacher.width", c.teacher.width);
    c.teacher.depth = f.get_i64("teacher.depth", c.teacher.depth);
    c.teacher.heads = f.get_i64("teacher.heads", c.teacher.heads);
    c.teacher.n_groups = f.get_i64("teacher.n_groups", c.teacher.n_groups);
    c.teacher.group_k = f.get_i64("teacher.group_k", c.teacher.group_k);
    c.teacher.token_k = f.get_i64("teacher.token_k", c.teacher.token_k);
    c.teacher.vocab = f.get_i64("teacher.vocab", c.teacher.vocab);
    c.teacher.grid = f.get_i64("teacher.grid", c.teacher.grid);
    c.teacher.prompt_len = f.get_i64("teacher.prompt_len", c.teacher.prompt_len);
    c.teacher.prompt_type =
        parse_prompt_type(f.get_str("teacher.prompt_type", prompt_type_name(c.teacher.prompt_type)));
    c.teacher.pos_mode =
        parse_pos_mode(f.get_str("teacher.pos_mode", pos_mode_name(c.teacher.pos_mode)));
    c.teacher.tuning =
        parse_tuning_mode(f.get_str("teacher.tuning", tuning_mode_name(c.teacher.tuning)));
    c.teacher.hard_sample_below_tau =
        f.get_f64("teacher.hard_below_tau", c.teacher.hard_sample_below_tau);

    c.foundation_init = f.get_str("foundation.init", c.foundation_init);
    if (c.foundation_init != "surrogate" && c.foundation_init != "random") {
      throw ConfigError("foundation.init must be surrogate or random");
    }
    c.foundation_steps = f.get_i64("foundation.steps", c.foundation_steps);
    c.foundation_batch = f.get_i64("foundation.batch", c.foundation_batch);
    c.foundation_lr = f.get_f64("foundation.lr", c.foundation_lr);
    c.foundation_mask_ratio = f.get_f64("foundation.mask_ratio", c.foundation_mask_ratio);

    c.dvae_steps = f.get_i64("dvae-train.steps", c.dvae_steps);
    c.dvae_batch = f.get_i64("dvae-train.batch", c.dvae_batch);
    c.dvae_lr = f.get_f64("dvae-train.lr", c.dvae_lr);
    c.dvae_weight_decay = f.get_f64("dvae-train.weight_decay", c.dvae_weight_decay);
    c.dvae_warmup = f.get_i64("dvae-train.warmup", c.dvae_warmup);
    c.dvae_eval_every = f.get_i64("dvae-train.eval_every", c.dvae_eval_every);
    c.dvae_eval_samples = f.get_i64("dvae-train.eval_samples", c.dvae_eval_samples);
    c.teacher_checkpoint = f.get_str("dvae-train.checkpoint", c.teacher_checkpoint);
    c.dvae_metrics = f.get_str("dvae-train.metrics", c.dvae_metrics);

    c.student.width = f.get_i64("student.width", c.student.width);
    c.student.depth = f.get_i64("student.depth", c.student.depth);
    c.student.dec_depth = f.get_i64("student.dec_depth", c.student.dec_depth);
    c.student.heads = f.get_i64("student.heads", c.student.heads);
    // patch geometry must match the teacher's or the shared patch set in the
    // distillation loss cannot line up
    c.student.n_groups = f.get_i64("student.n_groups", c.teacher.n_groups);
    c.student.group_k = f.get_i64("student.group_k", c.teacher.group_k);
    c.student.drop_path = f.get_f64("student.drop_path", c.student.drop_path);
    c.student.pos_mode =
        parse_pos_mode(f.get_str("student.pos_mode", pos_mode_name(c.student.pos_mode)));
    c.student.target =
        parse_target_kind(f.get_str("student.target", target_kind_name(c.student.target)));
    c.student.metric =
        parse_metric_kind(f.get_str("student.metric", metric_kind_name(c.student.metric)));
    c.student.normalize_targets =
        f.get_bool("student.normalize_targets", c.student.normalize_targets);
    c.student.aux_kd = f.get_bool("student.aux_kd", c.student.aux_kd);
    c.student.teacher_width = c.teacher.width;
    c.student.teacher_vocab = c.teacher.vocab;

    c.mpm_steps = f.get_i64("mpm-train.steps", c.mpm_steps);
    c.mpm_batch = f.get_i64("mpm-train.batch", c.mpm_batch);
    c.mpm_lr = f.get_f64("mpm-train.lr", c.mpm_lr);
    c.mpm_weight_decay = f.get_f64("mpm-train.weight_decay", c.mpm_weight_decay);
    c.mpm_warmup = f.get_i64("mpm-train.warmup", c.mpm_warmup);
    c.mpm_log_every = f.get_i64("mpm-train.log_every", c.mpm_log_every);
    c.lambda_kd = f.get_f64("mpm-train.lambda_kd", c.lambda_kd);
    c.mask.strategy =
        parse_mask_strategy(f.get_str("mpm-train.mask_strategy", mask_strategy_name(c.mask.strategy)));
    c.mask.ratio = f.get_f64("mpm-train.mask_ratio", c.mask.ratio);
    c.student_checkpoint = f.get_str("mpm-train.checkpoint", c.student_checkpoint);
    c.mpm_metrics = f.get_str("mpm-train.metrics", c.mpm_metrics);

    c.probe.kind = parse_probe_kind(f.get_str("probe.protocol", probe_kind_name(c.probe.kind)));
    c.probe.epochs = f.get_i64("probe.epochs", c.probe.epochs);
    c.probe.batch = f.get_i64("probe.batch", c.probe.batch);
    c.probe.lr = f.get_f64("probe.lr", c.probe.lr);
    c.probe.classes = f.get_i64("probe.classes", c.probe.classes);
    c.probe.dropout = f.get_f64("probe.dropout", c.probe.dropout);
    c.probe_checkpoint = f.get_str("probe.checkpoint", c.probe_checkpoint);
    c.probe_metrics = f.get_str("probe.metrics", c.probe_metrics);

    c.eval_checkpoint = f.get_str("eval.checkpoint", c.eval_checkpoint);
    c.eval_metrics = f.get_str("eval.metrics", c.eval_metrics);
    c.eval_debug_identity = f.get_bool("eval.debug_identity", c.eval_debug_identity);

    c.export_checkpoint = f.get_str("export.checkpoint", c.export_checkpoint);
    c.export_out = f.get_str("export.out", c.export_out);

    c.seed = static_cast<uint64_t>(f.get_i64("run.seed", static_cast<int64_t>(c.seed)));
    c.out_dir = f.get_str("run.out_dir", c.out_dir);

    f.reject_unknown_keys();
    validate(c);
    return c;
  }

  static void validate(const RunConfig& c) {
    if (c.n_per_class < 1 || c.points < 8) throw ConfigError("data dimensions too small");
    if (c.dvae_steps < 1 || c.dvae_batch < 1 || c.mpm_steps < 1 || c.mpm_batch < 1) {
      throw ConfigError("step and batch counts must be positive");
    }
    if (c.dvae_eval_every < 1 || c.mpm_log_every < 1) {
      throw ConfigError("logging intervals must be positive");
    }
    if (c.mask.ratio < 0.0 || c.mask.ratio > 1.0) {
      throw ConfigError("mask ratio outside [0,1]");
    }
    if (c.lambda_kd < 0.0) throw ConfigError("lambda_kd must be non-negative");
    if (c.student.n_groups != c.teacher.n_groups || c.student.group_k != c.teacher.group_k) {
      throw ConfigError("student patch geometry must match the teacher");
    }
    if (c.probe.epochs < 1 || c.probe.batch < 1 || c.probe.classes < 2) {
      throw ConfigError("probe settings out of range");
    }
    validate_pairing(c.student.target, c.student.metric);
  }
};

// A fully commented starting point; paper-scale values are preserved in the
// comments so desk-scale substitutions stay visible.
inline std::string default_config_text() {
  return R"([data]
dir = data
n_per_class = 64
points = 256

[teacher]
width = 96
depth = 6
heads = 4
n_groups = 16
group_k = 16
token_k = 4
vocab = 512
grid = 4
prompt_len = 16
prompt_type = deep
pos_mode = 3d
tuning = frozen-prompt    # frozen-prompt | frozen-noprompt | full-tune

[foundation]
init = surrogate          # surrogate | random
steps = 400
batch = 8
lr = 0.001
mask_ratio = 0.5

[dvae-train]
steps = 2000              # reference-scale run: 150000
batch = 4                 # reference-scale run: 64
lr = 0.0005
weight_decay = 0.05
warmup = 100
eval_every = 500
eval_samples = 16
checkpoint = teacher.ckpt
metrics = dvae_metrics.csv

[student]
width = 96
depth = 6
dec_depth = 2
heads = 4
drop_path = 0.1
target = teacher-feature  # teacher-feature | discrete-token | coordinates
metric = cosine           # cosine | cross-entropy | chamfer_l1
normalize_targets = true
aux_kd = false

[mpm-train]
steps = 2000              # reference-scale run: 300 epochs at batch 128
batch = 4
lr = 0.001
weight_decay = 0.05
warmup = 100
log_every = 10
lambda_kd = 0
mask_strategy = random    # random | block
mask_ratio = 0.75
checkpoint = student.ckpt
metrics = mpm_metrics.csv

[probe]
protocol = mlp-linear     # full | mlp-linear | mlp-3
epochs = 40
batch = 16
lr = 0.01
classes = 8
dropout = 0.5
checkpoint = student.ckpt
metrics = probe_metrics.csv

[eval]
checkpoint = teacher.ckpt
metrics = recon_metrics.csv
debug_identity = false

[export]
checkpoint = student.ckpt
out = features.csv

[run]
seed = 1
out_dir = .
)";
}

namespace detail {

inline std::string fmt_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// Metrics sink with a fixed header; binary mode keeps LF endings everywhere.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& header) : out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot write " + path);
    out_ << header << "\n";
  }
  void row(const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ",";
      out_ << cells[i];
    }
    out_ << "\n";
    if (!out_) throw IoError("failed writing metrics");
  }

 private:
  std::ofstream out_;
};

inline std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir);
}

}  // namespace detail

template <typename T>
struct TeacherBundleT {
  ParamStoreT<T> ps;
  DvaeModelT<T> model;
};

// Builds the stage-I model and stands up its foundation: either surrogate
// masked-image pretraining or a plain random init for baselines.
template <typename T>
inline TeacherBundleT<T> build_teacher(const RunConfig& cfg) {
  TeacherBundleT<T> b;
  Rng init = derive_rng(cfg.seed, {0x7ea0u});
  b.model = DvaeModelT<T>::create(b.ps, cfg.teacher, init);
  if (cfg.foundation_init == "surrogate") {
    FoundationConfig fc;
    fc.width = cfg.teacher.width;
    fc.depth = cfg.teacher.depth;
    fc.heads = cfg.teacher.heads;
    fc.steps = cfg.foundation_steps;
    fc.batch = cfg.foundation_batch;
    fc.lr = cfg.foundation_lr;
    fc.mask_ratio = cfg.foundation_mask_ratio;
    fc.seed = cfg.seed;
    auto sur = make_surrogate_foundation<T>(fc);
    copy_matching_params(sur.params, b.ps);
  }
  b.model.apply_tuning(b.ps);
  return b;
}

template <typename T>
struct StudentBundleT {
  ParamStoreT<T> ps;
  StudentModelT<T> model;
};

template <typename T>
inline StudentBundleT<T> build_student(const RunConfig& cfg) {
  StudentBundleT<T> b;
  StudentConfig sc = cfg.student;
  sc.teacher_width = cfg.teacher.width;  // distillation targets live in teacher space
  sc.teacher_vocab = cfg.teacher.vocab;
  Rng init = derive_rng(cfg.seed, {0x57d0u});
  b.model = StudentModelT<T>::create(b.ps, sc, init);
  return b;
}

template <typename T>
inline OptimizerMoments collect_moments(const AdamWT<T>& adam) {
  OptimizerMoments out;
  out.adam_step = static_cast<uint64_t>(adam.step_count());
  for (const auto& mv : adam.moments()) {
    out.names.push_back(mv.name);
    out.m.emplace_back(mv.m.begin(), mv.m.end());
    out.v.emplace_back(mv.v.begin(), mv.v.end());
  }
  return out;
}

template <typename T>
inline void restore_moments(AdamWT<T>& adam, const OptimizerMoments& moments) {
  for (size_t i = 0; i < moments.names.size(); ++i) {
    std::vector<T> m(moments.m[i].begin(), moments.m[i].end());
    std::vector<T> v(moments.v[i].begin(), moments.v[i].end());
    adam.load_moments(moments.names[i], m, v, static_cast<int64_t>(moments.adam_step));
  }
}

struct ReconMetrics {
  double cd_l1 = 0.0;
  double cd_l2 = 0.0;
  double f_score = 0.0;
  double kl = 0.0;
};

// Deterministic held-out metrics: canonical patching, argmax codes, no
// sampling anywhere on the path.
template <typename T>
inline ReconMetrics eval_recon_metrics(const DvaeModelT<T>& model,
                                       const LoadedDatasetT<T>& ds, int64_t limit) {
  const int64_t n = limit > 0 ? std::min<int64_t>(limit, ds.size()) : ds.size();
  ReconMetrics m;
  for (int64_t i = 0; i < n; ++i) {
    const auto& cloud = ds.clouds[static_cast<size_t>(i)];
    TapeT<T> tape;
    auto patches = make_patches_from(cloud, model.cfg.n_groups, model.cfg.group_k,
                                     canonical_start(cloud));
    auto enc = model.encode_on_patches(tape, patches);
    auto y = tape.straight_through_onehot(enc.logits);
    auto fine = model.decode_fold(tape, tape.matmul(y, model.codebook), patches.centroids);
    auto recon = detail::tensor_to_cloud(fine);
    m.cd_l1 += static_cast<double>(chamfer_l1(recon, cloud));
    m.cd_l2 += static_cast<double>(chamfer_l2(recon, cloud));
    m.f_score += static_cast<double>(f_score(recon, cloud));
    m.kl += kl_to_uniform_metric(enc.logits);
  }
  m.cd_l1 /= static_cast<double>(n);
  m.cd_l2 /= static_cast<double>(n);
  m.f_score /= static_cast<double>(n);
  m.kl /= static_cast<double>(n);
  return m;
}

inline GenDataResult cmd_gen_data(const RunConfig& cfg) {
  return gen_dataset(cfg.data_dir, cfg.n_per_class, cfg.points, cfg.seed);
}

struct TrainDvaeResult {
  double cd_l1_first = 0.0;
  double cd_l1_last = 0.0;
  std::string checkpoint_path;
  std::string metrics_path;
};

template <typename T = float>
inline TrainDvaeResult cmd_train_dvae(const RunConfig& cfg) {
  auto train = load_split<T>(detail::join_path(cfg.data_dir, "train.txt"));
  auto val = load_split<T>(detail::join_path(cfg.data_dir, "val.txt"));
  auto bundle = build_teacher<T>(cfg);

  typename AdamWT<T>::Options opt;
  opt.lr = cfg.dvae_lr;
  opt.weight_decay = cfg.dvae_weight_decay;
  AdamWT<T> adam(bundle.ps, opt);
  const auto sched = DvaeSchedules::for_total_steps(cfg.dvae_steps);

  TrainDvaeResult res;
  detail::ensure_dir(cfg.out_dir);
  res.checkpoint_path = detail::join_path(cfg.out_dir, cfg.teacher_checkpoint);
  res.metrics_path = detail::join_path(cfg.out_dir, cfg.dvae_metrics);
  detail::CsvWriter csv(res.metrics_path, "step,lr,tau,beta,cd_l1,cd_l2,f_score,kl");

  const int64_t warmup = std::min(cfg.dvae_warmup, cfg.dvae_steps);
  Rng loop = derive_rng(cfg.seed, {0xd4aeu});
  bool first_eval = true;
  auto log_eval = [&](int64_t step, double lr_now) {
    const auto m = eval_recon_metrics(bundle.model, val, cfg.dvae_eval_samples);
    csv.row({std::to_string(step), detail::fmt_g9(lr_now), detail::fmt_g9(sched.tau.at(step)),
             detail::fmt_g9(sched.beta.at(step)), detail::fmt_g9(m.cd_l1),
             detail::fmt_g9(m.cd_l2), detail::fmt_g9(m.f_score), detail::fmt_g9(m.kl)});
    if (first_eval) {
      res.cd_l1_first = m.cd_l1;
      first_eval = false;
    }
    res.cd_l1_last = m.cd_l1;
  };

  const int64_t n = train.size();
  for (int64_t step = 0; step < cfg.dvae_steps; ++step) {
    if (step % cfg.dvae_eval_every == 0) {
      log_eval(step, cosine_lr(step, warmup, cfg.dvae_steps, cfg.dvae_lr));
    }
    const double tau = sched.tau.at(step);
    const double beta = sched.beta.at(step);
    adam.set_lr(cosine_lr(step, warmup, cfg.dvae_steps, cfg.dvae_lr));

    TapeT<T> tape;
    TensorT<T> loss;
    for (int64_t b = 0; b < cfg.dvae_batch; ++b) {
      const auto idx = static_cast<size_t>(loop.below(static_cast<uint64_t>(n)));
      auto parts = dvae_loss(tape, bundle.model, train.clouds[idx], tau, beta, loop, true);
      auto contrib = tape.scale(parts.loss, T(1) / static_cast<T>(cfg.dvae_batch));
      loss = b == 0 ? contrib : tape.add(loss, contrib);
    }
    bundle.ps.zero_grad();
    tape.backward(loss);
    adam.step();
  }
  log_eval(cfg.dvae_steps, 0.0);

  CheckpointMeta meta;
  meta.step = static_cast<uint64_t>(cfg.dvae_steps);
  meta.config_digest = cfg.digest();
  meta.rng_state = loop.state();
  const auto moments = collect_moments(adam);
  save_checkpoint(res.checkpoint_path, bundle.ps, meta, &moments);
  return res;
}

struct TrainMpmResult {
  double loss_first = 0.0;
  double loss_last = 0.0;
  std::string checkpoint_path;
  std::string metrics_path;
};

template <typename T = float>
inline TrainMpmResult cmd_train_mpm(const RunConfig& cfg) {
  auto train = load_split<T>(detail::join_path(cfg.data_dir, "train.txt"));

  // the checkpoint supplies every value, so skip foundation pretraining
  RunConfig tcfg = cfg;
  tcfg.foundation_init = "random";
  auto teacher = build_teacher<T>(tcfg);
  load_checkpoint(detail::join_path(cfg.out_dir, cfg.teacher_checkpoint), teacher.ps);
  teacher.ps.set_trainable("*", false);

  auto student = build_student<T>(cfg);
  typename AdamWT<T>::Options opt;
  opt.lr = cfg.mpm_lr;
  opt.weight_decay = cfg.mpm_weight_decay;
  AdamWT<T> adam(student.ps, opt);

  TrainMpmResult res;
  detail::ensure_dir(cfg.out_dir);
  res.checkpoint_path = detail::join_path(cfg.out_dir, cfg.student_checkpoint);
  res.metrics_path = detail::join_path(cfg.out_dir, cfg.mpm_metrics);
  detail::CsvWriter csv(res.metrics_path, "step,lr,loss,loss_cos,loss_cd,mask_ratio,strategy");

  const int64_t warmup = std::min(cfg.mpm_warmup, cfg.mpm_steps);
  Rng loop = derive_rng(cfg.seed, {0x3450u});
  const int64_t n = train.size();
  bool first_logged = false;
  for (int64_t step = 0; step < cfg.mpm_steps; ++step) {
    const double lr_now = cosine_lr(step, warmup, cfg.mpm_steps, cfg.mpm_lr);
    adam.set_lr(lr_now);

    TapeT<T> tape;
    TensorT<T> loss;
    double cos_acc = 0.0, cd_acc = 0.0;
    for (int64_t b = 0; b < cfg.mpm_batch; ++b) {
      const auto idx = static_cast<size_t>(loop.below(static_cast<uint64_t>(n)));
      MpmParts<T> parts;
      if (cfg.student.aux_kd) {
        parts = aux_kd_loss(tape, student.model, teacher.model, train.clouds[idx], cfg.mask,
                            cfg.lambda_kd, loop, true);
      } else {
        parts = mpm_loss_generic(tape, student.model, teacher.model, train.clouds[idx],
                                 cfg.mask, cfg.student.target, cfg.student.metric, loop, true);
      }
      cos_acc += parts.loss_cos / static_cast<double>(cfg.mpm_batch);
      cd_acc += parts.loss_cd / static_cast<double>(cfg.mpm_batch);
      auto contrib = tape.scale(parts.loss, T(1) / static_cast<T>(cfg.mpm_batch));
      loss = b == 0 ? contrib : tape.add(loss, contrib);
    }
    const double loss_val = static_cast<double>(loss.item());
    if (!first_logged) {
      res.loss_first = loss_val;
      first_logged = true;
    }
    res.loss_last = loss_val;
    if (step % cfg.mpm_log_every == 0 || step == cfg.mpm_steps - 1) {
      csv.row({std::to_string(step), detail::fmt_g9(lr_now), detail::fmt_g9(loss_val),
               detail::fmt_g9(cos_acc), detail::fmt_g9(cd_acc),
               detail::fmt_g9(cfg.mask.ratio), mask_strategy_name(cfg.mask.strategy)});
    }

    student.ps.zero_grad();
    tape.backward(loss);
    adam.step();
  }

  CheckpointMeta meta;
  meta.step = static_cast<uint64_t>(cfg.mpm_steps);
  meta.config_digest = cfg.digest();
  meta.rng_state = loop.state();
  const auto moments = collect_moments(adam);
  save_checkpoint(res.checkpoint_path, student.ps, meta, &moments);
  return res;
}

struct ProbeCmdResult {
  double accuracy = 0.0;
  std::string protocol;
  std::string metrics_path;
};

template <typename T = float>
inline ProbeCmdResult cmd_probe(const RunConfig& cfg) {
  auto train = load_split<T>(detail::join_path(cfg.data_dir, "train.txt"));
  auto test = load_split<T>(detail::join_path(cfg.data_dir, "test.txt"));

  auto student = build_student<T>(cfg);
  if (cfg.probe_checkpoint != "random") {
    load_checkpoint(detail::join_path(cfg.out_dir, cfg.probe_checkpoint), student.ps);
  }
  if (cfg.probe.kind != ProbeKind::kFull) student.ps.set_trainable("*", false);

  auto r = run_probe(student.ps, student.model, train, test, cfg.probe, cfg.seed);

  ProbeCmdResult res;
  res.accuracy = r.accuracy;
  res.protocol = probe_kind_name(cfg.probe.kind);
  detail::ensure_dir(cfg.out_dir);
  res.metrics_path = detail::join_path(cfg.out_dir, cfg.probe_metrics);
  detail::CsvWriter csv(res.metrics_path, "protocol,seed,accuracy");
  csv.row({res.protocol, std::to_string(cfg.seed), detail::fmt_g9(res.accuracy)});
  return res;
}

struct EvalReconResult {
  ReconMetrics mean;
  std::string metrics_path;
  std::string table;  // human-readable summary
};

template <typename T = float>
inline EvalReconResult cmd_eval_recon(const RunConfig& cfg) {
  auto test = load_split<T>(detail::join_path(cfg.data_dir, "test.txt"));

  RunConfig tcfg = cfg;
  tcfg.foundation_init = "random";  // checkpoint or identity pathway supplies values
  auto teacher = build_teacher<T>(tcfg);
  if (!cfg.eval_debug_identity) {
    load_checkpoint(detail::join_path(cfg.out_dir, cfg.eval_checkpoint), teacher.ps);
  }

  EvalReconResult res;
  detail::ensure_dir(cfg.out_dir);
  res.metrics_path = detail::join_path(cfg.out_dir, cfg.eval_metrics);
  detail::CsvWriter csv(res.metrics_path, "cloud,cd_l1,cd_l2,f_score,f_tau");

  double cd1 = 0.0, cd2 = 0.0, fs = 0.0;
  for (int64_t i = 0; i < test.size(); ++i) {
    const auto& cloud = test.clouds[static_cast<size_t>(i)];
    CloudT<T> recon;
    if (cfg.eval_debug_identity) {
      recon = cloud;  // sanity pathway: metrics must hit their ideals
    } else {
      recon = reconstruct(teacher.model, cloud);
    }
    const double a = static_cast<double>(chamfer_l1(recon, cloud));
    const double b = static_cast<double>(chamfer_l2(recon, cloud));
    const double tau = static_cast<double>(default_f_score_tau(cloud));
    const double f = static_cast<double>(f_score(recon, cloud));
    cd1 += a;
    cd2 += b;
    fs += f;
    csv.row({std::to_string(i), detail::fmt_g9(a), detail::fmt_g9(b), detail::fmt_g9(f),
             detail::fmt_g9(tau)});
  }
  const double n = static_cast<double>(test.size());
  res.mean.cd_l1 = cd1 / n;
  res.mean.cd_l2 = cd2 / n;
  res.mean.f_score = fs / n;
  csv.row({"mean", detail::fmt_g9(res.mean.cd_l1), detail::fmt_g9(res.mean.cd_l2),
           detail::fmt_g9(res.mean.f_score), ""});

  std::ostringstream tbl;
  tbl << "reconstruction on " << test.size() << " held-out clouds\n"
      << "  cd_l1   " << detail::fmt_g9(res.mean.cd_l1) << "\n"
      << "  cd_l2   " << detail::fmt_g9(res.mean.cd_l2) << "\n"
      << "  f_score " << detail::fmt_g9(res.mean.f_score)
      << "  (tau = 1% of each cloud's bbox diagonal)\n";
  res.table = tbl.str();
  return res;
}

struct ExportResult {
  int64_t rows = 0;
  int64_t feature_dim = 0;
  std::string out_path;
};

template <typename T = float>
inline ExportResult cmd_export_features(const RunConfig& cfg) {
  auto student = build_student<T>(cfg);
  if (cfg.export_checkpoint != "random") {
    load_checkpoint(detail::join_path(cfg.out_dir, cfg.export_checkpoint), student.ps);
  }

  ExportResult res;
  res.feature_dim = 2 * cfg.student.width;
  detail::ensure_dir(cfg.out_dir);
  res.out_path = detail::join_path(cfg.out_dir, cfg.export_out);

  std::string header = "id,label";
  for (int64_t j = 0; j < res.feature_dim; ++j) header += ",f" + std::to_string(j + 1);
  detail::CsvWriter csv(res.out_path, header);

  int64_t id = 0;
  for (const char* split : {"train.txt", "val.txt", "test.txt"}) {
    auto ds = load_split<T>(detail::join_path(cfg.data_dir, split));
    for (int64_t i = 0; i < ds.size(); ++i) {
      TapeT<T> tape;
      auto f = student_global_feature(tape, student.model, ds.clouds[static_cast<size_t>(i)]);
      std::vector<std::string> cells;
      cells.reserve(static_cast<size_t>(res.feature_dim) + 2);
      cells.push_back(std::to_string(id++));
      cells.push_back(std::to_string(ds.labels[static_cast<size_t>(i)]));
      for (int64_t j = 0; j < res.feature_dim; ++j) {
        cells.push_back(detail::fmt_g9(static_cast<double>(f.v()[static_cast<size_t>(j)])));
      }
      csv.row(cells);
      ++res.rows;
    }
  }
  return res;
}

}  // namespace act
