#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "act/pipeline.hpp"

namespace {

struct Cli {
  std::string command;
  std::string config_path;
  int64_t seed = -1;       // -1 keeps the config's seed
  std::string out_dir;     // empty keeps the config's out_dir
};

act::RunConfig load_config(const Cli& cli) {
  auto cfg = cli.config_path.empty() ? act::RunConfig::from_text(act::default_config_text())
                                     : act::RunConfig::from_file(cli.config_path);
  if (cli.seed >= 0) cfg.seed = static_cast<uint64_t>(cli.seed);
  if (!cli.out_dir.empty()) cfg.out_dir = cli.out_dir;
  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  if (ec) throw act::IoError("cannot create " + cfg.out_dir + ": " + ec.message());
  return cfg;
}

int run(const Cli& cli) {
  const auto cfg = load_config(cli);
  std::printf("config digest %016llx, seed %llu\n",
              static_cast<unsigned long long>(cfg.digest()),
              static_cast<unsigned long long>(cfg.seed));

  if (cli.command == "gen-data") {
    const auto r = act::cmd_gen_data(cfg);
    std::printf("wrote %lld clouds and %zu manifests under %s\n",
                static_cast<long long>(r.files), r.manifests.size(), cfg.data_dir.c_str());
  } else if (cli.command == "train-dvae") {
    const auto r = act::cmd_train_dvae(cfg);
    std::printf("held-out cd_l1 %.9g -> %.9g\n", r.cd_l1_first, r.cd_l1_last);
    std::printf("checkpoint %s\nmetrics %s\n", r.checkpoint_path.c_str(),
                r.metrics_path.c_str());
  } else if (cli.command == "train-mpm") {
    const auto r = act::cmd_train_mpm(cfg);
    std::printf("train loss %.9g -> %.9g\n", r.loss_first, r.loss_last);
    std::printf("checkpoint %s\nmetrics %s\n", r.checkpoint_path.c_str(),
                r.metrics_path.c_str());
  } else if (cli.command == "probe") {
    const auto r = act::cmd_probe(cfg);
    std::printf("%s probe accuracy %.9g\n", r.protocol.c_str(), r.accuracy);
    std::printf("metrics %s\n", r.metrics_path.c_str());
  } else if (cli.command == "eval-recon") {
    const auto r = act::cmd_eval_recon(cfg);
    std::fputs(r.table.c_str(), stdout);
    std::printf("metrics %s\n", r.metrics_path.c_str());
  } else {
    const auto r = act::cmd_export_features(cfg);
    std::printf("wrote %lld rows of %lld features to %s\n",
                static_cast<long long>(r.rows), static_cast<long long>(r.feature_dim),
                r.out_path.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"point cloud teacher/student training pipeline"};
  app.require_subcommand(1);

  Cli cli;
  for (const char* name : {"gen-data", "train-dvae", "train-mpm", "probe", "eval-recon",
                           "export-features"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", cli.config_path, "config file (defaults apply if omitted)");
    sub->add_option("--seed", cli.seed, "override [run] seed");
    sub->add_option("--out", cli.out_dir, "override [run] out_dir");
    sub->callback([&cli, name]() { cli.command = name; });
  }

  CLI11_PARSE(app, argc, argv);

  try {
    return run(cli);
  } catch (const act::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const act::ArgumentError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const act::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const act::CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return 3;
  } catch (const act::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
