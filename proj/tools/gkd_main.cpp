// SPDX-License-Identifier: Apache-2.0
//
// Single entry point for the whole pipeline: dataset synthesis, the four
// training phases, evaluation, and artifact export, all driven by one flat
// configuration. Failures leave a single-line JSON record on stderr.

#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gkd/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Exclusive lock file in the output directory; stale locks must be
/// removed by hand, which is the honest behavior for a crashed run.
class RunLock {
 public:
  explicit RunLock(const std::string& out_dir)
      : path_((fs::path(out_dir) / "lock").string()) {
    fs::create_directories(out_dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
      throw gkd::IoError("another run holds " + path_ +
                         " (remove the file if that run is dead)");
  }
  ~RunLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

std::vector<std::string> split_phases(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (const char c : s + ",") {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  return out;
}

int error_code(const std::exception& e) {
  if (dynamic_cast<const gkd::ConfigError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const gkd::ParamError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const gkd::IoError*>(&e) != nullptr) return 3;
  if (dynamic_cast<const gkd::NumericError*>(&e) != nullptr) return 4;
  return 1;
}

const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const gkd::ConfigError*>(&e) != nullptr) return "config";
  if (dynamic_cast<const gkd::ParamError*>(&e) != nullptr) return "param";
  if (dynamic_cast<const gkd::IoError*>(&e) != nullptr) return "io";
  if (dynamic_cast<const gkd::NumericError*>(&e) != nullptr) return "numeric";
  return "internal";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-domain segmentation distillation pipeline"};

  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  if (const char* env = std::getenv("GKD_OUT"); env != nullptr && *env != '\0')
    out_dir = env;
  std::string phases_arg = "p1,p2,p3,p4";
  bool eval_only = false;
  bool no_eval = false;
  bool print_config = false;
  bool latent_fsd = false;
  int dump_masks = 0;
  std::string export_dir;
  std::optional<std::uint64_t> seed;

  app.add_option("--config", config_path, "Configuration file (key = value)");
  app.add_option("--set", overrides, "Override one key, as key=value")
      ->type_name("KEY=VALUE");
  app.add_option("--out", out_dir,
                 "Output directory (env GKD_OUT overrides the default)");
  app.add_option("--phases", phases_arg,
                 "Comma-separated training phases to run, from p1,p2,p3,p4");
  app.add_flag("--eval-only", eval_only, "Skip training, evaluate only");
  app.add_flag("--no-eval", no_eval, "Train the listed phases, skip scoring");
  app.add_flag("--print-config", print_config,
               "Print the canonical configuration and exit");
  app.add_flag("--latent-fsd", latent_fsd,
               "Print the teacher/scratch latent distance and exit");
  app.add_option("--dump-masks", dump_masks,
                 "Also write N image/mask/prediction sets per test split");
  app.add_option("--export-dataset", export_dir,
                 "Write the synthetic dataset to this directory and exit");
  app.add_option("--seed", seed, "Shorthand for --set train.seed=N");

  CLI11_PARSE(app, argc, argv);

  try {
    gkd::Config cfg;
    if (!config_path.empty()) cfg = gkd::load_config(config_path);
    for (const std::string& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw gkd::ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.set("train.seed", std::to_string(*seed));
    cfg.validate();

    if (print_config) {
      std::cout << cfg.to_text();
      return 0;
    }

    gkd::train::Trainer trainer(cfg, out_dir);

    if (!export_dir.empty()) {
      trainer.export_data(export_dir);
      std::cout << "dataset exported to " << export_dir << '\n';
      return 0;
    }

    RunLock lock(out_dir);

    if (latent_fsd) {
      const auto [fa, fb] = trainer.latent_fsd();
      std::cout << "latent_fsd test_a=" << fa << " test_b=" << fb << '\n';
      return 0;
    }

    std::vector<std::string> phases;
    if (!eval_only) {
      phases = split_phases(phases_arg);
      if (phases.empty())
        throw gkd::ConfigError("--phases lists no phases to run");
      for (const auto& pl : trainer.run(phases)) {
        std::cout << "phase " << pl.phase << ": steps=" << pl.steps
                  << " first_loss=" << pl.first_loss
                  << " final_loss=" << pl.final_loss << '\n';
      }
    }

    bool evaluated = false;
    if (!no_eval) {
      const gkd::train::EvalReport report = trainer.evaluate();
      std::cout << report.text();
      evaluated = true;
      if (dump_masks > 0) {
        trainer.dump_masks(dump_masks);
        std::cout << "wrote prediction images under " << out_dir << "/masks\n";
      }
    }

    json manifest;
    manifest["config_hash"] = cfg.hash();
    manifest["phases_run"] = phases;
    manifest["evaluated"] = evaluated;
    std::ofstream os(fs::path(out_dir) / "run.json");
    if (!os) throw gkd::IoError("cannot write run.json in " + out_dir);
    os << manifest.dump(2) << '\n';
    return 0;
  } catch (const std::exception& e) {
    json err;
    err["error"] = error_kind(e);
    err["message"] = e.what();
    std::cerr << err.dump() << '\n';
    return error_code(e);
  }
}
