// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gkd/trainer.hpp"

using namespace gkd;
using namespace gkd::train;
namespace fs = std::filesystem;

namespace {

Config tiny_config() {
  Config cfg;
  cfg.set("data.size", "64");
  cfg.set("data.n_train", "8");
  cfg.set("data.n_test", "9");
  cfg.set("net.latent_dim", "8");
  cfg.set("net.teacher_widths", "2,4,6,8");
  cfg.set("net.student_widths", "1,2,3");
  cfg.set("train.batch_size", "4");
  cfg.set("train.epochs_p1", "6");
  cfg.set("train.epochs_p2", "4");
  cfg.set("train.epochs_p3", "4");
  cfg.set("train.epochs_p4", "2");
  cfg.set("train.tactics", "cutout,gauss_noise");
  cfg.validate();
  return cfg;
}

std::string fresh_dir(const std::string& name) {
  fs::remove_all(name);
  return name;
}

std::string first_line(const std::string& path) {
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  return line;
}

std::vector<Tensor> checkpoint_values(const Config& cfg,
                                      const std::string& dir,
                                      const std::string& phase) {
  nets::SegNet s(nets::Source::student, cfg.student_widths, cfg.data.size);
  nets::load_checkpoint(dir, phase, cfg.hash(), s.parameters());
  std::vector<Tensor> out;
  for (ad::Param* p : s.parameters()) out.push_back(p->value);
  return out;
}

}  // namespace

TEST_CASE("adam takes bias-corrected steps and skips frozen parameters") {
  ad::Param p("p", {2});
  ad::Param frozen("f", {2});
  frozen.trainable = false;
  frozen.value.array() = 5.0;
  Adam adam(0.1);
  for (int i = 0; i < 3; ++i) {
    p.grad.array() = 1.0;
    frozen.grad.array() = 1.0;
    adam.step({&p, &frozen});
  }
  // Constant unit gradients: both moment estimates bias-correct to 1, so
  // every step moves by almost exactly -lr.
  CHECK(p.value[0] == doctest::Approx(-0.3).epsilon(1e-6));
  CHECK(frozen.value[0] == 5.0);
  CHECK((p.grad.array() == 0.0).all());
  CHECK((frozen.grad.array() == 0.0).all());
  CHECK(adam.steps == 3);

  CHECK_THROWS_AS(Adam(0.0), ParamError);
}

TEST_CASE("guarded data seals the shifted split") {
  synth::Dataset ds = synth::make_dataset(11, 22, 2, 2, 32);
  GuardedData gd(std::move(ds));
  CHECK(gd.sealed());
  CHECK_NOTHROW(gd.train_a());
  CHECK_NOTHROW(gd.test_a());
  CHECK_THROWS_AS(gd.test_b(), Error);
  CHECK(gd.test_b_reads() == 0);
  gd.seal_test_b(false);
  CHECK(gd.test_b().size() == 2);
  CHECK(gd.test_b_reads() == 1);
  gd.seal_test_b(true);
  CHECK_THROWS_AS(gd.test_b(), Error);
}

TEST_CASE("phase prerequisites are enforced by name") {
  Trainer tr(tiny_config(), fresh_dir("tr_prereq"));
  CHECK_THROWS_WITH_AS(tr.run_phase("p3"), doctest::Contains("p1"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(tr.run_phase("p4"), doctest::Contains("p1"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(tr.evaluate(), doctest::Contains("p1"), ConfigError);
  CHECK_THROWS_AS(tr.run_phase("p9"), ParamError);

  tr.run_phase("p1");
  CHECK_THROWS_WITH_AS(tr.run_phase("p3"), doctest::Contains("p2"),
                       ConfigError);
  tr.run_phase("p2");
  CHECK_THROWS_WITH_AS(tr.run_phase("p4"), doctest::Contains("p3"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(tr.latent_fsd(), doctest::Contains("p3"), ConfigError);
}

TEST_CASE("output directories are bound to one configuration") {
  const std::string dir = fresh_dir("tr_bound");
  { Trainer tr(tiny_config(), dir); }
  CHECK_NOTHROW(Trainer(tiny_config(), dir));
  Config other = tiny_config();
  other.set("train.seed", "8");
  CHECK_THROWS_AS(Trainer(other, dir), ConfigError);
}

TEST_CASE("full pipeline trains, logs, checkpoints, and evaluates") {
  Config cfg = tiny_config();
  Trainer tr(cfg, fresh_dir("tr_full"));
  auto logs = tr.run({"p1", "p2", "p3", "p4"});
  REQUIRE(logs.size() == 4);

  CHECK(logs[0].steps == 12);  // 6 epochs x 2 batches
  CHECK(logs[0].final_loss < logs[0].first_loss);
  CHECK(logs[1].final_loss < logs[1].first_loss);
  CHECK(logs[2].final_loss < logs[2].first_loss);
  for (const PhaseLog& pl : logs) {
    CHECK(std::isfinite(pl.final_loss));
    CHECK(tr.phase_done(pl.phase));
  }
  for (const char* name :
       {"p1_loss.csv", "p2_loss.csv", "p3_loss.csv", "p4_loss.csv"}) {
    const std::string path = tr.out_dir() + "/logs/" + name;
    REQUIRE(fs::exists(path));
    CHECK(first_line(path) == "# config " + cfg.hash());
  }

  // Training never touched the shifted split.
  CHECK(tr.data().test_b_reads() == 0);
  CHECK(tr.data().sealed());

  EvalReport report = tr.evaluate();
  REQUIRE(report.models.size() == 3);
  CHECK(report.models[0].model == "teacher");
  CHECK(report.models[1].model == "student_scratch");
  CHECK(report.models[2].model == "student_distilled");
  for (const ModelEval& m : report.models) {
    for (const SplitEval* e : {&m.test_a, &m.test_b}) {
      CHECK(e->scores.acc >= 0.0);
      CHECK(e->scores.acc <= 1.0);
      REQUIRE(e->scores.se.has_value());
      REQUIRE(e->scores.miou.has_value());
      REQUIRE(e->auc.has_value());
      CHECK(*e->scores.miou >= 0.0);
      CHECK(*e->scores.miou <= 1.0);
    }
  }
  CHECK(std::isfinite(report.fsd_a));
  CHECK(std::isfinite(report.fsd_b));
  CHECK(report.fsd_a >= 0.0);
  CHECK(report.fsd_b >= 0.0);
  CHECK(fs::exists(tr.out_dir() + "/report.csv"));
  CHECK(fs::exists(tr.out_dir() + "/report.txt"));
  CHECK(report.csv().find("student_distilled,gap,") != std::string::npos);

  // Evaluation reads the shifted split, then reseals it.
  CHECK(tr.data().test_b_reads() > 0);
  CHECK(tr.data().sealed());

  // Header training and distillation must leave their frozen inputs alone.
  CHECK(logs[2].frozen_intact);
  CHECK(logs[3].frozen_intact);

  auto [fa, fb] = tr.latent_fsd();
  CHECK(std::isfinite(fa));
  CHECK(std::isfinite(fb));
  CHECK(fa >= 0.0);
  CHECK(fb >= 0.0);

  tr.dump_masks(1);
  int pgms = 0;
  for (const auto& e : fs::directory_iterator(tr.out_dir() + "/masks"))
    if (e.path().extension() == ".pgm") ++pgms;
  CHECK(pgms == 10);  // 2 splits x (image + mask + 3 predictions)
}

TEST_CASE("staged phase runs reproduce one chained run exactly") {
  Config cfg = tiny_config();
  const std::string chained = fresh_dir("tr_chained");
  const std::string staged = fresh_dir("tr_staged");
  {
    Trainer tr(cfg, chained);
    tr.run({"p1", "p2", "p3", "p4"});
  }
  for (const char* phase : {"p1", "p2", "p3", "p4"}) {
    Trainer tr(cfg, staged);  // fresh object per phase
    tr.run_phase(phase);
  }
  for (const char* phase : {"p4"}) {
    const auto a =
        checkpoint_values(cfg, chained + "/checkpoints/" + phase, phase);
    const auto b =
        checkpoint_values(cfg, staged + "/checkpoints/" + phase, phase);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK((a[i].array() == b[i].array()).all());
  }
}

TEST_CASE("distillation variants run under reduced objectives") {
  Config cfg = tiny_config();
  cfg.set("loss.alpha", "0");
  cfg.set("loss.beta", "0");
  cfg.set("loss.gamma", "0");
  Trainer tr(cfg, fresh_dir("tr_ce_only"));
  tr.run({"p1", "p2", "p3"});
  PhaseLog pl = tr.run_phase("p4");
  CHECK(pl.steps == 4);  // 2 epochs x 2 batches
  CHECK(std::isfinite(pl.final_loss));

  // The ce-only distilled loss equals plain supervision, so the logged
  // graph and reconstruction terms must be exactly zero.
  std::ifstream is(tr.out_dir() + "/logs/p4_loss.csv");
  std::string line;
  std::getline(is, line);  // config comment
  std::getline(is, line);  // header
  std::getline(is, line);
  CHECK(line.find(",0,0,0,") != std::string::npos);
}

TEST_CASE("warm-started distillation resumes from the scratch student") {
  Config cfg = tiny_config();
  cfg.set("train.warm_start_student", "true");
  cfg.set("train.epochs_p4", "1");
  Trainer tr(cfg, fresh_dir("tr_warm"));
  tr.run({"p1", "p2", "p3", "p4"});
  CHECK(tr.phase_done("p4"));

  Config fresh = tiny_config();
  fresh.set("train.epochs_p4", "1");
  Trainer tf(fresh, fresh_dir("tr_cold"));
  tf.run({"p1", "p2", "p3", "p4"});

  const auto warm =
      checkpoint_values(cfg, tr.out_dir() + "/checkpoints/p4", "p4");
  const auto cold =
      checkpoint_values(fresh, tf.out_dir() + "/checkpoints/p4", "p4");
  bool same = true;
  for (std::size_t i = 0; i < warm.size(); ++i)
    if (!(warm[i].array() == cold[i].array()).all()) same = false;
  CHECK_FALSE(same);
}

TEST_CASE("pgm writer emits valid 8-bit images") {
  Tensor img({1, 2, 3});
  img[0] = 0.0;
  img[1] = 1.0;
  img[2] = 0.5;
  img[3] = 2.0;  // clamped
  img[4] = -1.0;
  img[5] = 0.25;
  write_pgm("pgm_check/img.pgm", img);
  std::ifstream is("pgm_check/img.pgm", std::ios::binary);
  std::string magic, dims;
  std::getline(is, magic);
  std::getline(is, dims);
  CHECK(magic == "P5");
  CHECK(dims == "3 2");
  std::getline(is, dims);
  CHECK(dims == "255");
  unsigned char px[6];
  is.read(reinterpret_cast<char*>(px), 6);
  CHECK(px[0] == 0);
  CHECK(px[1] == 255);
  CHECK(px[2] == 128);
  CHECK(px[3] == 255);
  CHECK(px[4] == 0);
  CHECK(px[5] == 64);
  CHECK_THROWS_AS(write_pgm("pgm_check/bad.pgm", Tensor({2, 2, 2})),
                  ParamError);
}
