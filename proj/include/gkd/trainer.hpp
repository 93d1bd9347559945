// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gkd/config.hpp"
#include "gkd/metrics.hpp"
#include "gkd/nets.hpp"
#include "gkd/synthdata.hpp"

namespace gkd::train {

/// Adam with bias correction. step() consumes the accumulated gradients
/// and zeroes them; frozen parameters are skipped entirely.
struct Adam {
  double lr;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t steps = 0;

  explicit Adam(double lr_in) : lr(lr_in) {
    check_param(lr > 0.0, "Adam: learning rate must be positive");
  }
  void step(const std::vector<ad::Param*>& params);
};

/// Dataset wrapper that makes the domain-shift protocol auditable: while
/// sealed, any read of the target-domain test split throws. Training
/// phases keep it sealed; evaluation unseals it and reseals afterwards.
class GuardedData {
 public:
  explicit GuardedData(synth::Dataset ds) : ds_(std::move(ds)) {}

  const std::vector<synth::SegSample>& train_a() const { return ds_.train_a; }
  const std::vector<synth::SegSample>& test_a() const { return ds_.test_a; }
  const std::vector<synth::SegSample>& test_b() const;
  void seal_test_b(bool sealed) { sealed_ = sealed; }
  bool sealed() const { return sealed_; }
  std::int64_t test_b_reads() const { return test_b_reads_; }
  int image_size() const { return ds_.size; }
  const synth::Dataset& raw() const { return ds_; }

 private:
  synth::Dataset ds_;
  bool sealed_ = true;
  mutable std::int64_t test_b_reads_ = 0;
};

struct PhaseLog {
  std::string phase;
  int steps = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;
  // False only if a parameter that the phase must not touch changed value
  // between phase start and phase end. Phases without frozen inputs report
  // true.
  bool frozen_intact = true;
};

struct SplitEval {
  metrics::SegScores scores;
  std::optional<double> auc;
};

struct ModelEval {
  std::string model;
  SplitEval test_a;
  SplitEval test_b;
};

struct EvalReport {
  std::vector<ModelEval> models;  // teacher, student_scratch, student_distilled
  double fsd_a = 0.0;  // distilled latents vs mask-space latents, source split
  double fsd_b = 0.0;  // same on the shifted split

  std::string csv() const;
  std::string text() const;
};

/// Binary (P5) PGM writer for [H,W] or [1,H,W] tensors with values in
/// [0,1]; values are quantized to 8 bits.
void write_pgm(const std::string& path, const Tensor& image);

/// Phase orchestration over one output directory:
///   p1  mask autoencoder on source masks
///   p2  teacher and scratch student, supervised on the source split
///   p3  alignment headers on frozen features, anchored to mask latents
///   p4  student distillation against the frozen teacher side
/// Each phase reloads its prerequisites from disk, so running phases one
/// per process produces bit-identical results to one chained run.
class Trainer {
 public:
  Trainer(Config cfg, std::string out_dir);

  const Config& config() const { return cfg_; }
  const std::string& out_dir() const { return out_dir_; }
  GuardedData& data();

  std::string checkpoint_dir(const std::string& phase) const;
  bool phase_done(const std::string& phase) const;

  PhaseLog run_phase(const std::string& phase);
  std::vector<PhaseLog> run(const std::vector<std::string>& phases);

  /// Scores all three models on both test splits and measures how far the
  /// distilled student's aligned latents sit from the mask-space latents.
  /// Needs p1..p4.
  EvalReport evaluate();

  /// Distance between the scratch student's aligned latents and the
  /// mask-space latents on both test splits; needs p1..p3 only.
  /// Returns {test_a, test_b}.
  std::pair<double, double> latent_fsd();

  /// Writes image/mask/prediction triplets for the first `per_split`
  /// samples of each split under <out>/masks. Needs p1..p4.
  void dump_masks(int per_split);

  void export_data(const std::string& dir);

 private:
  PhaseLog run_p1();
  PhaseLog run_p2();
  PhaseLog run_p3();
  PhaseLog run_p4();
  void require_done(const std::string& phase, const std::string& who);
  std::vector<int> epoch_order(int n, int phase_no, int epoch) const;
  std::uint64_t bundle_seed(const synth::SegSample& s) const;

  Config cfg_;
  std::string out_dir_;
  std::string hash_;
  std::optional<GuardedData> data_;
};

}  // namespace gkd::train
