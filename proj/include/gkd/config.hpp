// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "gkd/graphs.hpp"
#include "gkd/losses.hpp"
#include "gkd/nets.hpp"
#include "gkd/synthdata.hpp"

namespace gkd {

struct DataConfig {
  int size = 128;
  int n_train = 64;
  int n_test = 96;
  std::uint64_t seed_a = 11;
  std::uint64_t seed_b = 22;
  double gap_threshold = 0.05;
  synth::DomainSpec domain_a = synth::default_domain_a();
  synth::DomainSpec domain_b = synth::default_domain_b();
};

struct TrainConfig {
  int batch_size = 16;
  double lr = 0.003;
  int epochs_p1 = 20;
  int epochs_p2 = 30;
  int epochs_p3 = 20;
  int epochs_p4 = 30;
  std::vector<synth::Tactic> tactics = {
      synth::Tactic::cutout, synth::Tactic::sobel, synth::Tactic::gauss_noise,
      synth::Tactic::gauss_blur};
  std::uint64_t seed = 7;
  bool warm_start_student = false;
};

struct EvalConfig {
  double threshold = 0.5;
  double fsd_epsilon = 1e-6;
};

/// Flat `key = value` configuration for the whole pipeline. Every key has a
/// default; unknown keys are rejected rather than ignored so a typo cannot
/// silently fall back to a default.
struct Config {
  DataConfig data;
  int latent_dim = 64;
  std::vector<int> teacher_widths = {8, 16, 24, 32};
  std::vector<int> student_widths = {4, 8, 12};
  TrainConfig train;
  losses::LossWeights loss;
  graphs::IntraNodeMode node_mode = graphs::IntraNodeMode::self_product;
  EvalConfig eval;

  /// Applies one key/value pair; ConfigError on unknown key or bad value.
  void set(const std::string& key, const std::string& value);
  void validate() const;

  nets::NetConfig net_config() const;

  /// Canonical listing of every key in fixed order; parsing it back yields
  /// an identical configuration, and the hash is computed over it.
  std::string to_text() const;
  std::string hash() const;  // 16 hex digits
};

std::uint64_t fnv1a64(std::string_view bytes);

/// Parses `key = value` lines; '#' starts a comment, blank lines are
/// skipped, and a key may appear at most once.
Config parse_config_text(const std::string& text);
Config load_config(const std::string& path);

}  // namespace gkd
