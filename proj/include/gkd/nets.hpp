// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gkd/autodiff.hpp"
#include "gkd/rng.hpp"
#include "gkd/tensor.hpp"

namespace gkd::nets {

using ad::Param;

/// Which network a bottleneck feature came from. Alignment headers are
/// bound to one source and refuse features from the other.
enum class Source { teacher, student };
std::string to_string(Source s);

struct BottleneckFeature {
  Tensor data;  // [B,C',H',W']
  Source source = Source::teacher;
};

// ---- layers ---------------------------------------------------------------

struct Conv2d {
  Param w, b;
  int stride = 1, pad = 1;
  Conv2d(const std::string& name, int cin, int cout, int k, int stride,
         int pad);
  void init(Rng& rng);  // He fan-in, zero bias
  ad::Var operator()(ad::Tape& t, const ad::Var& x);
  void collect(std::vector<Param*>& out);
};

struct ConvTranspose2d {
  Param w, b;
  int stride = 2, pad = 1, out_pad = 1;
  ConvTranspose2d(const std::string& name, int cin, int cout, int k,
                  int stride, int pad, int out_pad);
  void init(Rng& rng);
  ad::Var operator()(ad::Tape& t, const ad::Var& x);
  void collect(std::vector<Param*>& out);
};

struct Dense {
  Param w, b;
  Dense(const std::string& name, int in, int out);
  void init(Rng& rng);
  ad::Var operator()(ad::Tape& t, const ad::Var& x);
  void collect(std::vector<Param*>& out);
};

// ---- segmentation network -------------------------------------------------

/// Fully convolutional encoder/decoder with skip connections. Every
/// encoder stage halves the spatial size; the decoder mirrors it with
/// transposed convolutions and channel concatenation. The teacher simply
/// uses more and wider stages than the student.
class SegNet {
 public:
  SegNet(Source role, std::vector<int> widths, int input_size,
         int in_channels = 1);

  void init(std::uint64_t seed);
  void set_trainable(bool trainable);
  std::vector<Param*> parameters();
  std::int64_t parameter_count();

  /// Encoder; skips receives one entry per stage except the last.
  ad::Var encode(ad::Tape& t, const ad::Var& images,
                 std::vector<ad::Var>* skips);
  /// Decoder from a bottleneck plus matching skip list to a [B,1,S,S]
  /// prediction in (0,1).
  ad::Var decode(ad::Tape& t, const ad::Var& bottleneck,
                 const std::vector<ad::Var>& skips);

  struct ForwardVars {
    ad::Var bottleneck;
    std::vector<ad::Var> skips;
    ad::Var prediction;
  };
  ForwardVars forward(ad::Tape& t, const ad::Var& images);

  struct Inference {
    BottleneckFeature feature;
    std::vector<Tensor> skips;
    Tensor prediction;
  };
  /// Gradient-free forward pass for evaluation and caching.
  Inference infer(const Tensor& images);

  Source role() const { return role_; }
  int input_size() const { return input_size_; }
  int bottleneck_channels() const { return widths_.back(); }
  int bottleneck_size() const;
  int stages() const { return static_cast<int>(widths_.size()); }

 private:
  Source role_;
  std::vector<int> widths_;
  int input_size_;
  std::vector<Conv2d> enc_;
  std::vector<ConvTranspose2d> up_;
  Conv2d head_;
};

// ---- mask autoencoder -----------------------------------------------------

/// Autoencoder over binary masks. The encoder compresses a mask to a
/// latent row; the decoder reproduces the mask through a sigmoid. Its
/// latent space anchors the alignment latents of both networks.
class Psae {
 public:
  Psae(int latent_dim, int input_size);

  void init(std::uint64_t seed);
  void set_trainable(bool trainable);
  std::vector<Param*> parameters();

  ad::Var encode(ad::Tape& t, const ad::Var& masks);  // -> [B,C]
  ad::Var decode(ad::Tape& t, const ad::Var& latent);  // -> [B,1,S,S]

  /// Evaluation-mode encode; rejects non-binary input.
  Tensor encode_eval(const Tensor& masks);
  Tensor decode_eval(const Tensor& latent);

  int latent_dim() const { return latent_dim_; }

 private:
  int latent_dim_;
  int input_size_;
  std::vector<Conv2d> enc_;
  Dense to_latent_;
  Dense from_latent_;
  int start_size_;
  std::vector<ConvTranspose2d> up_;
  Conv2d head_;
};

// ---- alignment headers ----------------------------------------------------

/// Encoder/decoder pair between one network's bottleneck feature space and
/// the shared latent space. A header is bound to its source network on the
/// encode side; decode accepts any latent, which is what makes the
/// cross-reconstruction exchange possible.
class MsanHeader {
 public:
  MsanHeader(Source source, int feat_channels, int feat_size, int latent_dim);

  void init(std::uint64_t seed);
  void set_trainable(bool trainable);
  std::vector<Param*> parameters();

  /// src names the network that produced `feature`; a mismatch with the
  /// bound source throws ParamError.
  ad::Var encode(ad::Tape& t, const ad::Var& feature, Source src);
  ad::Var decode(ad::Tape& t, const ad::Var& latent);

  Tensor encode_eval(const BottleneckFeature& feature);
  Tensor decode_eval(const Tensor& latent);

  Source source() const { return source_; }
  int feat_channels() const { return feat_channels_; }
  int feat_size() const { return feat_size_; }

 private:
  Source source_;
  int feat_channels_;
  int feat_size_;
  int latent_dim_;
  Conv2d conv1_, conv2_;
  Dense to_latent_;
  Dense from_latent_;
  int start_size_;
  ConvTranspose2d up1_, up2_;
};

// ---- model bundle ---------------------------------------------------------

struct NetConfig {
  int input_size = 128;
  int latent_dim = 64;
  std::vector<int> teacher_widths = {8, 16, 24, 32};
  std::vector<int> student_widths = {4, 8, 12};

  void validate() const;
};

/// All five networks wired to one configuration. Construction checks that
/// the teacher really is the larger model.
struct ModelBundle {
  SegNet teacher;
  SegNet student;
  Psae psae;
  MsanHeader tan;
  MsanHeader san;

  ModelBundle(const NetConfig& cfg, std::uint64_t seed);
  std::vector<Param*> all_params();
};

// ---- checkpoints ----------------------------------------------------------

/// One directory per phase: checkpoint.json plus one tensor file per
/// parameter. Values are stored as f32.
void save_checkpoint(const std::string& dir, const std::string& phase_tag,
                     const std::string& config_hash,
                     const std::vector<Param*>& params);

/// Loads parameters by name with shape-for-shape validation; any missing,
/// unexpected, or misshapen tensor raises IoError naming it. A phase or
/// config hash mismatch raises ConfigError.
void load_checkpoint(const std::string& dir, const std::string& expected_phase,
                     const std::string& expected_config_hash,
                     const std::vector<Param*>& params);

bool checkpoint_exists(const std::string& dir);

}  // namespace gkd::nets
