// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gkd/tensor.hpp"

namespace gkd::synth {

enum class DomainId { A, B };
enum class ShapeFamily { ellipse_blob, ribbon_curve };
enum class TextureKind { smooth, striped, speckled };
enum class Tactic { cutout, sobel, gauss_noise, gauss_blur };

std::string to_string(DomainId d);
std::string to_string(ShapeFamily f);
std::string to_string(TextureKind t);
std::string to_string(Tactic t);
ShapeFamily shape_family_from_string(const std::string& s);
TextureKind texture_from_string(const std::string& s);
Tactic tactic_from_string(const std::string& s);

/// Foreground/background gray levels plus additive noise level, all on the
/// [0,1] intensity scale.
struct IntensityProfile {
  double fg_mean = 0.75;
  double bg_mean = 0.25;
  double noise_sigma = 0.02;
};

struct DomainSpec {
  ShapeFamily shape_family = ShapeFamily::ellipse_blob;
  IntensityProfile intensity;
  TextureKind texture = TextureKind::smooth;

  void validate() const;  // throws ParamError
};

DomainSpec default_domain_a();
DomainSpec default_domain_b();

/// One image/mask pair. image and mask are [1,H,W]; the mask is strictly
/// {0,1} and the image lies in [0,1].
struct SegSample {
  Tensor image;
  Tensor mask;
  DomainId domain_id = DomainId::A;
  std::uint64_t seed = 0;
  int id = 0;
};

/// Renders one sample as a pure function of (seed, spec, size). Foreground
/// area is kept within [0.05, 0.60] of the image by deterministic
/// re-rendering with derived seeds.
SegSample render_sample(std::uint64_t seed, const DomainSpec& spec, int size);

/// Axis-aligned crop of both image and mask; throws if the window leaves
/// the source bounds.
SegSample crop_patch(const SegSample& s, int top, int left, int size);

/// Applies one appearance tactic to an image. Masks are never touched:
/// every tactic changes intensity statistics only, so the anchor mask
/// stays valid for the augmented image.
Tensor augment(const Tensor& image, Tactic tactic, std::uint64_t seed);

/// Anchor plus its K augmented views, one per tactic, tactic i seeded with
/// mix_seed(seed, i).
struct CouplingBundle {
  SegSample anchor;
  std::vector<Tactic> tactics;
  std::vector<Tensor> augmented;
};

CouplingBundle make_coupling_bundle(const SegSample& anchor,
                                    const std::vector<Tactic>& tactics,
                                    std::uint64_t seed);

struct Dataset {
  std::vector<SegSample> train_a;
  std::vector<SegSample> test_a;
  std::vector<SegSample> test_b;
  int size = 0;
};

/// Builds train_A/test_A from domain A and test_B from domain B with
/// deterministic per-sample seeds, then checks that the two test splits are
/// separated in mean intensity by more than gap_threshold.
Dataset make_dataset(std::uint64_t seed_a, std::uint64_t seed_b, int n_train,
                     int n_test, const DomainSpec& spec_a,
                     const DomainSpec& spec_b, int size,
                     double gap_threshold = 0.05);
Dataset make_dataset(std::uint64_t seed_a, std::uint64_t seed_b, int n_train,
                     int n_test, int size = 128);

double mean_intensity(const std::vector<SegSample>& samples);
double mean_intensity_gap(const std::vector<SegSample>& a,
                          const std::vector<SegSample>& b);

bool is_binary(const Tensor& t);
double foreground_fraction(const Tensor& mask);

/// Stacks selected samples into [B,1,H,W] image and mask batches.
Tensor batch_images(const std::vector<SegSample>& samples,
                    const std::vector<int>& idx);
Tensor batch_masks(const std::vector<SegSample>& samples,
                   const std::vector<int>& idx);

/// Writes manifest.json plus one tensor file per image/mask; import
/// restores an identical dataset and validates shapes and mask binarity.
void export_dataset(const std::string& dir, const Dataset& ds,
                    const std::string& config_hash);
Dataset import_dataset(const std::string& dir);

namespace detail {
/// Separable Gaussian blur, reflected borders, kernel normalized to sum 1.
Tensor gaussian_blur(const Tensor& img, int ksize, double sigma);
/// Sobel gradient magnitude, reflected borders, normalized by the max
/// magnitude; an all-flat image maps to all zeros.
Tensor sobel_magnitude(const Tensor& img);
}  // namespace detail

}  // namespace gkd::synth
