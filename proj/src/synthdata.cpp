// SPDX-License-Identifier: Apache-2.0
#include "gkd/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include "json.hpp"

#include "gkd/rng.hpp"
#include "gkd/tensorio.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gkd::synth {

namespace {

constexpr double kMinForeground = 0.05;
constexpr double kMaxForeground = 0.60;
constexpr int kMaxRenderAttempts = 32;

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

void check_image_shape(const Tensor& img, const char* who) {
  check_param(img.rank() == 3 && img.dim(0) == 1 && img.dim(1) >= 1 &&
                  img.dim(2) >= 1,
              std::string(who) + ": expected [1,H,W] image, got " +
                  shape_str(img.shape()));
}

}  // namespace

std::string to_string(DomainId d) { return d == DomainId::A ? "A" : "B"; }

std::string to_string(ShapeFamily f) {
  return f == ShapeFamily::ellipse_blob ? "ellipse-blob" : "ribbon-curve";
}

std::string to_string(TextureKind t) {
  switch (t) {
    case TextureKind::smooth: return "smooth";
    case TextureKind::striped: return "striped";
    default: return "speckled";
  }
}

std::string to_string(Tactic t) {
  switch (t) {
    case Tactic::cutout: return "cutout";
    case Tactic::sobel: return "sobel";
    case Tactic::gauss_noise: return "gauss_noise";
    default: return "gauss_blur";
  }
}

ShapeFamily shape_family_from_string(const std::string& s) {
  if (s == "ellipse-blob") return ShapeFamily::ellipse_blob;
  if (s == "ribbon-curve") return ShapeFamily::ribbon_curve;
  throw ParamError("unknown shape family: " + s);
}

TextureKind texture_from_string(const std::string& s) {
  if (s == "smooth") return TextureKind::smooth;
  if (s == "striped") return TextureKind::striped;
  if (s == "speckled") return TextureKind::speckled;
  throw ParamError("unknown texture: " + s);
}

Tactic tactic_from_string(const std::string& s) {
  if (s == "cutout") return Tactic::cutout;
  if (s == "sobel") return Tactic::sobel;
  if (s == "gauss_noise") return Tactic::gauss_noise;
  if (s == "gauss_blur") return Tactic::gauss_blur;
  throw ParamError("unknown augmentation tactic: " + s);
}

void DomainSpec::validate() const {
  const auto& in = intensity;
  check_param(in.fg_mean >= 0.0 && in.fg_mean <= 1.0 && in.bg_mean >= 0.0 &&
                  in.bg_mean <= 1.0,
              "DomainSpec: intensity means must lie in [0,1]");
  check_param(std::abs(in.fg_mean - in.bg_mean) >= 0.05,
              "DomainSpec: foreground and background means too close");
  check_param(in.noise_sigma >= 0.0 && in.noise_sigma <= 0.5,
              "DomainSpec: noise sigma out of range");
}

DomainSpec default_domain_a() {
  return {ShapeFamily::ellipse_blob, {0.75, 0.25, 0.02}, TextureKind::smooth};
}

DomainSpec default_domain_b() {
  return {ShapeFamily::ribbon_curve, {0.60, 0.40, 0.03}, TextureKind::striped};
}

namespace detail {

Tensor gaussian_blur(const Tensor& img, int ksize, double sigma) {
  check_image_shape(img, "gaussian_blur");
  check_param(ksize >= 1 && ksize % 2 == 1, "gaussian_blur: kernel size must be odd");
  check_param(sigma > 0.0, "gaussian_blur: sigma must be positive");
  const int H = img.dim(1), W = img.dim(2);
  const int c = ksize / 2;
  std::vector<double> k(static_cast<std::size_t>(ksize));
  double sum = 0.0;
  for (int i = 0; i < ksize; ++i) {
    k[static_cast<std::size_t>(i)] =
        std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
    sum += k[static_cast<std::size_t>(i)];
  }
  for (double& v : k) v /= sum;

  Tensor tmp({1, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int i = 0; i < ksize; ++i)
        acc += k[static_cast<std::size_t>(i)] *
               img[static_cast<Eigen::Index>(y) * W + reflect_index(x - c + i, W)];
      tmp[static_cast<Eigen::Index>(y) * W + x] = acc;
    }
  Tensor out({1, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int i = 0; i < ksize; ++i)
        acc += k[static_cast<std::size_t>(i)] *
               tmp[static_cast<Eigen::Index>(reflect_index(y - c + i, H)) * W + x];
      out[static_cast<Eigen::Index>(y) * W + x] = acc;
    }
  return out;
}

Tensor sobel_magnitude(const Tensor& img) {
  check_image_shape(img, "sobel_magnitude");
  const int H = img.dim(1), W = img.dim(2);
  static const int gx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  Tensor out({1, H, W});
  double maxmag = 0.0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double sx = 0.0, sy = 0.0;
      for (int u = -1; u <= 1; ++u)
        for (int v = -1; v <= 1; ++v) {
          const double p = img[static_cast<Eigen::Index>(
                                   reflect_index(y + u, H)) *
                                   W +
                               reflect_index(x + v, W)];
          sx += gx[u + 1][v + 1] * p;
          sy += gx[v + 1][u + 1] * p;
        }
      const double mag = std::hypot(sx, sy);
      out[static_cast<Eigen::Index>(y) * W + x] = mag;
      maxmag = std::max(maxmag, mag);
    }
  if (maxmag < 1e-12) {
    out.array().setZero();
    return out;
  }
  out.array() /= maxmag;
  return out;
}

}  // namespace detail

namespace {

Tensor render_mask(Rng& r, ShapeFamily family, int size) {
  const double S = static_cast<double>(size);
  Tensor mask({1, size, size});
  if (family == ShapeFamily::ellipse_blob) {
    const double cx = r.uniform(0.30, 0.70) * S;
    const double cy = r.uniform(0.30, 0.70) * S;
    const double a = r.uniform(0.16, 0.30) * S;
    const double b = r.uniform(0.12, 0.24) * S;
    const double th = r.uniform(0.0, M_PI);
    const bool satellite = r.uniform() < 0.6;
    const double scx = cx + r.uniform(-0.25, 0.25) * S;
    const double scy = cy + r.uniform(-0.25, 0.25) * S;
    const double sa = r.uniform(0.06, 0.12) * S;
    const double sb = r.uniform(0.05, 0.10) * S;
    const double ct = std::cos(th), st = std::sin(th);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double dx = x - cx, dy = y - cy;
        const double u = (dx * ct + dy * st) / a;
        const double v = (-dx * st + dy * ct) / b;
        bool fg = u * u + v * v <= 1.0;
        if (!fg && satellite) {
          const double du = (x - scx) / sa, dv = (y - scy) / sb;
          fg = du * du + dv * dv <= 1.0;
        }
        mask[static_cast<Eigen::Index>(y) * size + x] = fg ? 1.0 : 0.0;
      }
  } else {
    const double yc = r.uniform(0.35, 0.65) * S;
    const double amp = r.uniform(0.08, 0.18) * S;
    const double freq = r.uniform(1.0, 2.2);
    const double phase = r.uniform(0.0, 2.0 * M_PI);
    const double halfw = r.uniform(0.05, 0.10) * S;
    const bool vertical = r.uniform() < 0.5;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double along = vertical ? y : x;
        const double across = vertical ? x : y;
        const double center =
            yc + amp * std::sin(2.0 * M_PI * freq * along / S + phase);
        mask[static_cast<Eigen::Index>(y) * size + x] =
            std::abs(across - center) <= halfw ? 1.0 : 0.0;
      }
  }
  return mask;
}

Tensor render_image(Rng& r, const Tensor& mask, const DomainSpec& spec,
                    int size) {
  const double fg = spec.intensity.fg_mean;
  const double bg = spec.intensity.bg_mean;
  Tensor soft = detail::gaussian_blur(mask, 5, 1.0);
  Tensor img({1, size, size});
  img.array() = bg + (fg - bg) * soft.array();

  if (spec.texture == TextureKind::striped) {
    const double alpha = r.uniform(0.0, M_PI);
    const double period = r.uniform(6.0, 12.0);
    const double amp = 0.06;
    const double ca = std::cos(alpha), sa = std::sin(alpha);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        img[static_cast<Eigen::Index>(y) * size + x] +=
            amp * std::sin(2.0 * M_PI * (x * ca + y * sa) / period);
  } else if (spec.texture == TextureKind::speckled) {
    Tensor n({1, size, size});
    for (Eigen::Index i = 0; i < n.size(); ++i) n[i] = r.uniform(-1.0, 1.0);
    img.array() += 0.08 * detail::gaussian_blur(n, 5, 1.0).array();
  }

  if (spec.intensity.noise_sigma > 0.0)
    for (Eigen::Index i = 0; i < img.size(); ++i)
      img[i] += spec.intensity.noise_sigma * r.normal();
  img.array() = img.array().min(1.0).max(0.0);
  return img;
}

}  // namespace

SegSample render_sample(std::uint64_t seed, const DomainSpec& spec, int size) {
  spec.validate();
  check_param(size >= 16, "render_sample: size must be at least 16");
  for (int attempt = 0; attempt < kMaxRenderAttempts; ++attempt) {
    const std::uint64_t s = attempt == 0 ? seed : mix_seed(seed, 0xA00 + attempt);
    Rng geo(mix_seed(s, 1));
    Tensor mask = render_mask(geo, spec.shape_family, size);
    const double frac = foreground_fraction(mask);
    if (frac < kMinForeground || frac > kMaxForeground) continue;
    Rng tex(mix_seed(s, 2));
    SegSample out;
    out.image = render_image(tex, mask, spec, size);
    out.mask = std::move(mask);
    out.seed = seed;
    return out;
  }
  throw ParamError("render_sample: could not reach target foreground fraction");
}

SegSample crop_patch(const SegSample& s, int top, int left, int size) {
  check_image_shape(s.image, "crop_patch");
  const int H = s.image.dim(1), W = s.image.dim(2);
  check_param(size >= 1 && top >= 0 && left >= 0 && top + size <= H &&
                  left + size <= W,
              "crop_patch: window leaves image bounds");
  SegSample out;
  out.image = Tensor({1, size, size});
  out.mask = Tensor({1, size, size});
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      out.image[static_cast<Eigen::Index>(y) * size + x] =
          s.image[static_cast<Eigen::Index>(top + y) * W + left + x];
      out.mask[static_cast<Eigen::Index>(y) * size + x] =
          s.mask[static_cast<Eigen::Index>(top + y) * W + left + x];
    }
  out.domain_id = s.domain_id;
  out.seed = s.seed;
  out.id = s.id;
  return out;
}

Tensor augment(const Tensor& image, Tactic tactic, std::uint64_t seed) {
  check_image_shape(image, "augment");
  const int H = image.dim(1), W = image.dim(2);
  Rng r(seed);
  switch (tactic) {
    case Tactic::cutout: {
      const double areafrac = r.uniform(0.10, 0.25);
      const double aspect = r.uniform(0.5, 2.0);
      int w = std::clamp(
          static_cast<int>(std::lround(std::sqrt(H * W * areafrac * aspect))),
          1, W);
      int h = std::clamp(
          static_cast<int>(std::lround(H * W * areafrac / w)), 1, H);
      const int top = r.uniform_int(0, H - h);
      const int left = r.uniform_int(0, W - w);
      Tensor out = image;
      for (int y = top; y < top + h; ++y)
        for (int x = left; x < left + w; ++x)
          out[static_cast<Eigen::Index>(y) * W + x] = 0.0;
      return out;
    }
    case Tactic::sobel:
      return detail::sobel_magnitude(image);
    case Tactic::gauss_noise: {
      const double sigma = r.uniform(0.01, 0.05);
      Tensor out = image;
      for (Eigen::Index i = 0; i < out.size(); ++i) out[i] += sigma * r.normal();
      out.array() = out.array().min(1.0).max(0.0);
      return out;
    }
    case Tactic::gauss_blur:
      return detail::gaussian_blur(image, 5, 1.0);
  }
  throw ParamError("augment: unknown tactic");
}

CouplingBundle make_coupling_bundle(const SegSample& anchor,
                                    const std::vector<Tactic>& tactics,
                                    std::uint64_t seed) {
  check_param(!tactics.empty(), "make_coupling_bundle: no tactics given");
  CouplingBundle b;
  b.anchor = anchor;
  b.tactics = tactics;
  b.augmented.reserve(tactics.size());
  for (std::size_t i = 0; i < tactics.size(); ++i)
    b.augmented.push_back(
        augment(anchor.image, tactics[i], mix_seed(seed, i)));
  return b;
}

Dataset make_dataset(std::uint64_t seed_a, std::uint64_t seed_b, int n_train,
                     int n_test, const DomainSpec& spec_a,
                     const DomainSpec& spec_b, int size, double gap_threshold) {
  check_param(n_train >= 1 && n_test >= 1, "make_dataset: empty split");
  Dataset ds;
  ds.size = size;
  int next_id = 0;
  for (int i = 0; i < n_train; ++i) {
    SegSample s = render_sample(mix_seed(seed_a, i), spec_a, size);
    s.domain_id = DomainId::A;
    s.id = next_id++;
    ds.train_a.push_back(std::move(s));
  }
  for (int i = 0; i < n_test; ++i) {
    SegSample s = render_sample(mix_seed(seed_a, 0x10000 + i), spec_a, size);
    s.domain_id = DomainId::A;
    s.id = next_id++;
    ds.test_a.push_back(std::move(s));
  }
  for (int i = 0; i < n_test; ++i) {
    SegSample s = render_sample(mix_seed(seed_b, 0x20000 + i), spec_b, size);
    s.domain_id = DomainId::B;
    s.id = next_id++;
    ds.test_b.push_back(std::move(s));
  }
  const double gap = mean_intensity_gap(ds.test_a, ds.test_b);
  check_param(gap > gap_threshold,
              "make_dataset: domain separation too small: measured gap " +
                  std::to_string(gap) + " <= threshold " +
                  std::to_string(gap_threshold));
  return ds;
}

Dataset make_dataset(std::uint64_t seed_a, std::uint64_t seed_b, int n_train,
                     int n_test, int size) {
  return make_dataset(seed_a, seed_b, n_train, n_test, default_domain_a(),
                      default_domain_b(), size);
}

double mean_intensity(const std::vector<SegSample>& samples) {
  check_param(!samples.empty(), "mean_intensity: empty sample list");
  double acc = 0.0;
  for (const SegSample& s : samples) acc += s.image.array().mean();
  return acc / static_cast<double>(samples.size());
}

double mean_intensity_gap(const std::vector<SegSample>& a,
                          const std::vector<SegSample>& b) {
  return std::abs(mean_intensity(a) - mean_intensity(b));
}

bool is_binary(const Tensor& t) {
  return ((t.array() == 0.0) || (t.array() == 1.0)).all();
}

double foreground_fraction(const Tensor& mask) {
  check_param(mask.size() > 0, "foreground_fraction: empty mask");
  return mask.array().sum() / static_cast<double>(mask.size());
}

Tensor batch_images(const std::vector<SegSample>& samples,
                    const std::vector<int>& idx) {
  check_param(!idx.empty(), "batch_images: empty index list");
  const int H = samples.at(0).image.dim(1), W = samples.at(0).image.dim(2);
  Tensor out({static_cast<int>(idx.size()), 1, H, W});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const SegSample& s = samples.at(static_cast<std::size_t>(idx[i]));
    std::copy(s.image.data(), s.image.data() + s.image.size(),
              out.data() + static_cast<Eigen::Index>(i) * H * W);
  }
  return out;
}

Tensor batch_masks(const std::vector<SegSample>& samples,
                   const std::vector<int>& idx) {
  check_param(!idx.empty(), "batch_masks: empty index list");
  const int H = samples.at(0).mask.dim(1), W = samples.at(0).mask.dim(2);
  Tensor out({static_cast<int>(idx.size()), 1, H, W});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const SegSample& s = samples.at(static_cast<std::size_t>(idx[i]));
    std::copy(s.mask.data(), s.mask.data() + s.mask.size(),
              out.data() + static_cast<Eigen::Index>(i) * H * W);
  }
  return out;
}

namespace {

const char* split_name(int which) {
  switch (which) {
    case 0: return "train_a";
    case 1: return "test_a";
    default: return "test_b";
  }
}

}  // namespace

void export_dataset(const std::string& dir, const Dataset& ds,
                    const std::string& config_hash) {
  fs::create_directories(dir);
  json manifest;
  manifest["config_hash"] = config_hash;
  manifest["size"] = ds.size;
  manifest["samples"] = json::array();
  const std::vector<const std::vector<SegSample>*> splits = {
      &ds.train_a, &ds.test_a, &ds.test_b};
  for (int w = 0; w < 3; ++w) {
    for (const SegSample& s : *splits[static_cast<std::size_t>(w)]) {
      char img_name[32], mask_name[32];
      std::snprintf(img_name, sizeof img_name, "s%04d_image.bin", s.id);
      std::snprintf(mask_name, sizeof mask_name, "s%04d_mask.bin", s.id);
      write_tensor((fs::path(dir) / img_name).string(), s.image);
      write_tensor((fs::path(dir) / mask_name).string(), s.mask);
      manifest["samples"].push_back({{"id", s.id},
                                     {"domain", to_string(s.domain_id)},
                                     {"split", split_name(w)},
                                     {"seed", s.seed},
                                     {"image", img_name},
                                     {"mask", mask_name}});
    }
  }
  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) throw IoError("export_dataset: cannot write manifest in " + dir);
  os << manifest.dump(2) << '\n';
}

Dataset import_dataset(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw IoError("import_dataset: missing manifest in " + dir);
  json manifest;
  try {
    is >> manifest;
  } catch (const json::exception& e) {
    throw IoError("import_dataset: malformed manifest: " + std::string(e.what()));
  }
  Dataset ds;
  ds.size = manifest.at("size").get<int>();
  for (const json& row : manifest.at("samples")) {
    SegSample s;
    s.id = row.at("id").get<int>();
    s.seed = row.at("seed").get<std::uint64_t>();
    s.domain_id = row.at("domain").get<std::string>() == "A" ? DomainId::A
                                                             : DomainId::B;
    s.image = read_tensor((fs::path(dir) / row.at("image").get<std::string>()).string());
    s.mask = read_tensor((fs::path(dir) / row.at("mask").get<std::string>()).string());
    if (!s.image.same_shape(s.mask) || s.image.rank() != 3)
      throw IoError("import_dataset: image/mask shape mismatch for sample " +
                    std::to_string(s.id));
    if (!is_binary(s.mask))
      throw IoError("import_dataset: non-binary mask for sample " +
                    std::to_string(s.id));
    const std::string split = row.at("split").get<std::string>();
    if (split == "train_a")
      ds.train_a.push_back(std::move(s));
    else if (split == "test_a")
      ds.test_a.push_back(std::move(s));
    else if (split == "test_b")
      ds.test_b.push_back(std::move(s));
    else
      throw IoError("import_dataset: unknown split tag: " + split);
  }
  return ds;
}

}  // namespace gkd::synth
