// SPDX-License-Identifier: Apache-2.0
#include "gkd/nets.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include "json.hpp"
#include <set>

#include "gkd/tensorio.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gkd::nets {

namespace {

void he_fill(Tensor& t, Rng& rng, int fan_in) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = std * rng.normal();
}

void set_params_trainable(std::vector<Param*> params, bool trainable) {
  for (Param* p : params) p->trainable = trainable;
}

}  // namespace

std::string to_string(Source s) {
  return s == Source::teacher ? "teacher" : "student";
}

// ---- layers ---------------------------------------------------------------

Conv2d::Conv2d(const std::string& name, int cin, int cout, int k, int stride,
               int pad)
    : w(name + ".w", {cout, cin, k, k}),
      b(name + ".b", {cout}),
      stride(stride),
      pad(pad) {
  check_param(cin >= 1 && cout >= 1 && k >= 1, "Conv2d: bad geometry");
}

void Conv2d::init(Rng& rng) {
  he_fill(w.value, rng, w.value.dim(1) * w.value.dim(2) * w.value.dim(3));
  b.value.array().setZero();
}

ad::Var Conv2d::operator()(ad::Tape& t, const ad::Var& x) {
  return ad::conv2d(x, t.param(w), t.param(b), stride, pad);
}

void Conv2d::collect(std::vector<Param*>& out) {
  out.push_back(&w);
  out.push_back(&b);
}

ConvTranspose2d::ConvTranspose2d(const std::string& name, int cin, int cout,
                                 int k, int stride, int pad, int out_pad)
    : w(name + ".w", {cin, cout, k, k}),
      b(name + ".b", {cout}),
      stride(stride),
      pad(pad),
      out_pad(out_pad) {
  check_param(cin >= 1 && cout >= 1 && k >= 1, "ConvTranspose2d: bad geometry");
}

void ConvTranspose2d::init(Rng& rng) {
  he_fill(w.value, rng, w.value.dim(0) * w.value.dim(2) * w.value.dim(3));
  b.value.array().setZero();
}

ad::Var ConvTranspose2d::operator()(ad::Tape& t, const ad::Var& x) {
  return ad::conv_transpose2d(x, t.param(w), t.param(b), stride, pad, out_pad);
}

void ConvTranspose2d::collect(std::vector<Param*>& out) {
  out.push_back(&w);
  out.push_back(&b);
}

Dense::Dense(const std::string& name, int in, int out)
    : w(name + ".w", {out, in}), b(name + ".b", {out}) {
  check_param(in >= 1 && out >= 1, "Dense: bad geometry");
}

void Dense::init(Rng& rng) {
  he_fill(w.value, rng, w.value.dim(1));
  b.value.array().setZero();
}

ad::Var Dense::operator()(ad::Tape& t, const ad::Var& x) {
  return ad::dense(x, t.param(w), t.param(b));
}

void Dense::collect(std::vector<Param*>& out) {
  out.push_back(&w);
  out.push_back(&b);
}

// ---- segmentation network -------------------------------------------------

SegNet::SegNet(Source role, std::vector<int> widths, int input_size,
               int in_channels)
    : role_(role),
      widths_(std::move(widths)),
      input_size_(input_size),
      head_(to_string(role) + ".head", widths_.empty() ? 1 : widths_.front(),
            1, 3, 1, 1) {
  check_param(widths_.size() >= 2, "SegNet: need at least two stages");
  for (int wd : widths_) check_param(wd >= 1, "SegNet: non-positive width");
  const int n = static_cast<int>(widths_.size());
  check_param(input_size_ >= (1 << (n + 1)) &&
                  input_size_ % (1 << n) == 0,
              "SegNet: input size incompatible with stage count");
  const std::string prefix = to_string(role);
  int cin = in_channels;
  for (int i = 0; i < n; ++i) {
    enc_.emplace_back(prefix + ".enc" + std::to_string(i), cin,
                      widths_[static_cast<std::size_t>(i)], 3, 2, 1);
    cin = widths_[static_cast<std::size_t>(i)];
  }
  int cur = widths_.back();
  for (int i = n - 1; i >= 1; --i) {
    up_.emplace_back(prefix + ".up" + std::to_string(n - 1 - i), cur,
                     widths_[static_cast<std::size_t>(i - 1)], 3, 2, 1, 1);
    cur = 2 * widths_[static_cast<std::size_t>(i - 1)];
  }
  up_.emplace_back(prefix + ".up" + std::to_string(n - 1), cur, widths_[0], 3,
                   2, 1, 1);
}

void SegNet::init(std::uint64_t seed) {
  Rng rng(seed);
  for (auto& l : enc_) l.init(rng);
  for (auto& l : up_) l.init(rng);
  head_.init(rng);
  // Foreground pixels are sparse; starting the head at a low foreground
  // prior keeps early training out of the all-background attractor.
  head_.b.value.array().setConstant(-1.5);
}

void SegNet::set_trainable(bool trainable) {
  set_params_trainable(parameters(), trainable);
}

std::vector<Param*> SegNet::parameters() {
  std::vector<Param*> out;
  for (auto& l : enc_) l.collect(out);
  for (auto& l : up_) l.collect(out);
  head_.collect(out);
  return out;
}

std::int64_t SegNet::parameter_count() {
  std::int64_t n = 0;
  for (Param* p : parameters()) n += p->value.size();
  return n;
}

int SegNet::bottleneck_size() const {
  return input_size_ >> static_cast<int>(widths_.size());
}

ad::Var SegNet::encode(ad::Tape& t, const ad::Var& images,
                       std::vector<ad::Var>* skips) {
  const Tensor& v = images.value();
  check_param(v.rank() == 4 && v.dim(2) == input_size_ &&
                  v.dim(3) == input_size_,
              "SegNet::encode: expected [B,C," + std::to_string(input_size_) +
                  "," + std::to_string(input_size_) + "], got " +
                  shape_str(v.shape()));
  ad::Var x = images;
  for (std::size_t i = 0; i < enc_.size(); ++i) {
    x = ad::relu(enc_[i](t, x));
    if (skips != nullptr && i + 1 < enc_.size()) skips->push_back(x);
  }
  return x;
}

ad::Var SegNet::decode(ad::Tape& t, const ad::Var& bottleneck,
                       const std::vector<ad::Var>& skips) {
  check_param(skips.size() == widths_.size() - 1,
              "SegNet::decode: expected " +
                  std::to_string(widths_.size() - 1) + " skip tensors, got " +
                  std::to_string(skips.size()));
  ad::Var x = bottleneck;
  const int n = static_cast<int>(widths_.size());
  for (int i = 0; i < n; ++i) {
    x = ad::relu(up_[static_cast<std::size_t>(i)](t, x));
    if (i < n - 1)
      x = ad::concat_channels(x, skips[static_cast<std::size_t>(n - 2 - i)]);
  }
  return ad::sigmoid(head_(t, x));
}

SegNet::ForwardVars SegNet::forward(ad::Tape& t, const ad::Var& images) {
  ForwardVars f;
  f.bottleneck = encode(t, images, &f.skips);
  f.prediction = decode(t, f.bottleneck, f.skips);
  return f;
}

SegNet::Inference SegNet::infer(const Tensor& images) {
  ad::Tape t;
  ForwardVars f = forward(t, t.constant(images));
  Inference out;
  out.feature = {f.bottleneck.value(), role_};
  for (const ad::Var& s : f.skips) out.skips.push_back(s.value());
  out.prediction = f.prediction.value();
  return out;
}

// ---- mask autoencoder -----------------------------------------------------

Psae::Psae(int latent_dim, int input_size)
    : latent_dim_(latent_dim),
      input_size_(input_size),
      to_latent_("psae.to_latent", latent_dim, latent_dim),
      from_latent_("psae.from_latent", latent_dim,
                   12 * (input_size / 8) * (input_size / 8)),
      start_size_(input_size / 8),
      head_("psae.head", 4, 1, 3, 1, 1) {
  check_param(latent_dim_ >= 2, "Psae: latent dimension too small");
  check_param(input_size_ >= 32 && input_size_ % 16 == 0,
              "Psae: input size must be a multiple of 16 and at least 32");
  enc_.emplace_back("psae.enc0", 1, 12, 3, 2, 1);
  enc_.emplace_back("psae.enc1", 12, 24, 3, 2, 1);
  enc_.emplace_back("psae.enc2", 24, latent_dim_, 3, 2, 1);
  up_.emplace_back("psae.up0", 12, 8, 3, 2, 1, 1);
  up_.emplace_back("psae.up1", 8, 6, 3, 2, 1, 1);
  up_.emplace_back("psae.up2", 6, 4, 3, 2, 1, 1);
}

void Psae::init(std::uint64_t seed) {
  Rng rng(seed);
  for (auto& l : enc_) l.init(rng);
  to_latent_.init(rng);
  from_latent_.init(rng);
  for (auto& l : up_) l.init(rng);
  head_.init(rng);
  head_.b.value.array().setConstant(-1.5);
}

void Psae::set_trainable(bool trainable) {
  set_params_trainable(parameters(), trainable);
}

std::vector<Param*> Psae::parameters() {
  std::vector<Param*> out;
  for (auto& l : enc_) l.collect(out);
  to_latent_.collect(out);
  from_latent_.collect(out);
  for (auto& l : up_) l.collect(out);
  head_.collect(out);
  return out;
}

ad::Var Psae::encode(ad::Tape& t, const ad::Var& masks) {
  const Tensor& v = masks.value();
  check_param(v.rank() == 4 && v.dim(1) == 1 && v.dim(2) == input_size_ &&
                  v.dim(3) == input_size_,
              "Psae::encode: expected [B,1,S,S] masks, got " +
                  shape_str(v.shape()));
  check_param(((v.array() == 0.0) || (v.array() == 1.0)).all(),
              "Psae::encode: masks must be strictly binary");
  ad::Var x = masks;
  for (auto& l : enc_) x = ad::relu(l(t, x));
  return to_latent_(t, ad::global_avg_pool(x));
}

ad::Var Psae::decode(ad::Tape& t, const ad::Var& latent) {
  const Tensor& v = latent.value();
  check_param(v.rank() == 2 && v.dim(1) == latent_dim_,
              "Psae::decode: expected [B," + std::to_string(latent_dim_) +
                  "] latent, got " + shape_str(v.shape()));
  const int B = v.dim(0);
  ad::Var x = ad::relu(from_latent_(t, latent));
  x = ad::reshape(x, {B, 12, start_size_, start_size_});
  for (auto& l : up_) x = ad::relu(l(t, x));
  return ad::sigmoid(head_(t, x));
}

Tensor Psae::encode_eval(const Tensor& masks) {
  ad::Tape t;
  return encode(t, t.constant(masks)).value();
}

Tensor Psae::decode_eval(const Tensor& latent) {
  ad::Tape t;
  return decode(t, t.constant(latent)).value();
}

// ---- alignment headers ----------------------------------------------------

MsanHeader::MsanHeader(Source source, int feat_channels, int feat_size,
                       int latent_dim)
    : source_(source),
      feat_channels_(feat_channels),
      feat_size_(feat_size),
      latent_dim_(latent_dim),
      conv1_(to_string(source) + "_header.conv1", feat_channels, feat_channels,
             3, 1, 1),
      conv2_(to_string(source) + "_header.conv2", feat_channels, feat_channels,
             3, 1, 1),
      to_latent_(to_string(source) + "_header.to_latent", feat_channels,
                 latent_dim),
      from_latent_(to_string(source) + "_header.from_latent", latent_dim,
                   feat_channels * (feat_size / 4) * (feat_size / 4)),
      start_size_(feat_size / 4),
      up1_(to_string(source) + "_header.up1", feat_channels, feat_channels, 3,
           2, 1, 1),
      up2_(to_string(source) + "_header.up2", feat_channels, feat_channels, 3,
           2, 1, 1) {
  check_param(feat_size_ >= 4 && feat_size_ % 4 == 0,
              "MsanHeader: feature size must be a positive multiple of 4");
  check_param(latent_dim_ >= 2, "MsanHeader: latent dimension too small");
}

void MsanHeader::init(std::uint64_t seed) {
  Rng rng(seed);
  conv1_.init(rng);
  conv2_.init(rng);
  to_latent_.init(rng);
  from_latent_.init(rng);
  up1_.init(rng);
  up2_.init(rng);
}

void MsanHeader::set_trainable(bool trainable) {
  set_params_trainable(parameters(), trainable);
}

std::vector<Param*> MsanHeader::parameters() {
  std::vector<Param*> out;
  conv1_.collect(out);
  conv2_.collect(out);
  to_latent_.collect(out);
  from_latent_.collect(out);
  up1_.collect(out);
  up2_.collect(out);
  return out;
}

ad::Var MsanHeader::encode(ad::Tape& t, const ad::Var& feature, Source src) {
  check_param(src == source_,
              "MsanHeader::encode: " + to_string(source_) +
                  " header refuses " + to_string(src) + " features");
  const Tensor& v = feature.value();
  check_param(v.rank() == 4 && v.dim(1) == feat_channels_ &&
                  v.dim(2) == feat_size_ && v.dim(3) == feat_size_,
              "MsanHeader::encode: feature shape " + shape_str(v.shape()) +
                  " does not match header geometry");
  ad::Var x = ad::relu(conv1_(t, feature));
  x = ad::relu(conv2_(t, x));
  return to_latent_(t, ad::global_avg_pool(x));
}

ad::Var MsanHeader::decode(ad::Tape& t, const ad::Var& latent) {
  const Tensor& v = latent.value();
  check_param(v.rank() == 2 && v.dim(1) == latent_dim_,
              "MsanHeader::decode: expected [B," + std::to_string(latent_dim_) +
                  "] latent, got " + shape_str(v.shape()));
  const int B = v.dim(0);
  ad::Var x = ad::relu(from_latent_(t, latent));
  x = ad::reshape(x, {B, feat_channels_, start_size_, start_size_});
  x = ad::relu(up1_(t, x));
  return ad::relu(up2_(t, x));
}

Tensor MsanHeader::encode_eval(const BottleneckFeature& feature) {
  ad::Tape t;
  return encode(t, t.constant(feature.data), feature.source).value();
}

Tensor MsanHeader::decode_eval(const Tensor& latent) {
  ad::Tape t;
  return decode(t, t.constant(latent)).value();
}

// ---- model bundle ---------------------------------------------------------

void NetConfig::validate() const {
  check_param(latent_dim >= 2, "NetConfig: latent_dim too small");
  // Teacher reduces to 1/16 of the input, the student only to 1/8; the
  // resulting shape mismatch is what the alignment headers exist to bridge.
  check_param(teacher_widths.size() == 4,
              "NetConfig: teacher needs exactly 4 stages");
  check_param(student_widths.size() == 3,
              "NetConfig: student needs exactly 3 stages");
  for (int w : teacher_widths)
    check_param(w >= 1, "NetConfig: non-positive teacher width");
  for (int w : student_widths)
    check_param(w >= 1, "NetConfig: non-positive student width");
  const int ts = static_cast<int>(teacher_widths.size());
  const int ss = static_cast<int>(student_widths.size());
  check_param(input_size % 16 == 0 && input_size >= 64,
              "NetConfig: input size incompatible with network depths");
  check_param((input_size >> ts) % 4 == 0 && (input_size >> ss) % 4 == 0,
              "NetConfig: bottleneck size must be a multiple of 4");
}

namespace {
const NetConfig& checked(const NetConfig& cfg) {
  cfg.validate();
  return cfg;
}
}  // namespace

ModelBundle::ModelBundle(const NetConfig& cfg, std::uint64_t seed)
    : teacher(Source::teacher, checked(cfg).teacher_widths, cfg.input_size),
      student(Source::student, cfg.student_widths, cfg.input_size),
      psae(cfg.latent_dim, cfg.input_size),
      tan(Source::teacher, cfg.teacher_widths.back(),
          cfg.input_size >> static_cast<int>(cfg.teacher_widths.size()),
          cfg.latent_dim),
      san(Source::student, cfg.student_widths.back(),
          cfg.input_size >> static_cast<int>(cfg.student_widths.size()),
          cfg.latent_dim) {
  check_param(teacher.parameter_count() > student.parameter_count(),
              "ModelBundle: teacher must have more parameters than the "
              "student, got " +
                  std::to_string(teacher.parameter_count()) + " vs " +
                  std::to_string(student.parameter_count()));
  teacher.init(mix_seed(seed, 1));
  student.init(mix_seed(seed, 2));
  psae.init(mix_seed(seed, 3));
  tan.init(mix_seed(seed, 4));
  san.init(mix_seed(seed, 5));
}

std::vector<Param*> ModelBundle::all_params() {
  std::vector<Param*> out;
  for (auto* net : {&teacher, &student})
    for (Param* p : net->parameters()) out.push_back(p);
  for (Param* p : psae.parameters()) out.push_back(p);
  for (Param* p : tan.parameters()) out.push_back(p);
  for (Param* p : san.parameters()) out.push_back(p);
  return out;
}

// ---- checkpoints ----------------------------------------------------------

void save_checkpoint(const std::string& dir, const std::string& phase_tag,
                     const std::string& config_hash,
                     const std::vector<Param*>& params) {
  fs::create_directories(dir);
  json manifest;
  manifest["phase"] = phase_tag;
  manifest["config_hash"] = config_hash;
  manifest["tensors"] = json::array();
  for (const Param* p : params) {
    const std::string file = p->name + ".bin";
    write_tensor((fs::path(dir) / file).string(), p->value);
    manifest["tensors"].push_back(
        {{"name", p->name}, {"shape", p->value.shape()}, {"file", file}});
  }
  std::ofstream os(fs::path(dir) / "checkpoint.json");
  if (!os) throw IoError("save_checkpoint: cannot write manifest in " + dir);
  os << manifest.dump(2) << '\n';
}

bool checkpoint_exists(const std::string& dir) {
  return fs::exists(fs::path(dir) / "checkpoint.json");
}

void load_checkpoint(const std::string& dir, const std::string& expected_phase,
                     const std::string& expected_config_hash,
                     const std::vector<Param*>& params) {
  std::ifstream is(fs::path(dir) / "checkpoint.json");
  if (!is) throw IoError("load_checkpoint: missing checkpoint in " + dir);
  json manifest;
  try {
    is >> manifest;
  } catch (const json::exception& e) {
    throw IoError("load_checkpoint: malformed manifest: " +
                  std::string(e.what()));
  }
  const std::string phase = manifest.at("phase").get<std::string>();
  if (!expected_phase.empty() && phase != expected_phase)
    throw ConfigError("load_checkpoint: checkpoint in " + dir +
                      " belongs to phase " + phase + ", expected " +
                      expected_phase);
  const std::string hash = manifest.at("config_hash").get<std::string>();
  if (!expected_config_hash.empty() && hash != expected_config_hash)
    throw ConfigError("load_checkpoint: config hash mismatch in " + dir +
                      ": checkpoint was written under " + hash +
                      ", current configuration is " + expected_config_hash);

  std::map<std::string, std::pair<Shape, std::string>> entries;
  for (const json& row : manifest.at("tensors")) {
    entries[row.at("name").get<std::string>()] = {
        row.at("shape").get<Shape>(), row.at("file").get<std::string>()};
  }
  std::set<std::string> wanted;
  for (Param* p : params) {
    wanted.insert(p->name);
    auto it = entries.find(p->name);
    if (it == entries.end())
      throw IoError("load_checkpoint: tensor " + p->name + " missing from " +
                    dir);
    if (it->second.first != p->value.shape())
      throw IoError("load_checkpoint: tensor " + p->name + " has shape " +
                    shape_str(it->second.first) + ", model expects " +
                    shape_str(p->value.shape()));
    Tensor t = read_tensor((fs::path(dir) / it->second.second).string());
    if (t.shape() != p->value.shape())
      throw IoError("load_checkpoint: tensor file for " + p->name +
                    " disagrees with the manifest shape");
    p->value = std::move(t);
    p->zero_grad();
    p->m.array().setZero();
    p->v.array().setZero();
  }
  for (const auto& [name, _] : entries)
    if (wanted.find(name) == wanted.end())
      throw IoError("load_checkpoint: unexpected tensor " + name + " in " +
                    dir);
}

}  // namespace gkd::nets
