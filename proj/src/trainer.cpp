// SPDX-License-Identifier: Apache-2.0
#include "gkd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "gkd/losses.hpp"

namespace fs = std::filesystem;

namespace gkd::train {

using nets::MsanHeader;
using nets::Psae;
using nets::SegNet;
using nets::Source;

namespace {

constexpr int kFreshStudentStream = 6;   // 1..5 are the bundle init streams
constexpr int kShuffleStreamBase = 0x500;
constexpr std::uint64_t kAugStream = 0xAA;

/// Drops a leading batch dimension of 1.
Tensor unbatch(const Tensor& t) {
  check_param(t.rank() >= 2 && t.dim(0) == 1,
              "unbatch: expected a leading batch dimension of 1");
  Shape s(t.shape().begin() + 1, t.shape().end());
  return t.reshaped(s);
}

/// Stacks cached per-sample tensors into a batch with a new leading axis.
Tensor stack_cached(const std::vector<Tensor>& rows,
                    const std::vector<int>& idx) {
  check_param(!rows.empty() && !idx.empty(), "stack_cached: empty input");
  Shape out_shape;
  out_shape.push_back(static_cast<int>(idx.size()));
  for (int d : rows[0].shape()) out_shape.push_back(d);
  Tensor out(out_shape);
  const Eigen::Index stride = rows[0].size();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor& r = rows[static_cast<std::size_t>(idx[b])];
    check_param(r.size() == stride, "stack_cached: ragged cache");
    out.array().segment(static_cast<Eigen::Index>(b) * stride, stride) =
        r.array();
  }
  return out;
}

std::ofstream open_log(const std::string& dir, const std::string& name,
                       const std::string& header, const std::string& hash) {
  fs::create_directories(dir);
  std::ofstream os(fs::path(dir) / name);
  if (!os) throw IoError("cannot write log " + name + " in " + dir);
  os << "# config " << hash << '\n' << header << '\n';
  return os;
}

void check_step_finite(double v, const std::string& phase, int step) {
  if (!std::isfinite(v))
    throw NumericError(phase + " step " + std::to_string(step) +
                       ": training diverged to a non-finite loss");
}

std::vector<int> chunk(int begin, int end) {
  std::vector<int> idx;
  for (int i = begin; i < end; ++i) idx.push_back(i);
  return idx;
}

std::string opt_str(const std::optional<double>& v) {
  if (!v) return "NA";
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << *v;
  return os.str();
}

/// Reseals the shifted test split on every exit path.
struct SealGuard {
  GuardedData& g;
  explicit SealGuard(GuardedData& gd) : g(gd) { g.seal_test_b(false); }
  ~SealGuard() { g.seal_test_b(true); }
};

/// Byte-exact record of parameter payloads, taken before a phase trains.
std::vector<ArrayX> frozen_record(const std::vector<ad::Param*>& params) {
  std::vector<ArrayX> rec;
  rec.reserve(params.size());
  for (const ad::Param* p : params) rec.push_back(p->value.array());
  return rec;
}

bool frozen_unchanged(const std::vector<ArrayX>& rec,
                      const std::vector<ad::Param*>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ArrayX& now = params[i]->value.array();
    if (now.size() != rec[i].size()) return false;
    if (std::memcmp(now.data(), rec[i].data(),
                    sizeof(Scalar) * static_cast<std::size_t>(now.size())) != 0)
      return false;
  }
  return true;
}

}  // namespace

// ---- optimizer ------------------------------------------------------------

void Adam::step(const std::vector<ad::Param*>& params) {
  ++steps;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
  for (ad::Param* p : params) {
    if (!p->trainable) {
      p->zero_grad();
      continue;
    }
    auto g = p->grad.array();
    p->m.array() = beta1 * p->m.array() + (1.0 - beta1) * g;
    p->v.array() = beta2 * p->v.array() + (1.0 - beta2) * g.square();
    p->value.array() -=
        lr * (p->m.array() / c1) / ((p->v.array() / c2).sqrt() + eps);
    p->zero_grad();
  }
}

// ---- guarded dataset ------------------------------------------------------

const std::vector<synth::SegSample>& GuardedData::test_b() const {
  if (sealed_)
    throw Error(
        "GuardedData: the shifted test split was read while sealed; "
        "training phases must never see it");
  ++test_b_reads_;
  return ds_.test_b;
}

// ---- trainer --------------------------------------------------------------

Trainer::Trainer(Config cfg, std::string out_dir)
    : cfg_(std::move(cfg)), out_dir_(std::move(out_dir)) {
  cfg_.validate();
  hash_ = cfg_.hash();
  fs::create_directories(out_dir_);
  const fs::path cfg_path = fs::path(out_dir_) / "config.txt";
  const std::string text = cfg_.to_text();
  if (fs::exists(cfg_path)) {
    std::ifstream is(cfg_path);
    std::ostringstream buf;
    buf << is.rdbuf();
    if (buf.str() != text)
      throw ConfigError("Trainer: output directory " + out_dir_ +
                        " was created for a different configuration");
  } else {
    std::ofstream os(cfg_path);
    if (!os) throw IoError("Trainer: cannot write config.txt in " + out_dir_);
    os << text;
  }
}

GuardedData& Trainer::data() {
  if (!data_) {
    data_.emplace(synth::make_dataset(
        cfg_.data.seed_a, cfg_.data.seed_b, cfg_.data.n_train, cfg_.data.n_test,
        cfg_.data.domain_a, cfg_.data.domain_b, cfg_.data.size,
        cfg_.data.gap_threshold));
  }
  return *data_;
}

std::string Trainer::checkpoint_dir(const std::string& phase) const {
  return (fs::path(out_dir_) / "checkpoints" / phase).string();
}

bool Trainer::phase_done(const std::string& phase) const {
  return nets::checkpoint_exists(checkpoint_dir(phase));
}

void Trainer::require_done(const std::string& phase, const std::string& who) {
  if (!phase_done(phase))
    throw ConfigError("phase " + who + " requires the " + phase +
                      " checkpoint in " + checkpoint_dir(phase) + "; run " +
                      phase + " first");
}

std::vector<int> Trainer::epoch_order(int n, int phase_no, int epoch) const {
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(mix_seed(mix_seed(cfg_.train.seed, kShuffleStreamBase + phase_no),
                   static_cast<std::uint64_t>(epoch)));
  for (int i = n - 1; i >= 1; --i) {
    const int j = static_cast<int>(rng.uniform_int(0, i));
    std::swap(order[static_cast<std::size_t>(i)],
              order[static_cast<std::size_t>(j)]);
  }
  return order;
}

std::uint64_t Trainer::bundle_seed(const synth::SegSample& s) const {
  return mix_seed(s.seed, kAugStream);
}

PhaseLog Trainer::run_phase(const std::string& phase) {
  if (phase == "p1") return run_p1();
  if (phase == "p2") return run_p2();
  if (phase == "p3") return run_p3();
  if (phase == "p4") return run_p4();
  throw ParamError("Trainer::run_phase: unknown phase '" + phase + "'");
}

std::vector<PhaseLog> Trainer::run(const std::vector<std::string>& phases) {
  std::vector<PhaseLog> out;
  for (const std::string& p : phases) out.push_back(run_phase(p));
  return out;
}

// ---- p1: mask autoencoder -------------------------------------------------

PhaseLog Trainer::run_p1() {
  const auto& train = data().train_a();
  Psae psae(cfg_.latent_dim, cfg_.data.size);
  psae.init(mix_seed(cfg_.train.seed, 3));
  auto params = psae.parameters();
  Adam adam(cfg_.train.lr);
  auto log = open_log(out_dir_ + "/logs", "p1_loss.csv", "epoch,step,loss",
                      hash_);
  PhaseLog pl{"p1", 0, 0.0, 0.0};
  const int bs = cfg_.train.batch_size;
  for (int epoch = 0; epoch < cfg_.train.epochs_p1; ++epoch) {
    const std::vector<int> order =
        epoch_order(static_cast<int>(train.size()), 1, epoch);
    for (int s = 0; s + bs <= static_cast<int>(order.size()); s += bs) {
      const std::vector<int> idx(order.begin() + s, order.begin() + s + bs);
      const Tensor masks = synth::batch_masks(train, idx);
      ad::Tape t;
      ad::Var rec = psae.decode(t, psae.encode(t, t.constant(masks)));
      ad::Var loss = ad::bce(rec, masks);
      const double lv = loss.value()[0];
      check_step_finite(lv, "p1", pl.steps);
      t.backward(loss);
      adam.step(params);
      log << epoch << ',' << pl.steps << ',' << lv << '\n';
      if (pl.steps == 0) pl.first_loss = lv;
      pl.final_loss = lv;
      ++pl.steps;
    }
  }
  nets::save_checkpoint(checkpoint_dir("p1"), "p1", hash_, params);
  return pl;
}

// ---- p2: supervised teacher and scratch student ---------------------------

PhaseLog Trainer::run_p2() {
  const auto& train = data().train_a();
  SegNet teacher(Source::teacher, cfg_.teacher_widths, cfg_.data.size);
  SegNet student(Source::student, cfg_.student_widths, cfg_.data.size);
  check_param(teacher.parameter_count() > student.parameter_count(),
              "p2: teacher must have more parameters than the student");
  teacher.init(mix_seed(cfg_.train.seed, 1));
  student.init(mix_seed(cfg_.train.seed, 2));
  Adam adam_t(cfg_.train.lr), adam_s(cfg_.train.lr);
  auto tparams = teacher.parameters();
  auto sparams = student.parameters();
  auto log = open_log(out_dir_ + "/logs", "p2_loss.csv",
                      "epoch,step,teacher_ce,student_ce", hash_);
  PhaseLog pl{"p2", 0, 0.0, 0.0};
  const int bs = cfg_.train.batch_size;
  for (int epoch = 0; epoch < cfg_.train.epochs_p2; ++epoch) {
    const std::vector<int> order =
        epoch_order(static_cast<int>(train.size()), 2, epoch);
    for (int s = 0; s + bs <= static_cast<int>(order.size()); s += bs) {
      const std::vector<int> idx(order.begin() + s, order.begin() + s + bs);
      const Tensor images = synth::batch_images(train, idx);
      const Tensor masks = synth::batch_masks(train, idx);
      double tl = 0.0, sl = 0.0;
      {
        ad::Tape t;
        auto f = teacher.forward(t, t.constant(images));
        ad::Var loss = ad::bce(f.prediction, masks);
        tl = loss.value()[0];
        t.backward(loss);
        adam_t.step(tparams);
      }
      {
        ad::Tape t;
        auto f = student.forward(t, t.constant(images));
        ad::Var loss = ad::bce(f.prediction, masks);
        sl = loss.value()[0];
        t.backward(loss);
        adam_s.step(sparams);
      }
      check_step_finite(tl + sl, "p2", pl.steps);
      log << epoch << ',' << pl.steps << ',' << tl << ',' << sl << '\n';
      if (pl.steps == 0) pl.first_loss = tl + sl;
      pl.final_loss = tl + sl;
      ++pl.steps;
    }
  }
  std::vector<ad::Param*> all = tparams;
  all.insert(all.end(), sparams.begin(), sparams.end());
  nets::save_checkpoint(checkpoint_dir("p2"), "p2", hash_, all);
  return pl;
}

// ---- p3: alignment headers on frozen features -----------------------------

PhaseLog Trainer::run_p3() {
  require_done("p1", "p3");
  require_done("p2", "p3");
  const auto& train = data().train_a();

  SegNet teacher(Source::teacher, cfg_.teacher_widths, cfg_.data.size);
  SegNet student(Source::student, cfg_.student_widths, cfg_.data.size);
  Psae psae(cfg_.latent_dim, cfg_.data.size);
  nets::load_checkpoint(checkpoint_dir("p1"), "p1", hash_, psae.parameters());
  {
    std::vector<ad::Param*> p2params = teacher.parameters();
    auto sp = student.parameters();
    p2params.insert(p2params.end(), sp.begin(), sp.end());
    nets::load_checkpoint(checkpoint_dir("p2"), "p2", hash_, p2params);
  }
  teacher.set_trainable(false);
  student.set_trainable(false);
  psae.set_trainable(false);
  std::vector<ad::Param*> frozen = teacher.parameters();
  {
    auto sp = student.parameters();
    frozen.insert(frozen.end(), sp.begin(), sp.end());
    auto pp = psae.parameters();
    frozen.insert(frozen.end(), pp.begin(), pp.end());
  }
  const std::vector<ArrayX> frozen_before = frozen_record(frozen);

  MsanHeader tan(Source::teacher, teacher.bottleneck_channels(),
                 teacher.bottleneck_size(), cfg_.latent_dim);
  MsanHeader san(Source::student, student.bottleneck_channels(),
                 student.bottleneck_size(), cfg_.latent_dim);
  tan.init(mix_seed(cfg_.train.seed, 4));
  san.init(mix_seed(cfg_.train.seed, 5));

  // Features and mask latents are fixed for the whole phase.
  std::vector<Tensor> feat_t, feat_s, mask_lat;
  for (int i = 0; i < static_cast<int>(train.size()); ++i) {
    const Tensor img = synth::batch_images(train, {i});
    const Tensor msk = synth::batch_masks(train, {i});
    feat_t.push_back(unbatch(teacher.infer(img).feature.data));
    feat_s.push_back(unbatch(student.infer(img).feature.data));
    mask_lat.push_back(unbatch(psae.encode_eval(msk)));
  }

  std::vector<ad::Param*> params = tan.parameters();
  {
    auto sp = san.parameters();
    params.insert(params.end(), sp.begin(), sp.end());
  }
  Adam adam(cfg_.train.lr);
  auto log = open_log(out_dir_ + "/logs", "p3_loss.csv",
                      "epoch,step,tan_loss,san_loss,total", hash_);
  PhaseLog pl{"p3", 0, 0.0, 0.0};
  const int bs = cfg_.train.batch_size;
  const double lambda = cfg_.loss.lambda_msan;
  for (int epoch = 0; epoch < cfg_.train.epochs_p3; ++epoch) {
    const std::vector<int> order =
        epoch_order(static_cast<int>(train.size()), 3, epoch);
    for (int s = 0; s + bs <= static_cast<int>(order.size()); s += bs) {
      const std::vector<int> idx(order.begin() + s, order.begin() + s + bs);
      const Tensor ft = stack_cached(feat_t, idx);
      const Tensor fs = stack_cached(feat_s, idx);
      const Tensor ml = stack_cached(mask_lat, idx);
      ad::Tape t;
      ad::Var zt = tan.encode(t, t.constant(ft), Source::teacher);
      ad::Var lt = losses::msan_loss_var(tan.decode(t, zt), ft, zt, ml, lambda);
      ad::Var zs = san.encode(t, t.constant(fs), Source::student);
      ad::Var ls = losses::msan_loss_var(san.decode(t, zs), fs, zs, ml, lambda);
      ad::Var loss = ad::add(lt, ls);
      const double lv = loss.value()[0];
      check_step_finite(lv, "p3", pl.steps);
      t.backward(loss);
      adam.step(params);
      log << epoch << ',' << pl.steps << ',' << lt.value()[0] << ','
          << ls.value()[0] << ',' << lv << '\n';
      if (pl.steps == 0) pl.first_loss = lv;
      pl.final_loss = lv;
      ++pl.steps;
    }
  }
  pl.frozen_intact = frozen_unchanged(frozen_before, frozen);
  if (!pl.frozen_intact)
    throw NumericError("p3 modified parameters it was required to freeze");
  std::vector<ad::Param*> saved = tan.parameters();
  {
    auto sp = san.parameters();
    saved.insert(saved.end(), sp.begin(), sp.end());
  }
  nets::save_checkpoint(checkpoint_dir("p3"), "p3", hash_, saved);
  return pl;
}

// ---- p4: student distillation ---------------------------------------------

PhaseLog Trainer::run_p4() {
  require_done("p1", "p4");
  require_done("p2", "p4");
  require_done("p3", "p4");
  const auto& train = data().train_a();
  const int size = cfg_.data.size;

  SegNet teacher(Source::teacher, cfg_.teacher_widths, size);
  SegNet student(Source::student, cfg_.student_widths, size);
  {
    std::vector<ad::Param*> p2params = teacher.parameters();
    auto sp = student.parameters();
    p2params.insert(p2params.end(), sp.begin(), sp.end());
    nets::load_checkpoint(checkpoint_dir("p2"), "p2", hash_, p2params);
  }
  MsanHeader tan(Source::teacher, teacher.bottleneck_channels(),
                 teacher.bottleneck_size(), cfg_.latent_dim);
  MsanHeader san(Source::student, student.bottleneck_channels(),
                 student.bottleneck_size(), cfg_.latent_dim);
  {
    std::vector<ad::Param*> p3params = tan.parameters();
    auto sp = san.parameters();
    p3params.insert(p3params.end(), sp.begin(), sp.end());
    nets::load_checkpoint(checkpoint_dir("p3"), "p3", hash_, p3params);
  }
  teacher.set_trainable(false);
  tan.set_trainable(false);
  san.set_trainable(false);
  if (!cfg_.train.warm_start_student)
    student.init(mix_seed(cfg_.train.seed, kFreshStudentStream));
  std::vector<ad::Param*> frozen = teacher.parameters();
  {
    auto tp = tan.parameters();
    frozen.insert(frozen.end(), tp.begin(), tp.end());
    auto hp = san.parameters();
    frozen.insert(frozen.end(), hp.begin(), hp.end());
  }
  const std::vector<ArrayX> frozen_before = frozen_record(frozen);

  const auto& tactics = cfg_.train.tactics;
  const int K = static_cast<int>(tactics.size());
  const int n_skips = teacher.stages() - 1;

  // Teacher-side constants: predictions, skips, and aligned latents for the
  // anchor and every augmented view, plus the augmented images themselves.
  std::vector<Tensor> pred_t, lat_t;
  std::vector<std::vector<Tensor>> skips_t(static_cast<std::size_t>(n_skips));
  std::vector<std::vector<Tensor>> lat_t_aug(static_cast<std::size_t>(K));
  std::vector<std::vector<Tensor>> aug_imgs(static_cast<std::size_t>(K));
  for (int i = 0; i < static_cast<int>(train.size()); ++i) {
    const Tensor img = synth::batch_images(train, {i});
    auto ti = teacher.infer(img);
    pred_t.push_back(unbatch(ti.prediction));
    lat_t.push_back(unbatch(tan.encode_eval(ti.feature)));
    for (int j = 0; j < n_skips; ++j)
      skips_t[static_cast<std::size_t>(j)].push_back(
          unbatch(ti.skips[static_cast<std::size_t>(j)]));
    const auto bundle = synth::make_coupling_bundle(
        train[static_cast<std::size_t>(i)], tactics,
        bundle_seed(train[static_cast<std::size_t>(i)]));
    for (int k = 0; k < K; ++k) {
      const Tensor& aug = bundle.augmented[static_cast<std::size_t>(k)];
      auto tik = teacher.infer(aug.reshaped({1, 1, size, size}));
      lat_t_aug[static_cast<std::size_t>(k)].push_back(
          unbatch(tan.encode_eval(tik.feature)));
      aug_imgs[static_cast<std::size_t>(k)].push_back(aug);
    }
  }

  const bool need_graphs = cfg_.loss.alpha > 0.0 || cfg_.loss.beta > 0.0;
  const bool need_dicd = cfg_.loss.gamma > 0.0;
  auto sparams = student.parameters();
  Adam adam(cfg_.train.lr);
  auto log = open_log(out_dir_ + "/logs", "p4_loss.csv",
                      "epoch,step,ce,intra,inter,dicd,total", hash_);
  PhaseLog pl{"p4", 0, 0.0, 0.0};
  const int bs = cfg_.train.batch_size;
  for (int epoch = 0; epoch < cfg_.train.epochs_p4; ++epoch) {
    const std::vector<int> order =
        epoch_order(static_cast<int>(train.size()), 4, epoch);
    for (int s = 0; s + bs <= static_cast<int>(order.size()); s += bs) {
      const std::vector<int> idx(order.begin() + s, order.begin() + s + bs);
      const Tensor images = synth::batch_images(train, idx);
      const Tensor masks = synth::batch_masks(train, idx);
      const Tensor yt = stack_cached(pred_t, idx);
      const Tensor zt_anchor = stack_cached(lat_t, idx);

      ad::Tape t;
      auto f = student.forward(t, t.constant(images));
      ad::Var ce = ad::bce(f.prediction, masks);
      std::optional<ad::Var> zs, intra, inter, dicd;
      if (need_graphs || need_dicd)
        zs = san.encode(t, f.bottleneck, Source::student);
      if (need_graphs) {
        std::vector<ad::Var> zs_augs, zt_augs;
        for (int k = 0; k < K; ++k) {
          ad::Var bk = student.encode(
              t,
              t.constant(
                  stack_cached(aug_imgs[static_cast<std::size_t>(k)], idx)),
              nullptr);
          zs_augs.push_back(san.encode(t, bk, Source::student));
          zt_augs.push_back(t.constant(
              stack_cached(lat_t_aug[static_cast<std::size_t>(k)], idx)));
        }
        if (cfg_.loss.alpha > 0.0) {
          auto tg = losses::build_intra_graph_vars(t.constant(zt_anchor),
                                                   zt_augs, cfg_.node_mode);
          auto sg = losses::build_intra_graph_vars(*zs, zs_augs,
                                                   cfg_.node_mode);
          intra = losses::intra_loss_var(tg, sg);
        }
        if (cfg_.loss.beta > 0.0)
          inter = losses::inter_loss_var(zt_augs, zs_augs);
      }
      if (need_dicd) {
        ad::Var fhat_t = tan.decode(t, *zs);
        std::vector<ad::Var> tsk;
        for (int j = 0; j < n_skips; ++j)
          tsk.push_back(t.constant(
              stack_cached(skips_t[static_cast<std::size_t>(j)], idx)));
        ad::Var yhat_t = teacher.decode(t, fhat_t, tsk);
        ad::Var fhat_s = san.decode(t, t.constant(zt_anchor));
        std::vector<ad::Var> ssk;
        for (const ad::Var& sk : f.skips) ssk.push_back(ad::detach(sk));
        ad::Var yhat_s = student.decode(t, fhat_s, ssk);
        ad::Var ytc = t.constant(yt);
        dicd = ad::add(ad::l1(yhat_t, ytc), ad::l1(yhat_s, ytc));
      }

      const double ce_v = ce.value()[0];
      const double intra_v = intra ? intra->value()[0] : 0.0;
      const double inter_v = inter ? inter->value()[0] : 0.0;
      const double dicd_v = dicd ? dicd->value()[0] : 0.0;
      double total_v = 0.0;
      try {
        total_v = losses::total_loss(ce_v, intra_v, inter_v, dicd_v, cfg_.loss);
      } catch (const NumericError& e) {
        throw NumericError("p4 step " + std::to_string(pl.steps) + ": " +
                           e.what());
      }
      ad::Var total = ce;
      if (intra) total = ad::add(total, ad::scale(*intra, cfg_.loss.alpha));
      if (inter) total = ad::add(total, ad::scale(*inter, cfg_.loss.beta));
      if (dicd) total = ad::add(total, ad::scale(*dicd, cfg_.loss.gamma));
      t.backward(total);
      adam.step(sparams);
      log << epoch << ',' << pl.steps << ',' << ce_v << ',' << intra_v << ','
          << inter_v << ',' << dicd_v << ',' << total_v << '\n';
      if (pl.steps == 0) pl.first_loss = total_v;
      pl.final_loss = total_v;
      ++pl.steps;
    }
  }
  pl.frozen_intact = frozen_unchanged(frozen_before, frozen);
  if (!pl.frozen_intact)
    throw NumericError("p4 modified parameters it was required to freeze");
  nets::save_checkpoint(checkpoint_dir("p4"), "p4", hash_, sparams);
  return pl;
}

// ---- evaluation -----------------------------------------------------------

namespace {

SplitEval eval_split(SegNet& net, const std::vector<synth::SegSample>& split,
                     int bs, double threshold) {
  metrics::ConfusionCounts cc;
  std::vector<double> scores;
  std::vector<int> labels;
  const int n = static_cast<int>(split.size());
  for (int s = 0; s < n; s += bs) {
    const std::vector<int> idx = chunk(s, std::min(s + bs, n));
    const Tensor pred =
        net.infer(synth::batch_images(split, idx)).prediction;
    const Tensor masks = synth::batch_masks(split, idx);
    cc += metrics::count_confusion(pred, masks, threshold);
    for (Eigen::Index i = 0; i < pred.size(); ++i) {
      scores.push_back(pred[i]);
      labels.push_back(masks[i] > 0.5 ? 1 : 0);
    }
  }
  return {metrics::scores_from_counts(cc), metrics::auc_score(scores, labels)};
}

/// Row matrix of aligned latents, one row per sample.
MatrixX latent_rows(SegNet& net, MsanHeader& header,
                    const std::vector<synth::SegSample>& split, int bs) {
  const int n = static_cast<int>(split.size());
  MatrixX rows;
  bool sized = false;
  for (int s = 0; s < n; s += bs) {
    const std::vector<int> idx = chunk(s, std::min(s + bs, n));
    auto inf = net.infer(synth::batch_images(split, idx));
    const Tensor z = header.encode_eval(inf.feature);
    if (!sized) {
      rows.resize(n, z.dim(1));
      sized = true;
    }
    for (std::size_t b = 0; b < idx.size(); ++b)
      for (int c = 0; c < z.dim(1); ++c)
        rows(idx[b], c) = z.at(static_cast<int>(b), c);
  }
  return rows;
}

/// Row matrix of mask-space reference latents, one row per sample.
MatrixX mask_latent_rows(Psae& psae, const std::vector<synth::SegSample>& split,
                         int bs) {
  const int n = static_cast<int>(split.size());
  MatrixX rows;
  bool sized = false;
  for (int s = 0; s < n; s += bs) {
    const std::vector<int> idx = chunk(s, std::min(s + bs, n));
    const Tensor z = psae.encode_eval(synth::batch_masks(split, idx));
    if (!sized) {
      rows.resize(n, z.dim(1));
      sized = true;
    }
    for (std::size_t b = 0; b < idx.size(); ++b)
      for (int c = 0; c < z.dim(1); ++c)
        rows(idx[b], c) = z.at(static_cast<int>(b), c);
  }
  return rows;
}

}  // namespace

EvalReport Trainer::evaluate() {
  for (const char* p : {"p1", "p2", "p3", "p4"}) require_done(p, "evaluate");
  const int size = cfg_.data.size;

  SegNet teacher(Source::teacher, cfg_.teacher_widths, size);
  SegNet scratch(Source::student, cfg_.student_widths, size);
  SegNet distilled(Source::student, cfg_.student_widths, size);
  Psae psae(cfg_.latent_dim, size);
  MsanHeader san(Source::student, scratch.bottleneck_channels(),
                 scratch.bottleneck_size(), cfg_.latent_dim);
  nets::load_checkpoint(checkpoint_dir("p1"), "p1", hash_, psae.parameters());
  {
    std::vector<ad::Param*> p2params = teacher.parameters();
    auto sp = scratch.parameters();
    p2params.insert(p2params.end(), sp.begin(), sp.end());
    nets::load_checkpoint(checkpoint_dir("p2"), "p2", hash_, p2params);
  }
  {
    MsanHeader tan(Source::teacher, teacher.bottleneck_channels(),
                   teacher.bottleneck_size(), cfg_.latent_dim);
    std::vector<ad::Param*> p3params = tan.parameters();
    auto sp = san.parameters();
    p3params.insert(p3params.end(), sp.begin(), sp.end());
    nets::load_checkpoint(checkpoint_dir("p3"), "p3", hash_, p3params);
  }
  nets::load_checkpoint(checkpoint_dir("p4"), "p4", hash_,
                        distilled.parameters());

  GuardedData& gd = data();
  SealGuard guard(gd);
  const auto& test_a = gd.test_a();
  const auto& test_b = gd.test_b();
  const int bs = cfg_.train.batch_size;
  const double thr = cfg_.eval.threshold;

  EvalReport report;
  report.models.push_back({"teacher", eval_split(teacher, test_a, bs, thr),
                           eval_split(teacher, test_b, bs, thr)});
  report.models.push_back(
      {"student_scratch", eval_split(scratch, test_a, bs, thr),
       eval_split(scratch, test_b, bs, thr)});
  report.models.push_back(
      {"student_distilled", eval_split(distilled, test_a, bs, thr),
       eval_split(distilled, test_b, bs, thr)});

  report.fsd_a = metrics::fsd(latent_rows(distilled, san, test_a, bs),
                              mask_latent_rows(psae, test_a, bs),
                              cfg_.eval.fsd_epsilon);
  report.fsd_b = metrics::fsd(latent_rows(distilled, san, test_b, bs),
                              mask_latent_rows(psae, test_b, bs),
                              cfg_.eval.fsd_epsilon);

  {
    std::ofstream os(fs::path(out_dir_) / "report.csv");
    if (!os) throw IoError("evaluate: cannot write report.csv");
    os << report.csv();
  }
  {
    std::ofstream os(fs::path(out_dir_) / "report.txt");
    if (!os) throw IoError("evaluate: cannot write report.txt");
    os << report.text();
  }
  return report;
}

std::pair<double, double> Trainer::latent_fsd() {
  for (const char* p : {"p1", "p2", "p3"}) require_done(p, "latent_fsd");
  const int size = cfg_.data.size;
  SegNet teacher(Source::teacher, cfg_.teacher_widths, size);
  SegNet student(Source::student, cfg_.student_widths, size);
  Psae psae(cfg_.latent_dim, size);
  MsanHeader san(Source::student, student.bottleneck_channels(),
                 student.bottleneck_size(), cfg_.latent_dim);
  nets::load_checkpoint(checkpoint_dir("p1"), "p1", hash_, psae.parameters());
  {
    std::vector<ad::Param*> p2params = teacher.parameters();
    auto sp = student.parameters();
    p2params.insert(p2params.end(), sp.begin(), sp.end());
    nets::load_checkpoint(checkpoint_dir("p2"), "p2", hash_, p2params);
  }
  {
    MsanHeader tan(Source::teacher, teacher.bottleneck_channels(),
                   teacher.bottleneck_size(), cfg_.latent_dim);
    std::vector<ad::Param*> p3params = tan.parameters();
    auto sp = san.parameters();
    p3params.insert(p3params.end(), sp.begin(), sp.end());
    nets::load_checkpoint(checkpoint_dir("p3"), "p3", hash_, p3params);
  }
  GuardedData& gd = data();
  SealGuard guard(gd);
  const int bs = cfg_.train.batch_size;
  const double fa = metrics::fsd(latent_rows(student, san, gd.test_a(), bs),
                                 mask_latent_rows(psae, gd.test_a(), bs),
                                 cfg_.eval.fsd_epsilon);
  const double fb = metrics::fsd(latent_rows(student, san, gd.test_b(), bs),
                                 mask_latent_rows(psae, gd.test_b(), bs),
                                 cfg_.eval.fsd_epsilon);
  return {fa, fb};
}

// ---- reports --------------------------------------------------------------

namespace {

void csv_row(std::ostringstream& os, const std::string& model,
             const std::string& split, const SplitEval& e) {
  os << model << ',' << split << ',' << opt_str(e.scores.se) << ','
     << opt_str(e.scores.acc) << ',' << opt_str(e.scores.f1) << ','
     << opt_str(e.scores.miou) << ',' << opt_str(e.auc) << '\n';
}

SplitEval gap_eval(const SplitEval& a, const SplitEval& b) {
  SplitEval g;
  g.scores.se = metrics::gap(a.scores.se, b.scores.se);
  g.scores.acc = metrics::gap(a.scores.acc, b.scores.acc);
  g.scores.f1 = metrics::gap(a.scores.f1, b.scores.f1);
  g.scores.miou = metrics::gap(a.scores.miou, b.scores.miou);
  g.auc = metrics::gap(a.auc, b.auc);
  return g;
}

}  // namespace

std::string EvalReport::csv() const {
  std::ostringstream os;
  os << "model,split,se,acc,f1,miou,auc\n";
  for (const ModelEval& m : models) {
    csv_row(os, m.model, "test_a", m.test_a);
    csv_row(os, m.model, "test_b", m.test_b);
    csv_row(os, m.model, "gap", gap_eval(m.test_a, m.test_b));
  }
  os << "fsd,test_a," << std::fixed << std::setprecision(6) << fsd_a
     << ",,,,\n";
  os << "fsd,test_b," << std::fixed << std::setprecision(6) << fsd_b
     << ",,,,\n";
  return os.str();
}

std::string EvalReport::text() const {
  std::ostringstream os;
  os << std::left << std::setw(20) << "model" << std::setw(8) << "split"
     << std::setw(8) << "SE" << std::setw(8) << "ACC" << std::setw(8) << "F1"
     << std::setw(8) << "mIoU" << std::setw(8) << "AUC" << '\n';
  for (const ModelEval& m : models) {
    const std::pair<const char*, const SplitEval> rows[] = {
        {"test_a", m.test_a}, {"test_b", m.test_b},
        {"gap", gap_eval(m.test_a, m.test_b)}};
    for (const auto& [name, e] : rows) {
      os << std::left << std::setw(20) << m.model << std::setw(8) << name
         << std::setw(8) << opt_str(e.scores.se) << std::setw(8)
         << opt_str(e.scores.acc) << std::setw(8) << opt_str(e.scores.f1)
         << std::setw(8) << opt_str(e.scores.miou) << std::setw(8)
         << opt_str(e.auc) << '\n';
    }
  }
  os << "latent distance (distilled vs mask space): test_a=" << std::fixed
     << std::setprecision(6) << fsd_a << " test_b=" << fsd_b << '\n';
  return os.str();
}

// ---- mask dumps and export ------------------------------------------------

void write_pgm(const std::string& path, const Tensor& image) {
  Tensor img = image;
  if (img.rank() == 3 && img.dim(0) == 1) img = unbatch(img);
  check_param(img.rank() == 2, "write_pgm: expected [H,W] or [1,H,W]");
  const int h = img.dim(0), w = img.dim(1);
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_pgm: cannot write " + path);
  os << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w);
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    const double v = std::clamp(img[i], 0.0, 1.0);
    bytes[static_cast<std::size_t>(i)] =
        static_cast<unsigned char>(std::lround(v * 255.0));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
}

void Trainer::dump_masks(int per_split) {
  for (const char* p : {"p2", "p4"}) require_done(p, "dump_masks");
  const int size = cfg_.data.size;
  SegNet teacher(Source::teacher, cfg_.teacher_widths, size);
  SegNet scratch(Source::student, cfg_.student_widths, size);
  SegNet distilled(Source::student, cfg_.student_widths, size);
  {
    std::vector<ad::Param*> p2params = teacher.parameters();
    auto sp = scratch.parameters();
    p2params.insert(p2params.end(), sp.begin(), sp.end());
    nets::load_checkpoint(checkpoint_dir("p2"), "p2", hash_, p2params);
  }
  nets::load_checkpoint(checkpoint_dir("p4"), "p4", hash_,
                        distilled.parameters());

  GuardedData& gd = data();
  SealGuard guard(gd);
  const std::string base = out_dir_ + "/masks";
  const std::pair<const char*, const std::vector<synth::SegSample>*> splits[] =
      {{"test_a", &gd.test_a()}, {"test_b", &gd.test_b()}};
  const std::pair<const char*, SegNet*> nets_by_name[] = {
      {"teacher", &teacher},
      {"student_scratch", &scratch},
      {"student_distilled", &distilled}};
  for (const auto& [split_name, split] : splits) {
    const int n = std::min<int>(per_split, static_cast<int>(split->size()));
    for (int i = 0; i < n; ++i) {
      const synth::SegSample& s = (*split)[static_cast<std::size_t>(i)];
      const std::string stem =
          base + "/" + split_name + "_" + std::to_string(s.id);
      write_pgm(stem + "_image.pgm", s.image);
      write_pgm(stem + "_mask.pgm", s.mask);
      const Tensor img = synth::batch_images(*split, {i});
      for (const auto& [model, net] : nets_by_name)
        write_pgm(stem + "_" + model + "_pred.pgm",
                  unbatch(net->infer(img).prediction));
    }
  }
}

void Trainer::export_data(const std::string& dir) {
  synth::export_dataset(dir, data().raw(), hash_);
}

}  // namespace gkd::train
