#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualteacher/align.hpp"
#include "dualteacher/augment.hpp"
#include "dualteacher/codec.hpp"
#include "dualteacher/ema.hpp"
#include "dualteacher/losses.hpp"
#include "dualteacher/metrics.hpp"
#include "dualteacher/net.hpp"
#include "dualteacher/optim.hpp"
#include "dualteacher/phantom.hpp"

namespace dualteacher {

using ordered_json = nlohmann::ordered_json;

enum class Method {
  supervised_only,
  joint_training,
  gan_baseline,
  pseudo_label_baseline,
  mean_teacher,
  no_inter_teacher,
  no_intra_teacher,
  dual_teacher,
};

inline const char* to_string(Method m) {
  switch (m) {
    case Method::supervised_only: return "supervised_only";
    case Method::joint_training: return "joint_training";
    case Method::gan_baseline: return "gan_baseline";
    case Method::pseudo_label_baseline: return "pseudo_label_baseline";
    case Method::mean_teacher: return "mean_teacher";
    case Method::no_inter_teacher: return "no_inter_teacher";
    case Method::no_intra_teacher: return "no_intra_teacher";
    case Method::dual_teacher: return "dual_teacher";
  }
  throw ConfigError("unknown method enum value");
}

inline Method method_from_string(const std::string& s) {
  for (Method m : {Method::supervised_only, Method::joint_training, Method::gan_baseline,
                   Method::pseudo_label_baseline, Method::mean_teacher, Method::no_inter_teacher,
                   Method::no_intra_teacher, Method::dual_teacher})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown method: " + s);
}

struct TrainConfig {
  Method method = Method::dual_teacher;
  int epochs = 50;
  int batch_s = 4, batch_t = 4, batch_u = 4;
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9, adam_beta2 = 0.999;
  LossWeights loss_weights;  // t_max is its own knob, deliberately NOT tied to
                             // epochs: the ramp must not change shape when a
                             // run is resumed with a larger --epochs
  double noise_sigma = 0.1;
  double ema_alpha = 0.99;
  double pseudo_label_threshold = 0.0;
  std::uint64_t seed = 0;
  bool ema_after_student = false;
  bool augment_enabled = true;
  AugmentConfig augment;
  NetworkConfig net;
  Translator::Kind translator_kind = Translator::Kind::histogram_match;

  void validate() const {
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    if (batch_s < 1 || batch_t < 1 || batch_u < 1)
      throw ConfigError("TrainConfig: batch sizes must be >= 1");
    if (learning_rate <= 0) throw ConfigError("TrainConfig: learning_rate must be > 0");
    if (noise_sigma < 0) throw ConfigError("TrainConfig: noise_sigma must be >= 0");
    if (!(ema_alpha >= 0.0 && ema_alpha < 1.0))
      throw ConfigError("TrainConfig: ema_alpha must lie in [0, 1)");
    if (pseudo_label_threshold < 0.0 || pseudo_label_threshold > 1.0)
      throw ConfigError("TrainConfig: pseudo_label_threshold must lie in [0, 1]");
    loss_weights.validate();
    augment.validate();
    net.validate();
  }
};

// Which ingredients a method uses; drives stream requirements, component
// construction, and the per-step work list.
struct MethodPlan {
  bool ds_seg = false;         // source batch joins the student's seg loss
  bool translate_src = false;  // source images pass through the translator
  bool inter_teacher = false;  // train inter-teacher on translated source + KD
  bool ema_teacher = false;    // EMA teacher + consistency on d_u
  bool pseudo = false;         // pseudo-labels on d_u
  bool need_ds = false, need_dt = true, need_du = false;
};

inline MethodPlan plan_for(Method m) {
  MethodPlan p;
  switch (m) {
    case Method::supervised_only:
      break;
    case Method::joint_training:
      p.ds_seg = true;
      p.need_ds = true;
      break;
    case Method::gan_baseline:
      p.ds_seg = true;
      p.translate_src = true;
      p.pseudo = true;
      p.need_ds = p.need_du = true;
      break;
    case Method::pseudo_label_baseline:
      p.ds_seg = true;
      p.pseudo = true;
      p.need_ds = p.need_du = true;
      break;
    case Method::mean_teacher:
      p.ema_teacher = true;
      p.need_du = true;
      break;
    case Method::no_inter_teacher:
      p.ds_seg = true;
      p.translate_src = true;
      p.ema_teacher = true;
      p.need_ds = p.need_du = true;
      break;
    case Method::no_intra_teacher:
      p.inter_teacher = true;
      p.translate_src = true;
      p.pseudo = true;
      p.need_ds = p.need_du = true;
      break;
    case Method::dual_teacher:
      p.inter_teacher = true;
      p.translate_src = true;
      p.ema_teacher = true;
      p.need_ds = p.need_du = true;
      break;
  }
  return p;
}

struct StepLosses {
  double inter_seg = 0.0;  // inter-teacher's own objective
  double seg = 0.0, kd = 0.0, con = 0.0, pseudo = 0.0;
  double lambda = 0.0;  // lambda_con(t) used this step
  double total = 0.0;   // what the student optimizer actually minimized
};

struct EpochRecord {
  int epoch = 0;  // 1-based in reports
  std::string method;
  std::uint64_t seed = 0;
  double loss_total = 0, loss_seg = 0, loss_kd = 0, loss_con = 0, loss_pseudo = 0, loss_inter = 0;
  double lambda_con_value = 0;
  MetricsRecord val;
};

inline ordered_json epoch_record_to_json(const EpochRecord& r) {
  ordered_json j;
  j["epoch"] = r.epoch;
  j["method"] = r.method;
  j["seed"] = r.seed;
  j["loss_total"] = r.loss_total;
  j["loss_seg"] = r.loss_seg;
  j["loss_kd"] = r.loss_kd;
  j["loss_con"] = r.loss_con;
  j["loss_pseudo"] = r.loss_pseudo;
  j["loss_inter"] = r.loss_inter;
  j["lambda_con"] = r.lambda_con_value;
  ordered_json dice;
  for (const auto& [c, d] : r.val.per_class_dice) dice["c" + std::to_string(c)] = d;
  j["val_dice"] = dice;
  j["val_mean_dice"] = r.val.mean_dice;
  j["val_degenerate_images"] = r.val.degenerate_images;
  return j;
}

inline EpochRecord epoch_record_from_json(const ordered_json& j, int fold_index) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.method = j.at("method").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.loss_total = j.at("loss_total").get<double>();
  r.loss_seg = j.at("loss_seg").get<double>();
  r.loss_kd = j.at("loss_kd").get<double>();
  r.loss_con = j.at("loss_con").get<double>();
  r.loss_pseudo = j.at("loss_pseudo").get<double>();
  r.loss_inter = j.at("loss_inter").get<double>();
  r.lambda_con_value = j.at("lambda_con").get<double>();
  for (const auto& [key, val] : j.at("val_dice").items())
    r.val.per_class_dice[std::stoi(key.substr(1))] = val.get<double>();
  r.val.mean_dice = j.at("val_mean_dice").get<double>();
  r.val.degenerate_images = j.at("val_degenerate_images").get<int>();
  r.val.method = r.method;
  r.val.seed = r.seed;
  r.val.fold_index = fold_index;
  return r;
}

struct PseudoLabel {
  LabelMap label;
  PixelMask mask;
};

// argmax labels plus a confidence mask (max prob >= threshold); threshold 0
// keeps every pixel
inline std::vector<PseudoLabel> generate_pseudo_labels(Network& model,
                                                       const std::vector<const Image*>& images,
                                                       double threshold) {
  std::vector<PseudoLabel> out;
  out.reserve(images.size());
  constexpr int kBatch = 8;
  for (std::size_t start = 0; start < images.size(); start += kBatch) {
    const std::size_t stop = std::min(images.size(), start + kBatch);
    std::vector<const Image*> batch(images.begin() + start, images.begin() + stop);
    Tensor probs = softmax(model.forward(to_tensor(batch), false));
    for (std::size_t i = start; i < stop; ++i) {
      ProbMap pm = image_probs(probs, static_cast<int>(i - start));
      PseudoLabel pl;
      pl.label = argmax_labels(pm);
      pl.mask.assign(pm.npix(), 0);
      for (std::size_t k = 0; k < pm.npix(); ++k) {
        double mx = 0.0;
        for (int c = 0; c < pm.c; ++c) mx = std::max(mx, pm.p[k * pm.c + c]);
        pl.mask[k] = mx >= threshold ? 1 : 0;
      }
      out.push_back(std::move(pl));
    }
  }
  return out;
}

struct TrainState {
  TrainConfig cfg;
  MethodPlan plan;
  const DatasetBundle* bundle = nullptr;

  std::unique_ptr<Network> student;
  std::unique_ptr<Network> inter_teacher;  // present iff plan.inter_teacher
  std::unique_ptr<Network> intra_scratch;  // runs the EMA weights for forwards
  std::optional<EmaState> ema;             // present iff plan.ema_teacher
  std::optional<Translator> translator;    // present iff plan.translate_src
  std::optional<Adam> opt_student, opt_inter;

  std::vector<Image> translated_src;  // translate(d_s) cached; empty when raw

  Rng rng_order{0, "unset"}, rng_noise{0, "unset"}, rng_aug{0, "unset"};

  int epoch = 0;  // completed epochs
  std::vector<EpochRecord> metrics_log;

  std::vector<PseudoLabel> pseudo;  // aligned with bundle->d_u
  bool pseudo_ready = false;

  int best_epoch = -1;
  double best_val = -1.0;
  std::vector<double> best_params, best_buffers;

  // test/instrumentation hook, called after each completed phase with one of
  // "inter_teacher", "ema", "student"
  std::function<void(const std::string&)> phase_hook;

  const Image& source_image(int idx) const {
    return translated_src.empty() ? bundle->d_s[idx].image : translated_src[idx];
  }
};

inline ordered_json train_config_to_json(const TrainConfig& c) {
  ordered_json j;
  j["method"] = to_string(c.method);
  j["epochs"] = c.epochs;
  j["batch_s"] = c.batch_s;
  j["batch_t"] = c.batch_t;
  j["batch_u"] = c.batch_u;
  j["learning_rate"] = c.learning_rate;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["loss_weights"] = {{"lambda_kd", c.loss_weights.lambda_kd},
                       {"lambda_con_max", c.loss_weights.lambda_con_max},
                       {"ramp_exponent_scale", c.loss_weights.ramp_exponent_scale},
                       {"t_max", c.loss_weights.t_max}};
  j["noise_sigma"] = c.noise_sigma;
  j["ema_alpha"] = c.ema_alpha;
  j["pseudo_label_threshold"] = c.pseudo_label_threshold;
  j["seed"] = c.seed;
  j["ema_after_student"] = c.ema_after_student;
  j["augment_enabled"] = c.augment_enabled;
  j["augment"] = {{"max_rotation_deg", c.augment.max_rotation_deg},
                  {"scale_lo", c.augment.scale_lo},
                  {"scale_hi", c.augment.scale_hi},
                  {"max_shift_px", c.augment.max_shift_px}};
  j["net"] = {{"in_channels", c.net.in_channels},     {"num_classes", c.net.num_classes},
              {"base_channels", c.net.base_channels}, {"depth", c.net.depth},
              {"norm", to_string(c.net.norm)},        {"seed", c.net.seed}};
  j["translator_kind"] = to_string(c.translator_kind);
  return j;
}

inline TrainConfig train_config_from_json(const ordered_json& j) {
  TrainConfig c;
  c.method = method_from_string(j.at("method").get<std::string>());
  c.epochs = j.at("epochs").get<int>();
  c.batch_s = j.at("batch_s").get<int>();
  c.batch_t = j.at("batch_t").get<int>();
  c.batch_u = j.at("batch_u").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.adam_beta1 = j.at("adam_beta1").get<double>();
  c.adam_beta2 = j.at("adam_beta2").get<double>();
  const auto& w = j.at("loss_weights");
  c.loss_weights.lambda_kd = w.at("lambda_kd").get<double>();
  c.loss_weights.lambda_con_max = w.at("lambda_con_max").get<double>();
  c.loss_weights.ramp_exponent_scale = w.at("ramp_exponent_scale").get<double>();
  c.loss_weights.t_max = w.at("t_max").get<int>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.ema_alpha = j.at("ema_alpha").get<double>();
  c.pseudo_label_threshold = j.at("pseudo_label_threshold").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.ema_after_student = j.at("ema_after_student").get<bool>();
  c.augment_enabled = j.at("augment_enabled").get<bool>();
  const auto& a = j.at("augment");
  c.augment.max_rotation_deg = a.at("max_rotation_deg").get<double>();
  c.augment.scale_lo = a.at("scale_lo").get<double>();
  c.augment.scale_hi = a.at("scale_hi").get<double>();
  c.augment.max_shift_px = a.at("max_shift_px").get<double>();
  const auto& n = j.at("net");
  c.net.in_channels = n.at("in_channels").get<int>();
  c.net.num_classes = n.at("num_classes").get<int>();
  c.net.base_channels = n.at("base_channels").get<int>();
  c.net.depth = n.at("depth").get<int>();
  c.net.norm = norm_from_string(n.at("norm").get<std::string>());
  c.net.seed = n.at("seed").get<std::uint64_t>();
  c.translator_kind = translator_kind_from_string(j.at("translator_kind").get<std::string>());
  return c;
}

// Fingerprint of everything that must match for a resume to be coherent.
// `epochs` is excluded on purpose: extending a run is the point of resuming.
inline std::string config_hash(const TrainConfig& c) {
  ordered_json j = train_config_to_json(c);
  j.erase("epochs");
  return hex64(fnv1a(j.dump()));
}

// Fill bundle-derived fields so the same TrainConfig always maps to the same
// effective configuration (and hash).
inline TrainConfig normalize_config(TrainConfig cfg, const DatasetBundle& bundle) {
  cfg.net.in_channels = 1;
  cfg.net.num_classes = bundle.spec.num_classes;
  cfg.net.seed = mix_seed(cfg.seed, "student-init");
  return cfg;
}

// One epoch walks the longest used stream exactly once (possibly with a
// partial final batch); shorter streams cycle.
inline int steps_per_epoch(const MethodPlan& plan, const TrainConfig& cfg,
                           const DatasetBundle& bundle) {
  auto ceil_div = [](std::size_t n, int b) {
    return static_cast<int>((n + static_cast<std::size_t>(b) - 1) / b);
  };
  std::size_t len = bundle.d_t.size();
  int steps = ceil_div(len, cfg.batch_t);
  auto consider = [&](std::size_t l, int b) {
    const int s = ceil_div(l, b);
    if (l > len || (l == len && s > steps)) {
      len = l;
      steps = s;
    }
  };
  if (plan.need_ds) consider(bundle.d_s.size(), cfg.batch_s);
  if (plan.need_du) consider(bundle.d_u.size(), cfg.batch_u);
  return steps;
}

inline TrainState make_method_state(const TrainConfig& raw_cfg, const DatasetBundle& bundle) {
  TrainState st;
  st.cfg = normalize_config(raw_cfg, bundle);
  st.cfg.validate();
  st.plan = plan_for(st.cfg.method);
  st.bundle = &bundle;

  std::vector<std::string> missing;
  if (bundle.d_t.empty()) missing.push_back("d_t");
  if (st.plan.need_ds && bundle.d_s.empty()) missing.push_back("d_s");
  if (st.plan.need_du && bundle.d_u.empty()) missing.push_back("d_u");
  if (!missing.empty()) {
    std::string msg = "method " + std::string(to_string(st.cfg.method)) +
                      " requires nonempty streams:";
    for (const auto& m : missing) msg += " " + m;
    throw ConfigError(msg);
  }
  if (st.cfg.method == Method::mean_teacher && !bundle.d_s.empty())
    warn("mean_teacher ignores d_s (" + std::to_string(bundle.d_s.size()) + " samples unused)");

  st.student = std::make_unique<Network>(st.cfg.net);
  st.opt_student.emplace(st.student->param_count(), st.cfg.learning_rate);
  st.opt_student->beta1 = st.cfg.adam_beta1;
  st.opt_student->beta2 = st.cfg.adam_beta2;

  if (st.plan.inter_teacher) {
    NetworkConfig inter_cfg = st.cfg.net;
    inter_cfg.seed = mix_seed(st.cfg.seed, "inter-init");
    st.inter_teacher = std::make_unique<Network>(inter_cfg);
    st.opt_inter.emplace(st.inter_teacher->param_count(), st.cfg.learning_rate);
    st.opt_inter->beta1 = st.cfg.adam_beta1;
    st.opt_inter->beta2 = st.cfg.adam_beta2;
  }
  if (st.plan.ema_teacher) {
    st.ema = ema_init(st.student->params(), st.cfg.ema_alpha);
    st.intra_scratch = std::make_unique<Network>(st.cfg.net);
  }
  if (st.plan.translate_src) {
    std::vector<const Image*> targets;
    for (const auto& s : bundle.d_t) targets.push_back(&s.image);
    for (const auto& s : bundle.d_u) targets.push_back(&s.image);
    st.translator = fit_translator(targets, st.cfg.translator_kind);
    st.translated_src.reserve(bundle.d_s.size());
    for (const auto& s : bundle.d_s) st.translated_src.push_back(translate(*st.translator, s.image));
  }

  st.rng_order = Rng(st.cfg.seed, "data-order");
  st.rng_noise = Rng(st.cfg.seed, "noise");
  st.rng_aug = Rng(st.cfg.seed, "augment");
  return st;
}

namespace detail {

// A labeled batch ready for the network: possibly augmented copies.
struct LabeledBatch {
  std::vector<Image> images;
  std::vector<LabelMap> labels;

  Tensor tensor() const {
    std::vector<const Image*> ptrs;
    for (const auto& im : images) ptrs.push_back(&im);
    return to_tensor(ptrs);
  }
};

inline LabeledBatch prepare_labeled(TrainState& st, const std::vector<DomainSample>& stream,
                                    const std::vector<int>& idxs, bool translated_source) {
  LabeledBatch b;
  for (int idx : idxs) {
    const Image& im = translated_source ? st.source_image(idx) : stream[idx].image;
    const LabelMap& lab = *stream[idx].label;
    if (st.cfg.augment_enabled) {
      Image aim;
      LabelMap alab;
      apply_affine(sample_affine(st.cfg.augment, st.rng_aug), im, &lab, aim, &alab);
      b.images.push_back(std::move(aim));
      b.labels.push_back(std::move(alab));
    } else {
      b.images.push_back(im);
      b.labels.push_back(lab);
    }
  }
  return b;
}

// forward + seg loss + backward on `net`, gradients scaled by 1/batch.
// Returns the mean seg loss. The caller owns zero_grads and the optimizer step.
inline double seg_pass(Network& net, const LabeledBatch& batch, const PixelMask* const* masks) {
  Tensor x = batch.tensor();
  Tensor logits = net.forward(x, true);
  Tensor probs = softmax(logits);
  Tensor dprobs(probs.n, probs.h, probs.w, probs.c);
  const double scale = 1.0 / static_cast<double>(batch.images.size());
  double loss = 0.0;
  for (int i = 0; i < probs.n; ++i) {
    ProbMap pm = image_probs(probs, i);
    const PixelMask* mask = masks ? masks[i] : nullptr;
    loss += seg_loss(pm, batch.labels[i], true, mask);
    ProbMap dpm(pm.h, pm.w, pm.c);
    seg_loss_grad(pm, batch.labels[i], scale, dpm, true, mask);
    add_image_grad(dprobs, i, dpm);
  }
  net.backward(softmax_backward(probs, dprobs));
  return loss * scale;
}

// Indices for stream batch `step`; streams whose pass fits the epoch exactly
// take a partial final batch, shorter streams wrap around their shuffled order.
inline std::vector<int> batch_indices(const std::vector<int>& order, int batch, int step,
                                      int steps) {
  std::vector<int> out;
  const auto len = static_cast<int>(order.size());
  const bool fits = (len + batch - 1) / batch == steps;
  if (fits) {
    const int start = step * batch;
    for (int j = start; j < std::min(start + batch, len); ++j) out.push_back(order[j]);
  } else {
    for (int j = 0; j < batch; ++j) out.push_back(order[(step * batch + j) % len]);
  }
  return out;
}

inline void run_intra_teacher_forward(TrainState& st, const Tensor& x, Tensor& probs_out) {
  st.intra_scratch->set_params(st.ema->teacher_params);
  st.intra_scratch->copy_buffers_from(*st.student);
  probs_out = softmax(st.intra_scratch->forward(x, false));
}

inline StepLosses run_step(TrainState& st, int t_epoch, const std::vector<int>& bs,
                           const std::vector<int>& bt, const std::vector<int>& bu) {
  const LossWeights& w = st.cfg.loss_weights;
  StepLosses sl;
  sl.lambda = lambda_con(static_cast<double>(t_epoch), w);
  auto hook = [&](const char* phase) {
    if (st.phase_hook) st.phase_hook(phase);
  };

  // source batch is prepared once; inter-teacher training and KD must see the
  // same tensors, and joint methods feed it to the student's seg loss instead
  LabeledBatch src_batch;
  if ((st.plan.ds_seg || st.plan.inter_teacher) && !bs.empty())
    src_batch = prepare_labeled(st, st.bundle->d_s, bs, st.plan.translate_src);

  // phase 1: inter-domain teacher takes its own optimizer step
  if (st.plan.inter_teacher) {
    if (!st.inter_teacher) throw StateError("run_step: inter_teacher component missing");
    st.inter_teacher->zero_grads();
    sl.inter_seg = seg_pass(*st.inter_teacher, src_batch, nullptr);
    if (!std::isfinite(sl.inter_seg))
      throw DivergenceError("inter-teacher phase: non-finite segmentation loss");
    st.opt_inter->step(st.inter_teacher->params(), st.inter_teacher->grads());
    hook("inter_teacher");
  }

  // phase 2 (default order): EMA update from the pre-step student
  const bool ema_first = st.plan.ema_teacher && !st.cfg.ema_after_student;
  if (ema_first) {
    ema_update(*st.ema, st.student->params());
    hook("ema");
  }

  // phase 3: student accumulates every loss term, then steps once
  st.student->zero_grads();

  LabeledBatch tgt_batch = prepare_labeled(st, st.bundle->d_t, bt, false);
  if (st.plan.ds_seg) {
    for (auto& im : src_batch.images) tgt_batch.images.push_back(std::move(im));
    for (auto& lb : src_batch.labels) tgt_batch.labels.push_back(std::move(lb));
  }
  sl.seg = seg_pass(*st.student, tgt_batch, nullptr);
  if (!std::isfinite(sl.seg)) throw DivergenceError("student phase: non-finite seg loss");

  if (st.plan.inter_teacher) {
    Tensor x_st = src_batch.tensor();
    Tensor tea_probs = softmax(st.inter_teacher->forward(x_st, false));
    Tensor stu_logits = st.student->forward(x_st, true);
    Tensor stu_probs = softmax(stu_logits);
    Tensor dprobs(stu_probs.n, stu_probs.h, stu_probs.w, stu_probs.c);
    const double scale = w.lambda_kd / static_cast<double>(x_st.n);
    for (int i = 0; i < stu_probs.n; ++i) {
      ProbMap tp = image_probs(tea_probs, i);
      ProbMap sp = image_probs(stu_probs, i);
      sl.kd += kd_loss(tp, sp);
      ProbMap dpm(sp.h, sp.w, sp.c);
      kd_loss_grad_student(tp, sp, scale, dpm);
      add_image_grad(dprobs, i, dpm);
    }
    sl.kd /= static_cast<double>(x_st.n);
    if (!std::isfinite(sl.kd)) throw DivergenceError("student phase: non-finite kd loss");
    st.student->backward(softmax_backward(stu_probs, dprobs));
  }

  if (st.plan.ema_teacher) {
    if (!st.ema || !st.intra_scratch) throw StateError("run_step: ema component missing");
    std::vector<Image> stu_in, tea_in;
    for (int idx : bu) {
      const Image& im = st.bundle->d_u[idx].image;
      stu_in.push_back(perturb(im, st.cfg.noise_sigma, st.rng_noise));
      tea_in.push_back(perturb(im, st.cfg.noise_sigma, st.rng_noise));
    }
    std::vector<const Image*> sp, tp;
    for (const auto& im : stu_in) sp.push_back(&im);
    for (const auto& im : tea_in) tp.push_back(&im);
    Tensor tea_probs;
    run_intra_teacher_forward(st, to_tensor(tp), tea_probs);
    Tensor stu_logits = st.student->forward(to_tensor(sp), true);
    Tensor stu_probs = softmax(stu_logits);
    Tensor dprobs(stu_probs.n, stu_probs.h, stu_probs.w, stu_probs.c);
    const double scale = sl.lambda / static_cast<double>(stu_probs.n);
    for (int i = 0; i < stu_probs.n; ++i) {
      ProbMap s = image_probs(stu_probs, i);
      ProbMap t = image_probs(tea_probs, i);
      sl.con += consistency_loss(s, t);
      ProbMap dpm(s.h, s.w, s.c);
      consistency_loss_grad_student(s, t, scale, dpm);
      add_image_grad(dprobs, i, dpm);
    }
    sl.con /= static_cast<double>(stu_probs.n);
    if (!std::isfinite(sl.con)) throw DivergenceError("student phase: non-finite consistency loss");
    st.student->backward(softmax_backward(stu_probs, dprobs));
  }

  if (st.plan.pseudo && st.pseudo_ready && !bu.empty()) {
    LabeledBatch pb;
    std::vector<const PixelMask*> masks;
    for (int idx : bu) {
      pb.images.push_back(st.bundle->d_u[idx].image);
      pb.labels.push_back(st.pseudo[idx].label);
      masks.push_back(&st.pseudo[idx].mask);
    }
    sl.pseudo = seg_pass(*st.student, pb, masks.data());
    if (!std::isfinite(sl.pseudo)) throw DivergenceError("student phase: non-finite pseudo loss");
  }

  st.opt_student->step(st.student->params(), st.student->grads());
  hook("student");

  if (st.plan.ema_teacher && st.cfg.ema_after_student) {
    ema_update(*st.ema, st.student->params());
    hook("ema");
  }

  sl.total = sl.seg + w.lambda_kd * sl.kd + sl.lambda * sl.con + sl.pseudo;
  return sl;
}

}  // namespace detail

// The three-phase training step, exposed for phase-order verification. Batch
// arguments are indices into the bundle's d_s / d_t / d_u streams.
inline StepLosses train_step_dual_teacher(TrainState& st, const std::vector<int>& batch_s,
                                          const std::vector<int>& batch_t,
                                          const std::vector<int>& batch_u) {
  if (!st.plan.inter_teacher || !st.plan.ema_teacher)
    throw StateError("train_step_dual_teacher: state not wired for dual_teacher");
  if (!st.translator || !st.translator->fitted())
    throw StateError("train_step_dual_teacher: translator not fitted");
  if (batch_s.empty() || batch_t.empty() || batch_u.empty())
    throw InputError("train_step_dual_teacher: all three batches must be nonempty");
  return detail::run_step(st, st.epoch + 1, batch_s, batch_t, batch_u);
}

struct TrainCallbacks {
  // fires after the epoch's record has been appended and the best-weights
  // snapshot refreshed, so a checkpoint written here captures the full state
  std::function<void(const TrainState&, const EpochRecord&)> on_epoch;
};

namespace detail {

inline void run_training(TrainState& st, const TrainCallbacks& cb) {
  const DatasetBundle& bundle = *st.bundle;
  const int steps = steps_per_epoch(st.plan, st.cfg, bundle);
  const int warm_up = st.cfg.epochs / 2;

  const bool use_ds = st.plan.need_ds;
  const bool use_du = st.plan.need_du;

  // each epoch's permutation is a pure function of the rng stream position, so
  // a resumed run shuffles exactly like the uninterrupted one
  auto fresh_order = [&](std::size_t n) {
    std::vector<int> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
    st.rng_order.shuffle(order);
    return order;
  };

  for (int epoch = st.epoch; epoch < st.cfg.epochs; ++epoch) {
    if (st.plan.pseudo && epoch >= warm_up) {
      std::vector<const Image*> images;
      for (const auto& s : bundle.d_u) images.push_back(&s.image);
      st.pseudo = generate_pseudo_labels(*st.student, images, st.cfg.pseudo_label_threshold);
      st.pseudo_ready = true;
    }

    std::vector<int> ds_order, du_order;
    if (use_ds) ds_order = fresh_order(bundle.d_s.size());
    std::vector<int> dt_order = fresh_order(bundle.d_t.size());
    if (use_du) du_order = fresh_order(bundle.d_u.size());

    StepLosses sums;
    for (int step = 0; step < steps; ++step) {
      std::vector<int> bs, bt, bu;
      if (use_ds) bs = batch_indices(ds_order, st.cfg.batch_s, step, steps);
      bt = batch_indices(dt_order, st.cfg.batch_t, step, steps);
      if (use_du) bu = batch_indices(du_order, st.cfg.batch_u, step, steps);
      StepLosses sl = run_step(st, epoch + 1, bs, bt, bu);
      sums.inter_seg += sl.inter_seg;
      sums.seg += sl.seg;
      sums.kd += sl.kd;
      sums.con += sl.con;
      sums.pseudo += sl.pseudo;
      sums.total += sl.total;
      sums.lambda = sl.lambda;
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.method = to_string(st.cfg.method);
    rec.seed = st.cfg.seed;
    rec.loss_total = sums.total / steps;
    rec.loss_seg = sums.seg / steps;
    rec.loss_kd = sums.kd / steps;
    rec.loss_con = sums.con / steps;
    rec.loss_pseudo = sums.pseudo / steps;
    rec.loss_inter = sums.inter_seg / steps;
    rec.lambda_con_value = sums.lambda;
    rec.val = evaluate_model(*st.student, bundle.val);
    rec.val.method = rec.method;
    rec.val.seed = rec.seed;
    rec.val.fold_index = bundle.fold_index;
    st.metrics_log.push_back(rec);

    if (rec.val.mean_dice > st.best_val) {
      st.best_val = rec.val.mean_dice;
      st.best_epoch = epoch + 1;
      st.best_params = st.student->params();
      st.best_buffers = st.student->buffers();
    }
    st.epoch = epoch + 1;
    if (cb.on_epoch) cb.on_epoch(st, rec);
  }
}

}  // namespace detail

inline TrainState train(const TrainConfig& cfg, const DatasetBundle& bundle,
                        const TrainCallbacks& cb = {}) {
  TrainState st = make_method_state(cfg, bundle);
  detail::run_training(st, cb);
  return st;
}

}  // namespace dualteacher
