#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "dualteacher/trainer.hpp"

namespace dualteacher {

// Everything needed to continue a run bit-for-bit: weights, optimizer moments,
// EMA average, translator, RNG stream positions, and the metrics written so
// far. Pseudo-labels are regenerated at the next epoch boundary, so they are
// deliberately absent.
inline ordered_json make_checkpoint(const TrainState& st) {
  ordered_json j;
  j["format"] = 1;
  j["config_hash"] = config_hash(st.cfg);
  j["train_config"] = train_config_to_json(st.cfg);
  j["data"] = {{"fold_index", st.bundle->fold_index},
               {"n_source", st.bundle->d_s.size()},
               {"n_target_labeled", st.bundle->d_t.size()},
               {"n_target_unlabeled", st.bundle->d_u.size()},
               {"n_val", st.bundle->val.size()},
               {"image_size", st.bundle->spec.image_size},
               {"num_classes", st.bundle->spec.num_classes}};
  j["epoch"] = st.epoch;
  j["student"] = {{"params", encode_doubles(st.student->params())},
                  {"buffers", encode_doubles(st.student->buffers())}};
  if (st.inter_teacher)
    j["inter_teacher"] = {{"params", encode_doubles(st.inter_teacher->params())},
                          {"buffers", encode_doubles(st.inter_teacher->buffers())}};
  else
    j["inter_teacher"] = nullptr;
  if (st.ema)
    j["ema"] = {{"alpha", st.ema->alpha},
                {"step", st.ema->step},
                {"params", encode_doubles(st.ema->teacher_params)}};
  else
    j["ema"] = nullptr;
  j["opt_student"] = {{"t", st.opt_student->t},
                      {"m", encode_doubles(st.opt_student->m)},
                      {"v", encode_doubles(st.opt_student->v)}};
  if (st.opt_inter)
    j["opt_inter"] = {{"t", st.opt_inter->t},
                      {"m", encode_doubles(st.opt_inter->m)},
                      {"v", encode_doubles(st.opt_inter->v)}};
  else
    j["opt_inter"] = nullptr;
  if (st.translator)
    j["translator"] = translator_to_json(*st.translator);
  else
    j["translator"] = nullptr;
  j["rng"] = {{"order", st.rng_order.serialize()},
              {"noise", st.rng_noise.serialize()},
              {"augment", st.rng_aug.serialize()}};
  if (st.best_epoch >= 0)
    j["best"] = {{"epoch", st.best_epoch},
                 {"val_mean_dice", st.best_val},
                 {"params", encode_doubles(st.best_params)},
                 {"buffers", encode_doubles(st.best_buffers)}};
  else
    j["best"] = nullptr;
  ordered_json log = ordered_json::array();
  for (const auto& r : st.metrics_log) log.push_back(epoch_record_to_json(r));
  j["metrics_log"] = log;
  return j;
}

inline void save_checkpoint(const std::string& path, const TrainState& st) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out << make_checkpoint(st).dump(2) << "\n";
  if (!out.good()) throw IoError("failed while writing checkpoint: " + path);
}

inline ordered_json load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw FormatError("checkpoint is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object() || !j.contains("format") || j["format"].get<int>() != 1)
    throw FormatError("unsupported checkpoint format");
  return j;
}

// Rebuilds a TrainState positioned exactly where the checkpointed run stopped.
// `cfg` may extend epochs; everything else must hash-match the original run.
inline TrainState restore_state(const TrainConfig& cfg, const DatasetBundle& bundle,
                                const ordered_json& ck) {
  const std::string want = config_hash(normalize_config(cfg, bundle));
  const std::string have = ck.at("config_hash").get<std::string>();
  if (want != have)
    throw StateError("checkpoint config hash mismatch (checkpoint " + have + ", requested " +
                     want + "); only --epochs may change across a resume");
  const auto& d = ck.at("data");
  if (d.at("fold_index").get<int>() != bundle.fold_index ||
      d.at("n_source").get<std::size_t>() != bundle.d_s.size() ||
      d.at("n_target_labeled").get<std::size_t>() != bundle.d_t.size() ||
      d.at("n_target_unlabeled").get<std::size_t>() != bundle.d_u.size() ||
      d.at("n_val").get<std::size_t>() != bundle.val.size() ||
      d.at("image_size").get<int>() != bundle.spec.image_size ||
      d.at("num_classes").get<int>() != bundle.spec.num_classes)
    throw StateError("checkpoint was written against a different dataset/fold");

  TrainState st = make_method_state(cfg, bundle);
  st.student->set_params(decode_doubles(ck.at("student").at("params").get<std::string>()));
  st.student->set_buffers(decode_doubles(ck.at("student").at("buffers").get<std::string>()));
  if (st.inter_teacher) {
    if (ck.at("inter_teacher").is_null())
      throw StateError("checkpoint lacks inter-teacher state required by this method");
    st.inter_teacher->set_params(
        decode_doubles(ck.at("inter_teacher").at("params").get<std::string>()));
    st.inter_teacher->set_buffers(
        decode_doubles(ck.at("inter_teacher").at("buffers").get<std::string>()));
  }
  if (st.ema) {
    if (ck.at("ema").is_null())
      throw StateError("checkpoint lacks EMA state required by this method");
    st.ema->alpha = ck.at("ema").at("alpha").get<double>();
    st.ema->step = ck.at("ema").at("step").get<std::int64_t>();
    st.ema->teacher_params = decode_doubles(ck.at("ema").at("params").get<std::string>());
  }
  st.opt_student->t = ck.at("opt_student").at("t").get<std::int64_t>();
  st.opt_student->m = decode_doubles(ck.at("opt_student").at("m").get<std::string>());
  st.opt_student->v = decode_doubles(ck.at("opt_student").at("v").get<std::string>());
  if (st.opt_inter) {
    st.opt_inter->t = ck.at("opt_inter").at("t").get<std::int64_t>();
    st.opt_inter->m = decode_doubles(ck.at("opt_inter").at("m").get<std::string>());
    st.opt_inter->v = decode_doubles(ck.at("opt_inter").at("v").get<std::string>());
  }
  if (st.translator && !ck.at("translator").is_null()) {
    st.translator = translator_from_json(ck.at("translator"));
    st.translated_src.clear();
    for (const auto& s : bundle.d_s) st.translated_src.push_back(translate(*st.translator, s.image));
  }
  st.rng_order.deserialize(ck.at("rng").at("order").get<std::string>());
  st.rng_noise.deserialize(ck.at("rng").at("noise").get<std::string>());
  st.rng_aug.deserialize(ck.at("rng").at("augment").get<std::string>());
  st.epoch = ck.at("epoch").get<int>();
  st.metrics_log.clear();
  for (const auto& r : ck.at("metrics_log"))
    st.metrics_log.push_back(epoch_record_from_json(r, bundle.fold_index));
  if (!ck.at("best").is_null()) {
    st.best_epoch = ck.at("best").at("epoch").get<int>();
    st.best_val = ck.at("best").at("val_mean_dice").get<double>();
    st.best_params = decode_doubles(ck.at("best").at("params").get<std::string>());
    st.best_buffers = decode_doubles(ck.at("best").at("buffers").get<std::string>());
  }
  return st;
}

inline TrainState resume_training(const TrainConfig& cfg, const DatasetBundle& bundle,
                                  const ordered_json& ck, const TrainCallbacks& cb = {}) {
  TrainState st = restore_state(cfg, bundle, ck);
  if (st.epoch > cfg.epochs)
    throw ConfigError("checkpoint already has " + std::to_string(st.epoch) +
                      " epochs, requested total " + std::to_string(cfg.epochs));
  detail::run_training(st, cb);
  return st;
}

}  // namespace dualteacher
