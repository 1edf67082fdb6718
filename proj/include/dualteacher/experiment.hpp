#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dualteacher/checkpoint.hpp"
#include "dualteacher/dataset_io.hpp"
#include "dualteacher/metrics.hpp"
#include "dualteacher/plot.hpp"
#include "dualteacher/trainer.hpp"

namespace dualteacher {

struct CellKey {
  Method method;
  int fold = 0;
  std::uint64_t seed = 0;
};

inline std::string cell_dir(const std::string& root, const CellKey& k) {
  return root + "/" + to_string(k.method) + "/fold" + std::to_string(k.fold) + "/seed" +
         std::to_string(k.seed);
}

struct CellResult {
  EpochRecord best;
  EpochRecord final;
  std::string hash;
};

namespace detail {

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << text;
  if (!out.good()) throw IoError("failed while writing: " + path);
}

inline const EpochRecord& best_record(const TrainState& st) {
  if (st.metrics_log.empty()) throw StateError("training produced no epochs");
  const EpochRecord* best = &st.metrics_log.front();
  for (const auto& r : st.metrics_log)
    if (r.val.mean_dice > best->val.mean_dice) best = &r;
  return *best;
}

// Everything a finished run leaves behind. metrics.jsonl is streamed by the
// caller during training; this writes the rest.
inline CellResult write_cell_artifacts(const TrainState& st, const std::string& out_dir) {
  const EpochRecord& best = best_record(st);
  const EpochRecord& final = st.metrics_log.back();

  save_checkpoint(out_dir + "/checkpoint.json", st);

  ordered_json model;
  model["format"] = 1;
  model["net"] = {{"in_channels", st.cfg.net.in_channels},
                  {"num_classes", st.cfg.net.num_classes},
                  {"base_channels", st.cfg.net.base_channels},
                  {"depth", st.cfg.net.depth},
                  {"norm", to_string(st.cfg.net.norm)},
                  {"seed", st.cfg.net.seed}};
  model["epoch"] = st.best_epoch;
  model["val_mean_dice"] = st.best_val;
  model["params"] = encode_doubles(st.best_params);
  model["buffers"] = encode_doubles(st.best_buffers);
  write_text_file(out_dir + "/model_best.json", model.dump(2) + "\n");

  write_curves_png(out_dir + "/curves.png", st.metrics_log);
  write_metrics_csv(out_dir + "/metrics.csv", {best.val});

  ordered_json res;
  res["format"] = 1;
  res["config_hash"] = config_hash(st.cfg);
  res["method"] = to_string(st.cfg.method);
  res["fold"] = st.bundle->fold_index;
  res["seed"] = st.cfg.seed;
  res["epochs"] = st.epoch;
  res["best_epoch"] = st.best_epoch;
  res["best"] = epoch_record_to_json(best);
  res["final"] = epoch_record_to_json(final);
  write_text_file(out_dir + "/result.json", res.dump(2) + "\n");

  return CellResult{best, final, config_hash(st.cfg)};
}

}  // namespace detail

// Trains one (method, fold, seed) cell, streaming metrics.jsonl as epochs
// finish; everything else lands when the run completes. `resume_from` replays
// a checkpoint's history into metrics.jsonl before continuing.
inline CellResult run_cell(const TrainConfig& cfg, const DatasetBundle& bundle,
                           const std::string& out_dir,
                           const std::string& resume_from = std::string()) {
  std::filesystem::create_directories(out_dir);
  detail::write_text_file(out_dir + "/config.json",
                          train_config_to_json(normalize_config(cfg, bundle)).dump(2) + "\n");

  std::ofstream jsonl(out_dir + "/metrics.jsonl", std::ios::binary);
  if (!jsonl) throw IoError("cannot open for writing: " + out_dir + "/metrics.jsonl");
  TrainCallbacks cb;
  cb.on_epoch = [&jsonl](const TrainState&, const EpochRecord& r) {
    jsonl << epoch_record_to_json(r).dump() << "\n";
    jsonl.flush();
  };

  TrainState st = [&] {
    if (resume_from.empty()) return train(cfg, bundle, cb);
    ordered_json ck = load_checkpoint(resume_from);
    TrainState restored = restore_state(cfg, bundle, ck);
    for (const auto& r : restored.metrics_log)
      jsonl << epoch_record_to_json(r).dump() << "\n";
    jsonl.flush();
    if (restored.epoch > cfg.epochs)
      throw ConfigError("checkpoint already has " + std::to_string(restored.epoch) +
                        " epochs, requested total " + std::to_string(cfg.epochs));
    detail::run_training(restored, cb);
    return restored;
  }();
  jsonl.close();
  if (!jsonl.good()) throw IoError("failed while writing: " + out_dir + "/metrics.jsonl");

  return detail::write_cell_artifacts(st, out_dir);
}

inline std::optional<CellResult> load_cell(const std::string& out_dir, int fold_index) {
  const std::string path = out_dir + "/result.json";
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw FormatError("result file is not valid JSON: " + path + ": " + e.what());
  }
  CellResult r;
  r.best = epoch_record_from_json(j.at("best"), fold_index);
  r.final = epoch_record_from_json(j.at("final"), fold_index);
  r.hash = j.at("config_hash").get<std::string>();
  return r;
}

inline std::vector<Method> suite_methods(const std::string& suite) {
  if (suite == "table1")
    return {Method::supervised_only, Method::joint_training, Method::mean_teacher,
            Method::dual_teacher};
  if (suite == "table2")
    return {Method::pseudo_label_baseline, Method::gan_baseline, Method::no_inter_teacher,
            Method::no_intra_teacher, Method::dual_teacher};
  throw ConfigError("unknown suite: " + suite + " (expected table1 or table2)");
}

// Worker cap: DUALTEACHER_THREADS when set, else min(hardware, 4). Training
// cells are memory-hungry, so the default stays conservative.
inline int worker_count(std::size_t n_cells) {
  int workers;
  if (const char* env = std::getenv("DUALTEACHER_THREADS")) {
    try {
      workers = std::stoi(env);
    } catch (const std::exception&) {
      throw ConfigError("DUALTEACHER_THREADS is not an integer: " + std::string(env));
    }
    if (workers < 1) throw ConfigError("DUALTEACHER_THREADS must be >= 1");
  } else {
    workers = std::min(4u, std::max(1u, std::thread::hardware_concurrency()));
  }
  return static_cast<int>(std::min<std::size_t>(workers, std::max<std::size_t>(n_cells, 1)));
}

struct SuiteReport {
  std::string suite;
  std::vector<MetricsRecord> records;  // best-epoch record per cell, suite order
  std::vector<AggregateRow> rows;
  std::string table_text;
};

// Resolves every cell of a suite: reuses finished runs, trains the rest in a
// small thread pool (unless existing_only, which turns absences into a report
// error listing each missing cell).
inline SuiteReport run_suite(const std::string& suite, const std::string& data_root,
                             const std::vector<int>& folds,
                             const std::vector<std::uint64_t>& seeds, const TrainConfig& base,
                             const std::string& out_root, bool existing_only) {
  const std::vector<Method> methods = suite_methods(suite);
  if (folds.empty() || seeds.empty()) throw ConfigError("run_suite: folds and seeds required");

  std::map<int, DatasetBundle> bundles;
  for (int f : folds)
    bundles.emplace(f, load_dataset(data_root + "/fold" + std::to_string(f)));

  std::vector<CellKey> keys;
  for (Method m : methods)
    for (int f : folds)
      for (std::uint64_t s : seeds) keys.push_back(CellKey{m, f, s});

  auto cell_config = [&](const CellKey& k) {
    TrainConfig cfg = base;
    cfg.method = k.method;
    cfg.seed = k.seed;
    return cfg;
  };

  std::map<std::string, CellResult> done;
  std::vector<CellKey> todo;
  std::string missing;
  for (const auto& k : keys) {
    const std::string dir = cell_dir(out_root, k);
    if (auto r = load_cell(dir, k.fold)) {
      const std::string want = config_hash(normalize_config(cell_config(k), bundles.at(k.fold)));
      if (r->hash != want)
        throw StateError("existing run at " + dir + " used a different config (hash " + r->hash +
                         ", expected " + want + "); remove it to re-run");
      done.emplace(dir, std::move(*r));
    } else if (existing_only) {
      missing += "\n  (" + std::string(to_string(k.method)) + ", fold " + std::to_string(k.fold) +
                 ", seed " + std::to_string(k.seed) + ")";
    } else {
      todo.push_back(k);
    }
  }
  if (!missing.empty()) throw ReportError("missing runs for suite " + suite + ":" + missing);

  if (!todo.empty()) {
    const int workers = worker_count(todo.size());
    std::mutex mu;
    std::size_t next = 0;
    std::exception_ptr first_error;
    auto work = [&] {
      while (true) {
        CellKey k;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (next >= todo.size() || first_error) return;
          k = todo[next++];
        }
        try {
          const std::string dir = cell_dir(out_root, k);
          CellResult r = run_cell(cell_config(k), bundles.at(k.fold), dir);
          std::lock_guard<std::mutex> lock(mu);
          done.emplace(dir, std::move(r));
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    };
    std::vector<std::thread> pool;
    for (int i = 0; i < workers; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  SuiteReport rep;
  rep.suite = suite;
  for (const auto& k : keys) rep.records.push_back(done.at(cell_dir(out_root, k)).best.val);
  rep.rows = aggregate_folds(rep.records);
  rep.table_text = render_table(rep.rows, bundles.at(folds.front()).spec.num_classes);
  return rep;
}

}  // namespace dualteacher
