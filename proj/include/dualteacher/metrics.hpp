#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dualteacher/errors.hpp"
#include "dualteacher/image.hpp"
#include "dualteacher/net.hpp"
#include "dualteacher/phantom.hpp"

namespace dualteacher {

// Hard-label overlap 2|P∩T| / (|P|+|T|); 1.0 when the class is absent from
// both maps (degenerate case, counted separately by evaluate_model).
inline double dice_coefficient(const LabelMap& pred, const LabelMap& truth, int class_id) {
  if (pred.h != truth.h || pred.w != truth.w)
    throw DimensionError("dice_coefficient: shape mismatch");
  std::uint64_t np = 0, nt = 0, overlap = 0;
  for (std::size_t i = 0; i < pred.lab.size(); ++i) {
    const bool p = pred.lab[i] == class_id;
    const bool t = truth.lab[i] == class_id;
    np += p;
    nt += t;
    overlap += p && t;
  }
  if (np + nt == 0) return 1.0;
  return 2.0 * static_cast<double>(overlap) / static_cast<double>(np + nt);
}

struct MetricsRecord {
  std::map<int, double> per_class_dice;  // all classes incl. background
  double mean_dice = 0.0;                // mean over foreground classes
  int n_images = 0;
  int fold_index = -1;
  std::string method;
  std::uint64_t seed = 0;
  int degenerate_images = 0;  // images where some class was absent from both maps
};

// Per image: argmax prediction, per-class dice; then average per class over
// images (each image weighted equally, pooled-pixel micro-averaging is not
// used). Foreground classes only enter mean_dice.
inline MetricsRecord evaluate_model(Network& net, const std::vector<DomainSample>& samples,
                                    int eval_batch = 8) {
  if (samples.empty()) throw InputError("evaluate_model: no samples");
  const int C = net.config().num_classes;
  MetricsRecord rec;
  rec.n_images = static_cast<int>(samples.size());
  std::vector<double> sums(C, 0.0);

  for (std::size_t start = 0; start < samples.size(); start += eval_batch) {
    const std::size_t stop = std::min(samples.size(), start + eval_batch);
    std::vector<const Image*> batch;
    for (std::size_t i = start; i < stop; ++i) {
      if (!samples[i].label) throw InputError("evaluate_model: unlabeled sample " + samples[i].id);
      batch.push_back(&samples[i].image);
    }
    Tensor probs = softmax(net.forward(to_tensor(batch), false));
    for (std::size_t i = start; i < stop; ++i) {
      LabelMap pred = argmax_labels(image_probs(probs, static_cast<int>(i - start)));
      const LabelMap& truth = *samples[i].label;
      bool degenerate = false;
      for (int c = 0; c < C; ++c) {
        bool absent = true;
        for (std::size_t k = 0; k < pred.lab.size() && absent; ++k)
          if (pred.lab[k] == c || truth.lab[k] == c) absent = false;
        if (absent) degenerate = true;
        sums[c] += dice_coefficient(pred, truth, c);
      }
      if (degenerate) ++rec.degenerate_images;
    }
  }

  double fg = 0.0;
  for (int c = 0; c < C; ++c) {
    rec.per_class_dice[c] = sums[c] / rec.n_images;
    if (c > 0) fg += rec.per_class_dice[c];
  }
  rec.mean_dice = fg / (C - 1);
  return rec;
}

struct AggregateRow {
  std::string method;
  std::vector<double> class_mean, class_std;  // foreground classes, ascending id
  double mean_mean = 0.0, mean_std = 0.0;
  int n_runs = 0;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  return {mean, std::sqrt(var)};
}

}  // namespace detail

// Mean and std per foreground class and of the per-run mean dice, pooled over
// every record (folds and seeds) of each method. Methods keep first-seen order.
inline std::vector<AggregateRow> aggregate_folds(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw ReportError("aggregate_folds: no records");
  std::vector<std::string> order;
  std::map<std::string, std::vector<const MetricsRecord*>> by_method;
  for (const auto& r : records) {
    if (!by_method.count(r.method)) order.push_back(r.method);
    by_method[r.method].push_back(&r);
  }
  const int C = static_cast<int>(records.front().per_class_dice.size());
  std::vector<AggregateRow> rows;
  for (const auto& method : order) {
    const auto& recs = by_method[method];
    AggregateRow row;
    row.method = method;
    row.n_runs = static_cast<int>(recs.size());
    for (int c = 1; c < C; ++c) {
      std::vector<double> xs;
      for (const auto* r : recs) xs.push_back(r->per_class_dice.at(c));
      auto [m, s] = detail::mean_std(xs);
      row.class_mean.push_back(m);
      row.class_std.push_back(s);
    }
    std::vector<double> means;
    for (const auto* r : recs) means.push_back(r->mean_dice);
    std::tie(row.mean_mean, row.mean_std) = detail::mean_std(means);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<std::string> foreground_class_names(int num_classes) {
  std::vector<std::string> names;
  for (int c = 1; c < num_classes; ++c) names.push_back("c" + std::to_string(c));
  return names;
}

// Aligned text table, classes as columns plus the foreground average.
inline std::string render_table(const std::vector<AggregateRow>& rows, int num_classes) {
  if (rows.empty()) throw ReportError("render_table: no rows");
  const auto names = foreground_class_names(num_classes);
  std::ostringstream os;
  os << std::left << std::setw(24) << "method";
  for (const auto& n : names) os << std::right << std::setw(16) << n;
  os << std::right << std::setw(16) << "avg" << "\n";
  os << std::string(24 + 16 * (names.size() + 1), '-') << "\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& row : rows) {
    os << std::left << std::setw(24) << row.method;
    for (std::size_t i = 0; i < names.size(); ++i) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(4) << row.class_mean[i] << "±"
           << std::setprecision(3) << row.class_std[i];
      os << std::right << std::setw(16) << cell.str();
    }
    std::ostringstream cell;
    cell << std::fixed << std::setprecision(4) << row.mean_mean << "±" << std::setprecision(3)
         << row.mean_std;
    os << std::right << std::setw(16) << cell.str() << "\n";
  }
  return os.str();
}

// One row per foreground class per record plus a "mean" row.
inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "method,seed,fold,class,dice\n";
  out << std::setprecision(17);
  for (const auto& r : records) {
    for (const auto& [c, d] : r.per_class_dice) {
      if (c == 0) continue;
      out << r.method << "," << r.seed << "," << r.fold_index << "," << c << "," << d << "\n";
    }
    out << r.method << "," << r.seed << "," << r.fold_index << ",mean," << r.mean_dice << "\n";
  }
  if (!out.good()) throw IoError("write failed: " + path);
}

}  // namespace dualteacher
