#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dualteacher/errors.hpp"
#include "dualteacher/image.hpp"
#include "dualteacher/rng.hpp"

namespace dualteacher {

enum class Domain { source, target };

inline const char* to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

inline Domain domain_from_string(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw FormatError("unknown domain: " + s);
}

// One (image, optional label, domain) record. Unlabeled samples are exactly
// the members of D_u.
struct DomainSample {
  Image image;
  std::optional<LabelMap> label;
  Domain domain = Domain::target;
  std::string id;
};

// Controls the synthetic two-domain generator. Both domains share the same
// geometry process (elliptical blobs, one per foreground class) and differ
// only in the per-class intensity tables.
//
// The source table keeps the classes in the same brightness rank order as the
// target table. A rank-scrambling permutation would make the appearance gap
// unclosable for any monotone translator, so instead the values are remapped:
// each source intensity sits between two *different* target classes, which is
// what makes training on raw source images actively misleading.
struct PhantomSpec {
  int image_size = 64;
  int num_classes = 5;  // including background
  std::vector<double> intensity_table_target = {0.05, 0.25, 0.45, 0.65, 0.85};
  std::vector<double> intensity_table_source = {0.35, 0.50, 0.62, 0.78, 0.95};
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;

  int structures_per_image() const { return num_classes - 1; }

  void validate() const {
    if (image_size < 8) throw ConfigError("PhantomSpec: image_size must be >= 8");
    if (num_classes < 2) throw ConfigError("PhantomSpec: num_classes must be >= 2");
    if (noise_sigma < 0.0) throw ConfigError("PhantomSpec: noise_sigma must be >= 0");
    auto check_table = [&](const std::vector<double>& t, const char* name) {
      if (static_cast<int>(t.size()) != num_classes)
        throw ConfigError(std::string("PhantomSpec: ") + name + " must have one entry per class");
      for (double v : t)
        if (v < 0.0 || v > 1.0)
          throw ConfigError(std::string("PhantomSpec: ") + name + " intensities must lie in [0,1]");
      for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t j = i + 1; j < t.size(); ++j)
          if (std::abs(t[i] - t[j]) < 0.1)
            throw ConfigError(std::string("PhantomSpec: ") + name +
                              " class means must be pairwise separated by >= 0.1");
    };
    check_table(intensity_table_target, "intensity_table_target");
    check_table(intensity_table_source, "intensity_table_source");
    if (intensity_table_target == intensity_table_source)
      throw ConfigError(
          "PhantomSpec: intensity tables must differ between domains (no domain gap otherwise)");
  }
};

// The three-way D_s / D_t / D_u split plus a validation set for one fold.
struct DatasetBundle {
  std::vector<DomainSample> d_s;   // labeled source
  std::vector<DomainSample> d_t;   // labeled target (few)
  std::vector<DomainSample> d_u;   // unlabeled target (many)
  std::vector<DomainSample> val;   // labeled target, held out
  int fold_index = 0;
  PhantomSpec spec;
};

namespace detail {

struct Ellipse {
  double cy, cx;    // center, pixels
  double ry, rx;    // semi-axes, pixels
  double theta;     // rotation, radians
};

// One ellipse per foreground class, in drawing order (class 1 first).
struct Geometry {
  std::vector<Ellipse> blobs;
};

inline Geometry sample_geometry(const PhantomSpec& spec, Rng& rng) {
  Geometry g;
  const double size = static_cast<double>(spec.image_size);
  for (int i = 0; i < spec.structures_per_image(); ++i) {
    Ellipse e;
    e.cy = rng.uniform(0.2 * size, 0.8 * size);
    e.cx = rng.uniform(0.2 * size, 0.8 * size);
    e.ry = rng.uniform(size / 10.0, size / 4.0);
    e.rx = rng.uniform(size / 10.0, size / 4.0);
    e.theta = rng.uniform(0.0, M_PI);
    g.blobs.push_back(e);
  }
  return g;
}

// Topmost class wins: blobs are drawn in fixed class order, later classes
// occlude earlier ones.
inline LabelMap rasterize(const Geometry& geom, int size) {
  LabelMap lab(size, size, 0);
  for (std::size_t i = 0; i < geom.blobs.size(); ++i) {
    const Ellipse& e = geom.blobs[i];
    const double ct = std::cos(e.theta), st = std::sin(e.theta);
    const auto cls = static_cast<std::uint8_t>(i + 1);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double dy = y + 0.5 - e.cy;
        const double dx = x + 0.5 - e.cx;
        const double u = (ct * dx + st * dy) / e.rx;
        const double v = (-st * dx + ct * dy) / e.ry;
        if (u * u + v * v <= 1.0) lab.at(y, x) = cls;
      }
    }
  }
  return lab;
}

inline Image render(const LabelMap& lab, const std::vector<double>& table, double sigma,
                    Rng& rng) {
  Image img(lab.h, lab.w);
  for (std::size_t i = 0; i < lab.size(); ++i) {
    double v = table[lab.lab[i]];
    if (sigma > 0.0) v += rng.normal(0.0, sigma);
    img.pix[i] = std::clamp(v, 0.0, 1.0);
  }
  return img;
}

inline std::string sample_id(Domain d, int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%c%03d", d == Domain::source ? 's' : 't', index);
  return buf;
}

}  // namespace detail

// Generates n_source + n_target labeled samples. Every sample draws its
// geometry and noise from a stream derived from (spec.seed, id), so the
// result is a pure function of the spec and counts.
inline std::vector<DomainSample> generate_dataset(const PhantomSpec& spec, int n_source,
                                                  int n_target) {
  spec.validate();
  if (n_source < 1) throw ConfigError("generate_dataset: n_source must be >= 1");
  if (n_target < 4) throw ConfigError("generate_dataset: n_target must be >= 4 (four folds)");

  std::vector<DomainSample> out;
  out.reserve(static_cast<std::size_t>(n_source) + n_target);
  auto emit = [&](Domain d, int index) {
    DomainSample s;
    s.id = detail::sample_id(d, index);
    s.domain = d;
    Rng rng(spec.seed, "phantom:" + s.id);
    detail::Geometry geom = detail::sample_geometry(spec, rng);
    LabelMap lab = detail::rasterize(geom, spec.image_size);
    const auto& table =
        d == Domain::source ? spec.intensity_table_source : spec.intensity_table_target;
    s.image = detail::render(lab, table, spec.noise_sigma, rng);
    s.label = std::move(lab);
    out.push_back(std::move(s));
  };
  for (int i = 0; i < n_source; ++i) emit(Domain::source, i);
  for (int i = 0; i < n_target; ++i) emit(Domain::target, i);
  return out;
}

// Debug/test helper: one source and one target sample sharing the same
// geometry, so the domain gap is appearance-only by construction.
inline std::pair<DomainSample, DomainSample> generate_paired_sample(const PhantomSpec& spec,
                                                                    int pair_index) {
  spec.validate();
  Rng geo_rng(spec.seed, "phantom-paired:" + std::to_string(pair_index));
  detail::Geometry geom = detail::sample_geometry(spec, geo_rng);
  LabelMap lab = detail::rasterize(geom, spec.image_size);

  Rng noise_s(spec.seed, "phantom-paired-noise-s:" + std::to_string(pair_index));
  Rng noise_t(spec.seed, "phantom-paired-noise-t:" + std::to_string(pair_index));
  DomainSample src, tgt;
  src.id = "ps" + std::to_string(pair_index);
  src.domain = Domain::source;
  src.image = detail::render(lab, spec.intensity_table_source, spec.noise_sigma, noise_s);
  src.label = lab;
  tgt.id = "pt" + std::to_string(pair_index);
  tgt.domain = Domain::target;
  tgt.image = detail::render(lab, spec.intensity_table_target, spec.noise_sigma, noise_t);
  tgt.label = lab;
  return {std::move(src), std::move(tgt)};
}

// Throws unless the bundle satisfies the structural invariants. Empty streams
// are allowed here; the trainer enforces per-method stream requirements.
inline void validate_bundle(const DatasetBundle& bundle) {
  auto check_labels = [](const std::vector<DomainSample>& v, bool labeled, const char* role) {
    for (const auto& s : v) {
      if (labeled && !s.label.has_value())
        throw FormatError(std::string("sample ") + s.id + " in " + role + " must carry a label");
      if (!labeled && s.label.has_value())
        throw FormatError(std::string("sample ") + s.id + " in d_u must not carry a label");
    }
  };
  check_labels(bundle.d_s, true, "d_s");
  check_labels(bundle.d_t, true, "d_t");
  check_labels(bundle.d_u, false, "d_u");
  check_labels(bundle.val, true, "val");

  std::vector<std::string> target_ids;
  for (const auto* v : {&bundle.d_t, &bundle.d_u, &bundle.val})
    for (const auto& s : *v) target_ids.push_back(s.id);
  std::vector<std::string> sorted = target_ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw FormatError("d_t, d_u and val must be pairwise disjoint by id");
  for (const auto& s : bundle.d_s)
    if (std::binary_search(sorted.begin(), sorted.end(), s.id))
      throw FormatError("source id collides with a target id: " + s.id);

  const std::size_t m_t = bundle.d_t.size(), m_u = bundle.d_u.size();
  if (m_u > 0 && m_t * 2 > m_u)
    throw FormatError("labeled target set too large: need m_t <= m_u/2 (got " +
                      std::to_string(m_t) + " vs " + std::to_string(m_u) + ")");
}

// Cross-validation folds. Every fold keeps all source samples as D_s; targets
// are partitioned into n_folds equal validation groups, and the remaining
// targets of each fold are split into labeled D_t and unlabeled D_u.
inline std::vector<DatasetBundle> make_folds(const std::vector<DomainSample>& samples,
                                             const PhantomSpec& spec, int n_folds,
                                             double labeled_frac, std::uint64_t seed) {
  if (n_folds < 2) throw ConfigError("make_folds: n_folds must be >= 2");
  if (labeled_frac <= 0.0 || labeled_frac >= 1.0)
    throw ConfigError("make_folds: labeled_frac must lie strictly between 0 and 1");

  std::vector<DomainSample> sources, targets;
  for (const auto& s : samples)
    (s.domain == Domain::source ? sources : targets).push_back(s);
  const int n_target = static_cast<int>(targets.size());
  if (n_target % n_folds != 0)
    throw ConfigError("make_folds: target count (" + std::to_string(n_target) +
                      ") must be divisible by n_folds (" + std::to_string(n_folds) + ")");
  for (const auto& t : targets)
    if (!t.label.has_value())
      throw ConfigError("make_folds: all target samples must be labeled before splitting");

  std::vector<int> order(targets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng fold_rng(seed, "folds");
  fold_rng.shuffle(order);

  const int group = n_target / n_folds;
  std::vector<DatasetBundle> folds;
  for (int k = 0; k < n_folds; ++k) {
    DatasetBundle b;
    b.fold_index = k;
    b.spec = spec;
    b.d_s = sources;

    std::vector<int> rest;
    for (int i = 0; i < n_target; ++i) {
      const int pos = order[i];
      if (i / group == k)
        b.val.push_back(targets[pos]);
      else
        rest.push_back(pos);
    }
    Rng split_rng(seed, "fold-split:" + std::to_string(k));
    split_rng.shuffle(rest);
    const auto n_labeled = static_cast<std::size_t>(
        std::llround(labeled_frac * static_cast<double>(rest.size())));
    if (n_labeled * 3 > rest.size())
      throw ConfigError("make_folds: labeled_frac too high, need m_t <= m_u/2");
    for (std::size_t i = 0; i < rest.size(); ++i) {
      DomainSample s = targets[rest[i]];
      if (i < n_labeled) {
        b.d_t.push_back(std::move(s));
      } else {
        s.label.reset();  // D_u is unlabeled by definition
        b.d_u.push_back(std::move(s));
      }
    }
    validate_bundle(b);
    folds.push_back(std::move(b));
  }
  return folds;
}

}  // namespace dualteacher
