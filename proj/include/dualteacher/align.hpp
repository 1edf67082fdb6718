#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualteacher/errors.hpp"
#include "dualteacher/image.hpp"

namespace dualteacher {

constexpr int kHistBins = 256;

inline int intensity_bin(double v) {
  return std::min(kHistBins - 1, static_cast<int>(std::floor(v * kHistBins)));
}

// Source-to-target appearance mapper. The default is classical monotone
// histogram matching against the pooled target intensity distribution; it is
// deterministic, preserves intensity order (so piecewise-constant structures
// keep their topology), and closes a pure intensity gap. A learned translator
// can sit behind the same interface.
struct Translator {
  enum class Kind { identity, histogram_match };
  Kind kind = Kind::identity;
  std::vector<std::uint64_t> reference_hist;  // 256 bins; present iff histogram_match

  bool fitted() const { return kind == Kind::identity || !reference_hist.empty(); }
};

inline std::string to_string(Translator::Kind k) {
  return k == Translator::Kind::identity ? "identity" : "histogram_match";
}

inline Translator::Kind translator_kind_from_string(const std::string& s) {
  if (s == "identity") return Translator::Kind::identity;
  if (s == "histogram_match") return Translator::Kind::histogram_match;
  throw ConfigError("unknown translator kind: " + s);
}

inline Translator fit_translator(const std::vector<const Image*>& target_images,
                                 Translator::Kind kind) {
  Translator tr;
  tr.kind = kind;
  if (kind == Translator::Kind::identity) return tr;
  if (target_images.empty())
    throw ConfigError("fit_translator: histogram_match needs at least one target image");
  tr.reference_hist.assign(kHistBins, 0);
  for (const Image* im : target_images)
    for (double v : im->pix) ++tr.reference_hist[intensity_bin(v)];
  return tr;
}

inline Translator fit_translator(const std::vector<Image>& target_images,
                                 Translator::Kind kind) {
  std::vector<const Image*> ptrs;
  ptrs.reserve(target_images.size());
  for (const Image& im : target_images) ptrs.push_back(&im);
  return fit_translator(ptrs, kind);
}

inline Image translate(const Translator& tr, const Image& image) {
  if (tr.kind == Translator::Kind::identity) return image;
  if (!tr.fitted()) throw StateError("translate: histogram_match translator is unfitted");

  // empirical CDF of this image
  std::array<std::uint64_t, kHistBins> src_hist{};
  for (double v : image.pix) ++src_hist[intensity_bin(v)];
  std::array<double, kHistBins> src_cdf{};
  const double n_src = static_cast<double>(image.pix.size());
  std::uint64_t acc = 0;
  for (int b = 0; b < kHistBins; ++b) {
    acc += src_hist[b];
    src_cdf[b] = static_cast<double>(acc) / n_src;
  }

  // reference CDF from the pooled target histogram
  std::array<double, kHistBins> ref_cdf{};
  std::uint64_t total = 0;
  for (auto c : tr.reference_hist) total += c;
  acc = 0;
  for (int b = 0; b < kHistBins; ++b) {
    acc += tr.reference_hist[b];
    ref_cdf[b] = static_cast<double>(acc) / static_cast<double>(total);
  }

  // map each source bin to the lowest reference bin whose CDF reaches it
  std::array<double, kHistBins> mapping{};
  int r = 0;
  for (int b = 0; b < kHistBins; ++b) {
    while (r < kHistBins - 1 && ref_cdf[r] < src_cdf[b] - 1e-15) ++r;
    mapping[b] = static_cast<double>(r) / (kHistBins - 1.0);
  }

  Image out = image;
  for (double& v : out.pix) v = mapping[intensity_bin(v)];
  return out;
}

inline nlohmann::ordered_json translator_to_json(const Translator& tr) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(tr.kind);
  if (tr.kind == Translator::Kind::histogram_match) j["reference_hist"] = tr.reference_hist;
  return j;
}

inline Translator translator_from_json(const nlohmann::json& j) {
  Translator tr;
  tr.kind = translator_kind_from_string(j.at("kind").get<std::string>());
  if (tr.kind == Translator::Kind::histogram_match) {
    tr.reference_hist = j.at("reference_hist").get<std::vector<std::uint64_t>>();
    if (tr.reference_hist.size() != kHistBins)
      throw FormatError("translator JSON: reference_hist must have 256 bins");
  }
  return tr;
}

}  // namespace dualteacher
