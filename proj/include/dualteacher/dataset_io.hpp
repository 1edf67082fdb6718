#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualteacher/errors.hpp"
#include "dualteacher/phantom.hpp"
#include "dualteacher/png_io.hpp"

namespace dualteacher {

using ordered_json = nlohmann::ordered_json;

inline ordered_json spec_to_json(const PhantomSpec& spec) {
  ordered_json j;
  j["image_size"] = spec.image_size;
  j["num_classes"] = spec.num_classes;
  j["intensity_table_target"] = spec.intensity_table_target;
  j["intensity_table_source"] = spec.intensity_table_source;
  j["noise_sigma"] = spec.noise_sigma;
  j["seed"] = spec.seed;
  return j;
}

inline PhantomSpec spec_from_json(const ordered_json& j) {
  PhantomSpec spec;
  spec.image_size = j.at("image_size").get<int>();
  spec.num_classes = j.at("num_classes").get<int>();
  spec.intensity_table_target = j.at("intensity_table_target").get<std::vector<double>>();
  spec.intensity_table_source = j.at("intensity_table_source").get<std::vector<double>>();
  spec.noise_sigma = j.at("noise_sigma").get<double>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  return spec;
}

namespace detail {

inline std::vector<std::uint8_t> image_to_bytes(const Image& img) {
  std::vector<std::uint8_t> bytes(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    // round half-up onto the 8-bit grid
    long v = std::lround(img.pix[i] * 255.0);
    bytes[i] = static_cast<std::uint8_t>(std::clamp(v, 0l, 255l));
  }
  return bytes;
}

inline Image image_from_bytes(int w, int h, const std::vector<std::uint8_t>& bytes) {
  Image img(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pix[i] = bytes[i] / 255.0;
  return img;
}

inline void write_sample_files(const std::filesystem::path& dir, const DomainSample& s) {
  write_png_gray8((dir / "images" / (s.id + ".png")).string(), s.image.w, s.image.h,
                  image_to_bytes(s.image));
  if (s.label.has_value())
    write_png_gray8((dir / "labels" / (s.id + ".png")).string(), s.label->w, s.label->h,
                    s.label->lab);
}

inline ordered_json sample_entry(const DomainSample& s, const char* role) {
  ordered_json e;
  e["id"] = s.id;
  e["role"] = role;
  e["domain"] = to_string(s.domain);
  e["image"] = "images/" + s.id + ".png";
  if (s.label.has_value()) e["label"] = "labels/" + s.id + ".png";
  return e;
}

}  // namespace detail

// Dataset directory layout: manifest.json, images/<id>.png, labels/<id>.png.
// Images are 8-bit grayscale (intensity * 255, rounded half-up); labels are
// 8-bit class indices. Returns the manifest path.
inline std::string save_dataset(const DatasetBundle& bundle, const std::string& dir) {
  validate_bundle(bundle);
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "labels", ec);
  if (ec) throw IoError("cannot create dataset directory " + dir + ": " + ec.message());

  ordered_json manifest;
  manifest["format"] = 1;
  manifest["fold_index"] = bundle.fold_index;
  manifest["spec"] = spec_to_json(bundle.spec);
  ordered_json samples = ordered_json::array();
  for (const auto& s : bundle.d_s) {
    detail::write_sample_files(root, s);
    samples.push_back(detail::sample_entry(s, "d_s"));
  }
  for (const auto& s : bundle.d_t) {
    detail::write_sample_files(root, s);
    samples.push_back(detail::sample_entry(s, "d_t"));
  }
  for (const auto& s : bundle.d_u) {
    detail::write_sample_files(root, s);
    samples.push_back(detail::sample_entry(s, "d_u"));
  }
  for (const auto& s : bundle.val) {
    detail::write_sample_files(root, s);
    samples.push_back(detail::sample_entry(s, "val"));
  }
  manifest["samples"] = std::move(samples);

  const fs::path manifest_path = root / "manifest.json";
  std::ofstream out(manifest_path);
  if (!out) throw IoError("cannot write " + manifest_path.string());
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("write failed for " + manifest_path.string());
  return manifest_path.string();
}

// Exact inverse of save_dataset up to the 1/255 intensity quantization.
inline DatasetBundle load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  const fs::path manifest_path = root / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open " + manifest_path.string());
  ordered_json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid manifest JSON in " + manifest_path.string() + ": " + e.what());
  }

  if (!manifest.contains("format") || manifest["format"].get<int>() != 1)
    throw FormatError("unsupported manifest format in " + manifest_path.string());

  DatasetBundle bundle;
  bundle.fold_index = manifest.at("fold_index").get<int>();
  bundle.spec = spec_from_json(manifest.at("spec"));

  for (const auto& e : manifest.at("samples")) {
    const std::string id = e.at("id").get<std::string>();
    const std::string role = e.at("role").get<std::string>();
    DomainSample s;
    s.id = id;
    s.domain = domain_from_string(e.at("domain").get<std::string>());

    const fs::path image_path = root / e.at("image").get<std::string>();
    if (!fs::exists(image_path))
      throw IoError("missing image file for sample " + id + ": " + image_path.string());
    int w = 0, h = 0;
    std::vector<std::uint8_t> bytes;
    read_png_gray8(image_path.string(), w, h, bytes);
    s.image = detail::image_from_bytes(w, h, bytes);

    if (e.contains("label")) {
      if (role == "d_u")
        throw FormatError("manifest entry " + id + " has role d_u but carries a label path");
      const fs::path label_path = root / e.at("label").get<std::string>();
      if (!fs::exists(label_path))
        throw IoError("missing label file for sample " + id + ": " + label_path.string());
      int lw = 0, lh = 0;
      std::vector<std::uint8_t> lab;
      read_png_gray8(label_path.string(), lw, lh, lab);
      LabelMap label(lh, lw);
      label.lab = std::move(lab);
      for (std::uint8_t c : label.lab)
        if (c >= bundle.spec.num_classes)
          throw FormatError("label of sample " + id + " contains class index out of range");
      s.label = std::move(label);
    }

    if (role == "d_s")
      bundle.d_s.push_back(std::move(s));
    else if (role == "d_t")
      bundle.d_t.push_back(std::move(s));
    else if (role == "d_u")
      bundle.d_u.push_back(std::move(s));
    else if (role == "val")
      bundle.val.push_back(std::move(s));
    else
      throw FormatError("manifest entry " + id + " has unknown role '" + role + "'");
  }
  validate_bundle(bundle);
  return bundle;
}

}  // namespace dualteacher
