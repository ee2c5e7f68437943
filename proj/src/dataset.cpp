#include "clinfuse/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "clinfuse/error.hpp"
#include "clinfuse/mmt_io.hpp"
#include "clinfuse/rng.hpp"

namespace clinfuse {

void Dataset::validate() const {
  std::unordered_set<std::string> seen;
  for (const auto& p : patients) {
    if (!seen.insert(p.patient_id).second) throw std::invalid_argument("duplicate patient_id " + p.patient_id);
    if (p.label != 0 && p.label != 1) throw std::invalid_argument("patient " + p.patient_id + ": label must be 0 or 1");
    if (p.clinical.size() != clinical_dim) {
      throw std::invalid_argument("patient " + p.patient_id + ": clinical width " + std::to_string(p.clinical.size()) +
                                  " != " + std::to_string(clinical_dim));
    }
    if (p.images.empty()) throw std::invalid_argument("patient " + p.patient_id + " has no images");
  }
}

std::size_t Dataset::slice_count() const {
  std::size_t n = 0;
  for (const auto& p : patients) n += p.images.size();
  return n;
}

std::optional<std::size_t> Dataset::find(const std::string& patient_id) const {
  for (std::size_t i = 0; i < patients.size(); ++i) {
    if (patients[i].patient_id == patient_id) return i;
  }
  return std::nullopt;
}

int FoldAssignment::fold_of(const std::string& patient_id) const {
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (std::find(folds[f].begin(), folds[f].end(), patient_id) != folds[f].end()) return static_cast<int>(f);
  }
  throw std::invalid_argument("patient " + patient_id + " is in no fold");
}

std::vector<std::string> FoldAssignment::training_ids(int held_out) const {
  std::vector<std::string> ids;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (static_cast<int>(f) != held_out) ids.insert(ids.end(), folds[f].begin(), folds[f].end());
  }
  return ids;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& clinical_csv, const std::filesystem::path& image_dir) {
  std::ifstream in(clinical_csv);
  if (!in) throw FormatError("cannot open clinical CSV " + clinical_csv.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(clinical_csv.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  if (header.size() < 3 || trim(header[0]) != "patient_id" || trim(header[1]) != "label") {
    throw FormatError(clinical_csv.string() + ": header must start with patient_id,label and name at least one attribute");
  }
  Dataset ds;
  ds.clinical_dim = static_cast<int>(header.size() - 2);
  std::unordered_map<std::string, std::size_t> index;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = clinical_csv.string() + ": row " + std::to_string(row);
    if (cells.size() != header.size()) {
      throw FormatError(where + ": expected " + std::to_string(header.size()) + " columns, got " +
                        std::to_string(cells.size()));
    }
    PatientRecord rec;
    rec.patient_id = trim(cells[0]);
    if (rec.patient_id.empty()) throw FormatError(where + ": empty patient_id");
    if (index.count(rec.patient_id)) throw FormatError(where + ": duplicate patient_id " + rec.patient_id);
    const std::string label = trim(cells[1]);
    if (label != "0" && label != "1") throw FormatError(where + ", column 2 (label): expected 0 or 1, got '" + label + "'");
    rec.label = label == "1" ? 1 : 0;
    rec.clinical.resize(ds.clinical_dim);
    for (int j = 0; j < ds.clinical_dim; ++j) {
      const std::string cell = trim(cells[static_cast<std::size_t>(j) + 2]);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        throw FormatError(where + ", column " + std::to_string(j + 3) + " (" + trim(header[static_cast<std::size_t>(j) + 2]) +
                          "): non-numeric value '" + cell + "'");
      }
      rec.clinical(j) = v;
    }
    index.emplace(rec.patient_id, ds.patients.size());
    ds.patients.push_back(std::move(rec));
  }

  if (!std::filesystem::is_directory(image_dir)) throw FormatError("image directory " + image_dir.string() + " not found");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(image_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".mmt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::map<std::string, std::map<int, Tensor>> slices;
  for (const auto& f : files) {
    const std::string stem = f.stem().string();
    const auto us = stem.rfind('_');
    int slice = -1;
    if (us != std::string::npos) {
      const auto [ptr, ec] = std::from_chars(stem.data() + us + 1, stem.data() + stem.size(), slice);
      if (ec != std::errc() || ptr != stem.data() + stem.size()) slice = -1;
    }
    if (slice < 0) throw FormatError(f.string() + ": image files must be named <patient_id>_<slice>.mmt");
    const std::string id = stem.substr(0, us);
    if (!index.count(id)) throw FormatError(f.string() + ": image for patient " + id + " has no clinical row");
    const MmtBlob blob = read_mmt_file(f);
    if (blob.shape.size() != 3) throw FormatError(f.string() + ": image must have shape [C,H,W]");
    slices[id][slice] = blob.to_tensor();
  }
  for (auto& rec : ds.patients) {
    auto it = slices.find(rec.patient_id);
    if (it == slices.end()) throw FormatError("patient " + rec.patient_id + " has no image files in " + image_dir.string());
    for (auto& [s, img] : it->second) rec.images.push_back(img);
  }
  if (!ds.patients.empty()) ds.image_size = static_cast<int>(ds.patients.front().images.front().dim(1));
  ds.validate();
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  dataset.validate();
  std::filesystem::create_directories(dir / "images");
  std::ofstream csv(dir / "clinical.csv", std::ios::trunc);
  if (!csv) throw FormatError("cannot write " + (dir / "clinical.csv").string());
  csv << "patient_id,label";
  for (int j = 0; j < dataset.clinical_dim; ++j) csv << ",attr" << j;
  csv << '\n';
  for (const auto& p : dataset.patients) {
    csv << p.patient_id << ',' << p.label;
    for (Index j = 0; j < p.clinical.size(); ++j) csv << ',' << format_double(p.clinical(j));
    csv << '\n';
    for (std::size_t s = 0; s < p.images.size(); ++s) {
      write_mmt_file(dir / "images" / (p.patient_id + "_" + std::to_string(s) + ".mmt"), p.images[s]);
    }
  }
  if (!csv) throw FormatError("failed writing clinical.csv");
}

NormalizationStats compute_stats(const Dataset& dataset, std::span<const std::size_t> patient_indices) {
  if (patient_indices.empty()) throw std::invalid_argument("compute_stats: no patients");
  NormalizationStats st;
  const auto n = static_cast<double>(patient_indices.size());
  st.mean = Eigen::VectorXd::Zero(dataset.clinical_dim);
  for (const auto i : patient_indices) st.mean += dataset.patients.at(i).clinical;
  st.mean /= n;
  Eigen::VectorXd var = Eigen::VectorXd::Zero(dataset.clinical_dim);
  for (const auto i : patient_indices) var += (dataset.patients[i].clinical - st.mean).array().square().matrix();
  st.stddev = (var / n).cwiseSqrt();
  st.image_min = std::numeric_limits<double>::infinity();
  st.image_max = -std::numeric_limits<double>::infinity();
  for (const auto i : patient_indices) {
    for (const auto& img : dataset.patients[i].images) {
      st.image_min = std::min(st.image_min, img.value().minCoeff());
      st.image_max = std::max(st.image_max, img.value().maxCoeff());
    }
  }
  return st;
}

NormalizationStats compute_stats(const Dataset& dataset) {
  std::vector<std::size_t> all(dataset.patients.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return compute_stats(dataset, all);
}

Tensor resize_bilinear(const Tensor& image, int out_h, int out_w) {
  if (image.rank() != 3) throw ShapeError("resize_bilinear: expected [C,H,W], got " + shape_string(image.shape()));
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: output size must be positive");
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == out_h && w == out_w) return image.detach();
  Eigen::VectorXd out(c * out_h * out_w);
  const auto coord = [](Index i, Index n_out, Index n_in) {
    return n_out == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
  };
  const auto& v = image.value();
  for (Index ch = 0; ch < c; ++ch) {
    for (Index y = 0; y < out_h; ++y) {
      const double sy = coord(y, out_h, h);
      const Index y0 = std::min(static_cast<Index>(sy), h - 1), y1 = std::min(y0 + 1, h - 1);
      const double fy = sy - static_cast<double>(y0);
      for (Index x = 0; x < out_w; ++x) {
        const double sx = coord(x, out_w, w);
        const Index x0 = std::min(static_cast<Index>(sx), w - 1), x1 = std::min(x0 + 1, w - 1);
        const double fx = sx - static_cast<double>(x0);
        const auto at = [&](Index yy, Index xx) { return v((ch * h + yy) * w + xx); };
        const double top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
        const double bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
        out((ch * out_h + y) * out_w + x) = (1.0 - fy) * top + fy * bottom;
      }
    }
  }
  return Tensor({c, out_h, out_w}, std::move(out));
}

Dataset preprocess(const Dataset& dataset, const NormalizationStats& stats, int image_size) {
  if (stats.mean.size() != dataset.clinical_dim || stats.stddev.size() != dataset.clinical_dim) {
    throw std::invalid_argument("preprocess: stats width does not match dataset");
  }
  Dataset out = dataset;
  out.image_size = image_size;
  out.stats = stats;
  const double range = stats.image_max - stats.image_min;
  for (auto& p : out.patients) {
    for (Index j = 0; j < p.clinical.size(); ++j) {
      const double sd = stats.stddev(j);
      p.clinical(j) = sd > 0.0 ? (p.clinical(j) - stats.mean(j)) / sd : 0.0;
    }
    for (auto& img : p.images) {
      Tensor resized = resize_bilinear(img, image_size, image_size);
      Eigen::VectorXd v = resized.value();
      if (range > 0.0) {
        v = ((v.array() - stats.image_min) / range).cwiseMax(0.0).cwiseMin(1.0).matrix();
      } else {
        v.setZero();
      }
      img = Tensor(resized.shape(), std::move(v));
    }
  }
  return out;
}

FoldAssignment kfold_split(const Dataset& dataset, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("kfold_split: k must be at least 2");
  std::vector<std::vector<std::string>> by_class(2);
  for (const auto& p : dataset.patients) by_class.at(static_cast<std::size_t>(p.label)).push_back(p.patient_id);
  for (int c = 0; c < 2; ++c) {
    if (static_cast<int>(by_class[static_cast<std::size_t>(c)].size()) < k) {
      throw std::invalid_argument("kfold_split: class " + std::to_string(c) + " has " +
                                  std::to_string(by_class[static_cast<std::size_t>(c)].size()) +
                                  " patients, need at least " + std::to_string(k));
    }
  }
  Rng rng(seed);
  FoldAssignment fa;
  fa.folds.resize(static_cast<std::size_t>(k));
  // Deal each shuffled class round-robin, continuing where the previous
  // class stopped so fold sizes stay within one of each other.
  std::size_t next = 0;
  for (auto& ids : by_class) {
    rng.shuffle(ids);
    for (const auto& id : ids) {
      fa.folds[next].push_back(id);
      next = (next + 1) % static_cast<std::size_t>(k);
    }
  }
  return fa;
}

Dataset subset(const Dataset& dataset, std::span<const std::string> patient_ids) {
  const std::unordered_set<std::string> wanted(patient_ids.begin(), patient_ids.end());
  Dataset out;
  out.clinical_dim = dataset.clinical_dim;
  out.image_size = dataset.image_size;
  out.class_names = dataset.class_names;
  out.stats = dataset.stats;
  for (const auto& p : dataset.patients) {
    if (wanted.count(p.patient_id)) out.patients.push_back(p);
  }
  if (out.patients.size() != wanted.size()) throw std::invalid_argument("subset: unknown patient id requested");
  return out;
}

}  // namespace clinfuse
