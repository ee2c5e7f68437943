#include <fstream>
#include <map>
#include <sstream>

#include "clinfuse/config.hpp"
#include "clinfuse/error.hpp"
#include "clinfuse/mmt_io.hpp"
#include "clinfuse/training.hpp"

namespace clinfuse {

namespace fs = std::filesystem;

namespace {

constexpr const char* kHeader = "clinfuse-checkpoint 1";

struct Entry {
  std::string name;
  Shape shape;
  Eigen::VectorXd values;
};

std::vector<Entry> collect(const TrainingState& st) {
  std::vector<Entry> out;
  ModelParams copy = clone_params(st.params);
  const auto params = named_parameters(copy);
  for (const auto& p : params) out.push_back({"param/" + p.name, p.tensor.shape(), p.tensor.value()});
  if (!st.optimizer.m.empty()) {
    if (st.optimizer.m.size() != params.size() || st.optimizer.v.size() != params.size()) {
      throw std::logic_error("checkpoint_save: optimizer state does not match parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.push_back({"adam.m/" + params[i].name, params[i].tensor.shape(), st.optimizer.m[i]});
      out.push_back({"adam.v/" + params[i].name, params[i].tensor.shape(), st.optimizer.v[i]});
    }
  }
  for (const auto& b : named_buffers(copy)) {
    out.push_back({"buffer/" + b.name + ".running_mean", {b.stats->mean.size()}, b.stats->mean});
    out.push_back({"buffer/" + b.name + ".running_var", {b.stats->var.size()}, b.stats->var});
  }
  if (st.stats) {
    out.push_back({"stats/clinical_mean", {st.stats->mean.size()}, st.stats->mean});
    out.push_back({"stats/clinical_stddev", {st.stats->stddev.size()}, st.stats->stddev});
    Eigen::VectorXd range(2);
    range << st.stats->image_min, st.stats->image_max;
    out.push_back({"stats/image_range", {2}, range});
  }
  return out;
}

std::string shape_token(const Shape& s) {
  std::string out;
  for (const Index d : s) {
    if (!out.empty()) out += 'x';
    out += std::to_string(d);
  }
  return out;
}

[[noreturn]] void damaged(const fs::path& dir, const std::string& what) {
  throw FormatError("checkpoint " + dir.string() + ": " + what);
}

}  // namespace

void checkpoint_save(const TrainingState& st, const fs::path& dir) {
  const auto entries = collect(st);
  fs::path tmp = dir;
  tmp += ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  std::ostringstream manifest;
  manifest << kHeader << '\n';
  for (const auto& [k, v] : model_config_entries(st.model)) manifest << "config " << k << '=' << v << '\n';
  manifest << "epochs_done " << st.epochs_done << '\n';
  manifest << "step " << st.optimizer.step << '\n';
  manifest << "rng " << st.shuffle_rng.state() << '\n';
  for (const auto& r : st.log) {
    manifest << "log " << r.epoch << ' ' << format_double(r.mean_loss) << ' ' << format_double(r.train_accuracy) << ' '
             << format_double(r.wall_seconds) << ' ' << r.step << '\n';
  }
  {
    std::ofstream bin(tmp / "tensors.bin", std::ios::binary);
    std::size_t offset = 0;
    for (const auto& e : entries) {
      write_mmt(bin, e.shape, e.values);
      const std::size_t bytes = mmt_encoded_size(e.shape);
      manifest << "tensor " << e.name << ' ' << shape_token(e.shape) << ' ' << offset << ' ' << bytes << '\n';
      offset += bytes;
    }
    bin.flush();
    if (!bin) throw std::runtime_error("checkpoint_save: write failed for " + (tmp / "tensors.bin").string());
  }
  manifest << "end\n";
  {
    std::ofstream out(tmp / "manifest.txt");
    out << manifest.str();
    out.flush();
    if (!out) throw std::runtime_error("checkpoint_save: write failed for " + (tmp / "manifest.txt").string());
  }
  fs::path old = dir;
  old += ".old";
  fs::remove_all(old);
  if (fs::exists(dir)) fs::rename(dir, old);
  fs::rename(tmp, dir);
  fs::remove_all(old);
}

TrainingState checkpoint_load(const fs::path& dir, const std::optional<ModelConfig>& expected) {
  std::ifstream mf(dir / "manifest.txt");
  if (!mf) damaged(dir, "missing manifest.txt");
  std::string line;
  if (!std::getline(mf, line) || line != kHeader) damaged(dir, "unrecognized manifest header");

  KeyValues config;
  TrainingState st;
  struct Slot {
    Shape shape;
    std::size_t offset = 0;
    std::size_t bytes = 0;
  };
  std::map<std::string, Slot> slots;
  bool have_epochs = false, have_step = false, have_rng = false, ended = false;
  while (std::getline(mf, line)) {
    std::istringstream in(line);
    std::string tag;
    in >> tag;
    if (tag == "config") {
      std::string rest;
      std::getline(in >> std::ws, rest);
      const auto eq = rest.find('=');
      if (eq == std::string::npos) damaged(dir, "bad config line '" + line + "'");
      config.emplace_back(rest.substr(0, eq), rest.substr(eq + 1));
    } else if (tag == "epochs_done") {
      have_epochs = static_cast<bool>(in >> st.epochs_done);
    } else if (tag == "step") {
      have_step = static_cast<bool>(in >> st.optimizer.step);
    } else if (tag == "rng") {
      std::string rest;
      std::getline(in >> std::ws, rest);
      st.shuffle_rng.set_state(rest);
      have_rng = !rest.empty();
    } else if (tag == "log") {
      EpochRecord r;
      std::string loss, acc, wall;
      if (!(in >> r.epoch >> loss >> acc >> wall >> r.step)) damaged(dir, "bad log line '" + line + "'");
      r.mean_loss = std::stod(loss);
      r.train_accuracy = std::stod(acc);
      r.wall_seconds = std::stod(wall);
      st.log.push_back(r);
    } else if (tag == "tensor") {
      std::string name, shape;
      Slot s;
      if (!(in >> name >> shape >> s.offset >> s.bytes)) damaged(dir, "bad tensor line '" + line + "'");
      std::stringstream ss(shape);
      std::string d;
      while (std::getline(ss, d, 'x')) s.shape.push_back(std::stol(d));
      slots[name] = s;
    } else if (tag == "end") {
      ended = true;
      break;
    } else {
      damaged(dir, "unknown manifest line '" + line + "'");
    }
  }
  if (!ended || !have_epochs || !have_step || !have_rng) damaged(dir, "manifest is truncated");

  ModelConfig model;
  try {
    model = model_config_from_entries(config);
    model.validate();
  } catch (const ConfigError& e) {
    damaged(dir, std::string("stored model config is invalid: ") + e.what());
  }
  if (expected) {
    if (expected->variant != model.variant) {
      throw ConfigError("checkpoint " + dir.string() + " holds a '" + std::string(variant_name(model.variant)) +
                        "' model, expected '" + std::string(variant_name(expected->variant)) + "'");
    }
    const auto a = model_config_entries(model), b = model_config_entries(*expected);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] != b[i]) {
        throw ConfigError("checkpoint " + dir.string() + ": " + a[i].first + " is " + a[i].second + ", expected " +
                          b[i].second);
      }
    }
  }
  st.model = model;

  std::ifstream bin(dir / "tensors.bin", std::ios::binary);
  if (!bin) damaged(dir, "missing tensors.bin");
  bin.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::size_t>(bin.tellg());
  auto fetch = [&](const std::string& name, const Shape& want) -> Eigen::VectorXd {
    const auto it = slots.find(name);
    if (it == slots.end()) damaged(dir, "tensor '" + name + "' is missing");
    const Slot& s = it->second;
    if (s.shape != want) {
      damaged(dir, "tensor '" + name + "' has shape " + shape_string(s.shape) + ", model expects " + shape_string(want));
    }
    if (s.offset + s.bytes > file_size) damaged(dir, "tensors.bin is truncated at '" + name + "'");
    bin.clear();
    bin.seekg(static_cast<std::streamoff>(s.offset));
    MmtBlob blob;
    try {
      blob = read_mmt(bin);
    } catch (const FormatError& e) {
      damaged(dir, "tensor '" + name + "': " + e.what());
    }
    if (blob.shape != want) damaged(dir, "tensor '" + name + "' blob shape disagrees with the manifest");
    return blob.values;
  };

  Rng dummy(0);
  st.params = init_model(model, dummy);
  auto params = named_parameters(st.params);
  const bool has_moments = slots.count("adam.m/" + params.front().name) > 0;
  for (auto& p : params) {
    p.tensor.mutable_value() = fetch("param/" + p.name, p.tensor.shape());
    if (has_moments) {
      st.optimizer.m.push_back(fetch("adam.m/" + p.name, p.tensor.shape()));
      st.optimizer.v.push_back(fetch("adam.v/" + p.name, p.tensor.shape()));
    }
  }
  for (auto& b : named_buffers(st.params)) {
    const Shape width{b.stats->mean.size()};
    b.stats->mean = fetch("buffer/" + b.name + ".running_mean", width);
    b.stats->var = fetch("buffer/" + b.name + ".running_var", width);
  }
  if (slots.count("stats/clinical_mean")) {
    NormalizationStats ns;
    ns.mean = fetch("stats/clinical_mean", slots["stats/clinical_mean"].shape);
    ns.stddev = fetch("stats/clinical_stddev", slots["stats/clinical_mean"].shape);
    const auto range = fetch("stats/image_range", {2});
    ns.image_min = range(0);
    ns.image_max = range(1);
    st.stats = ns;
  }
  return st;
}

}  // namespace clinfuse
