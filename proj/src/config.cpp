#include "clinfuse/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "clinfuse/error.hpp"

namespace clinfuse {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError("config key '" + key + "': invalid value '" + value + "' (expected " + expected + ")");
}

template <typename T>
T parse_integer(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || value.empty()) bad_value(key, value, "an integer");
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  double out = 0.0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || value.empty() || !std::isfinite(out)) bad_value(key, value, "a real number");
  return out;
}

int parse_int(const std::string& key, const std::string& value) { return parse_integer<int>(key, value); }

std::vector<StageSpec> parse_stages(const std::string& key, const std::string& value) {
  std::vector<StageSpec> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    StageSpec st;
    const auto c1 = item.find(':');
    const auto c2 = c1 == std::string::npos ? std::string::npos : item.find(':', c1 + 1);
    if (c2 == std::string::npos) bad_value(key, value, "channels:blocks:attention entries");
    st.channels = parse_int(key, item.substr(0, c1));
    st.blocks = parse_int(key, item.substr(c1 + 1, c2 - c1 - 1));
    const auto att = item.substr(c2 + 1);
    if (att != "0" && att != "1") bad_value(key, value, "attention flag 0 or 1");
    st.clinical_attention = att == "1";
    out.push_back(st);
  }
  if (out.empty()) bad_value(key, value, "at least one stage");
  return out;
}

std::string stages_text(const std::vector<StageSpec>& stages) {
  std::string s;
  for (const auto& st : stages) {
    if (!s.empty()) s += ',';
    s += std::to_string(st.channels) + ':' + std::to_string(st.blocks) + ':' + (st.clinical_attention ? "1" : "0");
  }
  return s;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto int_field = [](auto member_getter) {
      return [member_getter](RunConfig& c, const std::string& k, const std::string& v) {
        member_getter(c) = parse_int(k, v);
      };
    };
    auto real_field = [](auto member_getter) {
      return [member_getter](RunConfig& c, const std::string& k, const std::string& v) {
        member_getter(c) = parse_real(k, v);
      };
    };
    t["seed"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.seed = parse_integer<std::uint64_t>(k, v);
    };
    t["data"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      if (v.empty()) bad_value(k, v, "a directory");
      c.data = v;
    };
    t["folds"] = int_field([](RunConfig& c) -> int& { return c.folds; });
    t["jobs"] = int_field([](RunConfig& c) -> int& { return c.jobs; });
    t["aggregation"] = [](RunConfig& c, const std::string&, const std::string& v) { c.aggregation = parse_aggregation(v); };

    t["model.image_size"] = int_field([](RunConfig& c) -> int& { return c.model.image_size; });
    t["model.in_channels"] = int_field([](RunConfig& c) -> int& { return c.model.in_channels; });
    t["model.stem_channels"] = int_field([](RunConfig& c) -> int& { return c.model.stem_channels; });
    t["model.stages"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.model.stages = parse_stages(k, v);
    };
    t["model.clinical_hidden"] = int_field([](RunConfig& c) -> int& { return c.model.clinical_hidden; });
    t["model.clinical_embedding"] = int_field([](RunConfig& c) -> int& { return c.model.clinical_embedding; });
    t["model.num_classes"] = int_field([](RunConfig& c) -> int& { return c.model.num_classes; });
    t["model.variant"] = [](RunConfig& c, const std::string&, const std::string& v) { c.model.variant = parse_variant(v); };
    t["model.gate"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      if (v == "sigmoid") {
        c.model.gate = AttentionGate::Sigmoid;
      } else if (v == "raw") {
        c.model.gate = AttentionGate::Raw;
      } else {
        bad_value(k, v, "sigmoid or raw");
      }
    };
    t["model.bn_momentum"] = real_field([](RunConfig& c) -> double& { return c.model.norm.momentum; });
    t["model.bn_epsilon"] = real_field([](RunConfig& c) -> double& { return c.model.norm.epsilon; });

    t["train.learning_rate"] = real_field([](RunConfig& c) -> double& { return c.train.learning_rate; });
    t["train.epochs"] = int_field([](RunConfig& c) -> int& { return c.train.epochs; });
    t["train.batch_size"] = int_field([](RunConfig& c) -> int& { return c.train.batch_size; });
    t["train.optimizer"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      if (v == "adam") {
        c.train.optimizer = OptimizerKind::Adam;
      } else if (v == "sgd") {
        c.train.optimizer = OptimizerKind::Sgd;
      } else {
        bad_value(k, v, "adam or sgd");
      }
    };
    t["train.beta1"] = real_field([](RunConfig& c) -> double& { return c.train.beta1; });
    t["train.beta2"] = real_field([](RunConfig& c) -> double& { return c.train.beta2; });
    t["train.adam_epsilon"] = real_field([](RunConfig& c) -> double& { return c.train.adam_epsilon; });
    t["train.checkpoint_every"] = int_field([](RunConfig& c) -> int& { return c.train.checkpoint_every; });

    t["synth.patients"] = int_field([](RunConfig& c) -> int& { return c.synth.patients; });
    t["synth.slices_per_patient"] = int_field([](RunConfig& c) -> int& { return c.synth.slices_per_patient; });
    t["synth.clinical_dim"] = int_field([](RunConfig& c) -> int& { return c.synth.clinical_dim; });
    t["synth.image_size"] = int_field([](RunConfig& c) -> int& { return c.synth.image_size; });
    t["synth.image_signal"] = real_field([](RunConfig& c) -> double& { return c.synth.image_signal; });
    t["synth.clinical_signal"] = real_field([](RunConfig& c) -> double& { return c.synth.clinical_signal; });
    t["synth.correlated_signal"] = real_field([](RunConfig& c) -> double& { return c.synth.correlated_signal; });
    t["synth.noise"] = real_field([](RunConfig& c) -> double& { return c.synth.noise; });
    t["synth.healthy_coupling"] = real_field([](RunConfig& c) -> double& { return c.synth.healthy_coupling; });
    t["synth.clinical_only_attributes"] =
        int_field([](RunConfig& c) -> int& { return c.synth.clinical_only_attributes; });
    return t;
  }();
  return table;
}

}  // namespace

void RunConfig::validate() const {
  if (folds < 2) throw ConfigError("folds must be >= 2");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  model.validate();
  train.validate();
  if (!data) synth.validate();
}

KeyValues parse_key_values(std::istream& in, const std::string& source) {
  KeyValues out;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

KeyValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_key_values(in, path.string());
}

void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& t = setters();
  const auto it = t.find(key);
  if (it == t.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, key, value);
}

RunConfig config_from_key_values(const KeyValues& kv, RunConfig base) {
  for (const auto& [k, v] : kv) apply_config_key(base, k, v);
  return base;
}

std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

KeyValues model_config_entries(const ModelConfig& m) {
  return {
      {"model.image_size", std::to_string(m.image_size)},
      {"model.in_channels", std::to_string(m.in_channels)},
      {"model.stem_channels", std::to_string(m.stem_channels)},
      {"model.stages", stages_text(m.stages)},
      {"model.clinical_dim", std::to_string(m.clinical_dim)},
      {"model.clinical_hidden", std::to_string(m.clinical_hidden)},
      {"model.clinical_embedding", std::to_string(m.clinical_embedding)},
      {"model.num_classes", std::to_string(m.num_classes)},
      {"model.variant", std::string(variant_name(m.variant))},
      {"model.gate", m.gate == AttentionGate::Sigmoid ? "sigmoid" : "raw"},
      {"model.bn_momentum", format_double(m.norm.momentum)},
      {"model.bn_epsilon", format_double(m.norm.epsilon)},
  };
}

ModelConfig model_config_from_entries(const KeyValues& kv) {
  RunConfig cfg;
  for (const auto& [k, v] : kv) {
    if (k == "model.clinical_dim") {
      cfg.model.clinical_dim = parse_int(k, v);
    } else if (k.rfind("model.", 0) == 0) {
      apply_config_key(cfg, k, v);
    } else {
      throw ConfigError("unexpected model entry '" + k + "'");
    }
  }
  return cfg.model;
}

}  // namespace clinfuse
