#include "tss/config.hpp"

#include <functional>
#include <fstream>
#include <limits>
#include <sstream>

#include "toml.hpp"

namespace tss {

using nlohmann::json;

namespace {

using Setter = std::function<void(RunConfig&, const toml::node&, const std::string&)>;
using Getter = std::function<json(const RunConfig&)>;

struct Field {
  std::string key;  // "section.name"
  Setter set;
  Getter get;
};

[[noreturn]] void TypeError(const std::string& key, const char* expected) {
  throw ConfigError(key + ": expected " + expected);
}

std::int64_t AsInteger(const toml::node& n, const std::string& key) {
  if (!n.is_integer()) TypeError(key, "an integer");
  return n.as_integer()->get();
}

std::size_t AsCount(const toml::node& n, const std::string& key) {
  const std::int64_t v = AsInteger(n, key);
  if (v < 0) throw ConfigError(key + ": must be non-negative");
  return static_cast<std::size_t>(v);
}

double AsReal(const toml::node& n, const std::string& key) {
  if (n.is_integer()) return static_cast<double>(n.as_integer()->get());
  if (!n.is_floating_point()) TypeError(key, "a number");
  return n.as_floating_point()->get();
}

bool AsBool(const toml::node& n, const std::string& key) {
  if (!n.is_boolean()) TypeError(key, "true or false");
  return n.as_boolean()->get();
}

std::string AsString(const toml::node& n, const std::string& key) {
  if (!n.is_string()) TypeError(key, "a string");
  return n.as_string()->get();
}

template <typename T>
Field Count(std::string key, T RunConfig::*section, std::size_t T::*member) {
  return {key,
          [=](RunConfig& c, const toml::node& n, const std::string& k) { (c.*section).*member = AsCount(n, k); },
          [=](const RunConfig& c) { return json((c.*section).*member); }};
}

template <typename T>
Field Seed(std::string key, T RunConfig::*section, std::uint64_t T::*member) {
  return {key,
          [=](RunConfig& c, const toml::node& n, const std::string& k) {
            (c.*section).*member = static_cast<std::uint64_t>(AsCount(n, k));
          },
          [=](const RunConfig& c) { return json((c.*section).*member); }};
}

template <typename T>
Field Real(std::string key, T RunConfig::*section, double T::*member) {
  return {key,
          [=](RunConfig& c, const toml::node& n, const std::string& k) { (c.*section).*member = AsReal(n, k); },
          [=](const RunConfig& c) { return json((c.*section).*member); }};
}

// Wraps enum parsers so their errors carry the config key.
template <typename F>
auto Named(const std::string& key, F parse, const std::string& text) {
  try {
    return parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

const std::vector<Field>& Fields() {
  static const std::vector<Field> fields = [] {
    using R = RunConfig;
    std::vector<Field> f;
    // [model]
    for (auto [name, member] : std::initializer_list<std::pair<const char*, std::size_t ModelConfig::*>>{
             {"feat_dim", &ModelConfig::feat_dim},
             {"downsample", &ModelConfig::downsample},
             {"conv_kernel", &ModelConfig::conv_kernel},
             {"conv_channels", &ModelConfig::conv_channels},
             {"enc_hidden", &ModelConfig::enc_hidden},
             {"enc_layers", &ModelConfig::enc_layers},
             {"pred_embed", &ModelConfig::pred_embed},
             {"pred_hidden", &ModelConfig::pred_hidden},
             {"pred_dim", &ModelConfig::pred_dim},
             {"joint_hidden", &ModelConfig::joint_hidden},
             {"elm_embed", &ModelConfig::elm_embed},
             {"elm_hidden", &ModelConfig::elm_hidden}}) {
      f.push_back(Count(std::string("model.") + name, &R::model, member));
    }
    // [train]
    f.push_back(Real("train.alpha", &R::train, &TrainConfig::alpha));
    f.push_back(Real("train.beta", &R::train, &TrainConfig::beta));
    f.push_back(Count("train.warmup_steps", &R::train, &TrainConfig::warmup_steps));
    f.push_back(Real("train.peak_lr", &R::train, &TrainConfig::peak_lr));
    f.push_back(Count("train.epochs", &R::train, &TrainConfig::epochs));
    f.push_back(Count("train.batch_size", &R::train, &TrainConfig::batch_size));
    f.push_back(Seed("train.seed", &R::train, &TrainConfig::seed));
    f.push_back({"train.feature_mask",
                 [](R& c, const toml::node& n, const std::string& k) { c.train.feature_mask = AsBool(n, k); },
                 [](const R& c) { return json(c.train.feature_mask); }});
    f.push_back({"train.grad_clip",
                 [](R& c, const toml::node& n, const std::string& k) { c.train.optimizer.grad_clip = AsReal(n, k); },
                 [](const R& c) { return json(c.train.optimizer.grad_clip); }});
    f.push_back({"train.adam_beta1",
                 [](R& c, const toml::node& n, const std::string& k) { c.train.optimizer.beta1 = AsReal(n, k); },
                 [](const R& c) { return json(c.train.optimizer.beta1); }});
    f.push_back({"train.adam_beta2",
                 [](R& c, const toml::node& n, const std::string& k) { c.train.optimizer.beta2 = AsReal(n, k); },
                 [](const R& c) { return json(c.train.optimizer.beta2); }});
    f.push_back({"train.adam_eps",
                 [](R& c, const toml::node& n, const std::string& k) { c.train.optimizer.eps = AsReal(n, k); },
                 [](const R& c) { return json(c.train.optimizer.eps); }});
    // [ss]
    f.push_back({"ss.level",
                 [](R& c, const toml::node& n, const std::string& k) {
                   c.train.policy.level = Named(k, parse_level, AsString(n, k));
                 },
                 [](const R& c) { return json(level_name(c.train.policy.level)); }});
    f.push_back({"ss.source",
                 [](R& c, const toml::node& n, const std::string& k) {
                   c.train.policy.source = Named(k, parse_source, AsString(n, k));
                 },
                 [](const R& c) { return json(source_name(c.train.policy.source)); }});
    f.push_back({"ss.lambda",
                 [](R& c, const toml::node& n, const std::string& k) { c.train.policy.lambda = AsReal(n, k); },
                 [](const R& c) { return json(c.train.policy.lambda); }});
    f.push_back({"ss.seed",
                 [](R& c, const toml::node& n, const std::string& k) {
                   c.train.policy.rng_seed = static_cast<std::uint64_t>(AsCount(n, k));
                 },
                 [](const R& c) { return json(c.train.policy.rng_seed); }});
    f.push_back({"ss.acc_scope",
                 [](R& c, const toml::node& n, const std::string& k) {
                   c.train.policy.acc_scope = Named(k, parse_scope, AsString(n, k));
                 },
                 [](const R& c) { return json(scope_name(c.train.policy.acc_scope)); }});
    f.push_back({"ss.rnnt_path",
                 [](R& c, const toml::node& n, const std::string& k) {
                   c.train.policy.rnnt_path = Named(k, parse_path, AsString(n, k));
                 },
                 [](const R& c) { return json(path_name(c.train.policy.rnnt_path)); }});
    f.push_back({"ss.start_epoch",
                 [](R& c, const toml::node& n, const std::string& k) {
                   const std::size_t v = AsCount(n, k);
                   if (v > static_cast<std::size_t>(std::numeric_limits<int>::max())) {
                     throw ConfigError(k + ": too large");
                   }
                   c.train.policy.start_epoch = static_cast<int>(v);
                 },
                 [](const R& c) { return json(c.train.policy.start_epoch); }});
    // [decode]
    f.push_back(Count("decode.beam", &R::decode, &DecodeConfig::beam));
    f.push_back(Real("decode.temperature", &R::decode, &DecodeConfig::temperature));
    f.push_back(Real("decode.mu1", &R::decode, &DecodeConfig::mu1));
    f.push_back(Real("decode.mu2", &R::decode, &DecodeConfig::mu2));
    f.push_back(Real("decode.mu3", &R::decode, &DecodeConfig::mu3));
    f.push_back(Real("decode.max_len_factor", &R::decode, &DecodeConfig::max_len_factor));
    f.push_back(Count("decode.max_symbols_per_frame", &R::decode, &DecodeConfig::max_symbols_per_frame));
    // [elm]
    f.push_back(Count("elm.epochs", &R::elm, &ElmTrainConfig::epochs));
    f.push_back(Count("elm.batch_size", &R::elm, &ElmTrainConfig::batch_size));
    f.push_back(Real("elm.peak_lr", &R::elm, &ElmTrainConfig::peak_lr));
    f.push_back(Count("elm.warmup_steps", &R::elm, &ElmTrainConfig::warmup_steps));
    f.push_back(Seed("elm.seed", &R::elm, &ElmTrainConfig::seed));
    f.push_back({"elm.grad_clip",
                 [](R& c, const toml::node& n, const std::string& k) { c.elm.optimizer.grad_clip = AsReal(n, k); },
                 [](const R& c) { return json(c.elm.optimizer.grad_clip); }});
    // [synth]
    f.push_back(Count("synth.vocab_size", &R::synth, &SynthSpec::vocab_size));
    f.push_back(Count("synth.successors", &R::synth, &SynthSpec::successors));
    f.push_back(Count("synth.min_tokens", &R::synth, &SynthSpec::min_tokens));
    f.push_back(Count("synth.max_tokens", &R::synth, &SynthSpec::max_tokens));
    f.push_back(Count("synth.min_frames_per_token", &R::synth, &SynthSpec::min_frames_per_token));
    f.push_back(Count("synth.max_frames_per_token", &R::synth, &SynthSpec::max_frames_per_token));
    f.push_back(Count("synth.feat_dim", &R::synth, &SynthSpec::feat_dim));
    f.push_back(Real("synth.noise", &R::synth, &SynthSpec::noise));
    f.push_back(Real("synth.prototype_scale", &R::synth, &SynthSpec::prototype_scale));
    f.push_back(Count("synth.utterances", &R::synth, &SynthSpec::utterances));
    f.push_back(Seed("synth.seed", &R::synth, &SynthSpec::seed));
    return f;
  }();
  return fields;
}

const Field& Find(const std::string& key) {
  for (const Field& f : Fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void CheckModel(const ModelConfig& m) {
  const std::pair<const char*, std::size_t> positive[] = {
      {"model.feat_dim", m.feat_dim},         {"model.downsample", m.downsample},
      {"model.conv_kernel", m.conv_kernel},   {"model.conv_channels", m.conv_channels},
      {"model.enc_hidden", m.enc_hidden},     {"model.enc_layers", m.enc_layers},
      {"model.pred_embed", m.pred_embed},     {"model.pred_hidden", m.pred_hidden},
      {"model.pred_dim", m.pred_dim},         {"model.joint_hidden", m.joint_hidden},
      {"model.elm_embed", m.elm_embed},       {"model.elm_hidden", m.elm_hidden}};
  for (const auto& [key, v] : positive) {
    if (v == 0) throw ConfigError(std::string(key) + ": must be positive");
  }
}

}  // namespace

void RunConfig::validate() const {
  CheckModel(model);
  train.validate();
  decode.validate();
  elm.validate();
  try {
    synth.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Field& f : Fields()) keys.push_back(f.key);
  return keys;
}

RunConfig parse_config(std::string_view text, std::string_view source) {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << source << ":" << e.source().begin.line << ": " << e.description();
    throw ConfigError(msg.str());
  }
  RunConfig cfg;
  for (auto&& [section, node] : root) {
    const std::string sname(section.str());
    const toml::table* table = node.as_table();
    if (table == nullptr) throw ConfigError("unknown config key '" + sname + "'");
    for (auto&& [key, value] : *table) {
      const std::string full = sname + "." + std::string(key.str());
      Find(full).set(cfg, value, full);
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw ConfigError("cannot read config file " + file.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), file.string());
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string value(assignment.substr(eq + 1));
  const Field& field = Find(key);
  toml::table parsed;
  try {
    parsed = toml::parse("v = " + value);
  } catch (const toml::parse_error&) {
    parsed = toml::table{{"v", value}};
  }
  field.set(cfg, *parsed.get("v"), key);
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments) {
  for (const std::string& a : assignments) apply_override(cfg, a);
  cfg.validate();
}

json config_to_json(const RunConfig& cfg) {
  json out = json::object();
  for (const Field& f : Fields()) {
    const auto dot = f.key.find('.');
    out[f.key.substr(0, dot)][f.key.substr(dot + 1)] = f.get(cfg);
  }
  return out;
}

std::string config_to_toml(const RunConfig& cfg) {
  const json j = config_to_json(cfg);
  std::ostringstream os;
  bool first = true;
  for (const char* section : {"model", "train", "ss", "decode", "elm", "synth"}) {
    if (!first) os << '\n';
    first = false;
    os << '[' << section << "]\n";
    for (const Field& f : Fields()) {
      const auto dot = f.key.find('.');
      if (f.key.substr(0, dot) != section) continue;
      const json v = f.get(cfg);
      os << f.key.substr(dot + 1) << " = ";
      if (v.is_number_float()) {
        // json prints the shortest round-trip form; keep a decimal point for TOML.
        std::string s = v.dump();
        if (s.find_first_of(".eE") == std::string::npos) s += ".0";
        os << s;
      } else {
        os << v.dump();
      }
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace tss
