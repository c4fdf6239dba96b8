#pragma once

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "roadseg/infer.hpp"
#include "roadseg/trainer.hpp"

namespace roadseg {

/// Everything a command needs, merged from a config file and overrides.
struct RunConfig {
  std::filesystem::path dataset_dir;
  std::filesystem::path output_dir = "run";
  std::string image_suffix = "_sat";
  std::string mask_suffix = "_mask";
  int mask_threshold = 128;
  double holdout_fraction = 0.25;

  ModelConfig model;
  TrainConfig train;
  TtaConfig tta;

  void validate() const {
    if (dataset_dir.empty()) throw ConfigError("dataset_dir is not set");
    if (output_dir.empty()) throw ConfigError("output_dir is not set");
    if (mask_threshold < 1 || mask_threshold > 255) throw ConfigError("mask_threshold must be in [1, 255]");
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must be in (0, 1)");
    model.validate();
    train.validate();
    tta.validate();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

template <class V>
V parse_number(const std::string& key, const std::string& text) {
  V v{};
  const auto* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || p != end) throw ConfigError("bad value for '" + key + "': '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("bad value for '" + key + "': '" + text + "' (expected true/false)");
}

inline std::array<int, 4> parse_quad(const std::string& key, const std::string& text) {
  std::array<int, 4> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t n = 0;
  while (std::getline(ss, item, ',')) {
    if (n == 4) throw ConfigError("'" + key + "' takes exactly 4 comma-separated integers");
    out[n++] = parse_number<int>(key, trim(item));
  }
  if (n != 4) throw ConfigError("'" + key + "' takes exactly 4 comma-separated integers");
  return out;
}

struct KeySpec {
  std::function<void(RunConfig&, const std::string&)> set;
  std::vector<std::string> aliases; // spelled-out names, used only for suggestions
};

inline const std::map<std::string, KeySpec>& config_schema() {
  using R = RunConfig;
  static const std::map<std::string, KeySpec> schema = [] {
    std::map<std::string, KeySpec> s;
    auto str = [&](const std::string& k, auto get, std::vector<std::string> al = {}) {
      s[k] = {[get](R& r, const std::string& v) { get(r) = v; }, std::move(al)};
    };
    auto dbl = [&](const std::string& k, auto get, std::vector<std::string> al = {}) {
      s[k] = {[get, k](R& r, const std::string& v) { get(r) = parse_number<double>(k, v); }, std::move(al)};
    };
    auto i64 = [&](const std::string& k, auto get, std::vector<std::string> al = {}) {
      s[k] = {[get, k](R& r, const std::string& v) { get(r) = parse_number<std::int64_t>(k, v); }, std::move(al)};
    };
    auto integer = [&](const std::string& k, auto get, std::vector<std::string> al = {}) {
      s[k] = {[get, k](R& r, const std::string& v) { get(r) = parse_number<int>(k, v); }, std::move(al)};
    };

    str("dataset_dir", [](R& r) -> auto& { return r.dataset_dir; }, {"data_dir", "dataset"});
    str("output_dir", [](R& r) -> auto& { return r.output_dir; }, {"out_dir", "output"});
    str("image_suffix", [](R& r) -> auto& { return r.image_suffix; });
    str("mask_suffix", [](R& r) -> auto& { return r.mask_suffix; });
    integer("mask_threshold", [](R& r) -> auto& { return r.mask_threshold; });
    dbl("holdout_fraction", [](R& r) -> auto& { return r.holdout_fraction; }, {"validation_fraction", "holdout"});

    s["stage_depths"] = {[](R& r, const std::string& v) { r.model.stage_depths = parse_quad("stage_depths", v); }, {"depths"}};
    s["stage_channels"] = {[](R& r, const std::string& v) { r.model.stage_channels = parse_quad("stage_channels", v); },
                           {"channels"}};
    integer("stem_channels", [](R& r) -> auto& { return r.model.stem_channels; });
    dbl("dropout_p", [](R& r) -> auto& { return r.model.dropout_p; }, {"dropout"});
    integer("decoder_reduction", [](R& r) -> auto& { return r.model.decoder_reduction; });

    dbl("lr0", [](R& r) -> auto& { return r.train.lr0; }, {"learning_rate", "lr"});
    dbl("decay", [](R& r) -> auto& { return r.train.decay; }, {"lr_decay"});
    dbl("beta1", [](R& r) -> auto& { return r.train.beta1; });
    dbl("beta2", [](R& r) -> auto& { return r.train.beta2; });
    dbl("adam_eps", [](R& r) -> auto& { return r.train.adam_eps; });
    integer("batch_size", [](R& r) -> auto& { return r.train.batch_size; }, {"batch"});
    i64("max_iterations", [](R& r) -> auto& { return r.train.max_iterations; }, {"iterations"});
    i64("eval_every", [](R& r) -> auto& { return r.train.eval_every; });
    integer("keep_best", [](R& r) -> auto& { return r.train.keep_best; });
    s["seed"] = {[](R& r, const std::string& v) { r.train.seed = parse_number<std::uint64_t>("seed", v); }, {}};
    integer("workers", [](R& r) -> auto& { return r.train.workers; });
    dbl("eval_threshold", [](R& r) -> auto& { return r.train.eval_threshold; });
    s["eval_set"] = {[](R& r, const std::string& v) {
                       if (v == "holdout") r.train.eval_set = EvalSet::holdout;
                       else if (v == "train") r.train.eval_set = EvalSet::train;
                       else throw ConfigError("eval_set must be 'holdout' or 'train', got '" + v + "'");
                     },
                     {}};

    dbl("alpha", [](R& r) -> auto& { return r.train.loss.alpha; }, {"loss_alpha"});
    dbl("bce_eps", [](R& r) -> auto& { return r.train.loss.bce_eps; });
    dbl("jaccard_eps", [](R& r) -> auto& { return r.train.loss.jaccard_eps; });

    s["augment"] = {[](R& r, const std::string& v) { r.train.augment_enabled = parse_bool("augment", v); },
                    {"augmentation"}};
    dbl("scale_min", [](R& r) -> auto& { return r.train.augment.scale_min; });
    dbl("scale_max", [](R& r) -> auto& { return r.train.augment.scale_max; });
    dbl("rotation_deg", [](R& r) -> auto& { return r.train.augment.rotation_deg; }, {"rotation"});
    integer("crop_size", [](R& r) -> auto& { return r.train.augment.crop_size; }, {"crop"});
    dbl("brightness_delta", [](R& r) -> auto& { return r.train.augment.brightness_delta; }, {"brightness"});
    dbl("contrast_min", [](R& r) -> auto& { return r.train.augment.contrast_min; });
    dbl("contrast_max", [](R& r) -> auto& { return r.train.augment.contrast_max; });
    dbl("hue_delta_deg", [](R& r) -> auto& { return r.train.augment.hue_delta_deg; }, {"hue"});
    dbl("saturation_min", [](R& r) -> auto& { return r.train.augment.saturation_min; });
    dbl("saturation_max", [](R& r) -> auto& { return r.train.augment.saturation_max; });

    s["tta"] = {[](R& r, const std::string& v) { r.tta.enabled = parse_bool("tta", v); }, {}};
    dbl("threshold", [](R& r) -> auto& { return r.tta.threshold; }, {"binarize_threshold"});
    return s;
  }();
  return schema;
}

} // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : detail::config_schema()) keys.push_back(k);
  return keys;
}

/// Closest known key to `key`, also matching against spelled-out aliases.
inline std::string suggest_key(const std::string& key) {
  auto norm = [](std::string s) {
    std::string out;
    for (char c : s)
      if (c != '_' && c != '-') out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    return out;
  };
  const auto k = norm(key);
  std::string best;
  std::size_t best_d = std::string::npos;
  for (const auto& [name, spec] : detail::config_schema()) {
    std::vector<std::string> forms{name};
    forms.insert(forms.end(), spec.aliases.begin(), spec.aliases.end());
    for (const auto& f : forms) {
      const auto d = detail::edit_distance(k, norm(f));
      if (d < best_d) best_d = d, best = name;
    }
  }
  return best;
}

/// Applies one `key = value` setting.
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& schema = detail::config_schema();
  auto it = schema.find(key);
  if (it == schema.end()) throw ConfigError("unknown config key '" + key + "' (did you mean '" + suggest_key(key) + "'?)");
  it->second.set(cfg, value);
}

/// Applies a `key=value` override string.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  apply_setting(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

/// Parses line-oriented `key = value` text; '#' starts a comment. Relative
/// paths are resolved against `base_dir`.
inline RunConfig parse_config(std::istream& in, const std::filesystem::path& base_dir = {},
                              const std::string& source = "<config>") {
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    try {
      apply_setting(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!base_dir.empty()) {
    if (!cfg.dataset_dir.empty() && cfg.dataset_dir.is_relative()) cfg.dataset_dir = base_dir / cfg.dataset_dir;
    if (!cfg.output_dir.empty() && cfg.output_dir.is_relative()) cfg.output_dir = base_dir / cfg.output_dir;
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_config(in, path.parent_path(), path.string());
}

} // namespace roadseg
