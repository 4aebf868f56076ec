#include "kcalnet/config.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <sstream>

#include "kcalnet/errors.hpp"
#include "kcalnet/format.hpp"

namespace kcalnet {

namespace {

std::string join(const std::vector<std::size_t>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + std::to_string(xs[i]);
  return out;
}

template <typename T>
T parse_integer(const std::string& key, const std::string& text) {
  T v{};
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || end != text.data() + text.size())
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + text + "'");
  return v;
}

double parse_real(const std::string& key, const std::string& text) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || end != text.data() + text.size() || !std::isfinite(v))
    throw ConfigError("'" + key + "' expects a real number, got '" + text + "'");
  return v;
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    out.push_back(parse_integer<std::size_t>(key, b == std::string::npos ? "" : item.substr(b, e - b + 1)));
  }
  if (out.empty()) throw ConfigError("'" + key + "' expects a comma-separated list");
  return out;
}

struct Field {
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string& key, const std::string&)> set;
};

template <typename M>
Field size_field(M member) {
  return {[member](const TrainConfig& c) { return std::to_string(member(c)); },
          [member](TrainConfig& c, const std::string& k, const std::string& v) {
            member(c) = parse_integer<std::size_t>(k, v);
          }};
}

template <typename M>
Field u64_field(M member) {
  return {[member](const TrainConfig& c) { return std::to_string(member(c)); },
          [member](TrainConfig& c, const std::string& k, const std::string& v) {
            member(c) = parse_integer<std::uint64_t>(k, v);
          }};
}

template <typename M>
Field real_field(M member) {
  return {[member](const TrainConfig& c) { return format_double(member(c)); },
          [member](TrainConfig& c, const std::string& k, const std::string& v) { member(c) = parse_real(k, v); }};
}

template <typename M>
Field list_field(M member) {
  return {[member](const TrainConfig& c) { return join(member(c)); },
          [member](TrainConfig& c, const std::string& k, const std::string& v) { member(c) = parse_list(k, v); }};
}

#define KC_REF(expr) [](auto& c) -> auto& { return expr; }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> kFields{
      {"epochs", size_field(KC_REF(c.epochs))},
      {"batch_size", size_field(KC_REF(c.batch_size))},
      {"learning_rate", real_field(KC_REF(c.adam.learning_rate))},
      {"beta1", real_field(KC_REF(c.adam.beta1))},
      {"beta2", real_field(KC_REF(c.adam.beta2))},
      {"epsilon_adam", real_field(KC_REF(c.adam.epsilon))},
      {"seed", u64_field(KC_REF(c.seed))},
      {"split_seed", u64_field(KC_REF(c.split_seed))},
      {"split_ratio", real_field(KC_REF(c.split_ratio))},
      {"min_kcal", real_field(KC_REF(c.min_kcal))},
      {"max_kcal", real_field(KC_REF(c.max_kcal))},
      {"augment", {[](const TrainConfig& c) { return to_string(c.augment); },
                   [](TrainConfig& c, const std::string&, const std::string& v) { c.augment = parse_augment_mode(v); }}},
      {"flip_prob", real_field(KC_REF(c.augment_policy.flip_prob))},
      {"brightness_lo", real_field(KC_REF(c.augment_policy.brightness_lo))},
      {"brightness_hi", real_field(KC_REF(c.augment_policy.brightness_hi))},
      {"contrast_lo", real_field(KC_REF(c.augment_policy.contrast_lo))},
      {"contrast_hi", real_field(KC_REF(c.augment_policy.contrast_hi))},
      {"image_size", size_field(KC_REF(c.arch.image_size))},
      {"stem_channels", size_field(KC_REF(c.arch.stem_channels))},
      {"backbone_widths", list_field(KC_REF(c.arch.backbone_widths))},
      {"backbone_blocks", list_field(KC_REF(c.arch.backbone_blocks))},
      {"backbone_strides", list_field(KC_REF(c.arch.backbone_strides))},
      {"backbone_expansions", list_field(KC_REF(c.arch.backbone_expansions))},
      {"head_channels", size_field(KC_REF(c.arch.head_channels))},
      {"dense_units", list_field(KC_REF(c.arch.dense_units))},
      {"dropout_rate", real_field(KC_REF(c.arch.dropout_rate))},
      {"vocab_size", size_field(KC_REF(c.arch.vocab_size))},
      {"max_tokens", size_field(KC_REF(c.arch.max_tokens))},
      {"embed_dim", size_field(KC_REF(c.arch.embed_dim))},
      {"attention_heads", size_field(KC_REF(c.arch.attention_heads))},
      {"key_dim", size_field(KC_REF(c.arch.key_dim))},
  };
  return kFields;
}

#undef KC_REF

}  // namespace

std::map<std::string, std::string> to_key_values(const TrainConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& [key, field] : fields()) out[key] = field.get(cfg);
  return out;
}

std::string to_config_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [key, value] : to_key_values(cfg)) out += key + " = " + value + "\n";
  return out;
}

void apply_key_values(TrainConfig& cfg, const std::map<std::string, std::string>& values) {
  for (const auto& [key, value] : values) {
    auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError("unknown configuration key '" + key + "'");
    it->second.set(cfg, key, value);
  }
}

TrainConfig preset_config(const std::string& name) {
  TrainConfig cfg;
  if (name == "micro") return cfg;
  if (name == "full") {
    cfg.arch = ArchConfig::full_scale();
    return cfg;
  }
  throw ConfigError("unknown preset '" + name + "' (expected micro or full)");
}

TrainConfig resolve_config(const std::filesystem::path* file, const std::map<std::string, std::string>& overrides) {
  std::map<std::string, std::string> layered;
  if (file) layered = parse_key_values(read_text_file(*file));
  for (const auto& [k, v] : overrides) layered[k] = v;
  std::string preset = "micro";
  if (auto it = layered.find("preset"); it != layered.end()) {
    preset = it->second;
    layered.erase(it);
  }
  TrainConfig cfg = preset_config(preset);
  apply_key_values(cfg, layered);
  cfg.validate();
  return cfg;
}

}  // namespace kcalnet
