#include "seaseg/config.hpp"

#include <algorithm>
#include <functional>
#include <iomanip>
#include <sstream>

namespace seaseg {

using nlohmann::json;

std::string to_string(FusionMode m) { return m == FusionMode::Multiply ? "MULTIPLY" : "CONCATE"; }

FusionMode fusion_from_string(const std::string& s) {
  std::string u = s;
  std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (u == "MULTIPLY") return FusionMode::Multiply;
  if (u == "CONCATE" || u == "CONCAT") return FusionMode::Concate;
  throw ConfigError("unknown fusion mode '" + s + "' (expected MULTIPLY or CONCATE)");
}

namespace {

std::string proposal_mode_name(ProposalMode m) { return m == ProposalMode::GtJitter ? "gt_jitter" : "rpn_lite"; }

ProposalMode proposal_mode_from(const std::string& s) {
  if (s == "gt_jitter" || s == "GT_JITTER") return ProposalMode::GtJitter;
  if (s == "rpn_lite" || s == "RPN_LITE") return ProposalMode::RpnLite;
  throw ConfigError("unknown proposal mode '" + s + "'");
}

// Comma-separated integer lists are accepted wherever a list is expected so
// that `--set scmb.branches=7,14` works from the command line.
template <typename T>
std::vector<T> as_list(const json& v) {
  if (v.is_array()) return v.get<std::vector<T>>();
  if (v.is_number()) return {v.get<T>()};
  if (v.is_string()) {
    std::vector<T> out;
    std::stringstream ss(v.get<std::string>());
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(static_cast<T>(std::stod(item)));
    return out;
  }
  throw ConfigError("expected a list");
}

bool as_bool(const json& v) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "true" || s == "on" || s == "1") return true;
    if (s == "false" || s == "off" || s == "0") return false;
  }
  if (v.is_number()) return v.get<double>() != 0;
  throw ConfigError("expected a boolean");
}

template <typename T>
T as_number(const json& v) {
  if (v.is_number()) return v.get<T>();
  if (v.is_string()) return static_cast<T>(std::stod(v.get<std::string>()));
  throw ConfigError("expected a number");
}

struct Key {
  std::string name;
  bool architecture;
  std::function<json(const ModelConfig&)> get;
  std::function<void(ModelConfig&, const json&)> set;
};

#define SEASEG_NUM(key, arch, field, T) \
  Key { key, arch, [](const ModelConfig& c) { return json(c.field); }, [](ModelConfig& c, const json& v) { c.field = as_number<T>(v); } }
#define SEASEG_BOOL(key, arch, field) \
  Key { key, arch, [](const ModelConfig& c) { return json(c.field); }, [](ModelConfig& c, const json& v) { c.field = as_bool(v); } }
#define SEASEG_LIST(key, arch, field, T) \
  Key { key, arch, [](const ModelConfig& c) { return json(c.field); }, [](ModelConfig& c, const json& v) { c.field = as_list<T>(v); } }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      SEASEG_NUM("model.num_classes", true, num_classes, int),
      Key{"model.scalar", true, [](const ModelConfig& c) { return json(c.scalar); },
          [](ModelConfig& c, const json& v) { c.scalar = v.get<std::string>(); }},
      SEASEG_NUM("backbone.stem_width", true, backbone.stem_width, int),
      SEASEG_LIST("backbone.stage_widths", true, backbone.stage_widths, int),
      SEASEG_NUM("fpn.channels", true, fpn.channels, int),
      SEASEG_BOOL("sea.enabled", true, sea.enabled),
      SEASEG_NUM("sea.uniform_level", true, sea.uniform_level, int),
      Key{"sea.fusion", true, [](const ModelConfig& c) { return json(to_string(c.sea.fusion)); },
          [](ModelConfig& c, const json& v) { c.sea.fusion = fusion_from_string(v.get<std::string>()); }},
      SEASEG_NUM("sea.channels", true, sea.channels, int),
      SEASEG_BOOL("scmb.enabled", true, scmb.enabled),
      SEASEG_LIST("scmb.branches", true, scmb.branches, int),
      Key{"scmb.fusion", true, [](const ModelConfig& c) { return json(to_string(c.scmb.fusion)); },
          [](ModelConfig& c, const json& v) { c.scmb.fusion = fusion_from_string(v.get<std::string>()); }},
      SEASEG_NUM("scmb.channels", true, scmb.channels, int),
      SEASEG_NUM("scmb.fusion_channels", true, scmb.fusion_channels, int),
      SEASEG_BOOL("scmb.single_scale_reference", true, scmb.single_scale_reference),
      SEASEG_NUM("head.hidden", true, head.hidden, int),
      SEASEG_NUM("head.roi_size", true, head.roi_size, int),
      SEASEG_NUM("head.sampling", true, head.sampling, int),
      Key{"proposals.mode", true, [](const ModelConfig& c) { return json(proposal_mode_name(c.proposals.mode)); },
          [](ModelConfig& c, const json& v) { c.proposals.mode = proposal_mode_from(v.get<std::string>()); }},
      SEASEG_NUM("proposals.jitter_copies", false, proposals.jitter_copies, int),
      SEASEG_NUM("proposals.jitter_center", false, proposals.jitter_center, double),
      SEASEG_NUM("proposals.jitter_size", false, proposals.jitter_size, double),
      SEASEG_NUM("proposals.random_boxes", false, proposals.random_boxes, int),
      SEASEG_NUM("proposals.rpn_top_k", false, proposals.rpn_top_k, int),
      SEASEG_NUM("proposals.rpn_nms", false, proposals.rpn_nms, double),
      SEASEG_NUM("sampling.rois_per_image", false, sampling.rois_per_image, int),
      SEASEG_NUM("sampling.fg_fraction", false, sampling.fg_fraction, double),
      SEASEG_NUM("sampling.max_mask_rois", false, sampling.max_mask_rois, int),
      SEASEG_NUM("sampling.fg_iou", false, sampling.fg_iou, double),
      SEASEG_NUM("train.lr", false, train.lr, double),
      SEASEG_NUM("train.momentum", false, train.momentum, double),
      SEASEG_NUM("train.weight_decay", false, train.weight_decay, double),
      SEASEG_LIST("train.lr_steps", false, train.lr_steps, int),
      SEASEG_NUM("train.lr_gamma", false, train.lr_gamma, double),
      SEASEG_NUM("train.warmup_steps", false, train.warmup_steps, int),
      SEASEG_NUM("train.clip_grad_norm", false, train.clip_grad_norm, double),
      SEASEG_NUM("train.steps", false, train.steps, int),
      SEASEG_NUM("train.checkpoint_every", false, train.checkpoint_every, int),
      SEASEG_LIST("train.loss_weights", false, train.loss_weights, double),
      SEASEG_LIST("train.multiscale_sizes", false, train.multiscale_sizes, int),
      SEASEG_NUM("infer.nms", false, infer.nms, double),
      SEASEG_NUM("infer.mask_threshold", false, infer.mask_threshold, double),
      SEASEG_NUM("infer.max_dets", false, infer.max_dets, int),
      SEASEG_NUM("infer.score_floor", false, infer.score_floor, double),
      SEASEG_LIST("infer.anchor_sizes", false, infer.anchor_sizes, int),
      SEASEG_LIST("infer.anchor_aspects", false, infer.anchor_aspects, double),
      SEASEG_NUM("infer.pre_nms_top_k", false, infer.pre_nms_top_k, int),
  };
  return table;
}

#undef SEASEG_NUM
#undef SEASEG_BOOL
#undef SEASEG_LIST

const Key& find_key(const std::string& name) {
  for (const auto& k : keys())
    if (k.name == name) return k;
  throw ConfigError("unknown config key '" + name + "'");
}

}  // namespace

ModelConfig ModelConfig::toy(int num_classes) {
  ModelConfig c;
  c.num_classes = num_classes;
  c.backbone.stem_width = 8;
  c.backbone.stage_widths = {8, 16, 24, 32};
  c.fpn.channels = 24;
  c.sea.channels = 24;
  c.scmb.channels = 16;
  c.scmb.fusion_channels = 16;
  c.head.hidden = 128;
  c.sampling.max_mask_rois = 8;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
  if (num_classes < 1) fail("model.num_classes", "must be >= 1");
  if (scalar != "float" && scalar != "double") fail("model.scalar", "must be float or double");
  if (backbone.stage_widths.size() != 4) fail("backbone.stage_widths", "exactly four stage widths required");
  for (int w : backbone.stage_widths)
    if (w < 1) fail("backbone.stage_widths", "widths must be positive");
  if (backbone.stem_width < 1) fail("backbone.stem_width", "must be positive");
  if (fpn.channels < 1) fail("fpn.channels", "must be positive");
  if (sea.uniform_level < 3 || sea.uniform_level > 6) fail("sea.uniform_level", "must be in 3..6 (level 2 is not supported)");
  if (sea.channels < 1) fail("sea.channels", "must be positive");
  if (scmb.channels < 2 || scmb.channels % 2 != 0) fail("scmb.channels", "must be a positive even number");
  if (scmb.fusion_channels < 1) fail("scmb.fusion_channels", "must be positive");
  {
    auto b = scmb.branches;
    std::sort(b.begin(), b.end());
    const bool known = std::all_of(b.begin(), b.end(), [](int s) { return s == 7 || s == 14 || s == 28; });
    if (b.empty() || !known || std::adjacent_find(b.begin(), b.end()) != b.end())
      fail("scmb.branches", "must be a nonempty subset of {7,14,28}");
    if (std::find(b.begin(), b.end(), 14) == b.end()) fail("scmb.branches", "must contain 14 (the native RoI scale)");
  }
  if (head.roi_size != 14) fail("head.roi_size", "the mask branch requires 14x14 RoI features");
  if (head.hidden < 1 || head.sampling < 1) fail("head", "hidden and sampling must be positive");
  if (proposals.jitter_copies < 0 || proposals.random_boxes < 0) fail("proposals", "counts must be non-negative");
  if (sampling.rois_per_image < 1) fail("sampling.rois_per_image", "must be positive");
  if (sampling.fg_fraction <= 0 || sampling.fg_fraction > 1) fail("sampling.fg_fraction", "must be in (0,1]");
  if (train.lr < 0) fail("train.lr", "must be non-negative");
  if (train.loss_weights.size() != 3) fail("train.loss_weights", "three weights required");
  if (infer.max_dets < 1) fail("infer.max_dets", "must be positive");
  if (infer.nms <= 0 || infer.nms > 1) fail("infer.nms", "must be in (0,1]");
}

json to_json(const ModelConfig& cfg) {
  json out = json::object();
  for (const auto& k : keys()) out[k.name] = k.get(cfg);
  return out;
}

void apply_overrides(ModelConfig& cfg, const json& flat) {
  if (!flat.is_object()) throw ConfigError("configuration must be a JSON object of dotted keys");
  for (const auto& [name, value] : flat.items()) {
    if (value.is_object()) {
      // Nested form {"sea": {"enabled": false}} is flattened on the fly.
      json inner = json::object();
      for (const auto& [sub, v] : value.items()) inner[name + "." + sub] = v;
      apply_overrides(cfg, inner);
      continue;
    }
    try {
      find_key(name).set(cfg, value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(name + ": " + e.what());
    }
  }
}

ModelConfig config_from_json(const json& flat) {
  ModelConfig cfg;
  apply_overrides(cfg, flat);
  return cfg;
}

void apply_override(ModelConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' must be key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  apply_overrides(cfg, json{{key, parsed}});
}

std::uint64_t architecture_hash(const ModelConfig& cfg) {
  std::string canon;
  for (const auto& k : keys())
    if (k.architecture) canon += k.name + "=" + k.get(cfg).dump() + ";";
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : canon) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

}  // namespace seaseg
