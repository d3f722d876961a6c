#pragma once

#include <json.hpp>

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace seaseg {

enum class FusionMode { Multiply, Concate };
enum class ProposalMode { GtJitter, RpnLite };

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BackboneConfig {
  int stem_width = 16;
  std::vector<int> stage_widths{32, 64, 128, 256};
};

struct FpnConfig {
  int channels = 256;
};

struct SeaConfig {
  bool enabled = true;
  int uniform_level = 3;
  FusionMode fusion = FusionMode::Multiply;
  int channels = 256;  // width of the four 3x3 extraction convs
};

struct ScmbConfig {
  bool enabled = true;
  std::vector<int> branches{7, 14, 28};
  FusionMode fusion = FusionMode::Concate;
  int channels = 256;         // trident FCN width; each path keeps half
  int fusion_channels = 256;  // width of the four fusion convs
  // Selects the straight-line single-scale head instead of SCMB. Only used to
  // build the reference model for the ablation identity check.
  bool single_scale_reference = false;
};

struct HeadConfig {
  int hidden = 1024;
  int roi_size = 14;
  int sampling = 2;
};

struct ProposalConfig {
  ProposalMode mode = ProposalMode::GtJitter;
  int jitter_copies = 4;        // n: noisy copies per ground-truth box
  double jitter_center = 0.15;  // center noise as a fraction of box size
  double jitter_size = 0.25;    // log-size noise amplitude
  int random_boxes = 16;        // m: uniformly placed background boxes
  int rpn_top_k = 300;
  double rpn_nms = 0.7;
};

struct SamplingConfig {
  int rois_per_image = 64;
  double fg_fraction = 0.25;
  int max_mask_rois = 16;
  double fg_iou = 0.5;
};

struct TrainConfig {
  double lr = 0.005;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<int> lr_steps{};   // iterations at which lr is multiplied by lr_gamma
  double lr_gamma = 0.1;
  int warmup_steps = 0;
  double clip_grad_norm = 0.0;   // 0 disables clipping
  int steps = 1000;
  int checkpoint_every = 0;
  std::vector<double> loss_weights{1.0, 1.0, 1.0};
  std::vector<int> multiscale_sizes{};  // empty disables multi-scale training
};

struct InferConfig {
  double nms = 0.5;
  double mask_threshold = 0.5;
  int max_dets = 1000;
  double score_floor = 0.05;
  std::vector<int> anchor_sizes{16, 32, 64, 128, 256};
  std::vector<double> anchor_aspects{1.0, 0.33, 3.0};
  int pre_nms_top_k = 2000;  // per-class candidates kept before NMS
};

struct ModelConfig {
  int num_classes = 15;
  std::string scalar = "float";
  BackboneConfig backbone;
  FpnConfig fpn;
  SeaConfig sea;
  ScmbConfig scmb;
  HeadConfig head;
  ProposalConfig proposals;
  SamplingConfig sampling;
  TrainConfig train;
  InferConfig infer;

  // Small widths for desk-scale training and gradient checks.
  static ModelConfig toy(int num_classes);

  void validate() const;
};

// Flat dotted-key view of ModelConfig ("sea.uniform_level", ...).
nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& flat);

// Applies "key=value" overrides; unknown keys raise ConfigError.
void apply_override(ModelConfig& cfg, const std::string& assignment);
void apply_overrides(ModelConfig& cfg, const nlohmann::json& flat);

// FNV-1a over the architecture-defining keys only.
std::uint64_t architecture_hash(const ModelConfig& cfg);
std::string hash_hex(std::uint64_t h);

std::string to_string(FusionMode m);
FusionMode fusion_from_string(const std::string& s);

}  // namespace seaseg
