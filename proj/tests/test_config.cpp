#include "seaseg/config.hpp"

#include <doctest.h>

using namespace seaseg;
using nlohmann::json;

TEST_CASE("defaults") {
  const ModelConfig c;
  CHECK(c.fpn.channels == 256);
  CHECK(c.sea.uniform_level == 3);
  CHECK(c.sea.fusion == FusionMode::Multiply);
  CHECK(c.scmb.fusion == FusionMode::Concate);
  CHECK(c.scmb.branches == std::vector<int>{7, 14, 28});
  CHECK(c.train.momentum == 0.9);
  CHECK(c.train.weight_decay == 1e-4);
  CHECK(c.infer.nms == 0.5);
  CHECK(c.infer.max_dets == 1000);
  c.validate();
  ModelConfig::toy(3).validate();
}

TEST_CASE("JSON round trip covers every key") {
  auto c = ModelConfig::toy(4);
  c.sea.enabled = false;
  c.scmb.branches = {14, 28};
  c.train.lr_steps = {100, 200};
  c.infer.anchor_aspects = {0.5, 2.0};
  c.proposals.mode = ProposalMode::RpnLite;
  const json j = to_json(c);
  CHECK(j.at("sea.enabled") == false);
  CHECK(j.at("proposals.mode") == "rpn_lite");
  CHECK(to_json(config_from_json(j)) == j);
  CHECK(to_json(config_from_json(json::parse(j.dump()))) == j);
}

TEST_CASE("overrides") {
  ModelConfig c;
  apply_override(c, "sea.enabled=false");
  apply_override(c, "scmb.branches=[14]");
  apply_override(c, "scmb.fusion=MULTIPLY");
  apply_override(c, "train.lr=0.02");
  apply_override(c, "proposals.mode=gt_jitter");
  CHECK(!c.sea.enabled);
  CHECK(c.scmb.branches == std::vector<int>{14});
  CHECK(c.scmb.fusion == FusionMode::Multiply);
  CHECK(c.train.lr == 0.02);
  apply_overrides(c, json::parse(R"({"fpn": {"channels": 32}, "infer.max_dets": 100})"));
  CHECK(c.fpn.channels == 32);
  CHECK(c.infer.max_dets == 100);
}

TEST_CASE("invalid configuration is rejected with the key path") {
  ModelConfig c;
  auto message = [&](const std::string& assignment) -> std::string {
    try {
      ModelConfig copy = c;
      apply_override(copy, assignment);
      copy.validate();
    } catch (const ConfigError& e) {
      return e.what();
    }
    return "";
  };
  CHECK(message("sea.enable=false").find("sea.enable") != std::string::npos);
  CHECK(message("sea.fusion=ADD").find("ADD") != std::string::npos);
  CHECK(message("sea.uniform_level=2").find("sea.uniform_level") != std::string::npos);
  CHECK(message("sea.uniform_level=7").find("sea.uniform_level") != std::string::npos);
  CHECK(message("scmb.branches=[7,28]").find("scmb.branches") != std::string::npos);
  CHECK(message("scmb.branches=[14,14]").find("scmb.branches") != std::string::npos);
  CHECK(message("scmb.branches=[]").find("scmb.branches") != std::string::npos);
  CHECK(message("scmb.channels=5").find("scmb.channels") != std::string::npos);
  CHECK(message("backbone.stage_widths=[8,16]").find("backbone.stage_widths") != std::string::npos);
  CHECK(message("train.lr=fast").find("train.lr") != std::string::npos);
  CHECK(message("train.loss_weights=[1,1]").find("train.loss_weights") != std::string::npos);
  CHECK(message("infer.nms=0").find("infer.nms") != std::string::npos);
  CHECK(message("model.scalar=half").find("model.scalar") != std::string::npos);
  CHECK(message("novalue").find("key=value") != std::string::npos);
  CHECK(message("train.lr=0.1") == "");
  CHECK_THROWS_AS(apply_overrides(c, json::array()), ConfigError);
}

TEST_CASE("architecture hash tracks architecture keys only") {
  const auto base = ModelConfig::toy(3);
  const auto h = architecture_hash(base);
  CHECK(h == architecture_hash(ModelConfig::toy(3)));
  CHECK(hash_hex(h).size() == 16);
  for (const char* change : {"fpn.channels=32", "sea.enabled=false", "scmb.branches=[14]", "model.num_classes=4",
                             "scmb.fusion=MULTIPLY", "backbone.stage_widths=[8,16,24,40]", "model.scalar=double"}) {
    auto c = base;
    apply_override(c, change);
    INFO(change);
    CHECK(architecture_hash(c) != h);
  }
  for (const char* change : {"train.lr=0.5", "infer.nms=0.6", "proposals.jitter_copies=2", "train.steps=5"}) {
    auto c = base;
    apply_override(c, change);
    INFO(change);
    CHECK(architecture_hash(c) == h);
  }
}

TEST_CASE("fusion mode names") {
  CHECK(to_string(FusionMode::Multiply) == "MULTIPLY");
  CHECK(fusion_from_string("CONCATE") == FusionMode::Concate);
  CHECK_THROWS_AS(fusion_from_string("SUM"), ConfigError);
}
