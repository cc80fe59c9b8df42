#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "remem/data.hpp"
#include "remem/distill.hpp"
#include "remem/finetune.hpp"
#include "remem/vit.hpp"

namespace remem {

using Json = nlohmann::json;

// full document with every recognized key and its default value
Json default_config();

// parse a config file; IoError if unreadable, ConfigError on bad JSON
Json load_config(const std::string& path);

// defaults overlaid with the user document; any key that does not exist in
// the defaults is rejected with its full dot path
Json resolve_config(const Json& user);

// apply one "dot.path=value" override in place; the path must already exist
// and the value must keep the slot's JSON type
void apply_override(Json& cfg, const std::string& spec);

std::string serialize_config(const Json& cfg);

// typed view of a resolved document, with desk-scale budget caps enforced
struct RunConfig {
  ShapesSpec train_spec, test_spec;  // seeds derived from the root seed
  VitConfig vit;
  ReMemConfig remem;
  std::size_t lora_rank = 0;  // 0 trains all weights
  double lora_alpha = 32.0;
  FinetuneConfig finetune;  // checkpoint_dir left empty; the runner fills it
  KdConfig kd;
  double student_lr = 0.05;
  std::size_t student_hidden = 16;
  std::size_t mi_updates = 800;
  std::size_t expertness_k = 4;
  bool concat_tokens = false;
  std::int64_t analysis_layer = -1;  // -1 selects the top layer
  std::vector<std::size_t> ckpt_steps;
  std::vector<double> teacher_lrs, student_lrs, lambdas, temperatures, sam_rhos, mixup_alphas;
  std::string checkpoint;
  std::uint64_t seed = 1;
  std::string output_dir;
};

RunConfig make_run_config(const Json& resolved);

constexpr std::size_t kMaxFinetuneSteps = 2000;
constexpr std::size_t kMaxDistillSteps = 4000;

}  // namespace remem
