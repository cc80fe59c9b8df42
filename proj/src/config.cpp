#include "remem/config.hpp"

#include <fstream>
#include <sstream>

namespace remem {

Json default_config() {
  return Json{
      {"dataset",
       {{"n_classes", 8},
        {"image_size", 16},
        {"samples_per_class", 16},
        {"test_samples_per_class", 8},
        {"sigma", 0.05}}},
      {"vit",
       {{"patch_size", 4}, {"d_embed", 40}, {"d_mlp", 80}, {"n_heads", 4}, {"n_layers", 4}}},
      {"remem",
       {{"alpha_attn", 1.0},
        {"alpha_mlp", 1.0},
        {"prune_attn_top_k", 0},
        {"prune_mlp_top_k", 0},
        {"lora_rank", 0},
        {"lora_alpha", 32.0}}},
      {"optimizer",
       {{"momentum", 0.9}, {"weight_decay", 1e-4}, {"sam_rho", 0.0}, {"batch", 16}}},
      {"schedule",
       {{"peak_lr", 0.05},
        {"warmup", 50},
        {"steps", 600},
        {"eval_every", 50},
        {"checkpoint_steps", Json::array()}}},
      {"distill",
       {{"algorithm", "logit_match"},
        {"lambda", 0.5},
        {"temperature", 2.0},
        {"dist_beta", 1.0},
        {"dist_gamma", 1.0},
        {"mixup_alpha", 0.8},
        {"steps", 1200},
        {"batch", 16},
        {"eval_every", 100},
        {"student_hidden", 16},
        {"student_lr", 0.05}}},
      {"mi", {{"updates", 800}}},
      {"expertness", {{"k", 4}, {"concat_tokens", false}, {"layer", -1}}},
      {"protocol",
       {{"ckpt_steps", Json::array()},
        {"teacher_lrs", {0.05}},
        {"student_lrs", {0.05, 0.1}},
        {"lambdas", {0.1, 0.5, 0.9}},
        {"temperatures", {1.0, 2.0, 4.0}},
        {"sam_rhos", {0.5, 0.05, 0.005}},
        {"mixup_alphas", {0.8, 0.9}}}},
      {"checkpoint", ""},
      {"seed", 1},
      {"output_dir", "runs/out"},
  };
}

Json load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  try {
    return Json::parse(buf.str());
  } catch (const Json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

namespace {

std::string join_path(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

bool same_kind(const Json& a, const Json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void merge_into(Json& base, const Json& user, const std::string& prefix) {
  if (!user.is_object())
    throw ConfigError("config section " + (prefix.empty() ? std::string("<root>") : prefix) +
                      " must be a JSON object");
  for (const auto& [key, value] : user.items()) {
    std::string path = join_path(prefix, key);
    auto it = base.find(key);
    if (it == base.end()) throw ConfigError("unknown config key " + path);
    if (it->is_object()) {
      merge_into(*it, value, path);
    } else {
      if (!same_kind(*it, value))
        throw ConfigError("config key " + path + " expects " + std::string(it->type_name()) +
                          ", got " + std::string(value.type_name()));
      *it = value;
    }
  }
}

}  // namespace

Json resolve_config(const Json& user) {
  Json out = default_config();
  merge_into(out, user, "");
  return out;
}

void apply_override(Json& cfg, const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + spec + "' is not of the form key.path=value");
  std::string path = spec.substr(0, eq), raw = spec.substr(eq + 1);

  Json* slot = &cfg;
  std::size_t start = 0;
  while (true) {
    auto dot = path.find('.', start);
    std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    auto it = slot->find(key);
    if (it == slot->end()) throw ConfigError("unknown config key " + path);
    slot = &*it;
    if (dot == std::string::npos) break;
    if (!slot->is_object()) throw ConfigError("config key " + path + " has no sub-keys");
    start = dot + 1;
  }
  if (slot->is_object()) throw ConfigError("config key " + path + " is a section, not a value");

  Json value;
  try {
    value = Json::parse(raw);
  } catch (const Json::exception&) {
    value = raw;  // unquoted strings like algorithm names
  }
  if (!same_kind(*slot, value))
    throw ConfigError("override for " + path + " expects " + std::string(slot->type_name()) +
                      ", got " + std::string(value.type_name()));
  *slot = value;
}

std::string serialize_config(const Json& cfg) { return cfg.dump(2) + "\n"; }

namespace {

// re-tag any exception from typed extraction with the section it came from
template <class Fn>
auto in_section(const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const Json::exception& e) {
    throw ConfigError("config section " + name + ": " + e.what());
  }
}

}  // namespace

RunConfig make_run_config(const Json& j) {
  RunConfig rc;

  in_section("dataset", [&] {
    const auto& d = j.at("dataset");
    rc.train_spec.n_classes = d.at("n_classes").get<std::size_t>();
    rc.train_spec.image_size = d.at("image_size").get<std::size_t>();
    rc.train_spec.samples_per_class = d.at("samples_per_class").get<std::size_t>();
    rc.train_spec.sigma = d.at("sigma").get<double>();
    rc.test_spec = rc.train_spec;
    rc.test_spec.samples_per_class = d.at("test_samples_per_class").get<std::size_t>();
  });

  in_section("vit", [&] {
    const auto& v = j.at("vit");
    rc.vit.image_size = rc.train_spec.image_size;
    rc.vit.channels = 1;
    rc.vit.n_classes = rc.train_spec.n_classes;
    rc.vit.patch_size = v.at("patch_size").get<std::size_t>();
    rc.vit.d_embed = v.at("d_embed").get<std::size_t>();
    rc.vit.d_mlp = v.at("d_mlp").get<std::size_t>();
    rc.vit.n_heads = v.at("n_heads").get<std::size_t>();
    rc.vit.n_layers = v.at("n_layers").get<std::size_t>();
  });

  in_section("remem", [&] {
    const auto& r = j.at("remem");
    rc.remem.alpha_attn = r.at("alpha_attn").get<double>();
    rc.remem.alpha_mlp = r.at("alpha_mlp").get<double>();
    rc.remem.prune_attn_top_k = r.at("prune_attn_top_k").get<std::size_t>();
    rc.remem.prune_mlp_top_k = r.at("prune_mlp_top_k").get<std::size_t>();
    rc.lora_rank = r.at("lora_rank").get<std::size_t>();
    rc.lora_alpha = r.at("lora_alpha").get<double>();
  });

  in_section("optimizer and schedule", [&] {
    const auto& o = j.at("optimizer");
    const auto& s = j.at("schedule");
    rc.finetune.momentum = o.at("momentum").get<double>();
    rc.finetune.weight_decay = o.at("weight_decay").get<double>();
    rc.finetune.sam_rho = o.at("sam_rho").get<double>();
    rc.finetune.batch = o.at("batch").get<std::size_t>();
    rc.finetune.steps = s.at("steps").get<std::size_t>();
    rc.finetune.sched = Schedule{s.at("peak_lr").get<double>(), s.at("warmup").get<std::size_t>(),
                                 rc.finetune.steps};
    rc.finetune.eval_every = s.at("eval_every").get<std::size_t>();
    rc.finetune.checkpoint_steps = s.at("checkpoint_steps").get<std::vector<std::size_t>>();
  });

  in_section("distill", [&] {
    const auto& d = j.at("distill");
    rc.kd.algorithm = kd_algorithm_from(d.at("algorithm").get<std::string>());
    rc.kd.lambda = d.at("lambda").get<double>();
    rc.kd.temperature = d.at("temperature").get<double>();
    rc.kd.dist_beta = d.at("dist_beta").get<double>();
    rc.kd.dist_gamma = d.at("dist_gamma").get<double>();
    rc.kd.mixup_alpha = d.at("mixup_alpha").get<double>();
    rc.kd.steps = d.at("steps").get<std::size_t>();
    rc.kd.batch = d.at("batch").get<std::size_t>();
    rc.kd.eval_every = d.at("eval_every").get<std::size_t>();
    rc.student_hidden = d.at("student_hidden").get<std::size_t>();
    rc.student_lr = d.at("student_lr").get<double>();
  });

  in_section("mi and expertness", [&] {
    rc.mi_updates = j.at("mi").at("updates").get<std::size_t>();
    const auto& e = j.at("expertness");
    rc.expertness_k = e.at("k").get<std::size_t>();
    rc.concat_tokens = e.at("concat_tokens").get<bool>();
    rc.analysis_layer = e.at("layer").get<std::int64_t>();
  });

  in_section("protocol", [&] {
    const auto& p = j.at("protocol");
    rc.ckpt_steps = p.at("ckpt_steps").get<std::vector<std::size_t>>();
    rc.teacher_lrs = p.at("teacher_lrs").get<std::vector<double>>();
    rc.student_lrs = p.at("student_lrs").get<std::vector<double>>();
    rc.lambdas = p.at("lambdas").get<std::vector<double>>();
    rc.temperatures = p.at("temperatures").get<std::vector<double>>();
    rc.sam_rhos = p.at("sam_rhos").get<std::vector<double>>();
    rc.mixup_alphas = p.at("mixup_alphas").get<std::vector<double>>();
  });

  in_section("top level", [&] {
    rc.checkpoint = j.at("checkpoint").get<std::string>();
    rc.seed = j.at("seed").get<std::uint64_t>();
    rc.output_dir = j.at("output_dir").get<std::string>();
  });

  rc.vit.validate();
  if (rc.finetune.steps > kMaxFinetuneSteps)
    throw ConfigError("schedule.steps " + std::to_string(rc.finetune.steps) +
                      " exceeds the desk budget of " + std::to_string(kMaxFinetuneSteps));
  if (rc.kd.effective_steps() > kMaxDistillSteps)
    throw ConfigError("distill.steps " + std::to_string(rc.kd.effective_steps()) +
                      " effective exceeds the desk budget of " + std::to_string(kMaxDistillSteps));
  if (rc.analysis_layer >= 0 && std::size_t(rc.analysis_layer) >= rc.vit.n_layers)
    throw ConfigError("expertness.layer " + std::to_string(rc.analysis_layer) +
                      " out of range for " + std::to_string(rc.vit.n_layers) + " layers");
  if (rc.output_dir.empty()) throw ConfigError("output_dir must not be empty");
  return rc;
}

}  // namespace remem
