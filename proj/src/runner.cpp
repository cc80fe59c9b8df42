#include "remem/runner.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "remem/expertness.hpp"
#include "remem/infometer.hpp"
#include "remem/kernels.hpp"

namespace remem {

const std::vector<std::string> kSubcommands = {"finetune", "distill",   "sweep",       "prune-sweep",
                                               "expertness", "mi",      "criticality", "ablate"};

namespace {

namespace fs = std::filesystem;

std::uint64_t fnv1a64(const std::string& bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)v);
  return buf;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << text;
  if (!f) throw IoError("write to " + path + " failed");
}

Dataset make_split(const RunConfig& rc, bool train) {
  ShapesSpec spec = train ? rc.train_spec : rc.test_spec;
  spec.seed = derive_seed(rc.seed, train ? "data_train" : "data_test");
  return generate_shapes(spec);
}

VitModel<float> need_teacher(const RunConfig& rc) {
  if (rc.checkpoint.empty())
    throw IoError("this subcommand needs a teacher snapshot: set the checkpoint config key");
  return load_vit<float>(rc.checkpoint, rc.vit);
}

std::size_t analysis_layer(const RunConfig& rc) {
  return rc.analysis_layer < 0 ? rc.vit.n_layers - 1 : std::size_t(rc.analysis_layer);
}

// one fine-tune pass with the config's adapter setting; returns the model
// that downstream consumers should read (merged when adapters were used)
struct TeacherRun {
  VitModel<float> model;
  FinetuneRun<float> run;
};

TeacherRun finetune_with(const RunConfig& rc, const FinetuneConfig& fc, std::uint64_t init_seed,
                         std::uint64_t train_seed, const Dataset& train, const Dataset& test) {
  TeacherRun out;
  out.model = init_vit<float>(rc.vit, derive_seed(init_seed, "teacher_init"));
  if (rc.lora_rank) {
    auto lora = make_lora(out.model, LoraConfig{rc.lora_rank, rc.lora_alpha},
                          derive_seed(init_seed, "lora_init"));
    out.run = finetune_teacher(out.model, rc.remem, &lora, train, test, fc, train_seed);
    lora_merge(out.model, lora);
  } else {
    out.run = finetune_teacher(out.model, rc.remem, nullptr, train, test, fc, train_seed);
  }
  return out;
}

void write_trace_csv(const std::string& path, const std::vector<double>& losses,
                     const std::vector<std::pair<std::size_t, double>>& evals) {
  std::map<std::size_t, double> acc(evals.begin(), evals.end());
  csv::Writer w(path, "step,loss,test_acc");
  for (std::size_t i = 0; i < losses.size(); ++i) {
    auto it = acc.find(i + 1);
    w.row({std::to_string(i + 1), csv::num(losses[i]),
           it == acc.end() ? std::string() : csv::num(it->second)});
  }
}

void cmd_finetune(const RunConfig& rc0, const std::string& outdir) {
  RunConfig rc = rc0;
  rc.finetune.checkpoint_dir = outdir;
  auto train = make_split(rc, true), test = make_split(rc, false);
  auto t = finetune_with(rc, rc.finetune, rc.seed, rc.seed, train, test);
  write_trace_csv(outdir + "/finetune.csv", t.run.losses, t.run.evals);
  save_vit(outdir + "/model_final.rmem", t.model);

  Json ckpts = Json::array();
  for (const auto& [step, path] : t.run.checkpoints)
    ckpts.push_back({{"step", step}, {"path", std::filesystem::path(path).filename().string()}});
  Json summary{{"final_acc", t.run.final_acc},
               {"best_acc", t.run.best_acc},
               {"best_step", t.run.best_step},
               {"model", "model_final.rmem"},
               {"checkpoints", ckpts}};
  write_text(outdir + "/summary.json", summary.dump(2) + "\n");
}

void cmd_distill(const RunConfig& rc, const std::string& outdir) {
  auto teacher = need_teacher(rc);
  auto train = make_split(rc, true), test = make_split(rc, false);
  auto student = make_student<float>(train.image_elems(), train.n_classes, rc.seed,
                                     rc.student_hidden);
  auto ps = params(student);
  Schedule sched{rc.student_lr, 0, rc.kd.effective_steps()};
  auto opt = make_sgd(ps, sched, float(rc.finetune.momentum), float(rc.finetune.weight_decay));
  auto r = train_student(student, teacher, rc.remem, train, test, rc.kd, opt, rc.seed);
  write_trace_csv(outdir + "/distill.csv", r.losses, r.evals);
  Json summary{{"final_acc", r.final_acc},
               {"best_acc", r.best_acc},
               {"best_step", r.best_step},
               {"teacher_acc", eval_accuracy(teacher, rc.remem, test)}};
  write_text(outdir + "/summary.json", summary.dump(2) + "\n");
}

void cmd_sweep(const RunConfig& rc, const std::string& outdir) {
  auto train = make_split(rc, true), test = make_split(rc, false);
  auto ckpts = rc.ckpt_steps.empty() ? std::vector<std::size_t>{rc.finetune.steps} : rc.ckpt_steps;

  std::vector<TeacherVariant> variants;
  for (std::size_t i = 0; i < rc.teacher_lrs.size(); ++i) {
    std::string dir = outdir + "/teacher_lr" + std::to_string(i);
    fs::create_directories(dir);
    FinetuneConfig fc = rc.finetune;
    fc.sched.peak_lr = rc.teacher_lrs[i];
    fc.checkpoint_steps = ckpts;
    fc.checkpoint_dir = dir;
    finetune_with(rc, fc, derive_seed(rc.seed, "sweep_teacher", i),
                  derive_seed(rc.seed, "sweep_train", i), train, test);
    for (std::size_t s : ckpts)
      variants.push_back({s, rc.teacher_lrs[i], dir + "/ckpt_" + std::to_string(s) + ".rmem"});
  }

  EvalProtocol proto;
  proto.student_lrs = rc.student_lrs;
  proto.lambdas = rc.lambdas;
  proto.temperatures = rc.temperatures;
  proto.kd = rc.kd;
  proto.momentum = rc.finetune.momentum;
  proto.weight_decay = rc.finetune.weight_decay;
  proto.student_hidden = rc.student_hidden;
  auto res = run_protocol<float>(proto, rc.vit, rc.remem, variants, train, test, rc.seed);
  write_protocol_csv(outdir + "/sweep.csv", res.rows);

  const auto& b = res.rows[res.best_index];
  Json best{{"ckpt_step", b.ckpt_step},   {"teacher_lr", b.teacher_lr},
            {"student_lr", b.student_lr}, {"lambda", b.lambda},
            {"temperature", b.temperature}, {"teacher_acc", b.teacher_acc},
            {"student_acc", b.student_acc}};
  write_text(outdir + "/best.json", best.dump(2) + "\n");
}

void cmd_prune_sweep(const RunConfig& rc, const std::string& outdir) {
  auto teacher = need_teacher(rc);
  auto test = make_split(rc, false);
  std::uint64_t mi_seed = derive_seed(rc.seed, "mi");
  std::vector<InfoPlanePoint> points;
  for (const std::string kind : {"mlp", "attn"}) {
    for (std::size_t k = 0; k <= rc.vit.n_layers; ++k) {
      ReMemConfig v = rc.remem;
      v.prune_mlp_top_k = kind == "mlp" ? k : 0;
      v.prune_attn_top_k = kind == "attn" ? k : 0;
      points.push_back(info_plane_point(teacher, v, test, rc.mi_updates, mi_seed,
                                        kind + ":" + std::to_string(k)));
    }
  }
  write_info_plane_csv(outdir + "/prune_sweep.csv", points);
}

void cmd_mi(const RunConfig& rc, const std::string& outdir) {
  auto teacher = need_teacher(rc);
  auto test = make_split(rc, false);
  auto p = info_plane_point(teacher, rc.remem, test, rc.mi_updates, derive_seed(rc.seed, "mi"),
                            "model");
  write_info_plane_csv(outdir + "/mi.csv", {p});
  Json summary{{"teacher_err", p.teacher_err},
               {"mi_proxy", p.mi.mi_proxy},
               {"recon_loss", p.mi.recon_loss},
               {"baseline_loss", p.mi.baseline_loss}};
  write_text(outdir + "/summary.json", summary.dump(2) + "\n");
}

void cmd_expertness(const RunConfig& rc, const std::string& outdir) {
  auto teacher = need_teacher(rc);
  auto train = make_split(rc, true);
  auto rows = expertness_profile(teacher, rc.remem, train, rc.expertness_k, rc.seed,
                                 rc.concat_tokens);
  write_expertness_csv(outdir + "/expertness.csv", rows, rc.expertness_k, rc.seed);
}

void cmd_criticality(const RunConfig& rc, const std::string& outdir) {
  auto teacher = need_teacher(rc);
  auto train = make_split(rc, true);
  std::size_t layer = analysis_layer(rc);
  auto sig = criticality(teacher, rc.remem, train, layer);
  write_criticality_csv(outdir + "/criticality.csv", layer, sig);
}

// four fine-tune+distill pipelines sharing seeds, differing only in which
// intervention is on: nothing, reweighting, the sharpness wrapper, or both
void cmd_ablate(const RunConfig& rc, const std::string& outdir) {
  auto train = make_split(rc, true), test = make_split(rc, false);

  double aa = rc.remem.alpha_attn, am = rc.remem.alpha_mlp;
  if (aa == 1.0 && am == 1.0) aa = am = 0.9;  // a neutral config still ablates something
  double rho = rc.finetune.sam_rho > 0.0 ? rc.finetune.sam_rho : rc.sam_rhos.at(0);

  struct Variant {
    std::string name;
    double alpha_attn, alpha_mlp, rho;
  };
  const Variant variants[] = {{"baseline", 1.0, 1.0, 0.0},
                              {"reweight_only", aa, am, 0.0},
                              {"sam_only", 1.0, 1.0, rho},
                              {"combined", aa, am, rho}};

  csv::Writer w(outdir + "/ablate.csv", "variant,student_acc,teacher_acc");
  for (const auto& v : variants) {
    RunConfig vc = rc;
    vc.remem.alpha_attn = v.alpha_attn;
    vc.remem.alpha_mlp = v.alpha_mlp;
    vc.remem.prune_attn_top_k = vc.remem.prune_mlp_top_k = 0;
    FinetuneConfig fc = vc.finetune;
    fc.sam_rho = v.rho;
    auto t = finetune_with(vc, fc, rc.seed, rc.seed, train, test);

    auto student = make_student<float>(train.image_elems(), train.n_classes, rc.seed,
                                       rc.student_hidden);
    auto ps = params(student);
    Schedule sched{rc.student_lr, 0, rc.kd.effective_steps()};
    auto opt = make_sgd(ps, sched, float(rc.finetune.momentum), float(rc.finetune.weight_decay));
    // the reweighting is part of the teacher's function, so distillation
    // forwards it the same way fine-tuning did
    auto r = train_student(student, t.model, vc.remem, train, test, rc.kd, opt, rc.seed);
    w.row({v.name, csv::num(r.best_acc), csv::num(t.run.final_acc)});
  }
}

}  // namespace

int run_cli(const CliArgs& args) {
  auto started = std::chrono::steady_clock::now();
  try {
    if (args.threads < 1) throw ConfigError("--threads must be at least 1");
    kernels::set_max_threads(args.threads);
    if (std::find(kSubcommands.begin(), kSubcommands.end(), args.subcommand) ==
        kSubcommands.end()) {
      std::string known;
      for (const auto& s : kSubcommands) known += (known.empty() ? "" : ", ") + s;
      throw ConfigError("unknown subcommand '" + args.subcommand + "' (expected one of " + known +
                        ")");
    }

    Json user = args.config_path.empty() ? Json::object() : load_config(args.config_path);
    Json resolved = resolve_config(user);
    for (const auto& o : args.overrides) apply_override(resolved, o);
    if (args.seed) resolved["seed"] = *args.seed;
    RunConfig rc = make_run_config(resolved);

    std::error_code ec;
    fs::create_directories(rc.output_dir, ec);
    if (ec) throw IoError("cannot create output dir " + rc.output_dir + ": " + ec.message());

    std::uint64_t hash = fnv1a64(serialize_config(resolved));
    if (!rc.checkpoint.empty()) hash = fnv1a64(slurp(rc.checkpoint), hash);

    if (args.subcommand == "finetune") cmd_finetune(rc, rc.output_dir);
    else if (args.subcommand == "distill") cmd_distill(rc, rc.output_dir);
    else if (args.subcommand == "sweep") cmd_sweep(rc, rc.output_dir);
    else if (args.subcommand == "prune-sweep") cmd_prune_sweep(rc, rc.output_dir);
    else if (args.subcommand == "mi") cmd_mi(rc, rc.output_dir);
    else if (args.subcommand == "expertness") cmd_expertness(rc, rc.output_dir);
    else if (args.subcommand == "criticality") cmd_criticality(rc, rc.output_dir);
    else cmd_ablate(rc, rc.output_dir);

    auto wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::steady_clock::now() - started)
                       .count();
    Json run{{"subcommand", args.subcommand}, {"seed", rc.seed},
             {"threads", args.threads},       {"wall_ms", wall_ms},
             {"input_hash", hex64(hash)},     {"config", resolved}};
    write_text(rc.output_dir + "/run.json", run.dump(2) + "\n");
    return 0;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 4;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const DomainError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const DegenerateError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const Error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace remem
