#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "remem/config.hpp"
#include "remem/runner.hpp"

using namespace remem;
namespace fs = std::filesystem;

namespace {

const std::string kRoot = "/tmp/remem_cli_test";

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(bool(f));
  std::stringstream buf;
  buf << f.rdbuf();
  return buf.str();
}

std::vector<std::string> csv_lines(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(bool(f));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) lines.push_back(line);
  return lines;
}

int run_cli_proc(const std::string& args, std::string* err = nullptr) {
  std::string err_path = kRoot + "/stderr.txt";
  std::string cmd = std::string(REMEM_CLI_BIN) + " " + args + " >/dev/null 2>" + err_path;
  int rc = std::system(cmd.c_str());
  if (err) *err = slurp(err_path);
  REQUIRE(WIFEXITED(rc));
  return WEXITSTATUS(rc);
}

// a configuration small enough that every subcommand finishes in seconds
Json tiny_config() {
  return Json{
      {"dataset",
       {{"n_classes", 2},
        {"image_size", 8},
        {"samples_per_class", 6},
        {"test_samples_per_class", 4},
        {"sigma", 0.05}}},
      {"vit", {{"patch_size", 4}, {"d_embed", 8}, {"d_mlp", 16}, {"n_heads", 2}, {"n_layers", 2}}},
      {"optimizer", {{"batch", 8}}},
      {"schedule",
       {{"peak_lr", 0.1}, {"warmup", 2}, {"steps", 12}, {"eval_every", 6}}},
      {"distill", {{"steps", 10}, {"eval_every", 5}, {"student_hidden", 8}}},
      {"mi", {{"updates", 30}}},
      {"expertness", {{"k", 2}}},
      {"seed", 5},
  };
}

std::string write_config(const Json& j, const std::string& name) {
  std::string path = kRoot + "/" + name;
  std::ofstream f(path);
  f << j.dump(2);
  REQUIRE(bool(f));
  return path;
}

void reset_dir(const std::string& path) {
  fs::remove_all(path);
  fs::create_directories(path);
}

// fine-tunes once into kRoot/teacher and returns the saved model path
std::string teacher_checkpoint() {
  static std::string path;
  if (!path.empty()) return path;
  auto cfg = tiny_config();
  cfg["output_dir"] = kRoot + "/teacher";
  REQUIRE(run_cli_proc("finetune --config " + write_config(cfg, "teacher.json")) == 0);
  path = kRoot + "/teacher/model_final.rmem";
  REQUIRE(fs::exists(path));
  return path;
}

}  // namespace

TEST_CASE("config defaults resolve, reject unknown keys, and round-trip") {
  fs::create_directories(kRoot);
  auto d1 = serialize_config(resolve_config(Json::object()));
  auto d2 = serialize_config(resolve_config(Json::object()));
  CHECK(d1 == d2);
  CHECK(d1 == serialize_config(Json::parse(d1)));  // parse-serialize fixpoint

  auto rc = make_run_config(resolve_config(Json::object()));
  CHECK(rc.lambdas == std::vector<double>{0.1, 0.5, 0.9});
  CHECK(rc.temperatures == std::vector<double>{1.0, 2.0, 4.0});
  CHECK(rc.sam_rhos == std::vector<double>{0.5, 0.05, 0.005});
  CHECK(rc.mixup_alphas == std::vector<double>{0.8, 0.9});
  CHECK(rc.finetune.steps <= kMaxFinetuneSteps);
  CHECK(rc.kd.effective_steps() <= kMaxDistillSteps);

  CHECK_THROWS_WITH_AS(resolve_config(Json{{"optimizre", Json::object()}}),
                       doctest::Contains("optimizre"), ConfigError);
  CHECK_THROWS_WITH_AS(resolve_config(Json{{"optimizer", {{"momentumm", 0.5}}}}),
                       doctest::Contains("optimizer.momentumm"), ConfigError);
  CHECK_THROWS_AS(resolve_config(Json{{"optimizer", {{"momentum", "fast"}}}}), ConfigError);
  CHECK_THROWS_AS(resolve_config(Json{{"optimizer", 3}}), ConfigError);

  // budget caps
  auto over = resolve_config(Json::object());
  over["schedule"]["steps"] = 5000;
  CHECK_THROWS_AS(make_run_config(over), ConfigError);
  over = resolve_config(Json::object());
  over["distill"]["steps"] = 500;
  over["distill"]["algorithm"] = "patient";  // tenfold budget factor
  CHECK_THROWS_AS(make_run_config(over), ConfigError);
}

TEST_CASE("overrides follow dot paths and keep types") {
  auto cfg = resolve_config(Json::object());
  apply_override(cfg, "schedule.steps=100");
  CHECK(cfg["schedule"]["steps"] == 100);
  apply_override(cfg, "distill.algorithm=dist");
  CHECK(cfg["distill"]["algorithm"] == "dist");
  apply_override(cfg, "protocol.lambdas=[0.3,0.7]");
  CHECK(cfg["protocol"]["lambdas"] == Json({0.3, 0.7}));
  apply_override(cfg, "remem.alpha_mlp=0.9");
  CHECK(cfg["remem"]["alpha_mlp"] == 0.9);

  CHECK_THROWS_WITH_AS(apply_override(cfg, "schedule.stepz=9"), doctest::Contains("stepz"),
                       ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "schedule.steps"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "schedule=9"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "schedule.steps=[1]"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "seed.hi=1"), ConfigError);
}

TEST_CASE("explicitly neutral settings reproduce the plain run") {
  reset_dir(kRoot + "/neutral_a");
  reset_dir(kRoot + "/neutral_b");
  auto cfg = write_config(tiny_config(), "tiny.json");

  CHECK(run_cli_proc("finetune --config " + cfg + " --set output_dir=" + kRoot + "/neutral_a") ==
        0);
  CHECK(run_cli_proc("finetune --config " + cfg + " --set output_dir=" + kRoot + "/neutral_b" +
                     " --set remem.alpha_attn=1.0 --set remem.alpha_mlp=1.0" +
                     " --set remem.prune_attn_top_k=0 --set remem.prune_mlp_top_k=0" +
                     " --set optimizer.sam_rho=0.0") == 0);

  CHECK(slurp(kRoot + "/neutral_a/finetune.csv") == slurp(kRoot + "/neutral_b/finetune.csv"));
  CHECK(slurp(kRoot + "/neutral_a/summary.json") == slurp(kRoot + "/neutral_b/summary.json"));
  CHECK(slurp(kRoot + "/neutral_a/model_final.rmem") ==
        slurp(kRoot + "/neutral_b/model_final.rmem"));
}

TEST_CASE("replay from the echoed config is bit-identical") {
  reset_dir(kRoot + "/first");
  reset_dir(kRoot + "/again");
  auto cfg = write_config(tiny_config(), "tiny.json");
  CHECK(run_cli_proc("finetune --config " + cfg + " --set output_dir=" + kRoot + "/first" +
                     " --set optimizer.sam_rho=0.05") == 0);

  auto run = Json::parse(slurp(kRoot + "/first/run.json"));
  Json echoed = run.at("config");
  echoed["output_dir"] = kRoot + "/again";
  write_config(echoed, "replay.json");
  CHECK(run_cli_proc("finetune --config " + kRoot + "/replay.json --threads 1") == 0);

  CHECK(slurp(kRoot + "/first/finetune.csv") == slurp(kRoot + "/again/finetune.csv"));
  CHECK(slurp(kRoot + "/first/summary.json") == slurp(kRoot + "/again/summary.json"));
  CHECK(slurp(kRoot + "/first/model_final.rmem") == slurp(kRoot + "/again/model_final.rmem"));
}

TEST_CASE("error categories map to exit codes") {
  fs::create_directories(kRoot);
  auto cfg = write_config(tiny_config(), "tiny.json");
  std::string err;

  CHECK(run_cli_proc("warp --config " + cfg, &err) == 2);
  CHECK(err.find("unknown subcommand") != std::string::npos);

  auto bad = tiny_config();
  bad["optimzer"] = Json{{"batch", 4}};
  CHECK(run_cli_proc("finetune --config " + write_config(bad, "bad_key.json"), &err) == 2);
  CHECK(err.find("optimzer") != std::string::npos);

  std::ofstream(kRoot + "/broken.json") << "{ not json";
  CHECK(run_cli_proc("finetune --config " + kRoot + "/broken.json", &err) == 2);

  CHECK(run_cli_proc("finetune --config " + cfg + " --set schedule.steps=5000", &err) == 2);

  // analysis without a teacher snapshot, and with a missing file
  CHECK(run_cli_proc("mi --config " + cfg + " --set output_dir=" + kRoot + "/mi_err", &err) == 4);
  CHECK(err.find("checkpoint") != std::string::npos);
  CHECK(run_cli_proc("mi --config " + cfg + " --set output_dir=" + kRoot + "/mi_err" +
                         " --set checkpoint=" + kRoot + "/nope.rmem",
                     &err) == 4);

  CHECK(run_cli_proc("finetune --config " + kRoot + "/does_not_exist.json", &err) == 4);
}

TEST_CASE("prune sweep boundary row matches the plain probe") {
  auto ckpt = teacher_checkpoint();
  reset_dir(kRoot + "/mi");
  reset_dir(kRoot + "/psweep");
  auto cfg = write_config(tiny_config(), "tiny.json");

  CHECK(run_cli_proc("mi --config " + cfg + " --set checkpoint=" + ckpt +
                     " --set output_dir=" + kRoot + "/mi") == 0);
  CHECK(run_cli_proc("prune-sweep --config " + cfg + " --set checkpoint=" + ckpt +
                     " --set output_dir=" + kRoot + "/psweep") == 0);

  auto mi = csv_lines(kRoot + "/mi/mi.csv");
  auto ps = csv_lines(kRoot + "/psweep/prune_sweep.csv");
  REQUIRE(mi.size() == 2);
  REQUIRE(ps.size() == 1 + 2 * 3);  // header + (mlp,attn) x k in 0..2
  CHECK(ps[0] == "tag,teacher_err,mi_proxy,baseline_loss,d_embed,seed");

  auto after_tag = [](const std::string& line) { return line.substr(line.find(',')); };
  CHECK(ps[1].substr(0, 6) == "mlp:0,");
  CHECK(after_tag(ps[1]) == after_tag(mi[1]));   // unpruned row equals the mi run
  CHECK(ps[4].substr(0, 7) == "attn:0,");
  CHECK(after_tag(ps[4]) == after_tag(mi[1]));
  for (std::size_t i = 1; i < ps.size(); ++i) CHECK(ps[i].find("nan") == std::string::npos);
}

TEST_CASE("sweep grid emits one row per cell and a best summary") {
  reset_dir(kRoot + "/sweep");
  auto cfg = tiny_config();
  cfg["protocol"] = Json{{"ckpt_steps", {12}},
                         {"teacher_lrs", {0.1}},
                         {"student_lrs", {0.05}},
                         {"lambdas", {0.1, 0.9}},
                         {"temperatures", {1.0, 2.0}}};
  cfg["output_dir"] = kRoot + "/sweep";
  CHECK(run_cli_proc("sweep --config " + write_config(cfg, "sweep.json")) == 0);

  auto rows = csv_lines(kRoot + "/sweep/sweep.csv");
  REQUIRE(rows.size() == 5);  // header + 2x2 grid
  CHECK(rows[0] ==
        "ckpt_step,teacher_lr,student_lr,lambda,temperature,teacher_acc,student_acc,status");

  double best_seen = -1.0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i].substr(rows[i].rfind(',') + 1) == "ok");
    std::stringstream ss(rows[i]);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    best_seen = std::max(best_seen, std::stod(cells[6]));
  }
  auto best = Json::parse(slurp(kRoot + "/sweep/best.json"));
  CHECK(best.at("student_acc").get<double>() == doctest::Approx(best_seen).epsilon(1e-12));
  CHECK(fs::exists(kRoot + "/sweep/teacher_lr0/ckpt_12.rmem"));
}

TEST_CASE("analysis subcommands write their tables") {
  auto ckpt = teacher_checkpoint();
  auto cfg = write_config(tiny_config(), "tiny.json");

  reset_dir(kRoot + "/exp");
  CHECK(run_cli_proc("expertness --config " + cfg + " --set checkpoint=" + ckpt +
                     " --set output_dir=" + kRoot + "/exp") == 0);
  auto exp = csv_lines(kRoot + "/exp/expertness.csv");
  REQUIRE(exp.size() == 3);  // header + one row per layer
  CHECK(exp[0] == "layer,expertness,k,n_neurons,n_inputs,seed");

  reset_dir(kRoot + "/crit");
  CHECK(run_cli_proc("criticality --config " + cfg + " --set checkpoint=" + ckpt +
                     " --set output_dir=" + kRoot + "/crit") == 0);
  auto crit = csv_lines(kRoot + "/crit/criticality.csv");
  REQUIRE(crit.size() == 17);  // header + d_mlp rows
  CHECK(crit[0] == "layer,neuron,sigma");
  CHECK(crit[1].substr(0, 2) == "1,");  // defaults analyze the top layer

  reset_dir(kRoot + "/dist");
  CHECK(run_cli_proc("distill --config " + cfg + " --set checkpoint=" + ckpt +
                     " --set output_dir=" + kRoot + "/dist") == 0);
  auto dist = csv_lines(kRoot + "/dist/distill.csv");
  REQUIRE(dist.size() == 11);  // header + one row per step
  CHECK(dist[0] == "step,loss,test_acc");
  auto summary = Json::parse(slurp(kRoot + "/dist/summary.json"));
  CHECK(summary.at("best_acc").get<double>() >= summary.at("final_acc").get<double>() - 1e-12);

  // run.json names the subcommand and echoes the applied overrides
  auto run = Json::parse(slurp(kRoot + "/dist/run.json"));
  CHECK(run.at("subcommand") == "distill");
  CHECK(run.at("config").at("checkpoint") == ckpt);
  CHECK(run.at("config").at("distill").at("steps") == 10);
}

TEST_CASE("ablation grid pairs each intervention with a shared baseline") {
  auto cfg = tiny_config();
  cfg["distill"]["steps"] = 8;
  cfg["schedule"]["steps"] = 10;
  cfg["output_dir"] = kRoot + "/ablate";
  reset_dir(kRoot + "/ablate");
  CHECK(run_cli_proc("ablate --config " + write_config(cfg, "ablate.json")) == 0);

  auto rows = csv_lines(kRoot + "/ablate/ablate.csv");
  REQUIRE(rows.size() == 5);
  CHECK(rows[0] == "variant,student_acc,teacher_acc");
  CHECK(rows[1].substr(0, 9) == "baseline,");
  CHECK(rows[2].substr(0, 14) == "reweight_only,");
  CHECK(rows[3].substr(0, 9) == "sam_only,");
  CHECK(rows[4].substr(0, 9) == "combined,");
}

TEST_CASE("subcommands leave their inputs untouched") {
  auto ckpt = teacher_checkpoint();
  auto cfg_path = write_config(tiny_config(), "tiny.json");
  auto ckpt_before = slurp(ckpt);
  auto cfg_before = slurp(cfg_path);

  reset_dir(kRoot + "/ro");
  CHECK(run_cli_proc("mi --config " + cfg_path + " --set checkpoint=" + ckpt +
                     " --set output_dir=" + kRoot + "/ro --set mi.updates=10") == 0);

  CHECK(slurp(ckpt) == ckpt_before);
  CHECK(slurp(cfg_path) == cfg_before);
}
