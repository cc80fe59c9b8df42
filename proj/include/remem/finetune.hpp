#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "remem/data.hpp"
#include "remem/distill.hpp"
#include "remem/optim.hpp"
#include "remem/snapshot.hpp"
#include "remem/vit.hpp"

namespace remem {

struct FinetuneConfig {
  Schedule sched;
  std::size_t steps = 500;
  std::size_t batch = 16;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double sam_rho = 0.0;
  std::size_t eval_every = 50;
  std::vector<std::size_t> checkpoint_steps;
  std::string checkpoint_dir;

  void validate() const {
    sched.validate();
    if (steps == 0 || batch == 0 || eval_every == 0)
      throw ParamError("finetune steps, batch, and eval_every must be positive");
    if (sched.total_steps < steps)
      throw ParamError("schedule covers " + std::to_string(sched.total_steps) +
                       " steps, finetune needs " + std::to_string(steps));
    if (sam_rho < 0.0) throw ParamError("sam rho must be non-negative");
    for (std::size_t s : checkpoint_steps)
      if (s == 0 || s > steps)
        throw ParamError("checkpoint step " + std::to_string(s) + " outside 1.." +
                         std::to_string(steps));
    if (!checkpoint_steps.empty() && checkpoint_dir.empty())
      throw ParamError("checkpoint steps listed without a checkpoint directory");
  }
};

template <class T>
struct FinetuneRun {
  std::vector<double> losses;
  std::vector<std::pair<std::size_t, double>> evals;  // (step, test accuracy)
  double best_acc = 0.0;
  std::size_t best_step = 0;
  double final_acc = 0.0;
  std::vector<std::pair<std::size_t, std::string>> checkpoints;  // (step, path)
};

template <class T>
VitModel<T> clone_model(VitModel<T>& m) {
  VitModel<T> c = init_vit<T>(m.cfg, 0);
  auto src = params(m);
  auto dst = params(c);
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].tensor.data() = src[i].tensor.data();
  return c;
}

// Supervised fine-tuning with momentum SGD under the optional sharpness-aware
// wrapper. With a LoRA state the base weights stay frozen and only the
// adapters move; checkpoints then store the merged network. Batch scheduling
// follows the same "order"-stream contract as the student trainer.
template <class T>
FinetuneRun<T> finetune_teacher(VitModel<T>& model, const ReMemConfig& remem,
                                std::type_identity_t<LoraState<T>*> lora, const Dataset& train,
                                const Dataset& test, const FinetuneConfig& cfg,
                                std::uint64_t seed) {
  cfg.validate();
  remem.validate(model.cfg.n_layers);
  train.validate();
  test.validate();
  if (train.n_classes != model.cfg.n_classes)
    throw ShapeError("dataset classes do not match the model head");

  auto ps = lora ? params(*lora) : params(model);
  auto opt = make_sgd(ps, cfg.sched, T(cfg.momentum), T(cfg.weight_decay));
  SamConfig sam{cfg.sam_rho};

  auto all_images = images_of<T>(train, all_indices(train));
  auto order_rng = make_rng(derive_seed(seed, "order"));
  std::vector<std::size_t> order(train.n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::size_t cursor = train.n, elems = train.image_elems();

  FinetuneRun<T> res;
  auto record_eval = [&](std::size_t step) {
    double acc = eval_accuracy(model, remem, test, lora);
    res.evals.emplace_back(step, acc);
    if (res.evals.size() == 1 || acc > res.best_acc) {
      res.best_acc = acc;
      res.best_step = step;
    }
  };
  auto dump_checkpoint = [&](std::size_t step) {
    std::string path = cfg.checkpoint_dir + "/ckpt_" + std::to_string(step) + ".rmem";
    if (lora) {
      auto merged = clone_model(model);
      lora_merge(merged, *lora);
      save_vit(path, merged);
    } else {
      save_vit(path, model);
    }
    res.checkpoints.emplace_back(step, path);
  };

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    if (cursor >= train.n) {
      std::shuffle(order.begin(), order.end(), order_rng);
      cursor = 0;
    }
    std::size_t b = std::min(cfg.batch, train.n - cursor);
    std::vector<T> img(b * elems);
    std::vector<int> lab(b);
    for (std::size_t i = 0; i < b; ++i) {
      std::size_t src = order[cursor + i];
      std::copy_n(all_images.data().data() + src * elems, elems, img.data() + i * elems);
      lab[i] = train.labels[src];
    }
    cursor += b;
    auto batch = Tensor<T>::from({b, train.channels, train.height, train.width}, std::move(img));

    auto loss_fn = [&]() -> T {
      zero_grads(ps);
      Tape<T> tape;
      typename Tape<T>::Scope scope(tape);
      auto loss = cross_entropy(forward(model, remem, batch, lora).logits, lab);
      tape.backward(loss);
      return loss.item();
    };
    res.losses.push_back(double(sam_step(sam, opt, ps, loss_fn, step)));
    if (step % cfg.eval_every == 0 || step == cfg.steps) record_eval(step);
    if (std::find(cfg.checkpoint_steps.begin(), cfg.checkpoint_steps.end(), step) !=
        cfg.checkpoint_steps.end())
      dump_checkpoint(step);
  }
  res.final_acc = res.evals.back().second;
  return res;
}

}  // namespace remem
