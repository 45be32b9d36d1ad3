// Adversarially trains a small HFDR model on the synthetic two-class data,
// then prints robust accuracy and a short frequency sweep.
#include <iostream>

#include "hfdr/hfdr.hpp"

int main(int argc, char** argv) {
  using namespace hfdr;
  const int epochs = argc > 1 ? std::stoi(argv[1]) : 3;

  auto train = synth_freq_dataset<float>(64, 16, 1);
  auto test = synth_freq_dataset<float>(32, 16, 2);

  ModelSpec spec;
  spec.num_classes = 2;
  spec.input_shape = {3, 16, 16};
  spec.width = 8;
  spec.hfdr_enabled = true;
  Model<float> model = build_model<float>(spec, 0);

  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 32;
  cfg.lr = 0.05;
  cfg.lr_milestones = {epochs - 1};
  cfg.attack = AttackConfig::make_pgd(8.0 / 255.0, 3, 4.0 / 255.0);
  cfg.augment = false;

  SgdState<float> opt;
  Rng rng(cfg.seed);
  fit(model, train, cfg, opt, rng, 0, [](const EpochStats& s) {
    std::cout << "epoch " << s.epoch << "  loss " << s.loss_total << "  far " << s.loss_far << "  acc "
              << s.train_acc << "\n";
  });

  const EvalReport rep = evaluate_robustness(model, test, {AttackConfig::make_fgsm(8.0 / 255.0),
                                                           AttackConfig::make_pgd(8.0 / 255.0, 10)});
  for (const auto& r : rep.rows) std::cout << r.attack << ": " << r.accuracy << "\n";

  const SweepReport sw = frequency_sweep(model, test, StageId::conv1, {0.1, 0.5, 1.0}, {0.0, 8.0 / 255.0});
  for (std::size_t e = 0; e < sw.epsilons.size(); ++e)
    for (std::size_t k = 0; k < sw.ratios.size(); ++k)
      std::cout << "eps " << sw.epsilons[e] << " ratio " << sw.ratios[k] << " acc " << sw.accuracy[e][k] << "\n";
}
