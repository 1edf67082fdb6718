// Experiment driver: dataset generation, single training runs, and suite
// comparisons, all reproducible from flags + seed alone.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dualteacher/checkpoint.hpp"
#include "dualteacher/dataset_io.hpp"
#include "dualteacher/experiment.hpp"
#include "dualteacher/phantom.hpp"
#include "dualteacher/trainer.hpp"

namespace dt = dualteacher;

namespace {

struct GenArgs {
  std::uint64_t seed = 0;
  int n_source = 40;
  int n_target = 40;
  int folds = 4;
  double labeled_frac = 1.0 / 3.0;
  int size = 64;
  int classes = 5;
  std::string out;
};

// Evenly spaced per-class means when the class count deviates from the
// 5-class defaults; both domains stay ascending but span different ranges,
// keeping the gap appearance-only.
dt::PhantomSpec spec_for(const GenArgs& a) {
  dt::PhantomSpec spec;
  spec.seed = a.seed;
  spec.image_size = a.size;
  spec.num_classes = a.classes;
  if (a.classes != 5) {
    spec.intensity_table_target.clear();
    spec.intensity_table_source.clear();
    for (int c = 0; c < a.classes; ++c) {
      const double f = a.classes == 1 ? 0.0 : static_cast<double>(c) / (a.classes - 1);
      spec.intensity_table_target.push_back(0.05 + 0.80 * f);
      spec.intensity_table_source.push_back(0.35 + 0.60 * f);
    }
  }
  return spec;
}

int cmd_generate_data(const GenArgs& a) {
  const dt::PhantomSpec spec = spec_for(a);
  const auto samples = dt::generate_dataset(spec, a.n_source, a.n_target);
  const auto folds = dt::make_folds(samples, spec, a.folds, a.labeled_frac, a.seed);
  for (const auto& bundle : folds) {
    const std::string dir = a.out + "/fold" + std::to_string(bundle.fold_index);
    const std::string manifest = dt::save_dataset(bundle, dir);
    std::cout << "fold " << bundle.fold_index << ": " << manifest << " (d_s=" << bundle.d_s.size()
              << " d_t=" << bundle.d_t.size() << " d_u=" << bundle.d_u.size()
              << " val=" << bundle.val.size() << ")\n";
  }
  return 0;
}

struct TrainArgs {
  std::string method;
  std::string data;
  int fold = 0;
  std::uint64_t seed = 0;
  int epochs = 50;
  std::string out;
  std::string resume;
  dt::TrainConfig overrides;  // filled from flags
  bool no_augment = false;
  std::string norm = "group";
  std::string translator = "histogram_match";
};

void add_hyper_flags(CLI::App* cmd, TrainArgs& a) {
  auto& o = a.overrides;
  cmd->add_option("--lr", o.learning_rate, "Adam learning rate")->capture_default_str();
  cmd->add_option("--batch-s", o.batch_s, "source batch size")->capture_default_str();
  cmd->add_option("--batch-t", o.batch_t, "labeled-target batch size")->capture_default_str();
  cmd->add_option("--batch-u", o.batch_u, "unlabeled-target batch size")->capture_default_str();
  cmd->add_option("--lambda-kd", o.loss_weights.lambda_kd, "distillation weight")
      ->capture_default_str();
  cmd->add_option("--lambda-con-max", o.loss_weights.lambda_con_max,
                  "consistency weight at full ramp")
      ->capture_default_str();
  cmd->add_option("--t-max", o.loss_weights.t_max,
                  "consistency ramp length in epochs (independent of --epochs so "
                  "resumed runs keep the same schedule)")
      ->capture_default_str();
  cmd->add_option("--noise-sigma", o.noise_sigma, "perturbation std-dev for consistency")
      ->capture_default_str();
  cmd->add_option("--ema-alpha", o.ema_alpha, "EMA decay for the intra-domain teacher")
      ->capture_default_str();
  cmd->add_option("--pseudo-threshold", o.pseudo_label_threshold,
                  "confidence cutoff for pseudo-label pixels")
      ->capture_default_str();
  cmd->add_option("--base-channels", o.net.base_channels, "U-Net width")->capture_default_str();
  cmd->add_option("--depth", o.net.depth, "U-Net downsampling levels")->capture_default_str();
  cmd->add_option("--norm", a.norm, "normalization layer: group|batch")->capture_default_str();
  cmd->add_option("--translator", a.translator, "appearance alignment: histogram_match|identity")
      ->capture_default_str();
  cmd->add_flag("--ema-after-student", o.ema_after_student,
                "update the EMA teacher after the student step instead of before");
  cmd->add_flag("--no-augment", a.no_augment, "disable affine augmentation of labeled batches");
}

dt::TrainConfig build_config(const TrainArgs& a) {
  dt::TrainConfig cfg = a.overrides;
  cfg.method = dt::method_from_string(a.method);
  cfg.seed = a.seed;
  cfg.epochs = a.epochs;
  cfg.augment_enabled = !a.no_augment;
  cfg.net.norm = dt::norm_from_string(a.norm);
  cfg.translator_kind = dt::translator_kind_from_string(a.translator);
  return cfg;
}

int cmd_train(const TrainArgs& a) {
  const dt::DatasetBundle bundle = dt::load_dataset(a.data + "/fold" + std::to_string(a.fold));
  const dt::TrainConfig cfg = build_config(a);
  const dt::CellResult res = dt::run_cell(cfg, bundle, a.out, a.resume);
  std::cout << "method " << a.method << " fold " << a.fold << " seed " << a.seed << ": "
            << res.final.epoch << " epochs\n"
            << "  final val mean dice " << res.final.val.mean_dice << "\n"
            << "  best  val mean dice " << res.best.val.mean_dice << " (epoch " << res.best.epoch
            << ")\n"
            << "  artifacts in " << a.out << "\n";
  return 0;
}

struct CompareArgs {
  std::string suite;
  std::string data;
  std::string out;
  std::vector<int> folds = {0};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  bool existing_only = false;
  TrainArgs base;  // method/seed ignored; carries epochs + hyper flags
};

int cmd_compare(const CompareArgs& a) {
  dt::TrainConfig base = a.base.overrides;
  base.epochs = a.base.epochs;
  base.augment_enabled = !a.base.no_augment;
  base.net.norm = dt::norm_from_string(a.base.norm);
  base.translator_kind = dt::translator_kind_from_string(a.base.translator);

  const dt::SuiteReport rep =
      dt::run_suite(a.suite, a.data, a.folds, a.seeds, base, a.out, a.existing_only);
  std::cout << rep.table_text;
  dt::detail::write_text_file(a.out + "/" + a.suite + "_table.txt", rep.table_text);
  dt::write_metrics_csv(a.out + "/" + a.suite + "_runs.csv", rep.records);
  std::cout << "wrote " << a.out << "/" << a.suite << "_table.txt and " << a.suite << "_runs.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-teacher semi-supervised domain adaptation on synthetic phantoms"};
  app.require_subcommand(1);

  GenArgs gen;
  CLI::App* g = app.add_subcommand("generate-data", "generate a phantom dataset with k folds");
  g->add_option("--seed", gen.seed, "master seed")->capture_default_str();
  g->add_option("--n-source", gen.n_source, "labeled source images")->capture_default_str();
  g->add_option("--n-target", gen.n_target, "target images (split into folds)")
      ->capture_default_str();
  g->add_option("--folds", gen.folds, "cross-validation folds")->capture_default_str();
  g->add_option("--labeled-frac", gen.labeled_frac,
                "fraction of non-validation targets that keep labels")
      ->capture_default_str();
  g->add_option("--size", gen.size, "image side length")->capture_default_str();
  g->add_option("--classes", gen.classes, "classes incl. background (2-7)")
      ->capture_default_str();
  g->add_option("--out", gen.out, "output directory")->required();

  TrainArgs tr;
  CLI::App* t = app.add_subcommand("train", "train one method on one fold");
  t->add_option("--method", tr.method,
                "supervised_only|joint_training|gan_baseline|pseudo_label_baseline|"
                "mean_teacher|no_inter_teacher|no_intra_teacher|dual_teacher")
      ->required();
  t->add_option("--data", tr.data, "dataset directory from generate-data")->required();
  t->add_option("--fold", tr.fold, "fold index")->capture_default_str();
  t->add_option("--seed", tr.seed, "training seed")->capture_default_str();
  t->add_option("--epochs", tr.epochs, "total epochs (also the resume target)")
      ->capture_default_str();
  t->add_option("--out", tr.out, "run output directory")->required();
  t->add_option("--resume", tr.resume, "checkpoint.json to continue from");
  add_hyper_flags(t, tr);

  CompareArgs cmp;
  CLI::App* c = app.add_subcommand(
      "compare", "run or collect a method suite and print the aggregate table");
  c->add_option("--suite", cmp.suite, "table1|table2")->required();
  c->add_option("--data", cmp.data, "dataset directory from generate-data")->required();
  c->add_option("--out", cmp.out, "experiment root (one subdirectory per cell)")->required();
  c->add_option("--folds", cmp.folds, "fold indices")->delimiter(',')->capture_default_str();
  c->add_option("--seeds", cmp.seeds, "training seeds")->delimiter(',')->capture_default_str();
  c->add_option("--epochs", cmp.base.epochs, "epochs per run")->capture_default_str();
  c->add_flag("--existing-only", cmp.existing_only,
              "never train; fail listing any missing (method, fold, seed) cell");
  add_hyper_flags(c, cmp.base);

  try {
    app.parse(argc, argv);
    if (g->parsed()) return cmd_generate_data(gen);
    if (t->parsed()) return cmd_train(tr);
    if (c->parsed()) return cmd_compare(cmp);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const dt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const dt::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
