// rfk: dataset generation, training, evaluation, ablations and feature dumps.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rfm/commands.hpp"

namespace {

struct ConfigFlags {
  std::string file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string data;

  void attach(CLI::App* app, bool with_data = true) {
    app->add_option("--config", file, "key=value config file");
    app->add_option("--set", sets, "override, key=value (repeatable)");
    app->add_option("--seed", seed, "random seed (default: RFK_SEED or 0)");
    if (with_data) app->add_option("--data", data, "dataset root (data.root)");
  }

  // Precedence: defaults < config file < --set < dedicated flags.
  rfm::RunConfig resolve() const {
    rfm::RunConfig cfg;
    if (!file.empty()) cfg.merge_file(file);
    for (const auto& kv : sets) cfg.merge_text(kv, "--set");
    if (seed) cfg.set("seed", std::to_string(*seed));
    if (!data.empty()) cfg.set("data.root", data);
    return cfg;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Referring camouflaged object detection at desk scale"};
  app.require_subcommand(1);

  ConfigFlags gen_flags;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
  gen_flags.attach(gen, false);
  gen->add_option("--out", gen_out, "output directory")->required();

  ConfigFlags train_flags;
  std::string train_out, fusion, layers, windows;
  std::optional<int> refs, steps;
  auto* train = app.add_subcommand("train", "train one model");
  train_flags.attach(train);
  train->add_option("--out", train_out, "run directory")->required();
  train->add_option("--fusion", fusion, "none|image|text")->check(CLI::IsMember({"none", "image", "text"}));
  train->add_option("--refs", refs, "number of reference images K");
  train->add_option("--layers", layers, "fused levels, e.g. 2,3,4 or none");
  train->add_option("--windows", windows, "window sizes for levels 2,3,4 or auto");
  train->add_option("--steps", steps, "training steps");

  std::string eval_ckpt, eval_preds, eval_data, eval_split = "test", eval_out;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or stored predictions");
  auto* ck = eval->add_option("--ckpt", eval_ckpt, "checkpoint file");
  auto* pr = eval->add_option("--preds", eval_preds, "directory of <name>.pgm probability maps");
  ck->excludes(pr);
  eval->add_option("--data", eval_data, "dataset root")->required();
  eval->add_option("--split", eval_split, "train|test");
  eval->add_option("--out", eval_out, "report directory")->required();

  ConfigFlags ablate_flags;
  std::string axis, ablate_out;
  auto* ablate = app.add_subcommand("ablate", "train and evaluate every arm of an ablation axis");
  ablate_flags.attach(ablate);
  ablate->add_option("--axis", axis, "fusion|refs|layers|windows")
      ->required()
      ->check(CLI::IsMember({"fusion", "refs", "layers", "windows"}));
  ablate->add_option("--out", ablate_out, "output directory")->required();

  std::string pred_ckpt, pred_data, pred_split = "test", pred_out;
  auto* predict = app.add_subcommand("predict", "write probability maps as PGM");
  predict->add_option("--ckpt", pred_ckpt)->required();
  predict->add_option("--data", pred_data)->required();
  predict->add_option("--split", pred_split);
  predict->add_option("--out", pred_out)->required();

  std::string dump_ckpt, dump_data, dump_split = "test", dump_image, dump_out;
  auto* dump = app.add_subcommand("dump-features", "per-level feature heatmaps of one image");
  dump->add_option("--ckpt", dump_ckpt)->required();
  dump->add_option("--data", dump_data)->required();
  dump->add_option("--split", dump_split);
  dump->add_option("--image", dump_image, "image name, e.g. c0_000")->required();
  dump->add_option("--out", dump_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      rfm::cli::cmd_gen(gen_flags.resolve(), gen_out, std::cout);
    } else if (*train) {
      rfm::RunConfig cfg = train_flags.resolve();
      if (!fusion.empty()) cfg.set("fusion.kind", fusion);
      if (refs) cfg.set("fusion.num_refs", std::to_string(*refs));
      if (!layers.empty()) cfg.set("fusion.layers", layers);
      if (!windows.empty()) cfg.set("fusion.windows", windows);
      if (steps) cfg.set("train.steps", std::to_string(*steps));
      rfm::cli::cmd_train(cfg, train_out, std::cout);
    } else if (*eval) {
      if (eval_ckpt.empty() == eval_preds.empty()) throw CLI::ValidationError("eval needs exactly one of --ckpt, --preds");
      if (!eval_ckpt.empty()) {
        rfm::cli::cmd_eval(eval_ckpt, eval_data, eval_split, eval_out, std::cout);
      } else {
        rfm::cli::cmd_eval_preds(eval_preds, eval_data, eval_split, eval_out, std::cout);
      }
    } else if (*ablate) {
      rfm::cli::cmd_ablate(ablate_flags.resolve(), axis, ablate_out, std::cout);
    } else if (*predict) {
      rfm::cli::cmd_predict(pred_ckpt, pred_data, pred_split, pred_out, std::cout);
    } else if (*dump) {
      rfm::cli::cmd_dump_features(dump_ckpt, dump_data, dump_split, dump_image, dump_out, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "rfk: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
