#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "rfm/config.hpp"
#include "rfm/metrics.hpp"
#include "rfm/model.hpp"

// Command implementations behind the rfk executable. Every command echoes its
// resolved configuration to `echo` and writes its outputs under `out`.
namespace rfm::cli {

void cmd_gen(const RunConfig& cfg, const std::string& out, std::ostream& echo);

struct TrainOutputs {
  std::string checkpoint;
  std::string log;
  std::string config;
};

/// Trains on <data.root>/train and writes checkpoint.rfmc, train_log.tsv and config.txt.
TrainOutputs cmd_train(const RunConfig& cfg, const std::string& out, std::ostream& echo);

/// Rebuilds the network stored in a checkpoint.
std::pair<RunConfig, model::Network> load_model(const std::string& ckpt);

/// Evaluates a checkpoint on a split; writes report.txt and table.txt.
metrics::MetricReport cmd_eval(const std::string& ckpt, const std::string& data_root, const std::string& split,
                               const std::string& out, std::ostream& echo);

/// Evaluates stored probability maps <preds>/<name>.pgm against a split.
metrics::MetricReport cmd_eval_preds(const std::string& preds, const std::string& data_root, const std::string& split,
                                     const std::string& out, std::ostream& echo);

struct AblationArm {
  std::string label;
  std::vector<std::pair<std::string, std::string>> overrides;
};

/// Arms of an ablation axis: fusion, refs, layers or windows.
std::vector<AblationArm> ablation_grid(const std::string& axis);

struct AblationRow {
  std::string label;
  metrics::MetricReport report;
};

/// Trains and evaluates every arm with the shared seed; writes one directory
/// per arm and table.txt.
std::vector<AblationRow> cmd_ablate(const RunConfig& base, const std::string& axis, const std::string& out,
                                    std::ostream& echo);

/// Writes the probability map of every image in the split as <name>.pgm.
void cmd_predict(const std::string& ckpt, const std::string& data_root, const std::string& split,
                 const std::string& out, std::ostream& echo);

/// Per-level channel-mean heatmaps of one image, for the pre-fusion,
/// post-fusion and decoder stages: <stage>_l<i>.pgm.
std::vector<std::string> cmd_dump_features(const std::string& ckpt, const std::string& data_root,
                                           const std::string& split, const std::string& image,
                                           const std::string& out, std::ostream& echo);

/// Min-max normalized channel mean of a [C,H,W] map as a [1,H,W] image.
Tensor heatmap(const Tensor& features);

}  // namespace rfm::cli
