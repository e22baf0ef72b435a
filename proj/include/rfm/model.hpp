#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rfm/losses.hpp"
#include "rfm/rfa.hpp"
#include "rfm/rif.hpp"
#include "rfm/synthdata.hpp"

namespace rfm::model {

struct ModelConfig {
  int input_size = 64;
  std::int64_t stem_channels = 8;
  std::array<std::int64_t, kLevels> channels{16, 32, 64, 128};
  std::int64_t decoder_width = 32;
  rif::FusionConfig fusion;
};

/// Stem (stride 2) followed by four stages of stride-2 Conv3 + Conv3, giving
/// features at strides 4, 8, 16 and 32.
struct EncoderParams {
  ConvBlock stem;
  std::array<std::array<ConvBlock, 2>, kLevels> stages;

  static EncoderParams create(std::int64_t stem_channels, const std::array<std::int64_t, kLevels>& channels, Rng& rng);
  void collect(ParamSet& set, const std::string& prefix);
};

/// image: [3,S,S] or [B,3,S,S] with S divisible by 32.
FeaturePyramid encode(const Var& image, EncoderParams& p, Mode mode);

/// Camouflage encoder, optional reference encoder, fusion and decoder.
///
/// Parameters are initialized from independent streams keyed by component,
/// so networks built from the same seed share their encoder and decoder
/// weights whatever the fusion configuration.
class Network {
 public:
  static Network create(const ModelConfig& cfg, std::uint64_t seed);

  Network(Network&&) = default;
  Network& operator=(Network&&) = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  /// Trainable parameters and buffers in checkpoint order. Buffer pointers
  /// stay valid until the network is moved.
  ParamSet parameters();

  ModelConfig cfg;
  EncoderParams camo_encoder;
  std::optional<EncoderParams> ref_encoder;
  rif::FusionParams fusion;
  rfa::DecoderParams decoder;

 private:
  Network() = default;
};

/// References for one batch. Image fusion: K tensors, the j-th holding every
/// item's j-th reference ([B,3,S,S], or [3,S,S] for a single image). Text
/// fusion: one [N, C_t] matrix per item.
struct ReferenceInput {
  std::vector<Tensor> images;
  std::vector<Tensor> text;
};

struct ForwardTrace {
  FeaturePyramid encoded;
  FeaturePyramid fused;
};

rfa::SegmentationPrediction forward(Network& net, const Tensor& camo, const ReferenceInput& refs, Mode mode,
                                    ForwardTrace* trace = nullptr);

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
  int steps = 300;
  int epochs = 0;  // when positive, overrides `steps` with whole passes over the data
  int batch_size = 8;
  double lr_init = 1.5e-4;
  double poly_power = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool augment = true;  // random flips and quarter turns of scenes and references
  losses::LossConfig loss;
};

/// lr_init * (1 - step/total)^power.
double poly_lr(double lr_init, int step, int total, double power);

class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(const ParamSet& params, double lr);
  int steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct StepLog {
  int step = 0;
  double lr = 0.0;
  losses::LossTerms terms;
};

/// One of the eight symmetries of the square applied to a [C,S,S] tensor:
/// bit 0 flips horizontally, bit 1 flips vertically, bit 2 transposes.
Tensor dihedral(const Tensor& t, int code);

int total_steps(const TrainConfig& cfg, std::size_t dataset_size);

/// Deterministic mini-batch training. Writes one TSV row per step to `log`
/// when given. Throws std::runtime_error on a non-finite loss.
std::vector<StepLog> train(Network& net, const synth::Split& data, const TrainConfig& cfg, std::ostream* log = nullptr);

/// References used for item `i` at evaluation: the first K of its category.
ReferenceInput eval_references(const Network& net, const synth::Split& data, const std::vector<std::size_t>& items);

/// Eval-mode probability maps sigmoid(upsample(p_1)) at image resolution, [1,S,S] each.
std::vector<Tensor> predict(Network& net, const synth::Split& data, int batch_size = 16);

// ---------------------------------------------------------------------------
// Checkpoints: "RFMCKPT 1" header, [config] key=value block, [tensors] name and
// payload offset per line, [end], then the tensors back to back.

struct Checkpoint {
  std::string config_text;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

Checkpoint snapshot(Network& net, const std::string& config_text);
/// Atomic: writes a temporary file and renames it over `path`.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
/// Copies tensors into `net`; names and shapes must match exactly.
void restore(Network& net, const Checkpoint& ckpt);

}  // namespace rfm::model
