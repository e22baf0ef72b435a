#include "rfm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace rfm::model {

// ---------------------------------------------------------------------------
// Encoder and network.

EncoderParams EncoderParams::create(std::int64_t stem_channels, const std::array<std::int64_t, kLevels>& channels,
                                    Rng& rng) {
  EncoderParams p;
  p.stem = ConvBlock::create(3, stem_channels, 3, rng, 2);
  std::int64_t c_in = stem_channels;
  for (std::size_t i = 0; i < kLevels; ++i) {
    p.stages[i][0] = ConvBlock::create(c_in, channels[i], 3, rng, 2);
    p.stages[i][1] = ConvBlock::create(channels[i], channels[i], 3, rng);
    c_in = channels[i];
  }
  return p;
}

void EncoderParams::collect(ParamSet& set, const std::string& prefix) {
  stem.collect(set, prefix + ".stem");
  for (std::size_t i = 0; i < kLevels; ++i) {
    const std::string s = prefix + ".s" + std::to_string(i + 1);
    stages[i][0].collect(set, s + ".down");
    stages[i][1].collect(set, s + ".conv");
  }
}

FeaturePyramid encode(const Var& image, EncoderParams& p, Mode mode) {
  const Shape& s = image.shape();
  if ((s.size() != 3 && s.size() != 4) || image.dim(-3) != 3) {
    throw std::invalid_argument("encode: expected [3,S,S] or [B,3,S,S], got " + shape_str(s));
  }
  const std::int64_t h = image.dim(-2), w = image.dim(-1);
  if (h != w || h % 32 != 0 || h == 0) {
    throw std::invalid_argument("encode: image side must be square and divisible by 32, got " + shape_str(s));
  }
  FeaturePyramid out;
  Var x = conv_block(image, p.stem, mode);
  for (std::size_t i = 0; i < kLevels; ++i) {
    x = conv_block(conv_block(x, p.stages[i][0], mode), p.stages[i][1], mode);
    out.levels[i] = x;
  }
  return out;
}

Network Network::create(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.input_size <= 0 || cfg.input_size % 32 != 0) {
    throw std::invalid_argument("input size must be a positive multiple of 32, got " + std::to_string(cfg.input_size));
  }
  // Validate windows against the level sizes up front.
  for (int level = 2; level <= kLevels; ++level) {
    if (cfg.fusion.kind == rif::FusionKind::kImage && cfg.fusion.fuses(level)) {
      rif::resolve_window(cfg.fusion, level, cfg.input_size >> (level + 1));
    }
  }
  Network net;
  net.cfg = cfg;
  Rng root(mix_seed(seed, 0xE7));
  Rng camo_rng = root.fork(1), ref_rng = root.fork(2), fusion_rng = root.fork(3), decoder_rng = root.fork(4);
  net.camo_encoder = EncoderParams::create(cfg.stem_channels, cfg.channels, camo_rng);
  if (cfg.fusion.kind == rif::FusionKind::kImage && !cfg.fusion.layers.empty()) {
    net.ref_encoder = EncoderParams::create(cfg.stem_channels, cfg.channels, ref_rng);
  }
  net.fusion = rif::FusionParams::create(cfg.fusion, cfg.channels, fusion_rng);
  net.decoder = rfa::DecoderParams::create(cfg.channels, cfg.decoder_width, decoder_rng);
  return net;
}

ParamSet Network::parameters() {
  ParamSet set;
  camo_encoder.collect(set, "camo");
  if (ref_encoder) ref_encoder->collect(set, "ref");
  fusion.collect(set, "fusion");
  decoder.collect(set, "decoder");
  return set;
}

rfa::SegmentationPrediction forward(Network& net, const Tensor& camo, const ReferenceInput& refs, Mode mode,
                                    ForwardTrace* trace) {
  const auto& fc = net.cfg.fusion;
  FeaturePyramid encoded = encode(Var(camo), net.camo_encoder, mode);
  FeaturePyramid fused = encoded;
  if (fc.kind != rif::FusionKind::kNone && !fc.layers.empty()) {
    rif::ReferenceBundle bundle;
    if (fc.kind == rif::FusionKind::kImage) {
      if (static_cast<int>(refs.images.size()) != fc.num_refs) {
        throw std::invalid_argument("forward: expected " + std::to_string(fc.num_refs) + " reference images, got " +
                                    std::to_string(refs.images.size()));
      }
      std::vector<FeaturePyramid> pyramids;
      for (const Tensor& r : refs.images) {
        if (r.shape() != camo.shape()) {
          throw std::invalid_argument("forward: reference " + shape_str(r.shape()) + " does not match image " +
                                      shape_str(camo.shape()));
        }
        pyramids.push_back(encode(Var(r), *net.ref_encoder, mode));
      }
      bundle = rif::ReferenceBundle::from_pyramids(pyramids);
    } else {
      const std::size_t batch = camo.rank() == 4 ? static_cast<std::size_t>(camo.dim(0)) : 1;
      if (refs.text.size() != batch) {
        throw std::invalid_argument("forward: expected " + std::to_string(batch) + " sentence sets, got " +
                                    std::to_string(refs.text.size()));
      }
      std::vector<Var> text;
      for (const Tensor& t : refs.text) text.emplace_back(t);
      bundle = rif::ReferenceBundle::from_text(std::move(text));
    }
    fused = rif::dispatch_fusion(encoded, bundle, net.fusion, mode);
  }
  if (trace) {
    trace->encoded = encoded;
    trace->fused = fused;
  }
  return rfa::decode(fused, net.decoder, mode);
}

// ---------------------------------------------------------------------------
// Optimization.

double poly_lr(double lr_init, int step, int total, double power) {
  if (total <= 0) throw std::invalid_argument("poly_lr: total steps must be positive");
  const double t = std::clamp(static_cast<double>(step) / total, 0.0, 1.0);
  return lr_init * std::pow(1.0 - t, power);
}

void Adam::step(const ParamSet& params, double lr) {
  const auto& ps = params.params();
  if (m_.empty()) {
    for (const auto& [name, v] : ps) {
      m_.emplace_back(v.shape());
      v_.emplace_back(v.shape());
    }
  }
  if (m_.size() != ps.size()) throw std::logic_error("Adam: parameter set changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_), c2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Var p = ps[i].second;
    if (!p.has_grad()) continue;
    const Tensor& g = p.node()->grad;
    Tensor& w = p.mutable_value();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < w.numel(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

Tensor dihedral(const Tensor& t, int code) {
  if (t.rank() != 3 || t.dim(1) != t.dim(2)) throw std::invalid_argument("dihedral: expected [C,S,S], got " + shape_str(t.shape()));
  if (code == 0) return t;
  const std::int64_t c = t.dim(0), s = t.dim(1);
  Tensor out(t.shape());
  for (std::int64_t k = 0; k < c; ++k) {
    for (std::int64_t y = 0; y < s; ++y) {
      for (std::int64_t x = 0; x < s; ++x) {
        std::int64_t sy = y, sx = x;
        if (code & 4) std::swap(sy, sx);
        if (code & 1) sx = s - 1 - sx;
        if (code & 2) sy = s - 1 - sy;
        out.at(k, y, x) = t.at(k, sy, sx);
      }
    }
  }
  return out;
}

int total_steps(const TrainConfig& cfg, std::size_t dataset_size) {
  if (cfg.batch_size <= 0) throw std::invalid_argument("batch size must be positive");
  if (cfg.epochs > 0) {
    const auto per_epoch = (dataset_size + static_cast<std::size_t>(cfg.batch_size) - 1) / cfg.batch_size;
    return cfg.epochs * static_cast<int>(per_epoch);
  }
  if (cfg.steps <= 0) throw std::invalid_argument("training needs a positive step or epoch count");
  return cfg.steps;
}

namespace {

Tensor stack(const std::vector<const Tensor*>& items) {
  Shape s = items.front()->shape();
  s.insert(s.begin(), static_cast<std::int64_t>(items.size()));
  Tensor out(s);
  const std::size_t n = items.front()->numel();
  for (std::size_t i = 0; i < items.size(); ++i) std::copy_n(items[i]->ptr(), n, out.ptr() + i * n);
  return out;
}

const std::vector<Tensor>& category_refs(const synth::Split& data, int category, int needed) {
  auto it = data.refs.find(category);
  if (it == data.refs.end() || static_cast<int>(it->second.size()) < needed) {
    throw std::invalid_argument("category " + std::to_string(category) + " has fewer than " + std::to_string(needed) +
                                " reference images");
  }
  return it->second;
}

// K references for each item, chosen without replacement.
ReferenceInput sample_references(const Network& net, const synth::Split& data, const std::vector<std::size_t>& items,
                                 Rng& rng, bool augment) {
  ReferenceInput out;
  const auto& fc = net.cfg.fusion;
  if (fc.kind == rif::FusionKind::kText) {
    for (std::size_t i : items) out.text.push_back(data.text[i]);
    return out;
  }
  if (fc.kind != rif::FusionKind::kImage) return out;
  std::vector<std::vector<const Tensor*>> slots(static_cast<std::size_t>(fc.num_refs));
  std::vector<Tensor> transformed;
  transformed.reserve(items.size() * static_cast<std::size_t>(fc.num_refs));
  for (std::size_t i : items) {
    const auto& pool = category_refs(data, data.categories[i], fc.num_refs);
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t j = 0; j < static_cast<std::size_t>(fc.num_refs); ++j) {
      const std::size_t pick = j + static_cast<std::size_t>(rng.below(order.size() - j));
      std::swap(order[j], order[pick]);
      if (augment) {
        transformed.push_back(dihedral(pool[order[j]], static_cast<int>(rng.below(8))));
        slots[j].push_back(&transformed.back());
      } else {
        slots[j].push_back(&pool[order[j]]);
      }
    }
  }
  for (auto& s : slots) out.images.push_back(stack(s));
  return out;
}

}  // namespace

ReferenceInput eval_references(const Network& net, const synth::Split& data, const std::vector<std::size_t>& items) {
  ReferenceInput out;
  const auto& fc = net.cfg.fusion;
  if (fc.kind == rif::FusionKind::kText) {
    for (std::size_t i : items) out.text.push_back(data.text[i]);
    return out;
  }
  if (fc.kind != rif::FusionKind::kImage) return out;
  for (int j = 0; j < fc.num_refs; ++j) {
    std::vector<const Tensor*> slot;
    for (std::size_t i : items) slot.push_back(&category_refs(data, data.categories[i], fc.num_refs)[static_cast<std::size_t>(j)]);
    out.images.push_back(stack(slot));
  }
  return out;
}

std::vector<StepLog> train(Network& net, const synth::Split& data, const TrainConfig& cfg, std::ostream* log) {
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  const int total = total_steps(cfg, data.size());
  const auto batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), data.size());
  ParamSet params = net.parameters();
  Adam opt(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  // Data order and reference choice come from separate streams so that arms
  // with different fusion settings see identical batches.
  Rng order_rng(mix_seed(cfg.seed, 0xDA7A));
  Rng ref_rng(mix_seed(cfg.seed, 0x8EF5));
  Rng aug_rng(mix_seed(cfg.seed, 0xA116));

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = data.size();
  if (log) *log << "step\tlr\tl1\tl2\tl3\tl4\ttotal\n";
  std::vector<StepLog> history;
  for (int step = 0; step < total; ++step) {
    std::vector<std::size_t> items;
    while (items.size() < batch) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
        cursor = 0;
      }
      items.push_back(order[cursor++]);
    }
    std::vector<Tensor> aug_imgs, aug_masks;
    std::vector<const Tensor*> imgs, masks;
    for (std::size_t i : items) {
      const int code = cfg.augment ? static_cast<int>(aug_rng.below(8)) : 0;
      aug_imgs.push_back(dihedral(data.images[i], code));
      aug_masks.push_back(dihedral(data.masks[i], code));
    }
    for (std::size_t b = 0; b < items.size(); ++b) {
      imgs.push_back(&aug_imgs[b]);
      masks.push_back(&aug_masks[b]);
    }
    const Tensor x = stack(imgs), gt = stack(masks);
    const ReferenceInput refs = sample_references(net, data, items, ref_rng, cfg.augment);

    StepLog entry;
    entry.step = step;
    entry.lr = poly_lr(cfg.lr_init, step, total, cfg.poly_power);
    try {
      const auto pred = forward(net, x, refs, Mode::kTrain);
      const auto targets = losses::make_targets(gt, pred, cfg.loss);
      const auto loss = losses::total_loss(pred, targets);
      entry.terms = loss.terms();
      params.zero_grad();
      backward(loss.total);
    } catch (const std::domain_error& e) {
      throw std::runtime_error("train: non-finite value at step " + std::to_string(step) + ": " + e.what());
    }
    opt.step(params, entry.lr);
    if (log) {
      char buf[256];
      const auto& t = entry.terms;
      std::snprintf(buf, sizeof buf, "%d\t%.6g\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n", step, entry.lr, t.per_level[0],
                    t.per_level[1], t.per_level[2], t.per_level[3], t.total);
      *log << buf << std::flush;
    }
    history.push_back(entry);
  }
  return history;
}

std::vector<Tensor> predict(Network& net, const synth::Split& data, int batch_size) {
  NoGradGuard guard;
  std::vector<Tensor> out;
  const auto s = net.cfg.input_size;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> items;
    std::vector<const Tensor*> imgs;
    for (std::size_t i = start; i < std::min(data.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      items.push_back(i);
      imgs.push_back(&data.images[i]);
    }
    const auto pred = forward(net, stack(imgs), eval_references(net, data, items), Mode::kEval);
    Var up = ops::sigmoid(ops::bilinear_resize(pred.logit(1), s, s));
    const Tensor& p = up.value();
    const std::size_t n = static_cast<std::size_t>(s) * s;
    for (std::size_t b = 0; b < items.size(); ++b) {
      Tensor t({1, s, s});
      std::copy_n(p.ptr() + b * n, n, t.ptr());
      out.push_back(std::move(t));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints.

Checkpoint snapshot(Network& net, const std::string& config_text) {
  Checkpoint c;
  c.config_text = config_text;
  const ParamSet set = net.parameters();
  for (const auto& [name, v] : set.params()) c.tensors.emplace_back(name, v.value());
  for (const auto& [name, t] : set.buffers()) c.tensors.emplace_back(name, *t);
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ostringstream payload;
  std::ostringstream header;
  header << "RFMCKPT 1\n[config]\n" << ckpt.config_text;
  if (!ckpt.config_text.empty() && ckpt.config_text.back() != '\n') header << '\n';
  header << "[tensors]\n";
  for (const auto& [name, t] : ckpt.tensors) {
    header << name << ' ' << static_cast<std::uint64_t>(payload.tellp()) << '\n';
    write_tensor(payload, t);
  }
  header << "[end]\n";
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
    const std::string h = header.str(), p = payload.str();
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    os.write(p.data(), static_cast<std::streamsize>(p.size()));
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != "RFMCKPT 1") throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint");
  if (!std::getline(is, line) || line != "[config]") throw std::runtime_error("load_checkpoint: missing [config] in " + path);
  Checkpoint c;
  while (std::getline(is, line) && line != "[tensors]") c.config_text += line + '\n';
  std::vector<std::pair<std::string, std::uint64_t>> index;
  while (std::getline(is, line) && line != "[end]") {
    const auto sp = line.rfind(' ');
    if (sp == std::string::npos) throw std::runtime_error("load_checkpoint: bad index line '" + line + "'");
    index.emplace_back(line.substr(0, sp), std::stoull(line.substr(sp + 1)));
  }
  if (line != "[end]") throw std::runtime_error("load_checkpoint: truncated header in " + path);
  const auto base = is.tellg();
  for (const auto& [name, offset] : index) {
    is.seekg(base + static_cast<std::streamoff>(offset));
    c.tensors.emplace_back(name, read_tensor(is));
  }
  return c;
}

void restore(Network& net, const Checkpoint& ckpt) {
  const ParamSet set = net.parameters();
  std::map<std::string, const Tensor*> stored;
  for (const auto& [name, t] : ckpt.tensors) stored[name] = &t;
  std::size_t used = 0;
  auto assign = [&](const std::string& name, Tensor& dst) {
    auto it = stored.find(name);
    if (it == stored.end()) throw std::runtime_error("restore: checkpoint lacks tensor " + name);
    if (it->second->shape() != dst.shape()) {
      throw std::runtime_error("restore: tensor " + name + " has shape " + shape_str(it->second->shape()) +
                               ", network expects " + shape_str(dst.shape()));
    }
    dst = *it->second;
    ++used;
  };
  for (const auto& [name, v] : set.params()) {
    Var p = v;
    assign(name, p.mutable_value());
  }
  for (const auto& [name, t] : set.buffers()) assign(name, *t);
  if (used != stored.size()) throw std::runtime_error("restore: checkpoint holds tensors the network does not use");
}

}  // namespace rfm::model
