#include "rfm/commands.hpp"

#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "rfm/synthdata.hpp"

namespace fs = std::filesystem;

namespace rfm::cli {

namespace {

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << text;
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void echo_config(const RunConfig& cfg, std::ostream& echo) {
  echo << "# resolved config\n" << cfg.resolved() << std::flush;
}

metrics::MetricReport write_report(const metrics::MetricReport& r, const std::string& label, const std::string& out) {
  fs::create_directories(out);
  write_text(fs::path(out) / "report.txt", metrics::format_report(r));
  write_text(fs::path(out) / "table.txt", metrics::format_table({{label, r}}));
  return r;
}

Tensor select_item(const Tensor& batch, std::int64_t b) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  Tensor out(s);
  std::copy_n(batch.ptr() + b * static_cast<std::int64_t>(out.numel()), out.numel(), out.ptr());
  return out;
}

}  // namespace

void cmd_gen(const RunConfig& cfg, const std::string& out, std::ostream& echo) {
  echo_config(cfg, echo);
  const auto rows = synth::gen_dataset(out, cfg.dataset());
  write_text(fs::path(out) / "config.txt", cfg.resolved());
  echo << "wrote " << rows.size() << " files to " << out << '\n';
}

TrainOutputs cmd_train(const RunConfig& cfg, const std::string& out, std::ostream& echo) {
  echo_config(cfg, echo);
  const synth::Split data = synth::load_split(cfg.get("data.root"), "train");
  model::Network net = model::Network::create(cfg.model(), cfg.seed());
  fs::create_directories(out);
  TrainOutputs o{(fs::path(out) / "checkpoint.rfmc").string(), (fs::path(out) / "train_log.tsv").string(),
                 (fs::path(out) / "config.txt").string()};
  write_text(o.config, cfg.resolved());
  {
    const std::string tmp = o.log + ".tmp";
    std::ofstream log(tmp);
    if (!log) throw std::runtime_error("cannot write " + tmp);
    const auto history = model::train(net, data, cfg.train(), &log);
    log.close();
    fs::rename(tmp, o.log);
    echo << "trained " << history.size() << " steps, final loss " << history.back().terms.total << '\n';
  }
  model::save_checkpoint(o.checkpoint, model::snapshot(net, cfg.resolved()));
  echo << "checkpoint " << o.checkpoint << '\n';
  return o;
}

std::pair<RunConfig, model::Network> load_model(const std::string& ckpt) {
  const model::Checkpoint c = model::load_checkpoint(ckpt);
  RunConfig cfg = RunConfig::parse(c.config_text);
  model::Network net = model::Network::create(cfg.model(), cfg.seed());
  model::restore(net, c);
  return {std::move(cfg), std::move(net)};
}

metrics::MetricReport cmd_eval(const std::string& ckpt, const std::string& data_root, const std::string& split,
                               const std::string& out, std::ostream& echo) {
  auto [cfg, net] = load_model(ckpt);
  echo_config(cfg, echo);
  echo << "checkpoint=" << ckpt << "\nsplit=" << data_root << '/' << split << '\n';
  const synth::Split data = synth::load_split(data_root, split);
  const auto preds = model::predict(net, data);
  const auto report = metrics::evaluate(preds, data.masks, data.names);
  write_report(report, rif::to_string(cfg.model().fusion.kind), out);
  echo << metrics::format_table({{rif::to_string(cfg.model().fusion.kind), report}});
  return report;
}

metrics::MetricReport cmd_eval_preds(const std::string& preds, const std::string& data_root, const std::string& split,
                                     const std::string& out, std::ostream& echo) {
  echo << "predictions=" << preds << "\nsplit=" << data_root << '/' << split << '\n';
  const synth::Split data = synth::load_split(data_root, split);
  std::vector<Tensor> maps;
  for (const auto& name : data.names) {
    const fs::path p = fs::path(preds) / (name + ".pgm");
    if (!fs::exists(p)) throw std::runtime_error("cmd_eval: missing prediction " + p.string());
    maps.push_back(synth::read_pgm(p.string(), 1));
  }
  const auto report = metrics::evaluate(maps, data.masks, data.names);
  write_report(report, "predictions", out);
  echo << metrics::format_table({{"predictions", report}});
  return report;
}

std::vector<AblationArm> ablation_grid(const std::string& axis) {
  if (axis == "fusion") {
    return {{"none", {{"fusion.kind", "none"}}},
            {"image", {{"fusion.kind", "image"}}},
            {"text", {{"fusion.kind", "text"}}}};
  }
  if (axis == "refs") {
    std::vector<AblationArm> arms;
    for (int n = 0; n <= 5; ++n) {
      arms.push_back({"N=" + std::to_string(n), {{"fusion.kind", "image"}, {"fusion.num_refs", std::to_string(n)}}});
    }
    return arms;
  }
  if (axis == "layers") {
    return {{"layers=none", {{"fusion.layers", "none"}}},
            {"layers=4", {{"fusion.layers", "4"}}},
            {"layers=3,4", {{"fusion.layers", "3,4"}}},
            {"layers=2,3,4", {{"fusion.layers", "2,3,4"}}}};
  }
  if (axis == "windows") {
    return {{"windows=auto", {{"fusion.windows", "auto"}}},
            {"windows=8,4,2", {{"fusion.windows", "8,4,2"}}},
            {"windows=4,2,2", {{"fusion.windows", "4,2,2"}}},
            {"windows=2,2,2", {{"fusion.windows", "2,2,2"}}}};
  }
  throw std::invalid_argument("unknown ablation axis '" + axis + "' (fusion, refs, layers, windows)");
}

std::vector<AblationRow> cmd_ablate(const RunConfig& base, const std::string& axis, const std::string& out,
                                    std::ostream& echo) {
  const auto grid = ablation_grid(axis);
  const std::string data_root = base.get("data.root");
  std::vector<AblationRow> rows;
  std::vector<std::pair<std::string, metrics::MetricReport>> table;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    RunConfig cfg = base;
    for (const auto& [k, v] : grid[i].overrides) cfg.set(k, v);
    const std::string dir = (fs::path(out) / ("arm" + std::to_string(i))).string();
    echo << "== arm " << grid[i].label << '\n';
    const auto trained = cmd_train(cfg, dir, echo);
    auto report = cmd_eval(trained.checkpoint, data_root, "test", dir, echo);
    rows.push_back({grid[i].label, report});
    table.emplace_back(grid[i].label, std::move(report));
  }
  const std::string text = metrics::format_table(table);
  write_text(fs::path(out) / "table.txt", text);
  echo << text;
  return rows;
}

void cmd_predict(const std::string& ckpt, const std::string& data_root, const std::string& split,
                 const std::string& out, std::ostream& echo) {
  auto [cfg, net] = load_model(ckpt);
  echo_config(cfg, echo);
  const synth::Split data = synth::load_split(data_root, split);
  const auto preds = model::predict(net, data);
  fs::create_directories(out);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    synth::write_pgm((fs::path(out) / (data.names[i] + ".pgm")).string(), preds[i]);
  }
  echo << "wrote " << preds.size() << " maps to " << out << '\n';
}

Tensor heatmap(const Tensor& f) {
  if (f.rank() != 3) throw std::invalid_argument("heatmap: expected [C,H,W], got " + shape_str(f.shape()));
  const std::int64_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
  Tensor out({1, f.dim(1), f.dim(2)});
  for (std::int64_t k = 0; k < c; ++k) {
    for (std::int64_t i = 0; i < hw; ++i) out[static_cast<std::size_t>(i)] += f[static_cast<std::size_t>(k * hw + i)];
  }
  double lo = out[0], hi = out[0];
  for (double v : out.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (auto& v : out.storage()) v = hi > lo ? (v - lo) / (hi - lo) : 0.0;
  return out;
}

std::vector<std::string> cmd_dump_features(const std::string& ckpt, const std::string& data_root,
                                           const std::string& split, const std::string& image,
                                           const std::string& out, std::ostream& echo) {
  auto [cfg, net] = load_model(ckpt);
  echo_config(cfg, echo);
  const synth::Split data = synth::load_split(data_root, split);
  std::size_t index = data.size();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.names[i] == image) index = i;
  }
  if (index == data.size()) throw std::runtime_error("dump-features: no image '" + image + "' in split " + split);

  NoGradGuard guard;
  model::ForwardTrace trace;
  Shape s = data.images[index].shape();
  s.insert(s.begin(), 1);
  const auto pred = model::forward(net, data.images[index].reshaped(s), model::eval_references(net, data, {index}),
                                   ops::Mode::kEval, &trace);
  fs::create_directories(out);
  std::vector<std::string> files;
  auto dump = [&](const std::string& stage, int level, const Var& v) {
    const std::string path = (fs::path(out) / (stage + "_l" + std::to_string(level) + ".pgm")).string();
    synth::write_pgm(path, heatmap(select_item(v.value(), 0)));
    files.push_back(path);
  };
  for (int level = 1; level <= kLevels; ++level) {
    dump("pre_fusion", level, trace.encoded.level(level));
    dump("post_fusion", level, trace.fused.level(level));
    dump("post_rfa", level, pred.features[static_cast<std::size_t>(level - 1)]);
  }
  echo << "wrote " << files.size() << " heatmaps to " << out << '\n';
  return files;
}

}  // namespace rfm::cli
