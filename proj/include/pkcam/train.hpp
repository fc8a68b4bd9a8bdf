#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "pkcam/complexity.hpp"
#include "pkcam/config.hpp"
#include "pkcam/dataset.hpp"

// Training, evaluation, gradient checking and ablation sweeps. Everything is
// single-process and data-order deterministic: shuffling is a seeded
// permutation per epoch, metric sums accumulate in a fixed order, and the
// metrics CSV is byte-reproducible for a given (config, seed, dataset digest)
// when timing is off (the default; `timing = wall` records real wall time at
// the cost of byte determinism).

namespace pkcam {

// Step decay: factor gamma every `step` epochs, applied at the boundary, so
// epoch `step` already runs at gamma * lr0 (1-based epochs).
inline double scheduled_lr(double lr0, double gamma, int step, int epoch) {
  return lr0 * std::pow(gamma, epoch / step);
}

class SgdOptimizer {
 public:
  SgdOptimizer(ParamRegistry& reg, double momentum, double weight_decay)
      : reg_(reg), momentum_(momentum), wd_(weight_decay) {
    for (auto& [name, t] : reg.entries())
      velocity_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
  }

  // v = mu v + (g + wd w);  w -= lr v
  void step(double lr) {
    std::size_t i = 0;
    for (auto& [name, t] : reg_.entries()) {
      std::vector<double>& v = velocity_[i++];
      const double* g = t.has_grad() ? t.grad() : nullptr;
      double* w = t.data();
      for (std::int64_t j = 0; j < t.numel(); ++j) {
        const double grad = (g ? g[j] : 0.0) + wd_ * w[j];
        v[static_cast<std::size_t>(j)] = momentum_ * v[static_cast<std::size_t>(j)] + grad;
        w[j] -= lr * v[static_cast<std::size_t>(j)];
      }
    }
  }

 private:
  ParamRegistry& reg_;
  double momentum_, wd_;
  std::vector<std::vector<double>> velocity_;
};

struct MetricsRecord {
  int epoch = 0;
  std::string split = "train";
  double loss = 0.0, top1 = 0.0, top5 = 0.0, seconds = 0.0;
};

inline std::string metrics_csv_header() { return "epoch,split,loss,top1,top5,seconds\n"; }

inline std::string metrics_csv_row(const MetricsRecord& m) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%s,%.6f,%.6f,%.6f,%.3f\n", m.epoch, m.split.c_str(),
                m.loss, m.top1, m.top5, m.seconds);
  return buf;
}

// Deterministic ranking: a prediction beats the label's logit if strictly
// larger, or equal with a smaller class index.
inline int label_rank(const Tensor& logits, std::int64_t row, int label) {
  const std::int64_t K = logits.dim(1);
  const double zy = logits.at(row, label);
  int rank = 0;
  for (std::int64_t j = 0; j < K; ++j) {
    if (logits.at(row, j) > zy || (logits.at(row, j) == zy && j < label)) ++rank;
  }
  return rank;
}

struct EvalResult {
  double loss = 0.0, top1 = 0.0, top5 = 0.0;
};

inline EvalResult evaluate_network(const Network& net, const DatasetBundle& data,
                                   const std::vector<double>& mean, int batch) {
  EvalResult r;
  std::int64_t hits1 = 0, hits5 = 0;
  double loss_sum = 0.0;
  for (std::int64_t start = 0; start < data.count; start += batch) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = start; i < std::min<std::int64_t>(start + batch, data.count); ++i)
      idx.push_back(i);
    Tensor x = data.batch_images(idx, mean);
    std::vector<int> labels = data.batch_labels(idx);
    Tensor logits = net.forward(x);
    Tensor l = ops::cross_entropy(logits, labels);
    loss_sum += l[0] * static_cast<double>(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const int rank = label_rank(logits, static_cast<std::int64_t>(b), labels[b]);
      if (rank < 1) ++hits1;
      if (rank < 5) ++hits5;
    }
  }
  r.loss = loss_sum / static_cast<double>(data.count);
  r.top1 = static_cast<double>(hits1) / static_cast<double>(data.count);
  r.top5 = static_cast<double>(hits5) / static_cast<double>(data.count);
  return r;
}

struct TrainResult {
  MetricsRecord final_metrics;
  std::string metrics_path;
  std::string checkpoint_path;
  std::string resolved_config_path;
  bool diverged = false;
  int epochs_completed = 0;
};

inline std::string snapshot_text(const RunConfig& cfg, int epoch,
                                 const std::vector<double>& mean) {
  std::string s = cfg.resolved_text();
  s += "epoch = " + std::to_string(epoch) + "\n";
  s += "data.mean = ";
  char buf[64];
  for (std::size_t i = 0; i < mean.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", mean[i]);
    s += (i ? "," : "") + std::string(buf);
  }
  s += "\n";
  return s;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw Error("cannot open " + path + " for writing");
  std::fwrite(text.data(), 1, text.size(), f);
  std::fclose(f);
}

inline TrainResult train_run(const RunConfig& cfg, const std::string& out_dir,
                             std::string* log = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  auto say = [&](const std::string& s) {
    if (log) *log += s + "\n";
  };

  DatasetBundle data = ingest(cfg.data);
  if (data.classes != cfg.classes)
    throw ConfigError("train: dataset has " + std::to_string(data.classes) +
                      " classes, config says " + std::to_string(cfg.classes));
  LayerGraph graph = cfg.make_graph();
  Network net(graph, cfg.seed);
  for (const auto& note : net.build_notes()) say("note: " + note);
  say("parameters: " + std::to_string(net.param_count()));
  say("dataset digest: " + std::to_string(data.digest()));

  TrainResult result;
  result.resolved_config_path = (fs::path(out_dir) / "config.resolved").string();
  write_text(result.resolved_config_path, cfg.resolved_text());
  result.metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  result.checkpoint_path = (fs::path(out_dir) / "checkpoint.bin").string();

  SgdOptimizer sgd(net.params(), cfg.momentum, cfg.weight_decay);
  std::mt19937_64 order_rng(cfg.seed);
  std::vector<std::int64_t> order(static_cast<std::size_t>(data.count));
  std::iota(order.begin(), order.end(), 0);

  std::string csv = metrics_csv_header();
  const auto t0 = std::chrono::steady_clock::now();
  bool saved_any = false;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = scheduled_lr(cfg.lr, cfg.lr_gamma, cfg.lr_step, epoch);
    std::shuffle(order.begin(), order.end(), order_rng);
    bool diverged = false;
    for (std::size_t start = 0; start < order.size() && !diverged;
         start += static_cast<std::size_t>(cfg.batch)) {
      std::vector<std::int64_t> idx(
          order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() +
              static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.batch)));
      Tensor x = data.batch_images(idx, data.channel_mean);
      std::vector<int> labels = data.batch_labels(idx);
      try {
        GradTape tape;
        Tensor logits = net.forward(x);
        Tensor loss = ops::cross_entropy(logits, labels);
        if (!std::isfinite(loss[0])) {
          diverged = true;
          break;
        }
        net.params().zero_grads();
        tape.backward(loss);
        sgd.step(lr);
      } catch (const NumericError& e) {
        say(std::string("numeric error: ") + e.what());
        diverged = true;
      }
    }
    if (diverged) {
      say("epoch " + std::to_string(epoch) +
          ": loss diverged; aborting with the last saved checkpoint retained");
      result.diverged = true;
      break;
    }

    EvalResult ev = evaluate_network(net, data, data.channel_mean, cfg.batch);
    MetricsRecord rec;
    rec.epoch = epoch;
    rec.split = "train";
    rec.loss = ev.loss;
    rec.top1 = ev.top1;
    rec.top5 = ev.top5;
    rec.seconds =
        cfg.timing == "wall"
            ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
            : 0.0;
    csv += metrics_csv_row(rec);
    result.final_metrics = rec;
    result.epochs_completed = epoch;
    if (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs) {
      save_checkpoint(result.checkpoint_path, snapshot_text(cfg, epoch, data.channel_mean),
                      net.params());
      saved_any = true;
    }
    say("epoch " + std::to_string(epoch) + ": loss " + std::to_string(ev.loss) + " top1 " +
        std::to_string(ev.top1));
  }
  if (!saved_any && !result.diverged && cfg.epochs == 0)
    save_checkpoint(result.checkpoint_path, snapshot_text(cfg, 0, data.channel_mean),
                    net.params());
  write_text(result.metrics_path, csv);
  return result;
}

// Rebuild the network a checkpoint was trained with and score it on a split.
inline MetricsRecord evaluate_run(const std::string& ckpt_path, const std::string& data_spec) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
  RunConfig cfg = RunConfig::from_text(loaded.snapshot);
  DatasetBundle data = ingest(data_spec);
  if (data.classes != cfg.classes)
    throw ConfigError("eval: dataset has " + std::to_string(data.classes) +
                      " classes, checkpoint expects " + std::to_string(cfg.classes));
  Network net(cfg.make_graph(), cfg.seed);
  load_into(net, loaded);
  std::vector<double> mean = data.channel_mean;
  if (auto it = loaded.config.find("data.mean"); it != loaded.config.end()) {
    mean.clear();
    for (const auto& tok : config_detail::split_list(it->second))
      mean.push_back(std::stod(tok));
    if (mean.size() != static_cast<std::size_t>(data.channels))
      throw ConfigError("eval: checkpoint channel means do not match dataset channels");
  }
  EvalResult ev = evaluate_network(net, data, mean, cfg.batch);
  MetricsRecord rec;
  rec.epoch = loaded.config.count("epoch") ? std::stoi(loaded.config.at("epoch")) : 0;
  rec.split = "eval";
  rec.loss = ev.loss;
  rec.top1 = ev.top1;
  rec.top5 = ev.top5;
  return rec;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradcheckModule {
  std::string name;
  std::int64_t params = 0;
  double max_rel = 0.0;
  bool vacuous = false;
};

struct GradcheckReport {
  std::vector<GradcheckModule> modules;
  double overall_max_rel = 0.0;
  std::int64_t total_params = 0;
};

namespace gradcheck_detail {

inline std::string module_of(const std::string& param_name) {
  const auto att = param_name.find(".att.");
  if (att != std::string::npos) return param_name.substr(0, att + 4);
  if (param_name.rfind("stem.", 0) == 0) return "stem";
  if (param_name.rfind("head.", 0) == 0) return "head";
  const auto first = param_name.find('.');
  const auto second = param_name.find('.', first + 1);
  return second == std::string::npos ? param_name : param_name.substr(0, second);
}

}  // namespace gradcheck_detail

// Central finite differences (eps 1e-5) against the tape's analytic
// gradients, over every learnable parameter, grouped per module.
inline GradcheckReport gradcheck_run(const RunConfig& cfg) {
  LayerGraph graph = cfg.make_graph();
  Network net(graph, cfg.seed);
  if (net.param_count() > 10000)
    throw ConfigError("gradcheck: config has " + std::to_string(net.param_count()) +
                      " parameters; keep it at or below 10000");
  DatasetBundle data = ingest(cfg.data);
  if (data.classes != cfg.classes)
    throw ConfigError("gradcheck: dataset has " + std::to_string(data.classes) +
                      " classes, config says " + std::to_string(cfg.classes));
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < std::min<std::int64_t>(4, data.count); ++i) idx.push_back(i);
  Tensor x = data.batch_images(idx, data.channel_mean);
  std::vector<int> labels = data.batch_labels(idx);

  {
    GradTape tape;
    Tensor loss = ops::cross_entropy(net.forward(x), labels);
    net.params().zero_grads();
    tape.backward(loss);
  }
  auto loss_value = [&]() { return ops::cross_entropy(net.forward(x), labels)[0]; };

  const double eps = 1e-5;
  std::vector<GradcheckModule> modules;
  auto module_for = [&](const std::string& name) -> GradcheckModule& {
    for (auto& m : modules)
      if (m.name == name) return m;
    modules.push_back({name, 0, 0.0, false});
    return modules.back();
  };

  GradcheckReport rep;
  for (auto& [name, t] : net.params().entries()) {
    GradcheckModule& mod = module_for(gradcheck_detail::module_of(name));
    mod.params += t.numel();
    rep.total_params += t.numel();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const double keep = t[i];
      t[i] = keep + eps;
      const double fp = loss_value();
      t[i] = keep - eps;
      const double fm = loss_value();
      t[i] = keep;
      const double fd = (fp - fm) / (2.0 * eps);
      const double an = t.grad()[i];
      // denominator floor keeps round-off on near-zero gradients from
      // registering as relative error (central FD noise is ~1e-11 here)
      double rel = 0.0;
      if (std::abs(an) > 1e-7 || std::abs(fd) > 1e-7)
        rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
      mod.max_rel = std::max(mod.max_rel, rel);
      rep.overall_max_rel = std::max(rep.overall_max_rel, rel);
    }
  }

  // Parameter-free sub-paths are reported as explicit vacuous passes.
  if (graph.attention.choice == AttentionChoice::PKCAM) {
    for (std::size_t s = 0; s < graph.stages.size(); ++s)
      for (int b = 0; b < graph.stages[s].blocks; ++b) {
        PlacedAttention p = graph.placement(static_cast<int>(s), b);
        if (p.choice != AttentionChoice::PKCAM) continue;
        const std::string prefix =
            "s" + std::to_string(s) + ".b" + std::to_string(b) + ".att";
        if (p.pkcam.paths != Paths::LocalOnly && p.pkcam.interaction == Interaction::Sum)
          modules.push_back({prefix + ".interaction(sum)", 0, 0.0, true});
        if (p.pkcam.paths == Paths::Both && p.pkcam.fusion == Fusion::Sum)
          modules.push_back({prefix + ".fusion(sum)", 0, 0.0, true});
      }
  }
  rep.modules = std::move(modules);
  return rep;
}

// ---------------------------------------------------------------------------
// Ablation sweeps
// ---------------------------------------------------------------------------

struct MatrixSpec {
  std::vector<std::string> interactions;
  std::vector<std::string> fusions;
  std::vector<std::string> paths;
  RunConfig base;
};

inline MatrixSpec parse_matrix_text(const std::string& text) {
  auto kv = parse_kv_text(text);
  MatrixSpec spec;
  if (auto it = kv.find("matrix.interactions"); it != kv.end()) {
    spec.interactions = config_detail::split_list(it->second);
    kv.erase(it);
  }
  if (auto it = kv.find("matrix.fusions"); it != kv.end()) {
    spec.fusions = config_detail::split_list(it->second);
    kv.erase(it);
  }
  if (auto it = kv.find("matrix.paths"); it != kv.end()) {
    spec.paths = config_detail::split_list(it->second);
    kv.erase(it);
  }
  if (spec.interactions.empty() && spec.fusions.empty() && spec.paths.empty())
    throw ConfigError("ablate: empty matrix spec (set matrix.interactions, matrix.fusions "
                      "and/or matrix.paths)");
  if (spec.interactions.empty()) spec.interactions = {"conv1d"};
  if (spec.fusions.empty()) spec.fusions = {"conv1d2"};
  if (spec.paths.empty()) spec.paths = {"both"};
  spec.base = RunConfig::from_kv(kv);
  spec.base.attention = "pkcam";  // the matrix axes are pkcam axes
  return spec;
}

struct AblateRow {
  std::string interaction, fusion, paths;
  std::int64_t params = 0, flops = 0;
  double top1 = 0.0;
};

inline std::string ablate_csv(const std::vector<AblateRow>& rows) {
  std::string out = "interaction,fusion,paths,params,flops,top1\n";
  char buf[200];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%s,%lld,%lld,%.6f\n", r.interaction.c_str(),
                  r.fusion.c_str(), r.paths.c_str(), static_cast<long long>(r.params),
                  static_cast<long long>(r.flops), r.top1);
    out += buf;
  }
  return out;
}

// One row per (interaction, fusion, paths) cell: cost columns from the
// complexity analyzer, top-1 from a desk-scale run. Accuracy ordering is
// recorded, not asserted.
inline std::vector<AblateRow> ablate_run(const MatrixSpec& spec, const std::string& out_dir,
                                         std::string* log = nullptr) {
  DatasetBundle probe = ingest(spec.base.data);
  // axes left empty hold the base configuration fixed
  const auto interactions =
      spec.interactions.empty() ? std::vector<std::string>{spec.base.pkcam_interaction}
                                : spec.interactions;
  const auto fusions = spec.fusions.empty()
                           ? std::vector<std::string>{spec.base.pkcam_fusion}
                           : spec.fusions;
  const auto paths = spec.paths.empty() ? std::vector<std::string>{spec.base.pkcam_paths}
                                        : spec.paths;
  std::vector<AblateRow> rows;
  int cell = 0;
  for (const auto& inter : interactions)
    for (const auto& fus : fusions)
      for (const auto& path : paths) {
        RunConfig cfg = spec.base;
        cfg.pkcam_interaction = inter;
        cfg.pkcam_fusion = fus;
        cfg.pkcam_paths = path;
        LayerGraph graph = cfg.make_graph();
        const CostReport cost = count_flops(
            graph, {1, probe.channels, probe.height, probe.width});
        const std::string cell_dir =
            (std::filesystem::path(out_dir) / ("cell_" + std::to_string(cell++))).string();
        TrainResult tr = train_run(cfg, cell_dir, log);
        AblateRow row;
        row.interaction = inter;
        row.fusion = fus;
        row.paths = path;
        row.params = cost.total_params();
        row.flops = cost.total_flops();
        row.top1 = tr.final_metrics.top1;
        rows.push_back(row);
      }
  return rows;
}

}  // namespace pkcam
