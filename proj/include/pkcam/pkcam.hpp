#pragma once

#include <deque>
#include <random>
#include <string>
#include <vector>

#include "pkcam/attention.hpp"

// Previous Knowledge Channel Attention Module.
//
//   align    repeat predecessor channels up to the current width C0
//   squeeze  per-entry GAP -> stack [x~0, x~1, ..., x~R] of row vectors
//   interact collapse the stack to Y (full FC / depthwise / sum / 1-D conv)
//   GCCI     transform Y to global logits Z1
//   LCCI     transform GAP(x0) to local logits Z2
//   fuse     S = sigmoid(phi(Z1, Z2)), then F = S * x0
//
// GCCI/LCCI emit pre-sigmoid logits; one sigmoid is applied after fusion so
// S stays a gate in (0,1) under every fusion mode. The current block's row
// participates in the interaction, so kernels span R+1 entries. Blocks that
// have fewer than R predecessors shrink the stack and use the leading
// kernel taps; the stack layout is current-first, so truncation drops the
// weights of the oldest missing predecessors.

namespace pkcam {

enum class Interaction { FullFC, Depthwise, Sum, Conv1dOverR };
enum class Fusion { Sum, Conv1dK2, FullFC };
enum class Paths { LocalOnly, GlobalOnly, Both };

inline const char* to_string(Interaction m) {
  switch (m) {
    case Interaction::FullFC: return "fullfc";
    case Interaction::Depthwise: return "depthwise";
    case Interaction::Sum: return "sum";
    case Interaction::Conv1dOverR: return "conv1d";
  }
  return "?";
}

inline const char* to_string(Fusion m) {
  switch (m) {
    case Fusion::Sum: return "sum";
    case Fusion::Conv1dK2: return "conv1d2";
    case Fusion::FullFC: return "fullfc";
  }
  return "?";
}

inline const char* to_string(Paths p) {
  switch (p) {
    case Paths::LocalOnly: return "local";
    case Paths::GlobalOnly: return "global";
    case Paths::Both: return "both";
  }
  return "?";
}

struct PkcamConfig {
  int coverage = 1;  // R: how many preceding stage endpoints are aggregated
  Interaction interaction = Interaction::Conv1dOverR;
  Fusion fusion = Fusion::Conv1dK2;
  AttentionKind gcci = AttentionKind::eca();
  AttentionKind lcci = AttentionKind::eca();
  Paths paths = Paths::Both;
};

// Ordered store of preceding stage endpoints feeding the global path.
// Entries are pushed in forward-pass order; at most `capacity` newest ones
// are retained. The cache is pass-local: one forward pass writes and reads
// it, nothing is shared across passes.
class FeatureCache {
 public:
  explicit FeatureCache(int capacity) : capacity_(capacity) {
    if (capacity < 0)
      throw ContractError("feature cache: capacity must be non-negative");
  }

  void push(int block_id, Tensor t) {
    if (capacity_ == 0) return;
    entries_.emplace_back(block_id, std::move(t));
    while (static_cast<int>(entries_.size()) > capacity_) entries_.pop_front();
  }

  // Cached tensors, most recent first.
  std::vector<Tensor> recent() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
      out.push_back(it->second);
    return out;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  int capacity() const { return capacity_; }

 private:
  int capacity_;
  std::deque<std::pair<int, Tensor>> entries_;
};

// Repeat x's channels ceil(C0/Ci) times and truncate to exactly C0:
// out[n,c,h,w] = x[n, c mod Ci, h, w]. Identity when Ci == C0.
inline Tensor align_channels(Tensor x, std::int64_t c0) {
  ops::expect_rank(x, 4, "align_channels", "input");
  const std::int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (Ci > c0)
    throw ContractError("align_channels: predecessor has " + std::to_string(Ci) +
                        " channels, wider than the current block's " + std::to_string(c0) +
                        "; channel widths must be non-decreasing");
  if (Ci == c0) return x;
  const std::int64_t M = H * W;
  Tensor y(Shape{N, c0, H, W});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < c0; ++c)
      std::memcpy(y.data() + (n * c0 + c) * M, x.data() + (n * Ci + c % Ci) * M,
                  sizeof(double) * static_cast<std::size_t>(M));
  if (detail::tracing({&x})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, y, N, Ci, c0, M]() mutable {
      x.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* xg = x.grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < c0; ++c) {
          const double* gr = g + (n * c0 + c) * M;
          double* xr = xg + (n * Ci + c % Ci) * M;
          for (std::int64_t m = 0; m < M; ++m) xr[m] += gr[m];
        }
    });
  }
  return y;
}

inline std::vector<Tensor> align_channels(const std::vector<Tensor>& prev, std::int64_t c0) {
  std::vector<Tensor> out;
  out.reserve(prev.size());
  for (const auto& p : prev) out.push_back(align_channels(p, c0));
  return out;
}

// Row vectors of the squeezed, channel-aligned stack: row 0 is the current
// block, rows 1..R are predecessors, most recent first.
struct SqueezedStack {
  Tensor values;  // [N, rows, C0]

  std::int64_t rows() const { return values.dim(1); }
  std::int64_t channels() const { return values.dim(2); }
};

// Per-entry GAP; rows are kept separate (no cross-entry averaging) because
// the interaction stage indexes them individually.
inline SqueezedStack squeeze_stack(Tensor current, const std::vector<Tensor>& aligned) {
  ops::expect_rank(current, 4, "squeeze_stack", "current");
  if (aligned.empty())
    throw ContractError("squeeze_stack: no aligned predecessors; the global path needs "
                        "at least one cached entry");
  std::vector<Tensor> rows;
  rows.reserve(aligned.size() + 1);
  rows.push_back(ops::gap2d(current));
  for (const auto& a : aligned) {
    ops::expect_rank(a, 4, "squeeze_stack", "aligned entry");
    if (a.dim(0) != current.dim(0))
      throw ShapeError("squeeze_stack: batch axis (0) = " + std::to_string(a.dim(0)) +
                       " does not match current block's " + std::to_string(current.dim(0)));
    if (a.dim(1) != current.dim(1))
      throw ShapeError("squeeze_stack: entry channel axis (1) = " + std::to_string(a.dim(1)) +
                       " is not aligned to " + std::to_string(current.dim(1)));
    rows.push_back(ops::gap2d(a));
  }
  return {ops::stack_rows(rows)};
}

// Collapse the stack to Y, the aggregated previous-knowledge vector.
// weights: FullFC [C0, rows*C0] | Depthwise [C0, rows] | Conv1dOverR [rows];
// unused (and undefined) for Sum.
inline Tensor pk_interact(const SqueezedStack& stack, Interaction mode, Tensor weights) {
  const std::int64_t rows = stack.rows(), c0 = stack.channels();
  switch (mode) {
    case Interaction::Sum:
      return ops::interact_sum(stack.values);
    case Interaction::Conv1dOverR:
      return ops::interact_kernel(stack.values, weights);
    case Interaction::Depthwise:
      return ops::interact_depthwise(stack.values, weights);
    case Interaction::FullFC: {
      if (!weights.defined() || weights.dim(1) != rows * c0)
        throw ContractError("pk_interact: full-fc weight columns " +
                            (weights.defined() ? std::to_string(weights.dim(1)) : "<none>") +
                            " do not match stack size " + std::to_string(rows * c0));
      Tensor flat = ops::reshape(stack.values, Shape{stack.values.dim(0), rows * c0});
      return ops::linear(flat, weights);
    }
  }
  throw ContractError("pk_interact: unknown mode");
}

// Global cross-channel interaction: transform stage only, raw logits.
inline Tensor gcci(Tensor y, const ChannelTransform& transform) {
  ops::expect_rank(y, 2, "gcci", "input");
  return transform.apply(y);
}

// Local cross-channel interaction: squeeze then transform, raw logits.
inline Tensor lcci(Tensor x0, const ChannelTransform& transform) {
  ops::expect_rank(x0, 4, "lcci", "input");
  return transform.apply(ops::gap2d(x0));
}

// S = sigmoid(phi(z1, z2)). Sum: z1+z2; Conv1dK2: two scalars shared across
// channels; FullFC: dense map from the 2*C0 concatenation.
inline Tensor fuse_scales(Tensor z1, Tensor z2, Fusion mode, Tensor weights) {
  ops::expect_rank(z1, 2, "fuse_scales", "z1");
  ops::expect_same_shape(z1, z2, "fuse_scales");
  switch (mode) {
    case Fusion::Sum:
      return ops::sigmoid(ops::add(z1, z2));
    case Fusion::Conv1dK2:
      return ops::sigmoid(ops::fuse_pair(z1, z2, weights));
    case Fusion::FullFC:
      return ops::sigmoid(ops::linear(ops::concat_cols(z1, z2), weights));
  }
  throw ContractError("fuse_scales: unknown mode");
}

class PkcamModule {
 public:
  PkcamModule(std::int64_t channels, PkcamConfig cfg, std::mt19937_64& rng)
      : channels_(channels), cfg_(cfg) {
    if (cfg.paths != Paths::LocalOnly && cfg.coverage < 1)
      throw ConfigError("pkcam: coverage R must be >= 1 unless paths = local");
    const std::int64_t rows = cfg.coverage + 1;
    if (cfg.paths != Paths::GlobalOnly)
      lcci_ = ChannelTransform(cfg.lcci, channels, rng);
    if (cfg.paths != Paths::LocalOnly) {
      gcci_ = ChannelTransform(cfg.gcci, channels, rng);
      switch (cfg.interaction) {
        case Interaction::Conv1dOverR:
          interaction_w_ = Tensor::normal({rows}, 1.0 / std::sqrt(static_cast<double>(rows)), rng);
          break;
        case Interaction::Depthwise:
          interaction_w_ = Tensor::normal({channels, rows},
                                          1.0 / std::sqrt(static_cast<double>(rows)), rng);
          break;
        case Interaction::FullFC:
          interaction_w_ = Tensor::he_normal({channels, rows * channels}, rows * channels, rng);
          break;
        case Interaction::Sum:
          break;
      }
    }
    if (cfg.paths == Paths::Both) {
      switch (cfg.fusion) {
        case Fusion::Conv1dK2:
          fusion_w_ = Tensor::normal({2}, 0.7071, rng);
          break;
        case Fusion::FullFC:
          fusion_w_ = Tensor::he_normal({channels, 2 * channels}, 2 * channels, rng);
          break;
        case Fusion::Sum:
          break;
      }
    }
    audit_param_count();
  }

  // Pre-gate scale logits fused into the final gate S in (0,1).
  ChannelScales scales(Tensor x0, const FeatureCache& cache) const {
    ops::expect_rank(x0, 4, "pkcam", "input");
    if (x0.dim(1) != channels_)
      throw ShapeError("pkcam: channel axis (1) = " + std::to_string(x0.dim(1)) +
                       " does not match configured width " + std::to_string(channels_));
    Tensor z_local, z_global;
    if (cfg_.paths != Paths::GlobalOnly) z_local = lcci(x0, lcci_);
    if (cfg_.paths != Paths::LocalOnly) z_global = global_logits(x0, cache);
    switch (cfg_.paths) {
      case Paths::LocalOnly: return {ops::sigmoid(z_local), true};
      case Paths::GlobalOnly: return {ops::sigmoid(z_global), true};
      case Paths::Both:
        return {fuse_scales(z_global, z_local, cfg_.fusion, fusion_w_), true};
    }
    throw ContractError("pkcam: unknown paths mode");
  }

  // F = S * x0, broadcast over space.
  Tensor forward(Tensor x0, const FeatureCache& cache) const {
    return ops::scale_channels(x0, scales(x0, cache).values);
  }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    if (interaction_w_.defined()) n += interaction_w_.numel();
    if (fusion_w_.defined()) n += fusion_w_.numel();
    if (cfg_.paths != Paths::LocalOnly) n += gcci_.param_count();
    if (cfg_.paths != Paths::GlobalOnly) n += lcci_.param_count();
    return n;
  }

  void register_params(const std::string& p, ParamRegistry& reg) const {
    if (interaction_w_.defined()) reg.add(p + ".interaction_w", interaction_w_);
    if (cfg_.paths != Paths::LocalOnly) gcci_.register_params(p + ".gcci", reg);
    if (cfg_.paths != Paths::GlobalOnly) lcci_.register_params(p + ".lcci", reg);
    if (fusion_w_.defined()) reg.add(p + ".fusion_w", fusion_w_);
  }

  const PkcamConfig& config() const { return cfg_; }
  std::int64_t channels() const { return channels_; }
  Tensor& interaction_weights() { return interaction_w_; }
  Tensor& fusion_weights() { return fusion_w_; }
  ChannelTransform& gcci_transform() { return gcci_; }
  ChannelTransform& lcci_transform() { return lcci_; }

 private:
  Tensor global_logits(Tensor x0, const FeatureCache& cache) const {
    std::vector<Tensor> prev = cache.recent();
    if (prev.empty())
      throw ContractError("pkcam: global path invoked with an empty feature cache");
    if (static_cast<int>(prev.size()) > cfg_.coverage)
      prev.resize(static_cast<std::size_t>(cfg_.coverage));
    for (const auto& p : prev)
      if (p.dim(0) != x0.dim(0))
        throw ShapeError("pkcam: cached entry batch axis (0) = " + std::to_string(p.dim(0)) +
                         " does not match current block's " + std::to_string(x0.dim(0)));
    SqueezedStack stack = squeeze_stack(x0, align_channels(prev, channels_));
    Tensor y = pk_interact(stack, cfg_.interaction, interaction_for_rows(stack.rows()));
    return gcci(y, gcci_);
  }

  // Shrunken stacks early in the network use the leading kernel taps.
  Tensor interaction_for_rows(std::int64_t rows) const {
    if (!interaction_w_.defined()) return interaction_w_;
    switch (cfg_.interaction) {
      case Interaction::Conv1dOverR:
        return rows == interaction_w_.dim(0) ? interaction_w_
                                             : ops::prefix(interaction_w_, rows);
      case Interaction::Depthwise:
        return rows == interaction_w_.dim(1) ? interaction_w_
                                             : ops::prefix_cols(interaction_w_, rows);
      case Interaction::FullFC:
        return rows * channels_ == interaction_w_.dim(1)
                   ? interaction_w_
                   : ops::prefix_cols(interaction_w_, rows * channels_);
      default:
        return interaction_w_;
    }
  }

  void audit_param_count() {
    const std::int64_t rows = cfg_.coverage + 1;
    std::int64_t want = 0;
    if (cfg_.paths != Paths::LocalOnly) {
      switch (cfg_.interaction) {
        case Interaction::Conv1dOverR: want += rows; break;
        case Interaction::Depthwise: want += channels_ * rows; break;
        case Interaction::FullFC: want += channels_ * rows * channels_; break;
        case Interaction::Sum: break;
      }
      want += gcci_.param_count();
    }
    if (cfg_.paths != Paths::GlobalOnly) want += lcci_.param_count();
    if (cfg_.paths == Paths::Both) {
      switch (cfg_.fusion) {
        case Fusion::Conv1dK2: want += 2; break;
        case Fusion::FullFC: want += channels_ * 2 * channels_; break;
        case Fusion::Sum: break;
      }
    }
    require(param_count() == want, "pkcam: parameter audit failed");
  }

  std::int64_t channels_;
  PkcamConfig cfg_;
  ChannelTransform gcci_, lcci_;
  Tensor interaction_w_;
  Tensor fusion_w_;
};

}  // namespace pkcam
