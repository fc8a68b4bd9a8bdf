#pragma once

#include <cmath>
#include <random>
#include <string>

#include "pkcam/ops.hpp"
#include "pkcam/params.hpp"

// The four baseline channel-attention mechanisms, each decomposed into
// context modeling / transform / fusion:
//
//   SE   Y = GAP(X)             Z = sigmoid(FC(ReLU(FC(Y))))   F = Z * X
//   ECA  Y = GAP(X)             Z = sigmoid(C1D_k(Y))          F = Z * X
//   SRM  Y = [GAP(X), SP(X)]    Z = sigmoid(sum_d Y . W)       F = Z * X
//   GC   Y = X (x) SM(conv(X))  Z = FC(ReLU(FC(Y)))            F = Z + X
//
// GC's fusion is additive and ungated. Bottlenecks carry biases; SRM's style
// integration is the bare per-channel weight, no batch norm.

namespace pkcam {

enum class AttentionBackendTag { SE, ECA, SRM, GC };

inline const char* to_string(AttentionBackendTag t) {
  switch (t) {
    case AttentionBackendTag::SE: return "se";
    case AttentionBackendTag::ECA: return "eca";
    case AttentionBackendTag::SRM: return "srm";
    case AttentionBackendTag::GC: return "gc";
  }
  return "?";
}

// Declarative choice of mechanism plus its hyperparameters.
struct AttentionKind {
  AttentionBackendTag tag = AttentionBackendTag::ECA;
  int reduction = 16;  // SE, GC
  int kernel = 0;      // ECA; 0 selects the adaptive rule

  static AttentionKind se(int r = 16) { return {AttentionBackendTag::SE, r, 0}; }
  static AttentionKind eca(int k = 0) { return {AttentionBackendTag::ECA, 16, k}; }
  static AttentionKind srm() { return {AttentionBackendTag::SRM, 16, 0}; }
  static AttentionKind gc(int r = 16) { return {AttentionBackendTag::GC, r, 0}; }
};

// Adaptive ECA kernel: nearest odd to log2(C)/2 + 1/2, ties rounded up,
// never below 3.
inline int eca_kernel_for(std::int64_t channels) {
  const double t = std::log2(static_cast<double>(channels)) / 2.0 + 0.5;
  const int lo = 2 * static_cast<int>(std::floor((t - 1.0) / 2.0)) + 1;
  const int hi = lo + 2;
  int k = (t - lo < hi - t) ? lo : hi;
  return std::max(3, k);
}

inline int resolve_eca_kernel(const AttentionKind& kind, std::int64_t channels) {
  if (kind.kernel == 0) return eca_kernel_for(channels);
  if (kind.kernel % 2 == 0)
    throw ConfigError("eca: kernel size must be odd, got " + std::to_string(kind.kernel));
  return kind.kernel;
}

// The Z of the table: per-channel weights, pre- or post-sigmoid as flagged.
struct ChannelScales {
  Tensor values;  // [N,C]
  bool gated = false;
};

// Shared squeeze-expand bottleneck (SE and GC transform stage).
struct BottleneckMlp {
  Tensor w1, b1;  // [C/r, C], [C/r]
  Tensor w2, b2;  // [C, C/r], [C]

  BottleneckMlp() = default;
  BottleneckMlp(std::int64_t channels, int reduction, std::mt19937_64& rng) {
    if (reduction < 1)
      throw ConfigError("attention: reduction ratio must be >= 1, got " +
                        std::to_string(reduction));
    if (channels % reduction != 0)
      throw ConfigError("attention: reduction ratio " + std::to_string(reduction) +
                        " does not divide channel count " + std::to_string(channels));
    const std::int64_t mid = channels / reduction;
    w1 = Tensor::he_normal({mid, channels}, channels, rng);
    b1 = Tensor::zeros({mid});
    w2 = Tensor::he_normal({channels, mid}, mid, rng);
    b2 = Tensor::zeros({channels});
  }

  Tensor apply(Tensor y) const {
    return ops::fc(ops::relu(ops::fc(y, w1, b1)), w2, b2);
  }

  std::int64_t param_count() const {
    return w1.numel() + b1.numel() + w2.numel() + b2.numel();
  }

  void register_params(const std::string& p, ParamRegistry& reg) const {
    reg.add(p + ".w1", w1);
    reg.add(p + ".b1", b1);
    reg.add(p + ".w2", w2);
    reg.add(p + ".b2", b2);
  }
};

class SeModule {
 public:
  SeModule(std::int64_t channels, int reduction, std::mt19937_64& rng)
      : channels_(channels), reduction_(reduction), mlp_(channels, reduction, rng) {
    // audit: 2 C^2/r + C/r + C
    require(param_count() == 2 * channels * channels / reduction + channels / reduction +
                                 channels,
            "se: parameter audit failed");
  }

  Tensor transform(Tensor y) const { return mlp_.apply(y); }

  ChannelScales scales(Tensor x) const {
    return {ops::sigmoid(transform(ops::gap2d(x))), true};
  }

  Tensor forward(Tensor x) const { return ops::scale_channels(x, scales(x).values); }

  std::int64_t param_count() const { return mlp_.param_count(); }
  std::int64_t channels() const { return channels_; }

  void register_params(const std::string& p, ParamRegistry& reg) const {
    mlp_.register_params(p, reg);
  }

  BottleneckMlp& mlp() { return mlp_; }

 private:
  std::int64_t channels_;
  int reduction_;
  BottleneckMlp mlp_;
};

class EcaModule {
 public:
  EcaModule(std::int64_t channels, const AttentionKind& kind, std::mt19937_64& rng)
      : channels_(channels), k_(resolve_eca_kernel(kind, channels)) {
    kernel_ = Tensor::normal({k_}, 1.0 / std::sqrt(static_cast<double>(k_)), rng);
    require(param_count() == k_, "eca: parameter audit failed");
  }

  int kernel_size() const { return k_; }

  Tensor transform(Tensor y) const { return ops::conv1d_same(y, kernel_); }

  ChannelScales scales(Tensor x) const {
    return {ops::sigmoid(transform(ops::gap2d(x))), true};
  }

  Tensor forward(Tensor x) const { return ops::scale_channels(x, scales(x).values); }

  std::int64_t param_count() const { return kernel_.numel(); }
  std::int64_t channels() const { return channels_; }

  void register_params(const std::string& p, ParamRegistry& reg) const {
    reg.add(p + ".kernel", kernel_);
  }

  Tensor& kernel() { return kernel_; }

 private:
  std::int64_t channels_;
  int k_;
  Tensor kernel_;
};

class SrmModule {
 public:
  SrmModule(std::int64_t channels, std::mt19937_64& rng) : channels_(channels) {
    style_w_ = Tensor::normal({channels, 2}, 1.0, rng);
    require(param_count() == 2 * channels, "srm: parameter audit failed");
  }

  ChannelScales scales(Tensor x) const {
    Tensor mean = ops::gap2d(x);
    Tensor stdev = ops::std2d(x);
    return {ops::sigmoid(ops::style_integrate(mean, stdev, style_w_)), true};
  }

  Tensor forward(Tensor x) const { return ops::scale_channels(x, scales(x).values); }

  std::int64_t param_count() const { return style_w_.numel(); }
  std::int64_t channels() const { return channels_; }

  void register_params(const std::string& p, ParamRegistry& reg) const {
    reg.add(p + ".style_w", style_w_);
  }

  Tensor& style_weight() { return style_w_; }

 private:
  std::int64_t channels_;
  Tensor style_w_;
};

class GcModule {
 public:
  GcModule(std::int64_t channels, int reduction, std::mt19937_64& rng)
      : channels_(channels), mlp_(channels, reduction, rng) {
    ctx_w_ = Tensor::he_normal({1, channels, 1, 1}, channels, rng);
    ctx_b_ = Tensor::zeros({1});
    require(param_count() == channels + 1 +
                                 2 * channels * channels / reduction +
                                 channels / reduction + channels,
            "gc: parameter audit failed");
  }

  // Query-independent spatial attention over the H*W positions.
  Tensor context(Tensor x) const {
    Tensor logits = ops::conv2d(x, ctx_w_, ctx_b_, 1, 0);  // [N,1,H,W]
    Tensor flat = ops::reshape(logits, Shape{x.dim(0), x.dim(2) * x.dim(3)});
    return ops::spatial_attend(x, ops::softmax(flat, 1));  // [N,C]
  }

  // Ungated: GC fuses additively, no sigmoid.
  ChannelScales scales(Tensor x) const { return {mlp_.apply(context(x)), false}; }

  Tensor forward(Tensor x) const { return ops::add_channels(x, scales(x).values); }

  std::int64_t param_count() const {
    return ctx_w_.numel() + ctx_b_.numel() + mlp_.param_count();
  }
  std::int64_t channels() const { return channels_; }

  void register_params(const std::string& p, ParamRegistry& reg) const {
    reg.add(p + ".ctx_w", ctx_w_);
    reg.add(p + ".ctx_b", ctx_b_);
    mlp_.register_params(p, reg);
  }

  Tensor& context_weight() { return ctx_w_; }
  Tensor& context_bias() { return ctx_b_; }
  BottleneckMlp& mlp() { return mlp_; }

 private:
  std::int64_t channels_;
  Tensor ctx_w_, ctx_b_;
  BottleneckMlp mlp_;
};

// The transform stage alone, as pluggable LCCI/GCCI backend: maps a squeezed
// [N,C] vector to pre-gate logits. GC is rejected here; its additive,
// ungated fusion cannot feed a scale-fusion stage.
class ChannelTransform {
 public:
  ChannelTransform() = default;

  ChannelTransform(AttentionKind kind, std::int64_t channels, std::mt19937_64& rng)
      : kind_(kind), channels_(channels) {
    switch (kind.tag) {
      case AttentionBackendTag::SE:
        mlp_ = BottleneckMlp(channels, kind.reduction, rng);
        break;
      case AttentionBackendTag::ECA:
        kernel_ = Tensor::normal({resolve_eca_kernel(kind, channels)},
                                 1.0 / std::sqrt(static_cast<double>(
                                           resolve_eca_kernel(kind, channels))),
                                 rng);
        break;
      case AttentionBackendTag::SRM:
        // Single squeezed style per channel (d = 1): one weight per channel.
        style_w_ = Tensor::normal({channels}, 1.0, rng);
        break;
      case AttentionBackendTag::GC:
        throw ConfigError(
            "channel transform: gc cannot back the cross-channel interaction stage");
    }
  }

  Tensor apply(Tensor y) const {
    ops::expect_rank(y, 2, "channel_transform", "input");
    if (y.dim(1) != channels_)
      throw ShapeError("channel_transform: channel axis (1) = " + std::to_string(y.dim(1)) +
                       " does not match configured width " + std::to_string(channels_));
    switch (kind_.tag) {
      case AttentionBackendTag::SE: return mlp_.apply(y);
      case AttentionBackendTag::ECA: return ops::conv1d_same(y, kernel_);
      case AttentionBackendTag::SRM: return ops::mul_rowvec(y, style_w_);
      default: throw ConfigError("channel_transform: unsupported backend");
    }
  }

  std::int64_t param_count() const {
    switch (kind_.tag) {
      case AttentionBackendTag::SE: return mlp_.param_count();
      case AttentionBackendTag::ECA: return kernel_.numel();
      case AttentionBackendTag::SRM: return style_w_.numel();
      default: return 0;
    }
  }

  void register_params(const std::string& p, ParamRegistry& reg) const {
    switch (kind_.tag) {
      case AttentionBackendTag::SE: mlp_.register_params(p, reg); break;
      case AttentionBackendTag::ECA: reg.add(p + ".kernel", kernel_); break;
      case AttentionBackendTag::SRM: reg.add(p + ".style_w", style_w_); break;
      default: break;
    }
  }

  const AttentionKind& kind() const { return kind_; }
  std::int64_t channels() const { return channels_; }
  Tensor& kernel() { return kernel_; }
  Tensor& style_weight() { return style_w_; }
  BottleneckMlp& mlp() { return mlp_; }

 private:
  AttentionKind kind_;
  std::int64_t channels_ = 0;
  BottleneckMlp mlp_;
  Tensor kernel_;
  Tensor style_w_;
};

}  // namespace pkcam
