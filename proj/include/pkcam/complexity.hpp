#pragma once

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pkcam/backbone.hpp"

// Static parameter and FLOP counter over a LayerGraph. Counting conventions:
//
//   mac1 (default)  one multiply-accumulate = 1 FLOP; mac2 doubles the
//                   MAC-counted terms (convolutions, FC, 1-D convolutions,
//                   stack interactions) and leaves elementwise terms alone
//   elementwise     sigmoid/relu/add = 1 FLOP per element
//   pooling         one op per input element per channel (H*W adds)
//   channel align   pure data movement, 0 FLOPs
//
// Parameter counts are exact integers derived from the same placement rules
// the runtime network builds from; for every graph they must equal the sum
// of the instantiated tensor sizes (cross-checked in the tests).

namespace pkcam {

enum class FlopConvention { Mac1, Mac2 };

struct LayerCost {
  std::string name;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct CostReport {
  std::vector<LayerCost> rows;
  Shape input_shape;        // empty for parameter-only reports
  std::string convention;   // "mac1", "mac2" or "params"

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& r : rows) n += r.params;
    return n;
  }
  std::int64_t total_flops() const {
    std::int64_t n = 0;
    for (const auto& r : rows) n += r.flops;
    return n;
  }
};

namespace cost {

struct Ctx {
  bool with_flops = false;
  std::int64_t N = 1;
  std::int64_t mac = 1;
};

inline std::int64_t conv_params(std::int64_t cin, std::int64_t cout, int k) {
  return cout * cin * k * k;
}

inline std::int64_t transform_params(const AttentionKind& kind, std::int64_t C) {
  switch (kind.tag) {
    case AttentionBackendTag::SE:
      return 2 * C * C / kind.reduction + C / kind.reduction + C;
    case AttentionBackendTag::ECA:
      return kind.kernel == 0 ? eca_kernel_for(C) : kind.kernel;
    case AttentionBackendTag::SRM:
      return C;  // single squeezed style per channel
    default:
      throw ConfigError("cost: gc cannot back a cross-channel interaction stage");
  }
}

inline std::int64_t transform_flops(const AttentionKind& kind, std::int64_t C,
                                    const Ctx& c) {
  switch (kind.tag) {
    case AttentionBackendTag::SE: {
      const std::int64_t mid = C / kind.reduction;
      return c.mac * 2 * C * mid + 2 * mid + C;  // two FCs + biases/relu
    }
    case AttentionBackendTag::ECA:
      return c.mac * (kind.kernel == 0 ? eca_kernel_for(C) : kind.kernel) * C;
    case AttentionBackendTag::SRM:
      return c.mac * C;
    default:
      return 0;
  }
}

inline std::int64_t pkcam_params(const PkcamConfig& cfg, std::int64_t C) {
  const std::int64_t rows = cfg.coverage + 1;
  std::int64_t n = 0;
  if (cfg.paths != Paths::LocalOnly) {
    switch (cfg.interaction) {
      case Interaction::Conv1dOverR: n += rows; break;
      case Interaction::Depthwise: n += C * rows; break;
      case Interaction::FullFC: n += C * rows * C; break;
      case Interaction::Sum: break;
    }
    n += transform_params(cfg.gcci, C);
  }
  if (cfg.paths != Paths::GlobalOnly) n += transform_params(cfg.lcci, C);
  if (cfg.paths == Paths::Both) {
    switch (cfg.fusion) {
      case Fusion::Conv1dK2: n += 2; break;
      case Fusion::FullFC: n += C * 2 * C; break;
      case Fusion::Sum: break;
    }
  }
  return n;
}

struct Endpoint {
  std::int64_t C, H, W;
};

// Flops of one attention application at a block of width C and spatial
// extent M = H*W; `endpoints` are the preceding stage outputs (newest last).
inline std::int64_t attention_flops(const PlacedAttention& p, std::int64_t C,
                                    std::int64_t M, const std::vector<Endpoint>& endpoints,
                                    const Ctx& c) {
  if (!c.with_flops) return 0;
  const std::int64_t N = c.N;
  switch (p.choice) {
    case AttentionChoice::None:
      return 0;
    case AttentionChoice::SE:
      return N * (C * M + transform_flops(p.kind, C, c) + C + C * M);
    case AttentionChoice::ECA:
      return N * (C * M + transform_flops(p.kind, C, c) + C + C * M);
    case AttentionChoice::SRM:
      return N * (3 * C * M + c.mac * 2 * C + C + C * M);  // gap + 2-pass std
    case AttentionChoice::GC: {
      const std::int64_t mid = C / p.kind.reduction;
      const std::int64_t ctx = c.mac * C * M + M;       // 1x1 conv + bias
      const std::int64_t sm = 3 * M;                    // softmax over positions
      const std::int64_t attend = c.mac * C * M;
      const std::int64_t mlp = c.mac * 2 * C * mid + 2 * mid + C;
      return N * (ctx + sm + attend + mlp + C * M);     // + additive fusion
    }
    case AttentionChoice::PKCAM: {
      const PkcamConfig& cfg = p.pkcam;
      std::int64_t f = 0;
      if (cfg.paths != Paths::GlobalOnly)
        f += C * M + transform_flops(cfg.lcci, C, c);  // lcci: gap + transform
      if (cfg.paths != Paths::LocalOnly) {
        const std::int64_t used =
            std::min<std::int64_t>(cfg.coverage, static_cast<std::int64_t>(endpoints.size()));
        const std::int64_t rows = 1 + used;
        f += C * M;  // squeeze of the current block
        for (std::int64_t i = 0; i < used; ++i) {
          const Endpoint& e = endpoints[endpoints.size() - 1 - static_cast<std::size_t>(i)];
          f += C * e.H * e.W;  // squeeze of the aligned predecessor
        }
        switch (cfg.interaction) {
          case Interaction::Sum: f += rows * C; break;
          case Interaction::Conv1dOverR: f += c.mac * rows * C; break;
          case Interaction::Depthwise: f += c.mac * rows * C; break;
          case Interaction::FullFC: f += c.mac * rows * C * C; break;
        }
        f += transform_flops(cfg.gcci, C, c);
      }
      if (cfg.paths == Paths::Both) {
        switch (cfg.fusion) {
          case Fusion::Sum: f += C; break;
          case Fusion::Conv1dK2: f += c.mac * 2 * C; break;
          case Fusion::FullFC: f += c.mac * 2 * C * C; break;
        }
      }
      f += C + C * M;  // final sigmoid + recalibration
      return N * f;
    }
  }
  return 0;
}

inline std::int64_t attention_params(const PlacedAttention& p, std::int64_t C) {
  switch (p.choice) {
    case AttentionChoice::None: return 0;
    case AttentionChoice::SE:
      return 2 * C * C / p.kind.reduction + C / p.kind.reduction + C;
    case AttentionChoice::ECA:
      return p.kind.kernel == 0 ? eca_kernel_for(C) : p.kind.kernel;
    case AttentionChoice::SRM:
      return 2 * C;
    case AttentionChoice::GC:
      return C + 1 + 2 * C * C / p.kind.reduction + C / p.kind.reduction + C;
    case AttentionChoice::PKCAM:
      return pkcam_params(p.pkcam, C);
  }
  return 0;
}

}  // namespace cost

inline CostReport analyze_cost(const LayerGraph& g, std::optional<Shape> input,
                               FlopConvention convention = FlopConvention::Mac1) {
  g.validate();
  cost::Ctx c;
  c.mac = convention == FlopConvention::Mac2 ? 2 : 1;
  std::int64_t H = 0, W = 0;
  if (input) {
    const Shape& in = *input;
    if (in.size() != 4)
      throw ConfigError("cost: input shape must be N,C,H,W, got " + shape_str(in));
    if (in[1] != g.in_channels)
      throw ConfigError("cost: input channel axis (1) = " + std::to_string(in[1]) +
                        " does not match backbone input channels " +
                        std::to_string(g.in_channels));
    c.with_flops = true;
    c.N = in[0];
    H = in[2];
    W = in[3];
  }

  CostReport rep;
  rep.convention = !input ? "params" : (c.mac == 2 ? "mac2" : "mac1");
  if (input) rep.input_shape = *input;

  auto conv_out = [](std::int64_t extent, int k, int stride, int pad) {
    return (extent + 2 * pad - k) / stride + 1;
  };
  auto add_row = [&](const std::string& name, std::int64_t params, std::int64_t flops) {
    rep.rows.push_back({name, params, c.with_flops ? flops : 0});
  };
  auto conv_row = [&](const std::string& name, std::int64_t cin, std::int64_t cout, int k,
                      int stride) {
    if (c.with_flops) {
      H = conv_out(H, k, stride, (k - 1) / 2);
      W = conv_out(W, k, stride, (k - 1) / 2);
    }
    add_row(name, cost::conv_params(cin, cout, k), c.mac * cout * cin * k * k * H * W * c.N);
  };
  auto norm_row = [&](const std::string& name, std::int64_t ch) {
    add_row(name, 2 * ch, 2 * ch * H * W * c.N);
  };

  const std::int64_t stem_w = g.stem_width();
  if (g.stem == StemKind::Full) {
    conv_row("stem.conv", g.in_channels, stem_w, 7, 2);
    norm_row("stem.norm", stem_w);
    add_row("stem.act", 0, stem_w * H * W * c.N);
    add_row("stem.pool", 0, stem_w * H * W * c.N);
    if (c.with_flops) {
      H = conv_out(H, 3, 2, 1);
      W = conv_out(W, 3, 2, 1);
    }
  } else {
    conv_row("stem.conv", g.in_channels, stem_w, 3, 1);
    norm_row("stem.norm", stem_w);
    add_row("stem.act", 0, stem_w * H * W * c.N);
  }

  std::vector<cost::Endpoint> endpoints;
  std::int64_t in = stem_w;
  for (std::size_t s = 0; s < g.stages.size(); ++s) {
    const StageSpec& spec = g.stages[s];
    const std::int64_t out = g.block_out_width(static_cast<int>(s));
    for (int bi = 0; bi < spec.blocks; ++bi) {
      const int stride = bi == 0 ? spec.stride : 1;
      const std::string p = "s" + std::to_string(s) + ".b" + std::to_string(bi);
      const std::int64_t Hin = H, Win = W;
      std::int64_t relus = 0;
      if (g.block_kind == BlockKind::Basic) {
        conv_row(p + ".conv1", in, spec.width, 3, stride);
        norm_row(p + ".norm1", spec.width);
        relus += spec.width * H * W * c.N;
        conv_row(p + ".conv2", spec.width, out, 3, 1);
        norm_row(p + ".norm2", out);
      } else {
        conv_row(p + ".conv1", in, spec.width, 1, 1);
        norm_row(p + ".norm1", spec.width);
        relus += spec.width * Hin * Win * c.N;
        conv_row(p + ".conv2", spec.width, spec.width, 3, stride);
        norm_row(p + ".norm2", spec.width);
        relus += spec.width * H * W * c.N;
        conv_row(p + ".conv3", spec.width, out, 1, 1);
        norm_row(p + ".norm3", out);
      }
      if (stride != 1 || in != out) {
        add_row(p + ".down", cost::conv_params(in, out, 1),
                c.mac * out * in * H * W * c.N);
        norm_row(p + ".ndown", out);
      }
      PlacedAttention placed = g.placement(static_cast<int>(s), bi);
      add_row(p + ".att", cost::attention_params(placed, out),
              cost::attention_flops(placed, out, H * W, endpoints, c));
      // skip add plus output relu plus the branch relus
      add_row(p + ".elem", 0, relus + 2 * out * H * W * c.N);
      in = out;
    }
    endpoints.push_back({out, H, W});
  }
  add_row("head.pool", 0, in * H * W * c.N);
  add_row("head.fc", g.classes * in + g.classes, c.mac * g.classes * in * c.N + g.classes * c.N);
  return rep;
}

inline CostReport count_params(const LayerGraph& g) { return analyze_cost(g, std::nullopt); }

inline CostReport count_flops(const LayerGraph& g, const Shape& input,
                              FlopConvention convention = FlopConvention::Mac1) {
  return analyze_cost(g, input, convention);
}

inline std::string cost_csv(const CostReport& rep) {
  std::ostringstream os;
  os << "layer,params,flops\n";
  for (const auto& r : rep.rows) os << r.name << ',' << r.params << ',' << r.flops << '\n';
  return os.str();
}

}  // namespace pkcam
