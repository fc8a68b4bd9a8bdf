#pragma once

#include <cstdio>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "pkcam/pkcam.hpp"

// Residual backbones (basic-block and bottleneck families) with pluggable
// per-block channel attention and two PKCAM integration policies:
//
//   AllBlocks          every residual block carries PKCAM
//   LastBlockPerStage  PKCAM on each stage's final block, the configured
//                      local attention (LCA) on the rest
//
// Attention sits after the last convolution of the residual branch, before
// the skip addition. The feature cache holds stage endpoints (the output of
// each completed stage's final block, after its own attention and skip), so
// PKCAM sees refined predecessors. Blocks in the first stage have no
// predecessors; their PKCAM degrades to the local-only path, which is
// recorded in the build notes.
//
// There is no batch norm: blocks use a per-channel learned scale and shift
// ("norm-lite") after each convolution.

namespace pkcam {

enum class BlockKind { Basic, Bottleneck };
enum class StemKind { Full, Compact };  // 7x7/2 + maxpool vs 3x3/1
enum class IntegrationPolicy { AllBlocks, LastBlockPerStage };
enum class AttentionChoice { None, SE, ECA, SRM, GC, PKCAM };

inline const char* to_string(AttentionChoice c) {
  switch (c) {
    case AttentionChoice::None: return "none";
    case AttentionChoice::SE: return "se";
    case AttentionChoice::ECA: return "eca";
    case AttentionChoice::SRM: return "srm";
    case AttentionChoice::GC: return "gc";
    case AttentionChoice::PKCAM: return "pkcam";
  }
  return "?";
}

inline const char* to_string(IntegrationPolicy p) {
  return p == IntegrationPolicy::AllBlocks ? "all" : "last";
}

struct AttentionConfig {
  AttentionChoice choice = AttentionChoice::None;
  AttentionKind kind = AttentionKind::eca();  // standalone baselines
  PkcamConfig pkcam;                          // when choice == PKCAM
  IntegrationPolicy policy = IntegrationPolicy::LastBlockPerStage;
};

struct StageSpec {
  int blocks;
  std::int64_t width;  // bottleneck blocks expand this by 4
  int stride;
};

// What one block's attention slot holds after placement resolution.
struct PlacedAttention {
  AttentionChoice choice = AttentionChoice::None;
  AttentionKind kind;
  PkcamConfig pkcam;
};

// Backbone description: stages, block family, attention placement, head.
// Built graphs are immutable; the complexity analyzer walks the same
// structure the runtime network is built from.
struct LayerGraph {
  BlockKind block_kind = BlockKind::Basic;
  StemKind stem = StemKind::Compact;
  std::int64_t in_channels = 3;
  std::int64_t classes = 10;
  std::vector<StageSpec> stages;
  AttentionConfig attention;

  std::int64_t expansion() const { return block_kind == BlockKind::Bottleneck ? 4 : 1; }
  std::int64_t stem_width() const { return stages.front().width; }
  std::int64_t block_out_width(int stage) const {
    return stages[static_cast<std::size_t>(stage)].width * expansion();
  }
  std::int64_t final_width() const {
    return block_out_width(static_cast<int>(stages.size()) - 1);
  }

  void validate() const {
    if (stages.empty()) throw ConfigError("backbone: at least one stage is required");
    if (classes < 2) throw ConfigError("backbone: need at least 2 classes");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (stages[i].blocks < 1 || stages[i].width < 1 || stages[i].stride < 1)
        throw ConfigError("backbone: illegal stage spec at stage " + std::to_string(i));
      if (i > 0 && stages[i].width < stages[i - 1].width)
        throw ConfigError("backbone: channel widths must be non-decreasing across stages "
                          "(required by channel alignment)");
    }
  }

  // Attention placement for (stage, block), with first-stage PKCAM blocks
  // degraded to the local-only path.
  PlacedAttention placement(int stage, int block) const {
    PlacedAttention p;
    switch (attention.choice) {
      case AttentionChoice::None:
        return p;
      case AttentionChoice::PKCAM: {
        const bool last = block == stages[static_cast<std::size_t>(stage)].blocks - 1;
        const bool pk_here =
            attention.policy == IntegrationPolicy::AllBlocks || last;
        if (!pk_here) {
          p.choice = lca_choice();
          p.kind = attention.pkcam.lcci;
          return p;
        }
        p.choice = AttentionChoice::PKCAM;
        p.pkcam = attention.pkcam;
        if (stage == 0 && p.pkcam.paths != Paths::LocalOnly)
          p.pkcam.paths = Paths::LocalOnly;  // no predecessors yet
        return p;
      }
      default:
        p.choice = attention.choice;
        p.kind = attention.kind;
        return p;
    }
  }

  bool pkcam_degrades(int stage, int block) const {
    return attention.choice == AttentionChoice::PKCAM && stage == 0 &&
           attention.pkcam.paths != Paths::LocalOnly &&
           placement(stage, block).choice == AttentionChoice::PKCAM;
  }

 private:
  AttentionChoice lca_choice() const {
    switch (attention.pkcam.lcci.tag) {
      case AttentionBackendTag::SE: return AttentionChoice::SE;
      case AttentionBackendTag::SRM: return AttentionChoice::SRM;
      default: return AttentionChoice::ECA;
    }
  }
};

inline LayerGraph make_resnet_graph(int depth, AttentionConfig att,
                                    std::int64_t classes = 1000,
                                    StemKind stem = StemKind::Full) {
  LayerGraph g;
  g.stem = stem;
  g.classes = classes;
  g.attention = att;
  switch (depth) {
    case 18:
      g.block_kind = BlockKind::Basic;
      g.stages = {{2, 64, 1}, {2, 128, 2}, {2, 256, 2}, {2, 512, 2}};
      break;
    case 34:
      g.block_kind = BlockKind::Basic;
      g.stages = {{3, 64, 1}, {4, 128, 2}, {6, 256, 2}, {3, 512, 2}};
      break;
    case 50:
      g.block_kind = BlockKind::Bottleneck;
      g.stages = {{3, 64, 1}, {4, 128, 2}, {6, 256, 2}, {3, 512, 2}};
      break;
    default:
      throw ConfigError("backbone: unsupported depth " + std::to_string(depth) +
                        " (expected 18, 34 or 50)");
  }
  g.validate();
  return g;
}

inline LayerGraph make_tiny_graph(const std::vector<int>& blocks,
                                  const std::vector<std::int64_t>& widths,
                                  AttentionConfig att, std::int64_t classes) {
  if (blocks.size() != widths.size() || blocks.empty())
    throw ConfigError("backbone: tiny spec needs matching non-empty block/width lists");
  LayerGraph g;
  g.stem = StemKind::Compact;
  g.classes = classes;
  g.attention = att;
  g.block_kind = BlockKind::Basic;
  for (std::size_t i = 0; i < blocks.size(); ++i)
    g.stages.push_back({blocks[i], widths[i], i == 0 ? 1 : 2});
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Runtime network
// ---------------------------------------------------------------------------

struct ConvLayer {
  Tensor w;  // [Cout, Cin, k, k]
  int stride = 1;
  int pad = 0;

  Tensor forward(Tensor x) const { return ops::conv2d(x, w, stride, pad); }
};

struct NormLite {
  Tensor gamma, beta;

  Tensor forward(Tensor x) const { return ops::channel_affine(x, gamma, beta); }
};

// Type-erased per-block attention slot.
class AttentionModule {
 public:
  AttentionModule() = default;

  static AttentionModule make(const PlacedAttention& p, std::int64_t channels,
                              std::mt19937_64& rng) {
    AttentionModule m;
    switch (p.choice) {
      case AttentionChoice::None: break;
      case AttentionChoice::SE: m.v_ = SeModule(channels, p.kind.reduction, rng); break;
      case AttentionChoice::ECA: m.v_ = EcaModule(channels, p.kind, rng); break;
      case AttentionChoice::SRM: m.v_ = SrmModule(channels, rng); break;
      case AttentionChoice::GC: m.v_ = GcModule(channels, p.kind.reduction, rng); break;
      case AttentionChoice::PKCAM: m.v_ = PkcamModule(channels, p.pkcam, rng); break;
    }
    return m;
  }

  bool empty() const { return std::holds_alternative<std::monostate>(v_); }

  Tensor forward(Tensor x, const FeatureCache& cache) const {
    if (auto* se = std::get_if<SeModule>(&v_)) return se->forward(x);
    if (auto* eca = std::get_if<EcaModule>(&v_)) return eca->forward(x);
    if (auto* srm = std::get_if<SrmModule>(&v_)) return srm->forward(x);
    if (auto* gc = std::get_if<GcModule>(&v_)) return gc->forward(x);
    if (auto* pk = std::get_if<PkcamModule>(&v_)) return pk->forward(x, cache);
    return x;
  }

  std::int64_t param_count() const {
    if (auto* se = std::get_if<SeModule>(&v_)) return se->param_count();
    if (auto* eca = std::get_if<EcaModule>(&v_)) return eca->param_count();
    if (auto* srm = std::get_if<SrmModule>(&v_)) return srm->param_count();
    if (auto* gc = std::get_if<GcModule>(&v_)) return gc->param_count();
    if (auto* pk = std::get_if<PkcamModule>(&v_)) return pk->param_count();
    return 0;
  }

  void register_params(const std::string& p, ParamRegistry& reg) const {
    if (auto* se = std::get_if<SeModule>(&v_)) se->register_params(p, reg);
    if (auto* eca = std::get_if<EcaModule>(&v_)) eca->register_params(p, reg);
    if (auto* srm = std::get_if<SrmModule>(&v_)) srm->register_params(p, reg);
    if (auto* gc = std::get_if<GcModule>(&v_)) gc->register_params(p, reg);
    if (auto* pk = std::get_if<PkcamModule>(&v_)) pk->register_params(p, reg);
  }

 private:
  std::variant<std::monostate, SeModule, EcaModule, SrmModule, GcModule, PkcamModule> v_;
};

struct BlockModule {
  ConvLayer c1, c2, c3;  // c3 only for bottleneck
  NormLite n1, n2, n3;
  bool has_c3 = false;
  bool has_down = false;
  ConvLayer down;
  NormLite ndown;
  AttentionModule att;
};

class Network {
 public:
  Network(LayerGraph graph, std::uint64_t seed) : graph_(std::move(graph)) {
    graph_.validate();
    std::mt19937_64 rng(seed);
    build(rng);
    register_all();
  }

  const LayerGraph& graph() const { return graph_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }
  const std::vector<std::string>& build_notes() const { return notes_; }

  std::int64_t param_count() const { return params_.total_params(); }

  // Sum of the per-attention-module audited counts (the delta over vanilla).
  std::int64_t attention_param_count() const {
    std::int64_t n = 0;
    for (const auto& stage : blocks_)
      for (const auto& b : stage) n += b.att.param_count();
    return n;
  }

  // [N,3,H,W] -> [N,classes]. The feature cache is pass-local.
  Tensor forward(Tensor x) const {
    Tensor h = stem_.forward(x);
    h = ops::relu(nstem_.forward(h));
    if (stem_pool_) h = ops::maxpool2d(h, 3, 2, 1);
    FeatureCache cache(cache_capacity());
    int block_id = 0;
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      for (const auto& b : blocks_[s]) {
        h = block_forward(b, h, cache);
        ++block_id;
      }
      cache.push(block_id - 1, h);  // stage endpoint, after its own attention
    }
    Tensor pooled = ops::gap2d(h);
    return ops::fc(pooled, head_w_, head_b_);
  }

 private:
  int cache_capacity() const {
    return graph_.attention.choice == AttentionChoice::PKCAM
               ? graph_.attention.pkcam.coverage
               : 0;
  }

  Tensor block_forward(const BlockModule& b, Tensor x, FeatureCache& cache) const {
    Tensor h = ops::relu(b.n1.forward(b.c1.forward(x)));
    if (b.has_c3) {
      h = ops::relu(b.n2.forward(b.c2.forward(h)));
      h = b.n3.forward(b.c3.forward(h));
    } else {
      h = b.n2.forward(b.c2.forward(h));
    }
    if (!b.att.empty()) h = b.att.forward(h, cache);
    Tensor skip = b.has_down ? b.ndown.forward(b.down.forward(x)) : x;
    return ops::relu(ops::add(h, skip));
  }

  static ConvLayer make_conv(std::int64_t cin, std::int64_t cout, int k, int stride,
                             std::mt19937_64& rng) {
    ConvLayer c;
    c.w = Tensor::he_normal({cout, cin, k, k}, cin * k * k, rng);
    c.stride = stride;
    c.pad = (k - 1) / 2;
    return c;
  }

  static NormLite make_norm(std::int64_t c) {
    return {Tensor::ones({c}), Tensor::zeros({c})};
  }

  void build(std::mt19937_64& rng) {
    const std::int64_t stem_w = graph_.stem_width();
    if (graph_.stem == StemKind::Full) {
      stem_ = make_conv(graph_.in_channels, stem_w, 7, 2, rng);
      stem_pool_ = true;
    } else {
      stem_ = make_conv(graph_.in_channels, stem_w, 3, 1, rng);
      stem_pool_ = false;
    }
    nstem_ = make_norm(stem_w);

    std::int64_t in = stem_w;
    for (std::size_t s = 0; s < graph_.stages.size(); ++s) {
      const StageSpec& spec = graph_.stages[s];
      std::vector<BlockModule> stage;
      for (int bi = 0; bi < spec.blocks; ++bi) {
        const int stride = bi == 0 ? spec.stride : 1;
        const std::int64_t out = graph_.block_out_width(static_cast<int>(s));
        BlockModule b;
        if (graph_.block_kind == BlockKind::Basic) {
          b.c1 = make_conv(in, spec.width, 3, stride, rng);
          b.n1 = make_norm(spec.width);
          b.c2 = make_conv(spec.width, out, 3, 1, rng);
          b.n2 = make_norm(out);
        } else {
          b.c1 = make_conv(in, spec.width, 1, 1, rng);
          b.n1 = make_norm(spec.width);
          b.c2 = make_conv(spec.width, spec.width, 3, stride, rng);
          b.n2 = make_norm(spec.width);
          b.c3 = make_conv(spec.width, out, 1, 1, rng);
          b.n3 = make_norm(out);
          b.has_c3 = true;
        }
        if (stride != 1 || in != out) {
          b.has_down = true;
          b.down = make_conv(in, out, 1, stride, rng);
          b.ndown = make_norm(out);
        }
        PlacedAttention placed = graph_.placement(static_cast<int>(s), bi);
        b.att = AttentionModule::make(placed, out, rng);
        if (graph_.pkcam_degrades(static_cast<int>(s), bi))
          notes_.push_back("stage 0 block " + std::to_string(bi) +
                           ": pkcam has no predecessors, degraded to local-only path");
        stage.push_back(std::move(b));
        in = out;
      }
      blocks_.push_back(std::move(stage));
    }
    head_w_ = Tensor::he_normal({graph_.classes, in}, in, rng);
    head_b_ = Tensor::zeros({graph_.classes});
  }

  void register_all() {
    params_.add("stem.conv.w", stem_.w);
    params_.add("stem.norm.gamma", nstem_.gamma);
    params_.add("stem.norm.beta", nstem_.beta);
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      for (std::size_t bi = 0; bi < blocks_[s].size(); ++bi) {
        const std::string p = "s" + std::to_string(s) + ".b" + std::to_string(bi);
        BlockModule& b = blocks_[s][bi];
        params_.add(p + ".conv1.w", b.c1.w);
        params_.add(p + ".norm1.gamma", b.n1.gamma);
        params_.add(p + ".norm1.beta", b.n1.beta);
        params_.add(p + ".conv2.w", b.c2.w);
        params_.add(p + ".norm2.gamma", b.n2.gamma);
        params_.add(p + ".norm2.beta", b.n2.beta);
        if (b.has_c3) {
          params_.add(p + ".conv3.w", b.c3.w);
          params_.add(p + ".norm3.gamma", b.n3.gamma);
          params_.add(p + ".norm3.beta", b.n3.beta);
        }
        if (b.has_down) {
          params_.add(p + ".down.w", b.down.w);
          params_.add(p + ".ndown.gamma", b.ndown.gamma);
          params_.add(p + ".ndown.beta", b.ndown.beta);
        }
        b.att.register_params(p + ".att", params_);
      }
    }
    params_.add("head.w", head_w_);
    params_.add("head.b", head_b_);
  }

  LayerGraph graph_;
  ConvLayer stem_;
  NormLite nstem_;
  bool stem_pool_ = false;
  std::vector<std::vector<BlockModule>> blocks_;
  Tensor head_w_, head_b_;
  ParamRegistry params_;
  std::vector<std::string> notes_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// Little-endian binary layout:
//   magic "PKCAM\0" | u32 version | u32 snapshot length | snapshot bytes
//   then per parameter: u32 name length | name | u32 rank | u32 dims...
//   | float64 data
// The snapshot is UTF-8 `key = value` lines (resolved run config plus seed
// and epoch counters).

namespace ckpt {

inline constexpr char kMagic[6] = {'P', 'K', 'C', 'A', 'M', '\0'};
inline constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint64_t offset() const { return off_; }
  bool at_end() const { return off_ == bytes_.size(); }

  void expect_magic() {
    if (bytes_.size() < 6 || std::memcmp(bytes_.data(), kMagic, 6) != 0)
      throw FormatError("checkpoint: bad magic", 0);
    off_ = 6;
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[off_ + static_cast<std::size_t>(i)]))
           << (8 * i);
    off_ += 4;
    return v;
  }

  std::string str(std::uint32_t len, const char* what) {
    need(len, what);
    std::string s = bytes_.substr(off_, len);
    off_ += len;
    return s;
  }

  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[off_ + static_cast<std::size_t>(i)]))
           << (8 * i);
    off_ += 8;
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }

 private:
  void need(std::uint64_t n, const char* what) {
    if (off_ + n > bytes_.size())
      throw FormatError(std::string("checkpoint: truncated while reading ") + what, off_);
  }

  const std::string& bytes_;
  std::uint64_t off_ = 0;
};

}  // namespace ckpt

inline void save_checkpoint(const std::string& path, const std::string& snapshot,
                            const ParamRegistry& params) {
  std::string out;
  out.append(ckpt::kMagic, 6);
  ckpt::put_u32(out, ckpt::kVersion);
  ckpt::put_u32(out, static_cast<std::uint32_t>(snapshot.size()));
  out += snapshot;
  for (const auto& [name, t] : params.entries()) {
    ckpt::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    ckpt::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i)
      ckpt::put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
    for (std::int64_t i = 0; i < t.numel(); ++i) ckpt::put_f64(out, t[i]);
  }
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw Error("checkpoint: cannot open " + path + " for writing");
  const std::size_t n = std::fwrite(out.data(), 1, out.size(), f);
  std::fclose(f);
  if (n != out.size()) throw Error("checkpoint: short write to " + path);
}

struct LoadedCheckpoint {
  std::string snapshot;
  std::map<std::string, std::string> config;  // parsed key = value lines
  std::vector<std::pair<std::string, Tensor>> tensors;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw Error("checkpoint: cannot open " + path);
  std::string bytes;
  char buf[1 << 16];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) bytes.append(buf, n);
  std::fclose(f);

  ckpt::Reader r(bytes);
  r.expect_magic();
  const std::uint32_t version = r.u32("version");
  if (version != ckpt::kVersion)
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version),
                      r.offset() - 4);
  LoadedCheckpoint out;
  const std::uint32_t snap_len = r.u32("snapshot length");
  out.snapshot = r.str(snap_len, "snapshot");
  std::size_t pos = 0;
  while (pos < out.snapshot.size()) {
    std::size_t eol = out.snapshot.find('\n', pos);
    if (eol == std::string::npos) eol = out.snapshot.size();
    std::string line = out.snapshot.substr(pos, eol - pos);
    pos = eol + 1;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    out.config[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  while (!r.at_end()) {
    const std::uint32_t name_len = r.u32("parameter name length");
    std::string name = r.str(name_len, "parameter name");
    const std::uint32_t rank = r.u32("parameter rank");
    Shape shape;
    std::int64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(static_cast<std::int64_t>(r.u32("parameter dim")));
      count *= shape.back();
    }
    Tensor t(shape);
    for (std::int64_t i = 0; i < count; ++i) t[i] = r.f64("parameter data");
    out.tensors.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

// Copies checkpoint tensors into the network's registered parameters.
// Names and shapes must match exactly.
inline void load_into(Network& net, const LoadedCheckpoint& loaded) {
  auto& entries = net.params().entries();
  if (entries.size() != loaded.tensors.size())
    throw ConfigError("checkpoint: parameter count mismatch (" +
                      std::to_string(loaded.tensors.size()) + " stored, " +
                      std::to_string(entries.size()) + " in model)");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& [name, t] = entries[i];
    const auto& [lname, lt] = loaded.tensors[i];
    if (name != lname)
      throw ConfigError("checkpoint: parameter " + std::to_string(i) + " is '" + lname +
                        "', model expects '" + name + "'");
    if (t.shape() != lt.shape())
      throw ConfigError("checkpoint: shape mismatch for " + name + ": stored " +
                        shape_str(lt.shape()) + ", model " + shape_str(t.shape()));
    std::memcpy(t.data(), lt.data(), sizeof(double) * static_cast<std::size_t>(t.numel()));
  }
}

}  // namespace pkcam
