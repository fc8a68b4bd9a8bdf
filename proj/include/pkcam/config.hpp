#pragma once

#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pkcam/backbone.hpp"

// Flat `key = value` run configuration. Lines starting with '#' and blank
// lines are ignored; unknown keys are rejected so typos fail loudly. The
// resolved configuration round-trips through resolved_text(), which is also
// the checkpoint snapshot format.

namespace pkcam {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected `key = value`, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = val;
  }
  return kv;
}

inline std::string read_text_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw ConfigError("cannot open config file " + path);
  std::string bytes;
  char buf[1 << 14];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) bytes.append(buf, n);
  std::fclose(f);
  return bytes;
}

struct RunConfig {
  // backbone
  std::string backbone = "tiny";  // tiny | resnet18 | resnet34 | resnet50
  std::vector<int> tiny_stages{1, 1};
  std::vector<std::int64_t> tiny_widths{8, 16};
  std::int64_t classes = 8;

  // attention
  std::string attention = "none";  // none | se | eca | srm | gc | pkcam
  std::string policy = "last";     // all | last
  int se_r = 16;
  int eca_k = 0;  // 0 = adaptive
  int gc_r = 16;
  int pkcam_R = 1;
  std::string pkcam_interaction = "conv1d";  // fullfc | depthwise | sum | conv1d
  std::string pkcam_fusion = "conv1d2";      // sum | conv1d2 | fullfc
  std::string pkcam_paths = "both";          // local | global | both
  std::string pkcam_gcci = "eca";            // se | eca | srm
  std::string pkcam_lcci = "eca";

  // optimizer and schedule
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int lr_step = 30;
  double lr_gamma = 0.1;
  int epochs = 50;
  int batch = 16;
  std::uint64_t seed = 1;
  int checkpoint_every = 1;

  // data and output
  std::string data = "synthetic:8x32x16x16:7";
  std::string timing = "off";  // off | wall; wall sacrifices CSV byte determinism

  static RunConfig from_kv(const std::map<std::string, std::string>& kv);
  static RunConfig from_text(const std::string& text) {
    return from_kv(parse_kv_text(text));
  }
  static RunConfig from_file(const std::string& path) {
    return from_text(read_text_file(path));
  }

  std::string resolved_text() const;

  AttentionKind kind_for(const std::string& name) const {
    if (name == "se") return AttentionKind::se(se_r);
    if (name == "eca") return AttentionKind::eca(eca_k);
    if (name == "srm") return AttentionKind::srm();
    if (name == "gc") return AttentionKind::gc(gc_r);
    throw ConfigError("unknown attention kind '" + name + "'");
  }

  AttentionConfig attention_config() const {
    AttentionConfig a;
    if (attention == "none") {
      a.choice = AttentionChoice::None;
      return a;
    }
    if (attention == "se") a.choice = AttentionChoice::SE;
    else if (attention == "eca") a.choice = AttentionChoice::ECA;
    else if (attention == "srm") a.choice = AttentionChoice::SRM;
    else if (attention == "gc") a.choice = AttentionChoice::GC;
    else if (attention == "pkcam") a.choice = AttentionChoice::PKCAM;
    else throw ConfigError("unknown attention '" + attention + "'");
    a.kind = a.choice == AttentionChoice::PKCAM ? AttentionKind::eca(eca_k)
                                                : kind_for(attention);
    if (policy == "all") a.policy = IntegrationPolicy::AllBlocks;
    else if (policy == "last") a.policy = IntegrationPolicy::LastBlockPerStage;
    else throw ConfigError("unknown policy '" + policy + "' (expected all|last)");
    if (a.choice == AttentionChoice::PKCAM) {
      PkcamConfig& p = a.pkcam;
      p.coverage = pkcam_R;
      if (pkcam_interaction == "fullfc") p.interaction = Interaction::FullFC;
      else if (pkcam_interaction == "depthwise") p.interaction = Interaction::Depthwise;
      else if (pkcam_interaction == "sum") p.interaction = Interaction::Sum;
      else if (pkcam_interaction == "conv1d") p.interaction = Interaction::Conv1dOverR;
      else throw ConfigError("unknown pkcam.interaction '" + pkcam_interaction + "'");
      if (pkcam_fusion == "sum") p.fusion = Fusion::Sum;
      else if (pkcam_fusion == "conv1d2") p.fusion = Fusion::Conv1dK2;
      else if (pkcam_fusion == "fullfc") p.fusion = Fusion::FullFC;
      else throw ConfigError("unknown pkcam.fusion '" + pkcam_fusion + "'");
      if (pkcam_paths == "local") p.paths = Paths::LocalOnly;
      else if (pkcam_paths == "global") p.paths = Paths::GlobalOnly;
      else if (pkcam_paths == "both") p.paths = Paths::Both;
      else throw ConfigError("unknown pkcam.paths '" + pkcam_paths + "'");
      p.gcci = kind_for(pkcam_gcci);
      p.lcci = kind_for(pkcam_lcci);
    }
    return a;
  }

  LayerGraph make_graph() const {
    const AttentionConfig a = attention_config();
    if (backbone == "tiny") return make_tiny_graph(tiny_stages, tiny_widths, a, classes);
    if (backbone == "resnet18") return make_resnet_graph(18, a, classes);
    if (backbone == "resnet34") return make_resnet_graph(34, a, classes);
    if (backbone == "resnet50") return make_resnet_graph(50, a, classes);
    throw ConfigError("unknown backbone '" + backbone + "'");
  }
};

namespace config_detail {

inline int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos;
    const int x = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": '" + v + "' is not an integer");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": '" + v + "' is not a number");
  }
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(v);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace config_detail

inline RunConfig RunConfig::from_kv(const std::map<std::string, std::string>& kv) {
  using config_detail::split_list;
  using config_detail::to_double;
  using config_detail::to_int;
  RunConfig c;
  for (const auto& [key, v] : kv) {
    if (key == "backbone") c.backbone = v;
    else if (key == "tiny.stages") {
      c.tiny_stages.clear();
      for (const auto& s : split_list(v)) c.tiny_stages.push_back(to_int(key, s));
    } else if (key == "tiny.widths") {
      c.tiny_widths.clear();
      for (const auto& s : split_list(v)) c.tiny_widths.push_back(to_int(key, s));
    } else if (key == "classes") c.classes = to_int(key, v);
    else if (key == "attention") c.attention = v;
    else if (key == "policy") c.policy = v;
    else if (key == "se.r") c.se_r = to_int(key, v);
    else if (key == "eca.k") c.eca_k = v == "adaptive" ? 0 : to_int(key, v);
    else if (key == "gc.r") c.gc_r = to_int(key, v);
    else if (key == "pkcam.R") c.pkcam_R = to_int(key, v);
    else if (key == "pkcam.interaction") c.pkcam_interaction = v;
    else if (key == "pkcam.fusion") c.pkcam_fusion = v;
    else if (key == "pkcam.paths") c.pkcam_paths = v;
    else if (key == "pkcam.gcci") c.pkcam_gcci = v;
    else if (key == "pkcam.lcci") c.pkcam_lcci = v;
    else if (key == "optimizer.lr") c.lr = to_double(key, v);
    else if (key == "optimizer.momentum") c.momentum = to_double(key, v);
    else if (key == "optimizer.weight_decay") c.weight_decay = to_double(key, v);
    else if (key == "optimizer.lr_step") c.lr_step = to_int(key, v);
    else if (key == "optimizer.lr_gamma") c.lr_gamma = to_double(key, v);
    else if (key == "epochs") c.epochs = to_int(key, v);
    else if (key == "batch") c.batch = to_int(key, v);
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(to_int(key, v));
    else if (key == "checkpoint.every") c.checkpoint_every = to_int(key, v);
    else if (key == "data") c.data = v;
    else if (key == "timing") c.timing = v;
    else if (key == "epoch") { /* checkpoint snapshots carry the counter */ }
    else if (key == "data.mean") { /* checkpoint snapshots carry split statistics */ }
    else throw ConfigError("unknown config key '" + key + "'");
  }
  if (c.epochs < 0 || c.batch < 1) throw ConfigError("config: illegal epochs/batch");
  if (c.lr_step < 1) throw ConfigError("config: optimizer.lr_step must be >= 1");
  if (c.timing != "off" && c.timing != "wall")
    throw ConfigError("config: timing must be off|wall");
  return c;
}

inline std::string RunConfig::resolved_text() const {
  std::ostringstream os;
  os << "backbone = " << backbone << '\n';
  os << "tiny.stages = ";
  for (std::size_t i = 0; i < tiny_stages.size(); ++i)
    os << (i ? "," : "") << tiny_stages[i];
  os << '\n' << "tiny.widths = ";
  for (std::size_t i = 0; i < tiny_widths.size(); ++i)
    os << (i ? "," : "") << tiny_widths[i];
  os << '\n';
  os << "classes = " << classes << '\n';
  os << "attention = " << attention << '\n';
  os << "policy = " << policy << '\n';
  os << "se.r = " << se_r << '\n';
  os << "eca.k = " << (eca_k == 0 ? std::string("adaptive") : std::to_string(eca_k)) << '\n';
  os << "gc.r = " << gc_r << '\n';
  os << "pkcam.R = " << pkcam_R << '\n';
  os << "pkcam.interaction = " << pkcam_interaction << '\n';
  os << "pkcam.fusion = " << pkcam_fusion << '\n';
  os << "pkcam.paths = " << pkcam_paths << '\n';
  os << "pkcam.gcci = " << pkcam_gcci << '\n';
  os << "pkcam.lcci = " << pkcam_lcci << '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return std::string(buf);
  };
  os << "optimizer.lr = " << num(lr) << '\n';
  os << "optimizer.momentum = " << num(momentum) << '\n';
  os << "optimizer.weight_decay = " << num(weight_decay) << '\n';
  os << "optimizer.lr_step = " << lr_step << '\n';
  os << "optimizer.lr_gamma = " << num(lr_gamma) << '\n';
  os << "epochs = " << epochs << '\n';
  os << "batch = " << batch << '\n';
  os << "seed = " << seed << '\n';
  os << "checkpoint.every = " << checkpoint_every << '\n';
  os << "data = " << data << '\n';
  os << "timing = " << timing << '\n';
  return os.str();
}

}  // namespace pkcam
