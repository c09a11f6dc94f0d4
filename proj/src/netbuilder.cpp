#include "patchscope/netbuilder.hpp"

#include <algorithm>
#include <sstream>

namespace patchscope {

std::string to_string(ModelKind k) {
  return k == ModelKind::ladeda ? "ladeda" : "tiny";
}

std::string to_string(Pooling p) {
  return p == Pooling::average ? "average" : "max";
}

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "ladeda") return ModelKind::ladeda;
  if (s == "tiny") return ModelKind::tiny;
  throw ConfigError("unknown model kind: " + s);
}

Pooling pooling_from_string(const std::string& s) {
  if (s == "average") return Pooling::average;
  if (s == "max") return Pooling::max;
  throw ConfigError("unknown pooling mode: " + s);
}

void ModelConfig::validate() const {
  if (kind == ModelKind::tiny) return;  // fixed plan
  if (patch_size != 5 && patch_size != 9) {
    throw ConfigError("unsupported patch size q=" + std::to_string(patch_size) +
                      " (supported: 5, 9)");
  }
  if (stem_width < 1) throw ConfigError("stem_width must be positive");
  for (const auto* v : {&channels, &mid_channels, &blocks, &strides}) {
    if (v->size() != 4) {
      throw ConfigError("ladeda layer plans must have exactly 4 entries");
    }
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (channels[i] < 1 || mid_channels[i] < 1 || blocks[i] < 1) {
      throw ConfigError("layer plan entries must be positive");
    }
    if (strides[i] != 1 && strides[i] != 2) {
      throw ConfigError("layer strides must be 1 or 2");
    }
  }
  const std::int64_t rf = receptive_field(*this);
  if (rf != patch_size) {
    throw ConfigError("stride plan yields receptive field " +
                      std::to_string(rf) + ", config expects q=" +
                      std::to_string(patch_size));
  }
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ',';
    os << v[i];
  }
  return os.str();
}

std::vector<int> parse_ints(const std::string& s, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("bad integer list for " + key + ": " + s);
    }
  }
  return out;
}

}  // namespace

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "kind=" << to_string(kind) << '\n';
  os << "q=" << patch_size << '\n';
  os << "pooling=" << to_string(pooling) << '\n';
  os << "stem_width=" << stem_width << '\n';
  os << "channels=" << join_ints(channels) << '\n';
  os << "mids=" << join_ints(mid_channels) << '\n';
  os << "blocks=" << join_ints(blocks) << '\n';
  os << "strides=" << join_ints(strides) << '\n';
  return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("bad model config line: " + line);
    }
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "kind") {
      cfg.kind = model_kind_from_string(val);
    } else if (key == "q") {
      cfg.patch_size = std::stoi(val);
    } else if (key == "pooling") {
      cfg.pooling = pooling_from_string(val);
    } else if (key == "stem_width") {
      cfg.stem_width = std::stoi(val);
    } else if (key == "channels") {
      cfg.channels = parse_ints(val, key);
    } else if (key == "mids") {
      cfg.mid_channels = parse_ints(val, key);
    } else if (key == "blocks") {
      cfg.blocks = parse_ints(val, key);
    } else if (key == "strides") {
      cfg.strides = parse_ints(val, key);
    } else {
      throw ConfigError("unknown model config key: " + key);
    }
  }
  if (cfg.kind == ModelKind::tiny) {
    cfg = tiny_config();
  } else {
    cfg.validate();
  }
  return cfg;
}

ModelConfig reduced_ladeda_config(int q) {
  ModelConfig cfg;
  cfg.patch_size = q;
  cfg.stem_width = 8;
  cfg.channels = {16, 32, 64, 128};
  cfg.mid_channels = {4, 8, 16, 32};
  cfg.blocks = {1, 1, 1, 1};
  cfg.validate();
  return cfg;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.kind = ModelKind::tiny;
  cfg.patch_size = 5;
  cfg.pooling = Pooling::average;
  cfg.stem_width = 8;
  cfg.channels.clear();
  cfg.mid_channels.clear();
  cfg.blocks.clear();
  cfg.strides.clear();
  return cfg;
}

NetPlan plan_network(const ModelConfig& cfg) {
  NetPlan plan;
  if (cfg.kind == ModelKind::tiny) {
    plan.stem = {
        {"conv1", 3, 8, 1, 1, true, false},
        {"conv2", 8, 8, 3, 1, true, false},
        {"conv3", 8, 8, 1, 1, true, false},
        {"conv4", 8, 8, 3, 1, true, false},
    };
    plan.head_in = 8;
    return plan;
  }
  cfg.validate();
  const std::int64_t s0 = cfg.stem_width;
  plan.stem = {
      {"stem.conv1", 3, s0, 1, 1, false, true},
      {"stem.conv2", s0, s0, 3, 1, false, true},
  };
  std::int64_t in_ch = s0;
  for (int li = 0; li < 4; ++li) {
    const std::int64_t mid = cfg.mid_channels[static_cast<std::size_t>(li)];
    const std::int64_t out = cfg.channels[static_cast<std::size_t>(li)];
    // The 3x3 lives in the first block of layer1 and, at q=9, of layer2.
    const std::int64_t first_kernel =
        (li == 0 || (li == 1 && cfg.patch_size == 9)) ? 3 : 1;
    std::vector<BlockPlan> layer;
    for (int bi = 0; bi < cfg.blocks[static_cast<std::size_t>(li)]; ++bi) {
      const bool first = bi == 0;
      const std::int64_t stride =
          first ? cfg.strides[static_cast<std::size_t>(li)] : 1;
      const std::int64_t kernel = first ? first_kernel : 1;
      const std::string base = "layer" + std::to_string(li + 1) + ".block" +
                               std::to_string(bi + 1);
      BlockPlan block;
      block.main = {
          {base + ".conv1", in_ch, mid, 1, 1, false, true},
          {base + ".conv2", mid, mid, kernel, stride, false, true},
          {base + ".conv3", mid, out, 1, 1, false, true},
      };
      if (first) {
        block.shortcut =
            ConvDesc{base + ".downsample", in_ch, out, 1, stride, false, true};
      }
      layer.push_back(std::move(block));
      in_ch = out;
    }
    plan.layers.push_back(std::move(layer));
  }
  plan.head_in = in_ch;
  return plan;
}

std::vector<const ConvDesc*> NetPlan::all_convs() const {
  std::vector<const ConvDesc*> out;
  for (const auto& d : stem) out.push_back(&d);
  for (const auto& layer : layers) {
    for (const auto& b : layer) {
      for (const auto& d : b.main) out.push_back(&d);
      if (b.shortcut) out.push_back(&*b.shortcut);
    }
  }
  return out;
}

std::vector<const ConvDesc*> NetPlan::main_path() const {
  std::vector<const ConvDesc*> out;
  for (const auto& d : stem) out.push_back(&d);
  for (const auto& layer : layers) {
    for (const auto& b : layer) {
      for (const auto& d : b.main) out.push_back(&d);
    }
  }
  return out;
}

RfInfo receptive_field_of(
    const std::vector<std::pair<std::int64_t, std::int64_t>>& layers) {
  RfInfo info;
  for (const auto& [k, s] : layers) {
    info.rf += (k - 1) * info.jump;
    info.jump *= s;
  }
  return info;
}

std::int64_t receptive_field(const ModelConfig& cfg) {
  // Built directly from the plan structure (validate() calls this, so the
  // plan is assembled without re-validation).
  std::vector<std::pair<std::int64_t, std::int64_t>> seq;
  if (cfg.kind == ModelKind::tiny) {
    seq = {{1, 1}, {3, 1}, {1, 1}, {3, 1}};
  } else {
    seq.push_back({1, 1});
    seq.push_back({3, 1});
    for (int li = 0; li < 4; ++li) {
      const std::int64_t first_kernel =
          (li == 0 || (li == 1 && cfg.patch_size == 9)) ? 3 : 1;
      for (int bi = 0; bi < cfg.blocks[static_cast<std::size_t>(li)]; ++bi) {
        const bool first = bi == 0;
        seq.push_back({1, 1});
        seq.push_back({first ? first_kernel : 1,
                       first ? cfg.strides[static_cast<std::size_t>(li)] : 1});
        seq.push_back({1, 1});
      }
    }
  }
  return receptive_field_of(seq).rf;
}

namespace {

std::int64_t valid_out(std::int64_t n, std::int64_t k, std::int64_t s) {
  if (n < k) {
    throw ConfigError("spatial extent " + std::to_string(n) +
                      " smaller than kernel " + std::to_string(k));
  }
  return (n - k) / s + 1;
}

}  // namespace

MapGeometry score_map_geometry(const ModelConfig& cfg, std::int64_t H,
                               std::int64_t W) {
  const NetPlan plan = plan_network(cfg);
  std::int64_t h = H, w = W, jump = 1;
  for (const ConvDesc* d : plan.main_path()) {
    h = valid_out(h, d->kernel, d->stride);
    w = valid_out(w, d->kernel, d->stride);
    jump *= d->stride;
  }
  MapGeometry g;
  g.h = h;
  g.w = w;
  g.stride = jump;
  g.patch = receptive_field(cfg);
  return g;
}

std::int64_t count_params(const ModelConfig& cfg) {
  const NetPlan plan = plan_network(cfg);
  std::int64_t n = 0;
  for (const ConvDesc* d : plan.all_convs()) {
    n += d->out_ch * d->in_ch * d->kernel * d->kernel;
    if (d->bias) n += d->out_ch;
    if (d->bn) n += 2 * d->out_ch;  // gamma, beta
  }
  n += plan.head_in + 1;  // affine head with bias
  return n;
}

std::int64_t count_flops(const ModelConfig& cfg, std::int64_t H,
                         std::int64_t W, bool count_mul_and_add) {
  const NetPlan plan = plan_network(cfg);
  std::int64_t macs = 0;
  std::int64_t h = H, w = W;
  auto conv_macs = [&macs](const ConvDesc& d, std::int64_t oh, std::int64_t ow) {
    macs += oh * ow * d.in_ch * d.out_ch * d.kernel * d.kernel;
  };
  for (const auto& d : plan.stem) {
    h = valid_out(h, d.kernel, d.stride);
    w = valid_out(w, d.kernel, d.stride);
    conv_macs(d, h, w);
  }
  for (const auto& layer : plan.layers) {
    for (const auto& b : layer) {
      std::int64_t bh = h, bw = w;
      for (const auto& d : b.main) {
        bh = valid_out(bh, d.kernel, d.stride);
        bw = valid_out(bw, d.kernel, d.stride);
        conv_macs(d, bh, bw);
      }
      if (b.shortcut) {
        const auto& d = *b.shortcut;
        conv_macs(d, valid_out(h, d.kernel, d.stride),
                  valid_out(w, d.kernel, d.stride));
      }
      h = bh;
      w = bw;
    }
  }
  if (cfg.kind == ModelKind::ladeda) {
    macs += h * w * plan.head_in;  // per-position affine head
  } else {
    macs += plan.head_in;  // affine after global average pooling
  }
  return count_mul_and_add ? 2 * macs : macs;
}

std::vector<std::pair<std::string, Shape>> expected_tensors(
    const ModelConfig& cfg) {
  const NetPlan plan = plan_network(cfg);
  std::vector<std::pair<std::string, Shape>> out;
  for (const ConvDesc* d : plan.all_convs()) {
    out.emplace_back(d->name + ".weight",
                     Shape{d->out_ch, d->in_ch, d->kernel, d->kernel});
    if (d->bias) out.emplace_back(d->name + ".bias", Shape{d->out_ch});
    if (d->bn) {
      out.emplace_back(d->name + ".bn.gamma", Shape{d->out_ch});
      out.emplace_back(d->name + ".bn.beta", Shape{d->out_ch});
      out.emplace_back(d->name + ".bn.running_mean", Shape{d->out_ch});
      out.emplace_back(d->name + ".bn.running_var", Shape{d->out_ch});
    }
  }
  if (cfg.kind == ModelKind::ladeda) {
    out.emplace_back("head.weight", Shape{1, plan.head_in, 1, 1});
  } else {
    out.emplace_back("head.weight", Shape{1, plan.head_in});
  }
  out.emplace_back("head.bias", Shape{1});
  return out;
}

}  // namespace patchscope
