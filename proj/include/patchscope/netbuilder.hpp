#pragma once

// Builders for the two detector architectures plus the closed-form cost
// model (receptive field, parameter count, FLOPs).
//
// ladeda: ResNet50-shaped bottleneck stack whose receptive field is capped
// at q x q pixels by keeping only three 3x3 convolutions (stem, first block
// of layer1, and for q=9 the first block of layer2; q=5 drops the last one).
// All convolutions are valid (unpadded); total stride 8 puts the 27x27
// patch-logit grid on a 224x224 input. The head is a per-position
// 2048 -> 1 affine applied before pooling, so every grid cell is a genuine
// patch logit.
//
// tiny: conv 1x1 (3->8), 3x3, 1x1, 3x3 (all 8 channels, stride 1, valid,
// ReLU after each, biases, no normalization), then global average pooling
// and an 8 -> 1 affine head. Receptive field 5.

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "patchscope/common.hpp"
#include "patchscope/ops.hpp"
#include "patchscope/serialize.hpp"

namespace patchscope {

enum class ModelKind { ladeda, tiny };
enum class Pooling { average, max };

std::string to_string(ModelKind k);
std::string to_string(Pooling p);
ModelKind model_kind_from_string(const std::string& s);
Pooling pooling_from_string(const std::string& s);

struct ModelConfig {
  ModelKind kind = ModelKind::ladeda;
  int patch_size = 9;  // q; receptive field of the built network
  Pooling pooling = Pooling::average;
  int stem_width = 64;
  std::vector<int> channels = {256, 512, 1024, 2048};  // block output widths
  std::vector<int> mid_channels = {64, 128, 256, 512};  // bottleneck widths
  std::vector<int> blocks = {3, 4, 6, 3};
  std::vector<int> strides = {2, 2, 1, 2};  // first block of each layer

  void validate() const;
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
};

// Returns the reduced-width ladeda plan used for desk-scale training runs
// (identical kernel/stride geometry, narrower channels).
ModelConfig reduced_ladeda_config(int q = 9);
ModelConfig tiny_config();

struct ConvDesc {
  std::string name;
  std::int64_t in_ch = 0, out_ch = 0, kernel = 1, stride = 1;
  bool bias = false;
  bool bn = false;
};

struct BlockPlan {
  std::vector<ConvDesc> main;        // conv1, conv2, conv3
  std::optional<ConvDesc> shortcut;  // projection on first blocks
};

struct NetPlan {
  std::vector<ConvDesc> stem;                  // tiny: the whole conv stack
  std::vector<std::vector<BlockPlan>> layers;  // ladeda only
  std::int64_t head_in = 0;

  std::vector<const ConvDesc*> all_convs() const;   // enumeration order
  std::vector<const ConvDesc*> main_path() const;   // receptive-field order
};

NetPlan plan_network(const ModelConfig& cfg);

// Standard recurrence r <- r + (k-1)*j, j <- j*stride over (kernel, stride)
// pairs in order.
struct RfInfo {
  std::int64_t rf = 1;
  std::int64_t jump = 1;
};
RfInfo receptive_field_of(
    const std::vector<std::pair<std::int64_t, std::int64_t>>& layers);
std::int64_t receptive_field(const ModelConfig& cfg);

struct MapGeometry {
  std::int64_t h = 0, w = 0;
  std::int64_t stride = 0;  // pixels between adjacent grid cells
  std::int64_t patch = 0;   // q
};
MapGeometry score_map_geometry(const ModelConfig& cfg, std::int64_t H,
                               std::int64_t W);

// Learnable parameter count (batch-norm running statistics are buffers and
// excluded; they serialize alongside the parameters).
std::int64_t count_params(const ModelConfig& cfg);

// Multiply-accumulate count of one forward pass at the given input size
// (convolutions plus the affine head; 1 MAC = 1 FLOP). Shortcut projections
// are counted at their natural pre-crop output size, matching what the
// forward pass computes. count_mul_and_add doubles the figure for the
// 2-FLOPs-per-MAC convention.
std::int64_t count_flops(const ModelConfig& cfg, std::int64_t H,
                         std::int64_t W, bool count_mul_and_add = false);

// Tensor names and shapes a config requires, in enumeration order.
std::vector<std::pair<std::string, Shape>> expected_tensors(
    const ModelConfig& cfg);

// ------------------------------------------------------------- weights

template <typename T>
struct ModelWeights {
  std::vector<std::string> order;
  std::unordered_map<std::string, Tensor<T>> tensors;

  static bool is_buffer(const std::string& name) {
    return name.find(".running_") != std::string::npos;
  }

  void add(const std::string& name, Tensor<T> t) {
    if (tensors.count(name)) {
      throw ConfigError("duplicate weight name: " + name);
    }
    order.push_back(name);
    tensors.emplace(name, std::move(t));
  }

  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("missing weight: " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("missing weight: " + name);
    return it->second;
  }

  std::vector<Tensor<T>> learnable() {
    std::vector<Tensor<T>> out;
    for (const auto& n : order) {
      if (!is_buffer(n)) out.push_back(at(n));
    }
    return out;
  }

  std::int64_t param_elements() const {
    std::int64_t n = 0;
    for (const auto& name : order) {
      if (!is_buffer(name)) n += at(name).size();
    }
    return n;
  }

  void zero_grads() {
    for (const auto& n : order) at(n).zero_grad();
  }

  ModelWeights clone() const {
    ModelWeights out;
    for (const auto& n : order) {
      auto t = at(n).clone();
      t.set_requires_grad(at(n).requires_grad());
      out.add(n, std::move(t));
    }
    return out;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& name : order) {
      h = fnv1a64(name.data(), name.size(), h);
      const auto& t = at(name);
      for (const T v : t.vec()) {
        const double d = static_cast<double>(v);
        h = fnv1a64(&d, sizeof(d), h);
      }
    }
    return h;
  }
};

// He-normal (fan-in) for weights, zero biases, unit gamma / zero beta,
// running stats at (0, 1). Draw order follows expected_tensors.
template <typename T>
ModelWeights<T> init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelWeights<T> w;
  Rng rng(derive_seed(seed, 0x57454947));
  for (const auto& [name, shape] : expected_tensors(cfg)) {
    const auto n = static_cast<std::size_t>(numel(shape));
    std::vector<T> data(n, T(0));
    const bool buffer = ModelWeights<T>::is_buffer(name);
    if (name.ends_with(".weight")) {
      std::int64_t fan_in = 1;
      for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (auto& v : data) v = static_cast<T>(rng.next_normal() * stddev);
    } else if (name.ends_with(".gamma") || name.ends_with(".running_var")) {
      std::fill(data.begin(), data.end(), T(1));
    }
    auto t = Tensor<T>::from_vector(shape, std::move(data));
    t.set_requires_grad(!buffer);
    w.add(name, std::move(t));
  }
  return w;
}

template <typename T>
std::pair<ModelConfig, ModelWeights<T>> build_ladeda(ModelConfig cfg,
                                                     std::uint64_t seed) {
  cfg.kind = ModelKind::ladeda;
  cfg.validate();
  return {cfg, init_weights<T>(cfg, seed)};
}

template <typename T>
std::pair<ModelConfig, ModelWeights<T>> build_tiny(std::uint64_t seed) {
  ModelConfig cfg = tiny_config();
  return {cfg, init_weights<T>(cfg, seed)};
}

// ------------------------------------------------------------- forward

namespace netdetail {

template <typename T>
Tensor<T> conv_bn_act(const ConvDesc& d, ModelWeights<T>& w, Tensor<T> x,
                      bool train, bool act) {
  ConvSpec spec{d.in_ch, d.out_ch, d.kernel, d.stride, PaddingMode::valid};
  const Tensor<T>* bias = d.bias ? &w.at(d.name + ".bias") : nullptr;
  x = conv2d(x, spec, w.at(d.name + ".weight"), bias);
  if (d.bn) {
    x = batchnorm(x, w.at(d.name + ".bn.gamma"), w.at(d.name + ".bn.beta"),
                  w.at(d.name + ".bn.running_mean"),
                  w.at(d.name + ".bn.running_var"), train);
  }
  if (act) x = relu(x);
  return x;
}

template <typename T>
Tensor<T> bottleneck(const BlockPlan& b, ModelWeights<T>& w, Tensor<T> x,
                     bool train) {
  Tensor<T> y = x;
  y = conv_bn_act(b.main[0], w, y, train, true);
  y = conv_bn_act(b.main[1], w, y, train, true);
  y = conv_bn_act(b.main[2], w, y, train, false);
  Tensor<T> s = x;
  if (b.shortcut) s = conv_bn_act(*b.shortcut, w, s, train, false);
  // Valid 3x3 main paths shrink one pixel per side relative to the 1x1
  // shortcut; keep the shortcut's top-left window (support stays inside the
  // main path's receptive field).
  if (s.dim(2) != y.dim(2) || s.dim(3) != y.dim(3)) {
    s = crop2d(s, y.dim(2), y.dim(3));
  }
  return relu(add(y, s));
}

// Backbone features: ladeda -> [N,2048,h,w]; tiny -> [N,8,h,w].
template <typename T>
Tensor<T> backbone(const ModelConfig& cfg, const NetPlan& plan,
                   ModelWeights<T>& w, Tensor<T> x, bool train) {
  for (const auto& d : plan.stem) x = conv_bn_act(d, w, x, train, true);
  for (const auto& layer : plan.layers) {
    for (const auto& block : layer) x = bottleneck(block, w, x, train);
  }
  return x;
}

}  // namespace netdetail

// Dense patch-logit grid [N,1,h',w']: the per-position affine head applied
// to backbone features before any pooling.
template <typename T>
Tensor<T> patch_logit_map(const ModelConfig& cfg, ModelWeights<T>& w,
                          const Tensor<T>& input, bool train = false) {
  const NetPlan plan = plan_network(cfg);
  const std::int64_t q = receptive_field(cfg);
  if (input.rank() != 4) {
    throw ConfigError("patch_logit_map expects [N,3,H,W], got " +
                      shape_str(input.shape()));
  }
  if (input.dim(2) < q || input.dim(3) < q) {
    throw ConfigError("input " + std::to_string(input.dim(2)) + "x" +
                      std::to_string(input.dim(3)) +
                      " smaller than patch size " + std::to_string(q));
  }
  Tensor<T> f = netdetail::backbone(cfg, plan, w, input, train);
  Tensor<T> hw = w.at("head.weight");
  if (hw.rank() == 2) hw = reshape(hw, {hw.dim(0), hw.dim(1), 1, 1});
  ConvSpec head{plan.head_in, 1, 1, 1, PaddingMode::valid};
  const Tensor<T>& hb = w.at("head.bias");
  return conv2d(f, head, hw, &hb);
}

// Image-level deepfake logits [N]. ladeda pools the patch-logit grid
// (average by default, max classifies by the most fake patch). tiny uses
// its canonical pool-then-affine head, which equals the pooled per-position
// logits because the head is affine.
template <typename T>
Tensor<T> image_logits(const ModelConfig& cfg, ModelWeights<T>& w,
                       const Tensor<T>& input, bool train = false) {
  if (cfg.kind == ModelKind::tiny && cfg.pooling == Pooling::average) {
    const NetPlan plan = plan_network(cfg);
    Tensor<T> f = netdetail::backbone(cfg, plan, w, input, train);
    f = global_avg_pool(f);
    const Tensor<T>& hb = w.at("head.bias");
    Tensor<T> z = linear(f, w.at("head.weight"), &hb);
    return reshape(z, {z.dim(0)});
  }
  Tensor<T> map = patch_logit_map(cfg, w, input, train);
  Tensor<T> pooled = cfg.pooling == Pooling::average ? global_avg_pool(map)
                                                     : global_max_pool(map);
  return reshape(pooled, {pooled.dim(0)});
}

// ------------------------------------------------------------- model io

template <typename T>
void save_model(const std::string& path, const ModelConfig& cfg,
                const ModelWeights<T>& w) {
  Container c;
  c.header = cfg.to_text();
  for (const auto& name : w.order) {
    c.tensors.push_back(to_named_array(name, w.at(name)));
  }
  write_container(path, c);
}

template <typename T>
std::pair<ModelConfig, ModelWeights<T>> load_model(const std::string& path) {
  const Container c = read_container(path);
  ModelConfig cfg = ModelConfig::from_text(c.header);
  std::unordered_map<std::string, const NamedArray*> found;
  for (const auto& t : c.tensors) found[t.name] = &t;
  ModelWeights<T> w;
  for (const auto& [name, shape] : expected_tensors(cfg)) {
    auto it = found.find(name);
    if (it == found.end()) {
      throw DataError("model file " + path + " is missing tensor " + name);
    }
    if (it->second->dims != shape) {
      throw DataError("model file " + path + " tensor " + name + " has shape " +
                      shape_str(it->second->dims) + ", expected " +
                      shape_str(shape));
    }
    auto t = from_named_array<T>(*it->second);
    t.set_requires_grad(!ModelWeights<T>::is_buffer(name));
    w.add(name, std::move(t));
  }
  return {cfg, std::move(w)};
}

template <typename T>
std::string model_id(const ModelWeights<T>& w) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(w.checksum()));
  return buf;
}

}  // namespace patchscope
