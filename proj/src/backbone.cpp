#include "dcap/backbone.hpp"

#include "dcap/errors.hpp"
#include "dcap/init.hpp"

namespace dcap {

std::string_view to_string(BackboneFamily f) { return f == BackboneFamily::conv4 ? "conv4" : "resnet"; }

BackboneFamily parse_backbone_family(std::string_view s) {
  if (s == "conv4") return BackboneFamily::conv4;
  if (s == "resnet") return BackboneFamily::resnet;
  throw ConfigError("unknown backbone family '" + std::string(s) + "' (expected conv4 or resnet)");
}

void BackboneConfig::validate() const {
  if (floor_pooling) {
    if (input_size < 16) throw ConfigError("backbone input_size " + std::to_string(input_size) + " is smaller than 16");
  } else if (input_size == 0 || input_size % 16 != 0) {
    throw ConfigError("backbone input_size " + std::to_string(input_size) + " is not a positive multiple of 16");
  }
  for (std::size_t f : filters)
    if (f == 0) throw ConfigError("backbone filters must all be positive");
  if (channels_in == 0) throw ConfigError("backbone channels_in must be positive");
}

BackboneConfig BackboneConfig::conv4_variant(std::string_view name) {
  BackboneConfig cfg;
  cfg.family = BackboneFamily::conv4;
  cfg.input_size = 84;
  cfg.channels_in = 3;
  if (name == "conv4-32") cfg.filters = {32, 32, 32, 32};
  else if (name == "conv4-64") cfg.filters = {64, 64, 64, 64};
  else if (name == "conv4-128") cfg.filters = {64, 64, 128, 128};
  else if (name == "conv4-256") cfg.filters = {64, 96, 128, 256};
  else throw ConfigError("unknown Conv4 variant '" + std::string(name) + "'");
  cfg.floor_pooling = true;
  return cfg;
}

BackboneConfig BackboneConfig::resnet(std::size_t base_width, std::size_t input_size, std::size_t channels_in) {
  BackboneConfig cfg;
  cfg.family = BackboneFamily::resnet;
  cfg.filters = {base_width, base_width * 2, base_width * 4, base_width * 8};
  cfg.input_size = input_size;
  cfg.channels_in = channels_in;
  return cfg;
}

std::size_t conv4_parameter_count(const BackboneConfig& cfg) {
  std::size_t total = 0, cin = cfg.channels_in;
  for (std::size_t cout : cfg.filters) {
    total += 9 * cin * cout + cout + 2 * cout;
    cin = cout;
  }
  return total;
}

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::size_t cin = cfg_.channels_in;
  std::uint64_t layer_seed = 0;
  for (std::size_t b = 0; b < 4; ++b) {
    const std::size_t cout = cfg_.filters[b];
    const std::string block = "block" + std::to_string(b + 1);
    if (cfg_.family == BackboneFamily::conv4) {
      add_layer(block + ".conv", cin, cout, 3, mix64(seed ^ mix64(++layer_seed)));
    } else {
      add_layer(block + ".conv1", cin, cout, 3, mix64(seed ^ mix64(++layer_seed)));
      add_layer(block + ".conv2", cout, cout, 3, mix64(seed ^ mix64(++layer_seed)));
      add_layer(block + ".conv3", cout, cout, 3, mix64(seed ^ mix64(++layer_seed)));
      add_layer(block + ".shortcut", cin, cout, 1, mix64(seed ^ mix64(++layer_seed)));
    }
    cin = cout;
  }
}

template <typename T>
void Backbone<T>::add_layer(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                            std::uint64_t seed) {
  CounterRng rng(seed);
  ConvBn layer;
  layer.weight = Parameter<T>(name + ".weight", uniform_init<T>(Shape{cout, cin, k, k}, he_uniform_bound(cin * k * k), rng));
  layer.bias = Parameter<T>(name + ".bias", Tensor<T>(Shape{cout}));
  layer.gamma = Parameter<T>(name + ".bn.weight", Tensor<T>(Shape{cout}, T{1}));
  layer.beta = Parameter<T>(name + ".bn.bias", Tensor<T>(Shape{cout}));
  layer.bn = nk::BatchNormState<T>(cout);
  layer.pad = k / 2;
  layers_.push_back(std::move(layer));
}

template <typename T>
Var Backbone<T>::conv_bn(Graph<T>& g, Var x, ConvBn& layer, Mode mode) {
  Var y = nk::conv2d(g, x, g.param(layer.weight), g.param(layer.bias), nk::Conv2dOptions{1, layer.pad});
  return nk::batch_norm2d(g, y, g.param(layer.gamma), g.param(layer.beta), layer.bn, mode == Mode::train);
}

template <typename T>
Var Backbone<T>::embed(Graph<T>& g, Var images, Mode mode) {
  const Shape& s = g.value(images).shape();
  if (s.size() != 4 || s[1] != cfg_.channels_in || s[2] != cfg_.input_size || s[3] != cfg_.input_size) {
    throw nk::ShapeError("embed", "expected [N," + std::to_string(cfg_.channels_in) + "," +
                                      std::to_string(cfg_.input_size) + "," + std::to_string(cfg_.input_size) +
                                      "], got " + nk::shape_str(s));
  }
  Var x = images;
  if (cfg_.family == BackboneFamily::conv4) {
    for (ConvBn& layer : layers_) x = nk::max_pool2d(g, nk::relu(g, conv_bn(g, x, layer, mode)), 2);
    return x;
  }
  for (std::size_t b = 0; b < 4; ++b) {
    ConvBn* l = &layers_[b * 4];
    Var y = nk::relu(g, conv_bn(g, x, l[0], mode));
    y = nk::relu(g, conv_bn(g, y, l[1], mode));
    y = conv_bn(g, y, l[2], mode);
    Var shortcut = conv_bn(g, x, l[3], mode);
    x = nk::max_pool2d(g, nk::relu(g, nk::add(g, y, shortcut)), 2);
  }
  return x;
}

template <typename T>
Tensor<T> Backbone<T>::embed_eval(const Tensor<T>& images) {
  Graph<T> g;
  Var out = embed(g, g.constant(images), Mode::eval);
  return g.value(out);
}

template <typename T>
std::vector<Parameter<T>*> Backbone<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (ConvBn& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
    out.push_back(&l.gamma);
    out.push_back(&l.beta);
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Backbone<T>::buffers() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (ConvBn& l : layers_) {
    const std::string base = l.weight.name.substr(0, l.weight.name.size() - std::string(".weight").size());
    out.emplace_back(base + ".bn.running_mean", &l.bn.running_mean);
    out.emplace_back(base + ".bn.running_var", &l.bn.running_var);
  }
  return out;
}

template <typename T>
std::size_t Backbone<T>::parameter_count() const {
  std::size_t n = 0;
  for (const ConvBn& l : layers_) n += l.weight.value.size() + l.bias.value.size() + l.gamma.value.size() + l.beta.value.size();
  return n;
}

template class Backbone<float>;
template class Backbone<double>;

}  // namespace dcap
