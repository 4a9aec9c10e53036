#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dcap/ops.hpp"

namespace dcap {

using nk::Graph;
using nk::Parameter;
using nk::Shape;
using nk::Tensor;
using nk::Var;

enum class BackboneFamily { conv4, resnet };

enum class Mode { train, eval };

std::string_view to_string(BackboneFamily f);
BackboneFamily parse_backbone_family(std::string_view s);

struct BackboneConfig {
  BackboneFamily family = BackboneFamily::conv4;
  /// Per-block output channels. For resnet these are the four block widths.
  std::array<std::size_t, 4> filters{32, 32, 32, 32};
  /// Square image extent; must be divisible by 16 (four 2x2 poolings)
  /// unless floor_pooling is set.
  std::size_t input_size = 64;
  std::size_t channels_in = 1;
  /// Accept any extent >= 16; each pooling floors, giving input_size / 16
  /// (integer division) output sites per side.
  bool floor_pooling = false;

  /// Throws ConfigError.
  void validate() const;
  std::size_t out_channels() const noexcept { return filters[3]; }
  std::size_t out_extent() const noexcept { return input_size / 16; }

  /// The standard Conv4 variants ("conv4-32", "conv4-64", "conv4-128",
  /// "conv4-256") at the customary 84x84 RGB benchmark extent.
  static BackboneConfig conv4_variant(std::string_view name);
  /// Residual widths starting at base and doubling per block.
  static BackboneConfig resnet(std::size_t base_width, std::size_t input_size, std::size_t channels_in);

  bool operator==(const BackboneConfig&) const = default;
};

/// Closed-form trainable parameter count for a Conv4 configuration:
/// per block 9*cin*cout conv weights, cout conv bias, 2*cout batchnorm affine.
std::size_t conv4_parameter_count(const BackboneConfig& cfg);

/// Embedding network f_theta: images [N,C,S,S] -> feature maps [N,d,S/16,S/16].
///
/// Conv4 block: conv3x3(pad 1) -> batchnorm -> relu -> maxpool2x2.
/// Residual block: three conv3x3/batchnorm layers (relu after the first two),
/// a 1x1 conv/batchnorm projection shortcut, add, relu, maxpool2x2.
///
/// Conv weights are drawn from U(-b, b) with b = sqrt(6 / fan_in); biases
/// and batchnorm shifts start at zero, batchnorm scales at one.
template <typename T>
class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, std::uint64_t seed);

  const BackboneConfig& config() const noexcept { return cfg_; }

  /// mode selects batch statistics (train, updates running stats) or
  /// running statistics (eval).
  Var embed(Graph<T>& g, Var images, Mode mode);
  /// Eval-mode forward without gradient bookkeeping.
  Tensor<T> embed_eval(const Tensor<T>& images);

  std::vector<Parameter<T>*> parameters();
  /// Batchnorm running statistics, in a fixed order with stable names.
  std::vector<std::pair<std::string, Tensor<T>*>> buffers();
  std::size_t parameter_count() const;

 private:
  struct ConvBn {
    Parameter<T> weight, bias, gamma, beta;
    nk::BatchNormState<T> bn;
    std::size_t pad = 1;
  };

  void add_layer(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::uint64_t seed);
  Var conv_bn(Graph<T>& g, Var x, ConvBn& layer, Mode mode);

  BackboneConfig cfg_;
  std::vector<ConvBn> layers_;
};

extern template class Backbone<float>;
extern template class Backbone<double>;

}  // namespace dcap
