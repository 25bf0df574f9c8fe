#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "booknet/checkpoint.hpp"
#include "booknet/ops.hpp"
#include "booknet/tape.hpp"
#include "booknet/tensor.hpp"

namespace booknet::model {

struct Supervision {
  bool left = true, right = true, full = true;
  bool any() const { return left || right || full; }
  bool operator==(const Supervision&) const = default;
};

struct BookNetConfig {
  std::size_t height = 288, width = 288;
  std::size_t channels = 256;
  std::size_t heads = 8;
  std::size_t encoder_layers = 4;
  std::size_t decoder_layers_stage1 = 2, decoder_layers_stage2 = 2;
  std::size_t ffn_expansion = 4;
  /// Output channels of the 7x7 stem and of the first stride-2 stage; the
  /// second stage outputs `channels`.
  std::size_t stem_channels = 64, mid_channels = 128;
  std::size_t blocks_per_stage = 2;
  bool cross_page_attention = true;
  bool use_fusion = true;
  Supervision supervise;

  /// 288x288, C=256, 8 heads, 4 encoder layers, 2+2 decoder layers.
  static BookNetConfig large();
  /// 96x96, C=64, 2 encoder layers, 1+1 decoder layers.
  static BookNetConfig toy();

  std::size_t grid_h() const { return height / 8; }
  std::size_t grid_w() const { return width / 8; }
  std::size_t page_w() const { return width / 16; }
  std::size_t queries() const { return grid_h() * page_w(); }

  /// Throws ConfigError on any violated constraint.
  void validate() const;
  bool operator==(const BookNetConfig&) const = default;
};

nlohmann::json to_json(const BookNetConfig& c);
/// Every field must be present.
BookNetConfig config_from_json(const nlohmann::json& j);

struct ParamSpec {
  std::string name;
  Shape shape;
};

/// Names and shapes of every learnable tensor, in checkpoint order.
std::vector<ParamSpec> param_specs(const BookNetConfig& c);
std::size_t param_count(const BookNetConfig& c);

/// Named parameter tensors with lookup by name.
class Params {
 public:
  Params() = default;
  explicit Params(std::vector<NamedTensor> entries);

  std::vector<NamedTensor>& entries() { return entries_; }
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t index(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& operator[](const std::string& name) { return entries_[index(name)].value; }
  const Tensor& operator[](const std::string& name) const { return entries_[index(name)].value; }

  std::size_t scalar_count() const;
  void zero_grad();
  bool all_finite() const;

 private:
  std::vector<NamedTensor> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

Params init_params(const BookNetConfig& c, std::uint64_t seed);
/// Parameters whose full-spread flow is the identity grid (up to f32
/// rounding): constant decoder features, border detection in the fusion
/// convs, and upsampling mixtures that interpolate linearly.
Params make_identity_params(const BookNetConfig& c);

/// Checks names and shapes against the config.
void check_params(const BookNetConfig& c, const Params& p);

/// Parameters bound to a tape, aligned with Params::entries().
class ParamVars {
 public:
  ParamVars(const Params& params, std::vector<grad::Var> vars);
  grad::Var operator[](const std::string& name) const { return vars_[params_->index(name)]; }
  const std::vector<grad::Var>& vars() const { return vars_; }

 private:
  const Params* params_;
  std::vector<grad::Var> vars_;
};

/// Watches every parameter, so backward accumulates into Tensor::grad.
ParamVars watch_params(grad::Tape& tape, Params& params);

struct FlowOutputs {
  grad::Var left, right, full;  // [2 x H x W/2], [2 x H x W/2], [2 x H x W]
  grad::Var coarse_left, coarse_right, coarse_full;
};

// Pieces of the forward pass, exposed for testing. Token tensors are
// [tokens x C]; grids are [C x h x w].
grad::Var backbone_forward(const BookNetConfig& c, const ParamVars& p, grad::Var image);
grad::Var encoder_forward(const BookNetConfig& c, const ParamVars& p, grad::Var tokens);
/// `branch` is "left" or "right", `stage` 1 or 2.
grad::Var decoder_stage(const BookNetConfig& c, const ParamVars& p, const std::string& branch, int stage,
                        grad::Var queries, grad::Var memory);
std::pair<grad::Var, grad::Var> cross_page_exchange(const BookNetConfig& c, const ParamVars& p, grad::Var left,
                                                    grad::Var right);
FlowOutputs fuse_and_predict(const BookNetConfig& c, const ParamVars& p, grad::Var left, grad::Var right);

FlowOutputs booknet_forward(const BookNetConfig& c, const ParamVars& p, grad::Var image);

grad::Var grid_to_tokens(grad::Var grid);
grad::Var tokens_to_grid(grad::Var tokens, std::size_t h, std::size_t w);

}  // namespace booknet::model
