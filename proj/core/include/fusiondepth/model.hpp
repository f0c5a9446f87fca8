#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fusiondepth/nn.hpp"

namespace fusiondepth {

enum class ModelVariant {
  fusion,       // global + local branches, confidence-weighted late fusion
  local_only,   // stacked hourglass on LiDAR alone (guidance input held at zero)
  global_only,  // encoder-decoder on RGB + LiDAR alone
};

std::string to_string(ModelVariant variant);
ModelVariant parse_model_variant(const std::string& text);

struct ModelConfig {
  ModelVariant variant = ModelVariant::fusion;
  /// Encoder widths of the global branch, one per resolution level.
  std::vector<int> global_widths{16, 32, 64, 128};
  /// Base filter count of the hourglass modules (32 reproduces the reference table).
  int local_width = 32;
  /// Feed the guidance map into the second hourglass as well.
  bool guidance_skip = false;
  /// Batch norm in the second hourglass encoder. The first encoder never has it.
  bool second_encoder_bn = true;
  /// Metres per unit of network activation at the depth input/output.
  double depth_scale = 10.0;
  std::uint64_t seed = 1;
};

/// Six-layer hourglass: two strided 3x3 convolutions down, two 2x2/2
/// transposed convolutions back up.
template <typename T>
class Hourglass {
 public:
  Hourglass(int in_channels, int width, bool encoder_bn, Rng& rng);

  /// x [N, in, H, W] with H, W divisible by 4 -> features [N, width, H, W].
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void collect(const std::string& prefix, StateList<T>& out) const;

  int in_channels() const { return conv1_.in_channels(); }
  bool has_encoder_bn() const { return !encoder_bn_.empty(); }

 private:
  Conv2d<T> conv1_, conv2_, conv3_, conv4_;
  std::vector<BatchNorm2d<T>> encoder_bn_;
  TransConv2d<T> up1_, up2_;
  BatchNorm2d<T> bn_up1_, bn_up2_;
};

/// 3x3 conv + ReLU followed by a 3x3 projection to `out_channels`.
template <typename T>
class Head {
 public:
  Head(int in_channels, int out_channels, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(const std::string& prefix, StateList<T>& out) const;
  Conv2d<T>& projection() { return out_; }

 private:
  Conv2d<T> hidden_;
  Conv2d<T> out_;
};

template <typename T>
struct GlobalOutput {
  Tensor<T> guidance;  // [N,1,H,W]
  Tensor<T> depth;     // metres
  Tensor<T> confidence;
};

template <typename T>
class GlobalBranch {
 public:
  GlobalBranch(const ModelConfig& config, Rng& rng);

  GlobalOutput<T> forward(const Tensor<T>& rgb, const Tensor<T>& lidar, bool training);
  void collect(const std::string& prefix, StateList<T>& out) const;
  /// Spatial dims must be a multiple of this.
  int spatial_multiple() const { return 1 << down_.size(); }

 private:
  struct Level {
    Conv2d<T> down;
    BatchNorm2d<T> bn_down;
    Conv2d<T> conv;
    BatchNorm2d<T> bn_conv;
  };
  struct Up {
    TransConv2d<T> up;
    BatchNorm2d<T> bn;
  };
  double depth_scale_;
  Conv2d<T> input_;
  std::vector<Level> down_;
  std::vector<Up> up_;
  Conv2d<T> head_;
};

template <typename T>
struct LocalOutput {
  Tensor<T> first_depth;  // prediction of the first hourglass, metres
  Tensor<T> depth;        // first_depth + residual of the second hourglass
  Tensor<T> confidence;
};

/// Stem conv, two hourglass modules with additive feature skips, the second
/// one predicting a residual on the first one's depth.
template <typename T>
class LocalBranch {
 public:
  LocalBranch(const ModelConfig& config, Rng& rng);

  /// lidar [N,1,H,W] in metres (0 = missing), guidance [N,1,H,W]; H, W divisible by 4.
  LocalOutput<T> forward(const Tensor<T>& lidar, const Tensor<T>& guidance, bool training);
  void collect(const std::string& prefix, StateList<T>& out) const;
  static constexpr int spatial_multiple() { return 4; }

  Head<T>& residual_head() { return head2_; }

 private:
  double depth_scale_;
  bool guidance_skip_;
  Conv2d<T> stem_;
  Hourglass<T> hg1_;
  Head<T> head1_;
  Hourglass<T> hg2_;
  Head<T> head2_;
  Head<T> conf_head_;
};

template <typename T>
struct FusionNetOutput {
  Tensor<T> d_global;
  Tensor<T> d_local;
  Tensor<T> conf_global;  // raw logits X
  Tensor<T> conf_local;   // raw logits Y
  Tensor<T> guidance;
  Tensor<T> d_out;
};

template <typename T>
GlobalOutput<T> global_forward(GlobalBranch<T>& branch, const Tensor<T>& rgb, const Tensor<T>& lidar,
                               bool training);
template <typename T>
LocalOutput<T> local_forward(LocalBranch<T>& branch, const Tensor<T>& lidar, const Tensor<T>& guidance,
                             bool training);
/// Late fusion of the two depth maps weighted by softmax over (X, Y).
template <typename T>
Tensor<T> fuse(const Tensor<T>& d_global, const Tensor<T>& d_local, const Tensor<T>& conf_global,
               const Tensor<T>& conf_local) {
  return confidence_fuse(d_global, d_local, conf_global, conf_local);
}

template <typename T>
class FusionNet {
 public:
  explicit FusionNet(ModelConfig config);

  /// rgb [N,3,H,W] in [0,1], lidar [N,1,H,W] metres. Any H, W: inputs are
  /// zero-padded to the branches' required multiple and outputs cropped back.
  FusionNetOutput<T> forward(const Tensor<T>& rgb, const Tensor<T>& lidar, bool training);
  /// Runs only the global branch (d_out = d_global).
  FusionNetOutput<T> forward_global(const Tensor<T>& rgb, const Tensor<T>& lidar, bool training);

  const ModelConfig& config() const { return config_; }
  bool has_global() const { return global_ != nullptr; }
  bool has_local() const { return local_ != nullptr; }
  GlobalBranch<T>& global_branch() { return *global_; }
  LocalBranch<T>& local_branch() { return *local_; }

  StateList<T> state() const;
  StateList<T> global_state() const;
  StateList<T> local_state() const;
  std::vector<Tensor<T>> trainable_parameters() const;

  /// Frozen branches stop requiring gradients and run batch norm in eval mode.
  void set_global_frozen(bool frozen);
  void set_local_frozen(bool frozen);
  bool global_frozen() const { return global_frozen_; }
  bool local_frozen() const { return local_frozen_; }

  std::int64_t count_params() const { return fusiondepth::count_params(state().params); }
  int spatial_multiple() const;

 private:
  ModelConfig config_;
  std::unique_ptr<GlobalBranch<T>> global_;
  std::unique_ptr<LocalBranch<T>> local_;
  bool global_frozen_ = false;
  bool local_frozen_ = false;
};

template <typename T>
FusionNetOutput<T> fusionnet_forward(FusionNet<T>& model, const Tensor<T>& rgb, const Tensor<T>& lidar,
                                     bool training) {
  return model.forward(rgb, lidar, training);
}

}  // namespace fusiondepth
