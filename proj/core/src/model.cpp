#include "fusiondepth/model.hpp"

namespace fusiondepth {

std::string to_string(ModelVariant variant) {
  switch (variant) {
    case ModelVariant::fusion: return "fusion";
    case ModelVariant::local_only: return "local-only";
    case ModelVariant::global_only: return "global-only";
  }
  return "fusion";
}

ModelVariant parse_model_variant(const std::string& text) {
  if (text == "fusion") return ModelVariant::fusion;
  if (text == "local-only" || text == "local_only" || text == "local") return ModelVariant::local_only;
  if (text == "global-only" || text == "global_only" || text == "global") return ModelVariant::global_only;
  throw ConfigError("unknown model variant '" + text + "' (expected fusion, local-only or global-only)");
}

namespace {

template <typename Layer>
Layer make_layer(Layer layer, Rng& rng) {
  init_params(layer, rng);
  return layer;
}

template <typename T>
void require_image(const Tensor<T>& t, std::int64_t channels, const char* what) {
  if (!t.defined() || t.ndim() != 4 || t.dim(1) != channels) {
    throw ShapeMismatch(std::string(what) + ": expected [N," + std::to_string(channels) + ",H,W], got " +
                        (t.defined() ? shape_str(t.shape()) : std::string("<undefined>")));
  }
}

template <typename T>
void require_divisible(const Tensor<T>& t, int multiple, const char* what) {
  if (t.dim(2) % multiple != 0 || t.dim(3) % multiple != 0) {
    throw ShapeMismatch(std::string(what) + ": spatial size " + shape_str(t.shape()) + " not divisible by " +
                        std::to_string(multiple));
  }
}

template <typename T>
void set_trainable(const StateList<T>& state, bool trainable) {
  for (auto p : state.params) {
    p.tensor.set_requires_grad(trainable);
    if (!trainable) p.tensor.clear_grad();
  }
}

}  // namespace

// ------------------------------------------------------------------ Hourglass

template <typename T>
Hourglass<T>::Hourglass(int in_channels, int width, bool encoder_bn, Rng& rng)
    : conv1_(make_layer(Conv2d<T>(in_channels, width, 3, 2, 1, !encoder_bn), rng)),
      conv2_(make_layer(Conv2d<T>(width, 2 * width, 3, 1, 1, !encoder_bn), rng)),
      conv3_(make_layer(Conv2d<T>(2 * width, 2 * width, 3, 2, 1, !encoder_bn), rng)),
      conv4_(make_layer(Conv2d<T>(2 * width, 2 * width, 3, 1, 1, !encoder_bn), rng)),
      up1_(make_layer(TransConv2d<T>(2 * width, 2 * width, 2, 2), rng)),
      up2_(make_layer(TransConv2d<T>(2 * width, width, 2, 2), rng)),
      bn_up1_(2 * width),
      bn_up2_(width) {
  if (encoder_bn) {
    encoder_bn_.emplace_back(width);
    encoder_bn_.emplace_back(2 * width);
    encoder_bn_.emplace_back(2 * width);
    encoder_bn_.emplace_back(2 * width);
  }
}

template <typename T>
Tensor<T> Hourglass<T>::forward(const Tensor<T>& x, bool training) {
  require_divisible(x, 4, "hourglass");
  const Conv2d<T>* encoder[] = {&conv1_, &conv2_, &conv3_, &conv4_};
  Tensor<T> h = x;
  for (std::size_t i = 0; i < 4; ++i) {
    h = encoder[i]->forward(h);
    if (!encoder_bn_.empty()) h = relu(encoder_bn_[i].forward(h, training));
  }
  h = relu(bn_up1_.forward(up1_.forward(h), training));
  h = relu(bn_up2_.forward(up2_.forward(h), training));
  return h;
}

template <typename T>
void Hourglass<T>::collect(const std::string& prefix, StateList<T>& out) const {
  conv1_.collect(prefix + ".conv1", out);
  conv2_.collect(prefix + ".conv2", out);
  conv3_.collect(prefix + ".conv3", out);
  conv4_.collect(prefix + ".conv4", out);
  for (std::size_t i = 0; i < encoder_bn_.size(); ++i) {
    encoder_bn_[i].collect(prefix + ".bn" + std::to_string(i + 1), out);
  }
  up1_.collect(prefix + ".up1", out);
  bn_up1_.collect(prefix + ".bn_up1", out);
  up2_.collect(prefix + ".up2", out);
  bn_up2_.collect(prefix + ".bn_up2", out);
}

// ----------------------------------------------------------------------- Head

template <typename T>
Head<T>::Head(int in_channels, int out_channels, Rng& rng)
    : hidden_(make_layer(Conv2d<T>(in_channels, in_channels, 3, 1, 1, true), rng)),
      out_(make_layer(Conv2d<T>(in_channels, out_channels, 3, 1, 1, false), rng)) {}

template <typename T>
Tensor<T> Head<T>::forward(const Tensor<T>& x) const {
  return out_.forward(hidden_.forward(x));
}

template <typename T>
void Head<T>::collect(const std::string& prefix, StateList<T>& out) const {
  hidden_.collect(prefix + ".hidden", out);
  out_.collect(prefix + ".out", out);
}

// --------------------------------------------------------------- GlobalBranch

template <typename T>
GlobalBranch<T>::GlobalBranch(const ModelConfig& config, Rng& rng) : depth_scale_(config.depth_scale) {
  const auto& w = config.global_widths;
  if (w.empty()) throw ConfigError("global branch needs at least one width");
  input_ = make_layer(Conv2d<T>(4, w[0], 3, 1, 1, true), rng);
  for (std::size_t i = 1; i < w.size(); ++i) {
    Level level{make_layer(Conv2d<T>(w[i - 1], w[i], 3, 2, 1, false), rng), BatchNorm2d<T>(w[i]),
                make_layer(Conv2d<T>(w[i], w[i], 3, 1, 1, false), rng), BatchNorm2d<T>(w[i])};
    down_.push_back(std::move(level));
  }
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    up_.push_back(Up{make_layer(TransConv2d<T>(w[i + 1], w[i], 2, 2), rng), BatchNorm2d<T>(w[i])});
  }
  head_ = make_layer(Conv2d<T>(w[0], 3, 3, 1, 1, false), rng);
}

template <typename T>
GlobalOutput<T> GlobalBranch<T>::forward(const Tensor<T>& rgb, const Tensor<T>& lidar, bool training) {
  require_image(rgb, 3, "global branch rgb");
  require_image(lidar, 1, "global branch lidar");
  if (rgb.dim(0) != lidar.dim(0) || rgb.dim(2) != lidar.dim(2) || rgb.dim(3) != lidar.dim(3)) {
    throw ShapeMismatch("global branch: rgb " + shape_str(rgb.shape()) + " and lidar " + shape_str(lidar.shape()) +
                        " are not aligned");
  }
  require_divisible(rgb, spatial_multiple(), "global branch");

  const auto lidar_n = mul_scalar(lidar, static_cast<T>(1.0 / depth_scale_));
  Tensor<T> h = input_.forward(concat_channels<T>({rgb, lidar_n}));
  std::vector<Tensor<T>> skips{h};
  for (auto& level : down_) {
    h = relu(level.bn_down.forward(level.down.forward(h), training));
    h = relu(level.bn_conv.forward(level.conv.forward(h), training));
    skips.push_back(h);
  }
  for (std::size_t i = up_.size(); i-- > 0;) {
    h = relu(up_[i].bn.forward(up_[i].up.forward(h), training));
    h = add(h, skips[i]);
  }
  const auto maps = head_.forward(h);
  return GlobalOutput<T>{slice_channels(maps, 0, 1), mul_scalar(slice_channels(maps, 1, 1), static_cast<T>(depth_scale_)),
                         slice_channels(maps, 2, 1)};
}

template <typename T>
void GlobalBranch<T>::collect(const std::string& prefix, StateList<T>& out) const {
  input_.collect(prefix + ".input", out);
  for (std::size_t i = 0; i < down_.size(); ++i) {
    const auto p = prefix + ".down" + std::to_string(i + 1);
    down_[i].down.collect(p + ".conv_s2", out);
    down_[i].bn_down.collect(p + ".bn_s2", out);
    down_[i].conv.collect(p + ".conv", out);
    down_[i].bn_conv.collect(p + ".bn", out);
  }
  for (std::size_t i = 0; i < up_.size(); ++i) {
    const auto p = prefix + ".up" + std::to_string(i + 1);
    up_[i].up.collect(p + ".tconv", out);
    up_[i].bn.collect(p + ".bn", out);
  }
  head_.collect(prefix + ".head", out);
}

// ---------------------------------------------------------------- LocalBranch

template <typename T>
LocalBranch<T>::LocalBranch(const ModelConfig& config, Rng& rng)
    : depth_scale_(config.depth_scale),
      guidance_skip_(config.guidance_skip),
      stem_(make_layer(Conv2d<T>(2, config.local_width, 3, 1, 1, true), rng)),
      hg1_(config.local_width, config.local_width, false, rng),
      head1_(config.local_width, 1, rng),
      hg2_(config.local_width + 2 + (config.guidance_skip ? 1 : 0), config.local_width, config.second_encoder_bn,
           rng),
      head2_(config.local_width, 1, rng),
      conf_head_(config.local_width, 1, rng) {}

template <typename T>
LocalOutput<T> LocalBranch<T>::forward(const Tensor<T>& lidar, const Tensor<T>& guidance, bool training) {
  require_image(lidar, 1, "local branch lidar");
  require_image(guidance, 1, "local branch guidance");
  if (lidar.shape() != guidance.shape()) {
    throw ShapeMismatch("local branch: guidance " + shape_str(guidance.shape()) + " does not match lidar " +
                        shape_str(lidar.shape()));
  }
  require_divisible(lidar, spatial_multiple(), "local branch");

  const T scale = static_cast<T>(depth_scale_);
  const auto lidar_n = mul_scalar(lidar, static_cast<T>(1.0 / depth_scale_));
  const auto stem = stem_.forward(concat_channels<T>({lidar_n, guidance}));
  const auto f1 = add(hg1_.forward(stem, training), stem);
  const auto d1 = head1_.forward(f1);

  std::vector<Tensor<T>> second_input{f1, lidar_n, d1};
  if (guidance_skip_) second_input.push_back(guidance);
  const auto f2 = add(hg2_.forward(concat_channels(second_input), training), f1);
  const auto residual = head2_.forward(f2);

  return LocalOutput<T>{mul_scalar(d1, scale), mul_scalar(add(d1, residual), scale), conf_head_.forward(f2)};
}

template <typename T>
void LocalBranch<T>::collect(const std::string& prefix, StateList<T>& out) const {
  stem_.collect(prefix + ".stem", out);
  hg1_.collect(prefix + ".hg1", out);
  head1_.collect(prefix + ".head1", out);
  hg2_.collect(prefix + ".hg2", out);
  head2_.collect(prefix + ".head2", out);
  conf_head_.collect(prefix + ".conf", out);
}

template <typename T>
GlobalOutput<T> global_forward(GlobalBranch<T>& branch, const Tensor<T>& rgb, const Tensor<T>& lidar,
                               bool training) {
  return branch.forward(rgb, lidar, training);
}

template <typename T>
LocalOutput<T> local_forward(LocalBranch<T>& branch, const Tensor<T>& lidar, const Tensor<T>& guidance,
                             bool training) {
  return branch.forward(lidar, guidance, training);
}

// ------------------------------------------------------------------ FusionNet

template <typename T>
FusionNet<T>::FusionNet(ModelConfig config) : config_(std::move(config)) {
  if (config_.local_width < 1) throw ConfigError("model.local_width must be >= 1");
  if (!(config_.depth_scale > 0)) throw ConfigError("model.depth_scale must be > 0");
  for (int w : config_.global_widths) {
    if (w < 1) throw ConfigError("model.global_widths entries must be >= 1");
  }
  // Separate streams keep the local initialisation identical across variants.
  if (config_.variant != ModelVariant::local_only) {
    Rng rng(derive_seed(config_.seed, 1));
    global_ = std::make_unique<GlobalBranch<T>>(config_, rng);
  }
  if (config_.variant != ModelVariant::global_only) {
    Rng rng(derive_seed(config_.seed, 2));
    local_ = std::make_unique<LocalBranch<T>>(config_, rng);
  }
}

template <typename T>
int FusionNet<T>::spatial_multiple() const {
  int m = 1;
  if (global_) m = std::max(m, global_->spatial_multiple());
  if (local_) m = std::max(m, LocalBranch<T>::spatial_multiple());
  return m;
}

template <typename T>
FusionNetOutput<T> FusionNet<T>::forward(const Tensor<T>& rgb, const Tensor<T>& lidar, bool training) {
  require_image(rgb, 3, "fusionnet rgb");
  require_image(lidar, 1, "fusionnet lidar");
  if (rgb.dim(0) != lidar.dim(0) || rgb.dim(2) != lidar.dim(2) || rgb.dim(3) != lidar.dim(3)) {
    throw ShapeMismatch("fusionnet: rgb " + shape_str(rgb.shape()) + " and lidar " + shape_str(lidar.shape()) +
                        " are not aligned");
  }
  const auto H = rgb.dim(2), W = rgb.dim(3);
  const int m = spatial_multiple();
  const auto pad_rows = (m - H % m) % m, pad_cols = (m - W % m) % m;
  const auto rgb_p = pad_bottom_right(rgb, pad_rows, pad_cols);
  const auto lidar_p = pad_bottom_right(lidar, pad_rows, pad_cols);

  FusionNetOutput<T> out;
  if (global_) {
    auto g = global_->forward(rgb_p, lidar_p, training && !global_frozen_);
    out.guidance = g.guidance;
    out.d_global = g.depth;
    out.conf_global = g.confidence;
  } else {
    out.guidance = Tensor<T>::zeros(lidar_p.shape());
  }
  if (local_) {
    auto l = local_->forward(lidar_p, out.guidance, training && !local_frozen_);
    out.d_local = l.depth;
    out.conf_local = l.confidence;
  }
  switch (config_.variant) {
    case ModelVariant::fusion:
      out.d_out = confidence_fuse(out.d_global, out.d_local, out.conf_global, out.conf_local);
      break;
    case ModelVariant::local_only: out.d_out = out.d_local; break;
    case ModelVariant::global_only: out.d_out = out.d_global; break;
  }
  if (pad_rows != 0 || pad_cols != 0) {
    for (auto* t : {&out.d_global, &out.d_local, &out.conf_global, &out.conf_local, &out.guidance, &out.d_out}) {
      if (t->defined()) *t = crop_top_left(*t, H, W);
    }
  }
  return out;
}

template <typename T>
FusionNetOutput<T> FusionNet<T>::forward_global(const Tensor<T>& rgb, const Tensor<T>& lidar, bool training) {
  if (!global_) throw ConfigError("forward_global: model has no global branch");
  require_image(rgb, 3, "fusionnet rgb");
  const auto H = rgb.dim(2), W = rgb.dim(3);
  const int m = global_->spatial_multiple();
  const auto pad_rows = (m - H % m) % m, pad_cols = (m - W % m) % m;
  auto g = global_->forward(pad_bottom_right(rgb, pad_rows, pad_cols), pad_bottom_right(lidar, pad_rows, pad_cols),
                            training && !global_frozen_);
  FusionNetOutput<T> out;
  out.guidance = crop_top_left(g.guidance, H, W);
  out.d_global = crop_top_left(g.depth, H, W);
  out.conf_global = crop_top_left(g.confidence, H, W);
  out.d_out = out.d_global;
  return out;
}

template <typename T>
StateList<T> FusionNet<T>::global_state() const {
  StateList<T> s;
  if (global_) global_->collect("global", s);
  return s;
}

template <typename T>
StateList<T> FusionNet<T>::local_state() const {
  StateList<T> s;
  if (local_) local_->collect("local", s);
  return s;
}

template <typename T>
StateList<T> FusionNet<T>::state() const {
  StateList<T> s = global_state();
  auto l = local_state();
  s.params.insert(s.params.end(), l.params.begin(), l.params.end());
  s.buffers.insert(s.buffers.end(), l.buffers.begin(), l.buffers.end());
  return s;
}

template <typename T>
std::vector<Tensor<T>> FusionNet<T>::trainable_parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& p : state().params) {
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  }
  return out;
}

template <typename T>
void FusionNet<T>::set_global_frozen(bool frozen) {
  global_frozen_ = frozen;
  set_trainable(global_state(), !frozen);
}

template <typename T>
void FusionNet<T>::set_local_frozen(bool frozen) {
  local_frozen_ = frozen;
  set_trainable(local_state(), !frozen);
}

#define FUSIONDEPTH_INSTANTIATE_MODEL(T)                                                                  \
  template class Hourglass<T>;                                                                            \
  template class Head<T>;                                                                                 \
  template class GlobalBranch<T>;                                                                         \
  template class LocalBranch<T>;                                                                          \
  template class FusionNet<T>;                                                                            \
  template GlobalOutput<T> global_forward<T>(GlobalBranch<T>&, const Tensor<T>&, const Tensor<T>&, bool); \
  template LocalOutput<T> local_forward<T>(LocalBranch<T>&, const Tensor<T>&, const Tensor<T>&, bool);

FUSIONDEPTH_INSTANTIATE_MODEL(float)
FUSIONDEPTH_INSTANTIATE_MODEL(double)

#undef FUSIONDEPTH_INSTANTIATE_MODEL

}  // namespace fusiondepth
