#include "phydi/layers.hpp"

#include "phydi/errors.hpp"
#include "phydi/ops.hpp"
#include "phydi/random.hpp"

#include <algorithm>
#include <cmath>

namespace phydi {

// ---------------------------------------------------------------------------
// ParameterRegistry

void ParameterRegistry::add(const std::string& name, const Tensor& tensor, ParamRole role) {
    if (!tensor.requires_grad()) {
        throw ContractError("parameter " + name + " does not require grad");
    }
    if (nodes_.contains(tensor.identity())) return;
    if (!names_.insert(name).second) throw ContractError("duplicate parameter name " + name);
    nodes_.insert(tensor.identity());
    entries_.push_back({name, tensor, role});
}

void ParameterRegistry::add_ph_layer(const std::string& name, const PHWeightSpec& spec) {
    for (std::size_t i = 0; i < spec.n(); ++i) {
        add(name + ".A" + std::to_string(i), spec.a()[i], ParamRole::ph_factor);
    }
    for (std::size_t i = 0; i < spec.n(); ++i) {
        add(name + ".F" + std::to_string(i), spec.f()[i], ParamRole::ph_factor);
    }
    dense_weights_ += count_params(spec).dense_equivalent;
}

std::optional<Tensor> ParameterRegistry::find(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.name == name) return e.tensor;
    }
    return std::nullopt;
}

std::size_t ParameterRegistry::total_size() const {
    std::size_t total = 0;
    for (const auto& e : entries_) total += e.tensor.numel();
    return total;
}

ParamCount ParameterRegistry::count() const {
    ParamCount c;
    c.dense_equivalent = dense_weights_;
    for (const auto& e : entries_) {
        c.ph_params += e.tensor.numel();
        if (e.role != ParamRole::ph_factor) c.dense_equivalent += e.tensor.numel();
    }
    return c;
}

void ParameterRegistry::zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
}

// ---------------------------------------------------------------------------
// PH layers

PHWeightSpec LayerFactory::dense_spec(const std::string& name, std::size_t d_out,
                                      std::size_t d_in) const {
    auto spec = PHWeightSpec::dense(n, d_out, d_in, derive_seed(seed, name), init);
    if (!shared_algebra.empty()) spec.share_algebra(shared_algebra);
    return spec;
}

PHWeightSpec LayerFactory::conv_spec(const std::string& name, std::size_t c_out,
                                     std::size_t c_in, std::size_t kernel) const {
    auto spec = PHWeightSpec::conv(n, c_out, c_in, kernel, derive_seed(seed, name), init);
    if (!shared_algebra.empty()) spec.share_algebra(shared_algebra);
    return spec;
}

namespace {

std::vector<Tensor> make_summand_weights(std::size_t n, bool wkp) {
    std::vector<Tensor> w;
    if (!wkp) return w;
    for (std::size_t i = 0; i < n; ++i) w.push_back(Tensor::scalar(1.0, true));
    return w;
}

void register_summand_weights(ParameterRegistry& registry, const std::string& name,
                              const std::vector<Tensor>& weights) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
        registry.add(name + ".wkp" + std::to_string(i), weights[i], ParamRole::gate);
    }
}

}  // namespace

Tensor phm_forward(const PHWeightSpec& spec, const Tensor& x, const Tensor& bias,
                   std::span<const Tensor> summand_weights) {
    if (x.rank() < 2 || x.shape().back() != spec.d_in()) {
        throw ShapeError("PHM layer expects last axis " + std::to_string(spec.d_in()) +
                         ", got input " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / spec.d_in();
    const Tensor flat = x.rank() == 2 ? x : reshape(x, {rows, spec.d_in()});
    Tensor y = add_bias(matmul(flat, transpose(build_dense_H(spec, summand_weights))), bias);
    if (x.rank() == 2) return y;
    Shape out = x.shape();
    out.back() = spec.d_out();
    return reshape(y, std::move(out));
}

Tensor phc_forward(const PHWeightSpec& spec, const Tensor& x, const Tensor& bias,
                   std::size_t stride, std::size_t padding,
                   std::span<const Tensor> summand_weights) {
    if (x.rank() != 4 || x.dim(1) != spec.d_in()) {
        throw ShapeError("PHC layer expects " + std::to_string(spec.d_in()) +
                         " input channels, got input " + shape_str(x.shape()));
    }
    return add_channel_bias(conv2d(x, build_conv_kernel(spec, summand_weights), stride, padding),
                            bias);
}

PHLinear::PHLinear(std::string name, PHWeightSpec spec, bool wkp)
    : name_(std::move(name)),
      spec_(std::move(spec)),
      bias_(Tensor::zeros({spec_.d_out()}, true)),
      summand_weights_(make_summand_weights(spec_.n(), wkp)) {
    if (spec_.kind() != PHKind::dense) throw ContractError("PHLinear needs a dense spec");
}

std::unique_ptr<PHLinear> PHLinear::make(const LayerFactory& factory, const std::string& name,
                                         std::size_t d_out, std::size_t d_in) {
    return std::make_unique<PHLinear>(name, factory.dense_spec(name, d_out, d_in), factory.wkp);
}

Tensor PHLinear::forward(const Tensor& x) const {
    return phm_forward(spec_, x, bias_, summand_weights_);
}

Tensor PHLinear::weight() const { return build_dense_H(spec_, summand_weights_); }

void PHLinear::register_parameters(ParameterRegistry& registry) const {
    registry.add_ph_layer(name_, spec_);
    registry.add(name_ + ".bias", bias_);
    register_summand_weights(registry, name_, summand_weights_);
}

PHConv::PHConv(std::string name, PHWeightSpec spec, std::size_t stride, std::size_t padding,
               bool wkp)
    : name_(std::move(name)),
      spec_(std::move(spec)),
      stride_(stride),
      padding_(padding),
      bias_(Tensor::zeros({spec_.d_out()}, true)),
      summand_weights_(make_summand_weights(spec_.n(), wkp)) {
    if (spec_.kind() != PHKind::conv) throw ContractError("PHConv needs a convolutional spec");
}

std::unique_ptr<PHConv> PHConv::make(const LayerFactory& factory, const std::string& name,
                                     std::size_t c_out, std::size_t c_in, std::size_t kernel,
                                     std::size_t stride) {
    return std::make_unique<PHConv>(name, factory.conv_spec(name, c_out, c_in, kernel), stride,
                                    kernel / 2, factory.wkp);
}

Tensor PHConv::forward(const Tensor& x) const {
    return phc_forward(spec_, x, bias_, stride_, padding_, summand_weights_);
}

Tensor PHConv::kernel() const { return build_conv_kernel(spec_, summand_weights_); }

void PHConv::register_parameters(ParameterRegistry& registry) const {
    registry.add_ph_layer(name_, spec_);
    registry.add(name_ + ".bias", bias_);
    register_summand_weights(registry, name_, summand_weights_);
}

// ---------------------------------------------------------------------------
// Plumbing modules

Tensor ReLU::forward(const Tensor& x) const { return relu(x); }

Tensor Sequential::forward(const Tensor& x) const {
    Tensor h = x;
    for (const auto& layer : layers_) h = layer->forward(h);
    return h;
}

void Sequential::register_parameters(ParameterRegistry& registry) const {
    for (const auto& layer : layers_) layer->register_parameters(registry);
}

LayerNorm::LayerNorm(std::string name, std::size_t width, double eps)
    : name_(std::move(name)),
      gain_(Tensor::full({width}, 1.0, true)),
      bias_(Tensor::zeros({width}, true)),
      eps_(eps) {}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gain_, bias_, eps_); }

void LayerNorm::register_parameters(ParameterRegistry& registry) const {
    registry.add(name_ + ".gain", gain_);
    registry.add(name_ + ".bias", bias_);
}

// ---------------------------------------------------------------------------
// Residual gating

GatedResidual::GatedResidual(std::string name, std::unique_ptr<Module> inner, GateMode mode)
    : name_(std::move(name)), inner_(std::move(inner)), mode_(mode) {
    if (!inner_) throw ContractError("GatedResidual needs an inner layer");
    if (mode_ == GateMode::phydi) alpha_ = Tensor::scalar(0.0, true);
}

Tensor GatedResidual::forward(const Tensor& x) const { return forward(x, x); }

Tensor GatedResidual::forward(const Tensor& x, const Tensor& skip) const {
    Tensor branch = inner_->forward(x);
    if (branch.shape() != skip.shape()) {
        throw ShapeError("residual branch of " + name_ + " produced " + shape_str(branch.shape()) +
                         " but the shortcut carries " + shape_str(skip.shape()));
    }
    if (mode_ == GateMode::phydi) branch = scale(branch, alpha_);
    return add(skip, branch);
}

void GatedResidual::register_parameters(ParameterRegistry& registry) const {
    inner_->register_parameters(registry);
    if (mode_ == GateMode::phydi) registry.add(name_ + ".alpha", alpha_, ParamRole::gate);
}

ResNetBlock::ResNetBlock(const LayerFactory& factory, const std::string& name,
                         std::size_t in_channels, std::size_t width, std::size_t stride,
                         bool bottleneck, GateMode mode)
    : in_channels_(in_channels),
      out_channels_(bottleneck ? 4 * width : width),
      stride_(stride),
      bottleneck_(bottleneck) {
    auto branch = std::make_unique<Sequential>();
    if (bottleneck) {
        branch->push(PHConv::make(factory, name + ".conv1", width, in_channels, 1, 1));
        branch->push(std::make_unique<ReLU>());
        branch->push(PHConv::make(factory, name + ".conv2", width, width, 3, stride));
        branch->push(std::make_unique<ReLU>());
        branch->push(PHConv::make(factory, name + ".conv3", out_channels_, width, 1, 1));
    } else {
        branch->push(PHConv::make(factory, name + ".conv1", width, in_channels, 3, stride));
        branch->push(std::make_unique<ReLU>());
        branch->push(PHConv::make(factory, name + ".conv2", width, width, 3, 1));
    }
    residual_ = std::make_unique<GatedResidual>(name, std::move(branch), mode);
    if (stride != 1 || in_channels != out_channels_) {
        projection_ =
            PHConv::make(factory, name + ".shortcut", out_channels_, in_channels, 1, stride);
    }
}

Tensor ResNetBlock::forward(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != in_channels_) {
        throw ShapeError("residual block expects " + std::to_string(in_channels_) +
                         " channels, got " + shape_str(x.shape()));
    }
    if (!projection_) return residual_->forward(x);
    return residual_->forward(x, projection_->forward(x));
}

void ResNetBlock::register_parameters(ParameterRegistry& registry) const {
    residual_->register_parameters(registry);
    if (projection_) projection_->register_parameters(registry);
}

std::size_t ResNetBlock::conv_count() const { return bottleneck_ ? 3 : 2; }

std::vector<const PHConv*> ResNetBlock::branch_convs() const {
    std::vector<const PHConv*> convs;
    const auto& seq = static_cast<const Sequential&>(residual_->inner());
    for (const auto& layer : seq.layers()) {
        if (const auto* c = dynamic_cast<const PHConv*>(layer.get())) convs.push_back(c);
    }
    return convs;
}

// ---------------------------------------------------------------------------
// Attention and transformer layers

Tensor ph_attention(const Tensor& x, std::size_t heads, const PHLinear& q, const PHLinear& k,
                    const PHLinear& v, const PHLinear& o, bool causal) {
    if (x.rank() != 3) {
        throw ShapeError("attention expects B x T x d input, got " + shape_str(x.shape()));
    }
    const std::size_t d = x.dim(2);
    if (heads == 0 || d % heads != 0) {
        throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
    }
    const Tensor qh = split_heads(q.forward(x), heads);
    const Tensor kh = split_heads(k.forward(x), heads);
    const Tensor vh = split_heads(v.forward(x), heads);
    Tensor scores =
        mul_scalar(bmm(qh, transpose_last(kh)), 1.0 / std::sqrt(static_cast<double>(d / heads)));
    if (causal) scores = causal_mask(scores);
    const Tensor weights = softmax(scores, 2);
    return o.forward(merge_heads(bmm(weights, vh), heads));
}

PHAttention::PHAttention(const LayerFactory& factory, const std::string& name, std::size_t width,
                         std::size_t heads, bool causal)
    : heads_(heads), causal_(causal) {
    if (heads == 0 || width % heads != 0) {
        throw ShapeError("attention: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
    }
    q_ = PHLinear::make(factory, name + ".q", width, width);
    k_ = PHLinear::make(factory, name + ".k", width, width);
    v_ = PHLinear::make(factory, name + ".v", width, width);
    o_ = PHLinear::make(factory, name + ".o", width, width);
}

Tensor PHAttention::forward(const Tensor& x) const {
    return ph_attention(x, heads_, *q_, *k_, *v_, *o_, causal_);
}

void PHAttention::register_parameters(ParameterRegistry& registry) const {
    q_->register_parameters(registry);
    k_->register_parameters(registry);
    v_->register_parameters(registry);
    o_->register_parameters(registry);
}

FeedForward::FeedForward(const LayerFactory& factory, const std::string& name, std::size_t width,
                         std::size_t hidden)
    : up_(PHLinear::make(factory, name + ".up", hidden, width)),
      down_(PHLinear::make(factory, name + ".down", width, hidden)) {}

Tensor FeedForward::forward(const Tensor& x) const { return down_->forward(relu(up_->forward(x))); }

void FeedForward::register_parameters(ParameterRegistry& registry) const {
    up_->register_parameters(registry);
    down_->register_parameters(registry);
}

TransformerLayer::TransformerLayer(const LayerFactory& factory, const std::string& name,
                                   std::size_t width, std::size_t heads, std::size_t hidden,
                                   TransformerVariant variant, double ln_eps)
    : name_(name),
      variant_(variant),
      attention_(std::make_unique<PHAttention>(factory, name + ".attn", width, heads)),
      ffn_(std::make_unique<FeedForward>(factory, name + ".ffn", width, hidden)) {
    if (variant == TransformerVariant::phydi) {
        alpha_ = Tensor::scalar(0.0, true);
    } else {
        norm1_ = std::make_unique<LayerNorm>(name + ".ln1", width, ln_eps);
        norm2_ = std::make_unique<LayerNorm>(name + ".ln2", width, ln_eps);
    }
}

Tensor TransformerLayer::forward(const Tensor& x) const {
    if (x.rank() != 3) {
        throw ShapeError("transformer layer expects B x T x d input, got " + shape_str(x.shape()));
    }
    switch (variant_) {
        case TransformerVariant::postnorm: {
            const Tensor y = norm1_->forward(add(x, attention_->forward(x)));
            return norm2_->forward(add(x, ffn_->forward(y)));
        }
        case TransformerVariant::prenorm: {
            const Tensor h = add(x, attention_->forward(norm1_->forward(x)));
            return add(h, ffn_->forward(norm2_->forward(h)));
        }
        case TransformerVariant::phydi: {
            const Tensor inner = add(x, scale(attention_->forward(x), alpha_));
            return add(x, scale(ffn_->forward(inner), alpha_));
        }
    }
    throw ContractError("unknown transformer variant");
}

void TransformerLayer::register_parameters(ParameterRegistry& registry) const {
    attention_->register_parameters(registry);
    ffn_->register_parameters(registry);
    if (norm1_) norm1_->register_parameters(registry);
    if (norm2_) norm2_->register_parameters(registry);
    if (alpha_.defined()) registry.add(name_ + ".alpha", alpha_, ParamRole::gate);
}

Tensor transformer_layer_forward(const TransformerLayer& layer, const Tensor& x) {
    return layer.forward(x);
}

}  // namespace phydi
