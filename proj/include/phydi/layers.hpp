#pragma once

#include "phydi/ph_algebra.hpp"
#include "phydi/tensor.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

namespace phydi {

enum class ParamRole {
    ph_factor,  ///< A_i or F_i of a PH layer
    gate,       ///< PHYDI alpha or WKP summand weight
    other,      ///< biases, norms, embeddings
};

struct ParamEntry {
    std::string name;
    Tensor tensor;
    ParamRole role;
};

/// Named set of learnable tensors. A tensor registered twice (shared
/// algebra matrices) is kept once, under the first name it was given.
class ParameterRegistry {
public:
    void add(const std::string& name, const Tensor& tensor, ParamRole role = ParamRole::other);
    /// Registers A_i/F_i as <name>.A<i>, <name>.F<i> and records the dense
    /// layer this PH layer stands in for.
    void add_ph_layer(const std::string& name, const PHWeightSpec& spec);

    const std::vector<ParamEntry>& entries() const { return entries_; }
    std::optional<Tensor> find(const std::string& name) const;
    std::size_t total_size() const;

    /// ph_params is the registry total; dense_equivalent swaps each PH
    /// layer's factors for a full dense weight.
    ParamCount count() const;

    void zero_grad();

private:
    std::vector<ParamEntry> entries_;
    std::unordered_set<const void*> nodes_;
    std::unordered_set<std::string> names_;
    std::uint64_t dense_weights_ = 0;
};

/// Shape-aware layer with stable parameter names fixed at construction.
class Module {
public:
    virtual ~Module() = default;
    virtual Tensor forward(const Tensor& x) const = 0;
    virtual void register_parameters(ParameterRegistry& registry) const = 0;
};

enum class GateMode { none, phydi, wkp };

/// Creates PH layers whose parameters are seeded by name, so a layer's
/// initial values do not depend on how many layers were built before it.
struct LayerFactory {
    std::uint64_t seed = 0;
    std::size_t n = 1;
    PHInit init;
    bool wkp = false;
    std::vector<Tensor> shared_algebra;  ///< empty: per-layer A_i

    PHWeightSpec dense_spec(const std::string& name, std::size_t d_out, std::size_t d_in) const;
    PHWeightSpec conv_spec(const std::string& name, std::size_t c_out, std::size_t c_in,
                           std::size_t kernel) const;
};

/// x * H^T + bias, with H materialised from `spec`. Accepts any rank >= 2
/// input whose last axis is d_in.
Tensor phm_forward(const PHWeightSpec& spec, const Tensor& x, const Tensor& bias,
                   std::span<const Tensor> summand_weights = {});

/// conv2d with the PH filter bank, plus a per-channel bias.
Tensor phc_forward(const PHWeightSpec& spec, const Tensor& x, const Tensor& bias,
                   std::size_t stride, std::size_t padding,
                   std::span<const Tensor> summand_weights = {});

/// Parameterized hypercomplex multiplication (dense) layer.
class PHLinear : public Module {
public:
    PHLinear(std::string name, PHWeightSpec spec, bool wkp = false);
    static std::unique_ptr<PHLinear> make(const LayerFactory& factory, const std::string& name,
                                          std::size_t d_out, std::size_t d_in);

    Tensor forward(const Tensor& x) const override;
    void register_parameters(ParameterRegistry& registry) const override;

    /// Materialised d_out x d_in weight.
    Tensor weight() const;
    const PHWeightSpec& spec() const { return spec_; }
    const Tensor& bias() const { return bias_; }
    Tensor& bias() { return bias_; }
    const std::vector<Tensor>& summand_weights() const { return summand_weights_; }
    const std::string& name() const { return name_; }

private:
    std::string name_;
    PHWeightSpec spec_;
    Tensor bias_;
    std::vector<Tensor> summand_weights_;
};

/// Parameterized hypercomplex convolution layer.
class PHConv : public Module {
public:
    PHConv(std::string name, PHWeightSpec spec, std::size_t stride, std::size_t padding,
           bool wkp = false);
    static std::unique_ptr<PHConv> make(const LayerFactory& factory, const std::string& name,
                                        std::size_t c_out, std::size_t c_in, std::size_t kernel,
                                        std::size_t stride);

    Tensor forward(const Tensor& x) const override;
    void register_parameters(ParameterRegistry& registry) const override;

    Tensor kernel() const;
    const PHWeightSpec& spec() const { return spec_; }
    std::size_t stride() const { return stride_; }
    std::size_t padding() const { return padding_; }
    const Tensor& bias() const { return bias_; }
    const std::vector<Tensor>& summand_weights() const { return summand_weights_; }

private:
    std::string name_;
    PHWeightSpec spec_;
    std::size_t stride_;
    std::size_t padding_;
    Tensor bias_;
    std::vector<Tensor> summand_weights_;
};

class ReLU : public Module {
public:
    Tensor forward(const Tensor& x) const override;
    void register_parameters(ParameterRegistry&) const override {}
};

class Sequential : public Module {
public:
    Sequential() = default;
    explicit Sequential(std::vector<std::unique_ptr<Module>> layers) : layers_(std::move(layers)) {}
    void push(std::unique_ptr<Module> layer) { layers_.push_back(std::move(layer)); }

    Tensor forward(const Tensor& x) const override;
    void register_parameters(ParameterRegistry& registry) const override;
    const std::vector<std::unique_ptr<Module>>& layers() const { return layers_; }

private:
    std::vector<std::unique_ptr<Module>> layers_;
};

class LayerNorm : public Module {
public:
    LayerNorm(std::string name, std::size_t width, double eps = 1e-5);
    Tensor forward(const Tensor& x) const override;
    void register_parameters(ParameterRegistry& registry) const override;

    const Tensor& gain() const { return gain_; }
    const Tensor& bias() const { return bias_; }
    Tensor& gain() { return gain_; }
    Tensor& bias() { return bias_; }

private:
    std::string name_;
    Tensor gain_;
    Tensor bias_;
    double eps_;
};

/// Residual wrapper x_{j+1} = skip + alpha * inner(x).
///
/// phydi: alpha is a learnable scalar starting at 0, so the block is the
/// identity at construction. none/wkp: the branch is added ungated; under
/// wkp the inner PH layers carry their own per-summand weights instead.
class GatedResidual : public Module {
public:
    GatedResidual(std::string name, std::unique_ptr<Module> inner, GateMode mode);

    Tensor forward(const Tensor& x) const override;
    /// skip + gate(inner(x)); used by blocks with a projection shortcut.
    Tensor forward(const Tensor& x, const Tensor& skip) const;
    void register_parameters(ParameterRegistry& registry) const override;

    GateMode mode() const { return mode_; }
    /// Undefined unless mode is phydi.
    const Tensor& alpha() const { return alpha_; }
    Tensor& alpha() { return alpha_; }
    const Module& inner() const { return *inner_; }

private:
    std::string name_;
    std::unique_ptr<Module> inner_;
    GateMode mode_;
    Tensor alpha_;
};

/// Residual unit of a PHResNet: basic (PHC-ReLU-PHC) or bottleneck
/// (1x1, 3x3, 1x1 PHCs). A 1x1 PHC projection shortcut, ungated, is used
/// when stride or channel count change.
class ResNetBlock : public Module {
public:
    ResNetBlock(const LayerFactory& factory, const std::string& name, std::size_t in_channels,
                std::size_t width, std::size_t stride, bool bottleneck, GateMode mode);

    Tensor forward(const Tensor& x) const override;
    void register_parameters(ParameterRegistry& registry) const override;

    std::size_t in_channels() const { return in_channels_; }
    std::size_t out_channels() const { return out_channels_; }
    bool bottleneck() const { return bottleneck_; }
    std::size_t stride() const { return stride_; }
    std::size_t conv_count() const;
    const GatedResidual& residual() const { return *residual_; }
    GatedResidual& residual() { return *residual_; }
    const PHConv* projection() const { return projection_.get(); }
    /// The PHC layers of the residual branch, in order.
    std::vector<const PHConv*> branch_convs() const;

private:
    std::size_t in_channels_;
    std::size_t out_channels_;
    std::size_t stride_;
    bool bottleneck_;
    std::unique_ptr<GatedResidual> residual_;
    std::unique_ptr<PHConv> projection_;
};

/// Multi-head scaled dot-product attention whose Q, K, V and output
/// projections are PHM layers. x is B x T x d.
Tensor ph_attention(const Tensor& x, std::size_t heads, const PHLinear& q, const PHLinear& k,
                    const PHLinear& v, const PHLinear& o, bool causal);

class PHAttention : public Module {
public:
    PHAttention(const LayerFactory& factory, const std::string& name, std::size_t width,
                std::size_t heads, bool causal = true);

    Tensor forward(const Tensor& x) const override;
    void register_parameters(ParameterRegistry& registry) const override;

    std::size_t heads() const { return heads_; }
    const PHLinear& query() const { return *q_; }
    const PHLinear& key() const { return *k_; }
    const PHLinear& value() const { return *v_; }
    const PHLinear& output() const { return *o_; }
    PHLinear& output() { return *o_; }

private:
    std::size_t heads_;
    bool causal_;
    std::unique_ptr<PHLinear> q_, k_, v_, o_;
};

/// PHM(ReLU(PHM(x))).
class FeedForward : public Module {
public:
    FeedForward(const LayerFactory& factory, const std::string& name, std::size_t width,
                std::size_t hidden);
    Tensor forward(const Tensor& x) const override;
    void register_parameters(ParameterRegistry& registry) const override;

    const PHLinear& up() const { return *up_; }
    const PHLinear& down() const { return *down_; }
    PHLinear& up() { return *up_; }
    PHLinear& down() { return *down_; }

private:
    std::unique_ptr<PHLinear> up_, down_;
};

enum class TransformerVariant { postnorm, prenorm, phydi };

/// One encoder layer.
///   postnorm: LN2(x + FFN(LN1(x + Att(x))))
///   prenorm:  h = x + Att(LN1(x));  h + FFN(LN2(h))
///   phydi:    x + a * FFN(x + a * Att(x)),  one a per layer, starting at 0,
///             and no normalisation.
class TransformerLayer : public Module {
public:
    TransformerLayer(const LayerFactory& factory, const std::string& name, std::size_t width,
                     std::size_t heads, std::size_t hidden, TransformerVariant variant,
                     double ln_eps = 1e-5);

    Tensor forward(const Tensor& x) const override;
    void register_parameters(ParameterRegistry& registry) const override;

    TransformerVariant variant() const { return variant_; }
    const PHAttention& attention() const { return *attention_; }
    const FeedForward& ffn() const { return *ffn_; }
    FeedForward& ffn() { return *ffn_; }
    PHAttention& attention() { return *attention_; }
    const LayerNorm* norm1() const { return norm1_.get(); }
    const LayerNorm* norm2() const { return norm2_.get(); }
    const Tensor& alpha() const { return alpha_; }
    Tensor& alpha() { return alpha_; }

private:
    std::string name_;
    TransformerVariant variant_;
    std::unique_ptr<PHAttention> attention_;
    std::unique_ptr<FeedForward> ffn_;
    std::unique_ptr<LayerNorm> norm1_, norm2_;
    Tensor alpha_;
};

Tensor transformer_layer_forward(const TransformerLayer& layer, const Tensor& x);

}  // namespace phydi
