#pragma once

#include "phydi/kv_config.hpp"
#include "phydi/layers.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace phydi {

enum class ModelFamily { phresnet, phtransformer };

/// ResNets accept standard, wkp and phydi; transformers accept postnorm,
/// prenorm and phydi.
enum class InitVariant { standard, wkp, phydi, postnorm, prenorm };

enum class Profile { desk, paper };

enum class BlockType { automatic, basic, bottleneck };

std::string to_string(ModelFamily family);
std::string to_string(InitVariant variant);
std::string to_string(Profile profile);
std::string to_string(BlockType type);
ModelFamily parse_family(const std::string& text);
InitVariant parse_variant(const std::string& text);
Profile parse_profile(const std::string& text);
BlockType parse_block_type(const std::string& text);

struct ModelConfig {
    ModelFamily family = ModelFamily::phresnet;
    /// ResNet: 18, 50 or 152 select the standard stage layouts; in the desk
    /// profile any other value is a total block count spread over the
    /// stages, and 0 gives the block-free counterpart. Transformer: number
    /// of encoder layers.
    std::size_t depth = 18;
    std::size_t n = 2;
    InitVariant variant = InitVariant::standard;
    bool share_a = false;
    std::uint64_t init_seed = 0;
    Profile profile = Profile::desk;
    PHInit init;

    // ResNet
    std::vector<std::uint64_t> widths;  ///< per-stage widths; empty: profile default
    std::vector<std::uint64_t> blocks;  ///< per-stage block counts; empty: from depth
    BlockType block_type = BlockType::automatic;
    std::size_t in_channels = 3;
    std::size_t classes = 10;
    std::size_t stem_stride = 1;
    bool downsample = true;

    // Transformer
    std::size_t d_model = 0;     ///< 0: profile default
    std::size_t heads = 0;       ///< 0: profile default
    std::size_t ffn_hidden = 0;  ///< 0: 4 * d_model
    std::size_t vocab = 100;
    std::size_t seq_len = 0;     ///< 0: profile default
    bool tie_output = false;
    double ln_eps = 1e-5;

    /// Reads `model.*` keys; absent keys keep their defaults.
    static ModelConfig from_kv(const KeyValueConfig& kv, const std::string& prefix = "model");
    void to_kv(KeyValueConfig& kv, const std::string& prefix = "model") const;

    /// Copy with every profile default and depth-derived layout filled in.
    ModelConfig resolved() const;
    /// Throws ConfigError or ShapeError on an inconsistent configuration.
    void validate() const;

    bool bottleneck() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// A named scalar gate (PHYDI alpha or WKP summand weight).
struct GateValue {
    std::string name;
    double value;
};

class Model {
public:
    virtual ~Model() = default;

    /// Resolved configuration the model was built from.
    const ModelConfig& config() const { return config_; }
    const ParameterRegistry& parameters() const { return registry_; }
    ParameterRegistry& parameters() { return registry_; }
    ParamCount param_count() const { return registry_.count(); }
    std::vector<GateValue> gate_values() const;

    /// Configuration re-derived from the built layer list.
    virtual ModelConfig derive_config() const = 0;

protected:
    explicit Model(ModelConfig config) : config_(std::move(config)) {}
    /// Call once every layer exists.
    void register_all(const std::vector<const Module*>& modules);

    ModelConfig config_;
    LayerFactory factory_;
    ParameterRegistry registry_;
};

/// CIFAR-style PHResNet: 3x3 PHC stem, four stages of residual blocks,
/// global average pooling and a PHM classifier.
class PHResNet : public Model {
public:
    explicit PHResNet(const ModelConfig& config);

    /// N x C x H x W images to N x classes logits.
    Tensor forward(const Tensor& images) const;
    /// Pooled N x C representation fed to the classifier.
    Tensor features(const Tensor& images) const;

    ModelConfig derive_config() const override;

    const std::vector<std::unique_ptr<ResNetBlock>>& blocks() const { return blocks_; }
    std::vector<std::unique_ptr<ResNetBlock>>& blocks() { return blocks_; }
    const PHConv& stem() const { return *stem_; }
    const PHLinear& head() const { return *head_; }
    /// Input channels after zero-padding to a multiple of n.
    std::size_t padded_in_channels() const { return padded_in_; }

private:
    std::size_t padded_in_ = 0;
    std::unique_ptr<PHConv> stem_;
    std::vector<std::unique_ptr<ResNetBlock>> blocks_;
    std::vector<std::size_t> stage_of_block_;
    std::unique_ptr<PHLinear> head_;
};

/// Causal encoder-only PH transformer language model.
class PHTransformer : public Model {
public:
    explicit PHTransformer(const ModelConfig& config);

    /// ids holds batch x steps tokens, row-major; result is
    /// (batch * steps) x vocab logits.
    Tensor forward(std::span<const std::size_t> ids, std::size_t batch, std::size_t steps) const;
    /// batch x steps x d_model representation fed to the output projection.
    Tensor features(std::span<const std::size_t> ids, std::size_t batch, std::size_t steps) const;
    /// Token embedding plus positional encoding.
    Tensor embed(std::span<const std::size_t> ids, std::size_t batch, std::size_t steps) const;

    ModelConfig derive_config() const override;

    const std::vector<std::unique_ptr<TransformerLayer>>& layers() const { return layers_; }
    std::vector<std::unique_ptr<TransformerLayer>>& layers() { return layers_; }
    const Tensor& embedding_table() const { return embedding_; }

private:
    Tensor embedding_;
    Tensor positional_;  ///< seq_len x d_model, constant
    std::vector<std::unique_ptr<TransformerLayer>> layers_;
    std::unique_ptr<PHLinear> head_;
};

/// Sinusoidal position table, steps x width.
Tensor sinusoidal_encoding(std::size_t steps, std::size_t width);

/// Conventional ResNet layer count for a stage layout.
std::size_t resnet_layer_count(const std::vector<std::uint64_t>& blocks, bool bottleneck);

std::unique_ptr<PHResNet> build_phresnet(const ModelConfig& config);
std::unique_ptr<PHTransformer> build_phtransformer(const ModelConfig& config);
std::unique_ptr<Model> build_model(const ModelConfig& config);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Little-endian file: magic, version, length-prefixed config text, a
/// name/shape/offset table and the parameter values.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
/// Rebuilds the model from the stored config and overwrites its parameters.
/// Throws FormatError on any inconsistency; no model is returned then.
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path);

}  // namespace phydi
