#include "phydi/models.hpp"

#include "phydi/errors.hpp"
#include "phydi/ops.hpp"
#include "phydi/random.hpp"

#include <cmath>
#include <numeric>

namespace phydi {

namespace {

std::size_t round_up(std::size_t value, std::size_t multiple) {
    return (value + multiple - 1) / multiple * multiple;
}

std::vector<std::uint64_t> standard_layout(std::size_t depth) {
    switch (depth) {
        case 18: return {2, 2, 2, 2};
        case 50: return {3, 4, 6, 3};
        case 152: return {3, 8, 36, 3};
        default: return {};
    }
}

GateMode gate_mode(InitVariant variant) {
    switch (variant) {
        case InitVariant::phydi: return GateMode::phydi;
        case InitVariant::wkp: return GateMode::wkp;
        default: return GateMode::none;
    }
}

TransformerVariant transformer_variant(InitVariant variant) {
    switch (variant) {
        case InitVariant::postnorm: return TransformerVariant::postnorm;
        case InitVariant::prenorm: return TransformerVariant::prenorm;
        case InitVariant::phydi: return TransformerVariant::phydi;
        default: break;
    }
    throw ConfigError("variant '" + to_string(variant) + "' does not apply to transformers");
}

InitVariant init_variant(TransformerVariant variant) {
    switch (variant) {
        case TransformerVariant::postnorm: return InitVariant::postnorm;
        case TransformerVariant::prenorm: return InitVariant::prenorm;
        case TransformerVariant::phydi: return InitVariant::phydi;
    }
    return InitVariant::phydi;
}

LayerFactory make_factory(const ModelConfig& cfg) {
    LayerFactory factory;
    factory.seed = cfg.init_seed;
    factory.n = cfg.n;
    factory.init = cfg.init;
    factory.wkp = cfg.variant == InitVariant::wkp;
    if (cfg.share_a) {
        const auto proto = PHWeightSpec::dense(cfg.n, cfg.n, cfg.n,
                                               derive_seed(cfg.init_seed, "shared_algebra"),
                                               cfg.init);
        factory.shared_algebra = proto.a();
    }
    return factory;
}

void require_divisible(const std::string& what, std::size_t value, std::size_t n) {
    if (value == 0 || value % n != 0) {
        throw ShapeError(what + " = " + std::to_string(value) + " is not a positive multiple of n = " +
                         std::to_string(n));
    }
}

}  // namespace

std::string to_string(ModelFamily family) {
    return family == ModelFamily::phresnet ? "phresnet" : "phtransformer";
}

std::string to_string(InitVariant variant) {
    switch (variant) {
        case InitVariant::standard: return "standard";
        case InitVariant::wkp: return "wkp";
        case InitVariant::phydi: return "phydi";
        case InitVariant::postnorm: return "postnorm";
        case InitVariant::prenorm: return "prenorm";
    }
    return "?";
}

std::string to_string(Profile profile) { return profile == Profile::desk ? "desk" : "paper"; }

std::string to_string(BlockType type) {
    switch (type) {
        case BlockType::automatic: return "auto";
        case BlockType::basic: return "basic";
        case BlockType::bottleneck: return "bottleneck";
    }
    return "?";
}

ModelFamily parse_family(const std::string& text) {
    if (text == "phresnet") return ModelFamily::phresnet;
    if (text == "phtransformer") return ModelFamily::phtransformer;
    throw ConfigError("model.family: unknown family '" + text + "'");
}

InitVariant parse_variant(const std::string& text) {
    for (auto v : {InitVariant::standard, InitVariant::wkp, InitVariant::phydi,
                   InitVariant::postnorm, InitVariant::prenorm}) {
        if (to_string(v) == text) return v;
    }
    throw ConfigError("model.variant: unknown variant '" + text + "'");
}

Profile parse_profile(const std::string& text) {
    if (text == "desk") return Profile::desk;
    if (text == "paper") return Profile::paper;
    throw ConfigError("model.profile: unknown profile '" + text + "'");
}

BlockType parse_block_type(const std::string& text) {
    for (auto t : {BlockType::automatic, BlockType::basic, BlockType::bottleneck}) {
        if (to_string(t) == text) return t;
    }
    throw ConfigError("model.block_type: unknown block type '" + text + "'");
}

// ---------------------------------------------------------------------------
// ModelConfig

ModelConfig ModelConfig::from_kv(const KeyValueConfig& kv, const std::string& prefix) {
    const auto key = [&](const char* name) { return prefix + "." + name; };
    ModelConfig c;
    c.family = parse_family(kv.get_string(key("family"), to_string(c.family)));
    c.depth = kv.get_uint(key("depth"), c.depth);
    c.n = kv.get_uint(key("n"), c.n);
    c.variant = parse_variant(kv.get_string(
        key("variant"), c.family == ModelFamily::phtransformer ? "phydi" : "standard"));
    c.share_a = kv.get_bool(key("share_a"), c.share_a);
    c.init_seed = kv.get_uint(key("init_seed"), c.init_seed);
    c.profile = parse_profile(kv.get_string(key("profile"), to_string(c.profile)));
    c.init.a_scale = kv.get_double(key("init.a_scale"), c.init.a_scale);
    c.init.f_scale = kv.get_double(key("init.f_scale"), c.init.f_scale);
    c.widths = kv.get_uint_list(key("widths"), c.widths);
    c.blocks = kv.get_uint_list(key("blocks"), c.blocks);
    c.block_type = parse_block_type(kv.get_string(key("block_type"), to_string(c.block_type)));
    c.in_channels = kv.get_uint(key("in_channels"), c.in_channels);
    c.classes = kv.get_uint(key("classes"), c.classes);
    c.stem_stride = kv.get_uint(key("stem_stride"), c.stem_stride);
    c.downsample = kv.get_bool(key("downsample"), c.downsample);
    c.d_model = kv.get_uint(key("d_model"), c.d_model);
    c.heads = kv.get_uint(key("heads"), c.heads);
    c.ffn_hidden = kv.get_uint(key("ffn_hidden"), c.ffn_hidden);
    c.vocab = kv.get_uint(key("vocab"), c.vocab);
    c.seq_len = kv.get_uint(key("seq_len"), c.seq_len);
    c.tie_output = kv.get_bool(key("tie_output"), c.tie_output);
    c.ln_eps = kv.get_double(key("ln_eps"), c.ln_eps);
    return c;
}

void ModelConfig::to_kv(KeyValueConfig& kv, const std::string& prefix) const {
    const auto key = [&](const char* name) { return prefix + "." + name; };
    kv.set(key("family"), to_string(family));
    kv.set(key("depth"), std::to_string(depth));
    kv.set(key("n"), std::to_string(n));
    kv.set(key("variant"), to_string(variant));
    kv.set(key("share_a"), share_a ? "true" : "false");
    kv.set(key("init_seed"), std::to_string(init_seed));
    kv.set(key("profile"), to_string(profile));
    kv.set(key("init.a_scale"), format_double(init.a_scale));
    kv.set(key("init.f_scale"), format_double(init.f_scale));
    kv.set(key("widths"), join_list(widths));
    kv.set(key("blocks"), join_list(blocks));
    kv.set(key("block_type"), to_string(block_type));
    kv.set(key("in_channels"), std::to_string(in_channels));
    kv.set(key("classes"), std::to_string(classes));
    kv.set(key("stem_stride"), std::to_string(stem_stride));
    kv.set(key("downsample"), downsample ? "true" : "false");
    kv.set(key("d_model"), std::to_string(d_model));
    kv.set(key("heads"), std::to_string(heads));
    kv.set(key("ffn_hidden"), std::to_string(ffn_hidden));
    kv.set(key("vocab"), std::to_string(vocab));
    kv.set(key("seq_len"), std::to_string(seq_len));
    kv.set(key("tie_output"), tie_output ? "true" : "false");
    kv.set(key("ln_eps"), format_double(ln_eps));
}

bool ModelConfig::bottleneck() const {
    if (block_type == BlockType::automatic) return blocks.empty() && depth >= 50 &&
                                                   !standard_layout(depth).empty();
    return block_type == BlockType::bottleneck;
}

std::size_t resnet_layer_count(const std::vector<std::uint64_t>& blocks, bool bottleneck) {
    const auto total = std::accumulate(blocks.begin(), blocks.end(), std::uint64_t{0});
    return (bottleneck ? 3 : 2) * total + 2;
}

ModelConfig ModelConfig::resolved() const {
    ModelConfig c = *this;
    if (family == ModelFamily::phresnet) {
        if (c.widths.empty()) {
            c.widths = profile == Profile::desk ? std::vector<std::uint64_t>{16, 32, 64, 128}
                                                : std::vector<std::uint64_t>{64, 128, 256, 512};
        }
        const bool bottleneck = c.bottleneck();
        c.block_type = bottleneck ? BlockType::bottleneck : BlockType::basic;
        if (c.blocks.empty()) {
            c.blocks = standard_layout(depth);
            if (c.blocks.empty()) {
                if (profile != Profile::desk) {
                    throw ConfigError("model.depth = " + std::to_string(depth) +
                                      " needs explicit model.blocks outside the desk profile");
                }
                const std::size_t stages = c.widths.size();
                c.blocks.assign(stages, depth / stages);
                for (std::size_t s = 0; s < depth % stages; ++s) ++c.blocks[s];
            } else if (c.widths.size() != c.blocks.size()) {
                throw ConfigError("model.depth = " + std::to_string(depth) + " needs " +
                                  std::to_string(c.blocks.size()) + " stage widths");
            }
        } else {
            // Explicit layouts are named by their conventional depth when
            // they coincide with one, and by their block count otherwise.
            const auto total = std::accumulate(c.blocks.begin(), c.blocks.end(), std::uint64_t{0});
            c.depth = total;
            for (std::size_t d : {18u, 50u, 152u}) {
                if (standard_layout(d) == c.blocks && (d >= 50) == bottleneck) c.depth = d;
            }
        }
    } else {
        const bool desk = profile == Profile::desk;
        if (c.d_model == 0) c.d_model = desk ? 32 : 192;
        if (c.heads == 0) c.heads = 2;
        if (c.ffn_hidden == 0) c.ffn_hidden = 4 * c.d_model;
        if (c.seq_len == 0) c.seq_len = desk ? 64 : 35;
    }
    return c;
}

void ModelConfig::validate() const {
    if (n == 0) throw ConfigError("model.n must be at least 1");
    const ModelConfig c = resolved();
    if (family == ModelFamily::phresnet) {
        if (variant != InitVariant::standard && variant != InitVariant::wkp &&
            variant != InitVariant::phydi) {
            throw ConfigError("model.variant '" + to_string(variant) + "' does not apply to resnets");
        }
        if (c.blocks.size() != c.widths.size() || c.widths.empty()) {
            throw ConfigError("model.blocks and model.widths must list the same stages");
        }
        if (depth == 0 && profile != Profile::desk) {
            throw ConfigError("model.depth must be at least 1");
        }
        for (std::size_t s = 0; s < c.widths.size(); ++s) {
            require_divisible("model.widths[" + std::to_string(s) + "]", c.widths[s], n);
        }
        if (c.in_channels == 0) throw ConfigError("model.in_channels must be positive");
        if (c.classes == 0) throw ConfigError("model.classes must be positive");
        if (c.stem_stride == 0) throw ConfigError("model.stem_stride must be positive");
    } else {
        if (variant == InitVariant::standard || variant == InitVariant::wkp) {
            throw ConfigError("model.variant '" + to_string(variant) +
                              "' does not apply to transformers");
        }
        if (depth == 0 && profile != Profile::desk) {
            throw ConfigError("model.depth must be at least 1");
        }
        require_divisible("model.d_model", c.d_model, n);
        require_divisible("model.ffn_hidden", c.ffn_hidden, n);
        if (c.d_model % c.heads != 0) {
            throw ShapeError("model.d_model = " + std::to_string(c.d_model) +
                             " is not divisible by model.heads = " + std::to_string(c.heads));
        }
        if (c.vocab < 2) throw ConfigError("model.vocab must be at least 2");
    }
}

// ---------------------------------------------------------------------------
// Model

std::vector<GateValue> Model::gate_values() const {
    std::vector<GateValue> out;
    for (const auto& e : registry_.entries()) {
        if (e.role == ParamRole::gate) out.push_back({e.name, e.tensor.data()[0]});
    }
    return out;
}

void Model::register_all(const std::vector<const Module*>& modules) {
    for (const Module* m : modules) m->register_parameters(registry_);
}

// ---------------------------------------------------------------------------
// PHResNet

PHResNet::PHResNet(const ModelConfig& config) : Model(config.resolved()) {
    if (config.family != ModelFamily::phresnet) {
        throw ConfigError("build_phresnet needs model.family = phresnet");
    }
    config.validate();
    factory_ = make_factory(config_);
    const auto& c = config_;
    const GateMode mode = gate_mode(c.variant);
    const bool bottleneck = c.block_type == BlockType::bottleneck;

    padded_in_ = round_up(c.in_channels, c.n);
    stem_ = PHConv::make(factory_, "stem", c.widths[0], padded_in_, 3, c.stem_stride);
    std::size_t channels = c.widths[0];
    for (std::size_t s = 0; s < c.blocks.size(); ++s) {
        for (std::size_t b = 0; b < c.blocks[s]; ++b) {
            const std::size_t stride = (s > 0 && b == 0 && c.downsample) ? 2 : 1;
            const std::string name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
            blocks_.push_back(std::make_unique<ResNetBlock>(factory_, name, channels, c.widths[s],
                                                            stride, bottleneck, mode));
            stage_of_block_.push_back(s);
            channels = blocks_.back()->out_channels();
        }
    }
    head_ = PHLinear::make(factory_, "head", round_up(c.classes, c.n), channels);

    std::vector<const Module*> modules{stem_.get()};
    for (const auto& b : blocks_) modules.push_back(b.get());
    modules.push_back(head_.get());
    register_all(modules);
}

Tensor PHResNet::features(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != config_.in_channels) {
        throw ShapeError("PHResNet expects N x " + std::to_string(config_.in_channels) +
                         " x H x W images, got " + shape_str(images.shape()));
    }
    Tensor h = padded_in_ == config_.in_channels ? images : pad_channels(images, padded_in_);
    h = relu(stem_->forward(h));
    for (const auto& block : blocks_) h = block->forward(h);
    return global_avg_pool(h);
}

Tensor PHResNet::forward(const Tensor& images) const {
    const Tensor logits = head_->forward(features(images));
    return head_->spec().d_out() == config_.classes ? logits : slice_last(logits, config_.classes);
}

ModelConfig PHResNet::derive_config() const {
    ModelConfig d = config_;
    d.n = stem_->spec().n();
    d.stem_stride = stem_->stride();
    if (round_up(config_.classes, d.n) != head_->spec().d_out()) d.classes = head_->spec().d_out();
    d.blocks.assign(config_.blocks.size(), 0);
    bool any_downsample = false;
    bool any_stage_entry = false;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const auto& block = *blocks_[i];
        const std::size_t s = stage_of_block_[i];
        ++d.blocks[s];
        d.block_type = block.bottleneck() ? BlockType::bottleneck : BlockType::basic;
        d.widths[s] = block.bottleneck() ? block.out_channels() / 4 : block.out_channels();
        if (s > 0 && d.blocks[s] == 1) {
            any_stage_entry = true;
            any_downsample = any_downsample || block.stride() == 2;
        }
        switch (block.residual().mode()) {
            case GateMode::phydi: d.variant = InitVariant::phydi; break;
            case GateMode::wkp: d.variant = InitVariant::wkp; break;
            case GateMode::none:
                d.variant = stem_->summand_weights().empty() ? InitVariant::standard
                                                             : InitVariant::wkp;
                break;
        }
    }
    if (any_stage_entry) d.downsample = any_downsample;
    d.depth = std::accumulate(d.blocks.begin(), d.blocks.end(), std::uint64_t{0});
    for (std::size_t depth : {18u, 50u, 152u}) {
        if (standard_layout(depth) == d.blocks &&
            (depth >= 50) == (d.block_type == BlockType::bottleneck)) {
            d.depth = depth;
        }
    }
    return d;
}

// ---------------------------------------------------------------------------
// PHTransformer

Tensor sinusoidal_encoding(std::size_t steps, std::size_t width) {
    std::vector<double> table(steps * width);
    for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t i = 0; i < width; ++i) {
            const double freq =
                std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(width));
            const double angle = static_cast<double>(t) * freq;
            table[t * width + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
        }
    }
    return Tensor::from_data({steps, width}, std::move(table));
}

PHTransformer::PHTransformer(const ModelConfig& config) : Model(config.resolved()) {
    if (config.family != ModelFamily::phtransformer) {
        throw ConfigError("build_phtransformer needs model.family = phtransformer");
    }
    config.validate();
    factory_ = make_factory(config_);
    const auto& c = config_;

    std::vector<double> table(c.vocab * c.d_model);
    Rng rng(derive_seed(c.init_seed, "embed.table"));
    fill_normal(table, 0.0, 1.0, rng);
    embedding_ = Tensor::from_data({c.vocab, c.d_model}, std::move(table), true);
    positional_ = sinusoidal_encoding(c.seq_len, c.d_model);

    const auto variant = transformer_variant(c.variant);
    for (std::size_t i = 0; i < c.depth; ++i) {
        layers_.push_back(std::make_unique<TransformerLayer>(
            factory_, "layer" + std::to_string(i + 1), c.d_model, c.heads, c.ffn_hidden, variant,
            c.ln_eps));
    }
    if (!c.tie_output) head_ = PHLinear::make(factory_, "head", round_up(c.vocab, c.n), c.d_model);

    registry_.add("embed.table", embedding_);
    std::vector<const Module*> modules;
    for (const auto& l : layers_) modules.push_back(l.get());
    if (head_) modules.push_back(head_.get());
    register_all(modules);
}

Tensor PHTransformer::embed(std::span<const std::size_t> ids, std::size_t batch,
                            std::size_t steps) const {
    const std::size_t width = config_.d_model;
    if (ids.size() != batch * steps || steps == 0 || steps > config_.seq_len) {
        throw ShapeError("PHTransformer: " + std::to_string(ids.size()) + " ids for batch " +
                         std::to_string(batch) + " x steps " + std::to_string(steps) +
                         " (max steps " + std::to_string(config_.seq_len) + ")");
    }
    std::vector<double> pos(batch * steps * width);
    const auto pe = positional_.data();
    for (std::size_t b = 0; b < batch; ++b) {
        std::copy(pe.begin(), pe.begin() + static_cast<std::ptrdiff_t>(steps * width),
                  pos.begin() + static_cast<std::ptrdiff_t>(b * steps * width));
    }
    const Tensor e = add(embedding(embedding_, ids),
                         Tensor::from_data({batch * steps, width}, std::move(pos)));
    return reshape(e, {batch, steps, width});
}

Tensor PHTransformer::features(std::span<const std::size_t> ids, std::size_t batch,
                               std::size_t steps) const {
    Tensor h = embed(ids, batch, steps);
    for (const auto& layer : layers_) h = layer->forward(h);
    return h;
}

Tensor PHTransformer::forward(std::span<const std::size_t> ids, std::size_t batch,
                              std::size_t steps) const {
    const Tensor h = reshape(features(ids, batch, steps), {batch * steps, config_.d_model});
    if (!head_) return matmul(h, transpose(embedding_));
    const Tensor logits = head_->forward(h);
    return head_->spec().d_out() == config_.vocab ? logits : slice_last(logits, config_.vocab);
}

ModelConfig PHTransformer::derive_config() const {
    ModelConfig d = config_;
    d.depth = layers_.size();
    d.vocab = embedding_.dim(0);
    d.d_model = embedding_.dim(1);
    d.seq_len = positional_.dim(0);
    d.tie_output = head_ == nullptr;
    if (!layers_.empty()) {
        const auto& first = *layers_.front();
        d.variant = init_variant(first.variant());
        d.heads = first.attention().heads();
        d.ffn_hidden = first.ffn().up().spec().d_out();
        d.n = first.ffn().up().spec().n();
    } else if (head_) {
        d.n = head_->spec().n();
    }
    return d;
}

// ---------------------------------------------------------------------------
// Builders

std::unique_ptr<PHResNet> build_phresnet(const ModelConfig& config) {
    return std::make_unique<PHResNet>(config);
}

std::unique_ptr<PHTransformer> build_phtransformer(const ModelConfig& config) {
    return std::make_unique<PHTransformer>(config);
}

std::unique_ptr<Model> build_model(const ModelConfig& config) {
    if (config.family == ModelFamily::phresnet) return build_phresnet(config);
    return build_phtransformer(config);
}

}  // namespace phydi
