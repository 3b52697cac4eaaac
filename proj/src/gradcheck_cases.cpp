#include "phydi/grad_check.hpp"
#include "phydi/harness.hpp"
#include "phydi/layers.hpp"
#include "phydi/ops.hpp"
#include "phydi/random.hpp"

namespace phydi {

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = true,
                     double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    Rng rng(seed);
    fill_uniform(v, lo, hi, rng);
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

/// sum(y * r) for a fixed random r, so that no output coordinate is
/// weighted by zero.
Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
    return sum(mul(y, random_tensor(y.shape(), seed, false)));
}

LayerFactory factory(std::uint64_t seed, std::size_t n, bool wkp = false) {
    LayerFactory f;
    f.seed = seed;
    f.n = n;
    f.wkp = wkp;
    return f;
}

/// Randomises a parameter that starts at a constant, so its gradient is
/// checked away from special values.
void perturb(Tensor t, std::uint64_t seed, double lo, double hi) {
    Rng rng(seed);
    fill_uniform(t.mutable_data(), lo, hi, rng);
}

template <typename Layer>
GradcheckCase check_input(std::string name, std::shared_ptr<Layer> layer, Shape input_shape,
                          std::uint64_t seed) {
    return {std::move(name), [layer, input_shape, seed] {
                Tensor x = random_tensor(input_shape, seed);
                return finite_diff_check(
                    [&](const Tensor& in) { return weighted_sum(layer->forward(in), seed + 1); }, x);
            }};
}

template <typename Layer>
GradcheckCase check_param(std::string name, std::shared_ptr<Layer> layer, Tensor param,
                          Shape input_shape, std::uint64_t seed) {
    return {std::move(name), [layer, param, input_shape, seed] {
                const Tensor x = random_tensor(input_shape, seed, false);
                return finite_diff_check(
                    [&](const Tensor&) { return weighted_sum(layer->forward(x), seed + 1); }, param);
            }};
}

}  // namespace

std::vector<GradcheckCase> default_gradcheck_cases() {
    std::vector<GradcheckCase> cases;

    {
        auto phm = std::shared_ptr<PHLinear>(PHLinear::make(factory(11, 2), "phm", 4, 6));
        perturb(phm->bias(), 12, -0.5, 0.5);
        const Shape in{3, 6};
        cases.push_back(check_input("phm:x", phm, in, 13));
        cases.push_back(check_param("phm:A", phm, phm->spec().a()[0], in, 14));
        cases.push_back(check_param("phm:F", phm, phm->spec().f()[1], in, 15));
        cases.push_back(check_param("phm:bias", phm, phm->bias(), in, 16));
        auto phm3 = std::shared_ptr<PHLinear>(PHLinear::make(factory(17, 3), "phm3", 6, 3));
        cases.push_back(check_input("phm:x_rank3", phm3, Shape{2, 2, 3}, 18));
        auto wkp = std::shared_ptr<PHLinear>(PHLinear::make(factory(19, 2, true), "wkp", 4, 4));
        perturb(wkp->summand_weights()[0], 20, 0.5, 1.5);
        cases.push_back(check_param("phm:wkp_weight", wkp, wkp->summand_weights()[0], Shape{3, 4}, 21));
    }
    {
        auto phc = std::shared_ptr<PHConv>(PHConv::make(factory(31, 2), "phc", 4, 2, 3, 2));
        perturb(phc->bias(), 32, -0.5, 0.5);
        const Shape in{2, 2, 5, 5};
        cases.push_back(check_input("phc:x", phc, in, 33));
        cases.push_back(check_param("phc:A", phc, phc->spec().a()[1], in, 34));
        cases.push_back(check_param("phc:F", phc, phc->spec().f()[0], in, 35));
        cases.push_back(check_param("phc:bias", phc, phc->bias(), in, 36));
        auto pointwise = std::shared_ptr<PHConv>(PHConv::make(factory(37, 2), "pw", 4, 4, 1, 1));
        cases.push_back(check_input("phc:x_pointwise", pointwise, Shape{2, 4, 3, 3}, 38));
        cases.push_back(check_param("phc:F_pointwise", pointwise, pointwise->spec().f()[1],
                                    Shape{2, 4, 3, 3}, 39));
    }
    {
        auto att = std::make_shared<PHAttention>(factory(41, 2), "att", 4, 2, true);
        const Shape in{2, 3, 4};
        cases.push_back(check_input("phatt:x", att, in, 42));
        cases.push_back(check_param("phatt:q.F", att, att->query().spec().f()[0], in, 43));
        cases.push_back(check_param("phatt:k.A", att, att->key().spec().a()[1], in, 44));
        cases.push_back(check_param("phatt:v.F", att, att->value().spec().f()[1], in, 45));
        cases.push_back(check_param("phatt:o.bias", att, att->output().bias(), in, 46));
    }
    {
        auto branch = std::make_unique<Sequential>();
        branch->push(PHLinear::make(factory(51, 2), "res.up", 6, 4));
        branch->push(std::make_unique<ReLU>());
        branch->push(PHLinear::make(factory(51, 2), "res.down", 4, 6));
        auto res = std::make_shared<GatedResidual>("res", std::move(branch), GateMode::phydi);
        res->alpha().mutable_data()[0] = 0.3;
        const Shape in{3, 4};
        cases.push_back(check_input("residual:x", res, in, 52));
        cases.push_back(check_param("residual:alpha", res, res->alpha(), in, 53));
        const auto& inner = static_cast<const Sequential&>(res->inner());
        const auto& up = static_cast<const PHLinear&>(*inner.layers()[0]);
        cases.push_back(check_param("residual:branch.F", res, up.spec().f()[0], in, 54));

        auto basic = std::make_shared<ResNetBlock>(factory(55, 2), "blk", 2, 4, 2, false,
                                                   GateMode::phydi);
        basic->residual().alpha().mutable_data()[0] = 0.5;
        cases.push_back(check_input("residual:resnet_basic_x", basic, Shape{2, 2, 4, 4}, 56));
        auto bottleneck = std::make_shared<ResNetBlock>(factory(57, 2), "bot", 4, 2, 1, true,
                                                        GateMode::none);
        cases.push_back(check_input("residual:resnet_bottleneck_x", bottleneck, Shape{2, 4, 3, 3}, 58));
    }
    const std::pair<const char*, TransformerVariant> variants[] = {
        {"transformer_postnorm", TransformerVariant::postnorm},
        {"transformer_prenorm", TransformerVariant::prenorm},
        {"transformer_phydi", TransformerVariant::phydi}};
    std::uint64_t seed = 61;
    for (const auto& [name, variant] : variants) {
        auto layer = std::make_shared<TransformerLayer>(factory(seed, 2), name, 4, 2, 8, variant);
        const Shape in{2, 3, 4};
        const std::string prefix = name;
        cases.push_back(check_input(prefix + ":x", layer, in, seed + 1));
        cases.push_back(check_param(prefix + ":ffn.up.F", layer, layer->ffn().up().spec().f()[0], in,
                                    seed + 2));
        if (variant == TransformerVariant::phydi) {
            layer->alpha().mutable_data()[0] = 0.4;
            cases.push_back(check_param(prefix + ":alpha", layer, layer->alpha(), in, seed + 3));
        } else {
            cases.push_back(check_param(prefix + ":ln1.gain", layer, layer->norm1()->gain(), in,
                                        seed + 3));
        }
        seed += 10;
    }
    {
        auto ln = std::make_shared<LayerNorm>("ln", 5);
        perturb(ln->gain(), 91, 0.5, 1.5);
        perturb(ln->bias(), 92, -0.5, 0.5);
        const Shape in{3, 5};
        cases.push_back(check_input("layernorm:x", ln, in, 93));
        cases.push_back(check_param("layernorm:gain", ln, ln->gain(), in, 94));
        cases.push_back(check_param("layernorm:bias", ln, ln->bias(), in, 95));
    }
    cases.push_back({"loss:cross_entropy", [] {
                         const std::vector<std::size_t> targets{0, 3, 1, 2};
                         Tensor logits = random_tensor({4, 5}, 101, true, -2.0, 2.0);
                         return finite_diff_check(
                             [&](const Tensor& z) { return cross_entropy(z, targets); }, logits);
                     }});
    cases.push_back({"loss:softmax", [] {
                         Tensor x = random_tensor({3, 4}, 102);
                         return finite_diff_check(
                             [](const Tensor& z) { return weighted_sum(softmax(z, 1), 103); }, x);
                     }});
    cases.push_back({"loss:embedding", [] {
                         const std::vector<std::size_t> ids{2, 0, 2, 1};
                         Tensor table = random_tensor({3, 4}, 104);
                         return finite_diff_check(
                             [&](const Tensor& t) { return weighted_sum(embedding(t, ids), 105); },
                             table);
                     }});
    return cases;
}

}  // namespace phydi
