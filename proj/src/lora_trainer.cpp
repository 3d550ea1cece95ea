#include <cmath>
#include <random>

#include "loraserve/engine.hpp"
#include "loraserve/errors.hpp"

namespace loraserve {

namespace {

// All positions of all examples as one [n, d] row block.
struct Rows {
    std::vector<double> x;
    std::vector<double> t;
    std::size_t n = 0;
};

Rows flatten(std::span<const TaskExample> data, std::size_t d) {
    if (data.empty()) throw ValidationError("task data must be non-empty");
    Rows rows;
    for (const auto& ex : data) {
        if (ex.features.rank() != 2 || ex.features.extent(1) != d || ex.targets.shape() != ex.features.shape()) {
            throw DimensionError("task examples must hold matching [l, d] features and targets");
        }
        rows.x.insert(rows.x.end(), ex.features.data().begin(), ex.features.data().end());
        rows.t.insert(rows.t.end(), ex.targets.data().begin(), ex.targets.data().end());
        rows.n += ex.features.extent(0);
    }
    return rows;
}

struct LayerCache {
    std::vector<double> input;  // [n, d]
    std::vector<double> down;   // [n, r] = input A^T
    std::vector<double> out;    // [n, d] post-activation
};

// Forward through every layer, caching what backprop needs.
std::vector<LayerCache> forward_cached(const BackboneModel& model, const LoraAdapter& adapter,
                                       const std::vector<double>& x, std::size_t n) {
    const std::size_t d = model.width(), r = adapter.rank;
    const double s = adapter.scale();
    std::vector<LayerCache> caches(model.depth());
    std::vector<double> h = x;
    for (std::size_t li = 0; li < model.depth(); ++li) {
        const auto& W = model.layers()[li].weight;
        const auto& bias = model.layers()[li].bias;
        const auto& A = adapter.layers[li].a;
        const auto& B = adapter.layers[li].b;
        auto& c = caches[li];
        c.input = h;
        c.down.assign(n * r, 0.0);
        c.out.assign(n * d, 0.0);
        for (std::size_t row = 0; row < n; ++row) {
            const double* hr = h.data() + row * d;
            double* u = c.down.data() + row * r;
            for (std::size_t k = 0; k < r; ++k) {
                double acc = 0.0;
                for (std::size_t j = 0; j < d; ++j) acc += A.at(k, j) * hr[j];
                u[k] = acc;
            }
            double* o = c.out.data() + row * d;
            for (std::size_t i = 0; i < d; ++i) {
                double acc = bias[i];
                for (std::size_t j = 0; j < d; ++j) acc += W.at(i, j) * hr[j];
                double lora = 0.0;
                for (std::size_t k = 0; k < r; ++k) lora += B.at(i, k) * u[k];
                acc += s * lora;
                o[i] = li + 1 < model.depth() ? std::tanh(acc) : acc;
            }
        }
        h = c.out;
    }
    return caches;
}

void check_adapter(const BackboneModel& model, const LoraAdapter& adapter) {
    validate_adapter(adapter, model.pool_dims());
}

}  // namespace

double lora_loss(const BackboneModel& model, const LoraAdapter& adapter, std::span<const TaskExample> data) {
    check_adapter(model, adapter);
    const auto rows = flatten(data, model.width());
    const auto caches = forward_cached(model, adapter, rows.x, rows.n);
    const auto& y = caches.back().out;
    double sum = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) sum += (y[i] - rows.t[i]) * (y[i] - rows.t[i]);
    return sum / static_cast<double>(y.size());
}

LoraGradient lora_loss_and_gradient(const BackboneModel& model, const LoraAdapter& adapter,
                                    std::span<const TaskExample> data) {
    check_adapter(model, adapter);
    const std::size_t d = model.width(), r = adapter.rank;
    const double s = adapter.scale();
    const auto rows = flatten(data, d);
    const std::size_t n = rows.n;
    const auto caches = forward_cached(model, adapter, rows.x, n);

    LoraGradient grad;
    const auto& y = caches.back().out;
    const double inv_count = 1.0 / static_cast<double>(y.size());
    std::vector<double> g(y.size());  // dL/d(layer output)
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double diff = y[i] - rows.t[i];
        grad.loss += diff * diff;
        g[i] = 2.0 * diff * inv_count;
    }
    grad.loss *= inv_count;

    grad.layers.resize(model.depth());
    for (std::size_t li = model.depth(); li-- > 0;) {
        const auto& c = caches[li];
        const auto& W = model.layers()[li].weight;
        const auto& A = adapter.layers[li].a;
        const auto& B = adapter.layers[li].b;
        DenseTensor dA({r, d});
        DenseTensor dB({d, r});

        // through tanh for hidden layers
        if (li + 1 < model.depth())
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - c.out[i] * c.out[i];

        std::vector<double> g_in(n * d, 0.0);
        std::vector<double> du(r);
        for (std::size_t row = 0; row < n; ++row) {
            const double* gz = g.data() + row * d;
            const double* u = c.down.data() + row * r;
            const double* hr = c.input.data() + row * d;
            double* gi = g_in.data() + row * d;
            std::fill(du.begin(), du.end(), 0.0);
            for (std::size_t i = 0; i < d; ++i) {
                const double gv = gz[i];
                for (std::size_t k = 0; k < r; ++k) {
                    dB.at(i, k) += s * gv * u[k];
                    du[k] += s * gv * B.at(i, k);
                }
                for (std::size_t j = 0; j < d; ++j) gi[j] += gv * W.at(i, j);
            }
            for (std::size_t k = 0; k < r; ++k) {
                for (std::size_t j = 0; j < d; ++j) {
                    dA.at(k, j) += du[k] * hr[j];
                    gi[j] += du[k] * A.at(k, j);
                }
            }
        }
        grad.layers[li] = {std::move(dA), std::move(dB)};
        g = std::move(g_in);
    }
    return grad;
}

LoraAdapter init_lora(const BackboneModel& model, const LoraTrainConfig& config, AdapterIdentity identity) {
    if (config.rank == 0) throw ValidationError("LoRA rank must be >= 1");
    if (!(config.alpha > 0.0)) throw ValidationError("LoRA alpha must be > 0");
    std::mt19937_64 rng(config.seed);
    LoraAdapter adapter;
    adapter.id = std::move(identity.id);
    adapter.task_tag = std::move(identity.task_tag);
    adapter.samples = std::move(identity.samples);
    adapter.rank = config.rank;
    adapter.alpha = config.alpha;
    for (std::size_t li = 0; li < model.depth(); ++li) {
        adapter.layers.push_back({DenseTensor::random_normal({config.rank, model.width()}, rng, config.init_std),
                                  DenseTensor({model.width(), config.rank})});
    }
    return adapter;
}

LoraAdapter train_lora(const BackboneModel& model, std::span<const TaskExample> data, const LoraTrainConfig& config,
                       AdapterIdentity identity) {
    if (data.empty()) throw ValidationError("task data must be non-empty");
    LoraAdapter adapter = init_lora(model, config, std::move(identity));
    for (std::size_t step = 0; step < config.steps; ++step) {
        const auto grad = lora_loss_and_gradient(model, adapter, data);
        for (std::size_t li = 0; li < adapter.layers.size(); ++li) {
            auto& layer = adapter.layers[li];
            for (std::size_t i = 0; i < layer.a.size(); ++i) layer.a[i] -= config.learning_rate * grad.layers[li].a[i];
            for (std::size_t i = 0; i < layer.b.size(); ++i) layer.b[i] -= config.learning_rate * grad.layers[li].b[i];
        }
    }
    return adapter;
}

}  // namespace loraserve
