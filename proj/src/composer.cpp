#include "loraserve/composer.hpp"

#include <algorithm>
#include <cctype>

#include "loraserve/errors.hpp"

namespace loraserve {

std::string_view to_string(StrategyKind kind) {
    switch (kind) {
        case StrategyKind::Selection: return "selection";
        case StrategyKind::Mixture: return "mixture";
        case StrategyKind::Fusion: return "fusion";
    }
    return "unknown";
}

StrategyKind parse_strategy(std::string_view name) {
    std::string lower(name);
    for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (lower == "selection") return StrategyKind::Selection;
    if (lower == "mixture") return StrategyKind::Mixture;
    if (lower == "fusion") return StrategyKind::Fusion;
    throw ValidationError("unknown strategy '" + std::string(name) + "'");
}

CompositionStrategy::CompositionStrategy(StrategyKind kind, std::size_t k) : kind_(kind), k_(k) {
    if (k == 0) throw ValidationError("k must be >= 1");
    if (kind == StrategyKind::Selection && k != 1) throw ValidationError("selection requires k = 1");
}

BatchPlan build_batch_plan(const std::vector<std::vector<std::string>>& retrievals,
                           const CompositionStrategy& strategy, const RegistrySnapshot& snapshot) {
    if (retrievals.empty()) throw EmptyPlanError("batch has no samples");

    std::vector<std::vector<std::string>> lists;
    lists.reserve(retrievals.size());
    bool any = false;
    for (std::size_t i = 0; i < retrievals.size(); ++i) {
        auto list = retrievals[i];
        if (strategy.kind() == StrategyKind::Selection && list.size() > 1) list.resize(1);
        if (list.size() > strategy.k()) {
            throw ValidationError("sample " + std::to_string(i) + " has " + std::to_string(list.size()) +
                                  " adapters, more than k=" + std::to_string(strategy.k()));
        }
        for (const auto& id : list) {
            if (!snapshot.contains(id)) throw NotFoundError("no adapter with id '" + id + "' in snapshot");
        }
        any = any || !list.empty();
        lists.push_back(std::move(list));
    }
    if (!any) throw EmptyPlanError("no adapters retrieved for any sample");

    BatchPlan plan{{}, {}, strategy, snapshot.version()};
    for (const auto& list : lists) plan.adapter_ids.insert(plan.adapter_ids.end(), list.begin(), list.end());
    std::sort(plan.adapter_ids.begin(), plan.adapter_ids.end());
    plan.adapter_ids.erase(std::unique(plan.adapter_ids.begin(), plan.adapter_ids.end()), plan.adapter_ids.end());

    std::vector<std::vector<std::size_t>> columns(lists.size());
    for (std::size_t i = 0; i < lists.size(); ++i) {
        for (const auto& id : lists[i]) {
            auto it = std::lower_bound(plan.adapter_ids.begin(), plan.adapter_ids.end(), id);
            columns[i].push_back(static_cast<std::size_t>(it - plan.adapter_ids.begin()));
        }
    }
    plan.mapping = MappingMatrix::uniform(plan.adapter_ids.size(), columns);
    return plan;
}

LoraAdapter pad_rank(const LoraAdapter& adapter, std::size_t target_rank) {
    if (target_rank < adapter.rank) {
        throw ValidationError("cannot pad adapter '" + adapter.id + "' of rank " + std::to_string(adapter.rank) +
                              " down to " + std::to_string(target_rank));
    }
    if (target_rank == adapter.rank) return adapter;

    LoraAdapter out = adapter;
    out.rank = target_rank;
    out.alpha = adapter.alpha * static_cast<double>(target_rank) / static_cast<double>(adapter.rank);
    for (auto& layer : out.layers) {
        const std::size_t d = layer.a.extent(1);
        DenseTensor a({target_rank, d});
        DenseTensor b({d, target_rank});
        for (std::size_t r = 0; r < adapter.rank; ++r)
            for (std::size_t j = 0; j < d; ++j) a.at(r, j) = layer.a.at(r, j);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t r = 0; r < adapter.rank; ++r) b.at(i, r) = layer.b.at(i, r);
        layer = {std::move(a), std::move(b)};
    }
    return out;
}

LoraAdapter fuse_adapters(std::span<const LoraAdapter> adapters) {
    if (adapters.empty()) throw ValidationError("fuse_adapters needs at least one adapter");
    const auto& first = adapters.front();
    for (const auto& a : adapters) {
        if (a.rank != first.rank || a.layers.size() != first.layers.size()) {
            throw ValidationError("fused adapters must share rank and depth");
        }
        for (std::size_t l = 0; l < a.layers.size(); ++l) {
            if (a.layers[l].a.shape() != first.layers[l].a.shape() || a.layers[l].b.shape() != first.layers[l].b.shape()) {
                throw ValidationError("fused adapters must share layer shapes");
            }
        }
    }

    const double inv_k = 1.0 / static_cast<double>(adapters.size());
    const bool uniform_scale = std::all_of(adapters.begin(), adapters.end(),
                                           [&](const LoraAdapter& a) { return a.scale() == first.scale(); });

    LoraAdapter out;
    out.rank = first.rank;
    out.task_tag = first.task_tag;
    out.id = "fused(";
    double alpha_sum = 0.0;
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        out.id += (i ? "+" : "") + adapters[i].id;
        alpha_sum += adapters[i].alpha;
        out.samples.insert(out.samples.end(), adapters[i].samples.begin(), adapters[i].samples.end());
    }
    out.id += ")";
    out.alpha = alpha_sum * inv_k;
    const double out_scale = out.scale();

    for (std::size_t l = 0; l < first.layers.size(); ++l) {
        DenseTensor a(first.layers[l].a.shape());
        DenseTensor b(first.layers[l].b.shape());
        for (const auto& ad : adapters) {
            const auto& layer = ad.layers[l];
            const double bw = uniform_scale ? 1.0 : ad.scale() / out_scale;
            for (std::size_t i = 0; i < a.size(); ++i) a[i] += layer.a[i];
            for (std::size_t i = 0; i < b.size(); ++i) b[i] += bw * layer.b[i];
        }
        a.scale(inv_k);
        b.scale(inv_k);
        out.layers.push_back({std::move(a), std::move(b)});
    }
    return out;
}

PlanTensors materialize_plan(const BatchPlan& plan, const RegistrySnapshot& snapshot, bool pad_ranks) {
    std::vector<const LoraAdapter*> adapters;
    adapters.reserve(plan.adapter_ids.size());
    std::size_t max_rank = 0;
    for (const auto& id : plan.adapter_ids) {
        adapters.push_back(&snapshot.get(id));
        max_rank = std::max(max_rank, adapters.back()->rank);
    }
    if (!pad_ranks) {
        for (const auto* a : adapters) {
            if (a->rank != max_rank) throw RankMismatchError("batch plan mixes adapter ranks");
        }
    }

    const std::size_t p = adapters.size();
    const std::size_t d = snapshot.dims().width;
    const std::size_t layers = snapshot.dims().num_layers;
    PlanTensors out;
    out.rank = max_rank;
    out.scales.reserve(p);
    for (const auto* a : adapters) out.scales.push_back(a->scale());

    for (std::size_t l = 0; l < layers; ++l) {
        DenseTensor as({p, max_rank, d});
        DenseTensor bs({p, d, max_rank});
        for (std::size_t j = 0; j < p; ++j) {
            const auto& layer = adapters[j]->layers[l];
            const std::size_t r = adapters[j]->rank;
            for (std::size_t ri = 0; ri < r; ++ri)
                for (std::size_t di = 0; di < d; ++di) as.at(j, ri, di) = layer.a.at(ri, di);
            for (std::size_t di = 0; di < d; ++di)
                for (std::size_t ri = 0; ri < r; ++ri) bs.at(j, di, ri) = layer.b.at(di, ri);
        }
        out.a_stacks.push_back(std::move(as));
        out.b_stacks.push_back(std::move(bs));
    }
    return out;
}

}  // namespace loraserve
