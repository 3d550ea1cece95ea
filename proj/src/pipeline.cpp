#include "loraserve/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>

#include "json.hpp"
#include "loraserve/errors.hpp"

namespace loraserve {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string_view to_string(EvalMode mode) { return mode == EvalMode::IID ? "iid" : "ood"; }

std::string_view to_string(Routing routing) {
    switch (routing) {
        case Routing::Retriever: return "retriever";
        case Routing::Untrained: return "untrained";
        case Routing::Perfect: return "perfect";
    }
    return "unknown";
}

EvalMode parse_eval_mode(std::string_view name) {
    const auto s = lower(name);
    if (s == "iid") return EvalMode::IID;
    if (s == "ood") return EvalMode::OOD;
    throw ValidationError("unknown eval mode '" + std::string(name) + "'");
}

Routing parse_routing(std::string_view name) {
    const auto s = lower(name);
    if (s == "retriever") return Routing::Retriever;
    if (s == "untrained") return Routing::Untrained;
    if (s == "perfect") return Routing::Perfect;
    throw ValidationError("unknown routing '" + std::string(name) + "'");
}

BackboneModel make_backbone(std::size_t width, std::size_t depth, std::uint64_t seed) {
    BackboneConfig cfg;
    cfg.width = width;
    cfg.depth = depth;
    cfg.seed = seed;
    return BackboneModel::random(cfg);
}

void train_task_adapters(const SyntheticTaskSuite& suite, const BackboneModel& model, Registry& registry,
                         const LoraTrainConfig& config) {
    for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
        const auto& task = suite.tasks[t];
        LoraTrainConfig cfg = config;
        cfg.seed = config.seed + 1000 * (t + 1);
        const auto examples = task.train_examples();
        registry.register_adapter(
            train_lora(model, examples, cfg, {adapter_id_for(task.task_id), task.task_id, task.train_texts()}));
    }
}

std::vector<std::string> select_retriever_tasks(const SyntheticTaskSuite& suite, double fraction,
                                                std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("retriever fraction must be in (0, 1]");
    std::vector<std::string> ids;
    for (const auto& t : suite.tasks) ids.push_back(t.task_id);
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(ids.size()) - 1e-9));
    n = std::clamp<std::size_t>(n, 2, ids.size());
    ids.resize(n);
    std::sort(ids.begin(), ids.end());
    return ids;
}

Encoder make_untrained_encoder(const RegistrySnapshot& snapshot, std::size_t hidden, std::size_t embed,
                               std::uint64_t seed) {
    std::vector<std::string> vocab = tokenize(kRetrievalInstruction);
    std::map<std::string, bool> seen;
    for (const auto& w : vocab) seen[w] = true;
    for (const auto& a : snapshot.adapters()) {
        for (const auto& s : a->samples) {
            for (auto& w : tokenize(s)) {
                if (seen.emplace(w, true).second) vocab.push_back(std::move(w));
            }
        }
    }
    return Encoder::create(std::move(vocab), hidden, embed, seed);
}

RetrieverTrainResult train_suite_retriever(const SyntheticTaskSuite& suite, const Encoder& initial,
                                           const std::vector<std::string>& task_ids, const TrainingConfig& config) {
    std::map<std::string, std::vector<std::string>> data;
    for (const auto& t : suite.tasks) {
        if (std::find(task_ids.begin(), task_ids.end(), t.task_id) != task_ids.end()) data[t.task_id] = t.train_texts();
    }
    return train_retriever(initial, data, config);
}

PreparedPipeline prepare_pipeline(const SyntheticTaskSuite& suite, const PrepareConfig& config) {
    PreparedPipeline out;
    auto model = std::make_shared<BackboneModel>(make_backbone(suite.config.width, config.backbone_depth,
                                                               config.backbone_seed));
    out.registry = std::make_shared<Registry>(model->pool_dims());
    out.registry->metadata.backbone_seed = config.backbone_seed;
    train_task_adapters(suite, *model, *out.registry, config.lora);
    out.model = model;

    const auto snap = out.registry->snapshot();
    auto untrained = make_untrained_encoder(*snap, config.encoder_hidden, config.encoder_embed, config.encoder_seed);
    out.retriever_tasks = select_retriever_tasks(suite, config.retriever_fraction, config.retriever.seed);
    auto trained = train_suite_retriever(suite, untrained, out.retriever_tasks, config.retriever);
    out.retriever_losses = std::move(trained.epoch_losses);
    out.trained_encoder = std::make_shared<const Encoder>(std::move(trained.encoder));
    out.untrained_encoder = std::make_shared<const Encoder>(std::move(untrained));
    return out;
}

EvalReport evaluate(const PreparedPipeline& prepared, const SyntheticTaskSuite& suite, const EvalConfig& config) {
    if (config.routing == Routing::Perfect && config.mode == EvalMode::OOD) {
        throw ValidationError("perfect routing uses each sample's own adapter and cannot run in OOD mode");
    }
    if (config.batch_size == 0) throw ValidationError("batch size must be >= 1");
    const CompositionStrategy strategy(config.strategy, config.strategy == StrategyKind::Selection ? 1 : config.k);
    const SnapshotPtr snap = prepared.registry->snapshot();
    const Encoder& encoder =
        config.routing == Routing::Untrained ? *prepared.untrained_encoder : *prepared.trained_encoder;
    const AdapterIndex index(encoder, *snap);

    struct Item {
        std::size_t task;
        std::size_t sample;
    };
    std::vector<Item> items;
    for (std::size_t t = 0; t < suite.tasks.size(); ++t)
        for (std::size_t s = 0; s < suite.tasks[t].test.size(); ++s) items.push_back({t, s});
    std::mt19937_64 rng(config.shuffle_seed);
    std::shuffle(items.begin(), items.end(), rng);

    EvalReport report;
    report.mode = config.mode;
    report.strategy = config.strategy;
    report.routing = config.routing;
    report.k = strategy.k();
    report.retrieval_k = config.retrieval_k;
    report.batch_size = config.batch_size;
    report.tasks.resize(suite.tasks.size());
    for (std::size_t t = 0; t < suite.tasks.size(); ++t) report.tasks[t].task_id = suite.tasks[t].task_id;

    for (std::size_t start = 0; start < items.size(); start += config.batch_size) {
        const std::size_t count = std::min(config.batch_size, items.size() - start);
        std::vector<InferenceRequest> requests;
        std::vector<std::vector<ScoredAdapter>> routing;
        for (std::size_t i = start; i < start + count; ++i) {
            const auto& task = suite.tasks[items[i].task];
            const auto& sample = task.test[items[i].sample];
            const std::string own = adapter_id_for(task.task_id);
            InferenceRequest req{task.task_id + "/" + std::to_string(items[i].sample), sample.text, sample.features,
                                 std::nullopt};
            if (config.mode == EvalMode::OOD) req.mask = AdapterMask{own};

            auto& metrics = report.tasks[items[i].task];
            if (config.routing == Routing::Perfect) {
                routing.push_back({{own, 1.0}});
                metrics.retrieval_top1 += 1.0;
                metrics.retrieval_topk += 1.0;
            } else {
                const auto query = encoder.embed_text(kRetrievalInstruction, sample.text);
                const auto ranked = index.retrieve(query, std::max(config.retrieval_k, std::size_t{1}));
                if (!ranked.empty() && ranked.front().id == own) metrics.retrieval_top1 += 1.0;
                if (std::any_of(ranked.begin(), ranked.end(), [&](const ScoredAdapter& s) { return s.id == own; })) {
                    metrics.retrieval_topk += 1.0;
                }
                routing.push_back(index.retrieve(query, strategy.k(), req.mask ? &*req.mask : nullptr));
            }
            requests.push_back(std::move(req));
        }

        const auto result = execute_batch(*prepared.model, requests, routing, strategy, *snap);
        const auto& plan = result.plan;
        auto& audit = report.audit;
        ++audit.batches;
        audit.max_p = std::max(audit.max_p, plan.num_adapters());
        if (plan.num_adapters() > std::min(count * strategy.k(), snap->size())) ++audit.dedup_violations;
        for (std::size_t r = 0; r < plan.mapping.rows(); ++r) {
            const auto row = plan.mapping.row(r);
            if (plan.mapping.nonzeros_in_row(r) == 0) continue;
            const double sum = std::accumulate(row.begin(), row.end(), 0.0);
            audit.max_row_sum_error = std::max(audit.max_row_sum_error, std::abs(sum - 1.0));
        }

        for (std::size_t i = 0; i < count; ++i) {
            const auto& item = items[start + i];
            const auto& task = suite.tasks[item.task];
            const auto& target = task.test[item.sample].targets;
            const auto& resp = result.responses[i];
            if (config.mode == EvalMode::OOD) {
                const std::string own = adapter_id_for(task.task_id);
                for (const auto& s : resp.retrieved)
                    if (s.id == own) ++audit.own_adapter_routed;
            }
            double se = 0.0;
            for (std::size_t e = 0; e < target.size(); ++e) {
                const double diff = resp.output[e] - target[e];
                se += diff * diff;
            }
            auto& metrics = report.tasks[item.task];
            metrics.mse += se / static_cast<double>(target.size());
            ++metrics.samples;
        }
    }

    for (auto& m : report.tasks) {
        if (m.samples == 0) continue;
        const double n = static_cast<double>(m.samples);
        m.mse /= n;
        m.retrieval_top1 /= n;
        m.retrieval_topk /= n;
        report.mean_mse += m.mse;
        report.mean_top1 += m.retrieval_top1;
        report.mean_topk += m.retrieval_topk;
    }
    const double nt = static_cast<double>(report.tasks.size());
    report.mean_mse /= nt;
    report.mean_top1 /= nt;
    report.mean_topk /= nt;
    return report;
}

EvalReport run_pipeline(const SyntheticTaskSuite& suite, const PrepareConfig& prepare, const EvalConfig& eval) {
    return evaluate(prepare_pipeline(suite, prepare), suite, eval);
}

std::string format_report(const EvalReport& report) {
    std::string out;
    auto kv = [&out](const std::string& k, const std::string& v) { out += k + "=" + v + "\n"; };
    kv("mode", std::string(to_string(report.mode)));
    kv("strategy", std::string(to_string(report.strategy)));
    kv("routing", std::string(to_string(report.routing)));
    kv("k", std::to_string(report.k));
    kv("batch_size", std::to_string(report.batch_size));
    kv("mean_mse", fmt_double(report.mean_mse));
    kv("retrieval_top1", fmt_double(report.mean_top1));
    kv("retrieval_top" + std::to_string(report.retrieval_k), fmt_double(report.mean_topk));
    kv("batches", std::to_string(report.audit.batches));
    kv("max_p", std::to_string(report.audit.max_p));
    kv("dedup_violations", std::to_string(report.audit.dedup_violations));
    kv("max_row_sum_error", fmt_double(report.audit.max_row_sum_error));
    kv("own_adapter_routed", std::to_string(report.audit.own_adapter_routed));
    for (const auto& t : report.tasks) {
        out += "task." + t.task_id + " mse=" + fmt_double(t.mse) + " top1=" + fmt_double(t.retrieval_top1) +
               " topk=" + fmt_double(t.retrieval_topk) + " n=" + std::to_string(t.samples) + "\n";
    }

    nlohmann::ordered_json j;
    j["mode"] = to_string(report.mode);
    j["strategy"] = to_string(report.strategy);
    j["routing"] = to_string(report.routing);
    j["k"] = report.k;
    j["retrieval_k"] = report.retrieval_k;
    j["batch_size"] = report.batch_size;
    j["mean_mse"] = report.mean_mse;
    j["retrieval_top1"] = report.mean_top1;
    j["retrieval_topk"] = report.mean_topk;
    j["audit"] = {{"batches", report.audit.batches},
                  {"max_p", report.audit.max_p},
                  {"dedup_violations", report.audit.dedup_violations},
                  {"max_row_sum_error", report.audit.max_row_sum_error},
                  {"own_adapter_routed", report.audit.own_adapter_routed}};
    j["tasks"] = nlohmann::ordered_json::array();
    for (const auto& t : report.tasks) {
        j["tasks"].push_back({{"task_id", t.task_id},
                              {"samples", t.samples},
                              {"mse", t.mse},
                              {"retrieval_top1", t.retrieval_top1},
                              {"retrieval_topk", t.retrieval_topk}});
    }
    out += "--- report ---\n" + j.dump(2) + "\n";
    return out;
}

}  // namespace loraserve
