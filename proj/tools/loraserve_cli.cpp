// loraserve command-line front end. One subcommand per pipeline stage; every
// subcommand accepts --dump-config to print its effective settings as JSON
// and exit without doing any work.

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "loraserve/errors.hpp"
#include "loraserve/pipeline.hpp"
#include "loraserve/protocol.hpp"

using namespace loraserve;
using nlohmann::ordered_json;

namespace {

constexpr const char* kSuiteFormat = "loraserve-suite";

ordered_json suite_to_json(const SuiteConfig& c) {
    return {{"format", kSuiteFormat},
            {"num_tasks", c.num_tasks},
            {"train_per_task", c.train_per_task},
            {"test_per_task", c.test_per_task},
            {"width", c.width},
            {"seq_len", c.seq_len},
            {"seed", c.seed},
            {"num_families", c.num_families},
            {"words_per_task", c.words_per_task},
            {"words_per_family", c.words_per_family},
            {"filler_words", c.filler_words},
            {"task_tokens", c.task_tokens},
            {"family_tokens", c.family_tokens},
            {"filler_tokens", c.filler_tokens},
            {"family_rank_gain", c.family_rank_gain},
            {"task_rank_gain", c.task_rank_gain},
            {"shift_rank", c.shift_rank},
            {"feature_std", c.feature_std}};
}

// The suite file stores only the generator settings; samples are regenerated.
SuiteConfig load_suite_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open suite file '" + path + "'");
    const std::string text((std::istreambuf_iterator<char>(in)), {});
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("suite file '" + path + "': " + e.what(), e.byte);
    }
    try {
        if (j.at("format") != kSuiteFormat) throw ParseError("suite file '" + path + "' has the wrong format tag", 0);
        SuiteConfig c;
        j.at("num_tasks").get_to(c.num_tasks);
        j.at("train_per_task").get_to(c.train_per_task);
        j.at("test_per_task").get_to(c.test_per_task);
        j.at("width").get_to(c.width);
        j.at("seq_len").get_to(c.seq_len);
        j.at("seed").get_to(c.seed);
        j.at("num_families").get_to(c.num_families);
        j.at("words_per_task").get_to(c.words_per_task);
        j.at("words_per_family").get_to(c.words_per_family);
        j.at("filler_words").get_to(c.filler_words);
        j.at("task_tokens").get_to(c.task_tokens);
        j.at("family_tokens").get_to(c.family_tokens);
        j.at("filler_tokens").get_to(c.filler_tokens);
        j.at("family_rank_gain").get_to(c.family_rank_gain);
        j.at("task_rank_gain").get_to(c.task_rank_gain);
        j.at("shift_rank").get_to(c.shift_rank);
        j.at("feature_std").get_to(c.feature_std);
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("suite file '" + path + "': " + e.what(), 0);
    }
}

struct LoadedStack {
    std::shared_ptr<const BackboneModel> model;
    std::shared_ptr<Registry> registry;
};

// The backbone is not stored; it is rebuilt from the seed kept in the
// registry manifest and the pool dimensions.
LoadedStack load_stack(const std::string& registry_dir) {
    auto loaded = load_registry(registry_dir);
    if (!loaded.metadata.backbone_seed) {
        throw ValidationError("registry '" + registry_dir + "' has no backbone_seed; cannot rebuild the backbone");
    }
    const auto dims = loaded.snapshot->dims();
    LoadedStack out;
    out.model = std::make_shared<const BackboneModel>(make_backbone(dims.width, dims.num_layers, *loaded.metadata.backbone_seed));
    out.registry = std::make_shared<Registry>(*loaded.snapshot);
    out.registry->metadata = loaded.metadata;
    return out;
}

// Test samples interleaved across tasks (round robin), cycled up to `count`.
std::vector<InferenceRequest> mixed_requests(const SyntheticTaskSuite& suite, std::size_t count) {
    std::vector<InferenceRequest> pool;
    for (std::size_t round = 0;; ++round) {
        bool any = false;
        for (const auto& t : suite.tasks) {
            if (round >= t.test.size()) continue;
            any = true;
            const auto& s = t.test[round];
            pool.push_back({t.task_id + "/" + std::to_string(round), s.text, s.features, std::nullopt});
        }
        if (!any) break;
    }
    if (pool.empty()) throw ValidationError("suite has no test samples");
    std::vector<InferenceRequest> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(pool[i % pool.size()]);
    return out;
}

bool dump(const ordered_json& cfg, bool requested) {
    if (requested) std::cout << cfg.dump(2) << "\n";
    return requested;
}

struct SuiteFlags {
    SuiteConfig config;
    std::string out = "suite.json";
};

struct LoraFlags {
    std::string suite = "suite.json";
    std::string out = "registry";
    std::size_t depth = 2;
    std::uint64_t backbone_seed = 11;
    LoraTrainConfig lora;
};

struct RetrieverFlags {
    std::string suite = "suite.json";
    std::string registry = "registry";
    std::string out = "encoder";
    double fraction = 0.4;
    std::size_t hidden = 32;
    std::size_t embed = 32;
    std::uint64_t encoder_seed = 5;
    bool untrained = false;
    TrainingConfig training;
};

struct EvalFlags {
    std::string suite = "suite.json";
    std::string registry = "registry";
    std::string encoder;
    std::string strategy = "mixture";
    std::string mode = "iid";
    std::string routing = "retriever";
    std::size_t hidden = 32;
    std::size_t embed = 32;
    std::uint64_t encoder_seed = 5;
    EvalConfig eval;
};

struct BenchFlags {
    std::string suite = "suite.json";
    std::string registry = "registry";
    std::string encoder = "encoder";
    std::string strategy = "mixture";
    std::size_t k = kDefaultTopK;
    std::vector<std::size_t> batch_sizes{1, 2, 4, 8, 16, 32};
    std::size_t requests = 1000;
    BenchmarkConfig bench;
};

struct ServeFlags {
    std::string registry = "registry";
    std::string encoder = "encoder";
    std::string strategy = "mixture";
    std::size_t k = kDefaultTopK;
    std::size_t max_batch = 32;
};

CompositionStrategy make_strategy(const std::string& name, std::size_t k) {
    const auto kind = parse_strategy(name);
    return CompositionStrategy(kind, kind == StrategyKind::Selection ? 1 : k);
}

int run_gen(const SuiteFlags& f, bool dump_only) {
    auto cfg = suite_to_json(f.config);
    if (dump(ordered_json{{"out", f.out}, {"suite", cfg}}, dump_only)) return 0;
    const auto suite = generate_suite(f.config);  // validates the settings
    std::ofstream out(f.out);
    if (!out) throw IoError("cannot write '" + f.out + "'");
    out << cfg.dump(2) << "\n";
    std::size_t test = 0;
    for (const auto& t : suite.tasks) test += t.test.size();
    std::cout << "tasks=" << suite.tasks.size() << "\ntest_samples=" << test << "\nwrote=" << f.out << "\n";
    return 0;
}

int run_train_loras(const LoraFlags& f, bool dump_only) {
    const ordered_json cfg{{"suite", f.suite},       {"out", f.out},
                           {"depth", f.depth},       {"backbone_seed", f.backbone_seed},
                           {"rank", f.lora.rank},    {"alpha", f.lora.alpha},
                           {"steps", f.lora.steps},  {"learning_rate", f.lora.learning_rate},
                           {"seed", f.lora.seed},    {"init_std", f.lora.init_std}};
    if (dump(cfg, dump_only)) return 0;
    const auto suite = generate_suite(load_suite_config(f.suite));
    const auto model = make_backbone(suite.config.width, f.depth, f.backbone_seed);
    Registry registry(model.pool_dims());
    train_task_adapters(suite, model, registry, f.lora);
    const auto snap = registry.snapshot();
    save_registry(*snap, f.out, RegistryMetadata{f.backbone_seed});
    std::cout << "adapters=" << snap->size() << "\nversion=" << snap->version() << "\nwrote=" << f.out << "\n";
    return 0;
}

int run_train_retriever(const RetrieverFlags& f, bool dump_only) {
    const auto& t = f.training;
    const ordered_json cfg{{"suite", f.suite},
                           {"registry", f.registry},
                           {"out", f.out},
                           {"fraction", f.fraction},
                           {"hidden", f.hidden},
                           {"embed", f.embed},
                           {"encoder_seed", f.encoder_seed},
                           {"untrained", f.untrained},
                           {"gamma", t.gamma},
                           {"negatives", t.negatives},
                           {"epochs", t.epochs},
                           {"learning_rate", t.learning_rate},
                           {"seed", t.seed},
                           {"projection_lr_scale", t.projection_lr_scale},
                           {"token_decay", t.token_decay}};
    if (dump(cfg, dump_only)) return 0;
    const auto stack = load_stack(f.registry);
    auto encoder = make_untrained_encoder(*stack.registry->snapshot(), f.hidden, f.embed, f.encoder_seed);
    if (!f.untrained) {
        const auto suite = generate_suite(load_suite_config(f.suite));
        const auto tasks = select_retriever_tasks(suite, f.fraction, t.seed);
        auto result = train_suite_retriever(suite, encoder, tasks, t);
        encoder = std::move(result.encoder);
        std::cout << "retriever_tasks=";
        for (std::size_t i = 0; i < tasks.size(); ++i) std::cout << (i ? "," : "") << tasks[i];
        std::cout << "\n";
        if (!result.epoch_losses.empty()) {
            std::cout << "initial_loss=" << result.epoch_losses.front() << "\nfinal_loss=" << result.epoch_losses.back()
                      << "\n";
        }
    }
    save_encoder(encoder, f.out);
    std::cout << "vocab=" << encoder.vocab_size() << "\nwrote=" << f.out << "\n";
    return 0;
}

int run_eval(const EvalFlags& f, bool dump_only) {
    auto e = f.eval;
    e.strategy = parse_strategy(f.strategy);
    e.mode = parse_eval_mode(f.mode);
    e.routing = parse_routing(f.routing);
    const ordered_json cfg{{"suite", f.suite},         {"registry", f.registry},
                           {"encoder", f.encoder},     {"strategy", to_string(e.strategy)},
                           {"k", e.k},                 {"mode", to_string(e.mode)},
                           {"routing", to_string(e.routing)}, {"batch_size", e.batch_size},
                           {"retrieval_k", e.retrieval_k},    {"shuffle_seed", e.shuffle_seed},
                           {"hidden", f.hidden},       {"embed", f.embed},
                           {"encoder_seed", f.encoder_seed}};
    if (dump(cfg, dump_only)) return 0;
    if (e.routing == Routing::Retriever && f.encoder.empty()) {
        throw ValidationError("--routing retriever needs --encoder (a trained encoder directory)");
    }
    const auto suite = generate_suite(load_suite_config(f.suite));
    const auto stack = load_stack(f.registry);
    PreparedPipeline prepared;
    prepared.model = stack.model;
    prepared.registry = stack.registry;
    prepared.untrained_encoder = std::make_shared<const Encoder>(
        make_untrained_encoder(*stack.registry->snapshot(), f.hidden, f.embed, f.encoder_seed));
    prepared.trained_encoder =
        f.encoder.empty() ? prepared.untrained_encoder : std::make_shared<const Encoder>(load_encoder(f.encoder));
    std::cout << format_report(evaluate(prepared, suite, e));
    return 0;
}

int run_bench(const BenchFlags& f, bool dump_only) {
    const ordered_json cfg{{"suite", f.suite},       {"registry", f.registry},  {"encoder", f.encoder},
                           {"strategy", f.strategy}, {"k", f.k},                {"batch_sizes", f.batch_sizes},
                           {"requests", f.requests}, {"trials", f.bench.trials}, {"warmup", f.bench.warmup},
                           {"unbatched", f.bench.unbatched}};
    if (dump(cfg, dump_only)) return 0;
    const auto strategy = make_strategy(f.strategy, f.k);
    const auto suite = generate_suite(load_suite_config(f.suite));
    const auto stack = load_stack(f.registry);
    ServingEngine engine(stack.model, stack.registry, std::make_shared<const Encoder>(load_encoder(f.encoder)));
    const auto requests = mixed_requests(suite, f.requests);
    const auto rows = benchmark_throughput(engine, requests, f.batch_sizes, strategy, f.bench);
    std::cout << "strategy=" << to_string(strategy.kind()) << "\nk=" << strategy.k() << "\nrequests=" << requests.size()
              << "\n";
    for (const auto& r : rows) {
        std::cout << "batch_size=" << r.batch_size << " tokens_per_second=" << r.tokens_per_second
                  << " median_seconds=" << r.median_seconds << " tokens=" << r.tokens << "\n";
    }
    return 0;
}

int run_serve(const ServeFlags& f, bool dump_only) {
    const ordered_json cfg{{"registry", f.registry}, {"encoder", f.encoder}, {"strategy", f.strategy},
                           {"k", f.k},               {"max_batch", f.max_batch}};
    if (dump(cfg, dump_only)) return 0;
    if (f.max_batch == 0) throw ValidationError("--max-batch must be >= 1");
    const auto strategy = make_strategy(f.strategy, f.k);
    const auto stack = load_stack(f.registry);
    ServingEngine engine(stack.model, stack.registry, std::make_shared<const Encoder>(load_encoder(f.encoder)));
    const auto stats = run_serve_loop(std::cin, std::cout, engine, {strategy, f.max_batch});
    std::cerr << "requests=" << stats.requests << " errors=" << stats.errors << " batches=" << stats.batches << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-adapter serving engine: synthetic tasks, adapter training, retrieval, evaluation, serving"};
    app.require_subcommand(1);
    bool dump_only = false;
    app.add_flag("--dump-config", dump_only, "Print the effective configuration as JSON and exit")->trigger_on_parse(false);

    SuiteFlags gen;
    auto* g = app.add_subcommand("gen", "Write a synthetic task suite description");
    g->add_option("--out", gen.out, "Suite file to write")->capture_default_str();
    g->add_option("--tasks", gen.config.num_tasks, "Number of tasks")->capture_default_str();
    g->add_option("--train-per-task", gen.config.train_per_task, "Training samples per task")->capture_default_str();
    g->add_option("--test-per-task", gen.config.test_per_task, "Test samples per task")->capture_default_str();
    g->add_option("--width", gen.config.width, "Feature width d")->capture_default_str();
    g->add_option("--seq-len", gen.config.seq_len, "Positions per sample")->capture_default_str();
    g->add_option("--seed", gen.config.seed, "Generator seed")->capture_default_str();
    g->add_option("--families", gen.config.num_families, "Task families")->capture_default_str();

    LoraFlags lora;
    auto* tl = app.add_subcommand("train-loras", "Train one adapter per task and save the registry");
    tl->add_option("--suite", lora.suite, "Suite file")->capture_default_str();
    tl->add_option("--out", lora.out, "Registry directory to write")->capture_default_str();
    tl->add_option("--depth", lora.depth, "Backbone layers")->capture_default_str();
    tl->add_option("--backbone-seed", lora.backbone_seed, "Backbone seed (stored in the manifest)")->capture_default_str();
    tl->add_option("--rank", lora.lora.rank, "Adapter rank r")->capture_default_str();
    tl->add_option("--alpha", lora.lora.alpha, "Adapter alpha")->capture_default_str();
    tl->add_option("--steps", lora.lora.steps, "Gradient steps per adapter")->capture_default_str();
    tl->add_option("--lr", lora.lora.learning_rate, "Learning rate")->capture_default_str();
    tl->add_option("--seed", lora.lora.seed, "Initialisation seed")->capture_default_str();

    RetrieverFlags ret;
    auto* tr = app.add_subcommand("train-retriever", "Train the retrieval encoder on a fraction of the tasks");
    tr->add_option("--suite", ret.suite, "Suite file")->capture_default_str();
    tr->add_option("--registry", ret.registry, "Registry directory")->capture_default_str();
    tr->add_option("--out", ret.out, "Encoder directory to write")->capture_default_str();
    tr->add_option("--fraction", ret.fraction, "Fraction of tasks used for training")->capture_default_str();
    tr->add_option("--hidden", ret.hidden, "Token embedding size h")->capture_default_str();
    tr->add_option("--embed", ret.embed, "Output embedding size e")->capture_default_str();
    tr->add_option("--encoder-seed", ret.encoder_seed, "Encoder initialisation seed")->capture_default_str();
    tr->add_flag("--untrained", ret.untrained, "Save the initial encoder without training");
    tr->add_option("--gamma", ret.training.gamma, "Softmax temperature")->capture_default_str();
    tr->add_option("--negatives", ret.training.negatives, "Negatives per anchor")->capture_default_str();
    tr->add_option("--epochs", ret.training.epochs, "Training epochs")->capture_default_str();
    tr->add_option("--lr", ret.training.learning_rate, "Learning rate")->capture_default_str();
    tr->add_option("--seed", ret.training.seed, "Sampling seed")->capture_default_str();
    tr->add_option("--projection-lr-scale", ret.training.projection_lr_scale, "Projection step relative to --lr")
        ->capture_default_str();
    tr->add_option("--token-decay", ret.training.token_decay, "shrink of token rows shared by positive and negative sides")
        ->capture_default_str();

    EvalFlags ev;
    auto* e = app.add_subcommand("eval", "Evaluate the mixed test set and print a report");
    e->add_option("--suite", ev.suite, "Suite file")->capture_default_str();
    e->add_option("--registry", ev.registry, "Registry directory")->capture_default_str();
    e->add_option("--encoder", ev.encoder, "Trained encoder directory");
    e->add_option("--strategy", ev.strategy, "selection | mixture | fusion")->capture_default_str();
    e->add_option("--k", ev.eval.k, "Adapters per request")->capture_default_str();
    e->add_option("--mode", ev.mode, "iid | ood")->capture_default_str();
    e->add_option("--routing", ev.routing, "retriever | untrained | perfect")->capture_default_str();
    e->add_option("--batch-size", ev.eval.batch_size, "Requests per batch")->capture_default_str();
    e->add_option("--retrieval-k", ev.eval.retrieval_k, "k of the top-k accuracy column")->capture_default_str();
    e->add_option("--shuffle-seed", ev.eval.shuffle_seed, "Seed of the test-set shuffle")->capture_default_str();
    e->add_option("--hidden", ev.hidden, "h of the untrained baseline encoder")->capture_default_str();
    e->add_option("--embed", ev.embed, "e of the untrained baseline encoder")->capture_default_str();
    e->add_option("--encoder-seed", ev.encoder_seed, "Seed of the untrained baseline encoder")->capture_default_str();

    BenchFlags be;
    auto* b = app.add_subcommand("bench", "Measure serving throughput per batch size");
    b->add_option("--suite", be.suite, "Suite file (request source)")->capture_default_str();
    b->add_option("--registry", be.registry, "Registry directory")->capture_default_str();
    b->add_option("--encoder", be.encoder, "Encoder directory")->capture_default_str();
    b->add_option("--strategy", be.strategy, "selection | mixture | fusion")->capture_default_str();
    b->add_option("--k", be.k, "Adapters per request")->capture_default_str();
    b->add_option("--batch-sizes", be.batch_sizes, "Batch sizes to time")->delimiter(',')->capture_default_str();
    b->add_option("--requests", be.requests, "Requests per pass")->capture_default_str();
    b->add_option("--trials", be.bench.trials, "Timed passes (median reported)")->capture_default_str();
    b->add_option("--warmup", be.bench.warmup, "Untimed passes")->capture_default_str();
    b->add_flag("--unbatched", be.bench.unbatched, "Serve each request alone through the single-request path");

    ServeFlags sv;
    auto* s = app.add_subcommand("serve", "Line-delimited JSON request loop on stdin/stdout");
    s->add_option("--registry", sv.registry, "Registry directory")->capture_default_str();
    s->add_option("--encoder", sv.encoder, "Encoder directory")->capture_default_str();
    s->add_option("--strategy", sv.strategy, "selection | mixture | fusion")->capture_default_str();
    s->add_option("--k", sv.k, "Adapters per request")->capture_default_str();
    s->add_option("--max-batch", sv.max_batch, "Most pending lines drained into one batch")->capture_default_str();

    // --dump-config is accepted on either side of the subcommand name.
    for (auto* sub : {g, tl, tr, e, b, s}) sub->add_flag("--dump-config", dump_only, "Print the effective configuration and exit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (g->parsed()) return run_gen(gen, dump_only);
        if (tl->parsed()) return run_train_loras(lora, dump_only);
        if (tr->parsed()) return run_train_retriever(ret, dump_only);
        if (e->parsed()) return run_eval(ev, dump_only);
        if (b->parsed()) return run_bench(be, dump_only);
        if (s->parsed()) return run_serve(sv, dump_only);
    } catch (const ValidationError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    } catch (const RuntimeFailure& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    }
    return 1;
}
