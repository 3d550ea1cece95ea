#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <bit>
#include <fstream>
#include <map>
#include <thread>

#include "json.hpp"
#include "loraserve/errors.hpp"
#include "loraserve/registry.hpp"
#include "test_support.hpp"

using namespace loraserve;
using testsupport::random_adapter;
using testsupport::TempDir;

namespace {

constexpr PoolDims kDims{6, 2};

std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

// Expected tensor file bytes, encoded independently of the library.
std::string expected_payload(const LoraAdapter& a) {
    std::string out;
    auto put = [&out](const DenseTensor& t) {
        for (double v : t.data()) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
        }
    };
    for (const auto& layer : a.layers) {
        put(layer.a);
        put(layer.b);
    }
    return out;
}

}  // namespace

TEST_CASE("register into an empty pool") {
    Registry reg(kDims);
    CHECK(reg.size() == 0);
    CHECK(reg.version() == 0);
    std::mt19937_64 rng(1);
    CHECK(reg.register_adapter(random_adapter("a", 6, 2, 2, rng)) == 1);
    CHECK(reg.size() == 1);
    CHECK(reg.version() == 1);
}

TEST_CASE("duplicate id is a conflict and leaves the pool unchanged") {
    Registry reg(kDims);
    std::mt19937_64 rng(2);
    const auto first = random_adapter("dup", 6, 2, 2, rng);
    reg.register_adapter(first);
    const auto before = reg.snapshot();
    CHECK_THROWS_AS(reg.register_adapter(random_adapter("dup", 6, 2, 3, rng)), ConflictError);
    CHECK(reg.version() == 1);
    CHECK(reg.get("dup") == first);
    CHECK(reg.snapshot() == before);
}

TEST_CASE("shape validation") {
    Registry reg(kDims);
    std::mt19937_64 rng(3);
    CHECK_THROWS_AS(reg.register_adapter(random_adapter("wide", 7, 2, 2, rng)), ValidationError);
    CHECK_THROWS_AS(reg.register_adapter(random_adapter("deep", 6, 3, 2, rng)), ValidationError);
    auto bad_rank = random_adapter("rank", 6, 2, 2, rng);
    bad_rank.rank = 3;
    CHECK_THROWS_AS(reg.register_adapter(bad_rank), ValidationError);
    auto no_samples = random_adapter("nos", 6, 2, 2, rng);
    no_samples.samples.clear();
    CHECK_THROWS_AS(reg.register_adapter(no_samples), ValidationError);
    auto bad_alpha = random_adapter("alpha", 6, 2, 2, rng);
    bad_alpha.alpha = 0.0;
    CHECK_THROWS_AS(reg.register_adapter(bad_alpha), ValidationError);
    CHECK(reg.version() == 0);
}

TEST_CASE("48 adapters are listed in registration order") {
    Registry reg(kDims);
    std::mt19937_64 rng(4);
    std::vector<std::string> expected;
    for (int i = 47; i >= 0; --i) {
        const auto id = "lora_" + std::to_string(i);
        expected.push_back(id);
        reg.register_adapter(random_adapter(id, 6, 2, 1, rng));
    }
    CHECK(reg.size() == 48);
    CHECK(reg.list() == expected);
}

TEST_CASE("remove, get and snapshots") {
    Registry reg(kDims);
    std::mt19937_64 rng(5);
    reg.register_adapter(random_adapter("x", 6, 2, 2, rng));
    const auto before_y = reg.snapshot();
    reg.register_adapter(random_adapter("y", 6, 2, 2, rng));
    CHECK_FALSE(before_y->contains("y"));
    CHECK(reg.snapshot()->contains("y"));

    CHECK(reg.remove("x") == 3);
    CHECK_THROWS_AS(reg.get("x"), NotFoundError);
    CHECK_THROWS_AS(reg.remove("x"), NotFoundError);
    CHECK(before_y->contains("x"));
    CHECK(reg.version() == 3);
}

TEST_CASE("interleaved register/remove matches a replay on a plain map") {
    std::mt19937_64 rng(6);
    Registry reg(kDims);
    std::vector<std::string> oracle;  // ids in insertion order
    std::map<std::string, LoraAdapter> contents;
    std::uint64_t expected_version = 0;
    for (int step = 0; step < 60; ++step) {
        const auto id = "a" + std::to_string(std::uniform_int_distribution<int>(0, 9)(rng));
        const bool present = contents.count(id) != 0;
        if (present && std::bernoulli_distribution(0.6)(rng)) {
            reg.remove(id);
            oracle.erase(std::find(oracle.begin(), oracle.end(), id));
            contents.erase(id);
            ++expected_version;
        } else if (present) {
            CHECK_THROWS_AS(reg.register_adapter(random_adapter(id, 6, 2, 2, rng)), ConflictError);
        } else {
            auto a = random_adapter(id, 6, 2, 1 + step % 3, rng);
            contents[id] = a;
            oracle.push_back(id);
            reg.register_adapter(std::move(a));
            ++expected_version;
        }
        CHECK(reg.version() == expected_version);
    }
    CHECK(reg.list() == oracle);
    for (const auto& [id, a] : contents) CHECK(reg.get(id) == a);
}

TEST_CASE("property: snapshot immutability and version monotonicity") {
    std::mt19937_64 rng(7);
    Registry reg(kDims);
    std::vector<std::pair<SnapshotPtr, std::uint64_t>> taken;
    std::uint64_t last = reg.version();
    for (int step = 0; step < 30; ++step) {
        taken.emplace_back(reg.snapshot(), reg.snapshot()->checksum());
        std::uint64_t v;
        if (reg.size() > 2 && step % 3 == 0) {
            v = reg.remove(reg.list().front());
        } else {
            v = reg.register_adapter(random_adapter("s" + std::to_string(step), 6, 2, 2, rng));
        }
        CHECK(v > last);
        last = v;
    }
    for (const auto& [snap, sum] : taken) CHECK(snap->checksum() == sum);
}

TEST_CASE("concurrent readers keep consistent snapshots while a writer mutates") {
    Registry reg(kDims);
    std::mt19937_64 rng(8);
    std::vector<LoraAdapter> pool;
    for (int i = 0; i < 40; ++i) pool.push_back(random_adapter("c" + std::to_string(i), 6, 2, 2, rng));

    std::atomic<bool> done{false};
    std::atomic<int> violations{0};
    auto reader = [&] {
        while (!done.load()) {
            const auto snap = reg.snapshot();
            const auto sum = snap->checksum();
            if (snap->size() != snap->version()) ++violations;  // only registrations happen here
            for (const auto& id : snap->ids())
                if (!snap->contains(id)) ++violations;
            if (snap->checksum() != sum) ++violations;
        }
    };
    std::thread r1(reader), r2(reader);
    for (const auto& a : pool) reg.register_adapter(a);
    done = true;
    r1.join();
    r2.join();
    CHECK(violations.load() == 0);
    CHECK(reg.size() == 40);
}

TEST_CASE("save/load round trip: empty registry") {
    TempDir dir("reg_empty");
    Registry reg(kDims);
    save_registry(*reg.snapshot(), dir.path());
    const auto loaded = load_registry(dir.path());
    CHECK(loaded.snapshot->empty());
    CHECK(loaded.snapshot->dims() == kDims);
    CHECK_FALSE(loaded.metadata.backbone_seed.has_value());
}

TEST_CASE("save/load round trip: bitwise tensors and byte-level file content") {
    TempDir dir("reg_rt");
    std::mt19937_64 rng(9);
    Registry reg(kDims);
    reg.register_adapter(random_adapter("first", 6, 2, 2, rng, 4.0, {"alpha beta", "gamma"}));
    reg.register_adapter(random_adapter("second", 6, 2, 5, rng, 12.0, {"delta"}));
    reg.register_adapter(random_adapter("third", 6, 2, 1, rng, 0.5, {"x y z"}));
    const auto snap = reg.snapshot();
    save_registry(*snap, dir.path(), RegistryMetadata{42});

    const auto manifest = nlohmann::json::parse(read_bytes(dir.path() / "manifest.json"));
    CHECK(manifest["format"] == "loraserve-registry");
    CHECK(manifest["backbone_seed"] == 42);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto& entry = manifest["adapters"][i];
        const auto& a = *snap->adapters()[i];
        CHECK(entry["id"] == a.id);
        CHECK(read_bytes(dir.path() / entry["tensor_file"].get<std::string>()) == expected_payload(a));
    }

    const auto loaded = load_registry(dir.path());
    CHECK(loaded.metadata.backbone_seed == std::optional<std::uint64_t>(42));
    CHECK(loaded.snapshot->version() == snap->version());
    CHECK(loaded.snapshot->ids() == snap->ids());
    for (const auto& a : snap->adapters()) CHECK(loaded.snapshot->get(a->id) == *a);
    CHECK(loaded.snapshot->checksum() == snap->checksum());

    // Saving what was loaded reproduces every file byte for byte.
    TempDir again("reg_rt2");
    save_registry(*loaded.snapshot, again.path(), loaded.metadata);
    for (const auto& e : std::filesystem::directory_iterator(dir.path()))
        CHECK(read_bytes(e.path()) == read_bytes(again.path() / e.path().filename()));
}

TEST_CASE("malformed registry files raise parse errors with offsets") {
    std::mt19937_64 rng(10);
    Registry reg(kDims);
    reg.register_adapter(random_adapter("only", 6, 2, 2, rng));
    reg.register_adapter(random_adapter("other", 6, 2, 2, rng));

    SUBCASE("truncated tensor file") {
        TempDir dir("reg_trunc");
        save_registry(*reg.snapshot(), dir.path());
        const auto file = dir.path() / "adapter_00001.bin";
        const auto bytes = read_bytes(file);
        std::ofstream(file, std::ios::binary | std::ios::trunc).write(bytes.data(), 100);
        try {
            load_registry(dir.path());
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.offset() == 100);
        }
    }
    SUBCASE("trailing bytes") {
        TempDir dir("reg_trail");
        save_registry(*reg.snapshot(), dir.path());
        std::ofstream(dir.path() / "adapter_00000.bin", std::ios::binary | std::ios::app) << "xx";
        try {
            load_registry(dir.path());
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.offset() == 2 * 2 * 6 * 2 * 8);
        }
    }
    SUBCASE("truncated manifest") {
        TempDir dir("reg_badjson");
        save_registry(*reg.snapshot(), dir.path());
        const auto text = read_bytes(dir.path() / "manifest.json");
        std::ofstream(dir.path() / "manifest.json", std::ios::trunc) << text.substr(0, 57);
        try {
            load_registry(dir.path());
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.offset() > 0);
            CHECK(e.offset() <= 58);
        }
    }
    SUBCASE("schema errors") {
        TempDir dir("reg_schema");
        save_registry(*reg.snapshot(), dir.path());
        auto manifest = nlohmann::json::parse(read_bytes(dir.path() / "manifest.json"));
        manifest["adapters"][1]["rank"] = 3;
        std::ofstream(dir.path() / "manifest.json", std::ios::trunc) << manifest.dump();
        CHECK_THROWS_AS(load_registry(dir.path()), ParseError);
    }
}
