#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "loraserve/tensor.hpp"

namespace loraserve {

/// One attach point: A is [rank, d], B is [d, rank].
struct LoraLayer {
    DenseTensor a;
    DenseTensor b;

    bool operator==(const LoraLayer&) const = default;
};

struct LoraAdapter {
    std::string id;
    std::string task_tag;
    std::vector<LoraLayer> layers;
    std::size_t rank = 0;
    double alpha = 0.0;
    std::vector<std::string> samples;

    /// alpha / rank, the factor applied to B*A at inference.
    double scale() const noexcept { return alpha / static_cast<double>(rank); }
    std::size_t width() const noexcept { return layers.empty() ? 0 : layers.front().a.extent(1); }

    bool operator==(const LoraAdapter&) const = default;
};

/// Dimensions every adapter in a pool must agree with.
struct PoolDims {
    std::size_t width = 0;
    std::size_t num_layers = 0;

    bool operator==(const PoolDims&) const = default;
};

/// Throws ValidationError unless the adapter is well formed against dims.
void validate_adapter(const LoraAdapter& adapter, const PoolDims& dims);

/// Immutable view of the pool at one version. Cheap to share.
class RegistrySnapshot {
public:
    RegistrySnapshot(std::uint64_t version, PoolDims dims, std::vector<std::shared_ptr<const LoraAdapter>> adapters);

    std::uint64_t version() const noexcept { return version_; }
    const PoolDims& dims() const noexcept { return dims_; }
    std::size_t size() const noexcept { return adapters_.size(); }
    bool empty() const noexcept { return adapters_.empty(); }
    bool contains(const std::string& id) const { return index_.count(id) != 0; }

    /// Throws NotFoundError for an unknown id.
    const LoraAdapter& get(const std::string& id) const;
    const LoraAdapter* find(const std::string& id) const;

    /// Adapters in registration order.
    const std::vector<std::shared_ptr<const LoraAdapter>>& adapters() const noexcept { return adapters_; }
    std::vector<std::string> ids() const;

    /// Order-sensitive checksum over every adapter's metadata and tensors.
    std::uint64_t checksum() const;

private:
    std::uint64_t version_;
    PoolDims dims_;
    std::vector<std::shared_ptr<const LoraAdapter>> adapters_;
    std::unordered_map<std::string, std::size_t> index_;
};

using SnapshotPtr = std::shared_ptr<const RegistrySnapshot>;

/// Optional provenance recorded alongside the adapters on disk.
struct RegistryMetadata {
    std::optional<std::uint64_t> backbone_seed;
};

/// Dynamically updatable adapter pool.
///
/// Readers take snapshots; writers publish a new snapshot under an exclusive
/// lock. A snapshot handed out earlier is never modified, so in-flight
/// batches keep a consistent view while the pool changes underneath them.
class Registry {
public:
    explicit Registry(PoolDims dims);
    /// Adopts the contents of a loaded snapshot, keeping its version.
    explicit Registry(const RegistrySnapshot& snapshot);

    std::uint64_t register_adapter(LoraAdapter adapter);
    std::uint64_t remove(const std::string& id);
    LoraAdapter get(const std::string& id) const;
    std::vector<std::string> list() const;
    std::size_t size() const;
    std::uint64_t version() const;
    const PoolDims& dims() const noexcept { return dims_; }

    SnapshotPtr snapshot() const;

    RegistryMetadata metadata;

private:
    PoolDims dims_;
    mutable std::shared_mutex mutex_;
    SnapshotPtr current_;
};

/// Writes the snapshot as a directory: manifest.json plus one little-endian
/// float64 tensor file per adapter. See docs/registry_format.md.
void save_registry(const RegistrySnapshot& snapshot, const std::filesystem::path& dir,
                   const RegistryMetadata& metadata = {});

struct LoadedRegistry {
    SnapshotPtr snapshot;
    RegistryMetadata metadata;
};

/// Reads a directory written by save_registry. Either every adapter loads or
/// a ParseError is thrown and nothing is returned.
LoadedRegistry load_registry(const std::filesystem::path& dir);

}  // namespace loraserve
