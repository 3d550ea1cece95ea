#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "loraserve/tensor.hpp"

namespace loraserve {

/// Instruction prepended to every text before embedding.
inline constexpr std::string_view kRetrievalInstruction = "Represent the sentence for similar task retrieval";

/// Unit-length embedding shared by requests and adapter centroids.
struct EmbeddingVector {
    std::vector<double> values;

    std::size_t dim() const noexcept { return values.size(); }
    double norm() const noexcept;
    bool operator==(const EmbeddingVector&) const = default;
};

/// Lowercases and splits on anything that is not a letter or digit.
std::vector<std::string> tokenize(std::string_view text);

/// Gradient of a scalar loss with respect to every encoder parameter.
struct EncoderGradient {
    DenseTensor token_table;  // [V, h]
    DenseTensor projection;   // [h, e]
};

/// Bag-of-words sentence encoder: token table lookup, mean pool over the
/// instruction and text tokens, linear projection, L2 normalisation.
///
/// Row 0 of the token table is the shared out-of-vocabulary row.
class Encoder {
public:
    static constexpr std::string_view kUnknownToken = "<unk>";

    Encoder() = default;

    /// Random initialisation. Token rows ~ N(0, 1); the projection has
    /// orthonormal columns (or rows when e > h).
    static Encoder create(std::vector<std::string> vocabulary, std::size_t hidden, std::size_t embed,
                          std::uint64_t seed);
    /// Builds from explicit parameters; vocabulary[0] must be the unknown token.
    static Encoder from_parameters(std::vector<std::string> vocabulary, DenseTensor token_table,
                                   DenseTensor projection, std::uint64_t seed);

    std::size_t vocab_size() const noexcept { return vocab_.size(); }
    std::size_t hidden() const noexcept { return token_table_.empty() ? 0 : token_table_.extent(1); }
    std::size_t embed_dim() const noexcept { return projection_.empty() ? 0 : projection_.extent(1); }
    std::uint64_t seed() const noexcept { return seed_; }
    const std::vector<std::string>& vocabulary() const noexcept { return vocab_; }
    const DenseTensor& token_table() const noexcept { return token_table_; }
    const DenseTensor& projection() const noexcept { return projection_; }
    DenseTensor& token_table() noexcept { return token_table_; }
    DenseTensor& projection() noexcept { return projection_; }

    std::size_t token_id(std::string_view word) const;
    /// Ids of instruction tokens followed by text tokens. Throws
    /// EmptyInputError if the text contributes no tokens.
    std::vector<std::size_t> encode(std::string_view instruction, std::string_view text) const;

    EmbeddingVector embed_ids(std::span<const std::size_t> ids) const;
    EmbeddingVector embed_text(std::string_view instruction, std::string_view text) const;

    /// Accumulates dLoss/dParams given dLoss/dEmbedding for one embedding.
    void backward(std::span<const std::size_t> ids, const EmbeddingVector& output, std::span<const double> grad_output,
                  EncoderGradient& grad) const;

    EncoderGradient zero_gradient() const;

    bool operator==(const Encoder& other) const {
        return vocab_ == other.vocab_ && token_table_ == other.token_table_ && projection_ == other.projection_;
    }

private:
    std::vector<double> pooled(std::span<const std::size_t> ids) const;

    std::vector<std::string> vocab_;
    std::unordered_map<std::string, std::size_t> lookup_;
    DenseTensor token_table_;
    DenseTensor projection_;
    std::uint64_t seed_ = 0;
};

/// Checkpoint directory: encoder.json (vocab, dims, seed) + encoder.bin
/// (token table then projection, little-endian float64).
void save_encoder(const Encoder& encoder, const std::filesystem::path& dir);
Encoder load_encoder(const std::filesystem::path& dir);

}  // namespace loraserve
