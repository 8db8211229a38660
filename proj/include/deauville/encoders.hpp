#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "deauville/nn.hpp"
#include "deauville/preprocess.hpp"
#include "deauville/rng.hpp"

namespace deauville::encoders {

struct EncoderSpec {
    int n_layers = 2;
    int n_heads = 4;
    int hidden_size = 64;
    int ff_size = 128;
    int max_positions = 512;
    int vocab_size = 0;
    double dropout = 0.1;

    /// Throws when the shape is inconsistent or max_positions < input_limit.
    void validate(std::size_t input_limit = preprocess::kDefaultInputLimit) const;
    std::string to_json() const;
    static EncoderSpec from_json(std::string_view text);

    friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

/// Ordered lifecycle of encoder weights; transitions only move forward.
enum class Stage { random_init = 0, generic_pretrained = 1, domain_adapted = 2, fine_tuned = 3 };

std::string stage_name(Stage stage);
Stage parse_stage(std::string_view name);

struct MlmConfig {
    double mask_rate = 0.15;
    int epochs = 3;
    double learning_rate = 1e-4;
    /// Proportions of selected positions replaced by [MASK], by a random
    /// token, or left unchanged.
    std::array<double, 3> mask_action_split{0.8, 0.1, 0.1};
    std::uint64_t seed = 0;
    int batch_size = 16;

    void validate() const;
    std::string to_json() const;
};

/// Token transformer with a tied masked-token prediction head.
class TextEncoder {
public:
    struct Cache {
        std::vector<int> ids;
        nn::TransformerStack::Cache stack;
    };
    struct HeadCache {
        std::vector<std::size_t> positions;
        nn::Matrix selected;
        nn::Matrix dense_pre;
        nn::Matrix dense_act;
        nn::LayerNorm::Cache norm;
        nn::Matrix normed;
    };

    TextEncoder() = default;
    explicit TextEncoder(const EncoderSpec& spec);

    /// Random initialization (values rounded to float precision).
    void init(std::uint64_t seed);

    /// Hidden states, one row per token. Dropout applies when rng is set.
    nn::Matrix forward(std::span<const int> ids, Cache* cache, Rng* rng) const;
    void backward(const Cache& cache, const nn::Matrix& dstates);

    /// Vocabulary logits at the given positions of `states`.
    nn::Matrix mlm_logits(const nn::Matrix& states, const std::vector<std::size_t>& positions,
                          HeadCache* cache) const;
    /// Returns d states (rows beyond the selected positions are zero).
    nn::Matrix mlm_backward(const HeadCache& cache, const nn::Matrix& dlogits, Eigen::Index n_rows);

    /// Encoder weights only (embeddings + transformer).
    nn::ParameterList encoder_parameters();
    /// Encoder weights plus the masked-token head.
    nn::ParameterList parameters();

    void set_frozen(bool frozen);

    const EncoderSpec& spec() const noexcept { return spec_; }

    nn::Parameter token_embedding;
    nn::Parameter position_embedding;
    nn::TransformerStack stack;
    nn::Linear mlm_dense;
    nn::LayerNorm mlm_norm;
    nn::Parameter mlm_bias;

private:
    EncoderSpec spec_;
};

struct EncodeResult {
    nn::Matrix states;
    nn::Vector pooled;
};

struct Checkpoint {
    TextEncoder encoder;
    Stage stage = Stage::random_init;
    /// Hash of the configuration that produced these weights.
    std::string provenance;
    std::vector<double> epoch_losses;

    const EncoderSpec& spec() const noexcept { return encoder.spec(); }
};

/// On-disk reference: spec and provenance without the weights.
struct CheckpointRef {
    std::filesystem::path path;
    Stage stage = Stage::random_init;
    EncoderSpec spec;
    std::string provenance;
};

Checkpoint make_random_checkpoint(const EncoderSpec& spec, std::uint64_t seed);

/// spec.json, weights.bin (little-endian float32, row-major) and provenance.json.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);
CheckpointRef read_checkpoint_ref(const std::filesystem::path& dir);

/// Inference-mode states and first-token pooled vector.
EncodeResult encode(const preprocess::TokenSequence& seq, const Checkpoint& ckpt);

struct MaskedSequence {
    preprocess::TokenSequence corrupted;
    /// position -> original id
    std::map<std::size_t, int> targets;
};

MaskedSequence mask_tokens(const preprocess::TokenSequence& seq, const MlmConfig& cfg, int vocab_size, Rng& rng);

/// Sum of masked-token cross-entropy for one sequence. With accumulate
/// set, gradients scaled by 1/normalizer are added to the parameters.
double mlm_sequence_loss(TextEncoder& model, const MaskedSequence& masked, double normalizer, Rng* dropout_rng,
                         bool accumulate);

Checkpoint generic_pretrain(const EncoderSpec& spec, std::span<const preprocess::TokenSequence> corpus,
                            const MlmConfig& cfg, std::uint64_t init_seed);

Checkpoint domain_adapt(const Checkpoint& base, std::span<const preprocess::TokenSequence> corpus,
                        const MlmConfig& cfg);

/// exp(mean cross-entropy) over [MASK]-only corruptions drawn from `seed`.
double masked_perplexity(const Checkpoint& ckpt, std::span<const preprocess::TokenSequence> corpus, double mask_rate,
                         std::uint64_t seed);

} // namespace deauville::encoders
