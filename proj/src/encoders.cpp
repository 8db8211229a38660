#include "deauville/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "deauville/error.hpp"
#include "deauville/io.hpp"

namespace deauville::encoders {

using json = nlohmann::json;
using nn::Matrix;

void EncoderSpec::validate(std::size_t input_limit) const
{
    require(n_layers >= 1, "encoder needs at least one layer");
    require(n_heads >= 1, "encoder needs at least one attention head");
    require(hidden_size >= 1 && hidden_size % n_heads == 0, "hidden_size must be divisible by n_heads");
    require(ff_size >= 1, "ff_size must be positive");
    require(vocab_size > preprocess::kNumSpecialTokens, "vocab_size must exceed the special token count");
    require(max_positions >= 1 && static_cast<std::size_t>(max_positions) >= input_limit,
            "max_positions must cover the input limit");
    require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
}

std::string EncoderSpec::to_json() const
{
    const json j{{"n_layers", n_layers},       {"n_heads", n_heads},         {"hidden_size", hidden_size},
                 {"ff_size", ff_size},         {"max_positions", max_positions}, {"vocab_size", vocab_size},
                 {"dropout", dropout}};
    return j.dump(2);
}

EncoderSpec EncoderSpec::from_json(std::string_view text)
{
    try {
        const json j = json::parse(text);
        EncoderSpec spec;
        spec.n_layers = j.at("n_layers").get<int>();
        spec.n_heads = j.at("n_heads").get<int>();
        spec.hidden_size = j.at("hidden_size").get<int>();
        spec.ff_size = j.at("ff_size").get<int>();
        spec.max_positions = j.at("max_positions").get<int>();
        spec.vocab_size = j.at("vocab_size").get<int>();
        spec.dropout = j.at("dropout").get<double>();
        return spec;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed encoder spec: ") + e.what());
    }
}

std::string stage_name(Stage stage)
{
    switch (stage) {
    case Stage::random_init: return "random-init";
    case Stage::generic_pretrained: return "generic-pretrained";
    case Stage::domain_adapted: return "domain-adapted";
    case Stage::fine_tuned: return "fine-tuned";
    }
    return "unknown";
}

Stage parse_stage(std::string_view name)
{
    for (Stage s : {Stage::random_init, Stage::generic_pretrained, Stage::domain_adapted, Stage::fine_tuned}) {
        if (stage_name(s) == name) {
            return s;
        }
    }
    throw ValidationError("unknown checkpoint stage: " + std::string(name));
}

void MlmConfig::validate() const
{
    require(mask_rate > 0.0 && mask_rate < 1.0, "mask_rate must be in (0, 1)");
    require(epochs >= 0, "epochs must be non-negative");
    require(learning_rate > 0.0, "learning_rate must be positive");
    require(batch_size >= 1, "batch_size must be at least 1");
    double total = 0.0;
    for (double p : mask_action_split) {
        require(p >= 0.0, "mask action proportions must be non-negative");
        total += p;
    }
    require(std::abs(total - 1.0) <= 1e-9, "mask_action_split must sum to 1");
}

std::string MlmConfig::to_json() const
{
    const json j{{"mask_rate", mask_rate},
                 {"epochs", epochs},
                 {"learning_rate", learning_rate},
                 {"mask_action_split", mask_action_split},
                 {"seed", seed},
                 {"batch_size", batch_size}};
    return j.dump();
}

// ---------------------------------------------------------------- model

TextEncoder::TextEncoder(const EncoderSpec& spec)
    : stack("encoder", spec.n_layers, spec.hidden_size, spec.n_heads, spec.ff_size),
      mlm_dense("mlm.dense", spec.hidden_size, spec.hidden_size),
      mlm_norm("mlm.norm", spec.hidden_size),
      spec_(spec)
{
    spec.validate(0);
    token_embedding.reset("embeddings.token", spec.vocab_size, spec.hidden_size);
    position_embedding.reset("embeddings.position", spec.max_positions, spec.hidden_size);
    mlm_bias.reset("mlm.bias", 1, spec.vocab_size);
}

void TextEncoder::init(std::uint64_t seed)
{
    Rng rng(seed);
    nn::init_normal(token_embedding, 0.1, rng);
    nn::init_normal(position_embedding, 0.1, rng);
    stack.init(rng);
    mlm_dense.init(rng);
    nn::quantize_to_float(parameters());
}

nn::ParameterList TextEncoder::encoder_parameters()
{
    nn::ParameterList out{&token_embedding, &position_embedding};
    stack.collect(out);
    return out;
}

nn::ParameterList TextEncoder::parameters()
{
    nn::ParameterList out = encoder_parameters();
    mlm_dense.collect(out);
    mlm_norm.collect(out);
    out.push_back(&mlm_bias);
    return out;
}

void TextEncoder::set_frozen(bool frozen)
{
    for (auto* p : encoder_parameters()) {
        p->frozen = frozen;
    }
}

Matrix TextEncoder::forward(std::span<const int> ids, Cache* cache, Rng* rng) const
{
    require(!ids.empty(), "cannot encode an empty sequence");
    require(ids.size() <= static_cast<std::size_t>(spec_.max_positions), "sequence longer than max_positions");
    const auto n = static_cast<Eigen::Index>(ids.size());
    Matrix x(n, spec_.hidden_size);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int id = ids[static_cast<std::size_t>(i)];
        require(id >= 0 && id < spec_.vocab_size, "token id outside the encoder vocabulary");
        x.row(i) = token_embedding.value.row(id) + position_embedding.value.row(i);
    }
    if (cache != nullptr) {
        cache->ids.assign(ids.begin(), ids.end());
    }
    return stack.forward(x, cache ? &cache->stack : nullptr, spec_.dropout, rng);
}

void TextEncoder::backward(const Cache& cache, const Matrix& dstates)
{
    const Matrix dx = stack.backward(cache.stack, dstates);
    if (token_embedding.frozen) {
        return;
    }
    for (Eigen::Index i = 0; i < dx.rows(); ++i) {
        token_embedding.grad.row(cache.ids[static_cast<std::size_t>(i)]) += dx.row(i);
        position_embedding.grad.row(i) += dx.row(i);
    }
}

Matrix TextEncoder::mlm_logits(const Matrix& states, const std::vector<std::size_t>& positions,
                               HeadCache* cache) const
{
    Matrix selected(static_cast<Eigen::Index>(positions.size()), states.cols());
    for (std::size_t i = 0; i < positions.size(); ++i) {
        selected.row(static_cast<Eigen::Index>(i)) = states.row(static_cast<Eigen::Index>(positions[i]));
    }
    Matrix dense_pre = mlm_dense.forward(selected);
    Matrix dense_act = nn::gelu(dense_pre);
    nn::LayerNorm::Cache norm_cache;
    Matrix normed = mlm_norm.forward(dense_act, cache ? &norm_cache : nullptr);
    Matrix logits = normed * token_embedding.value.transpose();
    logits.rowwise() += mlm_bias.value.row(0);
    if (cache != nullptr) {
        cache->positions = positions;
        cache->selected = std::move(selected);
        cache->dense_pre = std::move(dense_pre);
        cache->dense_act = std::move(dense_act);
        cache->norm = std::move(norm_cache);
        cache->normed = std::move(normed);
    }
    return logits;
}

Matrix TextEncoder::mlm_backward(const HeadCache& cache, const Matrix& dlogits, Eigen::Index n_rows)
{
    mlm_bias.grad.row(0) += dlogits.colwise().sum();
    if (!token_embedding.frozen) {
        token_embedding.grad.noalias() += dlogits.transpose() * cache.normed;
    }
    const Matrix dnormed = dlogits * token_embedding.value;
    const Matrix dact = mlm_norm.backward(cache.norm, dnormed);
    const Matrix dpre = nn::gelu_backward(cache.dense_pre, dact);
    const Matrix dselected = mlm_dense.backward(cache.selected, dpre);
    Matrix dstates = Matrix::Zero(n_rows, dselected.cols());
    for (std::size_t i = 0; i < cache.positions.size(); ++i) {
        dstates.row(static_cast<Eigen::Index>(cache.positions[i])) += dselected.row(static_cast<Eigen::Index>(i));
    }
    return dstates;
}

// ---------------------------------------------------------------- checkpoints

Checkpoint make_random_checkpoint(const EncoderSpec& spec, std::uint64_t seed)
{
    Checkpoint ckpt{TextEncoder(spec), Stage::random_init, io::sha256_hex(spec.to_json() + std::to_string(seed)), {}};
    ckpt.encoder.init(seed);
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt)
{
    std::filesystem::create_directories(dir);
    auto& encoder = const_cast<TextEncoder&>(ckpt.encoder);
    const auto manifest = nn::write_tensors(dir / "weights.bin", encoder.parameters());
    json spec = json::parse(ckpt.spec().to_json());
    json tensors = json::array();
    for (const auto& t : manifest) {
        tensors.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", t.offset}});
    }
    spec["tensors"] = tensors;
    spec["dtype"] = "float32-le";
    spec["layout"] = "row-major";
    io::write_text(dir / "spec.json", spec.dump(2) + "\n");
    const json provenance{{"stage", stage_name(ckpt.stage)},
                          {"config_hash", ckpt.provenance},
                          {"epoch_losses", ckpt.epoch_losses}};
    io::write_text(dir / "provenance.json", provenance.dump(2) + "\n");
}

CheckpointRef read_checkpoint_ref(const std::filesystem::path& dir)
{
    if (!std::filesystem::exists(dir / "spec.json") || !std::filesystem::exists(dir / "provenance.json")) {
        throw ValidationError("not a checkpoint directory: " + dir.string());
    }
    CheckpointRef ref;
    ref.path = dir;
    ref.spec = EncoderSpec::from_json(io::read_text(dir / "spec.json"));
    try {
        const json prov = json::parse(io::read_text(dir / "provenance.json"));
        ref.stage = parse_stage(prov.at("stage").get<std::string>());
        ref.provenance = prov.at("config_hash").get<std::string>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed checkpoint provenance: ") + e.what());
    }
    return ref;
}

Checkpoint load_checkpoint(const std::filesystem::path& dir)
{
    const CheckpointRef ref = read_checkpoint_ref(dir);
    Checkpoint ckpt{TextEncoder(ref.spec), ref.stage, ref.provenance, {}};
    std::vector<nn::TensorInfo> manifest;
    try {
        const json spec = json::parse(io::read_text(dir / "spec.json"));
        for (const auto& t : spec.at("tensors")) {
            manifest.push_back({t.at("name").get<std::string>(), t.at("shape")[0].get<Eigen::Index>(),
                                t.at("shape")[1].get<Eigen::Index>(), t.at("offset").get<std::size_t>()});
        }
        const json prov = json::parse(io::read_text(dir / "provenance.json"));
        ckpt.epoch_losses = prov.value("epoch_losses", std::vector<double>{});
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed checkpoint: ") + e.what());
    }
    nn::read_tensors(dir / "weights.bin", manifest, ckpt.encoder.parameters());
    return ckpt;
}

EncodeResult encode(const preprocess::TokenSequence& seq, const Checkpoint& ckpt)
{
    for (int id : seq.ids) {
        if (id < 0 || id >= ckpt.spec().vocab_size) {
            throw ValidationError("sequence vocabulary does not match the checkpoint");
        }
    }
    EncodeResult out;
    out.states = ckpt.encoder.forward(seq.ids, nullptr, nullptr);
    out.pooled = out.states.row(0);
    return out;
}

// ---------------------------------------------------------------- masking

MaskedSequence mask_tokens(const preprocess::TokenSequence& seq, const MlmConfig& cfg, int vocab_size, Rng& rng)
{
    cfg.validate();
    require(vocab_size > preprocess::kNumSpecialTokens, "vocabulary has no ordinary tokens");
    std::vector<std::size_t> maskable;
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
        if (!preprocess::is_special(seq.ids[i])) {
            maskable.push_back(i);
        }
    }
    require(!maskable.empty(), "sequence has no maskable tokens");
    const auto n_select = static_cast<std::size_t>(std::lround(cfg.mask_rate * static_cast<double>(maskable.size())));
    // Partial Fisher-Yates: the first n_select entries become the sample.
    for (std::size_t i = 0; i < n_select; ++i) {
        const std::size_t j = i + rng.below(maskable.size() - i);
        std::swap(maskable[i], maskable[j]);
    }
    MaskedSequence out;
    out.corrupted = seq;
    for (std::size_t i = 0; i < n_select; ++i) {
        const std::size_t pos = maskable[i];
        out.targets[pos] = seq.ids[pos];
        switch (rng.categorical(cfg.mask_action_split)) {
        case 0: out.corrupted.ids[pos] = preprocess::token_id(preprocess::SpecialToken::mask); break;
        case 1:
            out.corrupted.ids[pos] = preprocess::kNumSpecialTokens
                + static_cast<int>(rng.below(static_cast<std::size_t>(vocab_size - preprocess::kNumSpecialTokens)));
            break;
        default: break;
        }
    }
    return out;
}

double mlm_sequence_loss(TextEncoder& model, const MaskedSequence& masked, double normalizer, Rng* dropout_rng,
                         bool accumulate)
{
    if (masked.targets.empty()) {
        return 0.0;
    }
    TextEncoder::Cache cache;
    const Matrix states = model.forward(masked.corrupted.ids, accumulate ? &cache : nullptr, dropout_rng);
    std::vector<std::size_t> positions;
    std::vector<int> targets;
    for (const auto& [pos, id] : masked.targets) {
        positions.push_back(pos);
        targets.push_back(id);
    }
    TextEncoder::HeadCache head_cache;
    const Matrix logits = model.mlm_logits(states, positions, accumulate ? &head_cache : nullptr);
    Matrix dlogits;
    const double mean_loss = nn::cross_entropy(logits, targets, normalizer, accumulate ? &dlogits : nullptr);
    if (accumulate) {
        const Matrix dstates = model.mlm_backward(head_cache, dlogits, states.rows());
        model.backward(cache, dstates);
    }
    return mean_loss * static_cast<double>(targets.size());
}

namespace {

void check_corpus(std::span<const preprocess::TokenSequence> corpus, const EncoderSpec& spec)
{
    require(!corpus.empty(), "MLM corpus must not be empty");
    for (const auto& seq : corpus) {
        require(seq.ids.size() <= static_cast<std::size_t>(spec.max_positions),
                "MLM sequence longer than max_positions");
        for (int id : seq.ids) {
            require(id >= 0 && id < spec.vocab_size, "MLM corpus vocabulary does not match the encoder spec");
        }
    }
}

bool has_maskable(const preprocess::TokenSequence& seq)
{
    return std::any_of(seq.ids.begin(), seq.ids.end(), [](int id) { return !preprocess::is_special(id); });
}

std::vector<double> train_mlm(TextEncoder& model, std::span<const preprocess::TokenSequence> corpus,
                              const MlmConfig& cfg)
{
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (has_maskable(corpus[i])) {
            usable.push_back(i);
        }
    }
    require(!usable.empty(), "MLM corpus has no maskable tokens");
    nn::Adam optimizer(cfg.learning_rate);
    const auto params = model.parameters();
    const int vocab = model.spec().vocab_size;
    std::vector<double> losses;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order = usable;
        Rng order_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
        order_rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t epoch_targets = 0;
        const std::uint64_t mask_seed = derive_seed(cfg.seed, 0x10000u + static_cast<std::uint64_t>(epoch));
        const std::uint64_t drop_seed = derive_seed(cfg.seed, 0x20000u + static_cast<std::uint64_t>(epoch));
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<MaskedSequence> batch;
            std::size_t batch_targets = 0;
            for (std::size_t b = start; b < stop; ++b) {
                Rng mask_rng(derive_seed(mask_seed, order[b]));
                batch.push_back(mask_tokens(corpus[order[b]], cfg, vocab, mask_rng));
                batch_targets += batch.back().targets.size();
            }
            if (batch_targets == 0) {
                continue;
            }
            nn::zero_grads(params);
            for (std::size_t b = 0; b < batch.size(); ++b) {
                Rng drop_rng(derive_seed(drop_seed, order[start + b]));
                epoch_loss += mlm_sequence_loss(model, batch[b], static_cast<double>(batch_targets), &drop_rng, true);
            }
            epoch_targets += batch_targets;
            if (!std::isfinite(epoch_loss)) {
                throw DivergenceError("masked-token loss became non-finite in epoch " + std::to_string(epoch + 1));
            }
            optimizer.step(params);
        }
        const double mean = epoch_targets ? epoch_loss / static_cast<double>(epoch_targets) : 0.0;
        if (!std::isfinite(mean) || !nn::all_finite(params)) {
            throw DivergenceError("masked-token training diverged in epoch " + std::to_string(epoch + 1));
        }
        losses.push_back(mean);
    }
    nn::quantize_to_float(params);
    return losses;
}

std::string training_hash(const Checkpoint& base, const MlmConfig& cfg, std::string_view stage,
                          std::span<const preprocess::TokenSequence> corpus)
{
    std::string material = base.provenance + "|" + cfg.to_json() + "|" + std::string(stage) + "|";
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& seq : corpus) {
        for (int id : seq.ids) {
            h = (h ^ static_cast<std::uint64_t>(id)) * 1099511628211ULL;
        }
        h = (h ^ 0xffu) * 1099511628211ULL;
    }
    return io::sha256_hex(material + std::to_string(h));
}

} // namespace

Checkpoint generic_pretrain(const EncoderSpec& spec, std::span<const preprocess::TokenSequence> corpus,
                            const MlmConfig& cfg, std::uint64_t init_seed)
{
    spec.validate(0);
    cfg.validate();
    check_corpus(corpus, spec);
    Checkpoint ckpt = make_random_checkpoint(spec, init_seed);
    ckpt.provenance = training_hash(ckpt, cfg, "generic-pretrained", corpus);
    ckpt.epoch_losses = train_mlm(ckpt.encoder, corpus, cfg);
    ckpt.stage = Stage::generic_pretrained;
    return ckpt;
}

Checkpoint domain_adapt(const Checkpoint& base, std::span<const preprocess::TokenSequence> corpus,
                        const MlmConfig& cfg)
{
    require(base.stage == Stage::random_init || base.stage == Stage::generic_pretrained,
            "domain adaptation needs a random-init or generic-pretrained base, got " + stage_name(base.stage));
    cfg.validate();
    check_corpus(corpus, base.spec());
    Checkpoint ckpt = base;
    ckpt.provenance = training_hash(base, cfg, "domain-adapted", corpus);
    ckpt.epoch_losses = train_mlm(ckpt.encoder, corpus, cfg);
    ckpt.stage = Stage::domain_adapted;
    return ckpt;
}

double masked_perplexity(const Checkpoint& ckpt, std::span<const preprocess::TokenSequence> corpus, double mask_rate,
                         std::uint64_t seed)
{
    check_corpus(corpus, ckpt.spec());
    MlmConfig cfg;
    cfg.mask_rate = mask_rate;
    cfg.mask_action_split = {1.0, 0.0, 0.0};
    auto& model = const_cast<TextEncoder&>(ckpt.encoder);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (!has_maskable(corpus[i])) {
            continue;
        }
        Rng rng(derive_seed(seed, i));
        const MaskedSequence masked = mask_tokens(corpus[i], cfg, ckpt.spec().vocab_size, rng);
        total += mlm_sequence_loss(model, masked, 1.0, nullptr, false);
        count += masked.targets.size();
    }
    require(count > 0, "perplexity corpus produced no masked positions");
    return std::exp(total / static_cast<double>(count));
}

} // namespace deauville::encoders
