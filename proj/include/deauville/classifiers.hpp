#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "deauville/corpus.hpp"
#include "deauville/encoders.hpp"
#include "deauville/nn.hpp"
#include "deauville/preprocess.hpp"
#include "deauville/vision.hpp"

namespace deauville::classifiers {

inline constexpr int kNumClasses = corpus::kNumClasses;

struct HeadSpec {
    int input_dim = 64;
    std::array<int, 2> hidden_dims{64, 64};
    int n_classes = kNumClasses;
    std::string activation = "gelu";

    void validate() const;
};

struct TrainConfig {
    double learning_rate = 1e-3;
    int max_epochs = 10;
    int early_stop_patience = 3;
    int batch_size = 16;
    std::uint64_t seed = 0;
    std::set<vision::Augmentation> augmentations;
    /// Train the head only; encoder weights stay bitwise unchanged.
    bool freeze_encoder = false;

    void validate() const;
    static TrainConfig parse(std::string_view yaml_text);
    std::string to_json() const;
};

/// Tracks the best validation loss; the caller restores that epoch.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience);

    /// Records one epoch's validation loss; true when it is a new best.
    bool observe(double val_loss);
    bool should_stop() const noexcept { return epochs_without_improvement_ >= patience_; }
    /// 1-based epoch of the best loss seen so far (0 before any epoch).
    int best_epoch() const noexcept { return best_epoch_; }
    double best_loss() const noexcept { return best_loss_; }
    int epochs_seen() const noexcept { return epoch_; }

private:
    int patience_;
    int epoch_ = 0;
    int best_epoch_ = 0;
    double best_loss_ = 0.0;
    int epochs_without_improvement_ = 0;
};

struct Prediction {
    std::string exam_id;
    std::array<double, kNumClasses> probs{};
    int predicted = 1;
};

/// Class in 1..5 with the largest probability; ties go to the lower class.
int argmax_class(const std::array<double, kNumClasses>& probs);

/// Linear -> act -> Linear -> act -> Linear -> softmax.
class ClassifierHead {
public:
    struct Cache {
        nn::Matrix input;
        nn::Matrix pre1;
        nn::Matrix act1;
        nn::Matrix pre2;
        nn::Matrix act2;
    };

    ClassifierHead() = default;
    explicit ClassifierHead(const HeadSpec& spec);

    void init(std::uint64_t seed);
    nn::Matrix logits(const nn::Matrix& features, Cache* cache) const;
    nn::Matrix backward(const Cache& cache, const nn::Matrix& dlogits);
    nn::ParameterList parameters();
    const HeadSpec& spec() const noexcept { return spec_; }

private:
    HeadSpec spec_;
    nn::Linear fc1_;
    nn::Linear fc2_;
    nn::Linear out_;
};

enum class ModelKind { text, vision, multimodal };

std::string model_kind_name(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);

/// One labelled (or unlabelled, label 0) classification input.
struct Example {
    std::string exam_id;
    preprocess::TokenSequence sequence;
    nn::Matrix image;
    int label = 0;
};

struct GradientNorms {
    double text = 0.0;
    double vision = 0.0;
    double head = 0.0;
};

class Classifier {
public:
    Classifier() = default;
    static Classifier text_model(const encoders::Checkpoint& encoder, const std::array<int, 2>& hidden_dims,
                                 std::uint64_t seed);
    static Classifier vision_model(const vision::VisionSpec& spec, const std::array<int, 2>& hidden_dims,
                                   std::uint64_t seed);
    static Classifier multimodal_model(const encoders::Checkpoint& encoder, const vision::VisionSpec& spec,
                                       const std::array<int, 2>& hidden_dims, std::uint64_t seed);

    ModelKind kind() const noexcept { return kind_; }
    /// Width of the concatenated feature vector fed to the head.
    int feature_dim() const;

    std::array<double, kNumClasses> probabilities(const Example& example) const;
    Prediction predict(const Example& example) const;

    /// Forward/backward of one example in training mode; gradients scaled
    /// by 1/normalizer are accumulated. Returns the example's loss.
    double accumulate(const Example& example, double normalizer, Rng& rng,
                      const std::set<vision::Augmentation>& augmentations);

    nn::ParameterList parameters();
    nn::ParameterList text_parameters();
    nn::ParameterList vision_parameters();
    nn::ParameterList head_parameters();
    void set_encoders_frozen(bool frozen);

    /// One forward/backward pass over a batch, then the gradient norm of
    /// each pathway (no optimizer step).
    GradientNorms probe_gradients(std::span<const Example> batch);

    std::optional<encoders::Checkpoint> text;
    std::optional<vision::VisionEncoder> image;
    ClassifierHead head;

private:
    nn::Matrix features(const Example& example, encoders::TextEncoder::Cache* text_cache,
                        vision::VisionEncoder::Cache* vision_cache, Rng* rng) const;
    void backward_features(const nn::Matrix& dfeatures, const encoders::TextEncoder::Cache& text_cache,
                           const vision::VisionEncoder::Cache& vision_cache);

    ModelKind kind_ = ModelKind::text;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    int best_epoch = 0;
};

/// Mean cross-entropy and accuracy over labelled examples, inference mode.
std::pair<double, double> evaluate_loss(const Classifier& model, std::span<const Example> examples);

TrainResult train_classifier(Classifier& model, std::span<const Example> train, std::span<const Example> val,
                             const TrainConfig& cfg);

std::string train_log_csv(const TrainResult& result);

Prediction predict_text(const preprocess::TokenSequence& seq, const Classifier& model);
Prediction predict_vision(const nn::Matrix& prepared_image, const Classifier& model);
Prediction predict_multimodal(const preprocess::TokenSequence& seq, const nn::Matrix& prepared_image,
                              const Classifier& model);

/// Files copied next to the weights so a bundle can score raw corpora.
struct BundleAssets {
    std::optional<preprocess::Vocabulary> vocab;
    std::optional<std::string> grammar_yaml;
    std::optional<preprocess::NormalizationConfig> normalization;
    std::size_t input_limit = preprocess::kDefaultInputLimit;
};

/// encoder/ (text checkpoint, stage fine-tuned), vision.bin, head.bin,
/// model.json, train_log.csv and the assets.
void save_bundle(const std::filesystem::path& dir, const Classifier& model, const TrainResult& result,
                 const BundleAssets& assets);

struct Bundle {
    Classifier model;
    BundleAssets assets;
    std::optional<vision::VisionSpec> vision_spec;
};

Bundle load_bundle(const std::filesystem::path& dir);

} // namespace deauville::classifiers
