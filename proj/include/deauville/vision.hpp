#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "deauville/corpus.hpp"
#include "deauville/nn.hpp"
#include "deauville/rng.hpp"

namespace deauville::vision {

enum class EncoderKind { patch_transformer, convolutional };

std::string kind_name(EncoderKind kind);
EncoderKind parse_kind(std::string_view name);

struct VisionSpec {
    EncoderKind kind = EncoderKind::convolutional;
    int input_size = 64;
    /// Fraction of rows dropped from the bottom before resizing.
    double crop_bottom = 0.0;
    bool normalize_pixels = true;
    int hidden_size = 64;
    // patch transformer
    int patch_size = 8;
    int n_layers = 2;
    int n_heads = 4;
    int ff_size = 128;
    double dropout = 0.1;
    // convolutional
    int channels1 = 8;
    int channels2 = 16;

    void validate() const;
    std::string to_json() const;
    static VisionSpec from_json(std::string_view text);

    friend bool operator==(const VisionSpec&, const VisionSpec&) = default;
};

enum class Augmentation { hflip, vflip, rotate, translate };

std::string augmentation_name(Augmentation a);
Augmentation parse_augmentation(std::string_view name);

/// Crop, bilinear resize to input_size and optional per-image
/// standardization. The result is the model input (values may leave [0,1]).
nn::Matrix prepare_image(const corpus::GrayscaleImage& image, const VisionSpec& spec);

/// Random flips (p = 0.5 each), rotation within +-15 degrees and
/// translation within +-10% of the side, filled with the image minimum.
nn::Matrix augment(const nn::Matrix& image, const std::set<Augmentation>& augmentations, Rng& rng);

nn::Matrix resize_bilinear(const nn::Matrix& image, int height, int width);

class VisionEncoder {
public:
    struct Cache {
        // patch transformer
        nn::Matrix patches;
        nn::TransformerStack::Cache stack;
        // convolutional
        nn::Matrix cols1;
        nn::Matrix pre1;
        nn::Matrix pooled1;
        nn::Matrix cols2;
        nn::Matrix pre2;
        std::vector<Eigen::Index> argmax;
        nn::Matrix features;
    };

    VisionEncoder() = default;
    explicit VisionEncoder(const VisionSpec& spec);

    void init(std::uint64_t seed);
    /// Pooled embedding (1 x hidden). Dropout applies when rng is set.
    nn::Matrix forward(const nn::Matrix& image, Cache* cache, Rng* rng) const;
    void backward(const Cache& cache, const nn::Matrix& dpooled);

    nn::ParameterList parameters();
    void set_frozen(bool frozen);
    const VisionSpec& spec() const noexcept { return spec_; }

private:
    VisionSpec spec_;
    // patch transformer
    nn::Linear patch_embed_;
    nn::Parameter cls_token_;
    nn::Parameter position_;
    nn::TransformerStack stack_;
    // convolutional
    nn::Linear conv1_;
    nn::Linear conv2_;
    nn::Linear project_;
};

/// 3x3 same-padded patches, one row per pixel (channels-last input).
nn::Matrix im2col3x3(const nn::Matrix& input, int height, int width);
nn::Matrix col2im3x3(const nn::Matrix& cols, int height, int width, Eigen::Index channels);

} // namespace deauville::vision
