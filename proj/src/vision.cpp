#include "deauville/vision.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "deauville/error.hpp"

namespace deauville::vision {

using json = nlohmann::json;
using nn::Matrix;

std::string kind_name(EncoderKind kind)
{
    return kind == EncoderKind::patch_transformer ? "patch-transformer" : "convolutional";
}

EncoderKind parse_kind(std::string_view name)
{
    if (name == "patch-transformer") return EncoderKind::patch_transformer;
    if (name == "convolutional") return EncoderKind::convolutional;
    throw ValidationError("unknown vision encoder kind: " + std::string(name));
}

void VisionSpec::validate() const
{
    require(input_size >= 16, "vision input_size must be at least 16");
    require(input_size % 2 == 0, "vision input_size must be even");
    require(crop_bottom >= 0.0 && crop_bottom < 0.9, "crop_bottom must be in [0, 0.9)");
    require(hidden_size >= 1, "vision hidden_size must be positive");
    require(dropout >= 0.0 && dropout < 1.0, "vision dropout must be in [0, 1)");
    if (kind == EncoderKind::patch_transformer) {
        require(patch_size >= 1 && input_size % patch_size == 0, "input_size must be a multiple of patch_size");
        require(n_layers >= 1 && n_heads >= 1 && hidden_size % n_heads == 0,
                "vision hidden_size must be divisible by n_heads");
        require(ff_size >= 1, "vision ff_size must be positive");
    } else {
        require(channels1 >= 1 && channels2 >= 1, "convolution channel counts must be positive");
    }
}

std::string VisionSpec::to_json() const
{
    const json j{{"kind", kind_name(kind)},
                 {"input_size", input_size},
                 {"crop_bottom", crop_bottom},
                 {"normalize_pixels", normalize_pixels},
                 {"hidden_size", hidden_size},
                 {"patch_size", patch_size},
                 {"n_layers", n_layers},
                 {"n_heads", n_heads},
                 {"ff_size", ff_size},
                 {"dropout", dropout},
                 {"channels1", channels1},
                 {"channels2", channels2}};
    return j.dump(2);
}

VisionSpec VisionSpec::from_json(std::string_view text)
{
    try {
        const json j = json::parse(text);
        VisionSpec s;
        s.kind = parse_kind(j.at("kind").get<std::string>());
        s.input_size = j.at("input_size").get<int>();
        s.crop_bottom = j.at("crop_bottom").get<double>();
        s.normalize_pixels = j.at("normalize_pixels").get<bool>();
        s.hidden_size = j.at("hidden_size").get<int>();
        s.patch_size = j.at("patch_size").get<int>();
        s.n_layers = j.at("n_layers").get<int>();
        s.n_heads = j.at("n_heads").get<int>();
        s.ff_size = j.at("ff_size").get<int>();
        s.dropout = j.at("dropout").get<double>();
        s.channels1 = j.at("channels1").get<int>();
        s.channels2 = j.at("channels2").get<int>();
        s.validate();
        return s;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed vision spec: ") + e.what());
    }
}

std::string augmentation_name(Augmentation a)
{
    switch (a) {
    case Augmentation::hflip: return "hflip";
    case Augmentation::vflip: return "vflip";
    case Augmentation::rotate: return "rotate";
    case Augmentation::translate: return "translate";
    }
    return "unknown";
}

Augmentation parse_augmentation(std::string_view name)
{
    for (auto a : {Augmentation::hflip, Augmentation::vflip, Augmentation::rotate, Augmentation::translate}) {
        if (augmentation_name(a) == name) {
            return a;
        }
    }
    throw ValidationError("unknown augmentation: " + std::string(name));
}

// ---------------------------------------------------------------- image ops

namespace {

double sample_bilinear(const Matrix& img, double y, double x, double fill)
{
    const Eigen::Index h = img.rows();
    const Eigen::Index w = img.cols();
    if (y < -0.5 || x < -0.5 || y > static_cast<double>(h) - 0.5 || x > static_cast<double>(w) - 0.5) {
        return fill;
    }
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    const auto y0 = static_cast<Eigen::Index>(std::floor(y));
    const auto x0 = static_cast<Eigen::Index>(std::floor(x));
    const Eigen::Index y1 = std::min(y0 + 1, h - 1);
    const Eigen::Index x1 = std::min(x0 + 1, w - 1);
    const double fy = y - static_cast<double>(y0);
    const double fx = x - static_cast<double>(x0);
    return (1 - fy) * ((1 - fx) * img(y0, x0) + fx * img(y0, x1)) + fy * ((1 - fx) * img(y1, x0) + fx * img(y1, x1));
}

} // namespace

Matrix resize_bilinear(const Matrix& image, int height, int width)
{
    require(height > 0 && width > 0, "resize target must be positive");
    if (image.rows() == height && image.cols() == width) {
        return image;
    }
    Matrix out(height, width);
    const double sy = static_cast<double>(image.rows()) / height;
    const double sx = static_cast<double>(image.cols()) / width;
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.rows() - 1));
            const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.cols() - 1));
            out(r, c) = sample_bilinear(image, y, x, 0.0);
        }
    }
    return out;
}

Matrix prepare_image(const corpus::GrayscaleImage& image, const VisionSpec& spec)
{
    spec.validate();
    image.validate();
    const int kept = std::max(1, static_cast<int>(std::lround(image.height() * (1.0 - spec.crop_bottom))));
    Matrix raw(kept, image.width());
    for (int r = 0; r < kept; ++r) {
        for (int c = 0; c < image.width(); ++c) {
            raw(r, c) = image.at(r, c);
        }
    }
    Matrix out = resize_bilinear(raw, spec.input_size, spec.input_size);
    if (spec.normalize_pixels) {
        const double mean = out.mean();
        const double sd = std::sqrt((out.array() - mean).square().mean());
        out = (out.array() - mean) / std::max(sd, 1e-6);
    }
    return out;
}

Matrix augment(const Matrix& image, const std::set<Augmentation>& augmentations, Rng& rng)
{
    Matrix out = image;
    if (augmentations.count(Augmentation::hflip) && rng.bernoulli(0.5)) {
        out = out.rowwise().reverse().eval();
    }
    if (augmentations.count(Augmentation::vflip) && rng.bernoulli(0.5)) {
        out = out.colwise().reverse().eval();
    }
    double angle = 0.0;
    double ty = 0.0;
    double tx = 0.0;
    if (augmentations.count(Augmentation::rotate)) {
        angle = rng.uniform(-15.0, 15.0) * std::numbers::pi / 180.0;
    }
    if (augmentations.count(Augmentation::translate)) {
        ty = rng.uniform(-0.1, 0.1) * static_cast<double>(out.rows());
        tx = rng.uniform(-0.1, 0.1) * static_cast<double>(out.cols());
    }
    if (angle == 0.0 && ty == 0.0 && tx == 0.0) {
        return out;
    }
    const double fill = out.minCoeff();
    const double cy = (static_cast<double>(out.rows()) - 1.0) / 2.0;
    const double cx = (static_cast<double>(out.cols()) - 1.0) / 2.0;
    const double cs = std::cos(angle);
    const double sn = std::sin(angle);
    Matrix warped(out.rows(), out.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        for (Eigen::Index c = 0; c < out.cols(); ++c) {
            // inverse map: undo translation, then rotation about the centre
            const double dy = static_cast<double>(r) - cy - ty;
            const double dx = static_cast<double>(c) - cx - tx;
            const double sy = cs * dy + sn * dx + cy;
            const double sx = -sn * dy + cs * dx + cx;
            warped(r, c) = sample_bilinear(out, sy, sx, fill);
        }
    }
    return warped;
}

Matrix im2col3x3(const Matrix& input, int height, int width)
{
    const Eigen::Index channels = input.cols();
    Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(height) * width, 9 * channels);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            const Eigen::Index row = static_cast<Eigen::Index>(r) * width + c;
            for (int k = 0; k < 9; ++k) {
                const int rr = r + k / 3 - 1;
                const int cc = c + k % 3 - 1;
                if (rr < 0 || cc < 0 || rr >= height || cc >= width) {
                    continue;
                }
                cols.block(row, k * channels, 1, channels) = input.row(static_cast<Eigen::Index>(rr) * width + cc);
            }
        }
    }
    return cols;
}

Matrix col2im3x3(const Matrix& cols, int height, int width, Eigen::Index channels)
{
    Matrix out = Matrix::Zero(static_cast<Eigen::Index>(height) * width, channels);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            const Eigen::Index row = static_cast<Eigen::Index>(r) * width + c;
            for (int k = 0; k < 9; ++k) {
                const int rr = r + k / 3 - 1;
                const int cc = c + k % 3 - 1;
                if (rr < 0 || cc < 0 || rr >= height || cc >= width) {
                    continue;
                }
                out.row(static_cast<Eigen::Index>(rr) * width + cc) += cols.block(row, k * channels, 1, channels);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------- encoder

VisionEncoder::VisionEncoder(const VisionSpec& spec) : spec_(spec)
{
    spec.validate();
    if (spec.kind == EncoderKind::patch_transformer) {
        const int per_side = spec.input_size / spec.patch_size;
        patch_embed_ = nn::Linear("vision.patch_embed", spec.patch_size * spec.patch_size, spec.hidden_size);
        cls_token_.reset("vision.cls", 1, spec.hidden_size);
        position_.reset("vision.position", per_side * per_side + 1, spec.hidden_size);
        stack_ = nn::TransformerStack("vision.encoder", spec.n_layers, spec.hidden_size, spec.n_heads, spec.ff_size);
    } else {
        conv1_ = nn::Linear("vision.conv1", 9, spec.channels1);
        conv2_ = nn::Linear("vision.conv2", 9 * spec.channels1, spec.channels2);
        project_ = nn::Linear("vision.project", spec.channels2, spec.hidden_size);
    }
}

void VisionEncoder::init(std::uint64_t seed)
{
    Rng rng(seed);
    if (spec_.kind == EncoderKind::patch_transformer) {
        patch_embed_.init(rng);
        nn::init_normal(cls_token_, 0.1, rng);
        nn::init_normal(position_, 0.1, rng);
        stack_.init(rng);
    } else {
        conv1_.init(rng);
        conv2_.init(rng);
        project_.init(rng);
        conv1_.weight.value *= std::sqrt(2.0);
        conv2_.weight.value *= std::sqrt(2.0);
    }
    nn::quantize_to_float(parameters());
}

nn::ParameterList VisionEncoder::parameters()
{
    nn::ParameterList out;
    if (spec_.kind == EncoderKind::patch_transformer) {
        patch_embed_.collect(out);
        out.push_back(&cls_token_);
        out.push_back(&position_);
        stack_.collect(out);
    } else {
        conv1_.collect(out);
        conv2_.collect(out);
        project_.collect(out);
    }
    return out;
}

void VisionEncoder::set_frozen(bool frozen)
{
    for (auto* p : parameters()) {
        p->frozen = frozen;
    }
}

Matrix VisionEncoder::forward(const Matrix& image, Cache* cache, Rng* rng) const
{
    if (image.rows() != spec_.input_size || image.cols() != spec_.input_size) {
        throw ValidationError("image is " + std::to_string(image.rows()) + "x" + std::to_string(image.cols())
                              + ", vision encoder expects " + std::to_string(spec_.input_size) + "x"
                              + std::to_string(spec_.input_size));
    }
    const int size = spec_.input_size;
    if (spec_.kind == EncoderKind::patch_transformer) {
        const int p = spec_.patch_size;
        const int per_side = size / p;
        Matrix patches(per_side * per_side, p * p);
        for (int pr = 0; pr < per_side; ++pr) {
            for (int pc = 0; pc < per_side; ++pc) {
                const Matrix block = image.block(pr * p, pc * p, p, p);
                patches.row(pr * per_side + pc) = Eigen::Map<const nn::Vector>(block.data(), p * p);
            }
        }
        Matrix x(patches.rows() + 1, spec_.hidden_size);
        x.row(0) = cls_token_.value.row(0);
        x.bottomRows(patches.rows()) = patch_embed_.forward(patches);
        x += position_.value;
        const Matrix states = stack_.forward(x, cache ? &cache->stack : nullptr, spec_.dropout, rng);
        if (cache != nullptr) {
            cache->patches = std::move(patches);
        }
        return states.topRows(1);
    }

    const Matrix x0 = Eigen::Map<const Matrix>(image.data(), static_cast<Eigen::Index>(size) * size, 1);
    Matrix cols1 = im2col3x3(x0, size, size);
    Matrix pre1 = conv1_.forward(cols1);
    const Matrix act1 = pre1.cwiseMax(0.0);
    const int half = size / 2;
    Matrix pooled1 = Matrix::Zero(static_cast<Eigen::Index>(half) * half, act1.cols());
    for (int r = 0; r < half; ++r) {
        for (int c = 0; c < half; ++c) {
            const Eigen::Index dst = static_cast<Eigen::Index>(r) * half + c;
            const Eigen::Index a = static_cast<Eigen::Index>(2 * r) * size + 2 * c;
            pooled1.row(dst) = 0.25 * (act1.row(a) + act1.row(a + 1) + act1.row(a + size) + act1.row(a + size + 1));
        }
    }
    Matrix cols2 = im2col3x3(pooled1, half, half);
    Matrix pre2 = conv2_.forward(cols2);
    Matrix features(1, pre2.cols());
    std::vector<Eigen::Index> argmax(static_cast<std::size_t>(pre2.cols()));
    for (Eigen::Index ch = 0; ch < pre2.cols(); ++ch) {
        Eigen::Index best = 0;
        const double mx = pre2.col(ch).maxCoeff(&best);
        features(0, ch) = std::max(mx, 0.0);
        argmax[static_cast<std::size_t>(ch)] = best;
    }
    Matrix pooled = project_.forward(features);
    if (cache != nullptr) {
        cache->cols1 = std::move(cols1);
        cache->pre1 = std::move(pre1);
        cache->pooled1 = std::move(pooled1);
        cache->cols2 = std::move(cols2);
        cache->pre2 = std::move(pre2);
        cache->argmax = std::move(argmax);
        cache->features = std::move(features);
    }
    return pooled;
}

void VisionEncoder::backward(const Cache& cache, const Matrix& dpooled)
{
    if (spec_.kind == EncoderKind::patch_transformer) {
        Matrix dstates = Matrix::Zero(position_.value.rows(), spec_.hidden_size);
        dstates.row(0) = dpooled.row(0);
        const Matrix dx = stack_.backward(cache.stack, dstates);
        if (cls_token_.frozen) {
            return;
        }
        cls_token_.grad.row(0) += dx.row(0);
        position_.grad += dx;
        patch_embed_.backward(cache.patches, dx.bottomRows(dx.rows() - 1));
        return;
    }

    const int size = spec_.input_size;
    const int half = size / 2;
    const Matrix dfeatures = project_.backward(cache.features, dpooled);
    Matrix dpre2 = Matrix::Zero(cache.pre2.rows(), cache.pre2.cols());
    for (Eigen::Index ch = 0; ch < dpre2.cols(); ++ch) {
        const Eigen::Index at = cache.argmax[static_cast<std::size_t>(ch)];
        if (cache.pre2(at, ch) > 0.0) {
            dpre2(at, ch) = dfeatures(0, ch);
        }
    }
    const Matrix dcols2 = conv2_.backward(cache.cols2, dpre2);
    const Matrix dpooled1 = col2im3x3(dcols2, half, half, cache.pooled1.cols());
    Matrix dpre1 = Matrix::Zero(cache.pre1.rows(), cache.pre1.cols());
    for (int r = 0; r < half; ++r) {
        for (int c = 0; c < half; ++c) {
            const auto g = 0.25 * dpooled1.row(static_cast<Eigen::Index>(r) * half + c);
            const Eigen::Index a = static_cast<Eigen::Index>(2 * r) * size + 2 * c;
            for (Eigen::Index idx : {a, a + 1, a + size, a + size + 1}) {
                dpre1.row(idx) = g;
            }
        }
    }
    dpre1 = (cache.pre1.array() > 0.0).select(dpre1, 0.0);
    conv1_.backward(cache.cols1, dpre1);
}

} // namespace deauville::vision
