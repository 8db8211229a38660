#include "deauville/classifiers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "deauville/error.hpp"
#include "deauville/io.hpp"

namespace deauville::classifiers {

using json = nlohmann::json;
using nn::Matrix;

void HeadSpec::validate() const
{
    require(n_classes == kNumClasses, "classifier head must have 5 classes");
    require(input_dim > 0, "head input_dim must be positive");
    require(hidden_dims[0] > 0 && hidden_dims[1] > 0, "head hidden widths must be positive");
    require(activation == "gelu", "unsupported head activation: " + activation);
}

void TrainConfig::validate() const
{
    require(learning_rate > 0.0, "learning_rate must be positive");
    require(max_epochs >= 1, "max_epochs must be at least 1");
    require(early_stop_patience >= 1 && early_stop_patience < max_epochs, "patience must be in [1, max_epochs)");
    require(batch_size >= 1, "batch_size must be at least 1");
}

TrainConfig TrainConfig::parse(std::string_view yaml_text)
{
    TrainConfig cfg;
    try {
        const YAML::Node root = YAML::Load(std::string(yaml_text));
        if (root["learning_rate"]) cfg.learning_rate = root["learning_rate"].as<double>();
        if (root["max_epochs"]) cfg.max_epochs = root["max_epochs"].as<int>();
        if (root["early_stop_patience"]) cfg.early_stop_patience = root["early_stop_patience"].as<int>();
        if (root["batch_size"]) cfg.batch_size = root["batch_size"].as<int>();
        if (root["seed"]) cfg.seed = root["seed"].as<std::uint64_t>();
        if (root["freeze_encoder"]) cfg.freeze_encoder = root["freeze_encoder"].as<bool>();
        if (root["augmentations"]) {
            for (const auto& item : root["augmentations"]) {
                cfg.augmentations.insert(vision::parse_augmentation(item.as<std::string>()));
            }
        }
    } catch (const YAML::Exception& e) {
        throw ValidationError(std::string("training config error: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

std::string TrainConfig::to_json() const
{
    json augs = json::array();
    for (auto a : augmentations) {
        augs.push_back(vision::augmentation_name(a));
    }
    const json j{{"learning_rate", learning_rate},
                 {"max_epochs", max_epochs},
                 {"early_stop_patience", early_stop_patience},
                 {"batch_size", batch_size},
                 {"seed", seed},
                 {"augmentations", augs},
                 {"freeze_encoder", freeze_encoder}};
    return j.dump();
}

EarlyStopping::EarlyStopping(int patience) : patience_(patience)
{
    require(patience >= 1, "early stopping patience must be at least 1");
}

bool EarlyStopping::observe(double val_loss)
{
    ++epoch_;
    if (best_epoch_ == 0 || val_loss < best_loss_) {
        best_loss_ = val_loss;
        best_epoch_ = epoch_;
        epochs_without_improvement_ = 0;
        return true;
    }
    ++epochs_without_improvement_;
    return false;
}

int argmax_class(const std::array<double, kNumClasses>& probs)
{
    int best = 0;
    for (int k = 1; k < kNumClasses; ++k) {
        if (probs[static_cast<std::size_t>(k)] > probs[static_cast<std::size_t>(best)]) {
            best = k;
        }
    }
    return best + 1;
}

// ---------------------------------------------------------------- head

ClassifierHead::ClassifierHead(const HeadSpec& spec)
    : spec_(spec),
      fc1_("head.fc1", spec.input_dim, spec.hidden_dims[0]),
      fc2_("head.fc2", spec.hidden_dims[0], spec.hidden_dims[1]),
      out_("head.out", spec.hidden_dims[1], spec.n_classes)
{
    spec.validate();
}

void ClassifierHead::init(std::uint64_t seed)
{
    Rng rng(seed);
    fc1_.init(rng);
    fc2_.init(rng);
    out_.init(rng);
    nn::quantize_to_float(parameters());
}

Matrix ClassifierHead::logits(const Matrix& features, Cache* cache) const
{
    if (features.cols() != spec_.input_dim) {
        throw ValidationError("head expects " + std::to_string(spec_.input_dim) + " features, got "
                              + std::to_string(features.cols()));
    }
    Matrix pre1 = fc1_.forward(features);
    Matrix act1 = nn::gelu(pre1);
    Matrix pre2 = fc2_.forward(act1);
    Matrix act2 = nn::gelu(pre2);
    Matrix out = out_.forward(act2);
    if (cache != nullptr) {
        *cache = {features, std::move(pre1), std::move(act1), std::move(pre2), std::move(act2)};
    }
    return out;
}

Matrix ClassifierHead::backward(const Cache& cache, const Matrix& dlogits)
{
    const Matrix dact2 = out_.backward(cache.act2, dlogits);
    const Matrix dact1 = fc2_.backward(cache.act1, nn::gelu_backward(cache.pre2, dact2));
    return fc1_.backward(cache.input, nn::gelu_backward(cache.pre1, dact1));
}

nn::ParameterList ClassifierHead::parameters()
{
    nn::ParameterList out;
    fc1_.collect(out);
    fc2_.collect(out);
    out_.collect(out);
    return out;
}

// ---------------------------------------------------------------- model

std::string model_kind_name(ModelKind kind)
{
    switch (kind) {
    case ModelKind::text: return "text";
    case ModelKind::vision: return "vision";
    case ModelKind::multimodal: return "multimodal";
    }
    return "unknown";
}

ModelKind parse_model_kind(std::string_view name)
{
    for (auto k : {ModelKind::text, ModelKind::vision, ModelKind::multimodal}) {
        if (model_kind_name(k) == name) {
            return k;
        }
    }
    throw ValidationError("unknown model kind: " + std::string(name));
}

Classifier Classifier::text_model(const encoders::Checkpoint& encoder, const std::array<int, 2>& hidden_dims,
                                  std::uint64_t seed)
{
    Classifier model;
    model.kind_ = ModelKind::text;
    model.text = encoder;
    model.head = ClassifierHead({encoder.spec().hidden_size, hidden_dims, kNumClasses, "gelu"});
    model.head.init(derive_seed(seed, 1));
    return model;
}

Classifier Classifier::vision_model(const vision::VisionSpec& spec, const std::array<int, 2>& hidden_dims,
                                    std::uint64_t seed)
{
    Classifier model;
    model.kind_ = ModelKind::vision;
    model.image = vision::VisionEncoder(spec);
    model.image->init(derive_seed(seed, 2));
    model.head = ClassifierHead({spec.hidden_size, hidden_dims, kNumClasses, "gelu"});
    model.head.init(derive_seed(seed, 1));
    return model;
}

Classifier Classifier::multimodal_model(const encoders::Checkpoint& encoder, const vision::VisionSpec& spec,
                                        const std::array<int, 2>& hidden_dims, std::uint64_t seed)
{
    Classifier model;
    model.kind_ = ModelKind::multimodal;
    model.text = encoder;
    model.image = vision::VisionEncoder(spec);
    model.image->init(derive_seed(seed, 2));
    model.head = ClassifierHead({encoder.spec().hidden_size + spec.hidden_size, hidden_dims, kNumClasses, "gelu"});
    model.head.init(derive_seed(seed, 1));
    return model;
}

int Classifier::feature_dim() const
{
    int dim = 0;
    if (text) dim += text->spec().hidden_size;
    if (image) dim += image->spec().hidden_size;
    return dim;
}

Matrix Classifier::features(const Example& example, encoders::TextEncoder::Cache* text_cache,
                            vision::VisionEncoder::Cache* vision_cache, Rng* rng) const
{
    Matrix out(1, feature_dim());
    Eigen::Index col = 0;
    if (text) {
        for (int id : example.sequence.ids) {
            if (id < 0 || id >= text->spec().vocab_size) {
                throw ValidationError("sequence vocabulary does not match the text encoder");
            }
        }
        const Matrix states = text->encoder.forward(example.sequence.ids, text_cache, rng);
        out.block(0, col, 1, states.cols()) = states.row(0);
        col += states.cols();
    }
    if (image) {
        const Matrix pooled = image->forward(example.image, vision_cache, rng);
        out.block(0, col, 1, pooled.cols()) = pooled;
    }
    return out;
}

void Classifier::backward_features(const Matrix& dfeatures, const encoders::TextEncoder::Cache& text_cache,
                                   const vision::VisionEncoder::Cache& vision_cache)
{
    Eigen::Index col = 0;
    if (text) {
        const Eigen::Index h = text->spec().hidden_size;
        if (!text->encoder.token_embedding.frozen) {
            Matrix dstates = Matrix::Zero(static_cast<Eigen::Index>(text_cache.ids.size()), h);
            dstates.row(0) = dfeatures.block(0, col, 1, h);
            text->encoder.backward(text_cache, dstates);
        }
        col += h;
    }
    if (image) {
        const auto params = image->parameters();
        if (!params.empty() && !params.front()->frozen) {
            image->backward(vision_cache, dfeatures.block(0, col, 1, image->spec().hidden_size));
        }
    }
}

std::array<double, kNumClasses> Classifier::probabilities(const Example& example) const
{
    const Matrix logits = head.logits(features(example, nullptr, nullptr, nullptr), nullptr);
    const Matrix probs = nn::softmax_rows(logits);
    std::array<double, kNumClasses> out{};
    for (int k = 0; k < kNumClasses; ++k) {
        out[static_cast<std::size_t>(k)] = probs(0, k);
    }
    return out;
}

Prediction Classifier::predict(const Example& example) const
{
    Prediction p;
    p.exam_id = example.exam_id;
    p.probs = probabilities(example);
    p.predicted = argmax_class(p.probs);
    return p;
}

double Classifier::accumulate(const Example& example, double normalizer, Rng& rng,
                              const std::set<vision::Augmentation>& augmentations)
{
    require(example.label >= 1 && example.label <= kNumClasses, "training example without a valid label");
    const Example* input = &example;
    Example augmented;
    if (image && !augmentations.empty()) {
        augmented.exam_id = example.exam_id;
        augmented.sequence = example.sequence;
        augmented.label = example.label;
        augmented.image = vision::augment(example.image, augmentations, rng);
        input = &augmented;
    }
    encoders::TextEncoder::Cache text_cache;
    vision::VisionEncoder::Cache vision_cache;
    ClassifierHead::Cache head_cache;
    const Matrix feats = features(*input, &text_cache, &vision_cache, &rng);
    const Matrix logits = head.logits(feats, &head_cache);
    Matrix dlogits;
    const double loss = nn::cross_entropy(logits, {example.label - 1}, normalizer, &dlogits);
    const Matrix dfeatures = head.backward(head_cache, dlogits);
    backward_features(dfeatures, text_cache, vision_cache);
    return loss;
}

nn::ParameterList Classifier::text_parameters()
{
    return text ? text->encoder.encoder_parameters() : nn::ParameterList{};
}

nn::ParameterList Classifier::vision_parameters()
{
    return image ? image->parameters() : nn::ParameterList{};
}

nn::ParameterList Classifier::head_parameters()
{
    return head.parameters();
}

nn::ParameterList Classifier::parameters()
{
    nn::ParameterList out = text_parameters();
    for (auto* p : vision_parameters()) out.push_back(p);
    for (auto* p : head_parameters()) out.push_back(p);
    return out;
}

void Classifier::set_encoders_frozen(bool frozen)
{
    if (text) text->encoder.set_frozen(frozen);
    if (image) image->set_frozen(frozen);
}

GradientNorms Classifier::probe_gradients(std::span<const Example> batch)
{
    require(!batch.empty(), "gradient probe needs a non-empty batch");
    const auto params = parameters();
    nn::zero_grads(params);
    Rng rng(0);
    for (const auto& ex : batch) {
        accumulate(ex, static_cast<double>(batch.size()), rng, {});
    }
    GradientNorms norms{nn::grad_norm(text_parameters()), nn::grad_norm(vision_parameters()),
                        nn::grad_norm(head_parameters())};
    nn::zero_grads(params);
    return norms;
}

// ---------------------------------------------------------------- training

std::pair<double, double> evaluate_loss(const Classifier& model, std::span<const Example> examples)
{
    require(!examples.empty(), "evaluation split must not be empty");
    double loss = 0.0;
    std::size_t correct = 0;
    for (const auto& ex : examples) {
        require(ex.label >= 1 && ex.label <= kNumClasses, "evaluation example without a valid label");
        const auto probs = model.probabilities(ex);
        loss -= std::log(std::max(probs[static_cast<std::size_t>(ex.label - 1)], 1e-300));
        correct += argmax_class(probs) == ex.label ? 1 : 0;
    }
    const auto n = static_cast<double>(examples.size());
    return {loss / n, static_cast<double>(correct) / n};
}

TrainResult train_classifier(Classifier& model, std::span<const Example> train, std::span<const Example> val,
                             const TrainConfig& cfg)
{
    cfg.validate();
    require(!train.empty(), "training split must not be empty");
    require(!val.empty(), "validation split must not be empty");
    std::unordered_set<std::string> train_ids;
    for (const auto& ex : train) {
        require(ex.label >= 1 && ex.label <= kNumClasses, "training example " + ex.exam_id + " has no label");
        train_ids.insert(ex.exam_id);
    }
    for (const auto& ex : val) {
        require(!train_ids.count(ex.exam_id), "exam " + ex.exam_id + " appears in both train and validation");
    }

    model.set_encoders_frozen(cfg.freeze_encoder);
    const nn::ParameterList params = cfg.freeze_encoder ? model.head_parameters() : model.parameters();
    nn::Adam optimizer(cfg.learning_rate);
    EarlyStopping stopper(cfg.early_stop_patience);
    Classifier best = model;
    TrainResult result;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng order_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
        order_rng.shuffle(order);
        const std::uint64_t step_seed = derive_seed(cfg.seed, 0x1000u + static_cast<std::uint64_t>(epoch));
        double total = 0.0;
        const auto batch = static_cast<std::size_t>(cfg.batch_size);
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const std::size_t stop = std::min(order.size(), start + batch);
            nn::zero_grads(params);
            for (std::size_t i = start; i < stop; ++i) {
                Rng rng(derive_seed(step_seed, order[i]));
                total += model.accumulate(train[order[i]], static_cast<double>(stop - start), rng, cfg.augmentations);
            }
            if (!std::isfinite(total)) {
                throw DivergenceError("classifier loss became non-finite in epoch " + std::to_string(epoch));
            }
            optimizer.step(params);
        }
        if (!nn::all_finite(params)) {
            throw DivergenceError("classifier weights became non-finite in epoch " + std::to_string(epoch));
        }
        const auto [val_loss, val_acc] = evaluate_loss(model, val);
        if (!std::isfinite(val_loss)) {
            throw DivergenceError("validation loss became non-finite in epoch " + std::to_string(epoch));
        }
        result.log.push_back({epoch, total / static_cast<double>(train.size()), val_loss, val_acc});
        if (stopper.observe(val_loss)) {
            best = model;
        }
        if (stopper.should_stop()) {
            break;
        }
    }
    model = std::move(best);
    model.set_encoders_frozen(false);
    if (!cfg.freeze_encoder) {
        nn::quantize_to_float(model.parameters());
    } else {
        nn::quantize_to_float(model.head_parameters());
    }
    result.best_epoch = stopper.best_epoch();
    return result;
}

std::string train_log_csv(const TrainResult& result)
{
    std::ostringstream out;
    out << "epoch,train_loss,val_loss,val_acc\n";
    for (const auto& e : result.log) {
        out << e.epoch << "," << io::format_double(e.train_loss) << "," << io::format_double(e.val_loss) << ","
            << io::format_double(e.val_acc) << "\n";
    }
    return out.str();
}

Prediction predict_text(const preprocess::TokenSequence& seq, const Classifier& model)
{
    require(model.kind() == ModelKind::text, "predict_text needs a text model");
    Example ex;
    ex.sequence = seq;
    return model.predict(ex);
}

Prediction predict_vision(const Matrix& prepared_image, const Classifier& model)
{
    require(model.kind() == ModelKind::vision, "predict_vision needs a vision model");
    Example ex;
    ex.image = prepared_image;
    return model.predict(ex);
}

Prediction predict_multimodal(const preprocess::TokenSequence& seq, const Matrix& prepared_image,
                              const Classifier& model)
{
    require(model.kind() == ModelKind::multimodal, "predict_multimodal needs a multimodal model");
    Example ex;
    ex.sequence = seq;
    ex.image = prepared_image;
    return model.predict(ex);
}

// ---------------------------------------------------------------- bundles

namespace {

json tensor_manifest_json(const std::vector<nn::TensorInfo>& manifest)
{
    json out = json::array();
    for (const auto& t : manifest) {
        out.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", t.offset}});
    }
    return out;
}

std::vector<nn::TensorInfo> tensor_manifest_from(const json& j)
{
    std::vector<nn::TensorInfo> out;
    for (const auto& t : j) {
        out.push_back({t.at("name").get<std::string>(), t.at("shape")[0].get<Eigen::Index>(),
                       t.at("shape")[1].get<Eigen::Index>(), t.at("offset").get<std::size_t>()});
    }
    return out;
}

} // namespace

void save_bundle(const std::filesystem::path& dir, const Classifier& model, const TrainResult& result,
                 const BundleAssets& assets)
{
    std::filesystem::create_directories(dir);
    auto& m = const_cast<Classifier&>(model);
    const HeadSpec& hs = model.head.spec();
    json meta{{"kind", model_kind_name(model.kind())},
              {"head",
               {{"input_dim", hs.input_dim},
                {"hidden_dims", hs.hidden_dims},
                {"n_classes", hs.n_classes},
                {"activation", hs.activation}}},
              {"best_epoch", result.best_epoch},
              {"input_limit", assets.input_limit}};
    meta["head_tensors"] = tensor_manifest_json(nn::write_tensors(dir / "head.bin", m.head_parameters()));
    if (model.text) {
        encoders::Checkpoint tuned = *model.text;
        tuned.stage = encoders::Stage::fine_tuned;
        encoders::save_checkpoint(dir / "encoder", tuned);
    }
    if (model.image) {
        meta["vision"] = json::parse(model.image->spec().to_json());
        meta["vision_tensors"] = tensor_manifest_json(nn::write_tensors(dir / "vision.bin", m.vision_parameters()));
    }
    io::write_text(dir / "model.json", meta.dump(2) + "\n");
    io::write_text(dir / "train_log.csv", train_log_csv(result));
    if (assets.vocab) {
        assets.vocab->save(dir / "vocab.txt");
    }
    if (assets.grammar_yaml) {
        io::write_text(dir / "grammar.yaml", *assets.grammar_yaml);
    }
    if (assets.normalization) {
        io::write_text(dir / "normalization.yaml", assets.normalization->to_yaml());
    }
}

Bundle load_bundle(const std::filesystem::path& dir)
{
    if (!std::filesystem::exists(dir / "model.json")) {
        throw ValidationError("not a model bundle: " + dir.string());
    }
    Bundle bundle;
    try {
        const json meta = json::parse(io::read_text(dir / "model.json"));
        const ModelKind kind = parse_model_kind(meta.at("kind").get<std::string>());
        const auto hidden = meta.at("head").at("hidden_dims").get<std::array<int, 2>>();
        bundle.assets.input_limit = meta.value("input_limit", preprocess::kDefaultInputLimit);
        std::optional<encoders::Checkpoint> text;
        if (kind != ModelKind::vision) {
            text = encoders::load_checkpoint(dir / "encoder");
        }
        if (kind != ModelKind::text) {
            bundle.vision_spec = vision::VisionSpec::from_json(meta.at("vision").dump());
        }
        switch (kind) {
        case ModelKind::text: bundle.model = Classifier::text_model(*text, hidden, 0); break;
        case ModelKind::vision: bundle.model = Classifier::vision_model(*bundle.vision_spec, hidden, 0); break;
        case ModelKind::multimodal:
            bundle.model = Classifier::multimodal_model(*text, *bundle.vision_spec, hidden, 0);
            break;
        }
        nn::read_tensors(dir / "head.bin", tensor_manifest_from(meta.at("head_tensors")),
                         bundle.model.head_parameters());
        if (bundle.model.image) {
            nn::read_tensors(dir / "vision.bin", tensor_manifest_from(meta.at("vision_tensors")),
                             bundle.model.vision_parameters());
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed model bundle: ") + e.what());
    }
    if (std::filesystem::exists(dir / "vocab.txt")) {
        bundle.assets.vocab = preprocess::Vocabulary::load(dir / "vocab.txt");
    }
    if (std::filesystem::exists(dir / "grammar.yaml")) {
        bundle.assets.grammar_yaml = io::read_text(dir / "grammar.yaml");
    }
    if (std::filesystem::exists(dir / "normalization.yaml")) {
        bundle.assets.normalization = preprocess::NormalizationConfig::parse(io::read_text(dir / "normalization.yaml"));
    }
    return bundle;
}

} // namespace deauville::classifiers
