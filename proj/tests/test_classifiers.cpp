#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "deauville/classifiers.hpp"
#include "deauville/corpus.hpp"
#include "deauville/error.hpp"
#include "deauville/extraction.hpp"
#include "deauville/preprocess.hpp"
#include "deauville/vision.hpp"
#include "test_support.hpp"

using namespace deauville;
using namespace deauville::classifiers;

namespace {

// Ten reports whose class is carried by a single distinctive word.
const std::vector<std::string> kClassWords{"quiet", "faint", "moderate", "bright", "intense"};

struct ToyText {
    preprocess::Vocabulary vocab;
    std::vector<Example> train;
    std::vector<Example> val;
};

ToyText toy_text()
{
    ToyText t;
    std::vector<std::string> texts;
    for (const auto& w : kClassWords) texts.push_back("the uptake is " + w + " in the node");
    t.vocab = preprocess::train_subword_vocab(texts, 80);
    for (int copy = 0; copy < 4; ++copy) {
        for (int c = 1; c <= kNumClasses; ++c) {
            corpus::ReportDocument doc;
            doc.impression = texts[static_cast<std::size_t>(c - 1)];
            doc.findings = copy % 2 ? "stable appearance" : "";
            Example ex;
            ex.exam_id = "T" + std::to_string(copy) + "_" + std::to_string(c);
            ex.sequence = preprocess::build_input(doc, t.vocab, 32);
            ex.label = c;
            (copy < 2 ? t.train : t.val).push_back(std::move(ex));
        }
    }
    return t;
}

encoders::Checkpoint toy_encoder(int vocab, std::uint64_t seed)
{
    encoders::EncoderSpec spec;
    spec.vocab_size = vocab;
    return encoders::make_random_checkpoint(spec, seed);
}

vision::VisionSpec small_vision()
{
    vision::VisionSpec spec;
    spec.input_size = 32;
    return spec;
}

std::vector<Example> image_examples(std::size_t n, std::uint64_t seed, const vision::VisionSpec& spec,
                                    const std::string& prefix)
{
    auto cspec = corpus::CorpusSpec::defaults();
    cspec.n_exams = n;
    cspec.seed = seed;
    const auto records = corpus::generate_corpus(cspec);
    std::vector<Example> out;
    for (const auto& r : records) {
        Example ex;
        ex.exam_id = prefix + r.exam_id;
        ex.image = vision::prepare_image(*r.image, spec);
        ex.label = r.label->value();
        out.push_back(std::move(ex));
    }
    return out;
}

bool same_values(const nn::ParameterList& a, const nn::ParameterList& b)
{
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i]->value != b[i]->value) return false;
    }
    return true;
}

TrainConfig quick_train(int max_epochs, int patience, double lr = 1e-3)
{
    TrainConfig cfg;
    cfg.max_epochs = max_epochs;
    cfg.early_stop_patience = patience;
    cfg.learning_rate = lr;
    cfg.batch_size = 4;
    cfg.seed = 12;
    return cfg;
}

} // namespace

TEST_CASE("early stopping trace")
{
    EarlyStopping stop(3);
    const std::vector<double> losses{0.9, 0.8, 0.82, 0.83, 0.84};
    int stopped_after = 0;
    for (double l : losses) {
        stop.observe(l);
        ++stopped_after;
        if (stop.should_stop()) break;
    }
    CHECK(stopped_after == 5);
    CHECK(stop.best_epoch() == 2);
    CHECK(stop.best_loss() == 0.8);
    CHECK_THROWS_AS(EarlyStopping(0), ValidationError);

    TrainConfig cfg;
    cfg.max_epochs = 3;
    cfg.early_stop_patience = 3;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg.early_stop_patience = 2;
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    const auto parsed = TrainConfig::parse("learning_rate: 0.01\nmax_epochs: 4\nearly_stop_patience: 1\naugmentations: [hflip, rotate]\n");
    CHECK(parsed.max_epochs == 4);
    CHECK(parsed.augmentations.size() == 2);
}

TEST_CASE("softmax outputs and argmax tie-break")
{
    CHECK(argmax_class({0.2, 0.2, 0.2, 0.2, 0.2}) == 1);
    CHECK(argmax_class({0.1, 0.3, 0.3, 0.2, 0.1}) == 2);
    CHECK(argmax_class({0.0, 0.0, 0.0, 0.0, 1.0}) == 5);

    const auto toy = toy_text();
    auto model = Classifier::text_model(toy_encoder(static_cast<int>(toy.vocab.size()), 1), {16, 16}, 2);
    for (const auto& ex : toy.train) {
        const auto p = predict_text(ex.sequence, model);
        CHECK(std::accumulate(p.probs.begin(), p.probs.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
        for (double v : p.probs) CHECK(v >= 0.0);
        CHECK(p.predicted == argmax_class(p.probs));
    }
    for (auto* p : model.head_parameters()) p->value.setZero();
    const auto uniform = predict_text(toy.train.front().sequence, model);
    for (double v : uniform.probs) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(uniform.predicted == 1);
}

TEST_CASE("dimension and kind mismatches are validation errors")
{
    const auto toy = toy_text();
    const auto model = Classifier::text_model(toy_encoder(static_cast<int>(toy.vocab.size()), 1), {16, 16}, 2);
    ClassifierHead head({32, {8, 8}, 5, "gelu"});
    head.init(1);
    CHECK_THROWS_AS(head.logits(nn::Matrix::Zero(1, 64), nullptr), ValidationError);
    CHECK_THROWS_AS(predict_vision(nn::Matrix::Zero(32, 32), model), ValidationError);

    const auto vmodel = Classifier::vision_model(small_vision(), {16, 16}, 3);
    CHECK_THROWS_AS(predict_vision(nn::Matrix::Zero(64, 64), vmodel), ValidationError);
    CHECK_NOTHROW(predict_vision(nn::Matrix::Zero(32, 32), vmodel));

    preprocess::TokenSequence far;
    far.ids = {2, 5000, 3};
    CHECK_THROWS_AS(predict_text(far, model), ValidationError);
}

TEST_CASE("multimodal fusion width and gradient flow in both pathways")
{
    const auto toy = toy_text();
    auto model =
        Classifier::multimodal_model(toy_encoder(static_cast<int>(toy.vocab.size()), 1), small_vision(), {32, 32}, 4);
    CHECK(model.feature_dim() == 128);
    CHECK(model.head.spec().input_dim == 128);

    auto images = image_examples(4, 8, small_vision(), "I");
    std::vector<Example> batch;
    for (std::size_t i = 0; i < 4; ++i) {
        Example ex = toy.train[i];
        ex.image = images[i].image;
        batch.push_back(ex);
    }
    const auto norms = model.probe_gradients(batch);
    CHECK(norms.text > 0.0);
    CHECK(norms.vision > 0.0);
    CHECK(norms.head > 0.0);

    const auto p = predict_multimodal(batch[0].sequence, batch[0].image, model);
    CHECK(std::accumulate(p.probs.begin(), p.probs.end(), 0.0) == doctest::Approx(1.0));
}

TEST_CASE("toy text task is fitted and training is deterministic")
{
    const auto toy = toy_text();
    const auto enc = toy_encoder(static_cast<int>(toy.vocab.size()), 5);
    auto model = Classifier::text_model(enc, {32, 32}, 6);
    const auto cfg = quick_train(30, 29);
    const auto result = train_classifier(model, toy.train, toy.val, cfg);
    CHECK(evaluate_loss(model, toy.train).second == 1.0);

    auto rerun = Classifier::text_model(enc, {32, 32}, 6);
    const auto again = train_classifier(rerun, toy.train, toy.val, cfg);
    CHECK(train_log_csv(again) == train_log_csv(result));
    CHECK(same_values(rerun.parameters(), model.parameters()));

    CHECK_THROWS_AS(train_classifier(model, std::vector<Example>{}, toy.val, cfg), ValidationError);
    CHECK_THROWS_AS(train_classifier(model, toy.train, toy.train, cfg), ValidationError);
}

TEST_CASE("training returns the best-validation epoch weights")
{
    const auto toy = toy_text();
    auto model = Classifier::text_model(toy_encoder(static_cast<int>(toy.vocab.size()), 7), {32, 32}, 8);
    // A large rate makes the validation curve bounce.
    auto cfg = quick_train(12, 4, 5e-3);
    const auto result = train_classifier(model, toy.train, toy.val, cfg);
    REQUIRE(!result.log.empty());
    const auto best = std::min_element(result.log.begin(), result.log.end(),
                                       [](const EpochLog& a, const EpochLog& b) { return a.val_loss < b.val_loss; });
    CHECK(result.best_epoch == best->epoch);
    const double restored = evaluate_loss(model, toy.val).first;
    CHECK(restored == doctest::Approx(best->val_loss).epsilon(1e-5));
    for (const auto& e : result.log) {
        if (e.epoch != best->epoch && std::abs(e.val_loss - best->val_loss) > 1e-4) {
            CHECK(std::abs(restored - e.val_loss) > std::abs(restored - best->val_loss));
        }
    }
}

TEST_CASE("frozen encoder stays bitwise unchanged")
{
    const auto toy = toy_text();
    const auto enc = toy_encoder(static_cast<int>(toy.vocab.size()), 9);
    auto model = Classifier::text_model(enc, {32, 32}, 10);
    auto reference = Classifier::text_model(enc, {32, 32}, 10);
    auto cfg = quick_train(4, 2);
    cfg.freeze_encoder = true;
    train_classifier(model, toy.train, toy.val, cfg);
    CHECK(same_values(model.text_parameters(), reference.text_parameters()));
    CHECK(!same_values(model.head_parameters(), reference.head_parameters()));
}

TEST_CASE("bundle round-trip reproduces predictions")
{
    const auto toy = toy_text();
    auto model =
        Classifier::multimodal_model(toy_encoder(static_cast<int>(toy.vocab.size()), 1), small_vision(), {16, 16}, 4);
    const auto images = image_examples(4, 2, small_vision(), "I");
    std::vector<Example> train;
    std::vector<Example> val;
    for (std::size_t i = 0; i < 4; ++i) {
        Example ex = toy.train[i];
        ex.image = images[i].image;
        (i < 3 ? train : val).push_back(ex);
    }
    const auto result = train_classifier(model, train, val, quick_train(2, 1));
    BundleAssets assets;
    assets.vocab = toy.vocab;
    assets.grammar_yaml = extraction::PatternGrammar::defaults().to_yaml();
    assets.normalization = preprocess::NormalizationConfig::defaults();
    assets.input_limit = 32;
    TempDir tmp("bundle");
    save_bundle(tmp / "b", model, result, assets);
    const auto bundle = load_bundle(tmp / "b");
    CHECK(bundle.model.kind() == ModelKind::multimodal);
    REQUIRE(bundle.vision_spec.has_value());
    CHECK(*bundle.vision_spec == small_vision());
    CHECK(bundle.assets.vocab == toy.vocab);
    CHECK(bundle.assets.input_limit == 32);
    for (const auto& ex : train) {
        CHECK(bundle.model.probabilities(ex) == model.probabilities(ex));
    }
    CHECK(bundle.model.text->stage == encoders::Stage::fine_tuned);
}

TEST_CASE("flip-augmented vision model is flip consistent and beats the majority rate")
{
    const auto spec = small_vision();
    auto train = image_examples(3000, 41, spec, "A");
    auto val = image_examples(300, 42, spec, "B");
    const auto test = image_examples(1000, 43, spec, "C");
    auto model = Classifier::vision_model(spec, {64, 64}, 5);
    auto cfg = quick_train(100, 15, 5e-4);
    cfg.batch_size = 16;
    cfg.augmentations = {vision::Augmentation::hflip};
    const auto result = train_classifier(model, train, val, cfg);
    const std::string log = train_log_csv(result);
    INFO(log);

    std::size_t same = 0;
    std::size_t correct = 0;
    for (const auto& ex : test) {
        const auto p = predict_vision(ex.image, model);
        const nn::Matrix flipped = ex.image.rowwise().reverse();
        same += p.predicted == predict_vision(flipped, model).predicted ? 1 : 0;
        correct += p.predicted == ex.label ? 1 : 0;
    }
    CHECK(static_cast<double>(same) / static_cast<double>(test.size()) >= 0.9);
    CHECK(static_cast<double>(correct) / static_cast<double>(test.size()) > 620.0 / 1664.0);
}
