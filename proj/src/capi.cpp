#include "deauville/deauville.h"

#include <cstring>
#include <filesystem>
#include <mutex>
#include <sstream>

#include <json.hpp>

#include "deauville/classifiers.hpp"
#include "deauville/corpus.hpp"
#include "deauville/encoders.hpp"
#include "deauville/error.hpp"
#include "deauville/eval.hpp"
#include "deauville/extraction.hpp"
#include "deauville/io.hpp"
#include "deauville/pipeline.hpp"
#include "deauville/preprocess.hpp"
#include "deauville/rng.hpp"

namespace dv = deauville;
namespace fs = std::filesystem;
using json = nlohmann::json;

struct dv_grammar {
    dv::extraction::PatternGrammar grammar;
};

struct dv_model {
    dv::classifiers::Bundle bundle;
    std::optional<dv::extraction::PatternGrammar> grammar;
};

struct dv_experiment {
    dv::pipeline::ExperimentConfig config;
};

namespace {

thread_local std::string last_error;

std::mutex log_mutex;
dv_log_fn log_fn = nullptr;
void* log_user = nullptr;

void log_line(const std::string& message)
{
    std::lock_guard lock(log_mutex);
    if (log_fn) log_fn(message.c_str(), log_user);
}

dv_status fail(dv_status status, const char* message)
{
    last_error = message;
    return status;
}

template <typename F>
dv_status guard(F&& body) noexcept
{
    try {
        last_error.clear();
        body();
        return DV_OK;
    } catch (const dv::UnrecoverableStateError& e) {
        return fail(DV_ERR_UNRECOVERABLE, e.what());
    } catch (const dv::DivergenceError& e) {
        return fail(DV_ERR_DIVERGENCE, e.what());
    } catch (const dv::ValidationError& e) {
        return fail(DV_ERR_VALIDATION, e.what());
    } catch (const dv::IoError& e) {
        return fail(DV_ERR_IO, e.what());
    } catch (const fs::filesystem_error& e) {
        return fail(DV_ERR_IO, e.what());
    } catch (const std::exception& e) {
        return fail(DV_ERR_INTERNAL, e.what());
    } catch (...) {
        return fail(DV_ERR_INTERNAL, "unknown error");
    }
}

void need(const void* p, const char* what)
{
    if (p == nullptr) throw dv::ValidationError(std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s)
{
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

dv::pipeline::ExperimentConfig load_config(const char* path)
{
    if (path == nullptr) {
        return dv::pipeline::ExperimentConfig::parse("{}", fs::current_path());
    }
    return dv::pipeline::ExperimentConfig::load(path);
}

dv::extraction::PatternGrammar load_grammar(const char* path)
{
    return path ? dv::extraction::PatternGrammar::load(path) : dv::extraction::PatternGrammar::defaults();
}

fs::path pick_path(const char* explicit_path, const dv::pipeline::ExperimentConfig& cfg, const std::string& key)
{
    if (explicit_path) return explicit_path;
    const auto it = cfg.inputs.find(key);
    if (it == cfg.inputs.end()) {
        throw dv::ValidationError("no " + key + " directory given (argument or inputs." + key + " in the config)");
    }
    return it->second;
}

dv::classifiers::ModelKind to_kind(dv_model_kind kind)
{
    switch (kind) {
    case DV_MODEL_TEXT: return dv::classifiers::ModelKind::text;
    case DV_MODEL_VISION: return dv::classifiers::ModelKind::vision;
    case DV_MODEL_MULTIMODAL: return dv::classifiers::ModelKind::multimodal;
    }
    throw dv::ValidationError("unknown model kind");
}

dv::eval::Weighting to_weighting(dv_weighting w)
{
    return w == DV_WEIGHT_QUADRATIC ? dv::eval::Weighting::quadratic : dv::eval::Weighting::linear;
}

std::vector<dv::preprocess::TokenSequence> read_generic(const fs::path& data_dir, std::size_t limit)
{
    if (!fs::exists(data_dir / "generic.ids")) {
        throw dv::ValidationError("no generic documents in " + data_dir.string() + " (generic.ids)");
    }
    return dv::preprocess::read_sequences(data_dir / "generic.ids", data_dir / "generic.sections", limit);
}

void check_vocab(const dv::encoders::Checkpoint& ckpt, const dv::pipeline::PreparedData& data)
{
    if (static_cast<std::size_t>(ckpt.encoder.spec().vocab_size) != data.vocab.size()) {
        throw dv::ValidationError("checkpoint vocabulary size " + std::to_string(ckpt.encoder.spec().vocab_size)
                                  + " differs from the data vocabulary (" + std::to_string(data.vocab.size()) + ")");
    }
}

dv::classifiers::Example bundle_example(const dv_model& model, const std::string& exam_id,
                                        const dv::corpus::ReportDocument& report,
                                        const std::optional<dv::corpus::GrayscaleImage>& image)
{
    const auto& bundle = model.bundle;
    const auto kind = bundle.model.kind();
    dv::classifiers::Example ex;
    ex.exam_id = exam_id;
    if (kind != dv::classifiers::ModelKind::vision) {
        if (!bundle.assets.vocab || !bundle.assets.normalization) {
            throw dv::ValidationError("model bundle lacks vocabulary or normalization assets");
        }
        const auto& norm = *bundle.assets.normalization;
        dv::corpus::ReportDocument doc = report;
        if (model.grammar) doc = dv::extraction::redact_report(report, *model.grammar).report;
        doc = {dv::preprocess::normalize(doc.indication, norm), dv::preprocess::normalize(doc.findings, norm),
               dv::preprocess::normalize(doc.impression, norm)};
        ex.sequence = dv::preprocess::build_input(doc, *bundle.assets.vocab, bundle.assets.input_limit);
    }
    if (kind != dv::classifiers::ModelKind::text) {
        if (!image) throw dv::ValidationError("exam " + exam_id + " has no image");
        ex.image = dv::vision::prepare_image(*image, *bundle.vision_spec);
    }
    return ex;
}

} // namespace

extern "C" {

const char* dv_version(void)
{
    return "0.1.0";
}

const char* dv_last_error(void)
{
    return last_error.c_str();
}

void dv_string_free(char* s)
{
    std::free(s);
}

void dv_set_log_callback(dv_log_fn fn, void* user)
{
    std::lock_guard lock(log_mutex);
    log_fn = fn;
    log_user = user;
}

// ---------------------------------------------------------------- corpus

dv_status dv_corpus_generate(const char* spec_path, const char* out_dir)
{
    return guard([&] {
        need(spec_path, "spec_path");
        need(out_dir, "out_dir");
        if (!fs::exists(spec_path)) throw dv::ValidationError(std::string("corpus spec not found: ") + spec_path);
        const auto spec = dv::corpus::parse_corpus_spec(dv::io::read_text(spec_path));
        const auto records = dv::corpus::generate_corpus(spec);
        dv::corpus::save_corpus(out_dir, records, spec);
        log_line("generated " + std::to_string(records.size()) + " exams in " + out_dir);
    });
}

dv_status dv_corpus_stats(const char* corpus_dir, char** out_json)
{
    return guard([&] {
        need(corpus_dir, "corpus_dir");
        need(out_json, "out_json");
        const auto info = dv::corpus::read_corpus_manifest(corpus_dir);
        const auto records = dv::corpus::load_corpus(corpus_dir, true);
        const auto stats = dv::corpus::corpus_stats(records);
        json classes = json::object();
        for (int c = 1; c <= dv::corpus::kNumClasses; ++c) {
            classes[std::to_string(c)] = stats.class_counts[static_cast<std::size_t>(c)];
        }
        const json j{{"total", stats.total},
                     {"labeled", info.labeled},
                     {"unlabeled", stats.class_counts[0]},
                     {"class_counts", classes},
                     {"dictators", stats.dictator_counts},
                     {"template_counts", info.template_counts},
                     {"with_images", std::count_if(records.begin(), records.end(),
                                                   [](const auto& r) { return r.image.has_value(); })}};
        *out_json = dup_string(j.dump(2));
    });
}

// ---------------------------------------------------------------- extraction

dv_status dv_grammar_load(const char* grammar_path, dv_grammar** out)
{
    return guard([&] {
        need(out, "out");
        *out = new dv_grammar{load_grammar(grammar_path)};
    });
}

void dv_grammar_free(dv_grammar* grammar)
{
    delete grammar;
}

dv_status dv_grammar_label(const dv_grammar* grammar, const char* text, int* out_label, size_t* out_mentions)
{
    return guard([&] {
        need(grammar, "grammar");
        need(text, "text");
        need(out_label, "out_label");
        const auto mentions = dv::extraction::find_mentions(text, grammar->grammar);
        const auto label = dv::extraction::assign_exam_label(mentions);
        *out_label = label ? label->value() : 0;
        if (out_mentions) *out_mentions = mentions.size();
    });
}

dv_status dv_grammar_redact(const dv_grammar* grammar, const char* text, char** out_text)
{
    return guard([&] {
        need(grammar, "grammar");
        need(text, "text");
        need(out_text, "out_text");
        const auto mentions = dv::extraction::find_mentions(text, grammar->grammar);
        *out_text = dup_string(dv::extraction::redact(text, mentions));
    });
}

dv_status dv_extract_labels(const char* corpus_dir, const char* grammar_path, const char* out_csv)
{
    return guard([&] {
        need(corpus_dir, "corpus_dir");
        need(out_csv, "out_csv");
        const auto records = dv::corpus::load_corpus(corpus_dir, true);
        const auto out = dv::pipeline::extract_corpus(records, load_grammar(grammar_path));
        dv::pipeline::write_labels_csv(out_csv, out);
    });
}

dv_status dv_extract_redact(const char* corpus_dir, const char* grammar_path, const char* out_dir)
{
    return guard([&] {
        need(corpus_dir, "corpus_dir");
        need(out_dir, "out_dir");
        const auto records = dv::corpus::load_corpus(corpus_dir, true);
        const auto out = dv::pipeline::extract_corpus(records, load_grammar(grammar_path));
        fs::create_directories(out_dir);
        dv::pipeline::write_redacted(fs::path(out_dir) / "redacted.jsonl", out);
        dv::pipeline::write_labels_csv(fs::path(out_dir) / "labels.csv", out);
    });
}

dv_status dv_extract_ngrams(const char* corpus_dir, const char* grammar_path, const char* term, size_t window,
                            char** out_csv)
{
    return guard([&] {
        need(corpus_dir, "corpus_dir");
        need(term, "term");
        need(out_csv, "out_csv");
        const auto records = dv::corpus::load_corpus(corpus_dir, false);
        std::vector<dv::corpus::ReportDocument> docs;
        for (const auto& r : records) docs.push_back(r.report);
        dv::extraction::NgramOptions options;
        if (window > 0) options.window = window;
        const auto report = dv::extraction::mine_context_ngrams(docs, term, options, load_grammar(grammar_path));
        std::ostringstream csv;
        csv << "rank,n,ngram,frequency\n";
        std::size_t rank = 0;
        for (const auto& e : report.entries) {
            csv << ++rank << "," << e.n << ",\"" << e.ngram << "\"," << e.frequency << "\n";
        }
        *out_csv = dup_string(csv.str());
    });
}

// ---------------------------------------------------------------- preprocess

dv_status dv_preprocess_run(const char* corpus_dir, const char* config_path, const char* vocab_path,
                            const char* out_dir)
{
    return guard([&] {
        need(corpus_dir, "corpus_dir");
        need(out_dir, "out_dir");
        const auto cfg = load_config(config_path);
        const auto records = dv::corpus::load_corpus(corpus_dir, true);
        const auto extracted = dv::pipeline::extract_corpus(records, cfg.grammar());
        std::optional<dv::preprocess::Vocabulary> vocab;
        if (vocab_path && fs::exists(vocab_path)) {
            vocab = dv::preprocess::Vocabulary::load(vocab_path);
            log_line("using vocabulary " + std::string(vocab_path));
        }
        const auto generic = dv::corpus::generate_generic_text(cfg.generic_docs, dv::derive_seed(cfg.seed, 1));
        const auto data = dv::pipeline::prepare_data(extracted, cfg.normalization, vocab, cfg.vocab_size, generic,
                                                     cfg.input_limit);
        dv::pipeline::save_prepared(out_dir, data);
        const auto gseqs = dv::pipeline::generic_sequences(generic, data.vocab, cfg.normalization, cfg.input_limit);
        dv::preprocess::write_sequences(fs::path(out_dir) / "generic.ids", fs::path(out_dir) / "generic.sections",
                                        gseqs);
        if (vocab_path && !vocab) {
            data.vocab.save(vocab_path);
        }
        log_line("prepared " + std::to_string(data.exam_ids.size()) + " reports, vocabulary "
                 + std::to_string(data.vocab.size()));
    });
}

// ---------------------------------------------------------------- encoders

dv_status dv_encoder_pretrain_generic(const char* config_path, const char* data_dir, const char* out_dir)
{
    return guard([&] {
        need(out_dir, "out_dir");
        const auto cfg = load_config(config_path);
        const fs::path data_path = pick_path(data_dir, cfg, "data");
        const auto data = dv::pipeline::load_prepared(data_path, cfg.input_limit);
        const auto gseqs = read_generic(data_path, cfg.input_limit);
        auto spec = cfg.encoder;
        spec.vocab_size = static_cast<int>(data.vocab.size());
        spec.validate(cfg.input_limit);
        log_line("generic pretraining on " + std::to_string(gseqs.size()) + " documents");
        const auto ckpt = dv::encoders::generic_pretrain(spec, gseqs, cfg.generic_mlm, dv::derive_seed(cfg.seed, 3));
        dv::encoders::save_checkpoint(out_dir, ckpt);
    });
}

dv_status dv_encoder_adapt(const char* base_dir, const char* data_dir, const char* config_path, int epochs, double lr,
                           const char* out_dir)
{
    return guard([&] {
        need(base_dir, "base_dir");
        need(out_dir, "out_dir");
        const auto cfg = load_config(config_path);
        const auto base = dv::encoders::load_checkpoint(base_dir);
        const auto data = dv::pipeline::load_prepared(pick_path(data_dir, cfg, "data"), cfg.input_limit);
        check_vocab(base, data);
        auto mlm = cfg.domain_mlm;
        if (epochs >= 0) mlm.epochs = epochs;
        if (lr > 0) mlm.learning_rate = lr;
        log_line("domain adaptation on " + std::to_string(data.sequences.size()) + " reports");
        const auto ckpt = dv::encoders::domain_adapt(base, data.sequences, mlm);
        dv::encoders::save_checkpoint(out_dir, ckpt);
    });
}

dv_status dv_encoder_perplexity(const char* checkpoint_dir, const char* data_dir, double mask_rate, uint64_t seed,
                                double* out_perplexity)
{
    return guard([&] {
        need(checkpoint_dir, "checkpoint_dir");
        need(data_dir, "data_dir");
        need(out_perplexity, "out_perplexity");
        const auto ckpt = dv::encoders::load_checkpoint(checkpoint_dir);
        const auto data = dv::pipeline::load_prepared(data_dir, static_cast<std::size_t>(ckpt.encoder.spec().max_positions));
        check_vocab(ckpt, data);
        *out_perplexity = dv::encoders::masked_perplexity(ckpt, data.sequences, mask_rate, seed);
    });
}

// ---------------------------------------------------------------- classifiers

dv_status dv_train(dv_model_kind kind, const char* split_csv, const char* config_path, const char* data_dir,
                   const char* corpus_dir, const char* encoder_dir, const char* out_dir)
{
    return guard([&] {
        need(split_csv, "split_csv");
        need(out_dir, "out_dir");
        const auto model_kind = to_kind(kind);
        const auto cfg = load_config(config_path);
        if (!fs::exists(split_csv)) throw dv::ValidationError(std::string("split file not found: ") + split_csv);
        const auto plan = dv::eval::split_from_csv(dv::io::read_text(split_csv));
        const auto data = dv::pipeline::load_prepared(pick_path(data_dir, cfg, "data"), cfg.input_limit);

        std::map<std::string, dv::corpus::GrayscaleImage> images;
        std::optional<dv::vision::VisionSpec> vision_spec;
        if (model_kind != dv::classifiers::ModelKind::text) {
            vision_spec = cfg.vision;
            for (auto& r : dv::corpus::load_corpus(pick_path(corpus_dir, cfg, "corpus"), false)) {
                if (r.image) images.emplace(r.exam_id, std::move(*r.image));
            }
        }
        const auto train = dv::pipeline::make_examples(plan.train_ids, data, &images, vision_spec);
        const auto val = dv::pipeline::make_examples(plan.val_ids, data, &images, vision_spec);
        const auto test = dv::pipeline::make_examples(plan.test_ids, data, &images, vision_spec);

        const auto fold = static_cast<std::uint64_t>(plan.iteration);
        const std::uint64_t model_seed = dv::derive_seed(cfg.seed, 100 + fold);
        dv::classifiers::Classifier model;
        if (model_kind == dv::classifiers::ModelKind::vision) {
            model = dv::classifiers::Classifier::vision_model(cfg.vision, cfg.head_hidden, model_seed);
        } else {
            const auto ckpt = dv::encoders::load_checkpoint(pick_path(encoder_dir, cfg, "encoder"));
            check_vocab(ckpt, data);
            model = model_kind == dv::classifiers::ModelKind::text
                ? dv::classifiers::Classifier::text_model(ckpt, cfg.head_hidden, model_seed)
                : dv::classifiers::Classifier::multimodal_model(ckpt, cfg.vision, cfg.head_hidden, model_seed);
        }
        auto tc = cfg.training.at(model_kind);
        tc.seed = dv::derive_seed(tc.seed, fold);
        const auto result = dv::classifiers::train_classifier(model, train, val, tc);
        for (const auto& e : result.log) {
            log_line("epoch " + std::to_string(e.epoch) + " train " + dv::io::format_double(e.train_loss, 4) + " val "
                     + dv::io::format_double(e.val_loss, 4) + " acc " + dv::io::format_double(e.val_acc, 4));
        }
        dv::classifiers::BundleAssets assets;
        assets.vocab = data.vocab;
        assets.normalization = data.normalization;
        assets.input_limit = cfg.input_limit;
        if (!cfg.grammar_path.empty()) assets.grammar_yaml = dv::io::read_text(cfg.grammar_path);
        dv::classifiers::save_bundle(out_dir, model, result, assets);
        if (!test.empty()) {
            std::vector<dv::classifiers::Prediction> preds;
            std::vector<int> truths;
            for (const auto& ex : test) {
                preds.push_back(model.predict(ex));
                truths.push_back(ex.label);
            }
            dv::io::write_text(fs::path(out_dir) / "predictions.csv", dv::pipeline::predictions_csv(preds, truths));
            std::vector<int> predicted;
            for (const auto& p : preds) predicted.push_back(p.predicted);
            log_line("test accuracy " + dv::io::format_double(dv::eval::accuracy(truths, predicted), 4));
        }
    });
}

dv_status dv_model_load(const char* bundle_dir, dv_model** out)
{
    return guard([&] {
        need(bundle_dir, "bundle_dir");
        need(out, "out");
        auto model = std::make_unique<dv_model>();
        model->bundle = dv::classifiers::load_bundle(bundle_dir);
        if (model->bundle.assets.grammar_yaml) {
            model->grammar = dv::extraction::PatternGrammar::parse(*model->bundle.assets.grammar_yaml);
        } else {
            model->grammar = dv::extraction::PatternGrammar::defaults();
        }
        *out = model.release();
    });
}

void dv_model_free(dv_model* model)
{
    delete model;
}

dv_status dv_model_kind_of(const dv_model* model, dv_model_kind* out_kind)
{
    return guard([&] {
        need(model, "model");
        need(out_kind, "out_kind");
        switch (model->bundle.model.kind()) {
        case dv::classifiers::ModelKind::text: *out_kind = DV_MODEL_TEXT; break;
        case dv::classifiers::ModelKind::vision: *out_kind = DV_MODEL_VISION; break;
        case dv::classifiers::ModelKind::multimodal: *out_kind = DV_MODEL_MULTIMODAL; break;
        }
    });
}

dv_status dv_model_predict_text(const dv_model* model, const char* impression, const char* findings,
                                double out_probs[5], int* out_class)
{
    return guard([&] {
        need(model, "model");
        need(impression, "impression");
        need(out_probs, "out_probs");
        if (model->bundle.model.kind() != dv::classifiers::ModelKind::text) {
            throw dv::ValidationError("text prediction needs a text model");
        }
        const dv::corpus::ReportDocument doc{"", findings ? findings : "", impression};
        const auto ex = bundle_example(*model, "input", doc, std::nullopt);
        const auto pred = model->bundle.model.predict(ex);
        std::copy(pred.probs.begin(), pred.probs.end(), out_probs);
        if (out_class) *out_class = pred.predicted;
    });
}

dv_status dv_predict_corpus(const dv_model* model, const char* corpus_dir, const char* out_csv)
{
    return guard([&] {
        need(model, "model");
        need(corpus_dir, "corpus_dir");
        need(out_csv, "out_csv");
        const auto records = dv::corpus::load_corpus(corpus_dir, true);
        std::vector<dv::classifiers::Prediction> preds;
        preds.reserve(records.size());
        for (const auto& r : records) {
            preds.push_back(model->bundle.model.predict(bundle_example(*model, r.exam_id, r.report, r.image)));
        }
        dv::io::write_text(out_csv, dv::pipeline::predictions_csv(preds, {}));
        log_line("scored " + std::to_string(preds.size()) + " exams");
    });
}

// ---------------------------------------------------------------- evaluation

dv_status dv_weighted_kappa(const double* counts, size_t n, dv_weighting weighting, double* out_kappa)
{
    return guard([&] {
        need(counts, "counts");
        need(out_kappa, "out_kappa");
        dv::require(n > 0, "kappa needs a non-empty matrix");
        const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
            counts, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
        *out_kappa = dv::eval::weighted_kappa(Eigen::MatrixXd(m), to_weighting(weighting));
    });
}

dv_status dv_eval_expert(const char* expert_csv, const char* truth_csv, dv_weighting weighting, char** out_json)
{
    return guard([&] {
        need(expert_csv, "expert_csv");
        need(truth_csv, "truth_csv");
        need(out_json, "out_json");
        const auto expert = dv::eval::read_expert_csv(expert_csv);
        const auto truths = dv::eval::read_labels_csv(truth_csv);
        const auto s = dv::eval::compare_expert(expert, truths, to_weighting(weighting));
        const json j{{"n_cases", s.n_cases},
                     {"accuracy", s.accuracy},
                     {"kappa", s.kappa},
                     {"weighting", dv::eval::weighting_name(s.weighting)}};
        *out_json = dup_string(j.dump(2));
    });
}

// ---------------------------------------------------------------- experiments

dv_status dv_experiment_load(const char* config_path, dv_experiment** out)
{
    return guard([&] {
        need(config_path, "config_path");
        need(out, "out");
        *out = new dv_experiment{dv::pipeline::ExperimentConfig::load(config_path)};
    });
}

void dv_experiment_free(dv_experiment* experiment)
{
    delete experiment;
}

dv_status dv_experiment_set_output(dv_experiment* experiment, const char* output_dir)
{
    return guard([&] {
        need(experiment, "experiment");
        need(output_dir, "output_dir");
        experiment->config.output_dir = fs::absolute(output_dir);
    });
}

dv_status dv_experiment_validate(const dv_experiment* experiment)
{
    return guard([&] {
        need(experiment, "experiment");
        experiment->config.validate();
    });
}

dv_status dv_experiment_run(const dv_experiment* experiment, const char* stop_after, char** out_dir)
{
    return guard([&] {
        need(experiment, "experiment");
        dv::pipeline::RunOptions options;
        if (stop_after) options.stop_after = stop_after;
        options.log = log_line;
        const auto summary = dv::pipeline::run_experiment(experiment->config, options);
        if (out_dir) *out_dir = dup_string(summary.output_dir.string());
    });
}

dv_status dv_resume(const char* output_dir, char** out_summary_json)
{
    return guard([&] {
        need(output_dir, "output_dir");
        dv::pipeline::RunOptions options;
        options.log = log_line;
        const auto summary = dv::pipeline::resume(output_dir, options);
        if (out_summary_json) {
            const json j{{"output_dir", summary.output_dir.string()},
                         {"executed", summary.executed},
                         {"skipped", summary.skipped}};
            *out_summary_json = dup_string(j.dump(2));
        }
    });
}

const char* dv_stage_names(void)
{
    static const std::string names = [] {
        std::string out;
        for (const auto& s : dv::pipeline::stage_names()) {
            if (!out.empty()) out += ",";
            out += s;
        }
        return out;
    }();
    return names.c_str();
}

} // extern "C"
