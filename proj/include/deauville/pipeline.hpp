#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "deauville/classifiers.hpp"
#include "deauville/corpus.hpp"
#include "deauville/encoders.hpp"
#include "deauville/eval.hpp"
#include "deauville/extraction.hpp"
#include "deauville/preprocess.hpp"
#include "deauville/vision.hpp"

namespace deauville::pipeline {

struct ArmConfig {
    std::string name;
    classifiers::ModelKind kind = classifiers::ModelKind::text;
    /// Text encoder source: generic-pretrained or domain-adapted.
    encoders::Stage encoder = encoders::Stage::domain_adapted;
};

struct ExperimentConfig {
    std::string text;
    std::filesystem::path base_dir;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir;

    std::optional<corpus::CorpusSpec> corpus_spec;
    std::optional<std::filesystem::path> corpus_path;
    /// Empty selects the built-in grammar (standalone verbs only).
    std::filesystem::path grammar_path;
    preprocess::NormalizationConfig normalization = preprocess::NormalizationConfig::defaults();
    std::size_t vocab_size = 1000;
    std::size_t generic_docs = 2000;
    std::size_t input_limit = preprocess::kDefaultInputLimit;
    encoders::EncoderSpec encoder;
    encoders::MlmConfig generic_mlm;
    encoders::MlmConfig domain_mlm;
    double perplexity_holdout = 0.1;
    vision::VisionSpec vision;
    std::array<int, 2> head_hidden{64, 64};
    std::map<classifiers::ModelKind, classifiers::TrainConfig> training;
    std::vector<ArmConfig> arms;
    int iterations = 7;
    eval::SplitFractions fractions;
    eval::Weighting weighting = eval::Weighting::linear;
    bool stratified = false;
    std::uint64_t split_seed = 0;
    std::optional<std::filesystem::path> expert_file;
    int workers = 1;
    /// Optional named input locations (data, corpus, encoder) for the
    /// standalone verbs.
    std::map<std::string, std::filesystem::path> inputs;

    /// Relative paths resolve against base_dir.
    static ExperimentConfig parse(std::string_view yaml_text, const std::filesystem::path& base_dir);
    static ExperimentConfig load(const std::filesystem::path& path);

    /// Checks values and that every referenced path exists.
    void validate() const;
    std::string hash() const;
    extraction::PatternGrammar grammar() const;
};

const std::vector<std::string>& stage_names();

struct RunOptions {
    /// Stop (successfully) once this stage has completed.
    std::optional<std::string> stop_after;
    std::function<void(const std::string&)> log;
};

struct RunSummary {
    std::filesystem::path output_dir;
    std::vector<std::string> executed;
    std::vector<std::string> skipped;
};

/// Runs every stage from scratch into config.output_dir.
RunSummary run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Verifies completed stages by checksum and runs the rest.
RunSummary resume(const std::filesystem::path& output_dir, const RunOptions& options = {});

// ---------------------------------------------------------------- shared stage helpers

/// Labels and redacted text for every exam of a corpus.
struct ExtractionOutput {
    std::vector<std::string> exam_ids;
    std::vector<corpus::ReportDocument> redacted;
    std::vector<std::optional<int>> labels;
    std::vector<std::size_t> mention_counts;
};

ExtractionOutput extract_corpus(std::span<const corpus::ExamRecord> records,
                                const extraction::PatternGrammar& grammar);
void write_labels_csv(const std::filesystem::path& path, const ExtractionOutput& out);
void write_redacted(const std::filesystem::path& path, const ExtractionOutput& out);
ExtractionOutput read_redacted(const std::filesystem::path& redacted_path, const std::filesystem::path& labels_path);

/// Directory layout: vocab.txt, normalization.yaml, exam_ids.txt,
/// sequences.ids, sequences.sections, labels.csv.
struct PreparedData {
    std::vector<std::string> exam_ids;
    std::vector<preprocess::TokenSequence> sequences;
    std::map<std::string, int> labels;
    preprocess::Vocabulary vocab;
    preprocess::NormalizationConfig normalization;
};

/// Normalizes the redacted reports and tokenizes them. With no vocabulary
/// given, one of `vocab_size` is trained on the reports plus `generic_text`.
PreparedData prepare_data(const ExtractionOutput& extracted, const preprocess::NormalizationConfig& norm,
                          const std::optional<preprocess::Vocabulary>& vocab, std::size_t vocab_size,
                          std::span<const std::string> generic_text, std::size_t input_limit);
void save_prepared(const std::filesystem::path& dir, const PreparedData& data);
PreparedData load_prepared(const std::filesystem::path& dir, std::size_t input_limit);

/// Normalized generic documents, tokenized as single-segment inputs.
std::vector<preprocess::TokenSequence> generic_sequences(std::span<const std::string> generic_text,
                                                         const preprocess::Vocabulary& vocab,
                                                         const preprocess::NormalizationConfig& norm,
                                                         std::size_t input_limit);

/// Classification examples for the given ids; images are prepared with
/// `vision_spec` when set.
std::vector<classifiers::Example> make_examples(std::span<const std::string> ids, const PreparedData& data,
                                                const std::map<std::string, corpus::GrayscaleImage>* images,
                                                const std::optional<vision::VisionSpec>& vision_spec);

std::string predictions_csv(std::span<const classifiers::Prediction> predictions, std::span<const int> truths);

} // namespace deauville::pipeline
