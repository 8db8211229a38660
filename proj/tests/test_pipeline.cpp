#include <doctest.h>

#include "deauville/error.hpp"
#include "deauville/io.hpp"
#include "deauville/pipeline.hpp"
#include "test_support.hpp"

using namespace deauville;
using namespace deauville::pipeline;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigDir = fs::path(DV_SOURCE_DIR) / "configs";

std::string tiny_config(const std::string& extra = "")
{
    return "seed: 5\n"
           "output_dir: run\n"
           "corpus:\n"
           "  spec: {n_exams: 90, seed: 3, with_images: true, image_size: [32, 32], n_dictators: 6,\n"
           "         unscored_fraction: 0.2, class_frequencies: [1, 1, 1, 1, 1]}\n"
           "grammar: " + (kConfigDir / "deauville_grammar.yaml").string() + "\n"
           "normalization: " + (kConfigDir / "normalization.yaml").string() + "\n"
           "vocab: {size: 150, generic_docs: 20}\n"
           "input_limit: 96\n"
           "encoder: {n_layers: 1, n_heads: 2, hidden_size: 16, ff_size: 32, max_positions: 96, dropout: 0.1}\n"
           "generic_pretraining: {epochs: 1, batch_size: 8}\n"
           "domain_adaptation: {epochs: 1, batch_size: 8}\n"
           "vision: {kind: convolutional, input_size: 16, hidden_size: 16, channels1: 4, channels2: 4}\n"
           "head: {hidden_dims: [8, 8]}\n"
           "training:\n"
           "  text: {max_epochs: 2, early_stop_patience: 1, batch_size: 8}\n"
           "  vision: {max_epochs: 2, early_stop_patience: 1, batch_size: 8}\n"
           "  multimodal: {max_epochs: 2, early_stop_patience: 1, batch_size: 8}\n"
           "arms:\n"
           "  - {name: text_generic, kind: text, encoder: generic-pretrained}\n"
           "  - {name: multimodal, kind: multimodal, encoder: domain-adapted}\n"
           "evaluation: {iterations: 2, fractions: [0.6, 0.2, 0.2]}\n" +
        extra;
}

ExperimentConfig tiny(const fs::path& out, const std::string& extra = "")
{
    auto cfg = ExperimentConfig::parse(tiny_config(extra), out.parent_path());
    cfg.output_dir = out;
    return cfg;
}

} // namespace

TEST_CASE("config parsing and validation")
{
    TempDir tmp("pipeline_cfg");
    const auto cfg = tiny(tmp / "run");
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.arms.size() == 2);
    CHECK(cfg.iterations == 2);
    CHECK(cfg.training.at(classifiers::ModelKind::text).max_epochs == 2);
    CHECK(cfg.hash() == tiny(tmp / "other").hash());

    auto bad = cfg;
    bad.grammar_path = tmp / "missing.yaml";
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.iterations = 1;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.arms.push_back(bad.arms.front());
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.training[classifiers::ModelKind::text].learning_rate = -1.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    CHECK_THROWS_AS(ExperimentConfig::parse("arms:\n  - {name: x, kind: audio}\n", tmp.path), ValidationError);
    CHECK_THROWS_AS(ExperimentConfig::parse("- not a map\n", tmp.path), ValidationError);
    CHECK_THROWS_AS(ExperimentConfig::load(tmp / "nope.cfg"), ValidationError);
}

TEST_CASE("full run, resume and manifest integrity")
{
    TempDir tmp("pipeline_run");
    const auto cfg = tiny(tmp / "a");
    const auto summary = run_experiment(cfg);
    CHECK(summary.executed == stage_names());
    for (const char* f : {"manifest.json", "config.yaml", "report/results.csv", "report/results_chart.svg"}) {
        CHECK_MESSAGE(fs::exists(tmp / "a" / f), f);
    }
    const auto results = io::read_text(tmp / "a" / "report" / "results.csv");
    CHECK(results.find("text_generic,linear") != std::string::npos);
    CHECK(results.find("multimodal,linear") != std::string::npos);

    // Resuming a completed run does nothing.
    const auto again = resume(tmp / "a");
    CHECK(again.executed.empty());
    CHECK(again.skipped == stage_names());
    CHECK(io::read_text(tmp / "a" / "report" / "results.csv") == results);

    // Stopping early and resuming gives the same results as a single run.
    auto partial = tiny(tmp / "b");
    RunOptions stop;
    stop.stop_after = "preprocess";
    const auto first = run_experiment(partial, stop);
    CHECK(first.executed == std::vector<std::string>{"corpus", "extract", "preprocess"});
    CHECK(!fs::exists(tmp / "b" / "report" / "results.csv"));
    const auto rest = resume(tmp / "b");
    CHECK(rest.skipped == std::vector<std::string>{"corpus", "extract", "preprocess"});
    CHECK(io::read_text(tmp / "b" / "report" / "results.csv") == results);

    // Tampered artifacts and manifests are refused.
    const auto labels = tmp / "b" / "extract" / "labels.csv";
    REQUIRE(fs::exists(labels));
    io::write_text(labels, io::read_text(labels) + "EX99999,3\n");
    CHECK_THROWS_AS(resume(tmp / "b"), UnrecoverableStateError);
    io::write_text(tmp / "a" / "manifest.json", "{\"format\": ");
    CHECK_THROWS_AS(resume(tmp / "a"), UnrecoverableStateError);
    CHECK_THROWS_AS(resume(tmp / "nothing"), UnrecoverableStateError);
}

TEST_CASE("extraction helpers label and redact every exam")
{
    auto spec = corpus::CorpusSpec::defaults();
    spec.n_exams = 60;
    spec.with_images = false;
    spec.unscored_fraction = 0.3;
    const auto records = corpus::generate_corpus(spec);
    const auto grammar = extraction::PatternGrammar::load(kConfigDir / "deauville_grammar.yaml");
    const auto out = extract_corpus(records, grammar);
    REQUIRE(out.exam_ids.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(out.labels[i].has_value() == records[i].label.has_value());
        if (records[i].label) CHECK(*out.labels[i] == records[i].label->value());
        CHECK(out.mention_counts[i] == records[i].planted.size());
        CHECK(extraction::find_report_mentions(out.redacted[i], grammar).empty());
    }
    TempDir tmp("pipeline_extract");
    write_labels_csv(tmp / "labels.csv", out);
    write_redacted(tmp / "redacted.jsonl", out);
    const auto back = read_redacted(tmp / "redacted.jsonl", tmp / "labels.csv");
    CHECK(back.exam_ids == out.exam_ids);
    CHECK(back.labels == out.labels);
}
