// Command-line front end; talks to the library only through deauville.h.
#include <cstdio>
#include <functional>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "deauville/deauville.h"

namespace {

const char* opt(const std::string& s)
{
    return s.empty() ? nullptr : s.c_str();
}

int report(dv_status status)
{
    if (status != DV_OK) {
        std::cerr << "error: " << dv_last_error() << "\n";
    }
    return static_cast<int>(status);
}

int print_owned(dv_status status, char*& text)
{
    if (status == DV_OK && text) {
        std::cout << text;
        if (*text && text[std::char_traits<char>::length(text) - 1] != '\n') std::cout << "\n";
    }
    dv_string_free(text);
    return report(status);
}

dv_weighting parse_weighting(const std::string& name)
{
    return name == "quadratic" ? DV_WEIGHT_QUADRATIC : DV_WEIGHT_LINEAR;
}

} // namespace

int main(int argc, char** argv)
{
#if defined(__GLIBC__)
    // Training reallocates the same large buffers every step.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    CLI::App app{"Deauville score extraction, encoder adaptation and classifier benchmarks"};
    app.require_subcommand(1);
    app.set_version_flag("--version", dv_version());
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "Suppress progress messages");

    std::function<int()> action;

    // corpus
    auto* corpus = app.add_subcommand("corpus", "Synthetic corpus generation and statistics");
    corpus->require_subcommand(1);
    std::string spec_path, out_path, corpus_dir;
    auto* corpus_gen = corpus->add_subcommand("generate", "Generate a corpus from a spec file");
    corpus_gen->add_option("--spec", spec_path, "Corpus spec (YAML)")->required();
    corpus_gen->add_option("--out", out_path, "Output directory")->required();
    corpus_gen->callback([&] { action = [&] { return report(dv_corpus_generate(spec_path.c_str(), out_path.c_str())); }; });
    auto* corpus_stats = corpus->add_subcommand("stats", "Class and template counts of a corpus");
    corpus_stats->add_option("dir", corpus_dir, "Corpus directory")->required();
    corpus_stats->callback([&] {
        action = [&] {
            char* text = nullptr;
            return print_owned(dv_corpus_stats(corpus_dir.c_str(), &text), text);
        };
    });

    // extract
    auto* extract = app.add_subcommand("extract", "Rule-based score extraction and redaction");
    extract->require_subcommand(1);
    std::string grammar_path, term = "deauville";
    std::size_t window = 0;
    auto* ex_labels = extract->add_subcommand("labels", "Write exam labels (exam_id,label,n_mentions)");
    ex_labels->add_option("--corpus", corpus_dir, "Corpus directory")->required();
    ex_labels->add_option("--grammar", grammar_path, "Pattern grammar (YAML); built-in when omitted");
    ex_labels->add_option("--out", out_path, "Output CSV")->required();
    ex_labels->callback([&] {
        action = [&] { return report(dv_extract_labels(corpus_dir.c_str(), opt(grammar_path), out_path.c_str())); };
    });
    auto* ex_redact = extract->add_subcommand("redact", "Write redacted reports and labels");
    ex_redact->add_option("--corpus", corpus_dir, "Corpus directory")->required();
    ex_redact->add_option("--grammar", grammar_path, "Pattern grammar (YAML)");
    ex_redact->add_option("--out", out_path, "Output directory")->required();
    ex_redact->callback([&] {
        action = [&] { return report(dv_extract_redact(corpus_dir.c_str(), opt(grammar_path), out_path.c_str())); };
    });
    auto* ex_ngrams = extract->add_subcommand("ngrams", "Rank context n-grams around a term");
    ex_ngrams->add_option("--corpus", corpus_dir, "Corpus directory")->required();
    ex_ngrams->add_option("--term", term, "Anchor term")->capture_default_str();
    ex_ngrams->add_option("--window", window, "Tokens on each side of the term");
    ex_ngrams->add_option("--grammar", grammar_path, "Pattern grammar (YAML)");
    ex_ngrams->callback([&] {
        action = [&] {
            char* text = nullptr;
            return print_owned(dv_extract_ngrams(corpus_dir.c_str(), opt(grammar_path), term.c_str(), window, &text),
                               text);
        };
    });

    // preprocess
    auto* pre = app.add_subcommand("preprocess", "Normalization and subword tokenization");
    pre->require_subcommand(1);
    std::string config_path, vocab_path;
    auto* pre_run = pre->add_subcommand("run", "Extract, redact, normalize and tokenize a corpus");
    pre_run->add_option("--corpus", corpus_dir, "Corpus directory")->required();
    pre_run->add_option("--config", config_path, "Experiment-style config (normalization, vocab, grammar)");
    pre_run->add_option("--vocab", vocab_path, "Vocabulary file; trained and written when missing");
    pre_run->add_option("--out", out_path, "Output directory")->required();
    pre_run->callback([&] {
        action = [&] {
            return report(dv_preprocess_run(corpus_dir.c_str(), opt(config_path), opt(vocab_path), out_path.c_str()));
        };
    });

    // encoder
    auto* enc = app.add_subcommand("encoder", "Masked-token pretraining and domain adaptation");
    enc->require_subcommand(1);
    std::string data_dir, base_dir, checkpoint_dir;
    int epochs = -1;
    double lr = 0.0, mask_rate = 0.15;
    std::uint64_t seed = 0;
    auto* enc_gen = enc->add_subcommand("pretrain-generic", "Pretrain a text encoder on generic documents");
    enc_gen->add_option("--config", config_path, "Experiment-style config (encoder, generic_pretraining)");
    enc_gen->add_option("--data", data_dir, "Preprocess output directory");
    enc_gen->add_option("--out", out_path, "Checkpoint directory")->required();
    enc_gen->callback([&] {
        action = [&] {
            return report(dv_encoder_pretrain_generic(opt(config_path), opt(data_dir), out_path.c_str()));
        };
    });
    auto* enc_adapt = enc->add_subcommand("adapt", "Continue masked-token training on domain reports");
    enc_adapt->add_option("--base", base_dir, "Base checkpoint")->required();
    enc_adapt->add_option("--corpus,--data", data_dir, "Preprocess output directory of the domain corpus");
    enc_adapt->add_option("--config", config_path, "Experiment-style config (domain_adaptation)");
    enc_adapt->add_option("--epochs", epochs, "Epochs (config value when omitted)");
    enc_adapt->add_option("--lr", lr, "Learning rate (config value when omitted)");
    enc_adapt->add_option("--out", out_path, "Checkpoint directory")->required();
    enc_adapt->callback([&] {
        action = [&] {
            return report(
                dv_encoder_adapt(base_dir.c_str(), opt(data_dir), opt(config_path), epochs, lr, out_path.c_str()));
        };
    });
    auto* enc_ppl = enc->add_subcommand("perplexity", "Masked-token perplexity on prepared reports");
    enc_ppl->add_option("--checkpoint", checkpoint_dir, "Checkpoint directory")->required();
    enc_ppl->add_option("--data", data_dir, "Preprocess output directory")->required();
    enc_ppl->add_option("--mask-rate", mask_rate, "Masking rate")->capture_default_str();
    enc_ppl->add_option("--seed", seed, "Masking seed")->capture_default_str();
    enc_ppl->callback([&] {
        action = [&] {
            double ppl = 0.0;
            const auto status = dv_encoder_perplexity(checkpoint_dir.c_str(), data_dir.c_str(), mask_rate, seed, &ppl);
            if (status == DV_OK) std::printf("%.6f\n", ppl);
            return report(status);
        };
    });

    // train
    auto* train = app.add_subcommand("train", "Fine-tune a classifier on one split");
    std::string kind_name, split_path, encoder_dir;
    train->add_option("kind", kind_name, "text, vision or multimodal")
        ->required()
        ->check(CLI::IsMember({"text", "vision", "multimodal"}));
    train->add_option("--split", split_path, "Split CSV (exam_id,set)")->required();
    train->add_option("--config", config_path, "Experiment-style config (training, head, vision, inputs)");
    train->add_option("--data", data_dir, "Preprocess output directory");
    train->add_option("--corpus", corpus_dir, "Corpus directory (images)");
    train->add_option("--encoder", encoder_dir, "Text encoder checkpoint");
    train->add_option("--out", out_path, "Model bundle directory")->required();
    train->callback([&] {
        action = [&] {
            const dv_model_kind kind = kind_name == "text" ? DV_MODEL_TEXT
                : kind_name == "vision"                    ? DV_MODEL_VISION
                                                           : DV_MODEL_MULTIMODAL;
            return report(dv_train(kind, split_path.c_str(), opt(config_path), opt(data_dir), opt(corpus_dir),
                                   opt(encoder_dir), out_path.c_str()));
        };
    });

    // predict
    auto* predict = app.add_subcommand("predict", "Score a corpus with a trained model bundle");
    std::string model_dir;
    predict->add_option("--model", model_dir, "Model bundle directory")->required();
    predict->add_option("--corpus", corpus_dir, "Corpus directory")->required();
    predict->add_option("--out", out_path, "Output CSV")->required();
    predict->callback([&] {
        action = [&] {
            dv_model* model = nullptr;
            dv_status status = dv_model_load(model_dir.c_str(), &model);
            if (status == DV_OK) status = dv_predict_corpus(model, corpus_dir.c_str(), out_path.c_str());
            dv_model_free(model);
            return report(status);
        };
    });

    // eval
    auto* ev = app.add_subcommand("eval", "Benchmarks and expert comparison");
    ev->require_subcommand(1);
    std::string bench_path, expert_path, truth_path, weighting = "linear";
    auto* ev_run = ev->add_subcommand("run", "Run a benchmark config end to end");
    ev_run->add_option("--bench", bench_path, "Benchmark config")->required();
    ev_run->add_option("--out", out_path, "Output directory (overrides the config)");
    auto* ev_expert = ev->add_subcommand("expert", "Score expert predictions against labels");
    ev_expert->add_option("--file", expert_path, "Expert CSV (exam_id,predicted_ds)")->required();
    ev_expert->add_option("--truth", truth_path, "Labels CSV (exam_id,label)")->required();
    ev_expert->add_option("--weighting", weighting, "linear or quadratic")
        ->check(CLI::IsMember({"linear", "quadratic"}))
        ->capture_default_str();
    ev_expert->callback([&] {
        action = [&] {
            char* text = nullptr;
            return print_owned(
                dv_eval_expert(expert_path.c_str(), truth_path.c_str(), parse_weighting(weighting), &text), text);
        };
    });

    // run / resume
    auto* run = app.add_subcommand("run", "Run an experiment config end to end");
    std::string stop_after;
    run->add_option("--config", config_path, "Experiment config")->required();
    run->add_option("--out", out_path, "Output directory (overrides the config)");
    run->add_option("--stop-after", stop_after, std::string("Stop after a stage: ") + dv_stage_names());
    auto run_config = [&](const std::string& path) {
        dv_experiment* exp = nullptr;
        dv_status status = dv_experiment_load(path.c_str(), &exp);
        if (status == DV_OK && !out_path.empty()) status = dv_experiment_set_output(exp, out_path.c_str());
        char* dir = nullptr;
        if (status == DV_OK) status = dv_experiment_run(exp, opt(stop_after), &dir);
        if (status == DV_OK) std::cout << "results in " << dir << "\n";
        dv_string_free(dir);
        dv_experiment_free(exp);
        return report(status);
    };
    run->callback([&] { action = [&] { return run_config(config_path); }; });
    ev_run->callback([&] { action = [&] { return run_config(bench_path); }; });

    auto* res = app.add_subcommand("resume", "Continue a run from its last completed stage");
    std::string resume_dir;
    res->add_option("dir", resume_dir, "Run output directory")->required();
    res->callback([&] {
        action = [&] {
            char* text = nullptr;
            return print_owned(dv_resume(resume_dir.c_str(), &text), text);
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return DV_ERR_VALIDATION;
    }
    if (!quiet) {
        dv_set_log_callback([](const char* message, void*) { std::cerr << message << "\n"; }, nullptr);
    }
    return action ? action() : DV_ERR_VALIDATION;
}
