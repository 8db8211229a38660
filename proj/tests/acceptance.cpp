// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--work DIR] [--config CFG] [--reuse]
//
// The benchmark criteria run the bundled desk config twice into DIR/run_a
// and DIR/run_b. --reuse resumes existing runs instead of starting over.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "deauville/classifiers.hpp"
#include "deauville/corpus.hpp"
#include "deauville/encoders.hpp"
#include "deauville/error.hpp"
#include "deauville/eval.hpp"
#include "deauville/extraction.hpp"
#include "deauville/io.hpp"
#include "deauville/pipeline.hpp"
#include "deauville/preprocess.hpp"
#include "deauville/vision.hpp"
#include "extraction_oracle.hpp"

using namespace deauville;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what)
    {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

int g_failures = 0;

void report(int id, const std::string& name, Outcome& o)
{
    std::cout << "AC" << id << " " << (o.pass ? "PASS" : "FAIL") << " " << name << ":" << o.detail.str() << std::endl;
    if (!o.pass) ++g_failures;
}

template <class F>
void criterion(int id, const std::string& name, F&& body)
{
    Outcome o;
    try {
        body(o);
    } catch (const std::exception& e) {
        o.pass = false;
        o.detail << " [exception: " << e.what() << "]";
    }
    report(id, name, o);
}

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

struct ArmResult {
    double acc_mean = 0.0;
    double acc_sd = 0.0;
    std::vector<double> fold_acc;
};

std::map<std::string, ArmResult> read_results(const fs::path& csv)
{
    std::istringstream in(io::read_text(csv));
    std::string line;
    std::getline(in, line);
    const auto header = split_csv_line(line);
    std::map<std::string, ArmResult> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        ArmResult r;
        for (std::size_t i = 0; i < header.size() && i < f.size(); ++i) {
            if (header[i] == "acc_mean") r.acc_mean = std::stod(f[i]);
            if (header[i] == "acc_sd") r.acc_sd = std::stod(f[i]);
            if (header[i].rfind("acc_fold", 0) == 0 && !f[i].empty()) r.fold_acc.push_back(std::stod(f[i]));
        }
        out[f.at(0)] = r;
    }
    return out;
}

std::size_t count_of(const std::string& text, const std::string& needle)
{
    std::size_t n = 0;
    for (std::size_t pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
    return n;
}

// ---------------------------------------------------------------- criteria

void extraction_oracle(Outcome& o)
{
    const auto t0 = Clock::now();
    const auto grammar = extraction::PatternGrammar::defaults();
    auto spec = corpus::CorpusSpec::defaults();
    spec.n_exams = 2000;
    spec.seed = 101;
    spec.with_images = false;
    spec.misspelling_rate = 0.2;
    spec.number_word_rate = 0.2;
    spec.multi_score_rate = 0.3;
    spec.range_rate = 0.1;
    spec.unscored_fraction = 0.2;
    const auto records = corpus::generate_corpus(spec);

    std::set<std::string> templates;
    std::size_t labeled = 0, recovered = 0, residual = 0, misspelled = 0, words = 0, ranges = 0, multi = 0;
    for (const auto& r : records) {
        for (const auto& p : r.planted) templates.insert(p.template_id);
        const auto mentions = extraction::find_report_mentions(r.report, grammar);
        if (extraction::assign_exam_label(mentions) == r.label) ++recovered;
        if (r.label) ++labeled;
        std::set<std::size_t> starts;
        for (const auto& m : mentions) {
            starts.insert(m.start);
            const std::string lowered = oracle::lower(m.surface);
            if (lowered.find("deauville") == std::string::npos) ++misspelled;
            for (const auto& w : oracle::kWords) {
                if (lowered.find(" " + w) != std::string::npos) ++words;
            }
        }
        ranges += mentions.size() - starts.size();
        std::set<int> distinct;
        for (const auto& p : r.planted) distinct.insert(p.score);
        if (distinct.size() >= 2 && starts.size() >= 2) ++multi;

        const auto redacted = extraction::redact_report(r.report, grammar);
        residual += extraction::find_report_mentions(redacted.report, grammar).size();
        for (const std::string* s :
             {&redacted.report.indication, &redacted.report.findings, &redacted.report.impression}) {
            residual += oracle::oracle_mentions(*s).size();
        }
    }
    const double secs = seconds_since(t0);
    o.detail << " recovered " << recovered << "/" << records.size() << " (" << labeled << " scored), residual "
             << residual << ", templates " << templates.size() << "/" << corpus::mention_template_ids().size()
             << ", misspelled " << misspelled << ", word scores " << words << ", ranges " << ranges
             << ", multi-score " << multi << ", " << secs << " s";
    o.require(recovered == records.size(), "every planted label recovered");
    o.require(residual == 0, "no residual mentions after redaction");
    o.require(templates.size() == corpus::mention_template_ids().size(), "all templates covered");
    o.require(misspelled > 0 && words > 0 && ranges > 0 && multi > 0, "all mention forms covered");
    o.require(secs < 60.0, "runtime under 1 min");
}

void max_rule_and_exclusion(Outcome& o, const fs::path& work)
{
    const auto grammar = extraction::PatternGrammar::defaults();
    const auto two_four =
        extraction::find_mentions("Deauville score 2 in the neck. Deauville score 4 in the spleen.", grammar);
    const auto label = extraction::assign_exam_label(two_four);
    o.require(label && label->value() == 4, "{2,4} labels as 4");
    o.require(!extraction::assign_exam_label(extraction::find_mentions("No score was given.", grammar)),
              "no mention is excluded");

    auto spec = corpus::CorpusSpec::defaults();
    spec.n_exams = 4542;
    spec.seed = 202;
    spec.with_images = false;
    spec.unscored_fraction = 1.0 - 1664.0 / 4542.0;
    const auto records = corpus::generate_corpus(spec);
    const fs::path dir = work / "ac2_corpus";
    fs::remove_all(dir);
    corpus::save_corpus(dir, records, spec);
    const auto manifest = corpus::read_corpus_manifest(dir);
    const auto extracted = pipeline::extract_corpus(records, grammar);
    std::size_t included = 0, excluded = 0, agree = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (extracted.labels[i]) {
            ++included;
            if (records[i].label && records[i].label->value() == *extracted.labels[i]) ++agree;
        } else {
            ++excluded;
        }
    }
    fs::remove_all(dir);
    o.detail << " {2,4} -> " << (label ? label->value() : 0) << "; " << records.size() << " exams, included "
             << included << " (manifest " << manifest.labeled << "), excluded " << excluded << " (manifest "
             << manifest.unlabeled << ")";
    o.require(included == manifest.labeled && excluded == manifest.unlabeled, "counts reconcile with manifest");
    o.require(agree == included, "included labels match the manifest labels");
    o.require(included + excluded == records.size(), "every exam accounted for");
}

void truncation_invariants(Outcome& o)
{
    auto spec = corpus::CorpusSpec::defaults();
    spec.n_exams = 1000;
    spec.seed = 303;
    spec.with_images = false;
    const auto records = corpus::generate_corpus(spec);
    const auto norm = preprocess::NormalizationConfig::defaults();
    std::vector<std::string> texts;
    for (const auto& r : records) {
        texts.push_back(preprocess::normalize(r.report.impression, norm));
        texts.push_back(preprocess::normalize(r.report.findings, norm));
    }
    const auto vocab = preprocess::train_subword_vocab(texts, 600);

    std::mt19937_64 rng(303);
    std::size_t over = 0, truncated = 0, fit_checked = 0, missing = 0;
    for (const auto& r : records) {
        // Randomly inflate sections so that many inputs overflow the budget.
        corpus::ReportDocument doc;
        const auto imp = preprocess::normalize(r.report.impression, norm);
        const auto fin = preprocess::normalize(r.report.findings, norm);
        for (std::uint64_t k = 0, n = rng() % 14; k <= n; ++k) doc.impression += (k ? " " : "") + imp;
        for (std::uint64_t k = 0, n = rng() % 12; k <= n; ++k) doc.findings += (k ? " " : "") + fin;
        const auto seq = preprocess::build_input(doc, vocab, 512);
        if (seq.ids.size() > 512) ++over;
        const auto imp_ids = vocab.encode(doc.impression);
        const auto fin_ids = vocab.encode(doc.findings);
        if (imp_ids.size() + fin_ids.size() + 3 > 512) {
            ++truncated;
            if (imp_ids.size() + 3 <= 512) {
                ++fit_checked;
                if (!std::equal(imp_ids.begin(), imp_ids.end(), seq.ids.begin() + 1)) ++missing;
            }
        }
    }
    o.detail << " 1000 reports, over budget " << over << ", truncated " << truncated << ", impression-fits checked "
             << fit_checked << ", impression tokens lost " << missing;
    o.require(over == 0, "no sequence exceeds 512");
    o.require(missing == 0, "impression kept whenever it fits");
    o.require(truncated > 100 && fit_checked > 100, "enough truncated cases exercised");
}

// Plain double loop over the textbook definition.
double kappa_oracle(const Eigen::MatrixXd& m, bool quadratic)
{
    const auto k = m.rows();
    std::vector<double> row(static_cast<std::size_t>(k), 0.0), col(static_cast<std::size_t>(k), 0.0);
    double n = 0.0;
    for (Eigen::Index i = 0; i < k; ++i) {
        for (Eigen::Index j = 0; j < k; ++j) {
            row[static_cast<std::size_t>(i)] += m(i, j);
            col[static_cast<std::size_t>(j)] += m(i, j);
            n += m(i, j);
        }
    }
    double observed = 0.0, expected = 0.0;
    for (Eigen::Index i = 0; i < k; ++i) {
        for (Eigen::Index j = 0; j < k; ++j) {
            double w = std::abs(static_cast<double>(i - j)) / static_cast<double>(k - 1);
            if (quadratic) w *= w;
            observed += w * m(i, j) / n;
            expected += w * row[static_cast<std::size_t>(i)] * col[static_cast<std::size_t>(j)] / (n * n);
        }
    }
    return 1.0 - observed / expected;
}

void kappa_oracle_check(Outcome& o)
{
    std::mt19937_64 rng(404);
    std::uniform_int_distribution<int> count(0, 50);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        Eigen::MatrixXd m(5, 5);
        for (Eigen::Index i = 0; i < 5; ++i)
            for (Eigen::Index j = 0; j < 5; ++j) m(i, j) = count(rng);
        m(trial % 5, (trial + 1) % 5) += 1.0;
        worst = std::max(worst, std::abs(eval::weighted_kappa(m, eval::Weighting::linear) - kappa_oracle(m, false)));
        worst = std::max(worst, std::abs(eval::weighted_kappa(m, eval::Weighting::quadratic) - kappa_oracle(m, true)));
    }
    bool diagonal_exact = true;
    for (int trial = 0; trial < 100; ++trial) {
        Eigen::MatrixXd d = Eigen::MatrixXd::Zero(5, 5);
        for (Eigen::Index i = 0; i < 5; ++i) d(i, i) = count(rng) + 1;
        diagonal_exact = diagonal_exact && eval::weighted_kappa(d, eval::Weighting::linear) == 1.0 &&
            eval::weighted_kappa(d, eval::Weighting::quadratic) == 1.0;
    }
    o.detail << " 1000 matrices x 2 weightings, max |diff| " << worst << ", diagonal exact "
             << (diagonal_exact ? "yes" : "no");
    o.require(worst <= 1e-12, "|diff| <= 1e-12");
    o.require(diagonal_exact, "diagonal gives 1.0");
}

preprocess::TokenSequence random_sequence(std::size_t n_content, int vocab, std::mt19937_64& rng)
{
    preprocess::TokenSequence seq;
    seq.ids.push_back(preprocess::token_id(preprocess::SpecialToken::cls));
    for (std::size_t i = 0; i < n_content; ++i) {
        seq.ids.push_back(preprocess::kNumSpecialTokens +
                          static_cast<int>(rng() % static_cast<std::uint64_t>(vocab - preprocess::kNumSpecialTokens)));
    }
    seq.ids.push_back(preprocess::token_id(preprocess::SpecialToken::sep));
    seq.sections.push_back({preprocess::Section::impression, 1, n_content + 1});
    return seq;
}

void mlm_mechanics(Outcome& o)
{
    std::mt19937_64 gen(505);
    Rng rng(505);
    encoders::MlmConfig cfg;
    std::size_t sampled = 0, wrong_count = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto seq = random_sequence(1 + gen() % 510, 300, gen);
        const auto maskable = seq.ids.size() - 2;
        const auto masked = encoders::mask_tokens(seq, cfg, 300, rng);
        ++sampled;
        if (masked.targets.size() != static_cast<std::size_t>(std::lround(0.15 * static_cast<double>(maskable)))) {
            ++wrong_count;
        }
    }

    encoders::EncoderSpec spec;
    spec.vocab_size = 40;
    auto ckpt = encoders::make_random_checkpoint(spec, 17);
    auto& model = ckpt.encoder;
    const auto seq = random_sequence(6, 40, gen);
    encoders::MlmConfig gcfg;
    gcfg.mask_rate = 0.5;
    Rng mrng(1);
    const auto masked = encoders::mask_tokens(seq, gcfg, 40, mrng);
    const auto params = model.parameters();
    nn::zero_grads(params);
    encoders::mlm_sequence_loss(model, masked, 1.0, nullptr, true);
    std::vector<std::pair<nn::Parameter*, Eigen::Index>> candidates;
    for (auto* p : params) {
        for (Eigen::Index i = 0; i < p->grad.size(); ++i) {
            if (std::abs(p->grad.data()[i]) > 1e-4) candidates.emplace_back(p, i);
        }
    }
    std::mt19937_64 pick(505);
    std::shuffle(candidates.begin(), candidates.end(), pick);
    double worst = 0.0;
    std::set<std::string> tensors;
    const double h = 1e-5;
    const std::size_t n_checked = std::min<std::size_t>(10, candidates.size());
    for (std::size_t k = 0; k < n_checked; ++k) {
        auto [p, i] = candidates[k];
        tensors.insert(p->name);
        double& v = p->value.data()[i];
        const double old = v;
        v = old + h;
        const double up = encoders::mlm_sequence_loss(model, masked, 1.0, nullptr, false);
        v = old - h;
        const double down = encoders::mlm_sequence_loss(model, masked, 1.0, nullptr, false);
        v = old;
        const double numeric = (up - down) / (2 * h);
        const double analytic = p->grad.data()[i];
        worst = std::max(worst, std::abs(numeric - analytic) / std::max(std::abs(numeric), std::abs(analytic)));
    }
    o.detail << " " << sampled << " sequences, wrong mask counts " << wrong_count << "; " << n_checked
             << " parameters over " << tensors.size() << " tensors, max relative error " << worst;
    o.require(wrong_count == 0, "mask count = round(0.15 x maskable)");
    o.require(n_checked == 10, "10 parameters sampled");
    o.require(worst < 1e-4, "relative error < 1e-4");
}

void split_protocol(Outcome& o)
{
    std::vector<std::string> ids;
    for (int i = 0; i < 1664; ++i) ids.push_back("EX" + std::to_string(10000 + i));
    const auto plans = eval::make_splits(ids, 7, eval::SplitFractions{}, 707);
    const auto again = eval::make_splits(ids, 7, eval::SplitFractions{}, 707);
    bool sizes = plans.size() == 7, disjoint = true, deterministic = true;
    for (std::size_t k = 0; k < plans.size(); ++k) {
        const auto& p = plans[k];
        sizes = sizes && p.train_ids.size() == 1331 && p.val_ids.size() == 166 && p.test_ids.size() == 167;
        std::set<std::string> all(p.train_ids.begin(), p.train_ids.end());
        all.insert(p.val_ids.begin(), p.val_ids.end());
        all.insert(p.test_ids.begin(), p.test_ids.end());
        disjoint = disjoint && all.size() == 1664 && std::set<std::string>(ids.begin(), ids.end()) == all;
        deterministic = deterministic && again[k].train_ids == p.train_ids && again[k].val_ids == p.val_ids &&
            again[k].test_ids == p.test_ids;
    }
    o.detail << " 7 plans of (1331, 166, 167): " << (sizes ? "yes" : "no") << ", disjoint and exhaustive: "
             << (disjoint ? "yes" : "no") << ", deterministic: " << (deterministic ? "yes" : "no");
    o.require(sizes && disjoint && deterministic, "split protocol");
}

void early_stopping(Outcome& o)
{
    classifiers::EarlyStopping stop(3);
    const std::vector<double> trace{0.9, 0.8, 0.82, 0.83, 0.84};
    int seen = 0;
    for (double l : trace) {
        stop.observe(l);
        ++seen;
        if (stop.should_stop()) break;
    }
    o.detail << " trace [0.9,0.8,0.82,0.83,0.84] stops after " << seen << " epochs, best epoch " << stop.best_epoch();
    o.require(seen == 5 && stop.best_epoch() == 2, "best epoch 2 on the trace");

    // A real run where validation labels disagree with training labels, so
    // validation loss rises once the model fits; the restored weights must
    // reproduce the best validation loss, not the last one.
    const std::vector<std::string> words{"quiet", "faint", "moderate", "bright", "intense"};
    std::vector<std::string> texts;
    for (const auto& w : words) texts.push_back("the uptake is " + w + " in the node");
    const auto vocab = preprocess::train_subword_vocab(texts, 80);
    std::vector<classifiers::Example> train, val;
    for (int copy = 0; copy < 4; ++copy) {
        for (int c = 1; c <= corpus::kNumClasses; ++c) {
            corpus::ReportDocument doc;
            doc.impression = texts[static_cast<std::size_t>(c - 1)];
            doc.findings = copy % 2 ? "stable appearance" : "";
            classifiers::Example ex;
            ex.exam_id = "T" + std::to_string(copy) + "_" + std::to_string(c);
            ex.sequence = preprocess::build_input(doc, vocab, 32);
            ex.label = copy < 2 ? c : c % corpus::kNumClasses + 1;
            (copy < 2 ? train : val).push_back(std::move(ex));
        }
    }
    encoders::EncoderSpec spec;
    spec.vocab_size = static_cast<int>(vocab.size());
    auto model = classifiers::Classifier::text_model(encoders::make_random_checkpoint(spec, 7), {32, 32}, 8);
    classifiers::TrainConfig cfg;
    cfg.max_epochs = 12;
    cfg.early_stop_patience = 3;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 4;
    cfg.seed = 12;
    const auto result = classifiers::train_classifier(model, train, val, cfg);
    const auto best = std::min_element(result.log.begin(), result.log.end(),
                                       [](const auto& a, const auto& b) { return a.val_loss < b.val_loss; });
    const double restored = classifiers::evaluate_loss(model, val).first;
    o.detail << "; toy run best epoch " << result.best_epoch << " of " << result.log.size() << ", restored loss "
             << restored << " vs best " << best->val_loss;
    o.require(result.best_epoch == best->epoch, "reported best epoch has the lowest val loss");
    o.require(result.best_epoch < static_cast<int>(result.log.size()), "best epoch precedes the last epoch");
    o.require(std::abs(restored - best->val_loss) <= 1e-5 * std::max(1.0, best->val_loss),
              "restored weights reproduce the best val loss");
}

void fusion_mechanics(Outcome& o)
{
    encoders::EncoderSpec spec;
    spec.vocab_size = 60;
    const auto enc = encoders::make_random_checkpoint(spec, 1);
    vision::VisionSpec vspec;
    vspec.input_size = 32;
    auto mm = classifiers::Classifier::multimodal_model(enc, vspec, {32, 32}, 4);
    const auto text_only = classifiers::Classifier::text_model(enc, {32, 32}, 4);
    const auto vision_only = classifiers::Classifier::vision_model(vspec, {32, 32}, 4);
    o.detail << " fusion width " << mm.feature_dim() << " = text " << text_only.feature_dim() << " + vision "
             << vision_only.feature_dim();
    o.require(mm.feature_dim() == text_only.feature_dim() + vision_only.feature_dim(), "fusion width is the sum");
    o.require(mm.head.spec().input_dim == mm.feature_dim(), "head input matches fusion width");

    auto cspec = corpus::CorpusSpec::defaults();
    cspec.n_exams = 4;
    cspec.seed = 909;
    std::vector<classifiers::Example> batch;
    std::mt19937_64 gen(909);
    for (const auto& r : corpus::generate_corpus(cspec)) {
        classifiers::Example ex;
        ex.exam_id = r.exam_id;
        ex.sequence = random_sequence(12, 60, gen);
        ex.image = vision::prepare_image(*r.image, vspec);
        ex.label = r.label->value();
        batch.push_back(std::move(ex));
    }
    const auto norms = mm.probe_gradients(batch);
    o.detail << "; gradient norms text " << norms.text << ", vision " << norms.vision << ", head " << norms.head;
    o.require(norms.text > 0.0 && norms.vision > 0.0, "nonzero gradients in both pathways");
}

struct BenchRun {
    fs::path dir;
    double seconds = -1.0; // negative when resumed
};

BenchRun run_bench(const fs::path& config, const fs::path& out, bool reuse)
{
    BenchRun run{out, -1.0};
    if (reuse && fs::exists(out / "manifest.json")) {
        pipeline::resume(out);
        return run;
    }
    auto cfg = pipeline::ExperimentConfig::load(config);
    cfg.output_dir = out;
    pipeline::RunOptions options;
    options.log = [](const std::string& line) { std::cerr << line << std::endl; };
    const auto t0 = Clock::now();
    pipeline::run_experiment(cfg, options);
    run.seconds = seconds_since(t0);
    return run;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance suite"};
    std::string work_dir = (fs::temp_directory_path() / "deauville_acceptance").string();
    std::string config = (fs::path(DV_SOURCE_DIR) / "configs" / "desk_bench.cfg").string();
    bool reuse = false;
    bool skip_bench = false;
    app.add_option("--work", work_dir, "Working directory for benchmark runs");
    app.add_option("--config", config, "Desk benchmark config");
    app.add_flag("--reuse", reuse, "Resume runs already present in the working directory");
    app.add_flag("--skip-bench", skip_bench, "Report the benchmark criteria as FAIL without running them");
    CLI11_PARSE(app, argc, argv);
    const fs::path work(work_dir);
    fs::create_directories(work);

    criterion(1, "extraction oracle", extraction_oracle);
    criterion(2, "max rule and exclusion", [&](Outcome& o) { max_rule_and_exclusion(o, work); });
    criterion(3, "truncation invariants", truncation_invariants);
    criterion(4, "kappa oracle", kappa_oracle_check);
    criterion(5, "MLM mechanics", mlm_mechanics);

    std::optional<BenchRun> a;
    std::string bench_error;
    if (!skip_bench) {
        try {
            a = run_bench(config, work / "run_a", reuse);
        } catch (const std::exception& e) {
            bench_error = e.what();
        }
    } else {
        bench_error = "benchmark skipped";
    }
    std::map<std::string, ArmResult> results;
    if (a) results = read_results(a->dir / "report" / "results.csv");

    criterion(6, "adaptation benefit", [&](Outcome& o) {
        o.require(a.has_value(), "benchmark run: " + bench_error);
        if (!a) return;
        const auto ppl = nlohmann::json::parse(io::read_text(a->dir / "encoders" / "perplexity.json"));
        const double generic = ppl.at("generic").get<double>();
        const double adapted = ppl.at("domain_adapted").get<double>();
        const auto& g = results.at("text_generic");
        const auto& d = results.at("text_adapted");
        int wins = 0;
        o.detail << " paired folds (generic/adapted):";
        for (std::size_t k = 0; k < g.fold_acc.size() && k < d.fold_acc.size(); ++k) {
            if (d.fold_acc[k] > g.fold_acc[k]) ++wins;
            char buf[48];
            std::snprintf(buf, sizeof buf, " %.3f/%.3f", g.fold_acc[k], d.fold_acc[k]);
            o.detail << buf;
        }
        const double drop = 1.0 - adapted / generic;
        o.detail << "; adapted wins " << wins << "/7, mean " << g.acc_mean << " vs " << d.acc_mean
                 << "; held-out perplexity " << generic << " -> " << adapted << " (drop " << drop << ")";
        if (a->seconds >= 0) {
            o.detail << "; run time " << a->seconds << " s";
        } else {
            o.detail << "; run time not measured (reused run)";
        }
        o.require(g.fold_acc.size() == 7 && d.fold_acc.size() == 7, "7 paired folds");
        o.require(wins >= 5, "adapted wins >= 5 of 7 folds");
        o.require(drop >= 0.2, "perplexity drop >= 20%");
        o.require(a->seconds < 1800.0, "run time < 30 min");
    });

    criterion(7, "split protocol", split_protocol);

    criterion(8, "classifier sanity", [&](Outcome& o) {
        early_stopping(o);
        o.require(a.has_value(), "benchmark run: " + bench_error);
        if (!a) return;
        const double baseline = 620.0 / 1664.0;
        double lowest = 1.0;
        for (const char* arm : {"text_generic", "text_adapted"}) {
            for (double acc : results.at(arm).fold_acc) lowest = std::min(lowest, acc);
        }
        o.detail << "; lowest text fold accuracy " << lowest << " vs majority baseline " << baseline;
        o.require(lowest > baseline, "text beats the majority baseline in every fold");
    });

    criterion(9, "multimodal checks", [&](Outcome& o) {
        fusion_mechanics(o);
        o.require(a.has_value(), "benchmark run: " + bench_error);
        if (!a) return;
        const double mm = results.at("multimodal").acc_mean;
        const double vis = results.at("vision").acc_mean;
        o.detail << "; multimodal mean " << mm << " vs vision " << vis;
        o.require(mm >= vis, "multimodal mean >= vision mean");
    });

    criterion(10, "end-to-end reproducibility", [&](Outcome& o) {
        o.require(a.has_value(), "benchmark run: " + bench_error);
        if (!a) return;
        const auto b = run_bench(config, work / "run_b", reuse);
        const auto csv_a = io::read_text(a->dir / "report" / "results.csv");
        const auto csv_b = io::read_text(b.dir / "report" / "results.csv");
        const auto svg = io::read_text(a->dir / "report" / "results_chart.svg");
        const auto cfg = pipeline::ExperimentConfig::load(config);
        std::size_t bars_ok = 0;
        for (const auto& arm : cfg.arms) {
            const auto it = results.find(arm.name);
            if (it == results.end()) continue;
            char needle[160];
            std::snprintf(needle, sizeof needle, "data-model=\"%s\" data-mean=\"%.6f\" data-sd=\"%.6f\"",
                          arm.name.c_str(), it->second.acc_mean, it->second.acc_sd);
            if (count_of(svg, needle) == 1) ++bars_ok;
        }
        const std::size_t bars = count_of(svg, "<g class=\"bar\"");
        const std::size_t error_bars = count_of(svg, "class=\"errorbar\"");
        o.detail << " results.csv " << (csv_a == csv_b ? "byte-identical" : "differs") << " across two runs ("
                 << csv_a.size() << " bytes, sha256 " << io::sha256_hex(csv_a).substr(0, 16) << "); chart bars "
                 << bars << ", error bars " << error_bars << ", arms " << cfg.arms.size() << " (matching "
                 << bars_ok << ")";
        o.require(csv_a == csv_b, "byte-identical results.csv");
        o.require(bars == cfg.arms.size() && error_bars == cfg.arms.size() && bars_ok == cfg.arms.size(),
                  "one bar with a mean+-SD error bar per arm");
    });

    std::cout << (g_failures == 0 ? "ALL PASS" : std::to_string(g_failures) + " criteria failed") << std::endl;
    return g_failures == 0 ? 0 : 1;
}
