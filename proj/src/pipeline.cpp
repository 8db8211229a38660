#include "deauville/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "deauville/error.hpp"
#include "deauville/io.hpp"
#include "deauville/rng.hpp"

namespace deauville::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kManifestFormat = "deauville-run/1";

template <typename T>
void read_key(const YAML::Node& node, const char* key, T& out)
{
    if (node && node[key]) {
        out = node[key].as<T>();
    }
}

fs::path resolve(const fs::path& base, const std::string& p)
{
    const fs::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
}

encoders::MlmConfig parse_mlm(const YAML::Node& node, encoders::MlmConfig cfg)
{
    read_key(node, "mask_rate", cfg.mask_rate);
    read_key(node, "epochs", cfg.epochs);
    read_key(node, "learning_rate", cfg.learning_rate);
    read_key(node, "batch_size", cfg.batch_size);
    read_key(node, "seed", cfg.seed);
    if (node && node["mask_action_split"]) {
        const auto split = node["mask_action_split"].as<std::vector<double>>();
        require(split.size() == 3, "mask_action_split needs three proportions");
        std::copy(split.begin(), split.end(), cfg.mask_action_split.begin());
    }
    return cfg;
}

vision::VisionSpec parse_vision(const YAML::Node& node)
{
    vision::VisionSpec v;
    if (!node) {
        return v;
    }
    if (node["kind"]) v.kind = vision::parse_kind(node["kind"].as<std::string>());
    read_key(node, "input_size", v.input_size);
    read_key(node, "crop_bottom", v.crop_bottom);
    read_key(node, "normalize_pixels", v.normalize_pixels);
    read_key(node, "hidden_size", v.hidden_size);
    read_key(node, "patch_size", v.patch_size);
    read_key(node, "n_layers", v.n_layers);
    read_key(node, "n_heads", v.n_heads);
    read_key(node, "ff_size", v.ff_size);
    read_key(node, "dropout", v.dropout);
    read_key(node, "channels1", v.channels1);
    read_key(node, "channels2", v.channels2);
    return v;
}

std::vector<ArmConfig> default_arms()
{
    using classifiers::ModelKind;
    using encoders::Stage;
    return {{"text_generic", ModelKind::text, Stage::generic_pretrained},
            {"text_adapted", ModelKind::text, Stage::domain_adapted},
            {"vision", ModelKind::vision, Stage::domain_adapted},
            {"multimodal", ModelKind::multimodal, Stage::domain_adapted}};
}

} // namespace

ExperimentConfig ExperimentConfig::parse(std::string_view yaml_text, const fs::path& base_dir)
{
    ExperimentConfig cfg;
    cfg.text = std::string(yaml_text);
    cfg.base_dir = base_dir;
    try {
        const YAML::Node root = YAML::Load(cfg.text);
        require(root.IsMap(), "experiment config must be a mapping");
        read_key(root, "seed", cfg.seed);
        cfg.output_dir = resolve(base_dir, root["output_dir"] ? root["output_dir"].as<std::string>() : "out");

        if (const YAML::Node corpus_node = root["corpus"]) {
            if (corpus_node["path"]) {
                cfg.corpus_path = resolve(base_dir, corpus_node["path"].as<std::string>());
            } else {
                cfg.corpus_spec = corpus::parse_corpus_spec(YAML::Dump(corpus_node));
            }
        }
        if (root["grammar"]) {
            cfg.grammar_path = resolve(base_dir, root["grammar"].as<std::string>());
        }

        if (const YAML::Node n = root["normalization"]) {
            if (n.IsScalar()) {
                const fs::path p = resolve(base_dir, n.as<std::string>());
                if (!fs::exists(p)) {
                    throw ValidationError("normalization config not found: " + p.string());
                }
                cfg.normalization = preprocess::NormalizationConfig::parse(io::read_text(p));
            } else {
                cfg.normalization = preprocess::NormalizationConfig::parse(YAML::Dump(n));
            }
        }
        if (const YAML::Node n = root["vocab"]) {
            read_key(n, "size", cfg.vocab_size);
            read_key(n, "generic_docs", cfg.generic_docs);
        }
        read_key(root, "input_limit", cfg.input_limit);
        if (const YAML::Node n = root["encoder"]) {
            read_key(n, "n_layers", cfg.encoder.n_layers);
            read_key(n, "n_heads", cfg.encoder.n_heads);
            read_key(n, "hidden_size", cfg.encoder.hidden_size);
            read_key(n, "ff_size", cfg.encoder.ff_size);
            read_key(n, "max_positions", cfg.encoder.max_positions);
            read_key(n, "dropout", cfg.encoder.dropout);
        }
        encoders::MlmConfig generic;
        generic.seed = derive_seed(cfg.seed, 4);
        cfg.generic_mlm = parse_mlm(root["generic_pretraining"], generic);
        encoders::MlmConfig domain;
        domain.seed = derive_seed(cfg.seed, 5);
        cfg.domain_mlm = parse_mlm(root["domain_adaptation"], domain);
        read_key(root, "perplexity_holdout", cfg.perplexity_holdout);
        cfg.vision = parse_vision(root["vision"]);
        if (const YAML::Node n = root["head"]) {
            if (n["hidden_dims"]) {
                const auto dims = n["hidden_dims"].as<std::vector<int>>();
                require(dims.size() == 2, "head hidden_dims needs two widths");
                cfg.head_hidden = {dims[0], dims[1]};
            }
        }
        for (auto kind : {classifiers::ModelKind::text, classifiers::ModelKind::vision,
                          classifiers::ModelKind::multimodal}) {
            classifiers::TrainConfig tc;
            tc.seed = derive_seed(cfg.seed, 7);
            const YAML::Node t = root["training"] ? root["training"][classifiers::model_kind_name(kind)] : YAML::Node();
            if (t) {
                YAML::Node copy = YAML::Clone(t);
                if (!copy["seed"]) {
                    copy["seed"] = tc.seed;
                }
                tc = classifiers::TrainConfig::parse(YAML::Dump(copy));
            }
            cfg.training[kind] = tc;
        }
        if (const YAML::Node arms = root["arms"]) {
            for (const auto& a : arms) {
                ArmConfig arm;
                arm.name = a["name"].as<std::string>();
                arm.kind = classifiers::parse_model_kind(a["kind"].as<std::string>());
                if (a["encoder"]) {
                    arm.encoder = encoders::parse_stage(a["encoder"].as<std::string>());
                }
                cfg.arms.push_back(arm);
            }
        } else {
            cfg.arms = default_arms();
        }
        cfg.split_seed = derive_seed(cfg.seed, 6);
        if (const YAML::Node e = root["evaluation"]) {
            read_key(e, "iterations", cfg.iterations);
            if (e["fractions"]) {
                const auto f = e["fractions"].as<std::vector<double>>();
                require(f.size() == 3, "evaluation fractions need three values");
                cfg.fractions = {f[0], f[1], f[2]};
            }
            if (e["weighting"]) cfg.weighting = eval::parse_weighting(e["weighting"].as<std::string>());
            read_key(e, "stratified", cfg.stratified);
            read_key(e, "seed", cfg.split_seed);
            if (e["expert_file"]) cfg.expert_file = resolve(base_dir, e["expert_file"].as<std::string>());
        }
        read_key(root, "workers", cfg.workers);
        if (const YAML::Node n = root["inputs"]) {
            for (const auto& item : n) {
                cfg.inputs[item.first.as<std::string>()] = resolve(base_dir, item.second.as<std::string>());
            }
        }
    } catch (const YAML::Exception& e) {
        throw ValidationError(std::string("experiment config error: ") + e.what());
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path)
{
    if (!fs::exists(path)) {
        throw ValidationError("experiment config not found: " + path.string());
    }
    return parse(io::read_text(path), fs::absolute(path).parent_path());
}

void ExperimentConfig::validate() const
{
    require(corpus_spec || corpus_path, "config needs a corpus section");
    require(!grammar_path.empty(), "config needs a grammar path");
    if (!fs::exists(grammar_path)) {
        throw ValidationError("grammar file not found: " + grammar_path.string());
    }
    extraction::PatternGrammar::load(grammar_path);
    if (corpus_path && !fs::exists(*corpus_path / "manifest.json")) {
        throw ValidationError("corpus directory not found: " + corpus_path->string());
    }
    if (corpus_spec) {
        corpus_spec->validate();
    }
    if (expert_file && !fs::exists(*expert_file)) {
        throw ValidationError("expert file not found: " + expert_file->string());
    }
    normalization.validate();
    require(vocab_size > preprocess::kNumSpecialTokens, "vocab size too small");
    require(input_limit >= 3, "input_limit must be at least 3");
    encoders::EncoderSpec probe = encoder;
    probe.vocab_size = static_cast<int>(vocab_size);
    probe.validate(input_limit);
    generic_mlm.validate();
    domain_mlm.validate();
    require(perplexity_holdout >= 0.0 && perplexity_holdout < 0.5, "perplexity_holdout must be in [0, 0.5)");
    require(head_hidden[0] > 0 && head_hidden[1] > 0, "head widths must be positive");
    require(!arms.empty(), "config needs at least one model arm");
    std::set<std::string> names;
    for (const auto& arm : arms) {
        require(!arm.name.empty() && arm.name.find_first_of(",/ ") == std::string::npos,
                "arm names must be non-empty without commas, slashes or spaces");
        require(names.insert(arm.name).second, "duplicate arm name: " + arm.name);
        require(arm.encoder == encoders::Stage::generic_pretrained || arm.encoder == encoders::Stage::domain_adapted,
                "arm encoder must be generic-pretrained or domain-adapted");
        if (arm.kind != classifiers::ModelKind::text) {
            vision.validate();
            require(!corpus_spec || corpus_spec->with_images, "vision arms need a corpus with images");
        }
        training.at(arm.kind).validate();
    }
    require(iterations >= 2, "evaluation needs at least two iterations");
    eval::split_sizes(10, fractions);
    require(workers >= 1, "workers must be at least 1");
}

std::string ExperimentConfig::hash() const
{
    return io::sha256_hex(text);
}

extraction::PatternGrammar ExperimentConfig::grammar() const
{
    return grammar_path.empty() ? extraction::PatternGrammar::defaults() : extraction::PatternGrammar::load(grammar_path);
}

const std::vector<std::string>& stage_names()
{
    static const std::vector<std::string> names{"corpus",      "extract",  "preprocess", "encoders",
                                                "classifiers", "evaluate", "report"};
    return names;
}

// ---------------------------------------------------------------- helpers

ExtractionOutput extract_corpus(std::span<const corpus::ExamRecord> records, const extraction::PatternGrammar& grammar)
{
    ExtractionOutput out;
    for (const auto& r : records) {
        const auto result = extraction::redact_report(r.report, grammar);
        const auto label = extraction::assign_exam_label(result.mentions);
        out.exam_ids.push_back(r.exam_id);
        out.redacted.push_back(result.report);
        out.labels.push_back(label ? std::optional<int>(label->value()) : std::nullopt);
        out.mention_counts.push_back(result.mentions.size());
    }
    return out;
}

void write_labels_csv(const fs::path& path, const ExtractionOutput& out)
{
    std::ostringstream csv;
    csv << "exam_id,label,n_mentions\n";
    for (std::size_t i = 0; i < out.exam_ids.size(); ++i) {
        csv << out.exam_ids[i] << "," << (out.labels[i] ? std::to_string(*out.labels[i]) : "") << ","
            << out.mention_counts[i] << "\n";
    }
    io::write_text(path, csv.str());
}

void write_redacted(const fs::path& path, const ExtractionOutput& out)
{
    std::ostringstream lines;
    for (std::size_t i = 0; i < out.exam_ids.size(); ++i) {
        const json row{{"exam_id", out.exam_ids[i]},
                       {"indication", out.redacted[i].indication},
                       {"findings", out.redacted[i].findings},
                       {"impression", out.redacted[i].impression}};
        lines << row.dump() << "\n";
    }
    io::write_text(path, lines.str());
}

ExtractionOutput read_redacted(const fs::path& redacted_path, const fs::path& labels_path)
{
    ExtractionOutput out;
    std::map<std::string, std::pair<std::optional<int>, std::size_t>> labels;
    bool header = true;
    for (const auto& line : io::read_lines(labels_path)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) continue;
        const auto f = io::split_csv_line(line);
        require(f.size() == 3, "malformed labels.csv row: " + line);
        labels[f[0]] = {f[1].empty() ? std::nullopt : std::optional<int>(std::stoi(f[1])), std::stoul(f[2])};
    }
    for (const auto& line : io::read_lines(redacted_path)) {
        if (line.empty()) continue;
        try {
            const json row = json::parse(line);
            const auto id = row.at("exam_id").get<std::string>();
            const auto it = labels.find(id);
            require(it != labels.end(), "exam " + id + " missing from labels.csv");
            out.exam_ids.push_back(id);
            out.redacted.push_back({row.at("indication").get<std::string>(), row.at("findings").get<std::string>(),
                                    row.at("impression").get<std::string>()});
            out.labels.push_back(it->second.first);
            out.mention_counts.push_back(it->second.second);
        } catch (const json::exception& e) {
            throw ValidationError(std::string("malformed redacted report line: ") + e.what());
        }
    }
    return out;
}

PreparedData prepare_data(const ExtractionOutput& extracted, const preprocess::NormalizationConfig& norm,
                          const std::optional<preprocess::Vocabulary>& vocab, std::size_t vocab_size,
                          std::span<const std::string> generic_text, std::size_t input_limit)
{
    std::vector<corpus::ReportDocument> docs;
    docs.reserve(extracted.redacted.size());
    for (const auto& d : extracted.redacted) {
        docs.push_back({preprocess::normalize(d.indication, norm), preprocess::normalize(d.findings, norm),
                        preprocess::normalize(d.impression, norm)});
    }
    PreparedData data;
    data.normalization = norm;
    if (vocab) {
        data.vocab = *vocab;
    } else {
        std::vector<std::string> texts;
        for (const auto& d : docs) {
            texts.push_back(d.impression + " " + d.findings);
        }
        for (const auto& g : generic_text) {
            texts.push_back(preprocess::normalize(g, norm));
        }
        data.vocab = preprocess::train_subword_vocab(texts, vocab_size);
    }
    for (std::size_t i = 0; i < docs.size(); ++i) {
        data.exam_ids.push_back(extracted.exam_ids[i]);
        data.sequences.push_back(preprocess::build_input(docs[i], data.vocab, input_limit));
        if (extracted.labels[i]) {
            data.labels[extracted.exam_ids[i]] = *extracted.labels[i];
        }
    }
    return data;
}

void save_prepared(const fs::path& dir, const PreparedData& data)
{
    fs::create_directories(dir);
    data.vocab.save(dir / "vocab.txt");
    io::write_text(dir / "normalization.yaml", data.normalization.to_yaml());
    std::ostringstream ids;
    std::ostringstream labels;
    labels << "exam_id,label\n";
    for (const auto& id : data.exam_ids) {
        ids << id << "\n";
        const auto it = data.labels.find(id);
        labels << id << "," << (it == data.labels.end() ? "" : std::to_string(it->second)) << "\n";
    }
    io::write_text(dir / "exam_ids.txt", ids.str());
    io::write_text(dir / "labels.csv", labels.str());
    preprocess::write_sequences(dir / "sequences.ids", dir / "sequences.sections", data.sequences);
}

PreparedData load_prepared(const fs::path& dir, std::size_t input_limit)
{
    if (!fs::exists(dir / "vocab.txt") || !fs::exists(dir / "sequences.ids")) {
        throw ValidationError("not a preprocess output directory: " + dir.string());
    }
    PreparedData data;
    data.vocab = preprocess::Vocabulary::load(dir / "vocab.txt");
    data.normalization = preprocess::NormalizationConfig::parse(io::read_text(dir / "normalization.yaml"));
    for (const auto& line : io::read_lines(dir / "exam_ids.txt")) {
        if (!line.empty()) data.exam_ids.push_back(line);
    }
    data.sequences = preprocess::read_sequences(dir / "sequences.ids", dir / "sequences.sections", input_limit);
    require(data.sequences.size() == data.exam_ids.size(), "sequence count differs from exam id count");
    data.labels = eval::read_labels_csv(dir / "labels.csv");
    return data;
}

std::vector<preprocess::TokenSequence> generic_sequences(std::span<const std::string> generic_text,
                                                         const preprocess::Vocabulary& vocab,
                                                         const preprocess::NormalizationConfig& norm,
                                                         std::size_t input_limit)
{
    std::vector<preprocess::TokenSequence> out;
    out.reserve(generic_text.size());
    for (const auto& text : generic_text) {
        out.push_back(preprocess::build_text_input(preprocess::normalize(text, norm), vocab, input_limit));
    }
    return out;
}

std::vector<classifiers::Example> make_examples(std::span<const std::string> ids, const PreparedData& data,
                                                const std::map<std::string, corpus::GrayscaleImage>* images,
                                                const std::optional<vision::VisionSpec>& vision_spec)
{
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < data.exam_ids.size(); ++i) {
        index[data.exam_ids[i]] = i;
    }
    std::vector<classifiers::Example> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        const auto it = index.find(id);
        require(it != index.end(), "unknown exam id: " + id);
        classifiers::Example ex;
        ex.exam_id = id;
        ex.sequence = data.sequences[it->second];
        const auto label = data.labels.find(id);
        ex.label = label == data.labels.end() ? 0 : label->second;
        if (vision_spec) {
            require(images != nullptr, "vision inputs need corpus images");
            const auto img = images->find(id);
            require(img != images->end(), "exam " + id + " has no image");
            ex.image = vision::prepare_image(img->second, *vision_spec);
        }
        out.push_back(std::move(ex));
    }
    return out;
}

std::string predictions_csv(std::span<const classifiers::Prediction> predictions, std::span<const int> truths)
{
    std::ostringstream out;
    out << "exam_id,p1,p2,p3,p4,p5,predicted";
    if (!truths.empty()) out << ",truth";
    out << "\n";
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const auto& p = predictions[i];
        out << p.exam_id;
        for (double v : p.probs) out << "," << io::format_double(v);
        out << "," << p.predicted;
        if (!truths.empty()) out << "," << truths[i];
        out << "\n";
    }
    return out.str();
}

// ---------------------------------------------------------------- runner

namespace {

template <typename F>
void parallel_for(std::size_t n, int workers, F&& body)
{
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const auto count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
    for (std::size_t t = 0; t < count; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    body(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

template <typename F>
void with_stage_context(const std::string& stage, F&& body)
{
    const std::string prefix = "stage '" + stage + "' failed: ";
    try {
        body();
    } catch (const UnrecoverableStateError& e) {
        throw UnrecoverableStateError(prefix + e.what());
    } catch (const DivergenceError& e) {
        throw DivergenceError(prefix + e.what());
    } catch (const ValidationError& e) {
        throw ValidationError(prefix + e.what());
    } catch (const IoError& e) {
        throw IoError(prefix + e.what());
    } catch (const Error& e) {
        throw Error(prefix + e.what());
    } catch (const std::exception& e) {
        throw Error(prefix + e.what());
    }
}

std::vector<std::string> files_under(const fs::path& root, const fs::path& dir)
{
    std::vector<std::string> out;
    if (!fs::exists(dir)) return out;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (entry.is_regular_file()) {
            out.push_back(fs::relative(entry.path(), root).generic_string());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::map<std::string, corpus::GrayscaleImage> image_map(const std::vector<corpus::ExamRecord>& records)
{
    std::map<std::string, corpus::GrayscaleImage> out;
    for (const auto& r : records) {
        if (r.image) out[r.exam_id] = *r.image;
    }
    return out;
}

std::string fold_dir_name(int iteration)
{
    return "fold_" + std::to_string(iteration);
}

class Runner {
public:
    Runner(ExperimentConfig cfg, fs::path out, RunOptions opts)
        : cfg_(std::move(cfg)), out_(std::move(out)), opts_(std::move(opts))
    {
    }

    void start_fresh()
    {
        fs::create_directories(out_);
        for (const auto& name : stage_names()) {
            fs::remove_all(out_ / name);
        }
        fs::remove(out_ / "manifest.json");
        io::write_text(out_ / "config.yaml", cfg_.text);
        manifest_ = json{{"format", kManifestFormat},
                         {"config_hash", cfg_.hash()},
                         {"config_file", "config.yaml"},
                         {"config_base_dir", fs::absolute(cfg_.base_dir).generic_string()},
                         {"seeds", seeds_json()},
                         {"stages", json::array()}};
        save_manifest();
    }

    void adopt_manifest(json manifest) { manifest_ = std::move(manifest); }

    bool is_completed(const std::string& stage) const
    {
        for (const auto& s : manifest_["stages"]) {
            if (s.value("name", "") == stage && s.value("status", "") == "completed") return true;
        }
        return false;
    }

    RunSummary run()
    {
        RunSummary summary;
        summary.output_dir = out_;
        for (const auto& stage : stage_names()) {
            if (is_completed(stage)) {
                summary.skipped.push_back(stage);
            } else {
                log("stage " + stage);
                with_stage_context(stage, [&] { run_stage(stage); });
                record(stage);
                summary.executed.push_back(stage);
            }
            if (opts_.stop_after && *opts_.stop_after == stage) {
                break;
            }
        }
        return summary;
    }

private:
    json seeds_json() const
    {
        return json{{"global", cfg_.seed},
                    {"corpus", cfg_.corpus_spec ? cfg_.corpus_spec->seed : 0},
                    {"generic_text", derive_seed(cfg_.seed, 1)},
                    {"perplexity_holdout", derive_seed(cfg_.seed, 2)},
                    {"encoder_init", derive_seed(cfg_.seed, 3)},
                    {"generic_mlm", cfg_.generic_mlm.seed},
                    {"domain_mlm", cfg_.domain_mlm.seed},
                    {"splits", cfg_.split_seed},
                    {"train_text", cfg_.training.at(classifiers::ModelKind::text).seed},
                    {"train_vision", cfg_.training.at(classifiers::ModelKind::vision).seed},
                    {"train_multimodal", cfg_.training.at(classifiers::ModelKind::multimodal).seed}};
    }

    void log(const std::string& msg) const
    {
        if (opts_.log) opts_.log(msg);
    }

    void save_manifest() const { io::write_text(out_ / "manifest.json", manifest_.dump(2) + "\n"); }

    void record(const std::string& stage)
    {
        json files = json::object();
        for (const auto& rel : files_under(out_, out_ / stage)) {
            files[rel] = io::sha256_file(out_ / rel);
        }
        manifest_["stages"].push_back(
            {{"name", stage}, {"status", "completed"}, {"config_hash", cfg_.hash()}, {"files", files}});
        save_manifest();
    }

    void run_stage(const std::string& stage)
    {
        fs::remove_all(out_ / stage);
        fs::create_directories(out_ / stage);
        if (stage == "corpus") stage_corpus();
        else if (stage == "extract") stage_extract();
        else if (stage == "preprocess") stage_preprocess();
        else if (stage == "encoders") stage_encoders();
        else if (stage == "classifiers") stage_classifiers();
        else if (stage == "evaluate") stage_evaluate();
        else if (stage == "report") stage_report();
    }

    void stage_corpus()
    {
        std::vector<corpus::ExamRecord> records;
        std::optional<corpus::CorpusSpec> spec = cfg_.corpus_spec;
        if (cfg_.corpus_spec) {
            records = corpus::generate_corpus(*cfg_.corpus_spec);
        } else {
            records = corpus::load_corpus(*cfg_.corpus_path, true);
            spec = corpus::read_corpus_manifest(*cfg_.corpus_path).spec;
        }
        corpus::save_corpus(out_ / "corpus", records, spec);
        log("  " + std::to_string(records.size()) + " exams");
    }

    void stage_extract()
    {
        const auto records = corpus::load_corpus(out_ / "corpus", true);
        const auto info = corpus::read_corpus_manifest(out_ / "corpus");
        const auto grammar = cfg_.grammar();
        const ExtractionOutput ex = extract_corpus(records, grammar);
        write_labels_csv(out_ / "extract" / "labels.csv", ex);
        write_redacted(out_ / "extract" / "redacted.jsonl", ex);
        io::write_text(out_ / "extract" / "grammar.yaml", io::read_text(cfg_.grammar_path));
        std::size_t included = 0;
        std::size_t agree = 0;
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (ex.labels[i]) {
                ++included;
                if (records[i].label && records[i].label->value() == *ex.labels[i]) ++agree;
            }
        }
        const json summary{{"total", records.size()},
                           {"included", included},
                           {"excluded", records.size() - included},
                           {"manifest_labeled", info.labeled},
                           {"manifest_unlabeled", info.unlabeled},
                           {"reconciled", included == info.labeled && records.size() - included == info.unlabeled},
                           {"label_agreement", included ? static_cast<double>(agree) / included : 0.0}};
        io::write_text(out_ / "extract" / "summary.json", summary.dump(2) + "\n");
        log("  included " + std::to_string(included) + " of " + std::to_string(records.size()));
    }

    void stage_preprocess()
    {
        const auto ex = read_redacted(out_ / "extract" / "redacted.jsonl", out_ / "extract" / "labels.csv");
        const auto generic = corpus::generate_generic_text(cfg_.generic_docs, derive_seed(cfg_.seed, 1));
        const PreparedData data =
            prepare_data(ex, cfg_.normalization, std::nullopt, cfg_.vocab_size, generic, cfg_.input_limit);
        const fs::path dir = out_ / "preprocess";
        save_prepared(dir, data);
        const auto gseqs = generic_sequences(generic, data.vocab, cfg_.normalization, cfg_.input_limit);
        preprocess::write_sequences(dir / "generic.ids", dir / "generic.sections", gseqs);

        std::vector<std::size_t> order(data.exam_ids.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg_.seed, 2));
        rng.shuffle(order);
        const auto n_held = static_cast<std::size_t>(cfg_.perplexity_holdout * static_cast<double>(order.size()));
        std::vector<std::size_t> held(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_held));
        std::sort(held.begin(), held.end());
        std::ostringstream out;
        for (std::size_t i : held) out << data.exam_ids[i] << "\n";
        io::write_text(dir / "heldout.txt", out.str());
        log("  vocabulary " + std::to_string(data.vocab.size()) + " tokens");
    }

    void stage_encoders()
    {
        const fs::path pre = out_ / "preprocess";
        const PreparedData data = load_prepared(pre, cfg_.input_limit);
        const auto gseqs = preprocess::read_sequences(pre / "generic.ids", pre / "generic.sections", cfg_.input_limit);
        std::set<std::string> held;
        for (const auto& line : io::read_lines(pre / "heldout.txt")) {
            if (!line.empty()) held.insert(line);
        }
        std::vector<preprocess::TokenSequence> train_seqs;
        std::vector<preprocess::TokenSequence> held_seqs;
        for (std::size_t i = 0; i < data.exam_ids.size(); ++i) {
            (held.count(data.exam_ids[i]) ? held_seqs : train_seqs).push_back(data.sequences[i]);
        }
        encoders::EncoderSpec spec = cfg_.encoder;
        spec.vocab_size = static_cast<int>(data.vocab.size());
        spec.validate(cfg_.input_limit);

        log("  generic pretraining on " + std::to_string(gseqs.size()) + " documents");
        const auto generic = encoders::generic_pretrain(spec, gseqs, cfg_.generic_mlm, derive_seed(cfg_.seed, 3));
        encoders::save_checkpoint(out_ / "encoders" / "generic", generic);
        log("  domain adaptation on " + std::to_string(train_seqs.size()) + " reports");
        const auto adapted = encoders::domain_adapt(generic, train_seqs, cfg_.domain_mlm);
        encoders::save_checkpoint(out_ / "encoders" / "domain_adapted", adapted);

        std::ostringstream log_csv;
        log_csv << "stage,epoch,loss\n";
        for (std::size_t e = 0; e < generic.epoch_losses.size(); ++e)
            log_csv << "generic-pretrained," << e + 1 << "," << io::format_double(generic.epoch_losses[e]) << "\n";
        for (std::size_t e = 0; e < adapted.epoch_losses.size(); ++e)
            log_csv << "domain-adapted," << e + 1 << "," << io::format_double(adapted.epoch_losses[e]) << "\n";
        io::write_text(out_ / "encoders" / "mlm_log.csv", log_csv.str());

        if (!held_seqs.empty()) {
            const std::uint64_t s = derive_seed(cfg_.seed, 8);
            const double ppl_generic = encoders::masked_perplexity(generic, held_seqs, cfg_.domain_mlm.mask_rate, s);
            const double ppl_adapted = encoders::masked_perplexity(adapted, held_seqs, cfg_.domain_mlm.mask_rate, s);
            const json ppl{{"heldout_reports", held_seqs.size()},
                           {"generic", ppl_generic},
                           {"domain_adapted", ppl_adapted},
                           {"relative_drop", 1.0 - ppl_adapted / ppl_generic}};
            io::write_text(out_ / "encoders" / "perplexity.json", ppl.dump(2) + "\n");
            log("  held-out perplexity " + io::format_double(ppl_generic, 2) + " -> "
                + io::format_double(ppl_adapted, 2));
        }
    }

    void stage_classifiers()
    {
        const fs::path pre = out_ / "preprocess";
        const PreparedData data = load_prepared(pre, cfg_.input_limit);
        std::vector<std::string> labeled;
        std::vector<int> labels;
        for (const auto& id : data.exam_ids) {
            const auto it = data.labels.find(id);
            if (it != data.labels.end()) {
                labeled.push_back(id);
                labels.push_back(it->second);
            }
        }
        const auto plans = eval::make_splits(labeled, cfg_.iterations, cfg_.fractions, cfg_.split_seed,
                                             cfg_.stratified ? std::span<const int>(labels) : std::span<const int>());
        for (const auto& plan : plans) {
            io::write_text(out_ / "classifiers" / "splits" / ("split_" + std::to_string(plan.iteration) + ".csv"),
                           eval::splits_to_csv(plan));
        }

        const bool need_images = std::any_of(cfg_.arms.begin(), cfg_.arms.end(),
                                             [](const ArmConfig& a) { return a.kind != classifiers::ModelKind::text; });
        std::map<std::string, corpus::GrayscaleImage> images;
        if (need_images) {
            images = image_map(corpus::load_corpus(out_ / "corpus", false));
        }
        const auto with_images = make_examples(labeled, data, need_images ? &images : nullptr,
                                               need_images ? std::optional(cfg_.vision) : std::nullopt);
        std::map<std::string, std::size_t> position;
        for (std::size_t i = 0; i < labeled.size(); ++i) position[labeled[i]] = i;
        auto subset = [&](const std::vector<std::string>& ids) {
            std::vector<classifiers::Example> out;
            for (const auto& id : ids) out.push_back(with_images[position.at(id)]);
            return out;
        };

        const auto generic = encoders::load_checkpoint(out_ / "encoders" / "generic");
        const auto adapted = encoders::load_checkpoint(out_ / "encoders" / "domain_adapted");
        const std::string grammar_text = io::read_text(out_ / "extract" / "grammar.yaml");

        struct Job {
            const ArmConfig* arm;
            const eval::SplitPlan* plan;
        };
        std::vector<Job> jobs;
        for (const auto& arm : cfg_.arms) {
            for (const auto& plan : plans) jobs.push_back({&arm, &plan});
        }
        parallel_for(jobs.size(), cfg_.workers, [&](std::size_t j) {
            const ArmConfig& arm = *jobs[j].arm;
            const eval::SplitPlan& plan = *jobs[j].plan;
            const auto fold = static_cast<std::uint64_t>(plan.iteration);
            const std::uint64_t model_seed = derive_seed(cfg_.seed, 100 + fold);
            const auto& ckpt = arm.encoder == encoders::Stage::generic_pretrained ? generic : adapted;
            classifiers::Classifier model;
            switch (arm.kind) {
            case classifiers::ModelKind::text:
                model = classifiers::Classifier::text_model(ckpt, cfg_.head_hidden, model_seed);
                break;
            case classifiers::ModelKind::vision:
                model = classifiers::Classifier::vision_model(cfg_.vision, cfg_.head_hidden, model_seed);
                break;
            case classifiers::ModelKind::multimodal:
                model = classifiers::Classifier::multimodal_model(ckpt, cfg_.vision, cfg_.head_hidden, model_seed);
                break;
            }
            classifiers::TrainConfig tc = cfg_.training.at(arm.kind);
            tc.seed = derive_seed(tc.seed, fold);
            const auto train = subset(plan.train_ids);
            const auto val = subset(plan.val_ids);
            const auto test = subset(plan.test_ids);
            const auto result = classifiers::train_classifier(model, train, val, tc);
            std::vector<classifiers::Prediction> preds;
            std::vector<int> truths;
            for (const auto& ex : test) {
                preds.push_back(model.predict(ex));
                truths.push_back(ex.label);
            }
            const fs::path dir = out_ / "classifiers" / arm.name / fold_dir_name(plan.iteration);
            classifiers::BundleAssets assets;
            assets.vocab = data.vocab;
            assets.grammar_yaml = grammar_text;
            assets.normalization = data.normalization;
            assets.input_limit = cfg_.input_limit;
            classifiers::save_bundle(dir, model, result, assets);
            io::write_text(dir / "predictions.csv", predictions_csv(preds, truths));
            log("  " + arm.name + " fold " + std::to_string(plan.iteration) + ": test accuracy "
                + io::format_double(eval::make_fold_result(plan.iteration, preds, truths, cfg_.weighting).accuracy, 4)
                + " (best epoch " + std::to_string(result.best_epoch) + ")");
        });
    }

    std::vector<eval::MetricSummary> summaries_from_predictions() const
    {
        std::vector<eval::MetricSummary> out;
        for (const auto& arm : cfg_.arms) {
            std::vector<eval::FoldResult> folds;
            for (int it = 1; it <= cfg_.iterations; ++it) {
                const fs::path file = out_ / "classifiers" / arm.name / fold_dir_name(it) / "predictions.csv";
                std::vector<classifiers::Prediction> preds;
                std::vector<int> truths;
                bool header = true;
                for (const auto& line : io::read_lines(file)) {
                    if (header) {
                        header = false;
                        continue;
                    }
                    if (line.empty()) continue;
                    const auto f = io::split_csv_line(line);
                    require(f.size() == 8, "malformed predictions row: " + line);
                    classifiers::Prediction p;
                    p.exam_id = f[0];
                    for (int k = 0; k < 5; ++k) p.probs[static_cast<std::size_t>(k)] = std::stod(f[1 + k]);
                    p.predicted = std::stoi(f[6]);
                    preds.push_back(p);
                    truths.push_back(std::stoi(f[7]));
                }
                folds.push_back(eval::make_fold_result(it, std::move(preds), std::move(truths), cfg_.weighting));
            }
            out.push_back(eval::aggregate(arm.name, std::move(folds), cfg_.weighting));
        }
        return out;
    }

    void stage_evaluate()
    {
        const auto summaries = summaries_from_predictions();
        json arms = json::array();
        for (const auto& s : summaries) {
            json folds = json::array();
            for (const auto& f : s.folds) {
                json confusion = json::array();
                for (int i = 0; i < eval::kNumClasses; ++i) {
                    json row = json::array();
                    for (int j = 0; j < eval::kNumClasses; ++j) row.push_back(f.confusion(i, j));
                    confusion.push_back(row);
                }
                folds.push_back({{"iteration", f.iteration},
                                 {"accuracy", f.accuracy},
                                 {"kappa", f.kappa},
                                 {"n_test", f.truths.size()},
                                 {"confusion", confusion}});
            }
            arms.push_back({{"model", s.model_name},
                            {"weighting", eval::weighting_name(s.weighting)},
                            {"acc_mean", s.acc_mean},
                            {"acc_sd", s.acc_sd},
                            {"kappa_mean", s.kappa_mean},
                            {"kappa_sd", s.kappa_sd},
                            {"folds", folds}});
            log("  " + s.model_name + ": " + io::format_double(100 * s.acc_mean, 1) + " +- "
                + io::format_double(100 * s.acc_sd, 1) + "%, kappa " + io::format_double(s.kappa_mean, 3));
        }
        io::write_text(out_ / "evaluate" / "metrics.json", json{{"arms", arms}}.dump(2) + "\n");
        if (cfg_.expert_file) {
            const auto truths = eval::read_labels_csv(out_ / "extract" / "labels.csv");
            const auto expert = eval::read_expert_csv(*cfg_.expert_file);
            const auto summary = eval::compare_expert(expert, truths, cfg_.weighting);
            const json j{{"n_cases", summary.n_cases},
                         {"accuracy", summary.accuracy},
                         {"kappa", summary.kappa},
                         {"weighting", eval::weighting_name(summary.weighting)}};
            io::write_text(out_ / "evaluate" / "expert.json", j.dump(2) + "\n");
        }
    }

    void stage_report()
    {
        json metrics;
        try {
            metrics = json::parse(io::read_text(out_ / "evaluate" / "metrics.json"));
        } catch (const json::exception& e) {
            throw ValidationError(std::string("malformed metrics.json: ") + e.what());
        }
        std::vector<eval::MetricSummary> summaries;
        for (const auto& a : metrics.at("arms")) {
            eval::MetricSummary s;
            s.model_name = a.at("model").get<std::string>();
            s.weighting = eval::parse_weighting(a.at("weighting").get<std::string>());
            s.acc_mean = a.at("acc_mean").get<double>();
            s.acc_sd = a.at("acc_sd").get<double>();
            s.kappa_mean = a.at("kappa_mean").get<double>();
            s.kappa_sd = a.at("kappa_sd").get<double>();
            for (const auto& f : a.at("folds")) {
                eval::FoldResult fold;
                fold.iteration = f.at("iteration").get<int>();
                fold.accuracy = f.at("accuracy").get<double>();
                fold.kappa = f.at("kappa").get<double>();
                for (int i = 0; i < eval::kNumClasses; ++i)
                    for (int j = 0; j < eval::kNumClasses; ++j)
                        fold.confusion(i, j) = f.at("confusion")[i][j].get<std::int64_t>();
                s.folds.push_back(fold);
            }
            summaries.push_back(std::move(s));
        }
        eval::write_report(out_ / "report", summaries);
        if (fs::exists(out_ / "encoders" / "perplexity.json")) {
            const json ppl = json::parse(io::read_text(out_ / "encoders" / "perplexity.json"));
            std::ostringstream csv;
            csv << "encoder,heldout_perplexity\n";
            csv << "generic-pretrained," << io::format_double(ppl.at("generic").get<double>()) << "\n";
            csv << "domain-adapted," << io::format_double(ppl.at("domain_adapted").get<double>()) << "\n";
            io::write_text(out_ / "report" / "perplexity.csv", csv.str());
        }
        if (fs::exists(out_ / "evaluate" / "expert.json")) {
            const json ex = json::parse(io::read_text(out_ / "evaluate" / "expert.json"));
            std::ostringstream csv;
            csv << "method,weighting,kappa,accuracy,n_cases\n";
            csv << "human_expert," << ex.at("weighting").get<std::string>() << ","
                << io::format_double(ex.at("kappa").get<double>()) << ","
                << io::format_double(ex.at("accuracy").get<double>()) << "," << ex.at("n_cases").get<std::size_t>()
                << "\n";
            io::write_text(out_ / "report" / "expert.csv", csv.str());
        }
    }

    ExperimentConfig cfg_;
    fs::path out_;
    RunOptions opts_;
    json manifest_;
};

} // namespace

RunSummary run_experiment(const ExperimentConfig& config, const RunOptions& options)
{
    config.validate();
    if (options.stop_after) {
        const auto& names = stage_names();
        require(std::find(names.begin(), names.end(), *options.stop_after) != names.end(),
                "unknown stage: " + *options.stop_after);
    }
    Runner runner(config, config.output_dir, options);
    runner.start_fresh();
    return runner.run();
}

RunSummary resume(const fs::path& output_dir, const RunOptions& options)
{
    const fs::path manifest_path = output_dir / "manifest.json";
    if (!fs::exists(manifest_path)) {
        throw UnrecoverableStateError("no run manifest in " + output_dir.string());
    }
    json manifest;
    try {
        manifest = json::parse(io::read_text(manifest_path));
        if (manifest.at("format").get<std::string>() != kManifestFormat) {
            throw UnrecoverableStateError("unsupported manifest format");
        }
        (void)manifest.at("stages").get<json::array_t>();
    } catch (const json::exception& e) {
        throw UnrecoverableStateError(std::string("corrupted run manifest: ") + e.what());
    }
    const fs::path config_path = output_dir / manifest.value("config_file", "config.yaml");
    if (!fs::exists(config_path)) {
        throw UnrecoverableStateError("run config missing: " + config_path.string());
    }
    const std::string config_text = io::read_text(config_path);
    if (io::sha256_hex(config_text) != manifest.value("config_hash", "")) {
        throw UnrecoverableStateError("run config does not match the manifest hash");
    }
    ExperimentConfig cfg;
    try {
        cfg = ExperimentConfig::parse(config_text, manifest.at("config_base_dir").get<std::string>());
    } catch (const json::exception& e) {
        throw UnrecoverableStateError(std::string("corrupted run manifest: ") + e.what());
    }
    cfg.output_dir = output_dir;
    const auto& names = stage_names();
    std::size_t expected = 0;
    for (const auto& stage : manifest["stages"]) {
        const std::string name = stage.value("name", "");
        if (expected >= names.size() || name != names[expected]) {
            throw UnrecoverableStateError("manifest stages out of order at '" + name + "'");
        }
        ++expected;
        if (!stage.contains("files") || !stage["files"].is_object()) {
            throw UnrecoverableStateError("manifest entry for stage '" + name + "' has no file list");
        }
        for (const auto& [rel, sha] : stage["files"].items()) {
            const fs::path file = output_dir / rel;
            if (!fs::exists(file)) {
                throw UnrecoverableStateError("stage '" + name + "' artifact missing: " + rel);
            }
            if (io::sha256_file(file) != sha.get<std::string>()) {
                throw UnrecoverableStateError("checksum mismatch for " + rel + " (stage '" + name + "')");
            }
        }
    }
    if (expected < names.size()) {
        cfg.validate();
    }
    Runner runner(cfg, output_dir, options);
    runner.adopt_manifest(std::move(manifest));
    return runner.run();
}

} // namespace deauville::pipeline
