#include "deauville/preprocess.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <regex>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "deauville/error.hpp"
#include "deauville/io.hpp"

namespace deauville::preprocess {

namespace {

bool is_alnum(char c)
{
    return std::isalnum(static_cast<unsigned char>(c)) != 0 || static_cast<unsigned char>(c) >= 0x80;
}

bool is_digit(char c)
{
    return c >= '0' && c <= '9';
}

std::string collapse_whitespace(std::string_view text)
{
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c)) != 0) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(c);
    }
    return out;
}

bool contains_word(std::string_view haystack, std::string_view needle)
{
    std::size_t pos = 0;
    while ((pos = haystack.find(needle, pos)) != std::string_view::npos) {
        const bool left = pos == 0 || !is_alnum(haystack[pos - 1]);
        const std::size_t end = pos + needle.size();
        const bool right = end == haystack.size() || !is_alnum(haystack[end]);
        if (left && right) {
            return true;
        }
        ++pos;
    }
    return false;
}

std::string replace_synonyms(std::string_view text, const std::vector<std::pair<std::string, std::string>>& map)
{
    std::vector<const std::pair<std::string, std::string>*> ordered;
    for (const auto& entry : map) {
        ordered.push_back(&entry);
    }
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](auto* a, auto* b) { return a->first.size() > b->first.size(); });
    std::string out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        const bool boundary = i == 0 || !is_alnum(text[i - 1]);
        bool replaced = false;
        if (boundary) {
            for (const auto* entry : ordered) {
                const std::string& variant = entry->first;
                if (text.compare(i, variant.size(), variant) != 0) {
                    continue;
                }
                const std::size_t end = i + variant.size();
                if (end < text.size() && is_alnum(text[end])) {
                    continue;
                }
                out += entry->second;
                i = end;
                replaced = true;
                break;
            }
        }
        if (!replaced) {
            out.push_back(text[i]);
            ++i;
        }
    }
    return out;
}

} // namespace

NormalizationConfig NormalizationConfig::defaults()
{
    NormalizationConfig config;
    config.synonym_map = {
        {"standardized uptake value", "suvmax"},
        {"maximum suv", "suvmax"},
        {"suv max", "suvmax"},
        {"suv", "suvmax"},
        {"fdg avid", "hypermetabolic"},
        {"mediastinal blood pool", "mediastinum"},
        {"blood pool", "mediastinum"},
        {"mediastinal reference", "mediastinum"},
        {"hepatic", "liver"},
    };
    return config;
}

NormalizationConfig NormalizationConfig::parse(std::string_view yaml_text)
{
    NormalizationConfig config = defaults();
    try {
        const YAML::Node root = YAML::Load(std::string(yaml_text));
        if (root["lowercase"]) config.lowercase = root["lowercase"].as<bool>();
        if (root["strip_punctuation"]) config.strip_punctuation = root["strip_punctuation"].as<bool>();
        if (root["strip_dates"]) config.strip_dates = root["strip_dates"].as<bool>();
        if (root["round_numbers_to"]) config.round_numbers_to = root["round_numbers_to"].as<int>();
        if (root["replace_synonyms"]) config.replace_synonyms = root["replace_synonyms"].as<bool>();
        if (root["synonyms"]) {
            config.synonym_map.clear();
            for (const auto& item : root["synonyms"]) {
                config.synonym_map.emplace_back(item["variant"].as<std::string>(), item["canonical"].as<std::string>());
            }
        }
    } catch (const YAML::Exception& e) {
        throw ValidationError(std::string("normalization config error: ") + e.what());
    }
    config.validate();
    return config;
}

std::string NormalizationConfig::to_yaml() const
{
    YAML::Emitter out;
    out << YAML::BeginMap;
    out << YAML::Key << "lowercase" << YAML::Value << lowercase;
    out << YAML::Key << "strip_punctuation" << YAML::Value << strip_punctuation;
    out << YAML::Key << "strip_dates" << YAML::Value << strip_dates;
    out << YAML::Key << "round_numbers_to" << YAML::Value << round_numbers_to;
    out << YAML::Key << "replace_synonyms" << YAML::Value << replace_synonyms;
    out << YAML::Key << "synonyms" << YAML::Value << YAML::BeginSeq;
    for (const auto& [variant, canonical] : synonym_map) {
        out << YAML::Flow << YAML::BeginMap << YAML::Key << "variant" << YAML::Value << variant << YAML::Key
            << "canonical" << YAML::Value << canonical << YAML::EndMap;
    }
    out << YAML::EndSeq << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

void NormalizationConfig::validate() const
{
    std::set<std::string> variants;
    for (const auto& [variant, canonical] : synonym_map) {
        require(!variant.empty(), "synonym variant must not be empty");
        variants.insert(variant);
    }
    for (const auto& [variant, canonical] : synonym_map) {
        for (const auto& v : variants) {
            require(!contains_word(canonical, v),
                    "synonym map is cyclic: canonical '" + canonical + "' contains variant '" + v + "'");
        }
    }
}

std::string round_decimal_numbers(std::string_view text, int places)
{
    if (places < 0) {
        return std::string(text);
    }
    std::string out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        const bool starts_number = is_digit(text[i]) && (i == 0 || !is_alnum(text[i - 1]));
        if (!starts_number) {
            out.push_back(text[i]);
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < text.size() && is_digit(text[j])) {
            ++j;
        }
        if (j + 1 >= text.size() || text[j] != '.' || !is_digit(text[j + 1])) {
            out.append(text.substr(i, j - i));
            i = j;
            continue;
        }
        std::size_t k = j + 1;
        while (k < text.size() && is_digit(text[k])) {
            ++k;
        }
        const std::string whole(text.substr(i, j - i));
        const std::string frac(text.substr(j + 1, k - j - 1));
        if (frac.size() <= static_cast<std::size_t>(places)) {
            out.append(text.substr(i, k - i));
            i = k;
            continue;
        }
        std::string digits = whole + frac.substr(0, static_cast<std::size_t>(places));
        if (frac[static_cast<std::size_t>(places)] >= '5') {
            std::size_t pos = digits.size();
            bool carry = true;
            while (carry && pos > 0) {
                --pos;
                if (digits[pos] == '9') {
                    digits[pos] = '0';
                } else {
                    ++digits[pos];
                    carry = false;
                }
            }
            if (carry) {
                digits.insert(digits.begin(), '1');
            }
        }
        const std::size_t int_len = digits.size() - static_cast<std::size_t>(places);
        out.append(digits.substr(0, int_len));
        if (places > 0) {
            out.push_back('.');
            out.append(digits.substr(int_len));
        }
        i = k;
    }
    return out;
}

std::string strip_dates(std::string_view text)
{
    static const std::string months =
        "(january|february|march|april|may|june|july|august|september|october|november|december|"
        "jan|feb|mar|apr|jun|jul|aug|sep|sept|oct|nov|dec)";
    static const std::vector<std::regex> patterns{
        std::regex(R"(\b\d{1,2}/\d{1,2}/(\d{4}|\d{2})\b)"),
        std::regex(R"(\b\d{4}-\d{1,2}-\d{1,2}\b)"),
        std::regex(R"(\b\d{1,2}(st|nd|rd|th)? )" + months + R"(\.?,? \d{4}\b)", std::regex::icase),
        std::regex(R"(\b)" + months + R"(\.? \d{1,2}(st|nd|rd|th)?,? \d{4}\b)", std::regex::icase),
        std::regex(R"(\b)" + months + R"(\.?,? \d{4}\b)", std::regex::icase),
    };
    std::string out(text);
    for (const auto& pattern : patterns) {
        out = std::regex_replace(out, pattern, " ");
    }
    return out;
}

std::string normalize(std::string_view text, const NormalizationConfig& config)
{
    std::string out(text);
    if (config.lowercase) {
        for (char& c : out) {
            c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
    }
    if (config.strip_dates) {
        out = strip_dates(out);
    }
    out = round_decimal_numbers(out, config.round_numbers_to);
    if (config.strip_punctuation) {
        std::string cleaned;
        cleaned.reserve(out.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
            const char c = out[i];
            const bool decimal_point =
                c == '.' && i > 0 && i + 1 < out.size() && is_digit(out[i - 1]) && is_digit(out[i + 1]);
            if (std::ispunct(static_cast<unsigned char>(c)) != 0 && !decimal_point) {
                cleaned.push_back(' ');
            } else {
                cleaned.push_back(c);
            }
        }
        out = std::move(cleaned);
        if (config.strip_dates) {
            // Spelled dates may only become contiguous once separators are gone.
            out = strip_dates(out);
        }
    }
    out = collapse_whitespace(out);
    if (config.replace_synonyms && !config.synonym_map.empty()) {
        out = collapse_whitespace(replace_synonyms(out, config.synonym_map));
    }
    return out;
}

corpus::ReportDocument prepare_report(const corpus::ReportDocument& report, const extraction::PatternGrammar& grammar,
                                      const NormalizationConfig& config)
{
    const auto redacted = extraction::redact_report(report, grammar);
    return {normalize(redacted.report.indication, config), normalize(redacted.report.findings, config),
            normalize(redacted.report.impression, config)};
}

// ---------------------------------------------------------------- vocabulary

namespace {

constexpr std::array<const char*, kNumSpecialTokens> kSpecialNames{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

std::vector<std::string> split_words(std::string_view text)
{
    std::vector<std::string> words;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) {
        words.push_back(word);
    }
    return words;
}

std::vector<std::string> initial_symbols(const std::string& word)
{
    std::vector<std::string> symbols;
    symbols.reserve(word.size());
    for (char c : word) {
        symbols.emplace_back(1, c);
    }
    symbols.back() += Vocabulary::kEndOfWord;
    return symbols;
}

void merge_pair(std::vector<std::string>& symbols, const std::string& left, const std::string& right)
{
    std::vector<std::string> merged;
    merged.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size(); ++i) {
        if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
            merged.push_back(left + right);
            ++i;
        } else {
            merged.push_back(symbols[i]);
        }
    }
    symbols = std::move(merged);
}

} // namespace

Vocabulary::Vocabulary()
{
    for (const char* name : kSpecialNames) {
        add_token(name);
    }
}

int Vocabulary::add_token(const std::string& token)
{
    const auto it = ids_.find(token);
    if (it != ids_.end()) {
        return it->second;
    }
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
}

int Vocabulary::id_of(std::string_view token) const
{
    const auto it = ids_.find(token);
    return it == ids_.end() ? token_id(SpecialToken::unk) : it->second;
}

const std::string& Vocabulary::token(int id) const
{
    require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), "token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> Vocabulary::apply_merges(const std::string& word) const
{
    std::vector<std::string> symbols = initial_symbols(word);
    while (symbols.size() > 1) {
        std::size_t best_rank = merge_rank_.size();
        std::size_t best_pos = 0;
        for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
            const auto it = merge_rank_.find({symbols[i], symbols[i + 1]});
            if (it != merge_rank_.end() && it->second < best_rank) {
                best_rank = it->second;
                best_pos = i;
            }
        }
        if (best_rank == merge_rank_.size()) {
            break;
        }
        const std::string left = symbols[best_pos];
        const std::string right = symbols[best_pos + 1];
        merge_pair(symbols, left, right);
    }
    return symbols;
}

std::vector<int> Vocabulary::encode(std::string_view text) const
{
    std::vector<int> ids;
    for (const auto& word : split_words(text)) {
        for (const auto& symbol : apply_merges(word)) {
            ids.push_back(id_of(symbol));
        }
    }
    return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const
{
    std::string out;
    for (int id : ids) {
        if (is_special(id) && id != token_id(SpecialToken::unk)) {
            continue;
        }
        std::string piece = token(id);
        if (piece.ends_with(kEndOfWord)) {
            piece.resize(piece.size() - kEndOfWord.size());
            piece.push_back(' ');
        }
        out += piece;
    }
    while (!out.empty() && out.back() == ' ') {
        out.pop_back();
    }
    return out;
}

std::string Vocabulary::serialize() const
{
    std::ostringstream out;
    out << "#deauville-vocab 1\n";
    out << "#tokens " << tokens_.size() << "\n";
    for (const auto& t : tokens_) {
        out << t << "\n";
    }
    out << "#merges " << merges_.size() << "\n";
    for (const auto& [left, right] : merges_) {
        out << left << " " << right << "\n";
    }
    return out.str();
}

Vocabulary Vocabulary::deserialize(std::string_view text)
{
    std::istringstream in{std::string(text)};
    std::string line;
    auto expect_header = [&](std::string_view prefix) -> std::size_t {
        if (!std::getline(in, line) || !line.starts_with(prefix)) {
            throw ValidationError("malformed vocabulary file, expected '" + std::string(prefix) + "'");
        }
        return static_cast<std::size_t>(std::stoull(line.substr(prefix.size())));
    };
    expect_header("#deauville-vocab ");
    const std::size_t n_tokens = expect_header("#tokens ");
    Vocabulary vocab;
    for (std::size_t i = 0; i < n_tokens; ++i) {
        if (!std::getline(in, line) || line.empty()) {
            throw ValidationError("malformed vocabulary file: missing token line");
        }
        if (i < kNumSpecialTokens) {
            require(line == kSpecialNames[i], "vocabulary special tokens out of order");
            continue;
        }
        require(vocab.add_token(line) == static_cast<int>(i), "duplicate vocabulary token: " + line);
    }
    const std::size_t n_merges = expect_header("#merges ");
    for (std::size_t i = 0; i < n_merges; ++i) {
        if (!std::getline(in, line)) {
            throw ValidationError("malformed vocabulary file: missing merge line");
        }
        const auto space = line.find(' ');
        require(space != std::string::npos, "malformed merge rule: " + line);
        std::string left = line.substr(0, space);
        std::string right = line.substr(space + 1);
        vocab.merge_rank_[{left, right}] = vocab.merges_.size();
        vocab.merges_.emplace_back(std::move(left), std::move(right));
    }
    return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const
{
    io::write_text(path, serialize());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path)) {
        throw ValidationError("vocabulary file not found: " + path.string());
    }
    return deserialize(io::read_text(path));
}

std::size_t base_symbol_count(std::span<const std::string> corpus)
{
    std::set<std::string> symbols;
    for (const auto& text : corpus) {
        for (const auto& word : split_words(text)) {
            for (auto& s : initial_symbols(word)) {
                symbols.insert(std::move(s));
            }
        }
    }
    return symbols.size();
}

Vocabulary train_subword_vocab(std::span<const std::string> corpus, std::size_t vocab_size)
{
    require(!corpus.empty(), "vocabulary corpus must not be empty");
    std::map<std::string, std::size_t> word_counts;
    for (const auto& text : corpus) {
        for (const auto& word : split_words(text)) {
            word_counts[word] += 1;
        }
    }
    std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
    std::set<std::string> base;
    for (const auto& [word, count] : word_counts) {
        auto symbols = initial_symbols(word);
        base.insert(symbols.begin(), symbols.end());
        words.emplace_back(std::move(symbols), count);
    }
    require(vocab_size > kNumSpecialTokens + base.size(),
            "vocab_size " + std::to_string(vocab_size) + " too small: needs more than " +
                std::to_string(kNumSpecialTokens + base.size()) + " (specials + base symbols)");

    Vocabulary vocab;
    for (const auto& symbol : base) {
        vocab.add_token(symbol);
    }
    while (vocab.size() < vocab_size) {
        std::map<std::pair<std::string, std::string>, std::size_t> pair_counts;
        for (const auto& [symbols, count] : words) {
            for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
                pair_counts[{symbols[i], symbols[i + 1]}] += count;
            }
        }
        const std::pair<std::string, std::string>* best = nullptr;
        std::size_t best_count = 0;
        for (const auto& [pair, count] : pair_counts) {
            // Strictly greater keeps the lexicographically smallest pair on ties.
            if (count > best_count) {
                best = &pair;
                best_count = count;
            }
        }
        if (best == nullptr || best_count < 2) {
            break;
        }
        const auto [left, right] = *best;
        vocab.merge_rank_[{left, right}] = vocab.merges_.size();
        vocab.merges_.emplace_back(left, right);
        vocab.add_token(left + right);
        for (auto& [symbols, count] : words) {
            merge_pair(symbols, left, right);
        }
    }
    return vocab;
}

// ---------------------------------------------------------------- inputs

TokenSequence build_input(const corpus::ReportDocument& report, const Vocabulary& vocab, std::size_t limit)
{
    require(limit >= 3, "input limit must leave room for special tokens");
    const auto impression = vocab.encode(report.impression);
    const auto findings = vocab.encode(report.findings);
    TokenSequence seq;
    seq.limit = limit;
    seq.ids.reserve(limit);
    seq.ids.push_back(token_id(SpecialToken::cls));
    const std::size_t n_imp = std::min(impression.size(), limit - 2);
    seq.ids.insert(seq.ids.end(), impression.begin(), impression.begin() + static_cast<std::ptrdiff_t>(n_imp));
    if (n_imp > 0) {
        seq.sections.push_back({Section::impression, 1, 1 + n_imp});
    }
    seq.ids.push_back(token_id(SpecialToken::sep));
    const std::size_t remaining = limit - seq.ids.size();
    if (!findings.empty() && remaining >= 2) {
        const std::size_t n_find = std::min(findings.size(), remaining - 1);
        const std::size_t begin = seq.ids.size();
        seq.ids.insert(seq.ids.end(), findings.begin(), findings.begin() + static_cast<std::ptrdiff_t>(n_find));
        seq.sections.push_back({Section::findings, begin, begin + n_find});
        seq.ids.push_back(token_id(SpecialToken::sep));
    }
    return seq;
}

TokenSequence build_text_input(std::string_view text, const Vocabulary& vocab, std::size_t limit)
{
    require(limit >= 2, "input limit must leave room for special tokens");
    const auto ids = vocab.encode(text);
    TokenSequence seq;
    seq.limit = limit;
    seq.ids.push_back(token_id(SpecialToken::cls));
    const std::size_t n = std::min(ids.size(), limit - 2);
    seq.ids.insert(seq.ids.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n));
    if (n > 0) {
        seq.sections.push_back({Section::impression, 1, 1 + n});
    }
    seq.ids.push_back(token_id(SpecialToken::sep));
    return seq;
}

void write_sequences(const std::filesystem::path& ids_path, const std::filesystem::path& sections_path,
                     std::span<const TokenSequence> sequences)
{
    std::ostringstream ids;
    std::ostringstream sections;
    for (const auto& seq : sequences) {
        for (std::size_t i = 0; i < seq.ids.size(); ++i) {
            ids << (i ? " " : "") << seq.ids[i];
        }
        ids << "\n";
        if (seq.sections.empty()) {
            sections << "-";
        }
        for (std::size_t i = 0; i < seq.sections.size(); ++i) {
            const auto& span = seq.sections[i];
            sections << (i ? " " : "") << (span.section == Section::impression ? "impression" : "findings") << ":"
                     << span.begin << ":" << span.end;
        }
        sections << "\n";
    }
    io::write_text(ids_path, ids.str());
    io::write_text(sections_path, sections.str());
}

std::vector<TokenSequence> read_sequences(const std::filesystem::path& ids_path,
                                          const std::filesystem::path& sections_path, std::size_t limit)
{
    const auto id_lines = io::read_lines(ids_path);
    const auto section_lines = io::read_lines(sections_path);
    require(id_lines.size() == section_lines.size(), "sequence file and section map differ in length");
    std::vector<TokenSequence> out;
    out.reserve(id_lines.size());
    for (std::size_t i = 0; i < id_lines.size(); ++i) {
        TokenSequence seq;
        seq.limit = limit;
        std::istringstream in(id_lines[i]);
        int id = 0;
        while (in >> id) {
            seq.ids.push_back(id);
        }
        require(seq.ids.size() <= limit, "stored sequence exceeds input limit");
        std::istringstream spans(section_lines[i]);
        std::string item;
        while (spans >> item) {
            if (item == "-") {
                continue;
            }
            const auto a = item.find(':');
            const auto b = item.rfind(':');
            require(a != std::string::npos && b != a, "malformed section span: " + item);
            const std::string name = item.substr(0, a);
            require(name == "impression" || name == "findings", "unknown section: " + name);
            seq.sections.push_back({name == "impression" ? Section::impression : Section::findings,
                                    std::stoul(item.substr(a + 1, b - a - 1)), std::stoul(item.substr(b + 1))});
        }
        out.push_back(std::move(seq));
    }
    return out;
}

} // namespace deauville::preprocess
