#include "deauville/extraction.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "deauville/error.hpp"
#include "deauville/io.hpp"

namespace deauville::extraction {

namespace {

bool is_word_byte(unsigned char c)
{
    return std::isalnum(c) != 0 || c >= 0x80;
}

std::string lowered(std::string_view s)
{
    std::string out(s);
    for (char& c : out) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

} // namespace

std::vector<TextToken> tokenize_for_matching(std::string_view text)
{
    std::vector<TextToken> tokens;
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (std::isspace(c) != 0) {
            ++i;
            continue;
        }
        std::size_t j = i + 1;
        if (is_word_byte(c)) {
            while (j < text.size() && is_word_byte(static_cast<unsigned char>(text[j]))) {
                ++j;
            }
        }
        tokens.push_back({i, j, lowered(text.substr(i, j - i))});
        i = j;
    }
    return tokens;
}

std::size_t edit_distance(std::string_view a, std::string_view b)
{
    std::vector<std::size_t> prev(b.size() + 1);
    std::vector<std::size_t> cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) {
        prev[j] = j;
    }
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t substitute = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, substitute});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

// ---------------------------------------------------------------- grammar

MentionPattern MentionPattern::parse(std::string id, std::string_view source)
{
    MentionPattern pattern;
    pattern.id = std::move(id);
    pattern.source = std::string(source);
    std::size_t i = 0;
    std::string literal;
    auto flush = [&] {
        for (auto& token : tokenize_for_matching(literal)) {
            pattern.elements.push_back({Kind::literal, token.lowered});
        }
        literal.clear();
    };
    while (i < source.size()) {
        if (source.compare(i, 3, "{T}") == 0 || source.compare(i, 3, "{S}") == 0) {
            flush();
            pattern.elements.push_back({source[i + 1] == 'T' ? Kind::trigger : Kind::score, {}});
            i += 3;
        } else {
            literal.push_back(source[i]);
            ++i;
        }
    }
    flush();
    return pattern;
}

PatternGrammar PatternGrammar::defaults()
{
    PatternGrammar g;
    g.trigger_terms = {"deauville", "deauvile", "deuville", "duaville", "dauville"};
    g.fuzzy_prefixes = {"deau", "deuv"};
    g.number_words = {{"one", 1}, {"two", 2}, {"three", 3}, {"four", 4}, {"five", 5}};
    g.max_edit_distance = 2;
    const std::vector<std::pair<std::string, std::string>> templates{
        {"score_of", "{T} score of {S}"},
        {"on_scale", "{S} on the {T} scale"},
        {"bare", "{T} {S}"},
        {"score_bare", "{T} score {S}"},
        {"score_colon", "{T} score: {S}"},
        {"criteria_score_of", "{T} criteria score of {S}"},
        {"category", "{T} category {S}"},
        {"out_of_five", "{T} {S}/5"},
        {"equals", "{T} = {S}"},
        {"score_is", "{T} score is {S}"},
        {"scale_score", "score of {S} on the {T} scale"},
        {"paren", "({T} {S})"},
    };
    for (const auto& [id, source] : templates) {
        g.templates.push_back(MentionPattern::parse(id, source));
    }
    g.validate();
    return g;
}

PatternGrammar PatternGrammar::parse(std::string_view yaml_text)
{
    PatternGrammar g;
    try {
        const YAML::Node root = YAML::Load(std::string(yaml_text));
        if (root["max_edit_distance"]) {
            g.max_edit_distance = root["max_edit_distance"].as<int>();
        }
        for (const auto& t : root["trigger_terms"]) {
            g.trigger_terms.push_back(lowered(t.as<std::string>()));
        }
        for (const auto& p : root["fuzzy_prefixes"]) {
            g.fuzzy_prefixes.push_back(lowered(p.as<std::string>()));
        }
        for (const auto& item : root["number_words"]) {
            g.number_words[lowered(item.first.as<std::string>())] = item.second.as<int>();
        }
        for (const auto& t : root["templates"]) {
            g.templates.push_back(MentionPattern::parse(t["id"].as<std::string>(), t["pattern"].as<std::string>()));
        }
    } catch (const YAML::Exception& e) {
        throw ValidationError(std::string("grammar parse error: ") + e.what());
    }
    g.validate();
    return g;
}

PatternGrammar PatternGrammar::load(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path)) {
        throw ValidationError("grammar file not found: " + path.string());
    }
    return parse(io::read_text(path));
}

std::string PatternGrammar::to_yaml() const
{
    YAML::Emitter out;
    out << YAML::BeginMap;
    out << YAML::Key << "max_edit_distance" << YAML::Value << max_edit_distance;
    out << YAML::Key << "trigger_terms" << YAML::Value << YAML::Flow << trigger_terms;
    out << YAML::Key << "fuzzy_prefixes" << YAML::Value << YAML::Flow << fuzzy_prefixes;
    out << YAML::Key << "number_words" << YAML::Value << YAML::Flow << YAML::BeginMap;
    std::vector<std::pair<int, std::string>> words;
    for (const auto& [word, value] : number_words) {
        words.emplace_back(value, word);
    }
    std::sort(words.begin(), words.end());
    for (const auto& [value, word] : words) {
        out << YAML::Key << word << YAML::Value << value;
    }
    out << YAML::EndMap;
    out << YAML::Key << "templates" << YAML::Value << YAML::BeginSeq;
    for (const auto& t : templates) {
        out << YAML::Flow << YAML::BeginMap << YAML::Key << "id" << YAML::Value << t.id << YAML::Key << "pattern"
            << YAML::Value << YAML::DoubleQuoted << t.source << YAML::EndMap;
    }
    out << YAML::EndSeq << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

void PatternGrammar::validate() const
{
    require(!trigger_terms.empty(), "grammar needs at least one trigger term");
    require(max_edit_distance >= 0, "max_edit_distance must be non-negative");
    require(!templates.empty(), "grammar needs at least one template");
    for (const auto& [word, value] : number_words) {
        require(value >= 1 && value <= corpus::kNumClasses, "number word '" + word + "' maps outside 1..5");
    }
    std::set<std::string> ids;
    std::set<std::string> shapes;
    for (const auto& t : templates) {
        require(!t.id.empty(), "template id must not be empty");
        require(ids.insert(t.id).second, "duplicate template id: " + t.id);
        std::size_t scores = 0;
        std::size_t triggers = 0;
        std::string shape;
        for (const auto& e : t.elements) {
            scores += e.kind == MentionPattern::Kind::score ? 1 : 0;
            triggers += e.kind == MentionPattern::Kind::trigger ? 1 : 0;
            shape += (e.kind == MentionPattern::Kind::literal ? e.text : (e.kind == MentionPattern::Kind::score ? "{S}" : "{T}")) + " ";
        }
        require(scores == 1, "template '" + t.id + "' must have exactly one score slot");
        require(triggers == 1, "template '" + t.id + "' must have exactly one trigger slot");
        require(shapes.insert(shape).second, "template '" + t.id + "' duplicates another template");
    }
}

bool PatternGrammar::is_trigger(std::string_view token) const
{
    for (const auto& term : trigger_terms) {
        if (token == term) {
            return true;
        }
    }
    const bool prefixed = std::any_of(fuzzy_prefixes.begin(), fuzzy_prefixes.end(),
                                      [&](const std::string& p) { return token.starts_with(p); });
    if (!prefixed) {
        return false;
    }
    return std::any_of(trigger_terms.begin(), trigger_terms.end(), [&](const std::string& term) {
        return edit_distance(token, term) <= static_cast<std::size_t>(max_edit_distance);
    });
}

std::optional<int> PatternGrammar::score_of(std::string_view token) const
{
    if (token.size() == 1 && token[0] >= '1' && token[0] <= '5') {
        return token[0] - '0';
    }
    const auto it = number_words.find(std::string(token));
    if (it != number_words.end()) {
        return it->second;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------- matching

namespace {

struct SlotMatch {
    std::size_t last = 0; // index of the last consumed token
    int low = 0;
    int high = 0;
};

std::optional<SlotMatch> match_template(const MentionPattern& pattern, const std::vector<TextToken>& tokens,
                                        std::size_t start, const PatternGrammar& grammar)
{
    std::size_t pos = start;
    SlotMatch result;
    for (const auto& element : pattern.elements) {
        if (pos >= tokens.size()) {
            return std::nullopt;
        }
        switch (element.kind) {
        case MentionPattern::Kind::literal:
            if (tokens[pos].lowered != element.text) {
                return std::nullopt;
            }
            ++pos;
            break;
        case MentionPattern::Kind::trigger:
            if (!grammar.is_trigger(tokens[pos].lowered)) {
                return std::nullopt;
            }
            ++pos;
            break;
        case MentionPattern::Kind::score: {
            const auto low = grammar.score_of(tokens[pos].lowered);
            if (!low) {
                return std::nullopt;
            }
            result.low = *low;
            result.high = *low;
            if (pos + 2 < tokens.size() && (tokens[pos + 1].lowered == "-" || tokens[pos + 1].lowered == "to")) {
                const auto high = grammar.score_of(tokens[pos + 2].lowered);
                if (high && *high > *low) {
                    result.high = *high;
                    pos += 2;
                }
            }
            ++pos;
            break;
        }
        }
    }
    result.last = pos - 1;
    return result;
}

} // namespace

std::vector<DsMention> find_mentions(std::string_view text, const PatternGrammar& grammar)
{
    const auto tokens = tokenize_for_matching(text);
    std::vector<DsMention> mentions;
    std::size_t i = 0;
    while (i < tokens.size()) {
        const MentionPattern* best = nullptr;
        SlotMatch best_match;
        for (const auto& pattern : grammar.templates) {
            const auto m = match_template(pattern, tokens, i, grammar);
            if (!m) {
                continue;
            }
            const bool longer = best == nullptr || tokens[m->last].end > tokens[best_match.last].end;
            const bool tie_break = best != nullptr && tokens[m->last].end == tokens[best_match.last].end &&
                pattern.id < best->id;
            if (longer || tie_break) {
                best = &pattern;
                best_match = *m;
            }
        }
        if (best == nullptr) {
            ++i;
            continue;
        }
        const std::size_t start = tokens[i].start;
        const std::size_t end = tokens[best_match.last].end;
        for (int score = best_match.low; score <= best_match.high; ++score) {
            mentions.push_back({start, end, score, best->id, std::string(text.substr(start, end - start))});
        }
        i = best_match.last + 1;
    }
    return mentions;
}

std::optional<corpus::DeauvilleLabel> assign_exam_label(std::span<const DsMention> mentions)
{
    if (mentions.empty()) {
        return std::nullopt;
    }
    int best = 0;
    for (const auto& m : mentions) {
        best = std::max(best, m.score);
    }
    return corpus::DeauvilleLabel(best);
}

std::string redact(std::string_view text, std::span<const DsMention> mentions)
{
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (const auto& m : mentions) {
        require(m.start < m.end && m.end <= text.size(), "mention span out of bounds");
        spans.emplace_back(m.start, m.end);
    }
    std::sort(spans.begin(), spans.end());
    std::vector<std::pair<std::size_t, std::size_t>> merged;
    for (const auto& s : spans) {
        if (!merged.empty() && s.first < merged.back().second) {
            merged.back().second = std::max(merged.back().second, s.second);
        } else {
            merged.push_back(s);
        }
    }
    std::string out;
    out.reserve(text.size());
    std::size_t cursor = 0;
    for (const auto& [start, end] : merged) {
        out.append(text.substr(cursor, start - cursor));
        out.push_back(' ');
        cursor = end;
    }
    out.append(text.substr(cursor));
    return out;
}

std::vector<DsMention> find_report_mentions(const corpus::ReportDocument& report, const PatternGrammar& grammar)
{
    std::vector<DsMention> all;
    for (const std::string* section : {&report.indication, &report.findings, &report.impression}) {
        auto found = find_mentions(*section, grammar);
        all.insert(all.end(), found.begin(), found.end());
    }
    return all;
}

RedactionResult redact_report(const corpus::ReportDocument& report, const PatternGrammar& grammar)
{
    RedactionResult result;
    auto process = [&](const std::string& section) {
        const auto found = find_mentions(section, grammar);
        result.mentions.insert(result.mentions.end(), found.begin(), found.end());
        return redact(section, found);
    };
    result.report.indication = process(report.indication);
    result.report.findings = process(report.findings);
    result.report.impression = process(report.impression);
    return result;
}

// ---------------------------------------------------------------- n-grams

std::vector<NgramEntry> NgramReport::of_order(std::size_t n) const
{
    std::vector<NgramEntry> out;
    for (const auto& e : entries) {
        if (e.n == n) {
            out.push_back(e);
        }
    }
    return out;
}

NgramReport mine_context_ngrams(std::span<const corpus::ReportDocument> corpus, std::string_view term,
                                const NgramOptions& options, const PatternGrammar& grammar)
{
    require(!term.empty(), "n-gram term must not be empty");
    require(!corpus.empty(), "n-gram corpus must not be empty");
    require(options.min_n >= 1 && options.min_n <= options.max_n, "invalid n-gram range");
    const std::string key = lowered(term);
    const bool term_is_trigger = grammar.is_trigger(key);
    auto matches_term = [&](const std::string& token) {
        if (edit_distance(token, key) <= static_cast<std::size_t>(grammar.max_edit_distance)) {
            return true;
        }
        return term_is_trigger && grammar.is_trigger(token);
    };

    std::map<std::string, std::pair<std::size_t, std::size_t>> counts; // ngram -> (n, frequency)
    for (const auto& report : corpus) {
        for (const std::string* section : {&report.indication, &report.findings, &report.impression}) {
            std::vector<std::string> words;
            std::vector<std::size_t> hits;
            for (const auto& token : tokenize_for_matching(*section)) {
                if (!is_word_byte(static_cast<unsigned char>(token.lowered[0]))) {
                    continue;
                }
                if (matches_term(token.lowered)) {
                    hits.push_back(words.size());
                    words.push_back(key);
                } else if (grammar.score_of(token.lowered)) {
                    words.emplace_back(kScorePlaceholder);
                } else {
                    words.push_back(token.lowered);
                }
            }
            std::set<std::pair<std::size_t, std::size_t>> positions; // (start, n)
            for (std::size_t hit : hits) {
                const std::size_t lo = hit >= options.window ? hit - options.window : 0;
                const std::size_t hi = std::min(words.size() - 1, hit + options.window);
                for (std::size_t n = options.min_n; n <= options.max_n; ++n) {
                    if (n > words.size()) {
                        break;
                    }
                    // [s, s+n) must intersect [lo, hi].
                    const std::size_t first = lo + 1 >= n ? lo + 1 - n : 0;
                    for (std::size_t s = first; s <= hi && s + n <= words.size(); ++s) {
                        positions.emplace(s, n);
                    }
                }
            }
            for (const auto& [s, n] : positions) {
                std::string gram = words[s];
                for (std::size_t k = 1; k < n; ++k) {
                    gram += ' ';
                    gram += words[s + k];
                }
                auto& slot = counts[gram];
                slot.first = n;
                slot.second += 1;
            }
        }
    }

    NgramReport report;
    report.term = key;
    report.window = options.window;
    for (const auto& [gram, info] : counts) {
        report.entries.push_back({gram, info.first, info.second});
    }
    std::sort(report.entries.begin(), report.entries.end(), [](const NgramEntry& a, const NgramEntry& b) {
        if (a.frequency != b.frequency) {
            return a.frequency > b.frequency;
        }
        if (a.n != b.n) {
            return a.n < b.n;
        }
        return a.ngram < b.ngram;
    });
    return report;
}

} // namespace deauville::extraction
