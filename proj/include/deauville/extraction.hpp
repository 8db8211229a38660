#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deauville/corpus.hpp"

namespace deauville::extraction {

/// One detected Deauville score. Range mentions ("4-5") yield one
/// DsMention per score, all sharing the matched span.
struct DsMention {
    std::size_t start = 0;
    std::size_t end = 0;
    int score = 0;
    std::string pattern_id;
    std::string surface;

    friend bool operator==(const DsMention&, const DsMention&) = default;
};

/// A mention template such as "{T} score of {S}". Elements are matched
/// token by token, case-insensitively.
struct MentionPattern {
    enum class Kind { literal, trigger, score };
    struct Element {
        Kind kind = Kind::literal;
        std::string text;
    };

    std::string id;
    std::string source;
    std::vector<Element> elements;

    static MentionPattern parse(std::string id, std::string_view source);
};

class PatternGrammar {
public:
    std::vector<std::string> trigger_terms;
    std::vector<std::string> fuzzy_prefixes;
    std::vector<MentionPattern> templates;
    std::map<std::string, int> number_words;
    int max_edit_distance = 2;

    /// Built-in grammar covering the mention forms seen in PET/CT reports.
    static PatternGrammar defaults();
    static PatternGrammar parse(std::string_view yaml_text);
    static PatternGrammar load(const std::filesystem::path& path);
    std::string to_yaml() const;

    void validate() const;

    bool is_trigger(std::string_view lowered_token) const;
    std::optional<int> score_of(std::string_view lowered_token) const;
};

/// Word tokens ([A-Za-z0-9] runs, non-ASCII bytes included) and single
/// punctuation characters, with byte offsets into the source.
struct TextToken {
    std::size_t start = 0;
    std::size_t end = 0;
    std::string lowered;
};

std::vector<TextToken> tokenize_for_matching(std::string_view text);

std::size_t edit_distance(std::string_view a, std::string_view b);

std::vector<DsMention> find_mentions(std::string_view text, const PatternGrammar& grammar);

/// Highest score wins; no mentions means the exam is excluded.
std::optional<corpus::DeauvilleLabel> assign_exam_label(std::span<const DsMention> mentions);

/// Each (merged) mention span becomes a single space.
std::string redact(std::string_view text, std::span<const DsMention> mentions);

/// Redacts every report section, returning the number of mentions removed.
struct RedactionResult {
    corpus::ReportDocument report;
    std::vector<DsMention> mentions;
};
RedactionResult redact_report(const corpus::ReportDocument& report, const PatternGrammar& grammar);

/// All mentions across the indication, findings and impression.
std::vector<DsMention> find_report_mentions(const corpus::ReportDocument& report, const PatternGrammar& grammar);

struct NgramEntry {
    std::string ngram;
    std::size_t n = 0;
    std::size_t frequency = 0;

    friend bool operator==(const NgramEntry&, const NgramEntry&) = default;
};

struct NgramReport {
    std::string term;
    std::size_t window = 0;
    std::vector<NgramEntry> entries;

    /// Entries of one order, preserving the frequency ranking.
    std::vector<NgramEntry> of_order(std::size_t n) const;
};

struct NgramOptions {
    std::size_t min_n = 2;
    std::size_t max_n = 6;
    std::size_t window = 3;
};

inline constexpr std::string_view kScorePlaceholder = "<score>";

/// Counts n-grams overlapping a window around every fuzzy occurrence of
/// `term`. Score tokens are abstracted to <score> and trigger variants to
/// the term itself. Ranked by frequency, then shorter n, then text.
NgramReport mine_context_ngrams(std::span<const corpus::ReportDocument> corpus, std::string_view term,
                                const NgramOptions& options, const PatternGrammar& grammar);

} // namespace deauville::extraction
