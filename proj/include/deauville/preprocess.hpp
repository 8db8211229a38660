#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deauville/corpus.hpp"
#include "deauville/extraction.hpp"

namespace deauville::preprocess {

struct NormalizationConfig {
    bool lowercase = true;
    bool strip_punctuation = true;
    bool strip_dates = true;
    /// Decimal places kept when rounding; negative disables rounding.
    int round_numbers_to = 1;
    bool replace_synonyms = true;
    /// (variant, canonical) rewrites, matched on word boundaries.
    std::vector<std::pair<std::string, std::string>> synonym_map;

    static NormalizationConfig defaults();
    static NormalizationConfig parse(std::string_view yaml_text);
    std::string to_yaml() const;
    /// Throws when a canonical term is itself a variant.
    void validate() const;
};

std::string normalize(std::string_view text, const NormalizationConfig& config);

/// Round every decimal number in `text` half away from zero, operating on
/// the decimal digits so no binary representation error leaks in.
std::string round_decimal_numbers(std::string_view text, int places);

std::string strip_dates(std::string_view text);

/// Redaction followed by normalization of every section.
corpus::ReportDocument prepare_report(const corpus::ReportDocument& report, const extraction::PatternGrammar& grammar,
                                      const NormalizationConfig& config);

enum class SpecialToken : int { pad = 0, unk = 1, cls = 2, sep = 3, mask = 4 };
inline constexpr int kNumSpecialTokens = 5;

constexpr int token_id(SpecialToken t) noexcept { return static_cast<int>(t); }
constexpr bool is_special(int id) noexcept { return id >= 0 && id < kNumSpecialTokens; }

/// Byte-pair-encoding vocabulary. Words are whitespace separated; the last
/// symbol of each word carries the "</w>" end marker.
class Vocabulary {
public:
    static constexpr std::string_view kEndOfWord = "</w>";

    Vocabulary();

    std::size_t size() const noexcept { return tokens_.size(); }
    int id_of(std::string_view token) const;
    const std::string& token(int id) const;
    const std::vector<std::pair<std::string, std::string>>& merges() const noexcept { return merges_; }

    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;

    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);
    std::string serialize() const;
    static Vocabulary deserialize(std::string_view text);

    friend bool operator==(const Vocabulary& a, const Vocabulary& b)
    {
        return a.tokens_ == b.tokens_ && a.merges_ == b.merges_;
    }

private:
    friend Vocabulary train_subword_vocab(std::span<const std::string> corpus, std::size_t vocab_size);

    int add_token(const std::string& token);
    std::vector<std::string> apply_merges(const std::string& word) const;

    std::vector<std::string> tokens_;
    std::map<std::string, int, std::less<>> ids_;
    std::vector<std::pair<std::string, std::string>> merges_;
    std::map<std::pair<std::string, std::string>, std::size_t> merge_rank_;
};

/// Number of symbols in the initial (unmerged) alphabet of a corpus.
std::size_t base_symbol_count(std::span<const std::string> corpus);

Vocabulary train_subword_vocab(std::span<const std::string> corpus, std::size_t vocab_size);

enum class Section { impression, findings };

struct SectionSpan {
    Section section = Section::impression;
    std::size_t begin = 0;
    std::size_t end = 0;

    friend bool operator==(const SectionSpan&, const SectionSpan&) = default;
};

struct TokenSequence {
    std::vector<int> ids;
    std::vector<SectionSpan> sections;
    std::size_t limit = 512;

    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

inline constexpr std::size_t kDefaultInputLimit = 512;

/// [CLS] impression [SEP] findings-prefix [SEP]. The impression is kept
/// whole when it fits in limit-3 (head-truncated to limit-2 otherwise);
/// findings fill the remaining budget. The findings segment and its
/// separator are omitted when no findings token fits.
TokenSequence build_input(const corpus::ReportDocument& report, const Vocabulary& vocab,
                          std::size_t limit = kDefaultInputLimit);

/// [CLS] text [SEP], head-truncated to the limit.
TokenSequence build_text_input(std::string_view text, const Vocabulary& vocab, std::size_t limit = kDefaultInputLimit);

/// Line-delimited id lists and the sidecar section-map file.
void write_sequences(const std::filesystem::path& ids_path, const std::filesystem::path& sections_path,
                     std::span<const TokenSequence> sequences);
std::vector<TokenSequence> read_sequences(const std::filesystem::path& ids_path,
                                          const std::filesystem::path& sections_path, std::size_t limit);

} // namespace deauville::preprocess
