#include <doctest.h>

#include <algorithm>
#include <random>

#include "deauville/corpus.hpp"
#include "deauville/error.hpp"
#include "deauville/preprocess.hpp"
#include "test_support.hpp"

using namespace deauville;
using namespace deauville::preprocess;

namespace {

std::string repeat_words(const std::vector<std::string>& words, std::size_t n, std::mt19937_64& rng)
{
    std::string out;
    for (std::size_t i = 0; i < n; ++i) {
        if (!out.empty()) out.push_back(' ');
        out += words[rng() % words.size()];
    }
    return out;
}

// Single-letter words are base symbols, so each encodes to exactly one id.
const std::vector<std::string> kLetters{"a", "b", "c", "d", "e", "f", "g", "h"};

Vocabulary letter_vocab()
{
    const std::vector<std::string> corpus{"a b c d e f g h"};
    return train_subword_vocab(corpus, kNumSpecialTokens + base_symbol_count(corpus) + 1);
}

} // namespace

TEST_CASE("normalization examples")
{
    const auto config = NormalizationConfig::defaults();
    CHECK(normalize("SUVmax of 7.23.", config) == "suvmax of 7.2");
    NormalizationConfig only{};
    only.synonym_map = {{"standardized uptake value", "suvmax"}};
    CHECK(normalize("standardized uptake value", only) == "suvmax");
    CHECK(normalize("", config).empty());
    CHECK(normalize("Uptake less than mediastinal blood pool.", config) == "uptake less than mediastinum");
    CHECK(normalize("Hepatic uptake, SUV 3.0", config) == "liver uptake suvmax 3.0");
}

TEST_CASE("decimal rounding is half away from zero on the digits")
{
    CHECK(round_decimal_numbers("2.25", 1) == "2.3");
    CHECK(round_decimal_numbers("2.35", 1) == "2.4");
    CHECK(round_decimal_numbers("0.05", 1) == "0.1");
    CHECK(round_decimal_numbers("7.96", 1) == "8.0");
    CHECK(round_decimal_numbers("99.95 and 1.04", 1) == "100.0 and 1.0");
    CHECK(round_decimal_numbers("3.14159", 2) == "3.14");
    CHECK(round_decimal_numbers("12", 1) == "12");
    CHECK(round_decimal_numbers("4.5", 0) == "5");
    CHECK(round_decimal_numbers("7.23", -1) == "7.23");
}

TEST_CASE("date stripping")
{
    const auto config = NormalizationConfig::defaults();
    CHECK(normalize("Exam 03/14/2019 compared with 2018-11-02.", config) == "exam compared with");
    CHECK(normalize("Prior study from March 14, 2019 shows", config) == "prior study from shows");
    CHECK(normalize("Seen on 14 March 2019 again", config) == "seen on again");
}

TEST_CASE("normalize is idempotent and does not grow text with shrinking synonyms")
{
    auto spec = corpus::CorpusSpec::defaults();
    spec.n_exams = 300;
    spec.seed = 12;
    spec.with_images = false;
    const auto config = NormalizationConfig::defaults();
    NormalizationConfig shrinking = config;
    shrinking.synonym_map = {{"standardized uptake value", "suv"}, {"hypermetabolic", "avid"}, {"mediastinal", "med"}};
    for (const auto& r : corpus::generate_corpus(spec)) {
        for (const std::string* s : {&r.report.indication, &r.report.findings, &r.report.impression}) {
            const auto once = normalize(*s, config);
            CHECK(normalize(once, config) == once);
            CHECK(normalize(*s, shrinking).size() <= s->size());
        }
    }
}

TEST_CASE("synonym maps must be acyclic")
{
    NormalizationConfig config;
    config.synonym_map = {{"suv", "suvmax"}, {"suvmax", "peak"}};
    CHECK_THROWS_AS(config.validate(), ValidationError);
    CHECK_THROWS_AS(NormalizationConfig::parse("synonyms:\n  - {variant: a, canonical: b}\n  - {variant: b, canonical: a}\n"),
                    ValidationError);
    const auto back = NormalizationConfig::parse(NormalizationConfig::defaults().to_yaml());
    CHECK(back.synonym_map == NormalizationConfig::defaults().synonym_map);
}

TEST_CASE("BPE merges the most frequent pair first")
{
    // Words: a a a b</w> and a a b</w>. Pair counts: (a,a)=3, (a,b</w>)=2.
    const std::vector<std::string> corpus{"aaab", "aab"};
    const std::size_t base = base_symbol_count(corpus);
    CHECK(base == 2);
    const auto vocab = train_subword_vocab(corpus, kNumSpecialTokens + base + 1);
    REQUIRE(vocab.merges().size() == 1);
    CHECK(vocab.merges()[0] == std::pair<std::string, std::string>{"a", "a"});
    CHECK(vocab.id_of("aa") != token_id(SpecialToken::unk));
    CHECK_THROWS_AS(train_subword_vocab(corpus, kNumSpecialTokens + base), ValidationError);
    CHECK_THROWS_AS(train_subword_vocab(std::vector<std::string>{}, 100), ValidationError);
}

TEST_CASE("vocabulary codec, determinism and persistence")
{
    auto spec = corpus::CorpusSpec::defaults();
    spec.n_exams = 200;
    spec.seed = 2;
    spec.with_images = false;
    std::vector<std::string> texts;
    const auto config = NormalizationConfig::defaults();
    for (const auto& r : corpus::generate_corpus(spec)) texts.push_back(normalize(r.report.findings, config));
    const auto a = train_subword_vocab(texts, 400);
    const auto b = train_subword_vocab(texts, 400);
    CHECK(a == b);
    CHECK(a.size() <= 400);
    CHECK(a.token(token_id(SpecialToken::pad)) != a.token(token_id(SpecialToken::mask)));
    for (const auto& t : texts) {
        const auto ids = a.encode(t);
        CHECK(a.decode(ids) == t);
        for (int id : ids) CHECK(id != token_id(SpecialToken::unk));
    }
    // Unseen characters fall back to the unknown token.
    const auto ids = a.encode("zz\xc3\xa9");
    CHECK(std::find(ids.begin(), ids.end(), token_id(SpecialToken::unk)) != ids.end());

    TempDir tmp("vocab");
    a.save(tmp / "vocab.txt");
    CHECK(Vocabulary::load(tmp / "vocab.txt") == a);
    CHECK(Vocabulary::deserialize(a.serialize()) == a);
}

TEST_CASE("build_input layout and budget")
{
    const auto vocab = letter_vocab();
    std::mt19937_64 rng(1);
    corpus::ReportDocument doc;
    doc.impression = repeat_words(kLetters, 100, rng);
    doc.findings = repeat_words(kLetters, 600, rng);
    REQUIRE(vocab.encode(doc.impression).size() == 100);
    REQUIRE(vocab.encode(doc.findings).size() == 600);

    const auto seq = build_input(doc, vocab, 512);
    REQUIRE(seq.ids.size() == 512);
    CHECK(seq.ids[0] == token_id(SpecialToken::cls));
    CHECK(seq.ids[101] == token_id(SpecialToken::sep));
    CHECK(seq.ids[511] == token_id(SpecialToken::sep));
    const auto imp = vocab.encode(doc.impression);
    const auto fin = vocab.encode(doc.findings);
    CHECK(std::equal(imp.begin(), imp.end(), seq.ids.begin() + 1));
    CHECK(std::equal(fin.begin(), fin.begin() + 409, seq.ids.begin() + 102));
    REQUIRE(seq.sections.size() == 2);
    CHECK(seq.sections[0] == SectionSpan{Section::impression, 1, 101});
    CHECK(seq.sections[1] == SectionSpan{Section::findings, 102, 511});

    doc.impression = repeat_words(kLetters, 50, rng);
    doc.findings = repeat_words(kLetters, 50, rng);
    CHECK(build_input(doc, vocab, 512).ids.size() == 103);

    doc.impression = repeat_words(kLetters, 600, rng);
    doc.findings.clear();
    const auto long_imp = build_input(doc, vocab, 512);
    CHECK(long_imp.ids.size() == 512);
    REQUIRE(long_imp.sections.size() == 1);
    CHECK(long_imp.sections[0].end - long_imp.sections[0].begin == 510);

    CHECK(build_input(doc, vocab, 512) == long_imp);
}

TEST_CASE("truncation invariants over 1000 randomized reports")
{
    const auto vocab = letter_vocab();
    std::mt19937_64 rng(77);
    std::size_t truncated = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        corpus::ReportDocument doc;
        doc.impression = repeat_words(kLetters, rng() % 700, rng);
        doc.findings = repeat_words(kLetters, rng() % 900, rng);
        const auto seq = build_input(doc, vocab, 512);
        CHECK(seq.ids.size() <= 512);
        const auto imp = vocab.encode(doc.impression);
        const auto fin = vocab.encode(doc.findings);
        const bool cut = imp.size() + fin.size() + 3 > 512;
        truncated += cut ? 1 : 0;
        if (imp.size() <= 509) {
            CHECK(std::equal(imp.begin(), imp.end(), seq.ids.begin() + 1));
        }
        // Section spans are disjoint and cover every non-special id.
        std::size_t covered = 0;
        std::size_t prev_end = 0;
        for (const auto& span : seq.sections) {
            CHECK(span.begin >= prev_end);
            prev_end = span.end;
            covered += span.end - span.begin;
        }
        const auto specials =
            std::count_if(seq.ids.begin(), seq.ids.end(), [](int id) { return is_special(id); });
        CHECK(covered + static_cast<std::size_t>(specials) == seq.ids.size());
    }
    CHECK(truncated > 300);
}

TEST_CASE("sequence files round-trip")
{
    const auto vocab = letter_vocab();
    std::mt19937_64 rng(3);
    std::vector<TokenSequence> seqs;
    for (int i = 0; i < 20; ++i) {
        corpus::ReportDocument doc;
        doc.impression = repeat_words(kLetters, rng() % 30, rng);
        doc.findings = repeat_words(kLetters, rng() % 30, rng);
        seqs.push_back(build_input(doc, vocab, 64));
    }
    TempDir tmp("seqs");
    write_sequences(tmp / "x.ids", tmp / "x.sections", seqs);
    CHECK(read_sequences(tmp / "x.ids", tmp / "x.sections", 64) == seqs);
}
