#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "deauville/corpus.hpp"
#include "deauville/encoders.hpp"
#include "deauville/error.hpp"
#include "deauville/extraction.hpp"
#include "deauville/preprocess.hpp"
#include "test_support.hpp"

using namespace deauville;
using namespace deauville::encoders;
using preprocess::SpecialToken;
using preprocess::TokenSequence;
using preprocess::token_id;

namespace {

EncoderSpec tiny_spec(int vocab, int max_positions = 512)
{
    EncoderSpec spec;
    spec.vocab_size = vocab;
    spec.max_positions = max_positions;
    return spec;
}

TokenSequence random_sequence(std::size_t n_content, int vocab, std::mt19937_64& rng)
{
    TokenSequence seq;
    seq.ids.push_back(token_id(SpecialToken::cls));
    for (std::size_t i = 0; i < n_content; ++i) {
        seq.ids.push_back(preprocess::kNumSpecialTokens + static_cast<int>(rng() % static_cast<std::uint64_t>(vocab - preprocess::kNumSpecialTokens)));
    }
    seq.ids.push_back(token_id(SpecialToken::sep));
    seq.sections.push_back({preprocess::Section::impression, 1, n_content + 1});
    return seq;
}

// Replays the documented sampler on a bare mt19937_64: rejection-sampled
// uniform integers for a partial Fisher-Yates, then a cumulative draw
// with 53-bit uniforms for the action.
struct ReplayRng {
    std::mt19937_64 engine;
    explicit ReplayRng(std::uint64_t seed) : engine(seed) {}
    std::size_t below(std::size_t n)
    {
        const std::uint64_t max = ~std::uint64_t{0};
        const std::uint64_t limit = max - max % n;
        std::uint64_t r = engine();
        while (r >= limit) r = engine();
        return static_cast<std::size_t>(r % n);
    }
    double uniform() { return static_cast<double>(engine() >> 11) * 0x1.0p-53; }
};

struct SmallData {
    preprocess::Vocabulary vocab;
    std::vector<TokenSequence> domain;
    std::vector<TokenSequence> heldout;
    std::vector<TokenSequence> generic;
};

const SmallData& small_data()
{
    static const SmallData data = [] {
        SmallData d;
        auto spec = corpus::CorpusSpec::defaults();
        spec.n_exams = 260;
        spec.seed = 31;
        spec.with_images = false;
        const auto grammar = extraction::PatternGrammar::defaults();
        const auto norm = preprocess::NormalizationConfig::defaults();
        std::vector<corpus::ReportDocument> reports;
        std::vector<std::string> texts;
        for (const auto& r : corpus::generate_corpus(spec)) {
            reports.push_back(preprocess::prepare_report(r.report, grammar, norm));
            texts.push_back(reports.back().impression + " " + reports.back().findings);
        }
        const auto generic_text = corpus::generate_generic_text(200, 5);
        for (const auto& t : generic_text) texts.push_back(preprocess::normalize(t, norm));
        d.vocab = preprocess::train_subword_vocab(texts, 300);
        for (std::size_t i = 0; i < reports.size(); ++i) {
            auto seq = preprocess::build_input(reports[i], d.vocab, 96);
            (i < 220 ? d.domain : d.heldout).push_back(std::move(seq));
        }
        for (const auto& t : generic_text) {
            d.generic.push_back(preprocess::build_text_input(preprocess::normalize(t, norm), d.vocab, 96));
        }
        return d;
    }();
    return data;
}

MlmConfig quick_mlm(std::uint64_t seed, int epochs)
{
    MlmConfig cfg;
    cfg.epochs = epochs;
    cfg.learning_rate = 1e-3;
    cfg.seed = seed;
    return cfg;
}

bool same_weights(TextEncoder& a, TextEncoder& b)
{
    const auto pa = a.parameters();
    const auto pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i]->value != pb[i]->value) return false;
    }
    return true;
}

} // namespace

TEST_CASE("encoder spec validation")
{
    auto spec = tiny_spec(100);
    CHECK_NOTHROW(spec.validate());
    spec.hidden_size = 66;
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    spec = tiny_spec(100, 256);
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    CHECK_NOTHROW(spec.validate(128));
    CHECK(EncoderSpec::from_json(tiny_spec(77).to_json()) == tiny_spec(77));
    CHECK(parse_stage(stage_name(Stage::domain_adapted)) == Stage::domain_adapted);
}

TEST_CASE("encode shape contract and determinism")
{
    const auto ckpt = make_random_checkpoint(tiny_spec(60), 4);
    std::mt19937_64 rng(2);
    const auto seq = random_sequence(510, 60, rng);
    const auto a = encode(seq, ckpt);
    CHECK(a.states.rows() == 512);
    CHECK(a.states.cols() == 64);
    CHECK(a.pooled.size() == 64);
    CHECK(a.pooled == a.states.row(0));
    const auto b = encode(seq, ckpt);
    CHECK(a.states == b.states);

    auto bad = seq;
    bad.ids[3] = 60;
    CHECK_THROWS_AS(encode(bad, ckpt), ValidationError);
}

TEST_CASE("mask counts equal round(rate x maskable) and never touch specials")
{
    std::mt19937_64 gen(5);
    Rng rng(11);
    MlmConfig cfg;
    for (int trial = 0; trial < 500; ++trial) {
        auto seq = random_sequence(1 + gen() % 300, 80, gen);
        // Sprinkle some padding and separators into the content.
        for (int k = 0; k < 5; ++k) {
            seq.ids[1 + gen() % (seq.ids.size() - 2)] = static_cast<int>(gen() % preprocess::kNumSpecialTokens);
        }
        const auto maskable = static_cast<std::size_t>(
            std::count_if(seq.ids.begin(), seq.ids.end(), [](int id) { return !preprocess::is_special(id); }));
        if (maskable == 0) continue;
        const auto masked = mask_tokens(seq, cfg, 80, rng);
        CHECK(masked.targets.size() == static_cast<std::size_t>(std::lround(0.15 * static_cast<double>(maskable))));
        for (const auto& [pos, original] : masked.targets) {
            CHECK(!preprocess::is_special(original));
            CHECK(seq.ids[pos] == original);
        }
        for (std::size_t i = 0; i < seq.ids.size(); ++i) {
            if (!masked.targets.count(i)) CHECK(masked.corrupted.ids[i] == seq.ids[i]);
        }
    }

    std::mt19937_64 g2(1);
    const auto hundred = random_sequence(100, 80, g2);
    CHECK(mask_tokens(hundred, cfg, 80, rng).targets.size() == 15);
    MlmConfig pure = cfg;
    pure.mask_action_split = {1.0, 0.0, 0.0};
    const auto all_masked = mask_tokens(hundred, pure, 80, rng);
    REQUIRE(all_masked.targets.size() == 15);
    for (const auto& [pos, original] : all_masked.targets) {
        CHECK(all_masked.corrupted.ids[pos] == token_id(SpecialToken::mask));
    }

    TokenSequence empty;
    empty.ids = {token_id(SpecialToken::cls), token_id(SpecialToken::sep)};
    CHECK_THROWS_AS(mask_tokens(empty, cfg, 80, rng), ValidationError);
    MlmConfig bad = cfg;
    bad.mask_rate = 1.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.mask_action_split = {0.5, 0.1, 0.1};
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("seeded sampler matches an independent replay")
{
    std::mt19937_64 gen(8);
    const auto seq = random_sequence(1000, 500, gen);
    MlmConfig cfg;
    const std::uint64_t seed = 424242;
    Rng rng(seed);
    const auto masked = mask_tokens(seq, cfg, 500, rng);

    ReplayRng replay(seed);
    std::vector<std::size_t> positions;
    for (std::size_t i = 1; i <= 1000; ++i) positions.push_back(i);
    const std::size_t n = 150;
    std::map<std::size_t, int> expected_targets;
    std::array<std::size_t, 3> actions{};
    std::vector<int> expected = seq.ids;
    for (std::size_t i = 0; i < n; ++i) {
        std::swap(positions[i], positions[i + replay.below(1000 - i)]);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t pos = positions[i];
        expected_targets[pos] = seq.ids[pos];
        const double r = replay.uniform();
        const std::size_t action = r < 0.8 ? 0 : (r < 0.9 ? 1 : 2);
        ++actions[action];
        if (action == 0) expected[pos] = token_id(SpecialToken::mask);
        if (action == 1) expected[pos] = preprocess::kNumSpecialTokens + static_cast<int>(replay.below(495));
    }
    CHECK(masked.targets == expected_targets);
    CHECK(masked.corrupted.ids == expected);
    // The multinomial draw for this seed stays near 80/10/10.
    CHECK(actions[0] + actions[1] + actions[2] == 150);
    CHECK(actions[0] > 100);
}

TEST_CASE("MLM loss gradients match central finite differences")
{
    auto ckpt = make_random_checkpoint(tiny_spec(40, 512), 17);
    TextEncoder& model = ckpt.encoder;
    std::mt19937_64 gen(3);
    const auto seq = random_sequence(6, 40, gen); // 8 tokens with the specials
    MlmConfig cfg;
    cfg.mask_rate = 0.5;
    Rng mrng(1);
    const auto masked = mask_tokens(seq, cfg, 40, mrng);
    REQUIRE(masked.targets.size() == 3);

    const auto params = model.parameters();
    nn::zero_grads(params);
    mlm_sequence_loss(model, masked, 1.0, nullptr, true);

    // Candidate entries with a gradient large enough for a meaningful ratio.
    std::vector<std::pair<nn::Parameter*, Eigen::Index>> candidates;
    for (auto* p : params) {
        for (Eigen::Index i = 0; i < p->grad.size(); ++i) {
            if (std::abs(p->grad.data()[i]) > 1e-4) candidates.emplace_back(p, i);
        }
    }
    REQUIRE(candidates.size() > 100);
    std::mt19937_64 pick(99);
    std::shuffle(candidates.begin(), candidates.end(), pick);
    std::set<std::string> tensors;
    const double h = 1e-5;
    for (int k = 0; k < 10; ++k) {
        auto [p, i] = candidates[static_cast<std::size_t>(k)];
        tensors.insert(p->name);
        double& v = p->value.data()[i];
        const double old = v;
        v = old + h;
        const double up = mlm_sequence_loss(model, masked, 1.0, nullptr, false);
        v = old - h;
        const double down = mlm_sequence_loss(model, masked, 1.0, nullptr, false);
        v = old;
        const double numeric = (up - down) / (2 * h);
        const double analytic = p->grad.data()[i];
        const double rel = std::abs(numeric - analytic) / std::max(std::abs(numeric), std::abs(analytic));
        INFO(p->name << "[" << i << "] numeric " << numeric << " analytic " << analytic);
        CHECK(rel < 1e-4);
    }
    CHECK(tensors.size() > 3);
}

TEST_CASE("checkpoint round-trip is element-exact")
{
    const auto& d = small_data();
    const auto ckpt = generic_pretrain(tiny_spec(static_cast<int>(d.vocab.size())), d.generic, quick_mlm(1, 1), 2);
    TempDir tmp("ckpt");
    save_checkpoint(tmp / "c", ckpt);
    const auto loaded = load_checkpoint(tmp / "c");
    CHECK(loaded.stage == Stage::generic_pretrained);
    CHECK(loaded.provenance == ckpt.provenance);
    CHECK(loaded.spec() == ckpt.spec());
    for (const auto& seq : d.heldout) {
        CHECK(encode(seq, loaded).states == encode(seq, ckpt).states);
    }
    const auto ref = read_checkpoint_ref(tmp / "c");
    CHECK(ref.stage == Stage::generic_pretrained);
    CHECK(ref.spec == ckpt.spec());
    CHECK_THROWS_AS(load_checkpoint(tmp / "missing"), Error);
}

TEST_CASE("stage transitions and adaptation preconditions")
{
    const auto& d = small_data();
    const int vocab = static_cast<int>(d.vocab.size());
    auto base = make_random_checkpoint(tiny_spec(vocab), 3);
    CHECK(base.stage == Stage::random_init);

    auto noop = domain_adapt(base, d.domain, quick_mlm(4, 0));
    CHECK(noop.stage == Stage::domain_adapted);
    CHECK(same_weights(noop.encoder, base.encoder));
    CHECK_THROWS_AS(domain_adapt(noop, d.domain, quick_mlm(4, 1)), ValidationError);
    CHECK_THROWS_AS(domain_adapt(base, std::vector<TokenSequence>{}, quick_mlm(4, 1)), ValidationError);

    auto small_vocab = make_random_checkpoint(tiny_spec(20), 3);
    CHECK_THROWS_AS(domain_adapt(small_vocab, d.domain, quick_mlm(4, 1)), ValidationError);
    CHECK_THROWS_AS(generic_pretrain(tiny_spec(20), d.generic, quick_mlm(4, 1), 1), ValidationError);

    auto poisoned = base;
    poisoned.encoder.mlm_bias.value(0, 7) = std::nan("");
    CHECK_THROWS_AS(domain_adapt(poisoned, d.domain, quick_mlm(4, 1)), DivergenceError);
}

TEST_CASE("generic pretraining loss falls every epoch and adaptation lowers domain perplexity")
{
    const auto& d = small_data();
    const int vocab = static_cast<int>(d.vocab.size());
    const auto generic = generic_pretrain(tiny_spec(vocab), d.generic, quick_mlm(6, 3), 7);
    REQUIRE(generic.epoch_losses.size() == 3);
    for (std::size_t e = 1; e < generic.epoch_losses.size(); ++e) {
        CHECK(generic.epoch_losses[e] < generic.epoch_losses[e - 1]);
    }
    const auto again = generic_pretrain(tiny_spec(vocab), d.generic, quick_mlm(6, 3), 7);
    CHECK(again.epoch_losses == generic.epoch_losses);

    const auto adapted = domain_adapt(generic, d.domain, quick_mlm(8, 3));
    CHECK(adapted.stage == Stage::domain_adapted);
    const double before = masked_perplexity(generic, d.heldout, 0.15, 99);
    const double after = masked_perplexity(adapted, d.heldout, 0.15, 99);
    CHECK(after < before);
    const auto adapted_again = domain_adapt(generic, d.domain, quick_mlm(8, 3));
    CHECK(adapted_again.epoch_losses == adapted.epoch_losses);

    // A trained encoder is sensitive to token order.
    auto seq = d.heldout.front();
    REQUIRE(seq.ids.size() > 6);
    const auto ref = encode(seq, adapted).pooled;
    std::size_t a = 1;
    std::size_t b = 2;
    while (seq.ids[a] == seq.ids[b] || preprocess::is_special(seq.ids[b])) ++b;
    std::swap(seq.ids[a], seq.ids[b]);
    CHECK((encode(seq, adapted).pooled - ref).norm() > 0.0);
}
