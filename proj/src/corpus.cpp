#include "deauville/corpus.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "deauville/error.hpp"
#include "deauville/io.hpp"
#include "deauville/rng.hpp"

namespace deauville::corpus {

using nlohmann::json;

DeauvilleLabel::DeauvilleLabel(int value) : value_(value)
{
    require(value >= 1 && value <= kNumClasses,
            "Deauville label must be in 1..5, got " + std::to_string(value));
}

// ---------------------------------------------------------------- dates

std::string CalendarDate::iso() const
{
    char buffer[16];
    std::snprintf(buffer, sizeof buffer, "%04d-%02d-%02d", year, month, day);
    return buffer;
}

CalendarDate CalendarDate::parse_iso(std::string_view text)
{
    int y = 0;
    int m = 0;
    int d = 0;
    const std::string owned(text);
    require(std::sscanf(owned.c_str(), "%d-%d-%d", &y, &m, &d) == 3, "bad ISO date: " + owned);
    const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(m)},
                                          std::chrono::day{static_cast<unsigned>(d)}};
    require(ymd.ok(), "invalid calendar date: " + owned);
    return {y, m, d};
}

CalendarDate CalendarDate::plus_days(int days) const
{
    using namespace std::chrono;
    const sys_days base{year_month_day{std::chrono::year{year}, std::chrono::month{static_cast<unsigned>(month)},
                                       std::chrono::day{static_cast<unsigned>(day)}}};
    const year_month_day shifted{base + std::chrono::days{days}};
    return {static_cast<int>(shifted.year()), static_cast<int>(static_cast<unsigned>(shifted.month())),
            static_cast<int>(static_cast<unsigned>(shifted.day()))};
}

// ---------------------------------------------------------------- image type

GrayscaleImage::GrayscaleImage(int height, int width, float fill)
    : height_(height), width_(width)
{
    require(height > 0 && width > 0, "image dimensions must be positive");
    pixels_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
}

GrayscaleImage::GrayscaleImage(int height, int width, std::vector<float> pixels)
    : height_(height), width_(width), pixels_(std::move(pixels))
{
    validate();
}

void GrayscaleImage::validate() const
{
    require(height_ > 0 && width_ > 0, "image dimensions must be positive");
    require(pixels_.size() == static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_),
            "pixel count does not match declared dimensions");
    for (float v : pixels_) {
        require(v >= 0.0f && v <= 1.0f, "pixel intensity outside [0,1]");
    }
}

// ---------------------------------------------------------------- spec

void IntensityAnchors::validate() const
{
    require(background > 0.0 && background < mediastinum, "anchors need 0 < background < mediastinum");
    require(mediastinum < liver, "anchors need mediastinum < liver");
    require(moderate_margin > 0.0 && liver + moderate_margin + 0.02 < 1.0,
            "anchors need liver + moderate_margin comfortably below 1");
}

std::pair<double, double> IntensityAnchors::lesion_band(int score) const
{
    constexpr double gap = 0.02;
    switch (score) {
    case 2:
        return {background + 0.05, mediastinum - gap};
    case 3:
        return {mediastinum + gap, liver};
    case 4:
        return {liver + gap, liver + moderate_margin};
    case 5:
        return {liver + moderate_margin + gap, 1.0};
    default:
        throw ValidationError("no lesion band for score " + std::to_string(score));
    }
}

std::array<double, kNumClasses> normalized_weights(std::span<const double> counts)
{
    require(counts.size() == kNumClasses, "need exactly 5 class weights");
    double total = 0.0;
    for (double c : counts) {
        require(c >= 0.0, "class weights must be non-negative");
        total += c;
    }
    require(total > 0.0, "class weights must not all be zero");
    std::array<double, kNumClasses> out{};
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = counts[i] / total;
    }
    return out;
}

namespace {

struct MentionTemplate {
    const char* id;
    const char* surface; // {T} trigger, {S} score
    bool word_ok;
    bool range_ok;
};

const std::vector<MentionTemplate>& mention_templates()
{
    static const std::vector<MentionTemplate> templates{
        {"score_of", "{T} score of {S}", true, true},
        {"on_scale", "{S} on the {T} scale", true, true},
        {"bare", "{T} {S}", false, true},
        {"score_bare", "{T} score {S}", true, true},
        {"score_colon", "{T} score: {S}", true, true},
        {"criteria_score_of", "{T} criteria score of {S}", true, false},
        {"category", "{T} category {S}", true, true},
        {"out_of_five", "{T} {S}/5", false, false},
        {"equals", "{T} = {S}", false, false},
        {"score_is", "{T} score is {S}", true, false},
        {"scale_score", "score of {S} on the {T} scale", true, false},
        {"paren", "({T} {S})", false, true},
    };
    return templates;
}

const MentionTemplate& find_template(std::string_view id)
{
    for (const auto& t : mention_templates()) {
        if (id == t.id) {
            return t;
        }
    }
    throw ValidationError("unknown mention template id: " + std::string(id));
}

} // namespace

const std::vector<std::string>& mention_template_ids()
{
    static const std::vector<std::string> ids = [] {
        std::vector<std::string> out;
        for (const auto& t : mention_templates()) {
            out.emplace_back(t.id);
        }
        return out;
    }();
    return ids;
}

CorpusSpec CorpusSpec::defaults()
{
    CorpusSpec spec;
    spec.class_weights = normalized_weights(kReferenceClassCounts);
    for (const auto& id : mention_template_ids()) {
        spec.mention_style_mix.emplace_back(id, 1.0);
    }
    return spec;
}

void CorpusSpec::validate() const
{
    require(n_exams > 0, "n_exams must be positive");
    double total = 0.0;
    for (double w : class_weights) {
        require(w >= 0.0, "class weights must be non-negative");
        total += w;
    }
    require(std::abs(total - 1.0) <= 1e-9, "class weights must sum to 1");
    require(!mention_style_mix.empty(), "mention_style_mix must not be empty");
    double mix_total = 0.0;
    for (const auto& [id, w] : mention_style_mix) {
        find_template(id);
        require(w >= 0.0, "mention_style_mix weights must be non-negative");
        mix_total += w;
    }
    require(mix_total > 0.0, "mention_style_mix needs positive total weight");
    require(image_height >= 16 && image_width >= 16, "image size must be at least 16x16");
    require(n_dictators > 0, "n_dictators must be positive");
    for (double rate : {misspelling_rate, number_word_rate, multi_score_rate, range_rate, unscored_fraction, ambiguity}) {
        require(rate >= 0.0 && rate <= 1.0, "rates must lie in [0,1]");
    }
    anchors.validate();
}

CorpusSpec parse_corpus_spec(std::string_view yaml_text)
{
    YAML::Node document;
    try {
        document = YAML::Load(std::string(yaml_text));
    } catch (const YAML::Exception& e) {
        throw ValidationError(std::string("corpus spec parse error: ") + e.what());
    }
    const YAML::Node root = document["spec"] ? document["spec"] : document;
    CorpusSpec spec = CorpusSpec::defaults();
    try {
        if (root["n_exams"]) {
            const long long n = root["n_exams"].as<long long>();
            require(n > 0, "n_exams must be positive");
            spec.n_exams = static_cast<std::size_t>(n);
        }
        if (root["class_weights"]) {
            const auto w = root["class_weights"].as<std::vector<double>>();
            require(w.size() == kNumClasses, "class_weights needs 5 entries");
            std::copy(w.begin(), w.end(), spec.class_weights.begin());
        }
        if (root["class_frequencies"]) {
            spec.class_weights = normalized_weights(root["class_frequencies"].as<std::vector<double>>());
        }
        if (root["mention_style_mix"]) {
            spec.mention_style_mix.clear();
            for (const auto& item : root["mention_style_mix"]) {
                spec.mention_style_mix.emplace_back(item.first.as<std::string>(), item.second.as<double>());
            }
        }
        if (root["seed"]) spec.seed = root["seed"].as<std::uint64_t>();
        if (root["image_size"]) {
            const auto size = root["image_size"].as<std::vector<int>>();
            require(size.size() == 2, "image_size needs [h, w]");
            spec.image_height = size[0];
            spec.image_width = size[1];
        }
        if (root["with_images"]) spec.with_images = root["with_images"].as<bool>();
        if (root["n_dictators"]) spec.n_dictators = root["n_dictators"].as<int>();
        if (root["misspelling_rate"]) spec.misspelling_rate = root["misspelling_rate"].as<double>();
        if (root["number_word_rate"]) spec.number_word_rate = root["number_word_rate"].as<double>();
        if (root["multi_score_rate"]) spec.multi_score_rate = root["multi_score_rate"].as<double>();
        if (root["range_rate"]) spec.range_rate = root["range_rate"].as<double>();
        if (root["unscored_fraction"]) spec.unscored_fraction = root["unscored_fraction"].as<double>();
        if (root["ambiguity"]) spec.ambiguity = root["ambiguity"].as<double>();
        if (const auto a = root["anchors"]) {
            if (a["background"]) spec.anchors.background = a["background"].as<double>();
            if (a["mediastinum"]) spec.anchors.mediastinum = a["mediastinum"].as<double>();
            if (a["liver"]) spec.anchors.liver = a["liver"].as<double>();
            if (a["moderate_margin"]) spec.anchors.moderate_margin = a["moderate_margin"].as<double>();
        }
    } catch (const YAML::Exception& e) {
        throw ValidationError(std::string("corpus spec field error: ") + e.what());
    }
    spec.validate();
    return spec;
}

namespace {

json spec_json(const CorpusSpec& spec)
{
    json mix = json::object();
    for (const auto& [id, w] : spec.mention_style_mix) {
        mix[id] = w;
    }
    return json{
        {"n_exams", spec.n_exams},
        {"class_weights", spec.class_weights},
        {"mention_style_mix", mix},
        {"seed", spec.seed},
        {"image_size", {spec.image_height, spec.image_width}},
        {"with_images", spec.with_images},
        {"n_dictators", spec.n_dictators},
        {"misspelling_rate", spec.misspelling_rate},
        {"number_word_rate", spec.number_word_rate},
        {"multi_score_rate", spec.multi_score_rate},
        {"range_rate", spec.range_rate},
        {"unscored_fraction", spec.unscored_fraction},
        {"ambiguity", spec.ambiguity},
        {"anchors",
         {{"background", spec.anchors.background},
          {"mediastinum", spec.anchors.mediastinum},
          {"liver", spec.anchors.liver},
          {"moderate_margin", spec.anchors.moderate_margin}}},
    };
}

} // namespace

std::string corpus_spec_to_json(const CorpusSpec& spec)
{
    return spec_json(spec).dump(2);
}

// ---------------------------------------------------------------- report text

namespace {

// Descriptive findings are a class-neutral frame filled with a class descriptor. Each dictator
// uses a few frames and a few descriptors per class, so most phrasings are rare in any one corpus.
const std::vector<std::string>& sentence_frames()
{
    static const std::vector<std::string> frames{
        "The {site} shows {desc}.",
        "Residual {site} with {desc}, {suv} {value}.",
        "There is {desc} in the {site}.",
        "The {site} demonstrates {desc}.",
        "In the {site}, {desc}.",
        "The {site} has {desc} ({suv} {value}).",
        "Persistent {site} with {desc}.",
        "Interval change in the {site}, now with {desc}.",
        "Evaluation of the {site} reveals {desc}, {suv} {value}.",
        "{desc} is present in the {site}.",
        "The previously noted {site} now shows {desc}.",
        "Focus in the {site} with {desc}, {suv} {value} versus liver {liver}.",
    };
    return frames;
}

const std::array<std::vector<std::string>, kNumClasses>& class_descriptors()
{
    static const std::array<std::vector<std::string>, kNumClasses> descriptors{{
        {
            "no uptake above background", "no residual tracer activity", "background activity only",
            "complete resolution of uptake", "no abnormal avidity", "no appreciable metabolic activity",
            "uptake indistinguishable from background", "no focal hypermetabolism", "no measurable residual uptake",
            "resolved metabolic activity", "absent tracer accumulation", "no discernible FDG activity",
            "activity equal to surrounding soft tissue", "no metabolically active tissue",
            "an entirely photopenic appearance", "no pathologic uptake", "no persistent avidity",
            "uptake no longer evident", "complete metabolic normalization", "no tracer retention",
        },
        {
            "uptake below mediastinal blood pool", "faint activity under the blood pool",
            "trace uptake less than mediastinum", "minimal avidity beneath mediastinal reference",
            "low grade uptake below blood pool", "barely perceptible activity under mediastinum",
            "slight uptake not reaching blood pool", "a whisper of activity below the mediastinum",
            "very mild uptake inferior to blood pool", "faint tracer accumulation beneath mediastinal level",
            "minimal residual activity short of mediastinum", "subtle uptake less intense than blood pool",
            "trace avidity below aortic blood pool", "negligible uptake under mediastinal reference",
            "low level activity below mediastinal background", "dim uptake less than blood pool",
            "slight residual avidity below mediastinum", "faint metabolic activity under aortic arch level",
            "minimal uptake lower than the mediastinum", "residual trace activity beneath blood pool",
        },
        {
            "uptake above blood pool but not above liver", "activity between mediastinum and liver",
            "mild uptake equal to liver", "avidity at the level of hepatic background", "uptake similar to liver",
            "activity exceeding mediastinum yet below liver", "uptake comparable to hepatic parenchyma",
            "mild avidity matching liver", "intermediate uptake not exceeding liver", "activity isointense to liver",
            "uptake just above mediastinum", "low intermediate activity up to liver level",
            "uptake at or below hepatic reference", "mild residual avidity near liver intensity",
            "activity roughly equivalent to liver", "uptake above aortic blood pool and below liver",
            "low grade avidity bounded by liver", "mildly increased uptake not surpassing liver",
            "activity resembling hepatic background", "uptake level with the liver",
        },
        {
            "uptake moderately above liver", "activity somewhat greater than hepatic uptake",
            "avidity modestly exceeding liver", "uptake mildly higher than liver background",
            "moderately increased activity relative to liver", "uptake slightly above hepatic reference",
            "activity moderately surpassing liver", "uptake a little more intense than liver",
            "moderate avidity above hepatic parenchyma", "uptake exceeding liver to a moderate degree",
            "activity mildly brighter than liver", "moderate hypermetabolism compared with liver",
            "uptake clearly but modestly above liver", "avidity somewhat above hepatic background",
            "moderate residual hypermetabolism over liver", "activity a notch above liver",
            "uptake moderately more than hepatic", "intermediate high avidity above liver",
            "moderately elevated uptake versus liver", "activity modestly brighter than hepatic uptake",
        },
        {
            "uptake markedly above liver", "intense hypermetabolism", "avidity far exceeding liver",
            "strikingly increased uptake", "very intense tracer accumulation", "uptake many times hepatic background",
            "marked hypermetabolic activity", "avid uptake well above liver", "intensely FDG avid disease",
            "uptake substantially greater than liver", "florid hypermetabolic activity", "marked avidity",
            "uptake dramatically exceeding hepatic reference", "very high grade uptake", "extensive avid tissue",
            "uptake much brighter than liver", "intense focal hypermetabolism", "avidity greatly surpassing liver",
            "strongly increased metabolic activity", "uptake far brighter than hepatic parenchyma",
        },
    }};
    return descriptors;
}

const std::array<std::vector<std::string>, kNumClasses>& impression_phrases()
{
    static const std::array<std::vector<std::string>, kNumClasses> phrases{{
        {"Complete metabolic response.", "No evidence of active lymphoma.",
         "Resolution of previously FDG avid disease.", "No residual metabolically active disease.",
         "No scintigraphic evidence of disease.", "Metabolically inactive residual tissue.",
         "Findings indicate remission.", "Normal tracer distribution after therapy."},
        {"Complete metabolic response with minimal residual uptake.", "Near complete resolution of disease.",
         "Minimal residual activity below mediastinum.", "Favorable response with faint residual uptake.",
         "Excellent response with trace residual activity.", "Only faint residual avidity remains.",
         "Nearly resolved disease with low grade uptake.", "Marked improvement with barely detectable uptake."},
        {"Likely complete metabolic response.", "Residual uptake not exceeding liver.",
         "Favorable response with minimal residual activity.", "Mild residual uptake at the level of the liver.",
         "Good response with liver level residual activity.", "Probable remission with mild residual avidity.",
         "Residual activity of uncertain significance, not above liver.",
         "Improved disease with low level residual uptake."},
        {"Partial metabolic response.", "Residual disease with uptake above liver.",
         "Improved but persistent hypermetabolic disease.", "Persistent moderately avid lymphoma.",
         "Incomplete response with residual active disease.", "Decreased but still active lymphoma.",
         "Residual viable tumor is suspected.", "Response with persistent moderate avidity."},
        {"Progressive metabolic disease.", "No metabolic response.", "Markedly hypermetabolic lymphoma.",
         "Disease progression with new avid lesions.", "Refractory intensely avid disease.",
         "Worsening lymphoma with new sites of involvement.", "Treatment failure with avid disease.",
         "Active disease, markedly worse than before."},
    }};
    return phrases;
}

const std::vector<std::string>& sites()
{
    static const std::vector<std::string> list{
        "left cervical lymph node", "right axillary lymph node", "mediastinal lymph nodes", "spleen",
        "retroperitoneal lymph nodes", "left inguinal lymph node", "mesenteric mass", "right supraclavicular node",
        "bone marrow", "hilar lymph nodes", "para-aortic nodes", "left axillary node",
    };
    return list;
}

const std::vector<std::string>& neutral_sentences()
{
    static const std::vector<std::string> list{
        "Physiologic activity in the brain, myocardium, bowel and urinary tract.",
        "No suspicious osseous lesions.",
        "Stable small pulmonary nodules without uptake.",
        "Mild degenerative changes of the spine.",
        "Diffuse marrow uptake is likely reactive after therapy.",
        "Brown fat activity in the neck is noted.",
        "The thyroid is unremarkable.",
        "No pleural or pericardial effusion.",
    };
    return list;
}

const std::vector<std::string>& indications()
{
    static const std::vector<std::string> list{
        "Lymphoma restaging after {cycles} cycles of chemotherapy.",
        "Interim PET for Hodgkin lymphoma.",
        "End of treatment evaluation, diffuse large B-cell lymphoma.",
        "Follow up of follicular lymphoma.",
        "Staging of newly diagnosed lymphoma.",
        "Evaluate treatment response in non-Hodgkin lymphoma.",
    };
    return list;
}

const std::vector<std::string>& mention_frames()
{
    static const std::vector<std::string> list{
        "Overall {m}.", "Consistent with a {m}.", "Findings correspond to {m}.", "Assigned {m}.",
        "Response assessment: {m}.", "{m}.", "Final interpretation, {m}.", "This represents {m}.",
    };
    return list;
}

const std::vector<std::string>& misspellings()
{
    static const std::vector<std::string> list{"Deauvile", "Deuville", "Duaville", "Dauville", "Deauvill", "Deauvillle"};
    return list;
}

constexpr std::array<const char*, 5> kNumberWords{"one", "two", "three", "four", "five"};
constexpr std::array<const char*, 12> kMonths{"January", "February", "March",     "April",   "May",      "June",
                                              "July",    "August",   "September", "October", "November", "December"};

struct DictatorStyle {
    std::string id;
    std::string trigger;
    std::string suv_term;
    int date_format = 0;
    std::vector<std::size_t> frame_subset;
    std::array<std::vector<std::size_t>, kNumClasses> descriptor_subset;
    std::array<std::vector<std::size_t>, kNumClasses> impression_subset;
};

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Rng& rng)
{
    std::vector<std::size_t> indices(n);
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    rng.shuffle(indices);
    indices.resize(k);
    std::sort(indices.begin(), indices.end());
    return indices;
}

std::vector<DictatorStyle> make_dictators(const CorpusSpec& spec)
{
    static const std::vector<std::string> triggers{"Deauville", "Deauville", "deauville", "DEAUVILLE"};
    static const std::vector<std::string> suv_terms{"SUVmax", "SUV max", "standardized uptake value", "SUV",
                                                    "maximum SUV"};
    std::vector<DictatorStyle> out;
    for (int d = 0; d < spec.n_dictators; ++d) {
        Rng rng(derive_seed(spec.seed ^ 0xd1c7a70dULL, static_cast<std::uint64_t>(d)));
        DictatorStyle style;
        char buffer[16];
        std::snprintf(buffer, sizeof buffer, "dr%02d", d + 1);
        style.id = buffer;
        style.trigger = rng.pick(triggers);
        style.suv_term = rng.pick(suv_terms);
        style.date_format = static_cast<int>(rng.below(4));
        style.frame_subset = sample_indices(sentence_frames().size(), 4, rng);
        for (std::size_t c = 0; c < kNumClasses; ++c) {
            style.descriptor_subset[c] = sample_indices(class_descriptors()[c].size(), 3, rng);
            style.impression_subset[c] = sample_indices(impression_phrases()[c].size(), 3, rng);
        }
        out.push_back(std::move(style));
    }
    return out;
}

std::string format_date(const CalendarDate& date, int style)
{
    char buffer[48];
    switch (style) {
    case 0:
        std::snprintf(buffer, sizeof buffer, "%d/%d/%d", date.month, date.day, date.year);
        break;
    case 1:
        return date.iso();
    case 2:
        std::snprintf(buffer, sizeof buffer, "%d %s %d", date.day, kMonths[static_cast<std::size_t>(date.month - 1)],
                      date.year);
        break;
    default:
        std::snprintf(buffer, sizeof buffer, "%s %d, %d", kMonths[static_cast<std::size_t>(date.month - 1)], date.day,
                      date.year);
        break;
    }
    return buffer;
}

std::string format_value(double v)
{
    char buffer[32];
    std::snprintf(buffer, sizeof buffer, "%.2f", v);
    return buffer;
}

void replace_all(std::string& text, std::string_view from, std::string_view to)
{
    std::size_t pos = 0;
    while ((pos = text.find(from, pos)) != std::string::npos) {
        text.replace(pos, from.size(), to);
        pos += to.size();
    }
}

struct SuvContext {
    double liver = 2.3;
    double blood_pool = 1.5;
};

double class_value(int content_class, const SuvContext& ctx, Rng& rng)
{
    switch (content_class) {
    case 1:
        return rng.uniform(0.5, 0.9);
    case 2:
        return rng.uniform(0.8, ctx.blood_pool - 0.1);
    case 3:
        return rng.uniform(ctx.blood_pool + 0.1, ctx.liver);
    case 4:
        return ctx.liver * rng.uniform(1.1, 1.9);
    default:
        return ctx.liver * rng.uniform(2.2, 6.0);
    }
}

std::string fill_sentence(std::string sentence, int content_class, const DictatorStyle& style, const SuvContext& ctx,
                          Rng& rng)
{
    replace_all(sentence, "{site}", rng.pick(sites()));
    replace_all(sentence, "{suv}", style.suv_term);
    replace_all(sentence, "{value}", format_value(class_value(content_class, ctx, rng)));
    replace_all(sentence, "{liver}", format_value(ctx.liver));
    return sentence;
}

std::string class_sentence(int content_class, const DictatorStyle& style, const SuvContext& ctx, Rng& rng)
{
    const auto c = static_cast<std::size_t>(content_class - 1);
    std::string sentence = sentence_frames()[style.frame_subset[rng.below(style.frame_subset.size())]];
    const auto& descriptors = style.descriptor_subset[c];
    replace_all(sentence, "{desc}", class_descriptors()[c][descriptors[rng.below(descriptors.size())]]);
    sentence = fill_sentence(std::move(sentence), content_class, style, ctx, rng);
    sentence[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(sentence[0])));
    return sentence;
}

struct MentionPlan {
    std::string surface;
    std::vector<PlantedMention> planted;
};

class MentionWriter {
public:
    MentionWriter(const CorpusSpec& spec) : spec_(spec)
    {
        for (const auto& [id, w] : spec.mention_style_mix) {
            templates_.push_back(&find_template(id));
            weights_.push_back(w);
        }
    }

    /// A single mention expressing `low` (and `high` when it is a range).
    MentionPlan write(int low, int high, const DictatorStyle& style, Rng& rng) const
    {
        const bool is_range = high > low;
        std::vector<double> weights = weights_;
        for (std::size_t i = 0; i < templates_.size(); ++i) {
            if (is_range && !templates_[i]->range_ok) {
                weights[i] = 0.0;
            }
        }
        double total = 0.0;
        for (double w : weights) {
            total += w;
        }
        if (total <= 0.0) {
            // No range-capable template in the mix; fall back to a single score.
            return write(high, high, style, rng);
        }
        const MentionTemplate& tmpl = *templates_[rng.categorical(weights)];
        const bool use_word = tmpl.word_ok && rng.bernoulli(spec_.number_word_rate);
        auto score_text = [&](int s) {
            return use_word ? std::string(kNumberWords[static_cast<std::size_t>(s - 1)]) : std::to_string(s);
        };
        // Ranges are always written with digits.
        const std::string score = is_range ? std::to_string(low) + "-" + std::to_string(high) : score_text(low);
        const std::string trigger =
            rng.bernoulli(spec_.misspelling_rate) ? rng.pick(misspellings()) : style.trigger;
        std::string surface = tmpl.surface;
        replace_all(surface, "{T}", trigger);
        replace_all(surface, "{S}", score);
        MentionPlan plan;
        plan.surface = std::move(surface);
        for (int s = low; s <= high; ++s) {
            plan.planted.push_back({tmpl.id, s});
        }
        return plan;
    }

private:
    const CorpusSpec& spec_;
    std::vector<const MentionTemplate*> templates_;
    std::vector<double> weights_;
};

std::string join_sentences(const std::vector<std::string>& sentences)
{
    std::string out;
    for (const auto& s : sentences) {
        if (!out.empty()) {
            out.push_back(' ');
        }
        out += s;
    }
    return out;
}

int neighbour_class(int label, Rng& rng)
{
    if (label == 1) {
        return 2;
    }
    if (label == kNumClasses) {
        return kNumClasses - 1;
    }
    return rng.bernoulli(0.5) ? label - 1 : label + 1;
}

ExamRecord make_exam(const CorpusSpec& spec, const std::vector<DictatorStyle>& dictators,
                     const MentionWriter& writer, std::size_t index)
{
    Rng rng(derive_seed(spec.seed, index));
    ExamRecord record;
    char id[16];
    std::snprintf(id, sizeof id, "EX%05zu", index + 1);
    record.exam_id = id;

    const DictatorStyle& style = dictators[rng.below(dictators.size())];
    record.dictator_id = style.id;
    record.exam_date = CalendarDate{2008, 1, 1}.plus_days(static_cast<int>(rng.below(4018)));

    const bool scored = !rng.bernoulli(spec.unscored_fraction);
    const int label = 1 + static_cast<int>(rng.categorical(spec.class_weights));
    if (scored) {
        record.label = DeauvilleLabel(label);
    }
    const int content = rng.bernoulli(spec.ambiguity) ? neighbour_class(label, rng) : label;

    SuvContext ctx;
    ctx.liver = rng.uniform(1.8, 2.8);
    ctx.blood_pool = rng.uniform(1.2, 1.7);

    std::string indication = rng.pick(indications());
    replace_all(indication, "{cycles}", std::to_string(rng.between(2, 6)));
    record.report.indication = indication;

    // Findings: comparison, references, descriptive and neutral sentences.
    std::vector<std::string> body;
    const int n_class = rng.between(1, 3);
    for (int i = 0; i < n_class; ++i) {
        body.push_back(class_sentence(content, style, ctx, rng));
    }
    const int n_neutral = rng.between(1, 3);
    for (int i = 0; i < n_neutral; ++i) {
        body.push_back(rng.pick(neutral_sentences()));
    }
    if (rng.bernoulli(0.6)) {
        body.push_back("Liver " + style.suv_term + " " + format_value(ctx.liver) + ", mediastinal blood pool " +
                       format_value(ctx.blood_pool) + ".");
    }

    // Lesion-specific reporting: a lower-scored second lesion.
    const bool multi = scored && label >= 2 && rng.bernoulli(spec.multi_score_rate);
    const int lower = multi ? rng.between(1, label - 1) : 0;
    if (multi) {
        body.push_back(class_sentence(lower, style, ctx, rng));
    }
    rng.shuffle(body);
    const CalendarDate prior = record.exam_date.plus_days(-rng.between(60, 200));
    body.insert(body.begin(), "Comparison is made to the prior PET/CT dated " + format_date(prior, style.date_format) +
                                  ".");

    std::vector<std::string> impression;
    const auto& own_phrases = style.impression_subset[static_cast<std::size_t>(content - 1)];
    impression.push_back(impression_phrases()[static_cast<std::size_t>(content - 1)][own_phrases[rng.below(own_phrases.size())]]);
    if (rng.bernoulli(0.5)) {
        impression.push_back(class_sentence(content, style, ctx, rng));
    }

    if (scored) {
        std::string mention_sentence;
        if (multi) {
            MentionPlan high = writer.write(label, label, style, rng);
            MentionPlan low = writer.write(lower, lower, style, rng);
            std::string site_a = rng.pick(sites());
            std::string site_b = rng.pick(sites());
            if (rng.bernoulli(0.5)) {
                mention_sentence = high.surface + " for the " + site_a + " and " + low.surface + " for the " + site_b + ".";
            } else {
                mention_sentence = low.surface + " for the " + site_b + " and " + high.surface + " for the " + site_a + ".";
            }
            record.planted = high.planted;
            record.planted.insert(record.planted.end(), low.planted.begin(), low.planted.end());
            mention_sentence[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(mention_sentence[0])));
        } else {
            const bool range = label >= 2 && rng.bernoulli(spec.range_rate);
            MentionPlan plan = writer.write(range ? label - 1 : label, label, style, rng);
            std::string frame = rng.pick(mention_frames());
            replace_all(frame, "{m}", plan.surface);
            frame[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(frame[0])));
            mention_sentence = frame;
            record.planted = plan.planted;
        }
        if (rng.bernoulli(0.8)) {
            impression.push_back(mention_sentence);
        } else {
            body.push_back(mention_sentence);
        }
    } else if (rng.bernoulli(0.3)) {
        impression.push_back("Response assessment per " + style.trigger + " criteria.");
    }

    record.report.findings = join_sentences(body);
    record.report.impression = join_sentences(impression);

    if (spec.with_images) {
        // Unscored exams still get an image drawn from their underlying class.
        record.image = generate_image(DeauvilleLabel(label), spec.image_height, spec.image_width,
                                      derive_seed(spec.seed ^ 0x1a4e5ULL, index), spec.anchors);
    }
    return record;
}

} // namespace

std::vector<ExamRecord> generate_corpus(const CorpusSpec& spec)
{
    spec.validate();
    const auto dictators = make_dictators(spec);
    const MentionWriter writer(spec);
    std::vector<ExamRecord> records;
    records.reserve(spec.n_exams);
    for (std::size_t i = 0; i < spec.n_exams; ++i) {
        records.push_back(make_exam(spec, dictators, writer, i));
    }
    return records;
}

// ---------------------------------------------------------------- images

namespace {

struct Ellipse {
    double cy, cx, ry, rx;

    bool contains(double y, double x) const
    {
        const double dy = (y - cy) / ry;
        const double dx = (x - cx) / rx;
        return dy * dy + dx * dx <= 1.0;
    }
};

float quantize(double v)
{
    const double clamped = std::clamp(v, 0.0, 1.0);
    return static_cast<float>(std::round(clamped * 65535.0) / 65535.0);
}

} // namespace

SyntheticImage render_image(const DeauvilleLabel& label, int height, int width, std::uint64_t seed,
                            const IntensityAnchors& anchors)
{
    require(height >= 16 && width >= 16, "image size must be at least 16x16");
    anchors.validate();
    Rng rng(seed);
    const auto h = static_cast<double>(height);
    const auto w = static_cast<double>(width);
    auto jitter = [&] { return rng.uniform(-0.02, 0.02); };

    // Normalized anatomy; the patient's right side is on the image left.
    const Ellipse head{0.09 + jitter(), 0.5 + jitter(), 0.07, 0.07};
    const Ellipse torso{0.38 + jitter(), 0.5 + jitter(), 0.24, 0.21};
    const Ellipse left_leg{0.8, 0.41 + jitter(), 0.2, 0.07};
    const Ellipse right_leg{0.8, 0.59 + jitter(), 0.2, 0.07};
    const Ellipse mediastinum{torso.cy - 0.08 + jitter() * 0.5, torso.cx + jitter() * 0.5, 0.08, 0.045};
    const Ellipse liver{torso.cy + 0.07 + jitter() * 0.5, torso.cx - 0.1 + jitter() * 0.5, 0.06, 0.085};

    SyntheticImage out;
    out.image = GrayscaleImage(height, width, 0.0f);
    const std::size_t n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    out.body_mask.assign(n, 0);
    out.mediastinum_mask.assign(n, 0);
    out.liver_mask.assign(n, 0);
    out.lesion_mask.assign(n, 0);
    out.background_level = quantize(anchors.background);
    out.mediastinum_level = quantize(anchors.mediastinum);
    out.liver_level = quantize(anchors.liver);

    std::vector<double> values(n, 0.0);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            const double y = (r + 0.5) / h;
            const double x = (c + 0.5) / w;
            const std::size_t i = static_cast<std::size_t>(r * width + c);
            const bool neck = y > head.cy && y < torso.cy - torso.ry * 0.8 && std::abs(x - head.cx) < 0.035;
            if (head.contains(y, x) || torso.contains(y, x) || left_leg.contains(y, x) || right_leg.contains(y, x) ||
                neck) {
                out.body_mask[i] = 1;
                values[i] = anchors.background;
            }
            if (mediastinum.contains(y, x)) {
                out.mediastinum_mask[i] = 1;
                values[i] = anchors.mediastinum;
            } else if (liver.contains(y, x)) {
                out.liver_mask[i] = 1;
                values[i] = anchors.liver;
            }
        }
    }

    std::vector<std::pair<int, int>> centres;
    if (label.value() >= 2) {
        const auto [lo, hi] = anchors.lesion_band(label.value());
        const int n_lesions = rng.between(1, 3);
        const double sigma = std::max(1.0, 0.025 * std::min(h, w));
        const int radius = static_cast<int>(std::ceil(3.0 * sigma));
        for (int attempt = 0; attempt < 400 && static_cast<int>(centres.size()) < n_lesions; ++attempt) {
            const int r = rng.between(static_cast<int>(0.06 * h), static_cast<int>(0.72 * h));
            const int c = rng.between(0, width - 1);
            // The core must sit in plain body tissue; the tail is clipped below.
            bool ok = true;
            for (int dr = -1; dr <= 1 && ok; ++dr) {
                for (int dc = -1; dc <= 1 && ok; ++dc) {
                    const int rr = r + dr;
                    const int cc = c + dc;
                    if (rr < 0 || rr >= height || cc < 0 || cc >= width) {
                        ok = false;
                        break;
                    }
                    const std::size_t i = static_cast<std::size_t>(rr * width + cc);
                    if (!out.body_mask[i] || out.mediastinum_mask[i] || out.liver_mask[i]) {
                        ok = false;
                    }
                }
            }
            for (const auto& [pr, pc] : centres) {
                if (std::abs(pr - r) <= 2 * radius && std::abs(pc - c) <= 2 * radius) {
                    ok = false;
                }
            }
            if (!ok) {
                continue;
            }
            centres.emplace_back(r, c);
            const double peak = rng.uniform(lo, hi);
            for (int dr = -radius; dr <= radius; ++dr) {
                for (int dc = -radius; dc <= radius; ++dc) {
                    const int rr = r + dr;
                    const int cc = c + dc;
                    if (rr < 0 || rr >= height || cc < 0 || cc >= width) {
                        continue;
                    }
                    const std::size_t i = static_cast<std::size_t>(rr * width + cc);
                    if (!out.body_mask[i] || out.mediastinum_mask[i] || out.liver_mask[i]) {
                        continue;
                    }
                    const double blob = anchors.background +
                        (peak - anchors.background) * std::exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma));
                    if (quantize(blob) > quantize(anchors.background) && blob > values[i]) {
                        values[i] = blob;
                        out.lesion_mask[i] = 1;
                    }
                }
            }
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        out.image.pixels()[i] = quantize(values[i]);
    }
    // Centres are far enough apart that each centre pixel holds its lesion's maximum.
    for (const auto& [r, c] : centres) {
        out.lesion_peaks.push_back(out.image.at(r, c));
    }
    return out;
}

GrayscaleImage generate_image(const DeauvilleLabel& label, int height, int width, std::uint64_t seed,
                              const IntensityAnchors& anchors)
{
    return render_image(label, height, width, seed, anchors).image;
}

// ---------------------------------------------------------------- generic text

std::vector<std::string> generate_generic_text(std::size_t n_docs, std::uint64_t seed)
{
    static const std::vector<std::string> subjects{"the farmer", "a small child", "the old teacher", "my neighbour",
                                                   "the river", "a young musician", "the baker", "our team",
                                                   "the committee", "a traveller", "the cat", "the city council"};
    static const std::vector<std::string> verbs{"carried", "painted", "found", "watched", "built", "described",
                                                "visited", "repaired", "planted", "sold", "followed", "opened"};
    static const std::vector<std::string> objects{"a wooden boat", "the garden fence", "an old map", "the morning train",
                                                  "a bright kite", "the village square", "fresh bread", "the long road",
                                                  "a quiet library", "the summer festival", "a heavy box", "the harbour"};
    static const std::vector<std::string> modifiers{"in the evening", "after the storm", "with great care",
                                                    "before breakfast", "near the market", "without any help",
                                                    "during the holiday", "on a cold day", "for the first time",
                                                    "at the edge of town"};
    static const std::vector<std::string> closers{
        "Everyone agreed it was a pleasant day.", "The weather stayed mild and dry.",
        "Nobody expected such a busy week.", "It was later described in the local paper.",
        "The plan changed several times.", "Many people came to see it.", "The result was better than before.",
        "There was no reason to hurry."};
    Rng rng(derive_seed(seed, 0x9e2e71cULL));
    std::vector<std::string> docs;
    docs.reserve(n_docs);
    for (std::size_t d = 0; d < n_docs; ++d) {
        std::vector<std::string> sentences;
        const int n = rng.between(4, 8);
        for (int s = 0; s < n; ++s) {
            std::string sentence;
            if (rng.bernoulli(0.2)) {
                sentence = rng.pick(closers);
            } else {
                sentence = rng.pick(subjects) + " " + rng.pick(verbs) + " " + rng.pick(objects) + " " +
                    rng.pick(modifiers) + ".";
                if (rng.bernoulli(0.3)) {
                    sentence.insert(sentence.size() - 1, ", and it took " + std::to_string(rng.between(2, 12)) + " hours");
                }
                sentence[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(sentence[0])));
            }
            sentences.push_back(std::move(sentence));
        }
        docs.push_back(join_sentences(sentences));
    }
    return docs;
}

// ---------------------------------------------------------------- stats

CorpusStats corpus_stats(std::span<const ExamRecord> corpus)
{
    require(!corpus.empty(), "corpus_stats requires a non-empty corpus");
    CorpusStats stats;
    for (const auto& record : corpus) {
        stats.class_counts[record.label ? static_cast<std::size_t>(record.label->value()) : 0] += 1;
        stats.dictator_counts[record.dictator_id] += 1;
        stats.total += 1;
    }
    return stats;
}

// ---------------------------------------------------------------- persistence

void write_pgm(const std::filesystem::path& path, const GrayscaleImage& image)
{
    std::string data = "P5\n" + std::to_string(image.width()) + " " + std::to_string(image.height()) + "\n65535\n";
    data.reserve(data.size() + image.pixels().size() * 2);
    for (float v : image.pixels()) {
        const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 65535.0));
        data.push_back(static_cast<char>(q >> 8));
        data.push_back(static_cast<char>(q & 0xff));
    }
    io::write_text(path, data);
}

GrayscaleImage read_pgm(const std::filesystem::path& path)
{
    const std::string data = io::read_text(path);
    std::istringstream header(data);
    std::string magic;
    int width = 0;
    int height = 0;
    int maxval = 0;
    header >> magic >> width >> height >> maxval;
    if (magic != "P5" || width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) {
        throw IoError("unsupported PGM file " + path.string());
    }
    const auto offset = static_cast<std::size_t>(header.tellg()) + 1;
    const std::size_t bytes_per = maxval > 255 ? 2 : 1;
    const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    if (data.size() < offset + n * bytes_per) {
        throw IoError("truncated PGM file " + path.string());
    }
    std::vector<float> pixels(n);
    for (std::size_t i = 0; i < n; ++i) {
        unsigned value = static_cast<unsigned char>(data[offset + i * bytes_per]);
        if (bytes_per == 2) {
            value = (value << 8) | static_cast<unsigned char>(data[offset + i * 2 + 1]);
        }
        pixels[i] = static_cast<float>(static_cast<double>(value) / maxval);
    }
    return GrayscaleImage(height, width, std::move(pixels));
}

std::string report_to_json(const ExamRecord& record)
{
    json j{
        {"exam_id", record.exam_id},
        {"indication", record.report.indication},
        {"findings", record.report.findings},
        {"impression", record.report.impression},
        {"label", record.label ? json(record.label->value()) : json(nullptr)},
        {"dictator_id", record.dictator_id},
        {"exam_date", record.exam_date.iso()},
    };
    return j.dump(2) + "\n";
}

void save_corpus(const std::filesystem::path& dir, std::span<const ExamRecord> records,
                 const std::optional<CorpusSpec>& spec)
{
    std::filesystem::create_directories(dir);
    json files = json::object();
    json ids = json::array();
    std::map<std::string, std::size_t> template_counts;
    std::array<std::size_t, kNumClasses> class_counts{};
    std::size_t labeled = 0;
    for (const auto& record : records) {
        const std::string report_name = record.exam_id + ".report.json";
        const std::string text = report_to_json(record);
        io::write_text(dir / report_name, text);
        files[report_name] = io::sha256_hex(text);
        if (record.image) {
            const std::string image_name = record.exam_id + ".pgm";
            write_pgm(dir / image_name, *record.image);
            files[image_name] = io::sha256_file(dir / image_name);
        }
        ids.push_back(record.exam_id);
        for (const auto& p : record.planted) {
            template_counts[p.template_id] += 1;
        }
        if (record.label) {
            ++labeled;
            class_counts[static_cast<std::size_t>(record.label->value() - 1)] += 1;
        }
    }
    json manifest{
        {"format", "deauville-corpus/1"},
        {"spec", spec ? spec_json(*spec) : json(nullptr)},
        {"n_exams", records.size()},
        {"labeled", labeled},
        {"unlabeled", records.size() - labeled},
        {"class_counts", class_counts},
        {"template_counts", template_counts},
        {"exam_ids", ids},
        {"files", files},
    };
    io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

CorpusManifestInfo read_corpus_manifest(const std::filesystem::path& dir)
{
    json manifest;
    try {
        manifest = json::parse(io::read_text(dir / "manifest.json"));
    } catch (const json::exception& e) {
        throw ValidationError("corpus manifest unreadable: " + std::string(e.what()));
    }
    CorpusManifestInfo info;
    if (!manifest.at("spec").is_null()) {
        info.spec = parse_corpus_spec(manifest.at("spec").dump());
    }
    info.exam_ids = manifest.at("exam_ids").get<std::vector<std::string>>();
    info.template_counts = manifest.value("template_counts", std::map<std::string, std::size_t>{});
    info.labeled = manifest.value("labeled", std::size_t{0});
    info.unlabeled = manifest.value("unlabeled", std::size_t{0});
    return info;
}

std::vector<ExamRecord> load_corpus(const std::filesystem::path& dir, bool verify)
{
    json manifest;
    try {
        manifest = json::parse(io::read_text(dir / "manifest.json"));
    } catch (const json::exception& e) {
        throw ValidationError("corpus manifest unreadable: " + std::string(e.what()));
    }
    const json& files = manifest.at("files");
    std::vector<ExamRecord> records;
    for (const auto& id_json : manifest.at("exam_ids")) {
        const std::string id = id_json.get<std::string>();
        const std::string report_name = id + ".report.json";
        const std::string text = io::read_text(dir / report_name);
        if (verify && files.value(report_name, std::string{}) != io::sha256_hex(text)) {
            throw UnrecoverableStateError("checksum mismatch for " + (dir / report_name).string());
        }
        json j;
        try {
            j = json::parse(text);
        } catch (const json::exception& e) {
            throw ValidationError("bad report file " + report_name + ": " + e.what());
        }
        ExamRecord record;
        record.exam_id = id;
        record.report.indication = j.at("indication").get<std::string>();
        record.report.findings = j.at("findings").get<std::string>();
        record.report.impression = j.at("impression").get<std::string>();
        if (!j.at("label").is_null()) {
            record.label = DeauvilleLabel(j.at("label").get<int>());
        }
        record.dictator_id = j.at("dictator_id").get<std::string>();
        record.exam_date = CalendarDate::parse_iso(j.at("exam_date").get<std::string>());
        const auto image_path = dir / (id + ".pgm");
        if (std::filesystem::exists(image_path)) {
            if (verify && files.value(id + ".pgm", std::string{}) != io::sha256_file(image_path)) {
                throw UnrecoverableStateError("checksum mismatch for " + image_path.string());
            }
            record.image = read_pgm(image_path);
        }
        records.push_back(std::move(record));
    }
    return records;
}

} // namespace deauville::corpus
