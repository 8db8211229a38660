#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace deauville::corpus {

inline constexpr int kNumClasses = 5;

/// Physician-assigned Deauville score, always in 1..5.
class DeauvilleLabel {
public:
    explicit DeauvilleLabel(int value);

    int value() const noexcept { return value_; }

    friend auto operator<=>(const DeauvilleLabel&, const DeauvilleLabel&) = default;

private:
    int value_;
};

struct CalendarDate {
    int year = 2000;
    int month = 1;
    int day = 1;

    std::string iso() const;
    static CalendarDate parse_iso(std::string_view text);
    /// Shift by a (possibly negative) number of days.
    CalendarDate plus_days(int days) const;

    friend auto operator<=>(const CalendarDate&, const CalendarDate&) = default;
};

struct ReportDocument {
    std::string indication;
    std::string findings;
    std::string impression;

    friend bool operator==(const ReportDocument&, const ReportDocument&) = default;
};

/// Row-major intensities in [0, 1].
class GrayscaleImage {
public:
    GrayscaleImage() = default;
    GrayscaleImage(int height, int width, float fill = 0.0f);
    GrayscaleImage(int height, int width, std::vector<float> pixels);

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    float at(int row, int col) const { return pixels_[static_cast<std::size_t>(row * width_ + col)]; }
    float& at(int row, int col) { return pixels_[static_cast<std::size_t>(row * width_ + col)]; }
    std::span<const float> pixels() const noexcept { return pixels_; }
    std::span<float> pixels() noexcept { return pixels_; }

    /// Throws ValidationError on bad dimensions or out-of-range pixels.
    void validate() const;

    friend bool operator==(const GrayscaleImage&, const GrayscaleImage&) = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<float> pixels_;
};

/// A Deauville mention the generator wrote into a report.
struct PlantedMention {
    std::string template_id;
    int score = 0;
};

struct ExamRecord {
    std::string exam_id;
    ReportDocument report;
    std::optional<GrayscaleImage> image;
    std::optional<DeauvilleLabel> label;
    std::string dictator_id;
    CalendarDate exam_date;
    std::vector<PlantedMention> planted;
};

/// Intensity levels of the synthetic projection images. The lesion peak
/// bands for each score are derived from these anchors.
struct IntensityAnchors {
    double background = 0.1;
    double mediastinum = 0.35;
    double liver = 0.6;
    double moderate_margin = 0.2;

    void validate() const;
    /// Closed sampling band [lo, hi] for the lesion peak of a given score (2..5).
    std::pair<double, double> lesion_band(int score) const;
};

struct CorpusSpec {
    std::size_t n_exams = 1664;
    std::array<double, kNumClasses> class_weights{};
    /// Relative weights over mention template ids (see mention_template_ids()).
    std::vector<std::pair<std::string, double>> mention_style_mix;
    std::uint64_t seed = 0;
    int image_height = 64;
    int image_width = 64;
    bool with_images = true;
    int n_dictators = 44;
    double misspelling_rate = 0.1;
    double number_word_rate = 0.1;
    double multi_score_rate = 0.15;
    double range_rate = 0.05;
    /// Fraction of exams written without any Deauville mention (no label).
    double unscored_fraction = 0.0;
    /// Probability that a report's descriptive language follows a
    /// neighbouring score rather than the assigned one.
    double ambiguity = 0.25;
    IntensityAnchors anchors;

    /// Table-1-weighted defaults with a uniform template mix.
    static CorpusSpec defaults();
    void validate() const;
};

/// Class frequencies of the reference lymphoma cohort, DS1..DS5.
inline constexpr std::array<double, kNumClasses> kReferenceClassCounts{313, 355, 155, 221, 620};

std::array<double, kNumClasses> normalized_weights(std::span<const double> counts);

/// Ids of the mention templates the generator can emit.
const std::vector<std::string>& mention_template_ids();

CorpusSpec parse_corpus_spec(std::string_view yaml_text);
std::string corpus_spec_to_json(const CorpusSpec& spec);

std::vector<ExamRecord> generate_corpus(const CorpusSpec& spec);

/// A generated image together with the masks and levels used to draw it.
struct SyntheticImage {
    GrayscaleImage image;
    std::vector<std::uint8_t> body_mask;
    std::vector<std::uint8_t> mediastinum_mask;
    std::vector<std::uint8_t> liver_mask;
    std::vector<std::uint8_t> lesion_mask;
    double background_level = 0.0;
    double mediastinum_level = 0.0;
    double liver_level = 0.0;
    std::vector<double> lesion_peaks;
};

SyntheticImage render_image(const DeauvilleLabel& label, int height, int width, std::uint64_t seed,
                            const IntensityAnchors& anchors = {});

GrayscaleImage generate_image(const DeauvilleLabel& label, int height, int width, std::uint64_t seed,
                              const IntensityAnchors& anchors = {});

/// Plain non-clinical English documents for the generic pretraining arm.
std::vector<std::string> generate_generic_text(std::size_t n_docs, std::uint64_t seed);

struct CorpusStats {
    /// Index 0 counts unlabeled exams, 1..5 the Deauville classes.
    std::array<std::size_t, kNumClasses + 1> class_counts{};
    std::map<std::string, std::size_t> dictator_counts;
    std::size_t total = 0;
};

CorpusStats corpus_stats(std::span<const ExamRecord> corpus);

// Persistence: <dir>/manifest.json, <id>.report.json, <id>.pgm

struct CorpusManifestInfo {
    std::optional<CorpusSpec> spec;
    std::vector<std::string> exam_ids;
    std::map<std::string, std::size_t> template_counts;
    std::size_t labeled = 0;
    std::size_t unlabeled = 0;
};

void save_corpus(const std::filesystem::path& dir, std::span<const ExamRecord> records,
                 const std::optional<CorpusSpec>& spec);

/// Loads every record; images are read when present. With verify set,
/// file checksums are compared against the manifest.
std::vector<ExamRecord> load_corpus(const std::filesystem::path& dir, bool verify = false);

CorpusManifestInfo read_corpus_manifest(const std::filesystem::path& dir);

void write_pgm(const std::filesystem::path& path, const GrayscaleImage& image);
GrayscaleImage read_pgm(const std::filesystem::path& path);

std::string report_to_json(const ExamRecord& record);

} // namespace deauville::corpus
