#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "deauville/classifiers.hpp"

namespace deauville::eval {

inline constexpr int kNumClasses = corpus::kNumClasses;

struct SplitFractions {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

struct SplitPlan {
    int iteration = 1;
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
    std::vector<std::string> test_ids;
    SplitFractions fractions;
    std::uint64_t seed = 0;
};

struct SplitSizes {
    std::size_t train = 0;
    std::size_t val = 0;
    std::size_t test = 0;
};

/// floor(f_train N), floor(f_val N), remainder.
SplitSizes split_sizes(std::size_t n, const SplitFractions& fractions);

/// Independent uniform partitions, one per iteration, each seeded from
/// (seed, iteration). With labels given, sampling is stratified by class.
std::vector<SplitPlan> make_splits(std::span<const std::string> ids, int n_iterations, const SplitFractions& fractions,
                                   std::uint64_t seed, std::span<const int> stratify_labels = {});

std::string splits_to_csv(const SplitPlan& plan);
SplitPlan split_from_csv(std::string_view text);

double accuracy(std::span<const int> truths, std::span<const int> predicted);

/// Rows are true classes, columns predicted classes (1..5 -> 0..4).
using ConfusionMatrix = Eigen::Matrix<std::int64_t, kNumClasses, kNumClasses, Eigen::RowMajor>;

ConfusionMatrix confusion_matrix(std::span<const int> truths, std::span<const int> predicted);

enum class Weighting { linear, quadratic };

std::string weighting_name(Weighting w);
Weighting parse_weighting(std::string_view name);

/// 1 - sum(w * observed) / sum(w * expected) over any square count matrix.
double weighted_kappa(const Eigen::MatrixXd& counts, Weighting weighting);
double weighted_kappa(const ConfusionMatrix& confusion, Weighting weighting);

struct FoldResult {
    int iteration = 1;
    std::vector<classifiers::Prediction> predictions;
    std::vector<int> truths;
    double accuracy = 0.0;
    double kappa = 0.0;
    ConfusionMatrix confusion = ConfusionMatrix::Zero();
};

FoldResult make_fold_result(int iteration, std::vector<classifiers::Prediction> predictions, std::vector<int> truths,
                            Weighting weighting);

struct MetricSummary {
    std::string model_name;
    Weighting weighting = Weighting::linear;
    double acc_mean = 0.0;
    double acc_sd = 0.0;
    double kappa_mean = 0.0;
    double kappa_sd = 0.0;
    std::vector<FoldResult> folds;
};

/// Mean and sample (n-1) standard deviation; independent of fold order.
MetricSummary aggregate(std::string model_name, std::vector<FoldResult> folds, Weighting weighting);

struct ExpertSummary {
    std::size_t n_cases = 0;
    double accuracy = 0.0;
    double kappa = 0.0;
    Weighting weighting = Weighting::linear;
};

/// Expert rows (exam_id, predicted_ds) scored against known truths.
ExpertSummary compare_expert(std::span<const std::pair<std::string, int>> expert,
                             const std::map<std::string, int>& truths, Weighting weighting);
std::vector<std::pair<std::string, int>> read_expert_csv(const std::filesystem::path& path);
std::map<std::string, int> read_labels_csv(const std::filesystem::path& path);

/// results.csv rows: model, weighting, acc_mean, acc_sd, kappa_mean, kappa_sd, acc_fold1.., kappa_fold1..
std::string results_csv(std::span<const MetricSummary> summaries);
std::string confusion_csv(const ConfusionMatrix& confusion);
/// Bar per summary at acc_mean with a +-acc_sd error bar.
std::string bar_chart_svg(std::span<const MetricSummary> summaries, std::string_view title);

/// Writes results.csv, results_chart.svg and confusion_<model>_<fold>.csv.
std::vector<std::filesystem::path> write_report(const std::filesystem::path& dir,
                                                std::span<const MetricSummary> summaries);

} // namespace deauville::eval
