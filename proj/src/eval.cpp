#include "deauville/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include "deauville/error.hpp"
#include "deauville/io.hpp"
#include "deauville/rng.hpp"

namespace deauville::eval {

SplitSizes split_sizes(std::size_t n, const SplitFractions& f)
{
    require(f.train >= 0.0 && f.val >= 0.0 && f.test >= 0.0, "split fractions must be non-negative");
    require(std::abs(f.train + f.val + f.test - 1.0) <= 1e-9, "split fractions must sum to 1");
    SplitSizes s;
    // The epsilon keeps exact products such as 0.8 * 10 from flooring to 7.
    s.train = static_cast<std::size_t>(std::floor(f.train * static_cast<double>(n) + 1e-9));
    s.val = static_cast<std::size_t>(std::floor(f.val * static_cast<double>(n) + 1e-9));
    s.test = n - s.train - s.val;
    return s;
}

std::vector<SplitPlan> make_splits(std::span<const std::string> ids, int n_iterations, const SplitFractions& fractions,
                                   std::uint64_t seed, std::span<const int> stratify_labels)
{
    const SplitSizes sizes = split_sizes(ids.size(), fractions);
    require(ids.size() >= 10, "need at least 10 exams to split");
    require(n_iterations >= 1, "need at least one iteration");
    require(std::set<std::string>(ids.begin(), ids.end()).size() == ids.size(), "exam ids must be unique");
    require(stratify_labels.empty() || stratify_labels.size() == ids.size(),
            "stratification labels must align with ids");

    std::vector<SplitPlan> plans;
    for (int it = 1; it <= n_iterations; ++it) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(it)));
        std::vector<std::size_t> order(ids.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order);
        if (!stratify_labels.empty()) {
            // Rank within class, then interleave classes by relative rank.
            std::map<int, std::size_t> class_size;
            for (std::size_t i : order) {
                ++class_size[stratify_labels[i]];
            }
            std::map<int, std::size_t> seen;
            std::vector<std::tuple<double, int, std::size_t>> keyed;
            for (std::size_t i : order) {
                const int c = stratify_labels[i];
                const double key = (static_cast<double>(seen[c]++) + 0.5) / static_cast<double>(class_size[c]);
                keyed.emplace_back(key, c, i);
            }
            std::sort(keyed.begin(), keyed.end());
            for (std::size_t k = 0; k < keyed.size(); ++k) {
                order[k] = std::get<2>(keyed[k]);
            }
        }
        SplitPlan plan;
        plan.iteration = it;
        plan.fractions = fractions;
        plan.seed = seed;
        for (std::size_t k = 0; k < order.size(); ++k) {
            const std::string& id = ids[order[k]];
            if (k < sizes.train) {
                plan.train_ids.push_back(id);
            } else if (k < sizes.train + sizes.val) {
                plan.val_ids.push_back(id);
            } else {
                plan.test_ids.push_back(id);
            }
        }
        plans.push_back(std::move(plan));
    }
    return plans;
}

std::string splits_to_csv(const SplitPlan& plan)
{
    std::ostringstream out;
    out << "# iteration=" << plan.iteration << " seed=" << plan.seed << "\n";
    out << "exam_id,set\n";
    for (const auto& id : plan.train_ids) out << id << ",train\n";
    for (const auto& id : plan.val_ids) out << id << ",val\n";
    for (const auto& id : plan.test_ids) out << id << ",test\n";
    return out.str();
}

SplitPlan split_from_csv(std::string_view text)
{
    SplitPlan plan;
    std::istringstream in{std::string(text)};
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        if (line[0] == '#') {
            unsigned long long seed = 0;
            int iteration = 0;
            if (std::sscanf(line.c_str(), "# iteration=%d seed=%llu", &iteration, &seed) == 2) {
                plan.iteration = iteration;
                plan.seed = seed;
            }
            continue;
        }
        if (header) {
            header = false;
            if (line.starts_with("exam_id")) {
                continue;
            }
        }
        const auto fields = io::split_csv_line(line);
        require(fields.size() == 2, "split file rows must be exam_id,set");
        if (fields[1] == "train") plan.train_ids.push_back(fields[0]);
        else if (fields[1] == "val") plan.val_ids.push_back(fields[0]);
        else if (fields[1] == "test") plan.test_ids.push_back(fields[0]);
        else throw ValidationError("unknown split set: " + fields[1]);
    }
    return plan;
}

double accuracy(std::span<const int> truths, std::span<const int> predicted)
{
    require(!truths.empty(), "accuracy of an empty prediction set is undefined");
    require(truths.size() == predicted.size(), "truth and prediction counts differ");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
        hits += truths[i] == predicted[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(truths.size());
}

ConfusionMatrix confusion_matrix(std::span<const int> truths, std::span<const int> predicted)
{
    require(truths.size() == predicted.size(), "truth and prediction counts differ");
    ConfusionMatrix m = ConfusionMatrix::Zero();
    for (std::size_t i = 0; i < truths.size(); ++i) {
        require(truths[i] >= 1 && truths[i] <= kNumClasses && predicted[i] >= 1 && predicted[i] <= kNumClasses,
                "class labels must be in 1..5");
        ++m(truths[i] - 1, predicted[i] - 1);
    }
    return m;
}

std::string weighting_name(Weighting w)
{
    return w == Weighting::linear ? "linear" : "quadratic";
}

Weighting parse_weighting(std::string_view name)
{
    if (name == "linear") return Weighting::linear;
    if (name == "quadratic") return Weighting::quadratic;
    throw ValidationError("unknown kappa weighting: " + std::string(name));
}

double weighted_kappa(const Eigen::MatrixXd& counts, Weighting weighting)
{
    require(counts.rows() == counts.cols() && counts.rows() > 0, "kappa needs a square matrix");
    require((counts.array() >= 0.0).all(), "confusion counts must be non-negative");
    const double total = counts.sum();
    require(total > 0.0, "confusion matrix is empty");
    const Eigen::VectorXd rows = counts.rowwise().sum();
    const Eigen::RowVectorXd cols = counts.colwise().sum();
    double observed = 0.0;
    double expected = 0.0;
    for (Eigen::Index i = 0; i < counts.rows(); ++i) {
        for (Eigen::Index j = 0; j < counts.cols(); ++j) {
            const double d = static_cast<double>(i - j);
            const double w = weighting == Weighting::linear ? std::abs(d) : d * d;
            observed += w * counts(i, j);
            expected += w * rows(i) * cols(j);
        }
    }
    if (expected == 0.0) {
        throw UndefinedKappaError("weighted kappa undefined: expected disagreement is zero");
    }
    return 1.0 - total * observed / expected;
}

double weighted_kappa(const ConfusionMatrix& confusion, Weighting weighting)
{
    return weighted_kappa(Eigen::MatrixXd(confusion.cast<double>()), weighting);
}

FoldResult make_fold_result(int iteration, std::vector<classifiers::Prediction> predictions, std::vector<int> truths,
                            Weighting weighting)
{
    require(predictions.size() == truths.size(), "prediction and truth counts differ");
    std::vector<int> predicted;
    for (const auto& p : predictions) {
        predicted.push_back(p.predicted);
    }
    FoldResult fold;
    fold.iteration = iteration;
    fold.accuracy = accuracy(truths, predicted);
    fold.confusion = confusion_matrix(truths, predicted);
    fold.kappa = weighted_kappa(fold.confusion, weighting);
    fold.predictions = std::move(predictions);
    fold.truths = std::move(truths);
    return fold;
}

namespace {

std::pair<double, double> mean_sd(std::vector<double> values)
{
    std::sort(values.begin(), values.end());
    const auto n = static_cast<double>(values.size());
    double sum = 0.0;
    for (double v : values) sum += v;
    const double mean = sum / n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / (n - 1.0))};
}

} // namespace

MetricSummary aggregate(std::string model_name, std::vector<FoldResult> folds, Weighting weighting)
{
    require(folds.size() >= 2, "at least two folds are needed for a standard deviation");
    std::vector<double> accs;
    std::vector<double> kappas;
    for (const auto& f : folds) {
        accs.push_back(f.accuracy);
        kappas.push_back(f.kappa);
    }
    MetricSummary s;
    s.model_name = std::move(model_name);
    s.weighting = weighting;
    std::tie(s.acc_mean, s.acc_sd) = mean_sd(accs);
    std::tie(s.kappa_mean, s.kappa_sd) = mean_sd(kappas);
    std::stable_sort(folds.begin(), folds.end(),
                     [](const FoldResult& a, const FoldResult& b) { return a.iteration < b.iteration; });
    s.folds = std::move(folds);
    return s;
}

ExpertSummary compare_expert(std::span<const std::pair<std::string, int>> expert,
                             const std::map<std::string, int>& truths, Weighting weighting)
{
    require(!expert.empty(), "expert file has no predictions");
    std::vector<int> t;
    std::vector<int> p;
    std::set<std::string> seen;
    for (const auto& [id, score] : expert) {
        const auto it = truths.find(id);
        require(it != truths.end(), "expert file references unknown exam " + id);
        require(score >= 1 && score <= kNumClasses, "expert score out of range for exam " + id);
        require(seen.insert(id).second, "expert file lists exam " + id + " twice");
        t.push_back(it->second);
        p.push_back(score);
    }
    ExpertSummary s;
    s.n_cases = expert.size();
    s.accuracy = accuracy(t, p);
    s.kappa = weighted_kappa(confusion_matrix(t, p), weighting);
    s.weighting = weighting;
    return s;
}

std::vector<std::pair<std::string, int>> read_expert_csv(const std::filesystem::path& path)
{
    std::vector<std::pair<std::string, int>> rows;
    bool first = true;
    for (const auto& line : io::read_lines(path)) {
        if (line.empty()) continue;
        const auto fields = io::split_csv_line(line);
        if (first) {
            first = false;
            if (fields.size() >= 1 && fields[0] == "exam_id") continue;
        }
        require(fields.size() >= 2, "expert rows must be exam_id,predicted_ds");
        try {
            rows.emplace_back(fields[0], std::stoi(fields[1]));
        } catch (const std::exception&) {
            throw ValidationError("expert score is not an integer: " + fields[1]);
        }
    }
    return rows;
}

std::map<std::string, int> read_labels_csv(const std::filesystem::path& path)
{
    std::map<std::string, int> labels;
    bool first = true;
    for (const auto& line : io::read_lines(path)) {
        if (line.empty()) continue;
        const auto fields = io::split_csv_line(line);
        if (first) {
            first = false;
            if (!fields.empty() && fields[0] == "exam_id") continue;
        }
        require(fields.size() >= 2, "label rows must start with exam_id,label");
        if (fields[1].empty()) {
            continue; // excluded exam
        }
        labels[fields[0]] = std::stoi(fields[1]);
    }
    return labels;
}

std::string results_csv(std::span<const MetricSummary> summaries)
{
    std::size_t n_folds = 0;
    for (const auto& s : summaries) n_folds = std::max(n_folds, s.folds.size());
    std::ostringstream out;
    out << "model,weighting,acc_mean,acc_sd,kappa_mean,kappa_sd";
    for (std::size_t k = 1; k <= n_folds; ++k) out << ",acc_fold" << k;
    for (std::size_t k = 1; k <= n_folds; ++k) out << ",kappa_fold" << k;
    out << "\n";
    for (const auto& s : summaries) {
        out << s.model_name << "," << weighting_name(s.weighting) << "," << io::format_double(s.acc_mean) << ","
            << io::format_double(s.acc_sd) << "," << io::format_double(s.kappa_mean) << ","
            << io::format_double(s.kappa_sd);
        for (std::size_t k = 0; k < n_folds; ++k) {
            out << "," << (k < s.folds.size() ? io::format_double(s.folds[k].accuracy) : "");
        }
        for (std::size_t k = 0; k < n_folds; ++k) {
            out << "," << (k < s.folds.size() ? io::format_double(s.folds[k].kappa) : "");
        }
        out << "\n";
    }
    return out.str();
}

std::string confusion_csv(const ConfusionMatrix& confusion)
{
    std::ostringstream out;
    out << "true\\pred";
    for (int j = 1; j <= kNumClasses; ++j) out << "," << j;
    out << "\n";
    for (int i = 0; i < kNumClasses; ++i) {
        out << i + 1;
        for (int j = 0; j < kNumClasses; ++j) out << "," << confusion(i, j);
        out << "\n";
    }
    return out.str();
}

std::string bar_chart_svg(std::span<const MetricSummary> summaries, std::string_view title)
{
    const int bar_w = 60;
    const int gap = 40;
    const int left = 60;
    const int top = 40;
    const int plot_h = 300;
    const int width = left + static_cast<int>(summaries.size()) * (bar_w + gap) + gap;
    const int height = top + plot_h + 80;
    auto y_of = [&](double v) { return top + plot_h - std::clamp(v, 0.0, 1.0) * plot_h; };
    char buf[512];
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    out << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title
        << "</text>\n";
    out << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h
        << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << width - 10 << "\" y2=\""
        << top + plot_h << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 10; t += 2) {
        const double v = t / 10.0;
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%d\" y1=\"%.1f\" x2=\"%d\" y2=\"%.1f\" stroke=\"#ccc\"/>\n"
                      "<text x=\"%d\" y=\"%.1f\" text-anchor=\"end\">%.1f</text>\n",
                      left - 4, y_of(v), width - 10, y_of(v), left - 8, y_of(v) + 4, v);
        out << buf;
    }
    for (std::size_t i = 0; i < summaries.size(); ++i) {
        const auto& s = summaries[i];
        const int x = left + gap + static_cast<int>(i) * (bar_w + gap);
        const double y = y_of(s.acc_mean);
        std::snprintf(buf, sizeof buf,
                      "<g class=\"bar\" data-model=\"%s\" data-mean=\"%.6f\" data-sd=\"%.6f\">\n"
                      "<rect x=\"%d\" y=\"%.1f\" width=\"%d\" height=\"%.1f\" fill=\"#4c72b0\"/>\n",
                      s.model_name.c_str(), s.acc_mean, s.acc_sd, x, y, bar_w, top + plot_h - y);
        out << buf;
        const double cx = x + bar_w / 2.0;
        const double lo = y_of(s.acc_mean - s.acc_sd);
        const double hi = y_of(s.acc_mean + s.acc_sd);
        std::snprintf(buf, sizeof buf,
                      "<line class=\"errorbar\" x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n"
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n"
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                      cx, lo, cx, hi, cx - 8, lo, cx + 8, lo, cx - 8, hi, cx + 8, hi);
        out << buf;
        std::snprintf(buf, sizeof buf,
                      "<text x=\"%.1f\" y=\"%d\" text-anchor=\"middle\">%s</text>\n"
                      "<text x=\"%.1f\" y=\"%d\" text-anchor=\"middle\">%.1f&#177;%.1f%%</text>\n</g>\n",
                      cx, top + plot_h + 18, s.model_name.c_str(), cx, top + plot_h + 34, 100.0 * s.acc_mean,
                      100.0 * s.acc_sd);
        out << buf;
    }
    out << "<text x=\"15\" y=\"" << top + plot_h / 2 << "\" transform=\"rotate(-90 15 " << top + plot_h / 2
        << ")\" text-anchor=\"middle\">5-class accuracy</text>\n";
    out << "</svg>\n";
    return out.str();
}

std::vector<std::filesystem::path> write_report(const std::filesystem::path& dir,
                                                std::span<const MetricSummary> summaries)
{
    require(!summaries.empty(), "report needs at least one summary");
    std::vector<std::filesystem::path> written;
    io::write_text(dir / "results.csv", results_csv(summaries));
    written.push_back(dir / "results.csv");
    io::write_text(dir / "results_chart.svg", bar_chart_svg(summaries, "Mean 5-class accuracy (error bars: SD)"));
    written.push_back(dir / "results_chart.svg");
    for (const auto& s : summaries) {
        for (const auto& f : s.folds) {
            const auto path = dir / ("confusion_" + s.model_name + "_" + std::to_string(f.iteration) + ".csv");
            io::write_text(path, confusion_csv(f.confusion));
            written.push_back(path);
        }
    }
    return written;
}

} // namespace deauville::eval
