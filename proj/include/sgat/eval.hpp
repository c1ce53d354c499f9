#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgat/attack.hpp"
#include "sgat/data.hpp"
#include "sgat/model.hpp"
#include "sgat/trainer.hpp"

namespace sgat {

struct Confusion {
  std::int64_t tp = 0;
  std::int64_t tn = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t total() const { return tp + tn + fp + fn; }
};

/// Predicted positive when score > threshold, which at 0.5 is the argmax
/// of the two class probabilities (ties go to class 0).
Confusion confusion(std::span<const double> scores, std::span<const int> labels,
                    double threshold = 0.5);

struct ConfusionMetrics {
  double acc = 0.0;
  std::optional<double> tpr;  // missing without positives
  std::optional<double> tnr;  // missing without negatives
};

ConfusionMetrics confusion_metrics(const Confusion& c);

/// P(score+ > score-) + P(tie) / 2, from midranks. Missing with one class.
std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels);

/// Sum over descending distinct thresholds of (R_k - R_{k-1}) * P_k.
/// Missing without positives.
std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const int> labels);

enum class Alternative { TwoSided, Less, Greater };
enum class MwMethod { Auto, Exact, Normal };

struct MannWhitneyResult {
  double u = 0.0;  // U statistic of sample a
  double p = 1.0;
  bool exact = false;
};

/// Rank-sum test with midranks. Auto uses the exact permutation
/// distribution when min(n, m) < 8, else the tie-corrected normal
/// approximation with continuity correction. Less: a tends to be smaller.
MannWhitneyResult mann_whitney_u(std::span<const double> a, std::span<const double> b,
                                 Alternative alternative = Alternative::TwoSided,
                                 MwMethod method = MwMethod::Auto);

struct MetricValues {
  double acc = 0.0;
  std::optional<double> tpr;
  std::optional<double> tnr;
  std::optional<double> auc;
  std::optional<double> aps;
};

MetricValues evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                             double threshold = 0.5);

/// Positive-class probabilities for every sample (inference mode).
std::vector<double> predict_scores(const Model& model, const Dataset& ds, int batch_size = 64);

/// Scores on PGD-perturbed inputs, attacking the benign cross-entropy.
std::vector<double> predict_scores_adversarial(const Model& model, const Dataset& ds,
                                               const AttackConfig& attack, std::uint64_t seed,
                                               int batch_size = 64);

struct RegimeSpec {
  std::string name;
  RegimeConfig config;
};

struct CvPlan {
  int folds = 5;
  int repeats = 3;
  double inner_validation_fraction = 0.2;
  std::vector<double> epsilon_test{0.001, 0.005};
  /// PGD internals for evaluation attacks (epsilon comes from epsilon_test).
  AttackConfig test_attack;
  double threshold = 0.5;
  int jobs = 1;
};

void to_json(nlohmann::json& j, const CvPlan& p);
void from_json(const nlohmann::json& j, CvPlan& p);

struct MetricRow {
  std::string regime;
  int repeat = 0;
  int fold = 0;
  std::string condition;  // "WD", "WD_adv_<eps>", "OOD"
  MetricValues values;
};

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  int count = 0;     // non-missing records
};

struct MetricsReport {
  std::vector<MetricRow> rows;

  /// Records for one (regime, condition); metric in acc/tpr/tnr/auc/aps.
  std::vector<double> values(const std::string& regime, const std::string& condition,
                             const std::string& metric) const;
  Aggregate aggregate(const std::string& regime, const std::string& condition,
                      const std::string& metric) const;
  std::vector<std::string> regimes() const;
  std::vector<std::string> conditions() const;
  std::string csv() const;
  nlohmann::json summary() const;
};

std::string adversarial_condition(double epsilon);

/// Sample indices into the WD set for one outer fold.
struct CvSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

/// [repeat][fold] partitions used by nested_cv.
std::vector<std::vector<CvSplit>> cv_splits(const Dataset& wd, const CvPlan& plan,
                                            std::uint64_t master_seed);

/// Called after each finished (regime, repeat, fold) job.
using CvProgress = std::function<void(const std::string& regime, int repeat, int fold)>;

/// Repeated stratified k-fold over the WD set. For each outer fold a
/// stratified inner split of the training portion supplies the validation
/// set. Non-combined regimes are tested on the held-out WD fold and on the
/// whole OOD set; the combined regime also trains on the other OOD folds
/// and is tested on the held-out OOD fold.
MetricsReport nested_cv(const Dataset& wd, const Dataset& ood, const ModelConfig& model_config,
                        const std::vector<RegimeSpec>& grid, const CvPlan& plan,
                        std::uint64_t master_seed, const CvProgress& progress = {});

}  // namespace sgat
