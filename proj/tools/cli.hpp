#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgat/data.hpp"
#include "sgat/eval.hpp"
#include "sgat/model.hpp"
#include "sgat/trainer.hpp"

namespace sgat::cli {

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
};

/// Regimes swept by crossval. interp_aware expands to one entry per lambda.
struct GridConfig {
  std::vector<std::string> regimes{"normal", "adversarial", "interp_aware"};
  std::vector<double> lambdas{1.0, 3.0, 5.0};
};

/// Everything a run depends on. Seeds inside the nested sections are
/// replaced by values derived from the master seed.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "sgat_out";
  SyntheticConfig data;
  ModelConfig model;
  RegimeConfig train;
  CvPlan eval;
  GridConfig grid;

  void validate() const;
};

void to_json(nlohmann::json& j, const GridConfig& g);
void from_json(const nlohmann::json& j, GridConfig& g);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// "normal", "adversarial", "interp_aware_l3", ...
std::string regime_label(Regime regime, double lambda);
std::vector<RegimeSpec> build_grid(const RunConfig& config);

/// Pairwise two-sided Mann-Whitney tests between every two regimes of a
/// report, per condition and metric, as CSV.
std::string pvalue_table(const MetricsReport& report);
/// Long-format table regime,lambda,condition,metric,mean,std,n.
std::string lambda_table(const MetricsReport& report, const std::vector<RegimeSpec>& grid);

/// Parses argv and runs one subcommand. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sgat::cli
