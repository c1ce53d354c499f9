#include "sgat/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

#include "sgat/autograd.hpp"

namespace sgat {

namespace {

void check_lengths(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw ShapeError("metrics: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l != 0 && l != 1) throw ContractError("labels must be 0 or 1");
  }
}

// Midranks times two, so ties stay integral.
std::vector<std::int64_t> doubled_midranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<std::int64_t> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    // Positions i..j (0-based) share the rank ((i+1)+(j+1))/2.
    const auto twice = static_cast<std::int64_t>(i + j + 2);
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = twice;
    i = j + 1;
  }
  return r;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

Confusion confusion(std::span<const double> scores, std::span<const int> labels,
                    double threshold) {
  check_lengths(scores, labels);
  Confusion c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] > threshold;
    if (labels[i] == 1) {
      (pred ? c.tp : c.fn)++;
    } else {
      (pred ? c.fp : c.tn)++;
    }
  }
  return c;
}

ConfusionMetrics confusion_metrics(const Confusion& c) {
  if (c.total() == 0) throw ContractError("confusion metrics of an empty record");
  ConfusionMetrics m;
  m.acc = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  if (c.tp + c.fn > 0) m.tpr = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (c.tn + c.fp > 0) m.tnr = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  return m;
}

std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores, labels);
  const auto ranks = doubled_midranks(scores);
  std::int64_t n_pos = 0;
  std::int64_t rank_sum2 = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      ++n_pos;
      rank_sum2 += ranks[i];
    }
  }
  const auto n_neg = static_cast<std::int64_t>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  return static_cast<double>(rank_sum2 - n_pos * (n_pos + 1)) /
         static_cast<double>(2 * n_pos * n_neg);
}

std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const int> labels) {
  check_lengths(scores, labels);
  const auto n_pos = std::count(labels.begin(), labels.end(), 1);
  if (n_pos == 0) return std::nullopt;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  double prev_recall = 0.0;
  std::int64_t tp = 0;
  std::int64_t seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += labels[order[j]];
      ++seen;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    ap += (recall - prev_recall) * static_cast<double>(tp) / static_cast<double>(seen);
    prev_recall = recall;
    i = j;
  }
  return ap;
}

MannWhitneyResult mann_whitney_u(std::span<const double> a, std::span<const double> b,
                                 Alternative alternative, MwMethod method) {
  if (a.empty() || b.empty()) throw ContractError("Mann-Whitney U needs two nonempty samples");
  const auto n = static_cast<std::int64_t>(a.size());
  const auto m = static_cast<std::int64_t>(b.size());
  const std::int64_t total = n + m;
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  const auto ranks = doubled_midranks(pooled);
  std::int64_t rank_sum2 = 0;
  for (std::int64_t i = 0; i < n; ++i) rank_sum2 += ranks[static_cast<std::size_t>(i)];

  MannWhitneyResult res;
  res.u = static_cast<double>(rank_sum2 - n * (n + 1)) / 2.0;
  if (std::all_of(pooled.begin(), pooled.end(), [&](double v) { return v == pooled[0]; })) {
    res.p = 1.0;
    res.exact = method != MwMethod::Normal && std::min(n, m) < 8;
    return res;
  }
  const bool exact = method == MwMethod::Exact || (method == MwMethod::Auto && std::min(n, m) < 8);
  res.exact = exact;
  if (exact) {
    // Distribution of the doubled rank sum over all C(n+m, n) subsets.
    const std::int64_t max_sum = std::accumulate(ranks.begin(), ranks.end(), std::int64_t{0});
    std::vector<std::vector<double>> count(static_cast<std::size_t>(n + 1),
                                           std::vector<double>(static_cast<std::size_t>(max_sum + 1), 0.0));
    count[0][0] = 1.0;
    for (std::int64_t item = 0; item < total; ++item) {
      const auto r = ranks[static_cast<std::size_t>(item)];
      for (std::int64_t k = std::min(n, item + 1); k >= 1; --k) {
        auto& dst = count[static_cast<std::size_t>(k)];
        const auto& src = count[static_cast<std::size_t>(k - 1)];
        for (std::int64_t s = max_sum; s >= r; --s) {
          dst[static_cast<std::size_t>(s)] += src[static_cast<std::size_t>(s - r)];
        }
      }
    }
    const auto& dist = count[static_cast<std::size_t>(n)];
    double all = 0.0;
    double le = 0.0;
    double ge = 0.0;
    for (std::int64_t s = 0; s <= max_sum; ++s) {
      const double c = dist[static_cast<std::size_t>(s)];
      all += c;
      if (s <= rank_sum2) le += c;
      if (s >= rank_sum2) ge += c;
    }
    const double p_le = le / all;
    const double p_ge = ge / all;
    switch (alternative) {
      case Alternative::Less:
        res.p = p_le;
        break;
      case Alternative::Greater:
        res.p = p_ge;
        break;
      case Alternative::TwoSided:
        res.p = std::min(1.0, 2.0 * std::min(p_le, p_ge));
        break;
    }
    return res;
  }
  // Tie-corrected normal approximation with continuity correction.
  std::map<std::int64_t, std::int64_t> ties;
  for (auto r : ranks) ++ties[r];
  double tie_term = 0.0;
  for (const auto& [r, t] : ties) tie_term += static_cast<double>(t * t * t - t);
  const double nd = static_cast<double>(n);
  const double md = static_cast<double>(m);
  const double nt = static_cast<double>(total);
  const double mu = nd * md / 2.0;
  const double sd = std::sqrt(nd * md / 12.0 * ((nt + 1.0) - tie_term / (nt * (nt - 1.0))));
  switch (alternative) {
    case Alternative::Less:
      res.p = normal_cdf((res.u - mu + 0.5) / sd);
      break;
    case Alternative::Greater:
      res.p = 1.0 - normal_cdf((res.u - mu - 0.5) / sd);
      break;
    case Alternative::TwoSided: {
      const double big = std::max(res.u, nd * md - res.u);
      res.p = std::min(1.0, 2.0 * (1.0 - normal_cdf((big - mu - 0.5) / sd)));
      break;
    }
  }
  return res;
}

MetricValues evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                             double threshold) {
  const auto cm = confusion_metrics(confusion(scores, labels, threshold));
  MetricValues v;
  v.acc = cm.acc;
  v.tpr = cm.tpr;
  v.tnr = cm.tnr;
  v.auc = roc_auc(scores, labels);
  v.aps = average_precision(scores, labels);
  return v;
}

std::vector<double> predict_scores(const Model& model, const Dataset& ds, int batch_size) {
  std::vector<double> out;
  out.reserve(ds.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      idx.push_back(i);
    }
    const auto p = predict_proba(model, ds.batch(idx, model.dense_weight.dtype())).values();
    for (std::size_t i = 0; i < idx.size(); ++i) out.push_back(p[i * 2 + 1]);
  }
  return out;
}

std::vector<double> predict_scores_adversarial(const Model& model, const Dataset& ds,
                                               const AttackConfig& attack, std::uint64_t seed,
                                               int batch_size) {
  Rng rng(seed);
  std::vector<double> out;
  out.reserve(ds.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      idx.push_back(i);
    }
    const auto labels = ds.labels(idx);
    Tensor x = ds.batch(idx, model.dense_weight.dtype());
    Tensor x_adv = attack_batch(model, x, labels, attack, 0.0, SaliencyMode::Detached, rng);
    const auto p = predict_proba(model, x_adv).values();
    for (std::size_t i = 0; i < idx.size(); ++i) out.push_back(p[i * 2 + 1]);
  }
  return out;
}

void to_json(nlohmann::json& j, const CvPlan& p) {
  j = nlohmann::json{{"folds", p.folds},
                     {"repeats", p.repeats},
                     {"inner_validation_fraction", p.inner_validation_fraction},
                     {"epsilon_test", p.epsilon_test},
                     {"test_attack", p.test_attack},
                     {"threshold", p.threshold},
                     {"jobs", p.jobs}};
}

void from_json(const nlohmann::json& j, CvPlan& p) {
  CvPlan d;
  p.folds = j.value("folds", d.folds);
  p.repeats = j.value("repeats", d.repeats);
  p.inner_validation_fraction = j.value("inner_validation_fraction", d.inner_validation_fraction);
  p.epsilon_test = j.value("epsilon_test", d.epsilon_test);
  p.test_attack = j.value("test_attack", d.test_attack);
  p.threshold = j.value("threshold", d.threshold);
  p.jobs = j.value("jobs", d.jobs);
}

namespace {

std::optional<double> metric_of(const MetricValues& v, const std::string& metric) {
  if (metric == "acc") return v.acc;
  if (metric == "tpr") return v.tpr;
  if (metric == "tnr") return v.tnr;
  if (metric == "auc") return v.auc;
  if (metric == "aps") return v.aps;
  throw ContractError("unknown metric '" + metric + "'");
}

const char* const kMetrics[] = {"acc", "tpr", "tnr", "auc", "aps"};

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", *v);
  return buf;
}

}  // namespace

std::vector<double> MetricsReport::values(const std::string& regime, const std::string& condition,
                                          const std::string& metric) const {
  std::vector<double> out;
  for (const auto& r : rows) {
    if (r.regime != regime || r.condition != condition) continue;
    if (auto v = metric_of(r.values, metric)) out.push_back(*v);
  }
  return out;
}

Aggregate MetricsReport::aggregate(const std::string& regime, const std::string& condition,
                                   const std::string& metric) const {
  const auto v = values(regime, condition, metric);
  Aggregate a;
  a.count = static_cast<int>(v.size());
  if (v.empty()) return a;
  for (double x : v) a.mean += x;
  a.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - a.mean) * (x - a.mean);
  a.std = std::sqrt(ss / static_cast<double>(v.size()));
  return a;
}

std::vector<std::string> MetricsReport::regimes() const {
  std::vector<std::string> out;
  for (const auto& r : rows) {
    if (std::find(out.begin(), out.end(), r.regime) == out.end()) out.push_back(r.regime);
  }
  return out;
}

std::vector<std::string> MetricsReport::conditions() const {
  std::vector<std::string> out;
  for (const auto& r : rows) {
    if (std::find(out.begin(), out.end(), r.condition) == out.end()) out.push_back(r.condition);
  }
  return out;
}

std::string MetricsReport::csv() const {
  std::string out = "regime,repeat,fold,condition,acc,tpr,tnr,auc,aps\n";
  for (const auto& r : rows) {
    out += r.regime + "," + std::to_string(r.repeat) + "," + std::to_string(r.fold) + "," +
           r.condition + "," + fmt_opt(r.values.acc) + "," + fmt_opt(r.values.tpr) + "," +
           fmt_opt(r.values.tnr) + "," + fmt_opt(r.values.auc) + "," + fmt_opt(r.values.aps) +
           "\n";
  }
  return out;
}

nlohmann::json MetricsReport::summary() const {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& regime : regimes()) {
    nlohmann::json per_regime = nlohmann::json::object();
    for (const auto& cond : conditions()) {
      nlohmann::json per_cond = nlohmann::json::object();
      bool any = false;
      for (const char* metric : kMetrics) {
        const auto a = aggregate(regime, cond, metric);
        if (a.count > 0) {
          per_cond[metric] = {{"mean", a.mean}, {"std", a.std}, {"n", a.count}};
          any = true;
        } else {
          per_cond[metric] = nullptr;
        }
      }
      if (any) per_regime[cond] = per_cond;
    }
    out[regime] = per_regime;
  }
  return out;
}

std::string adversarial_condition(double epsilon) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "WD_adv_%g", epsilon);
  return buf;
}

std::vector<std::vector<CvSplit>> cv_splits(const Dataset& wd, const CvPlan& plan,
                                            std::uint64_t master_seed) {
  if (plan.folds < 2 || plan.repeats < 1) throw ConfigError("need >= 2 folds and >= 1 repeat");
  if (!(plan.inner_validation_fraction > 0.0 && plan.inner_validation_fraction < 1.0)) {
    throw ConfigError("inner_validation_fraction must be in (0, 1)");
  }
  std::vector<std::vector<CvSplit>> out;
  for (int r = 0; r < plan.repeats; ++r) {
    const auto ur = static_cast<std::uint64_t>(r);
    const auto folds = stratified_folds(wd, plan.folds, derive_seed(master_seed, {ur, 0}));
    std::vector<CvSplit> per_fold;
    for (int f = 0; f < plan.folds; ++f) {
      std::vector<std::size_t> outer;
      for (int o = 0; o < plan.folds; ++o) {
        if (o == f) continue;
        outer.insert(outer.end(), folds[static_cast<std::size_t>(o)].begin(),
                     folds[static_cast<std::size_t>(o)].end());
      }
      std::sort(outer.begin(), outer.end());
      const auto inner = stratified_split(
          wd.subset(outer), {1.0 - plan.inner_validation_fraction, plan.inner_validation_fraction},
          derive_seed(master_seed, {ur, static_cast<std::uint64_t>(f), 2}));
      CvSplit s;
      for (auto i : inner[0]) s.train.push_back(outer[i]);
      for (auto i : inner[1]) s.validation.push_back(outer[i]);
      s.test = folds[static_cast<std::size_t>(f)];
      per_fold.push_back(std::move(s));
    }
    out.push_back(std::move(per_fold));
  }
  return out;
}

MetricsReport nested_cv(const Dataset& wd, const Dataset& ood, const ModelConfig& model_config,
                        const std::vector<RegimeSpec>& grid, const CvPlan& plan,
                        std::uint64_t master_seed, const CvProgress& progress) {
  if (grid.empty()) throw ConfigError("empty regime grid");
  for (const auto& g : grid) g.config.validate();
  model_config.validate();

  const auto splits = cv_splits(wd, plan, master_seed);
  std::vector<std::vector<std::vector<std::size_t>>> ood_folds;
  const bool any_combined = std::any_of(grid.begin(), grid.end(),
                                        [](const auto& g) { return g.config.regime == Regime::Combined; });
  for (int r = 0; any_combined && r < plan.repeats; ++r) {
    ood_folds.push_back(stratified_folds(ood, plan.folds, derive_seed(master_seed, {static_cast<std::uint64_t>(r), 1})));
  }

  struct Job {
    std::size_t g;
    int repeat;
    int fold;
  };
  std::vector<Job> jobs;
  for (int r = 0; r < plan.repeats; ++r)
    for (int f = 0; f < plan.folds; ++f)
      for (std::size_t g = 0; g < grid.size(); ++g) jobs.push_back({g, r, f});

  std::vector<std::vector<MetricRow>> results(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::mutex progress_mutex;

  auto run_job = [&](std::size_t j) {
    const Job job = jobs[j];
    const auto ur = static_cast<std::uint64_t>(job.repeat);
    const auto uf = static_cast<std::uint64_t>(job.fold);
    const auto ug = static_cast<std::uint64_t>(job.g);
    const CvSplit& split = splits[static_cast<std::size_t>(job.repeat)][static_cast<std::size_t>(job.fold)];
    Dataset train = wd.subset(split.train);
    const Dataset val = wd.subset(split.validation);
    const Dataset test = wd.subset(split.test);

    const auto& spec = grid[job.g];
    Dataset ood_test = ood;
    if (spec.config.regime == Regime::Combined) {
      const auto& of = ood_folds[static_cast<std::size_t>(job.repeat)];
      std::vector<std::size_t> ood_train;
      for (int f = 0; f < plan.folds; ++f) {
        if (f == job.fold) continue;
        ood_train.insert(ood_train.end(), of[static_cast<std::size_t>(f)].begin(),
                         of[static_cast<std::size_t>(f)].end());
      }
      std::sort(ood_train.begin(), ood_train.end());
      train = Dataset::merge(train, ood.subset(ood_train));
      ood_test = ood.subset(of[static_cast<std::size_t>(job.fold)]);
    }

    RegimeConfig rc = spec.config;
    rc.seed = derive_seed(master_seed, {ur, uf, ug, 3});
    Model model = init_model(model_config, derive_seed(master_seed, {ur, uf, ug, 4}));
    model = fit(std::move(model), train, val, rc).model;

    std::vector<MetricRow> rows;
    auto add_row = [&](const std::string& cond, const Dataset& ds, const std::vector<double>& s) {
      const auto labels = ds.labels();
      rows.push_back({spec.name, job.repeat, job.fold, cond, evaluate_scores(s, labels, plan.threshold)});
    };
    add_row("WD", test, predict_scores(model, test));
    for (std::size_t e = 0; e < plan.epsilon_test.size(); ++e) {
      AttackConfig a = plan.test_attack;
      a.epsilon = plan.epsilon_test[e];
      add_row(adversarial_condition(a.epsilon), test,
              predict_scores_adversarial(model, test, a, derive_seed(master_seed, {ur, uf, ug, 5, e})));
    }
    if (!ood_test.empty()) add_row("OOD", ood_test, predict_scores(model, ood_test));
    results[j] = std::move(rows);
    if (progress) {
      std::lock_guard<std::mutex> lock(progress_mutex);
      progress(spec.name, job.repeat, job.fold);
    }
  };

  const int workers = std::max(1, std::min<int>(plan.jobs, static_cast<int>(jobs.size())));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      try {
        run_job(j);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  MetricsReport report;
  for (auto& r : results) report.rows.insert(report.rows.end(), r.begin(), r.end());
  return report;
}

}  // namespace sgat
