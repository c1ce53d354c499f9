#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "sgat/binio.hpp"
#include "sgat/error.hpp"
#include "sgat/gradcam.hpp"
#include "sgat/ops.hpp"
#include "sgat/rng.hpp"

namespace sgat::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kMetrics[] = {"acc", "tpr", "tnr", "auc", "aps"};

// Seed stream indices under the master seed.
constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kInitStream = 2;
constexpr std::uint64_t kSplitStream = 3;
constexpr std::uint64_t kEvalAttackStream = 5;

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string file_hash(const std::string& path) {
  return binio::hex64(binio::fnv1a(binio::read_file(path)));
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Run record for one command invocation. The key hashes everything the
// outputs depend on; a completed manifest with the same key and intact
// outputs makes the rerun a no-op.
class Manifest {
 public:
  Manifest(fs::path dir, const std::string& label, nlohmann::json config, nlohmann::json identity,
           bool deterministic)
      : dir_(std::move(dir)),
        path_(dir_ / ("manifest_" + label + ".json")),
        deterministic_(deterministic),
        start_(std::chrono::steady_clock::now()) {
    key_ = binio::hex64(binio::fnv1a(identity.dump()));
    doc_ = {{"manifest_version", 1},
            {"label", label},
            {"key", key_},
            {"config", std::move(config)},
            {"identity", std::move(identity)},
            {"status", "running"},
            {"outputs", nlohmann::json::object()}};
    if (!deterministic_) doc_["started_at"] = utc_now();
  }

  bool up_to_date() const {
    if (!fs::exists(path_)) return false;
    nlohmann::json old;
    try {
      old = nlohmann::json::parse(binio::read_file(path_.string()));
    } catch (const nlohmann::json::exception&) {
      return false;
    }
    if (old.value("status", "") != "complete" || old.value("key", "") != key_) return false;
    for (const auto& [rel, hash] : old.at("outputs").items()) {
      const fs::path p = dir_ / rel;
      if (!fs::exists(p) || file_hash(p.string()) != hash.get<std::string>()) return false;
    }
    return true;
  }

  void begin() {
    fs::create_directories(dir_);
    save();
  }

  void add_output(const std::string& rel, const std::string& bytes) {
    const fs::path p = dir_ / rel;
    fs::create_directories(p.parent_path());
    binio::write_file(p.string(), bytes);
    doc_["outputs"][rel] = binio::hex64(binio::fnv1a(bytes));
  }

  /// Records a file some other writer produced.
  void record(const std::string& rel) { doc_["outputs"][rel] = file_hash((dir_ / rel).string()); }

  void finish() {
    doc_["status"] = "complete";
    if (!deterministic_) {
      doc_["elapsed_seconds"] =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }
    save();
  }

  const fs::path& dir() const { return dir_; }
  const std::string& key() const { return key_; }

 private:
  void save() const { binio::write_file(path_.string(), doc_.dump(2) + "\n"); }

  fs::path dir_;
  fs::path path_;
  bool deterministic_;
  std::chrono::steady_clock::time_point start_;
  std::string key_;
  nlohmann::json doc_;
};

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::string out;
  bool f64 = false;
  bool deterministic = false;
};

RunConfig load_config(const Globals& g) {
  RunConfig cfg;
  if (!g.config_path.empty()) {
    std::string text;
    try {
      text = binio::read_file(g.config_path);
    } catch (const FormatError& e) {
      throw ConfigError(e.what());
    }
    try {
      cfg = nlohmann::json::parse(text).get<RunConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(g.config_path + ": " + e.what());
    }
  }
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.out = g.out;
  if (g.jobs < 1) throw ConfigError("--jobs must be >= 1");
  cfg.eval.jobs = g.jobs;
  return cfg;
}

nlohmann::json identity_config(const RunConfig& cfg) {
  nlohmann::json j = cfg;
  j.erase("out");
  j["eval"].erase("jobs");
  return j;
}

ModelConfig model_for(const RunConfig& cfg, const Shape& extents) {
  ModelConfig mc = cfg.model;
  mc.spatial_rank = static_cast<int>(extents.size());
  mc.input_extents = extents;
  mc.validate();
  return mc;
}

bool report_if_current(const Manifest& m, const std::string& command, std::ostream& out) {
  if (!m.up_to_date()) return false;
  out << command << ": up to date (manifest key " << m.key() << "), nothing to do\n";
  return true;
}

std::string metrics_row_csv(const std::string& head, const MetricValues& v) {
  auto opt = [](const std::optional<double>& x) { return x ? num(*x) : std::string(); };
  return head + "," + num(v.acc) + "," + opt(v.tpr) + "," + opt(v.tnr) + "," + opt(v.auc) + "," +
         opt(v.aps) + "\n";
}

std::string stem_of(const std::string& path) { return fs::path(path).stem().string(); }

std::string default_path(const RunConfig& cfg, const std::string& explicit_path,
                         const char* file) {
  return explicit_path.empty() ? (fs::path(cfg.out) / file).string() : explicit_path;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::optional<double> wd_prevalence;
  std::optional<double> ood_prevalence;
  std::optional<int> n_wd;
  std::optional<int> n_ood;
  std::optional<int> rank;
};

int cmd_gen_data(const Globals& g, const GenDataArgs& a, std::ostream& out) {
  RunConfig cfg = load_config(g);
  if (a.wd_prevalence) cfg.data.wd_prevalence = *a.wd_prevalence;
  if (a.ood_prevalence) cfg.data.ood_prevalence = *a.ood_prevalence;
  if (a.n_wd) cfg.data.n_wd = *a.n_wd;
  if (a.n_ood) cfg.data.n_ood = *a.n_ood;
  if (a.rank) cfg.data.spatial_rank = *a.rank;
  cfg.data.seed = cfg.seed;
  cfg.validate();

  nlohmann::json identity = {{"command", "gen-data"}, {"config", identity_config(cfg)}};
  Manifest m(cfg.out, "gen-data", identity_config(cfg), identity, g.deterministic);
  if (report_if_current(m, "gen-data", out)) return kOk;
  m.begin();
  const SyntheticData data = generate(cfg.data);
  m.add_output("wd.sgdata", serialize_dataset(data.wd));
  m.add_output("ood.sgdata", serialize_dataset(data.ood));
  m.finish();
  char line[128];
  std::snprintf(line, sizeof line, "WD  n=%zu prevalence=%.4f\nOOD n=%zu prevalence=%.4f\n",
                data.wd.size(), data.wd.prevalence(), data.ood.size(), data.ood.prevalence());
  out << line << "wrote " << (m.dir() / "wd.sgdata").string() << " and "
      << (m.dir() / "ood.sgdata").string() << "\n";
  return kOk;
}

struct TrainArgs {
  std::string wd;
  std::string ood_train;
  std::string regime;
  std::optional<double> lambda;
  std::optional<int> max_epochs;
  std::string name;
};

int cmd_train(const Globals& g, const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_config(g);
  if (!a.regime.empty()) cfg.train.regime = regime_from_string(a.regime);
  if (a.lambda) cfg.train.lambda_interp = *a.lambda;
  if (a.max_epochs) cfg.train.max_epochs = *a.max_epochs;
  cfg.train.seed = derive_seed(cfg.seed, {kTrainStream});
  cfg.validate();
  const bool combined = cfg.train.regime == Regime::Combined;
  if (combined && a.ood_train.empty()) {
    throw ConfigError("regime combined needs --ood-train with the OOD training data");
  }
  if (!combined && !a.ood_train.empty()) {
    throw ConfigError("--ood-train only applies to the combined regime");
  }

  const std::string wd_path = default_path(cfg, a.wd, "wd.sgdata");
  const std::string name =
      a.name.empty() ? regime_label(cfg.train.regime, cfg.train.lambda_interp) : a.name;
  nlohmann::json inputs = {{"wd", file_hash(wd_path)}};
  if (combined) inputs["ood_train"] = file_hash(a.ood_train);
  nlohmann::json identity = {{"command", "train"},
                             {"name", name},
                             {"config", identity_config(cfg)},
                             {"inputs", inputs}};
  Manifest m(cfg.out, "train_" + name, identity_config(cfg), identity, g.deterministic);
  if (report_if_current(m, "train", out)) return kOk;
  m.begin();

  const Dataset wd = load_dataset(wd_path);
  const double vf = cfg.eval.inner_validation_fraction;
  const auto parts = stratified_split(wd, {1.0 - vf, vf}, derive_seed(cfg.seed, {kSplitStream}));
  Dataset train = wd.subset(parts[0]);
  const Dataset val = wd.subset(parts[1]);
  if (combined) train = Dataset::merge(train, load_dataset(a.ood_train));

  Model model = init_model(model_for(cfg, wd.extents), derive_seed(cfg.seed, {kInitStream}));
  err << "train: " << name << " on " << train.size() << " samples, validating on "
      << val.size() << "\n";
  const TrainResult res = fit(std::move(model), train, val, cfg.train);
  m.add_output(name + ".sgckpt", serialize_checkpoint(res.model));
  m.add_output(name + "_history.csv", res.history.epochs_csv());
  m.add_output(name + "_steps.csv", res.history.steps_csv());
  m.finish();
  const auto& best = res.history.epochs.at(static_cast<std::size_t>(res.history.best_epoch));
  out << "trained " << name << ": " << res.history.epochs.size() << " epochs, best epoch "
      << res.history.best_epoch << " (val_loss " << num(best.val_loss) << ")"
      << (res.history.stopped_early ? ", stopped early" : "") << "\n";
  return kOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string wd;
  std::string ood;
  std::optional<std::vector<double>> epsilons;
  std::string name;
};

int cmd_eval(const Globals& g, const EvalArgs& a, std::ostream& out) {
  RunConfig cfg = load_config(g);
  if (a.epsilons) cfg.eval.epsilon_test = *a.epsilons;
  cfg.validate();
  const std::string wd_path = default_path(cfg, a.wd, "wd.sgdata");
  std::string ood_path = default_path(cfg, a.ood, "ood.sgdata");
  if (a.ood.empty() && !fs::exists(ood_path)) ood_path.clear();
  const std::string name = a.name.empty() ? stem_of(a.checkpoint) : a.name;

  nlohmann::json inputs = {{"checkpoint", file_hash(a.checkpoint)}, {"wd", file_hash(wd_path)}};
  if (!ood_path.empty()) inputs["ood"] = file_hash(ood_path);
  nlohmann::json identity = {{"command", "eval"},
                             {"name", name},
                             {"config", identity_config(cfg)},
                             {"inputs", inputs}};
  Manifest m(cfg.out, "eval_" + name, identity_config(cfg), identity, g.deterministic);
  if (report_if_current(m, "eval", out)) return kOk;
  m.begin();

  const Model model = load_checkpoint(a.checkpoint);
  const Dataset wd = load_dataset(wd_path);
  std::string scores_csv = "condition,index,subject_id,label,score\n";
  MetricsReport report;
  auto add = [&](const std::string& cond, const Dataset& ds, const std::vector<double>& s) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      scores_csv += cond + "," + std::to_string(i) + "," + std::to_string(ds.samples[i].subject_id) +
                    "," + std::to_string(ds.samples[i].label) + "," + num(s[i]) + "\n";
    }
    report.rows.push_back({name, 0, 0, cond, evaluate_scores(s, ds.labels(), cfg.eval.threshold)});
  };
  add("WD", wd, predict_scores(model, wd));
  for (std::size_t e = 0; e < cfg.eval.epsilon_test.size(); ++e) {
    AttackConfig atk = cfg.eval.test_attack;
    atk.epsilon = cfg.eval.epsilon_test[e];
    add(adversarial_condition(atk.epsilon), wd,
        predict_scores_adversarial(model, wd, atk, derive_seed(cfg.seed, {kEvalAttackStream, e})));
  }
  if (!ood_path.empty()) {
    const Dataset ood = load_dataset(ood_path);
    add("OOD", ood, predict_scores(model, ood));
  }
  m.add_output(name + "_scores.csv", scores_csv);
  m.add_output(name + "_metrics.csv", report.csv());
  m.add_output(name + "_summary.json", report.summary()[name].dump(2) + "\n");
  m.finish();
  for (const auto& row : report.rows) out << metrics_row_csv(row.condition, row.values);
  return kOk;
}

struct CrossvalArgs {
  std::string wd;
  std::string ood;
  std::optional<std::vector<std::string>> regimes;
  std::optional<std::vector<double>> lambdas;
};

int cmd_crossval(const Globals& g, const CrossvalArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_config(g);
  if (a.regimes) cfg.grid.regimes = *a.regimes;
  if (a.lambdas) cfg.grid.lambdas = *a.lambdas;
  cfg.data.seed = cfg.seed;
  cfg.validate();
  if (a.wd.empty() != a.ood.empty()) throw ConfigError("give both --wd and --ood, or neither");
  const auto grid = build_grid(cfg);

  nlohmann::json inputs = nlohmann::json::object();
  if (!a.wd.empty()) inputs = {{"wd", file_hash(a.wd)}, {"ood", file_hash(a.ood)}};
  nlohmann::json identity = {{"command", "crossval"},
                             {"config", identity_config(cfg)},
                             {"inputs", inputs}};
  Manifest m(cfg.out, "crossval", identity_config(cfg), identity, g.deterministic);
  if (report_if_current(m, "crossval", out)) return kOk;
  m.begin();

  SyntheticData data;
  if (a.wd.empty()) {
    data = generate(cfg.data);
  } else {
    data.wd = load_dataset(a.wd);
    data.ood = load_dataset(a.ood);
  }
  const std::size_t total = grid.size() * static_cast<std::size_t>(cfg.eval.folds * cfg.eval.repeats);
  std::size_t done = 0;
  const auto report = nested_cv(data.wd, data.ood, model_for(cfg, data.wd.extents), grid, cfg.eval,
                                cfg.seed, [&](const std::string& regime, int r, int f) {
                                  ++done;
                                  err << "[" << done << "/" << total << "] " << regime
                                      << " repeat " << r << " fold " << f << "\n";
                                });
  m.add_output("cv_metrics.csv", report.csv());
  m.add_output("cv_summary.json", report.summary().dump(2) + "\n");
  m.add_output("cv_lambda.csv", lambda_table(report, grid));
  m.add_output("cv_pvalues.csv", pvalue_table(report));
  m.finish();
  for (const auto& spec : grid) {
    for (const auto& cond : report.conditions()) {
      const auto acc = report.aggregate(spec.name, cond, "acc");
      if (acc.count == 0) continue;
      char line[160];
      std::snprintf(line, sizeof line, "%-22s %-14s ACC %.4f +- %.4f (n=%d)\n", spec.name.c_str(),
                    cond.c_str(), acc.mean, acc.std, acc.count);
      out << line;
    }
  }
  return kOk;
}

struct GradcamArgs {
  std::string checkpoint;
  std::string data;
  std::vector<std::uint32_t> samples;
  int class_id = -1;
  std::string mode = "detached";
  std::string name;
};

int cmd_gradcam(const Globals& g, const GradcamArgs& a, std::ostream& out) {
  RunConfig cfg = load_config(g);
  cfg.validate();
  const SaliencyMode mode = saliency_mode_from_string(a.mode);
  if (a.class_id < -1 || a.class_id > 1) throw ConfigError("--class must be 0, 1 or omitted");
  const std::string data_path = default_path(cfg, a.data, "wd.sgdata");
  const std::string name = a.name.empty() ? stem_of(a.checkpoint) : a.name;

  const Dataset ds = load_dataset(data_path);
  std::vector<std::size_t> picks;
  if (a.samples.empty()) {
    for (std::size_t i = 0; i < std::min<std::size_t>(4, ds.size()); ++i) picks.push_back(i);
  }
  for (auto id : a.samples) {
    const auto it = std::find_if(ds.samples.begin(), ds.samples.end(),
                                 [&](const VolumeSample& s) { return s.subject_id == id; });
    if (it == ds.samples.end()) {
      throw ConfigError("unknown sample id " + std::to_string(id) + " in " + data_path);
    }
    picks.push_back(static_cast<std::size_t>(it - ds.samples.begin()));
  }
  std::vector<int> classes = a.class_id < 0 ? std::vector<int>{0, 1} : std::vector<int>{a.class_id};

  nlohmann::json sample_ids = nlohmann::json::array();
  for (auto i : picks) sample_ids.push_back(ds.samples[i].subject_id);
  nlohmann::json identity = {{"command", "gradcam"},
                             {"name", name},
                             {"config", identity_config(cfg)},
                             {"samples", sample_ids},
                             {"classes", classes},
                             {"mode", to_string(mode)},
                             {"inputs",
                              {{"checkpoint", file_hash(a.checkpoint)}, {"data", file_hash(data_path)}}}};
  Manifest m(cfg.out, "gradcam_" + name, identity_config(cfg), identity, g.deterministic);
  if (report_if_current(m, "gradcam", out)) return kOk;
  m.begin();

  const Model model = load_checkpoint(a.checkpoint);
  const fs::path dir = m.dir() / "gradcam";
  fs::create_directories(dir);
  for (auto i : picks) {
    const std::size_t idx[] = {i};
    const ForwardPass pass = forward(model, ds.batch(idx, model.dense_weight.dtype()));
    for (int c : classes) {
      const ClassActivationMap cam = activation_map(pass, c, mode);
      Shape spatial(cam.values.shape().begin() + 1, cam.values.shape().end());
      const Tensor up = upsample_for_export(reshape(cam.values.detach(), spatial), ds.extents);
      const std::string base = "gradcam/" + name + "_s" + std::to_string(ds.samples[i].subject_id) +
                               "_c" + std::to_string(c);
      if (ds.extents.size() == 2) {
        write_pgm((m.dir() / (base + ".pgm")).string(), up);
        m.record(base + ".pgm");
      } else {
        write_volume((m.dir() / base).string(), up);
        for (const char* ext : {".raw", ".json", ".pgm"}) m.record(base + ext);
      }
      out << "wrote " << (m.dir() / base).string() << (ds.extents.size() == 2 ? ".pgm" : ".raw")
          << "\n";
    }
  }
  m.finish();
  return kOk;
}

struct AttackEvalArgs {
  std::string checkpoint;
  std::string data;
  std::optional<std::vector<double>> epsilons;
  std::string name;
};

int cmd_attack_eval(const Globals& g, const AttackEvalArgs& a, std::ostream& out) {
  RunConfig cfg = load_config(g);
  cfg.validate();
  std::vector<double> eps{0.0};
  if (a.epsilons) {
    eps = *a.epsilons;
  } else {
    eps.insert(eps.end(), cfg.eval.epsilon_test.begin(), cfg.eval.epsilon_test.end());
  }
  for (double e : eps) {
    if (!(e >= 0.0) || !std::isfinite(e)) throw ConfigError("epsilons must be finite and >= 0");
  }
  const std::string data_path = default_path(cfg, a.data, "wd.sgdata");
  const std::string name = a.name.empty() ? stem_of(a.checkpoint) : a.name;
  nlohmann::json identity = {{"command", "attack-eval"},
                             {"name", name},
                             {"config", identity_config(cfg)},
                             {"epsilons", eps},
                             {"inputs",
                              {{"checkpoint", file_hash(a.checkpoint)}, {"data", file_hash(data_path)}}}};
  Manifest m(cfg.out, "attack-eval_" + name, identity_config(cfg), identity, g.deterministic);
  if (report_if_current(m, "attack-eval", out)) return kOk;
  m.begin();

  const Model model = load_checkpoint(a.checkpoint);
  const Dataset ds = load_dataset(data_path);
  std::string csv = "epsilon,acc,tpr,tnr,auc,aps\n";
  for (std::size_t e = 0; e < eps.size(); ++e) {
    AttackConfig atk = cfg.eval.test_attack;
    atk.epsilon = eps[e];
    const auto s = predict_scores_adversarial(model, ds, atk, derive_seed(cfg.seed, {kEvalAttackStream, e}));
    const std::string row = metrics_row_csv(num(eps[e]), evaluate_scores(s, ds.labels(), cfg.eval.threshold));
    csv += row;
    out << row;
  }
  m.add_output(name + "_attack.csv", csv);
  m.finish();
  return kOk;
}

int classify(std::ostream& err, const char* kind, const std::exception& e, int code) {
  err << "error (" << kind << "): " << e.what() << "\n";
  return code;
}

}  // namespace

void RunConfig::validate() const {
  data.validate();
  train.validate();
  if (grid.regimes.empty()) throw ConfigError("grid.regimes is empty");
  for (const auto& r : grid.regimes) {
    if (regime_from_string(r) == Regime::InterpAware && grid.lambdas.empty()) {
      throw ConfigError("grid.lambdas is empty but interp_aware is in the grid");
    }
  }
  for (double l : grid.lambdas) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("grid.lambdas must be finite and >= 0");
  }
  for (double e : eval.epsilon_test) {
    if (!(e >= 0.0) || !std::isfinite(e)) throw ConfigError("eval.epsilon_test must be finite and >= 0");
  }
  eval.test_attack.validate();
  if (eval.folds < 2 || eval.repeats < 1) throw ConfigError("eval needs >= 2 folds and >= 1 repeat");
  if (!(eval.inner_validation_fraction > 0.0 && eval.inner_validation_fraction < 1.0)) {
    throw ConfigError("eval.inner_validation_fraction must be in (0, 1)");
  }
}

void to_json(nlohmann::json& j, const GridConfig& g) {
  j = {{"regimes", g.regimes}, {"lambdas", g.lambdas}};
}

void from_json(const nlohmann::json& j, GridConfig& g) {
  GridConfig d;
  g.regimes = j.value("regimes", d.regimes);
  g.lambdas = j.value("lambdas", d.lambdas);
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"seed", c.seed},   {"out", c.out},     {"data", c.data}, {"model", c.model},
       {"train", c.train}, {"eval", c.eval},   {"grid", c.grid}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  RunConfig d;
  c.seed = j.value("seed", d.seed);
  c.out = j.value("out", d.out);
  c.data = j.value("data", d.data);
  c.model = j.value("model", d.model);
  c.train = j.value("train", d.train);
  c.eval = j.value("eval", d.eval);
  c.grid = j.value("grid", d.grid);
}

std::string regime_label(Regime regime, double lambda) {
  std::string s = to_string(regime);
  if (regime == Regime::InterpAware) s += "_l" + short_num(lambda);
  return s;
}

std::vector<RegimeSpec> build_grid(const RunConfig& config) {
  std::vector<RegimeSpec> grid;
  for (const auto& name : config.grid.regimes) {
    RegimeConfig rc = config.train;
    rc.regime = regime_from_string(name);
    if (rc.regime == Regime::InterpAware) {
      for (double l : config.grid.lambdas) {
        rc.lambda_interp = l;
        grid.push_back({regime_label(rc.regime, l), rc});
      }
    } else {
      rc.lambda_interp = 0.0;
      grid.push_back({regime_label(rc.regime, 0.0), rc});
    }
  }
  for (std::size_t i = 0; i < grid.size(); ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      if (grid[i].name == grid[k].name) throw ConfigError("duplicate grid entry " + grid[i].name);
    }
  }
  return grid;
}

std::string pvalue_table(const MetricsReport& report) {
  std::string csv = "regime_a,regime_b,condition,metric,n_a,n_b,u,p,method\n";
  const auto regimes = report.regimes();
  for (std::size_t i = 0; i < regimes.size(); ++i) {
    for (std::size_t k = i + 1; k < regimes.size(); ++k) {
      for (const auto& cond : report.conditions()) {
        for (const char* metric : kMetrics) {
          const auto a = report.values(regimes[i], cond, metric);
          const auto b = report.values(regimes[k], cond, metric);
          if (a.empty() || b.empty()) continue;
          const auto r = mann_whitney_u(a, b, Alternative::TwoSided);
          csv += regimes[i] + "," + regimes[k] + "," + cond + "," + metric + "," +
                 std::to_string(a.size()) + "," + std::to_string(b.size()) + "," + num(r.u) + "," +
                 num(r.p) + "," + (r.exact ? "exact" : "normal") + "\n";
        }
      }
    }
  }
  return csv;
}

std::string lambda_table(const MetricsReport& report, const std::vector<RegimeSpec>& grid) {
  std::string csv = "name,regime,lambda,condition,metric,mean,std,n\n";
  for (const auto& spec : grid) {
    for (const auto& cond : report.conditions()) {
      for (const char* metric : kMetrics) {
        const auto agg = report.aggregate(spec.name, cond, metric);
        if (agg.count == 0) continue;
        csv += spec.name + "," + to_string(spec.config.regime) + "," +
               num(spec.config.lambda_interp) + "," + cond + "," + metric + "," + num(agg.mean) +
               "," + num(agg.std) + "," + std::to_string(agg.count) + "\n";
      }
    }
  }
  return csv;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Saliency-guided adversarial training toolkit"};
  app.footer(
      "Exit codes: 0 success, 2 configuration or argument error, 3 data/format error,\n"
      "4 numerical failure (non-finite loss), 1 other failure.");
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config_path, "JSON run configuration");
  auto* seed_opt = app.add_option("--seed", seed, "Master seed (overrides the config)");
  app.add_option("--jobs", g.jobs, "Parallel cross-validation jobs")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output directory (overrides the config)");
  app.add_flag("--f64", g.f64, "Compute in 64-bit floating point");
  app.add_flag("--deterministic", g.deterministic,
               "Omit wall-clock fields so reruns produce byte-identical files");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate WD and OOD synthetic datasets");
  gen_cmd->add_option("--wd-prevalence", gen.wd_prevalence, "Disease fraction in WD");
  gen_cmd->add_option("--ood-prevalence", gen.ood_prevalence, "Disease fraction in OOD");
  gen_cmd->add_option("--n-wd", gen.n_wd, "WD sample count");
  gen_cmd->add_option("--n-ood", gen.n_ood, "OOD sample count");
  gen_cmd->add_option("--rank", gen.rank, "Spatial rank (2 or 3)");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train one model (80/20 inner split of WD)");
  train_cmd->add_option("--wd", tr.wd, "WD dataset (default <out>/wd.sgdata)");
  train_cmd->add_option("--ood-train", tr.ood_train, "OOD training data for the combined regime");
  train_cmd->add_option("--regime", tr.regime, "normal, combined, adversarial or interp_aware");
  train_cmd->add_option("--lambda", tr.lambda, "Interpretation weight (interp_aware only)");
  train_cmd->add_option("--max-epochs", tr.max_epochs, "Epoch limit");
  train_cmd->add_option("--name", tr.name, "Output file prefix (default from regime)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on WD, WD_adv and OOD");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--wd", ev.wd, "WD dataset (default <out>/wd.sgdata)");
  eval_cmd->add_option("--ood", ev.ood, "OOD dataset (default <out>/ood.sgdata if present)");
  eval_cmd->add_option("--epsilons", ev.epsilons, "Attack strengths for WD_adv conditions");
  eval_cmd->add_option("--name", ev.name, "Output file prefix (default checkpoint stem)");

  CrossvalArgs cv;
  auto* cv_cmd = app.add_subcommand("crossval", "Nested cross-validation over the regime grid");
  cv_cmd->add_option("--wd", cv.wd, "WD dataset (default: generate from the config)");
  cv_cmd->add_option("--ood", cv.ood, "OOD dataset");
  cv_cmd->add_option("--regimes", cv.regimes, "Regimes in the grid");
  cv_cmd->add_option("--lambdas", cv.lambdas, "Interpretation weights for interp_aware");

  GradcamArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcam", "Export Grad-CAM maps for selected samples");
  gc_cmd->add_option("--checkpoint", gc.checkpoint, "Model checkpoint")->required();
  gc_cmd->add_option("--data", gc.data, "Dataset (default <out>/wd.sgdata)");
  gc_cmd->add_option("--samples", gc.samples, "Subject ids (default: first four samples)");
  gc_cmd->add_option("--class", gc.class_id, "Class evidence to map (default both)");
  gc_cmd->add_option("--mode", gc.mode, "detached or full");
  gc_cmd->add_option("--name", gc.name, "Output file prefix (default checkpoint stem)");

  AttackEvalArgs ae;
  auto* ae_cmd = app.add_subcommand("attack-eval", "Metrics under PGD over an epsilon sweep");
  ae_cmd->add_option("--checkpoint", ae.checkpoint, "Model checkpoint")->required();
  ae_cmd->add_option("--data", ae.data, "Dataset (default <out>/wd.sgdata)");
  ae_cmd->add_option("--epsilons", ae.epsilons, "Attack strengths (default 0 and eval.epsilon_test)");
  ae_cmd->add_option("--name", ae.name, "Output file prefix (default checkpoint stem)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o;
    std::ostringstream eo;
    const int code = app.exit(e, o, eo);
    out << o.str();
    err << eo.str();
    return code == 0 ? kOk : kConfig;
  }
  if (*seed_opt) g.seed = seed;

  try {
    DTypeScope dtype(g.f64 ? DType::F64 : DType::F32);
    if (*gen_cmd) return cmd_gen_data(g, gen, out);
    if (*train_cmd) return cmd_train(g, tr, out, err);
    if (*eval_cmd) return cmd_eval(g, ev, out);
    if (*cv_cmd) return cmd_crossval(g, cv, out, err);
    if (*gc_cmd) return cmd_gradcam(g, gc, out);
    if (*ae_cmd) return cmd_attack_eval(g, ae, out);
    return kConfig;
  } catch (const ConfigError& e) {
    return classify(err, "config", e, kConfig);
  } catch (const nlohmann::json::exception& e) {
    return classify(err, "config", e, kConfig);
  } catch (const FormatError& e) {
    return classify(err, "data", e, kData);
  } catch (const IoError& e) {
    return classify(err, "data", e, kData);
  } catch (const DegenerateInputError& e) {
    return classify(err, "data", e, kData);
  } catch (const fs::filesystem_error& e) {
    return classify(err, "data", e, kData);
  } catch (const NumericError& e) {
    return classify(err, "numeric", e, kNumeric);
  } catch (const std::exception& e) {
    return classify(err, "internal", e, kInternal);
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace sgat::cli
