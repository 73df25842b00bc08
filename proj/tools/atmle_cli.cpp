#include "atmle/atmle.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kInputError = 2, kEstimationFailed = 3 };

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw atmle::ValidationError("cannot open '" + path + "'");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 15];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char byte[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", md[i]);
    hex += byte;
  }
  return hex;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

int default_jobs() {
  if (const char* env = std::getenv("ATMLE_JOBS")) {
    try {
      const int j = std::stoi(env);
      if (j >= 1) return j;
    } catch (const std::exception&) {
    }
    std::cerr << "warning: ignoring invalid ATMLE_JOBS='" << env << "'\n";
  }
  return 1;
}

// Files are built in memory first so a failing command leaves nothing behind.
struct OutputSet {
  std::vector<std::pair<std::string, std::string>> files;

  void add(const std::string& name, std::string content) { files.emplace_back(name, std::move(content)); }

  void write(const std::string& dir) const {
    fs::create_directories(dir);
    for (const auto& [name, content] : files) {
      std::ofstream out(fs::path(dir) / name, std::ios::binary);
      out << content;
      if (!out) throw std::runtime_error("failed writing " + name);
    }
  }
};

json manifest(const std::string& command, const std::vector<std::string>& argv, const json& config, std::uint64_t seed,
              const json& inputs, const std::string& started) {
  return {{"command", command},  {"argv", argv},         {"config", config},        {"seed", seed},
          {"version", atmle::kVersion}, {"inputs", inputs}, {"started_utc", started}, {"finished_utc", utc_now()}};
}

// Flag values land here as strings and are applied on top of the config file
// through the same validator.
struct Overrides {
  std::vector<std::pair<std::string, std::string>> values;
  void add(const std::string& key, const std::string& v) { values.emplace_back(key, v); }
};

atmle::RunConfig resolve_config(const std::string& config_path, const Overrides& ov) {
  atmle::RunConfig cfg;
  if (!config_path.empty()) cfg = atmle::load_config(config_path);
  for (const auto& [k, v] : ov.values) cfg.set(k, v);
  return cfg;
}

int run_analyze(const std::string& data_path, const std::string& config_path, const std::string& out_dir, bool influence,
                const Overrides& ov, const std::vector<std::string>& argv) {
  const std::string started = utc_now();
  const atmle::RunConfig cfg = resolve_config(config_path, ov);
  const std::string digest = sha256_file(data_path);
  const atmle::FusionDataset data = atmle::load_csv(data_path, cfg.csv);
  const atmle::EstimateReport report = atmle::estimate(cfg.estimator, data, cfg.atmle);
  if (!std::isfinite(report.psi) || !std::isfinite(report.se)) throw atmle::EstimationError("non-finite estimate");

  OutputSet out;
  out.add("report.json", atmle::to_json(report).dump(2) + "\n");
  if (influence) {
    std::ostringstream ic;
    atmle::write_influence_csv(ic, report);
    out.add("influence.csv", ic.str());
  }
  json inputs{{"data", {{"path", data_path}, {"sha256", digest}}}};
  if (!config_path.empty()) inputs["config"] = {{"path", config_path}, {"sha256", sha256_file(config_path)}};
  out.add("manifest.json", manifest("analyze", argv, cfg.to_json(), cfg.atmle.seed, inputs, started).dump(2) + "\n");
  out.write(out_dir);

  std::printf("%s: psi = %.6f  se = %.6f  95%% CI = [%.6f, %.6f]\n", report.estimator.c_str(), report.psi, report.se,
              report.ci95.first, report.ci95.second);
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  return kOk;
}

int run_simulate(const std::string& config_path, const std::string& out_dir, int jobs, const Overrides& ov,
                 const std::vector<std::string>& argv) {
  const std::string started = utc_now();
  const atmle::RunConfig cfg = resolve_config(config_path, ov);
  if (cfg.alpha && cfg.scenario != "positivity") throw atmle::ValidationError("--alpha applies only to --scenario positivity");
  if (!cfg.alpha && cfg.scenario == "positivity") throw atmle::ValidationError("--scenario positivity requires --alpha");
  auto spec = atmle::sim::scenario(cfg.scenario, cfg.n_rct, cfg.ext_multiplier, cfg.alpha);
  spec.censoring_rate = cfg.censoring_rate;
  spec.validate();

  atmle::sim::StudyOptions opt;
  opt.reps = cfg.reps;
  opt.jobs = jobs;
  opt.master_seed = cfg.atmle.seed;
  opt.estimator = cfg.atmle;
  const auto res = atmle::sim::run_study(spec, opt);

  OutputSet out;
  std::ostringstream csv;
  atmle::sim::write_results_csv(csv, {res});
  out.add("results.csv", csv.str());
  out.add("results.json", atmle::sim::to_json(res).dump(2) + "\n");
  json inputs = json::object();
  if (!config_path.empty()) inputs["config"] = {{"path", config_path}, {"sha256", sha256_file(config_path)}};
  out.add("manifest.json", manifest("simulate", argv, cfg.to_json(), cfg.atmle.seed, inputs, started).dump(2) + "\n");
  out.write(out_dir);

  std::printf("%-12s %10s %10s %10s %10s %10s %6s\n", "estimator", "mean", "bias", "mse", "rel_mse", "coverage", "fail");
  for (const auto& m : res.metrics) {
    std::printf("%-12s %10.5f %10.5f %10.6f %10.4f %10.3f %6d\n", m.estimator.c_str(), m.mean_estimate, m.bias, m.mse,
                m.relative_mse, m.coverage, m.failures);
  }
  return kOk;
}

int run_oracle_check(int sweep, int directions, std::uint64_t seed) {
  if (sweep == 0) {
    std::cerr << "warning: --sweep 0 runs no checks\n";
    std::printf("0 checks, PASS\n");
    return kOk;
  }
  atmle::oracle::SweepOptions opt;
  opt.distributions = sweep;
  opt.directions = directions;
  opt.seed = seed;
  const auto res = atmle::oracle::run_sweep(opt);

  // one row per check family: count, failures, worst value / tolerance
  std::map<std::string, std::array<double, 3>> table;
  for (const auto& c : res.checks) {
    const std::string family = c.name.substr(0, c.name.find('['));
    auto& row = table[family];
    row[0] += 1;
    row[1] += c.passed() ? 0 : 1;
    row[2] = std::max(row[2], c.value / c.tolerance);
  }
  std::printf("%-40s %8s %8s %14s  %s\n", "check", "count", "failed", "worst/tol", "result");
  for (const auto& [family, row] : table) {
    std::printf("%-40s %8.0f %8.0f %14.3e  %s\n", family.c_str(), row[0], row[1], row[2], row[1] == 0 ? "PASS" : "FAIL");
  }
  std::printf("%zu checks, %s\n", res.checks.size(), res.passed() ? "PASS" : "FAIL");
  return res.passed() ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive TMLE for trials augmented with external data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", atmle::kVersion);
  const std::vector<std::string> args(argv, argv + argc);

  Overrides ov;
  auto flag = [&ov](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    sub->add_option_function<std::string>(name, [&ov, key](const std::string& v) { ov.add(key, v); }, help);
  };

  auto* analyze = app.add_subcommand("analyze", "Estimate the trial-anchored ATE from a CSV");
  std::string data_path, config_path, out_dir;
  bool influence = false;
  analyze->add_option("--data", data_path, "CSV with columns s,a,y,w1..wd[,delta]")->required();
  analyze->add_option("--config", config_path, "key = value config file");
  analyze->add_option("--out", out_dir, "output directory")->required();
  analyze->add_flag("--influence", influence, "also write per-row influence values");
  flag(analyze, "--estimator", "estimator", "atmle | cv-atmle | rct-only | tmle | pooled-aipw");
  flag(analyze, "--seed", "seed", "fold and learner seed");
  flag(analyze, "--v-folds", "v_folds", "cross-fitting folds");

  auto* simulate = app.add_subcommand("simulate", "Monte Carlo study on a built-in scenario");
  std::string sim_config, sim_out;
  int jobs = default_jobs();
  simulate->add_option("--config", sim_config, "key = value config file");
  simulate->add_option("--out", sim_out, "output directory")->required();
  simulate->add_option("--jobs", jobs, "worker threads (default: ATMLE_JOBS or 1)")->check(CLI::PositiveNumber);
  flag(simulate, "--scenario", "scenario", "a | b | c | d | positivity");
  flag(simulate, "--alpha", "alpha", "enrollment strength, positivity scenario only");
  flag(simulate, "--n-rct", "n_rct", "trial sample size");
  flag(simulate, "--ext-multiplier", "ext_multiplier", "external size as a multiple of n_rct");
  flag(simulate, "--reps", "reps", "Monte Carlo replicates");
  flag(simulate, "--seed", "seed", "master seed");
  flag(simulate, "--censoring-rate", "censoring_rate", "MCAR outcome missingness");

  auto* oracle = app.add_subcommand("oracle-check", "Exact checks of estimands and gradients on discrete laws");
  int sweep = 50, directions = 5;
  std::uint64_t oracle_seed = 1;
  oracle->add_option("--sweep", sweep, "number of random distributions")->check(CLI::NonNegativeNumber);
  oracle->add_option("--directions", directions, "directions per tangent subspace")->check(CLI::PositiveNumber);
  oracle->add_option("--seed", oracle_seed, "sweep seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInputError;
  }

  try {
    if (*analyze) return run_analyze(data_path, config_path, out_dir, influence, ov, args);
    if (*simulate) return run_simulate(sim_config, sim_out, jobs, ov, args);
    if (*oracle) return run_oracle_check(sweep, directions, oracle_seed);
  } catch (const atmle::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const atmle::EstimationError& e) {
    std::cerr << "estimation failed: " << e.what() << "\n";
    return kEstimationFailed;
  } catch (const std::exception& e) {
    std::cerr << "estimation failed: " << e.what() << "\n";
    return kEstimationFailed;
  }
  return kInputError;
}
