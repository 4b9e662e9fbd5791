// Command-line front end: simulate Monte Carlo benchmark tables, sweep
// sample sizes, fit the estimator family on CSV panel data, and run the
// shared-effects falsification test.
//
// Exit codes: 0 ok, 1 usage/config, 2 validation, 3 estimation, 4 I/O.

#include <CLI11.hpp>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mrtint/csv.hpp"
#include "mrtint/errors.hpp"
#include "mrtint/sim.hpp"

namespace {

using namespace mrtint;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitEstimation = 3;
constexpr int kExitIo = 4;

// Flat "key = value" configuration file ('#' comments allowed). Keys map to
// long option names of the invoked subcommand; command-line flags override.
std::vector<std::string> config_tokens(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::vector<std::string> tokens;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front())))
        s.erase(s.begin());
      while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back())))
        s.pop_back();
      return s;
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(line_no) +
                        ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError(path + ":" + std::to_string(line_no) +
                        ": expected 'key = value'");
    tokens.push_back("--" + key + "=" + value);
  }
  return tokens;
}

// Extracts --config from the raw arguments and splices its key/value tokens
// in right after the subcommand, so explicit flags take precedence under the
// take-last option policy.
std::vector<std::string> splice_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string config_path;
  for (std::size_t i = 0; i < args.size();) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw ConfigError("--config needs a path");
      config_path = args[i + 1];
      args.erase(args.begin() + i, args.begin() + i + 2);
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
      args.erase(args.begin() + i);
    } else {
      ++i;
    }
  }
  if (!config_path.empty()) {
    if (args.empty() || args[0].empty() || args[0][0] == '-')
      throw ConfigError("--config requires a subcommand");
    auto tokens = config_tokens(config_path);
    args.insert(args.begin() + 1, tokens.begin(), tokens.end());
  }
  return args;
}

std::vector<std::string> resolve_methods(const std::string& methods) {
  if (methods.empty() || methods == "table2") return table2_methods();
  if (methods == "all") return all_methods();
  std::vector<std::string> out;
  std::stringstream ss(methods);
  std::string item;
  while (std::getline(ss, item, ',')) {
    while (!item.empty() && item.front() == ' ') item.erase(item.begin());
    while (!item.empty() && item.back() == ' ') item.pop_back();
    if (!item.empty()) out.push_back(item);
  }
  if (out.empty()) throw ConfigError("empty method list");
  return out;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << content;
  if (!out) throw IoError("write failed for '" + path + "'");
}

struct SimulateArgs {
  SimConfig config;
  std::string methods = "table2";
  std::string d_spec_text;
  std::string out_path;
  std::string dump_path;
  bool no_dof_adjust = false;
};

void add_sim_options(CLI::App* cmd, SimulateArgs& args) {
  cmd->add_option("--n1", args.config.n1, "internal-study participants")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--n0", args.config.n0, "external-study participants")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--T", args.config.T, "decision points per participant")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--reps", args.config.reps, "Monte Carlo replications")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--seed", args.config.seed, "base RNG seed");
  cmd->add_option("--methods", args.methods,
                  "comma list, or 'table2' / 'all'");
  cmd->add_option("--d-spec", args.d_spec_text,
                  "density-ratio features, e.g. '1 + x1 + x2 + x1*x2 + x2^2'");
  cmd->add_flag("--estimate-ph", args.config.estimate_ph,
                "fit the randomization probabilities by logistic regression");
  cmd->add_flag("--no-dof-adjust", args.no_dof_adjust,
                "skip the n/(n-p) small-sample variance adjustment");
  cmd->add_option("--threads", args.config.threads,
                  "worker threads (0 = hardware)");
  cmd->add_option("--out", args.out_path, "metrics CSV path")->required();
  cmd->add_option("--dump", args.dump_path, "per-replication estimates CSV");
}

SimConfig finalize_sim_config(SimulateArgs& args) {
  args.config.methods = resolve_methods(args.methods);
  if (!args.d_spec_text.empty())
    args.config.d_spec = parse_feature_spec(args.d_spec_text, "d");
  args.config.dof_adjust = !args.no_dof_adjust;
  return args.config;
}

int run_simulate(SimulateArgs& args) {
  SimConfig config = finalize_sim_config(args);
  auto result = run_monte_carlo(config, !args.dump_path.empty());
  std::ostringstream os;
  write_metrics_csv(os, result.metrics);
  write_text_file(args.out_path, os.str());
  if (!args.dump_path.empty()) {
    std::ostringstream dump;
    write_replications_csv(dump, result.replications);
    write_text_file(args.dump_path, dump.str());
  }
  std::cerr << "note: relative_efficiency_pct is the empirical variance of "
               "WCLS-Internal over the method's, x100\n";
  return kExitOk;
}

int run_sweep(SimulateArgs& args, const std::string& axis,
              std::vector<int>& values) {
  SimConfig config = finalize_sim_config(args);
  if (values.empty()) throw ConfigError("sweep requires --values");
  const SweepAxis sweep_axis =
      axis == "n0" ? SweepAxis::n0
                   : (axis == "n1" ? SweepAxis::n1
                                   : throw ConfigError("--axis must be n0 or n1"));
  auto points = sweep(config, sweep_axis, values);
  std::ostringstream os;
  write_sweep_csv(os, sweep_axis, points);
  write_text_file(args.out_path, os.str());
  return kExitOk;
}

struct FitArgs {
  std::string input_path;
  std::string out_path;
  std::string methods = "table2";
  std::string f_r = "1 + x1";
  std::string f_s = "1 + x1";
  std::string g = "1 + x1";
  std::string d;
  std::string ph_spec;
  double epsilon = 1e-6;
  bool estimate_ph = false;
  bool no_dof_adjust = false;
};

ModeratorConfig fit_moderators(const FitArgs& args) {
  FeatureSpec d = args.d.empty() ? parse_feature_spec(args.f_s, "d")
                                 : parse_feature_spec(args.d, "d");
  return ModeratorConfig::make(parse_feature_spec(args.f_r, "f_r"),
                               parse_feature_spec(args.f_s, "f_s"),
                               parse_feature_spec(args.g, "g"), std::move(d));
}

int run_fit(const FitArgs& args) {
  auto dataset = read_dataset_csv_file(args.input_path);
  auto config = fit_moderators(args);
  validate_or_throw(dataset, config, args.epsilon);

  IntegrateOptions options;
  options.dof_adjust = !args.no_dof_adjust;
  options.epsilon = args.epsilon;
  options.estimate_ph = args.estimate_ph;
  if (args.estimate_ph) {
    if (args.ph_spec.empty())
      throw ConfigError("--estimate-ph requires --ph-spec");
    options.ph_spec = parse_feature_spec(args.ph_spec, "p_h");
  }

  const auto methods = resolve_methods(args.methods);
  std::vector<EstimatorOutput> fits;
  for (const auto& method : methods)
    fits.push_back(run_method(method, dataset, config, options));

  // CSV report
  std::ostringstream os;
  os << "method,coefficient,estimate,se,ci_lower,ci_upper,significant\n";
  char buf[40];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    os << buf;
  };
  for (const auto& fit : fits) {
    for (int i = 0; i < fit.beta_r.size(); ++i) {
      const std::string label = term_label(config.f_r.terms[i]);
      os << fit.method << ',' << (label == "1" ? "Intercept" : label) << ',';
      num(fit.beta_r[i]);
      os << ',';
      num(fit.se[i]);
      os << ',';
      num(fit.ci95(i, 0));
      os << ',';
      num(fit.ci95(i, 1));
      os << ',' << (std::abs(fit.beta_r[i]) > 1.96 * fit.se[i] ? 1 : 0) << '\n';
    }
  }
  if (!args.out_path.empty()) write_text_file(args.out_path, os.str());

  // human-readable table, starred at the 0.05 level
  std::printf("%-22s", "Coefficient");
  for (const auto& fit : fits) std::printf("  %-24s", fit.method.c_str());
  std::printf("\n");
  for (int i = 0; i < config.f_r.dim(); ++i) {
    const std::string label = term_label(config.f_r.terms[i]);
    std::printf("%-22s", label == "1" ? "Intercept" : label.c_str());
    for (const auto& fit : fits) {
      const bool sig = std::abs(fit.beta_r[i]) > 1.96 * fit.se[i];
      char cell[64];
      std::snprintf(cell, sizeof(cell), "%s%.3f (%.3f)", sig ? "*" : "",
                    fit.beta_r[i], fit.se[i]);
      std::printf("  %-24s", cell);
    }
    std::printf("\n");
  }
  for (const auto& fit : fits)
    for (const auto& warning : fit.nuisance.warnings)
      std::fprintf(stderr, "warning [%s]: %s\n", fit.method.c_str(),
                   warning.c_str());
  return kExitOk;
}

int run_test_shared(const FitArgs& args) {
  auto dataset = read_dataset_csv_file(args.input_path);
  auto config = fit_moderators(args);
  validate_or_throw(dataset, config, args.epsilon, /*require_external=*/true);

  IntegrateOptions options;
  options.dof_adjust = !args.no_dof_adjust;
  options.epsilon = args.epsilon;
  options.estimate_ph = args.estimate_ph;
  if (args.estimate_ph) {
    if (args.ph_spec.empty())
      throw ConfigError("--estimate-ph requires --ph-spec");
    options.ph_spec = parse_feature_spec(args.ph_spec, "p_h");
  }
  auto test = shared_effects_test(dataset, config, options);
  std::printf("statistic %.6f\ndof %d\np-value %.6f\n", test.statistic,
              test.dof, test.p_value);
  if (!args.out_path.empty()) {
    std::ostringstream os;
    os << "statistic,dof,p_value\n"
       << test.statistic << ',' << test.dof << ',' << test.p_value << '\n';
    write_text_file(args.out_path, os.str());
  }
  return kExitOk;
}

void add_fit_options(CLI::App* cmd, FitArgs& args, bool with_methods) {
  cmd->add_option("--input", args.input_path, "dataset CSV")->required();
  cmd->add_option("--out", args.out_path, "report CSV path");
  if (with_methods)
    cmd->add_option("--methods", args.methods, "comma list, or 'table2' / 'all'");
  cmd->add_option("--f-r", args.f_r, "target moderator features");
  cmd->add_option("--f-s", args.f_s, "shared moderator features");
  cmd->add_option("--g", args.g, "outcome working-model features");
  cmd->add_option("--d", args.d, "density-ratio features (default: f_s)");
  cmd->add_option("--epsilon", args.epsilon, "positivity margin");
  cmd->add_flag("--estimate-ph", args.estimate_ph,
                "fit randomization probabilities by logistic regression");
  cmd->add_option("--ph-spec", args.ph_spec, "p_h feature spec");
  cmd->add_flag("--no-dof-adjust", args.no_dof_adjust,
                "skip the n/(n-p) variance adjustment");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal excursion effects for micro-randomized trials with "
               "cross-study data integration"};
  app.require_subcommand(1);

  auto make_sub = [&](const std::string& name, const std::string& desc) {
    auto* cmd = app.add_subcommand(name, desc);
    cmd->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    cmd->add_option("--config", "flat key = value configuration file "
                                "(flags override file keys)");
    return cmd;
  };

  SimulateArgs sim_args;
  auto* sim_cmd =
      make_sub("simulate", "Monte Carlo benchmark of the estimator family");
  add_sim_options(sim_cmd, sim_args);

  SimulateArgs sweep_args;
  std::string sweep_axis = "n0";
  std::vector<int> sweep_values;
  auto* sweep_cmd =
      make_sub("sweep", "repeat the benchmark across sample sizes");
  add_sim_options(sweep_cmd, sweep_args);
  sweep_cmd->add_option("--axis", sweep_axis, "n0 or n1");
  sweep_cmd->add_option("--values", sweep_values, "ascending sample sizes")
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  FitArgs fit_args;
  auto* fit_cmd = make_sub("fit", "fit the estimators on a dataset CSV");
  add_fit_options(fit_cmd, fit_args, true);

  FitArgs shared_args;
  auto* shared_cmd = make_sub(
      "test-shared", "chi-square falsification test of shared effects");
  add_fit_options(shared_cmd, shared_args, false);

  std::vector<std::string> args;
  try {
    args = splice_config(argc, argv);
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const Error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  }

  try {
    std::reverse(args.begin(), args.end());  // CLI11 consumes a reversed stack
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;  // --help exits 0
  }

  try {
    if (sim_cmd->parsed()) return run_simulate(sim_args);
    if (sweep_cmd->parsed()) return run_sweep(sweep_args, sweep_axis, sweep_values);
    if (fit_cmd->parsed()) return run_fit(fit_args);
    if (shared_cmd->parsed()) return run_test_shared(shared_args);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return kExitValidation;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const Error& e) {
    std::fprintf(stderr, "estimation error: %s\n", e.what());
    return kExitEstimation;
  }
  return kExitUsage;
}
