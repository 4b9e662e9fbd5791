#pragma once

#include <span>
#include <string>
#include <vector>

namespace mrtint {

// One term of a feature map: a product of integer powers of covariates.
// An empty factor list is the intercept.
struct FeatureTerm {
  struct Factor {
    int index = 0;  // 0-based covariate index
    int power = 1;  // >= 1
    bool operator==(const Factor&) const = default;
  };
  std::vector<Factor> factors;

  bool is_intercept() const { return factors.empty(); }
  bool operator==(const FeatureTerm&) const = default;
};

// Declarative feature map from a covariate vector to a design row.
// Terms are plain descriptors (no code), so evaluation, serialization and
// analytic derivatives stay exact.
struct FeatureSpec {
  std::string name;
  std::vector<FeatureTerm> terms;

  int dim() const { return static_cast<int>(terms.size()); }
  // Largest covariate index referenced, -1 for intercept-only.
  int max_index() const;
  bool has_intercept() const;
  // Every covariate index referenced (sorted, unique).
  std::vector<int> indices() const;
};

// Convenience builders.
FeatureSpec intercept_spec(const std::string& name = "");
// intercept + x[i] for each listed 0-based index
FeatureSpec linear_spec(const std::vector<int>& idx, const std::string& name = "");

// Evaluates the spec on a covariate vector; out must hold spec.dim() values.
// Throws DimensionError when the spec references a missing index.
void eval_features(std::span<const double> covariates, const FeatureSpec& spec,
                   double* out);
std::vector<double> eval_features(std::span<const double> covariates,
                                  const FeatureSpec& spec);

// Mini-language used by the CLI and config files:
//   spec   := term ('+' term)*
//   term   := '1' | factor ('*' factor)*
//   factor := 'x' INT ('^' INT)?
// Whitespace-insensitive; covariates are 1-based in the text form (x1 is
// covariate index 0). Throws ConfigError with a position on bad input.
FeatureSpec parse_feature_spec(const std::string& text, const std::string& name = "");
std::string to_string(const FeatureSpec& spec);
std::string term_label(const FeatureTerm& term);

// Length of the longest common prefix of identical term descriptors.
int common_prefix(const FeatureSpec& a, const FeatureSpec& b);

// Moderator configuration shared by the integration estimators. f_r and f_s
// must agree on their leading common_count terms, and every covariate f_r
// uses must also be available to f_s.
struct ModeratorConfig {
  FeatureSpec f_r;
  FeatureSpec f_s;
  FeatureSpec g;
  FeatureSpec d;
  int common_count = 0;

  static ModeratorConfig make(FeatureSpec f_r, FeatureSpec f_s, FeatureSpec g,
                              FeatureSpec d);
};

}  // namespace mrtint
