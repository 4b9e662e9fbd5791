#include "mrtint/features.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>

#include "mrtint/errors.hpp"

namespace mrtint {

int FeatureSpec::max_index() const {
  int m = -1;
  for (const auto& t : terms)
    for (const auto& f : t.factors) m = std::max(m, f.index);
  return m;
}

bool FeatureSpec::has_intercept() const {
  return std::any_of(terms.begin(), terms.end(),
                     [](const FeatureTerm& t) { return t.is_intercept(); });
}

std::vector<int> FeatureSpec::indices() const {
  std::set<int> s;
  for (const auto& t : terms)
    for (const auto& f : t.factors) s.insert(f.index);
  return {s.begin(), s.end()};
}

FeatureSpec intercept_spec(const std::string& name) {
  FeatureSpec spec;
  spec.name = name;
  spec.terms.push_back(FeatureTerm{});
  return spec;
}

FeatureSpec linear_spec(const std::vector<int>& idx, const std::string& name) {
  FeatureSpec spec = intercept_spec(name);
  for (int i : idx) spec.terms.push_back(FeatureTerm{{{i, 1}}});
  return spec;
}

void eval_features(std::span<const double> covariates, const FeatureSpec& spec,
                   double* out) {
  const int dim = static_cast<int>(covariates.size());
  for (std::size_t i = 0; i < spec.terms.size(); ++i) {
    double v = 1.0;
    for (const auto& f : spec.terms[i].factors) {
      if (f.index < 0 || f.index >= dim)
        throw DimensionError("feature spec '" + spec.name + "' references x" +
                             std::to_string(f.index + 1) + " but only " +
                             std::to_string(dim) + " covariates are present");
      double base = covariates[f.index];
      double p = base;
      for (int k = 1; k < f.power; ++k) p *= base;
      v *= p;
    }
    out[i] = v;
  }
}

std::vector<double> eval_features(std::span<const double> covariates,
                                  const FeatureSpec& spec) {
  std::vector<double> out(spec.terms.size());
  eval_features(covariates, spec, out.data());
  return out;
}

namespace {

[[noreturn]] void parse_fail(const std::string& text, std::size_t pos,
                             const std::string& what) {
  throw ConfigError("feature spec parse error at position " +
                    std::to_string(pos + 1) + " in '" + text + "': " + what);
}

}  // namespace

FeatureSpec parse_feature_spec(const std::string& text, const std::string& name) {
  std::string s;
  s.reserve(text.size());
  std::vector<std::size_t> orig_pos;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (!std::isspace(static_cast<unsigned char>(text[i]))) {
      s.push_back(text[i]);
      orig_pos.push_back(i);
    }
  }
  if (s.empty()) parse_fail(text, 0, "empty spec");

  FeatureSpec spec;
  spec.name = name.empty() ? text : name;

  auto read_int = [&](std::size_t& i) {
    std::size_t start = i;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
    if (i == start) parse_fail(text, orig_pos[std::min(start, s.size() - 1)], "expected a number");
    return std::stoi(s.substr(start, i - start));
  };

  std::size_t i = 0;
  while (true) {
    FeatureTerm term;
    if (s[i] == '1') {
      ++i;  // intercept term
    } else {
      while (true) {
        if (s[i] != 'x' && s[i] != 'X')
          parse_fail(text, orig_pos[i], "expected '1' or 'x<k>'");
        ++i;
        if (i >= s.size()) parse_fail(text, text.size() - 1, "expected covariate number");
        int idx = read_int(i);
        if (idx < 1) parse_fail(text, orig_pos[i - 1], "covariate numbers start at 1");
        int power = 1;
        if (i < s.size() && s[i] == '^') {
          ++i;
          if (i >= s.size()) parse_fail(text, text.size() - 1, "expected exponent");
          power = read_int(i);
          if (power < 1) parse_fail(text, orig_pos[i - 1], "exponent must be >= 1");
        }
        term.factors.push_back({idx - 1, power});
        if (i < s.size() && s[i] == '*') {
          ++i;
          if (i >= s.size()) parse_fail(text, text.size() - 1, "dangling '*'");
          continue;
        }
        break;
      }
    }
    spec.terms.push_back(std::move(term));
    if (i >= s.size()) break;
    if (s[i] != '+') parse_fail(text, orig_pos[i], "expected '+'");
    ++i;
    if (i >= s.size()) parse_fail(text, text.size() - 1, "dangling '+'");
  }

  int intercepts = 0;
  for (const auto& t : spec.terms) intercepts += t.is_intercept() ? 1 : 0;
  if (intercepts > 1) parse_fail(text, 0, "intercept appears more than once");
  return spec;
}

std::string term_label(const FeatureTerm& term) {
  if (term.is_intercept()) return "1";
  std::ostringstream os;
  bool first = true;
  for (const auto& f : term.factors) {
    if (!first) os << '*';
    first = false;
    os << 'x' << (f.index + 1);
    if (f.power != 1) os << '^' << f.power;
  }
  return os.str();
}

std::string to_string(const FeatureSpec& spec) {
  std::ostringstream os;
  for (std::size_t i = 0; i < spec.terms.size(); ++i) {
    if (i) os << " + ";
    os << term_label(spec.terms[i]);
  }
  return os.str();
}

int common_prefix(const FeatureSpec& a, const FeatureSpec& b) {
  int c = 0;
  while (c < a.dim() && c < b.dim() && a.terms[c] == b.terms[c]) ++c;
  return c;
}

ModeratorConfig ModeratorConfig::make(FeatureSpec f_r, FeatureSpec f_s,
                                      FeatureSpec g, FeatureSpec d) {
  ModeratorConfig cfg;
  cfg.common_count = common_prefix(f_r, f_s);
  auto r_idx = f_r.indices();
  auto s_idx = f_s.indices();
  for (int i : r_idx) {
    if (!std::binary_search(s_idx.begin(), s_idx.end(), i)) {
      // R_t moderators must be a subset of S_t moderators
      throw ConfigError("f_r uses covariate x" + std::to_string(i + 1) +
                        " which f_s does not reference");
    }
  }
  cfg.f_r = std::move(f_r);
  cfg.f_s = std::move(f_s);
  cfg.g = std::move(g);
  cfg.d = std::move(d);
  return cfg;
}

}  // namespace mrtint
