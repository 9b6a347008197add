#ifndef SAFELABEL_SIMULATE_HPP
#define SAFELABEL_SIMULATE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "safelabel/debias.hpp"
#include "safelabel/error.hpp"
#include "safelabel/io.hpp"
#include "safelabel/parallel.hpp"
#include "safelabel/population.hpp"
#include "safelabel/regress.hpp"
#include "safelabel/rng.hpp"
#include "safelabel/stats.hpp"

namespace safelabel {

enum class Estimator { plug_in, debiased, validation_only };

inline std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::plug_in: return "plug_in";
    case Estimator::debiased: return "debiased";
    case Estimator::validation_only: return "validation_only";
  }
  return "?";
}

inline Estimator estimator_from_string(const std::string& s) {
  if (s == "plug_in") return Estimator::plug_in;
  if (s == "debiased") return Estimator::debiased;
  if (s == "validation_only") return Estimator::validation_only;
  throw ValidationError("unknown estimator '" + s + "' (expected plug_in, debiased or validation_only)");
}

inline constexpr double cell_failure_limit = 0.05;

struct SimulationConfig {
  std::size_t n_sample = 5000;
  std::vector<double> validation_fracs{0.025, 0.05, 0.10, 0.25, 0.50};
  std::size_t replications = 1000;
  std::vector<Estimator> estimators{Estimator::plug_in, Estimator::debiased, Estimator::validation_only};
  Side side = Side::lhs;
  /// Empty: every labeler in the population.
  std::vector<std::string> labelers;
  /// lhs: coefficient indices to report (empty: all non-intercept columns).
  std::vector<std::size_t> coefficients;
  /// rhs: outcome columns W_j; the reported coefficient is the slope on V.
  std::vector<std::size_t> rhs_outcomes{1};
  double ci_level = 0.95;
  VarianceSource plug_in_variance = VarianceSource::hc1;
  /// Unset: formula when the Omega formulas apply (k = 2 or rhs), hc1 otherwise.
  std::optional<VarianceSource> debiased_variance;
  VarianceSource validation_variance = VarianceSource::hc1;
  std::size_t bootstrap_reps = 200;
  std::uint64_t seed = 0;
  unsigned workers = 1;
  /// Keep per-replication estimates in the cell results.
  bool keep_draws = false;

  void validate(const Population& pop) const {
    if (replications < 1) throw ValidationError("replications must be at least 1");
    if (n_sample < 1 || n_sample > pop.size())
      throw ValidationError("n_sample must lie in [1, N_R=" + std::to_string(pop.size()) + "]");
    if (validation_fracs.empty()) throw ValidationError("at least one validation fraction is required");
    for (double f : validation_fracs)
      if (!(f > 0.0 && f < 1.0)) throw ValidationError("validation fractions must lie in (0, 1)");
    if (estimators.empty()) throw ValidationError("at least one estimator is required");
    if (!(ci_level > 0.0 && ci_level < 1.0)) throw ValidationError("ci level must lie in (0, 1)");
    if (plug_in_variance == VarianceSource::formula)
      throw ValidationError("plug-in has no formula variance");
    for (std::size_t j : coefficients)
      if (j >= pop.k()) throw ValidationError("coefficient index out of range");
    for (std::size_t j : rhs_outcomes)
      if (j >= pop.k()) throw ValidationError("rhs outcome column out of range");
    if (side == Side::rhs && rhs_outcomes.empty()) throw ValidationError("rhs needs an outcome column");
  }
};

inline nlohmann::json to_json(const SimulationConfig& c) {
  nlohmann::json j;
  j["n_sample"] = c.n_sample;
  j["validation_fracs"] = c.validation_fracs;
  j["replications"] = c.replications;
  nlohmann::json est = nlohmann::json::array();
  for (auto e : c.estimators) est.push_back(to_string(e));
  j["estimators"] = est;
  j["side"] = to_string(c.side);
  j["labelers"] = c.labelers;
  j["coefficients"] = c.coefficients;
  j["rhs_outcomes"] = c.rhs_outcomes;
  j["ci_level"] = c.ci_level;
  j["plug_in_variance"] = to_string(c.plug_in_variance);
  j["debiased_variance"] = c.debiased_variance ? nlohmann::json(to_string(*c.debiased_variance)) : nlohmann::json();
  j["validation_variance"] = to_string(c.validation_variance);
  j["bootstrap_reps"] = c.bootstrap_reps;
  j["seed"] = c.seed;
  return j;
}

/// Overlays the keys present in `j` onto `base`. Unknown keys are errors.
inline SimulationConfig simulation_config_from_json(const nlohmann::json& j, SimulationConfig base = {}) {
  if (!j.is_object()) throw ValidationError("simulation config must be an object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "n_sample") base.n_sample = value.get<std::size_t>();
      else if (key == "validation_fracs") base.validation_fracs = value.get<std::vector<double>>();
      else if (key == "replications") base.replications = value.get<std::size_t>();
      else if (key == "estimators") {
        base.estimators.clear();
        for (const auto& e : value) base.estimators.push_back(estimator_from_string(e.get<std::string>()));
      } else if (key == "side") base.side = side_from_string(value.get<std::string>());
      else if (key == "labelers") base.labelers = value.get<std::vector<std::string>>();
      else if (key == "coefficients") base.coefficients = value.get<std::vector<std::size_t>>();
      else if (key == "rhs_outcomes") base.rhs_outcomes = value.get<std::vector<std::size_t>>();
      else if (key == "ci_level") base.ci_level = value.get<double>();
      else if (key == "plug_in_variance") base.plug_in_variance = variance_source_from_string(value.get<std::string>());
      else if (key == "debiased_variance") {
        if (value.is_null()) base.debiased_variance.reset();
        else base.debiased_variance = variance_source_from_string(value.get<std::string>());
      } else if (key == "validation_variance")
        base.validation_variance = variance_source_from_string(value.get<std::string>());
      else if (key == "bootstrap_reps") base.bootstrap_reps = value.get<std::size_t>();
      else if (key == "seed") base.seed = value.get<std::uint64_t>();
      else if (key == "workers") base.workers = value.get<unsigned>();
      else throw ValidationError("unknown simulation config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid simulation config: ") + e.what());
  }
  return base;
}

struct SimulationCellResult {
  std::string labeler;
  std::string spec;  ///< coefficient (lhs "w_j") or outcome (rhs "w_j~v")
  double frac = 0.0;
  std::size_t n_validation = 0;
  Estimator estimator = Estimator::plug_in;
  double target = 0.0;
  std::size_t replications = 0;  ///< successful replications
  std::size_t failures = 0;
  bool valid = true;
  double normalized_bias = 0.0;
  double coverage = 0.0;
  double mse = 0.0;
  double mean_se = 0.0;
  double mean_estimate = 0.0;
  double sd_estimate = 0.0;
  std::vector<double> estimates;  ///< per replication (NaN when failed); only with keep_draws
};

namespace detail {

struct CellPlan {
  std::size_t labeler, outcome, frac, estimator;
  std::size_t coefficient;  // index into the estimator's coefficient vector
  std::string spec;
};

struct Draw {
  double estimate = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  bool covered = false;
  bool ok = false;
};

}  // namespace detail

/// Finite-population Monte Carlo. Replication b draws n_sample pieces without
/// replacement from stream (seed, b, 0); for validation fraction f it
/// shuffles that draw with stream (seed, b, 1 + f) and takes the first
/// validation_count(n, f) pieces as the validation arm, the rest as primary.
/// Targets are full-population coefficients. Results do not depend on the
/// worker count.
inline std::vector<SimulationCellResult> run_monte_carlo(const Population& pop, const SimulationConfig& cfg) {
  cfg.validate(pop);
  const std::vector<std::string> labelers = cfg.labelers.empty() ? pop.labelers() : cfg.labelers;
  if (labelers.empty()) throw ValidationError("population carries no labeler");
  const std::size_t n = cfg.n_sample;

  std::vector<std::size_t> coefs = cfg.coefficients;
  if (cfg.side == Side::lhs && coefs.empty()) {
    for (std::size_t j = 1; j < pop.k(); ++j) coefs.push_back(j);
    if (coefs.empty()) coefs.push_back(0);
  }
  const std::vector<std::size_t> outcomes =
      cfg.side == Side::lhs ? std::vector<std::size_t>{0} : cfg.rhs_outcomes;
  const bool scalar = cfg.side == Side::rhs || pop.k() == 2;
  const VarianceSource deb_var =
      cfg.debiased_variance.value_or(scalar ? VarianceSource::formula : VarianceSource::hc1);

  // Targets per outcome (lhs: one coefficient vector).
  std::vector<std::vector<double>> targets;
  for (std::size_t o : outcomes) {
    EstimateOptions eo;
    eo.rhs_outcome = o;
    targets.push_back(target(pop, cfg.side, eo).coefficients);
  }

  std::vector<detail::CellPlan> plan;
  for (std::size_t l = 0; l < labelers.size(); ++l)
    for (std::size_t o = 0; o < outcomes.size(); ++o)
      for (std::size_t c = 0; c < (cfg.side == Side::lhs ? coefs.size() : 1); ++c)
        for (std::size_t f = 0; f < cfg.validation_fracs.size(); ++f)
          for (std::size_t e = 0; e < cfg.estimators.size(); ++e) {
            detail::CellPlan p{l, o, f, e, 0, {}};
            if (cfg.side == Side::lhs) {
              p.coefficient = coefs[c];
              p.spec = "w_" + std::to_string(coefs[c]);
            } else {
              p.coefficient = 1;
              p.spec = "w_" + std::to_string(outcomes[o]) + "~v";
            }
            plan.push_back(std::move(p));
          }

  std::vector<std::size_t> n_val(cfg.validation_fracs.size());
  for (std::size_t f = 0; f < n_val.size(); ++f) n_val[f] = validation_count(n, cfg.validation_fracs[f]);

  const std::size_t n_cells = plan.size();
  const std::size_t reps = cfg.replications;
  std::vector<detail::Draw> draws(reps * n_cells);
  const double z = stats::normal_critical(cfg.ci_level);

  parallel_for(reps, cfg.workers, [&](std::size_t b) {
    auto draw_rng = CounterRng::stream(cfg.seed, b, 0);
    const auto drawn = sample_without_replacement(pop.size(), n, draw_rng);
    for (std::size_t f = 0; f < cfg.validation_fracs.size(); ++f) {
      std::vector<std::size_t> perm = drawn;
      auto split_rng = CounterRng::stream(cfg.seed, b, 1 + f);
      partial_shuffle(std::span<std::size_t>(perm), n_val[f], split_rng);
      std::vector<std::size_t> val(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val[f]));
      std::vector<std::size_t> pri(perm.begin() + static_cast<std::ptrdiff_t>(n_val[f]), perm.end());
      std::sort(val.begin(), val.end());
      std::sort(pri.begin(), pri.end());
      const Sample sample = Sample::from_rows(pop.size(), std::move(pri), std::move(val));
      for (std::size_t l = 0; l < labelers.size(); ++l)
        for (std::size_t o = 0; o < outcomes.size(); ++o)
          for (std::size_t e = 0; e < cfg.estimators.size(); ++e) {
            EstimateOptions eo;
            eo.rhs_outcome = outcomes[o];
            eo.ci_level = cfg.ci_level;
            eo.bootstrap_reps = cfg.bootstrap_reps;
            eo.seed = derive_key(cfg.seed, b, 1 + f, 1000 + e);
            std::optional<EstimateReport> rep;
            try {
              switch (cfg.estimators[e]) {
                case Estimator::plug_in:
                  eo.variance = cfg.plug_in_variance;
                  rep = plug_in(pop, sample, labelers[l], cfg.side, eo);
                  break;
                case Estimator::debiased:
                  eo.variance = deb_var;
                  rep = cfg.side == Side::lhs ? debias_lhs(pop, sample, labelers[l], eo)
                                              : debias_rhs(pop, sample, labelers[l], eo);
                  break;
                case Estimator::validation_only:
                  eo.variance = cfg.validation_variance;
                  rep = validation_only(pop, sample, cfg.side, eo, labelers[l]);
                  break;
              }
            } catch (const NumericError&) {
              rep.reset();
            }
            for (std::size_t c = 0; c < n_cells; ++c) {
              const auto& p = plan[c];
              if (p.labeler != l || p.outcome != o || p.frac != f || p.estimator != e) continue;
              auto& d = draws[b * n_cells + c];
              if (!rep) continue;
              const double est = rep->coefficients[p.coefficient];
              const double se = rep->se[p.coefficient];
              const auto& iv = rep->ci[p.coefficient];
              if (!std::isfinite(est) || !std::isfinite(se)) continue;
              const double t = targets[o][p.coefficient];
              d.ok = true;
              d.estimate = est;
              d.se = se;
              d.covered = rep->variance_source == VarianceSource::bootstrap
                              ? (iv.lo <= t && t <= iv.hi)
                              : (std::abs(est - t) <= z * se);
            }
          }
    }
  });

  std::vector<SimulationCellResult> out;
  out.reserve(n_cells);
  for (std::size_t c = 0; c < n_cells; ++c) {
    const auto& p = plan[c];
    SimulationCellResult r;
    r.labeler = labelers[p.labeler];
    r.spec = p.spec;
    r.frac = cfg.validation_fracs[p.frac];
    r.n_validation = n_val[p.frac];
    r.estimator = cfg.estimators[p.estimator];
    r.target = targets[p.outcome][p.coefficient];
    std::vector<double> est, se;
    std::size_t covered = 0;
    double sq = 0.0;
    for (std::size_t b = 0; b < reps; ++b) {
      const auto& d = draws[b * n_cells + c];
      if (cfg.keep_draws) r.estimates.push_back(d.ok ? d.estimate : std::numeric_limits<double>::quiet_NaN());
      if (!d.ok) {
        ++r.failures;
        continue;
      }
      est.push_back(d.estimate);
      se.push_back(d.se);
      covered += d.covered ? 1 : 0;
      sq += (d.estimate - r.target) * (d.estimate - r.target);
    }
    r.replications = est.size();
    r.valid = static_cast<double>(r.failures) <= cell_failure_limit * static_cast<double>(reps) && !est.empty();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (est.empty()) {
      r.normalized_bias = r.coverage = r.mse = r.mean_se = r.mean_estimate = r.sd_estimate = nan;
    } else {
      const double m = static_cast<double>(est.size());
      r.mean_estimate = stats::mean(est);
      r.sd_estimate = est.size() > 1 ? stats::stddev(est) : nan;
      r.normalized_bias = r.sd_estimate > 0.0 ? (r.mean_estimate - r.target) / r.sd_estimate : nan;
      r.coverage = static_cast<double>(covered) / m;
      r.mse = sq / m;
      r.mean_se = stats::mean(se);
    }
    out.push_back(std::move(r));
  }
  return out;
}

struct QuantileTriple {
  double median = 0.0, q05 = 0.0, q95 = 0.0;
};

struct EstimatorSummary {
  Estimator estimator = Estimator::plug_in;
  std::size_t cells = 0;
  QuantileTriple normalized_bias, coverage;
};

struct CdfPoint {
  double mse = 0.0;
  double cdf = 0.0;
};

struct SimulationSummary {
  std::vector<EstimatorSummary> rows;
  /// ECDF of cell MSE for debiased and validation-only (when present).
  std::vector<std::pair<Estimator, std::vector<CdfPoint>>> mse_cdf;
};

namespace detail {

inline QuantileTriple triple(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  return {stats::quantile_sorted(xs, 0.5), stats::quantile_sorted(xs, 0.05), stats::quantile_sorted(xs, 0.95)};
}

}  // namespace detail

/// Type-7 quantiles (median, 5%, 95%) of normalized bias and coverage over the
/// valid cells of each estimator, and MSE ECDFs.
inline SimulationSummary summarize(const std::vector<SimulationCellResult>& cells) {
  if (cells.empty()) throw ValidationError("summarize needs at least one cell");
  SimulationSummary s;
  for (Estimator e : {Estimator::plug_in, Estimator::debiased, Estimator::validation_only}) {
    std::vector<double> nb, cov, mse;
    bool present = false;
    for (const auto& c : cells) {
      if (c.estimator != e) continue;
      present = true;
      if (!c.valid) continue;
      if (std::isfinite(c.normalized_bias)) nb.push_back(c.normalized_bias);
      if (std::isfinite(c.coverage)) cov.push_back(c.coverage);
      if (std::isfinite(c.mse)) mse.push_back(c.mse);
    }
    if (!present) continue;
    EstimatorSummary row;
    row.estimator = e;
    row.cells = cov.size();
    row.normalized_bias = detail::triple(nb);
    row.coverage = detail::triple(cov);
    s.rows.push_back(row);
    if (e != Estimator::plug_in) {
      std::sort(mse.begin(), mse.end());
      std::vector<CdfPoint> pts;
      for (std::size_t i = 0; i < mse.size(); ++i)
        pts.push_back({mse[i], static_cast<double>(i + 1) / static_cast<double>(mse.size())});
      s.mse_cdf.emplace_back(e, std::move(pts));
    }
  }
  return s;
}

namespace detail {

inline nlohmann::json number_or_null(double x) {
  return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json();
}

inline nlohmann::json triple_json(const QuantileTriple& t) {
  return {{"median", number_or_null(t.median)}, {"q05", number_or_null(t.q05)}, {"q95", number_or_null(t.q95)}};
}

}  // namespace detail

inline nlohmann::json to_json(const SimulationCellResult& r) {
  using detail::number_or_null;
  nlohmann::json j;
  j["labeler"] = r.labeler;
  j["spec"] = r.spec;
  j["frac"] = r.frac;
  j["n_validation"] = r.n_validation;
  j["estimator"] = to_string(r.estimator);
  j["target"] = r.target;
  j["replications"] = r.replications;
  j["failures"] = r.failures;
  j["valid"] = r.valid;
  j["normalized_bias"] = number_or_null(r.normalized_bias);
  j["coverage"] = number_or_null(r.coverage);
  j["mse"] = number_or_null(r.mse);
  j["mean_se"] = number_or_null(r.mean_se);
  j["mean_estimate"] = number_or_null(r.mean_estimate);
  j["sd_estimate"] = number_or_null(r.sd_estimate);
  return j;
}

inline nlohmann::json to_json(const SimulationSummary& s) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : s.rows)
    rows.push_back({{"estimator", to_string(r.estimator)},
                    {"cells", r.cells},
                    {"normalized_bias", detail::triple_json(r.normalized_bias)},
                    {"coverage", detail::triple_json(r.coverage)}});
  nlohmann::json cdf = nlohmann::json::object();
  for (const auto& [e, pts] : s.mse_cdf) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& p : pts) a.push_back({{"mse", p.mse}, {"cdf", p.cdf}});
    cdf[to_string(e)] = a;
  }
  return {{"rows", rows}, {"mse_cdf", cdf}};
}

inline std::string cells_csv(const std::vector<SimulationCellResult>& cells) {
  std::ostringstream out;
  out << "labeler,spec,frac,n_validation,estimator,target,replications,failures,valid,"
         "normalized_bias,coverage,mse,mean_se,mean_estimate,sd_estimate\n";
  for (const auto& c : cells) {
    out << io::csv_escape(c.labeler) << ',' << io::csv_escape(c.spec) << ',' << io::format_double(c.frac)
        << ',' << c.n_validation << ',' << to_string(c.estimator) << ',' << io::format_double(c.target)
        << ',' << c.replications << ',' << c.failures << ',' << (c.valid ? "true" : "false") << ','
        << io::format_double(c.normalized_bias) << ',' << io::format_double(c.coverage) << ','
        << io::format_double(c.mse) << ',' << io::format_double(c.mean_se) << ','
        << io::format_double(c.mean_estimate) << ',' << io::format_double(c.sd_estimate) << '\n';
  }
  return out.str();
}

/// Writes cells.csv and summary.json into `dir` (created when missing).
inline void write_simulation_outputs(const std::filesystem::path& dir,
                                     const std::vector<SimulationCellResult>& cells,
                                     const SimulationConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  io::write_file(dir / "cells.csv", cells_csv(cells));
  nlohmann::json doc;
  doc["config"] = to_json(cfg);
  doc["summary"] = to_json(summarize(cells));
  io::write_file(dir / "summary.json", doc.dump(2) + "\n");
}

}  // namespace safelabel

#endif
