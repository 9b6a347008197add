#ifndef SAFELABEL_CLI_HPP
#define SAFELABEL_CLI_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "safelabel/bounds.hpp"
#include "safelabel/config.hpp"
#include "safelabel/context.hpp"
#include "safelabel/debias.hpp"
#include "safelabel/error.hpp"
#include "safelabel/moment.hpp"
#include "safelabel/population.hpp"
#include "safelabel/probe.hpp"
#include "safelabel/regress.hpp"
#include "safelabel/simulate.hpp"

#include <CLI11.hpp>
#include <json.hpp>

namespace safelabel::cli {

using json = nlohmann::json;

inline constexpr int exit_ok = 0;
inline constexpr int exit_validation = 2;
inline constexpr int exit_numeric = 3;
inline constexpr int exit_io = 4;

inline const std::vector<std::string>& operations() {
  static const std::vector<std::string> ops{"synth", "targets", "estimate", "debias", "bounds",
                                            "leakage", "simulate", "probe", "check"};
  return ops;
}

// ---------------------------------------------------------------------------
// Parameter access

namespace detail {

template <typename T>
T param(const json& p, const std::string& key, T fallback) {
  if (!p.contains(key) || p.at(key).is_null()) return fallback;
  try {
    return p.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError("parameter '" + key + "' has the wrong type");
  }
}

template <typename T>
T required(const json& p, const std::string& key) {
  if (!p.contains(key) || p.at(key).is_null()) throw ValidationError("missing parameter '" + key + "'");
  try {
    return p.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError("parameter '" + key + "' has the wrong type");
  }
}

inline void allow_only(const json& p, const std::set<std::string>& keys, const std::string& op) {
  for (const auto& [k, v] : p.items())
    if (!keys.count(k)) throw ValidationError(op + ": unknown parameter '" + k + "'");
}

inline Population population_param(const json& p) {
  if (!p.contains("pop")) throw ValidationError("missing parameter 'pop'");
  const auto& v = p.at("pop");
  if (v.is_string()) return load_population(v.get<std::string>());
  if (v.is_array()) return population_from_json(v);
  throw ValidationError("parameter 'pop' must be a path or an inline population");
}

inline ResearchContext context_param(const json& p, const Population& pop) {
  const auto spec = param<std::string>(p, "context", "census");
  const double train_prob = param<double>(p, "train_prob", 0.5);
  const auto seed = param<std::uint64_t>(p, "seed", 0);
  if (spec.size() > 5 && spec.substr(spec.size() - 5) == ".json")
  {
    const auto doc = json::parse(io::read_file(spec), nullptr, false);
    if (doc.is_discarded()) throw ParseError("context file " + spec + " is not valid JSON", 0);
    return context_from_json(doc, pop);
  }
  return context_from_preset(spec, pop.size(), train_prob, seed);
}

inline MomentSpec moment_param(const json& m, std::size_t k) {
  MomentSpec s;
  s.family = moment_family_from_string(param<std::string>(m, "family", "product"));
  s.column = param<std::size_t>(m, "column", k > 1 ? 1 : 0);
  if (m.contains("theta_box")) {
    for (const auto& iv : m.at("theta_box")) {
      if (!iv.is_array() || iv.size() != 2) throw ValidationError("theta_box entries must be [lo, hi]");
      s.theta_box.push_back({iv[0].get<double>(), iv[1].get<double>()});
    }
  } else if (s.uses_theta()) {
    s.theta_box.assign(k, {-1.0, 1.0});
  }
  if (m.contains("v_domain")) {
    const auto& d = m.at("v_domain");
    if (!d.is_array() || d.size() != 2) throw ValidationError("v_domain must be [lo, hi]");
    s.v_domain = {d[0].get<double>(), d[1].get<double>()};
  }
  s.g_lower = param<double>(m, "g_lower", s.g_lower);
  s.validate(k);
  return s;
}

inline Sample sample_param(const json& p, const Population& pop) {
  const bool has_col = p.contains("validation_col") && !p.at("validation_col").is_null();
  const bool has_frac = p.contains("validation_frac") && !p.at("validation_frac").is_null();
  if (has_col == has_frac) throw ValidationError("give exactly one of validation_col or validation_frac");
  if (has_col) return sample_from_column(pop, required<std::string>(p, "validation_col"));
  const double frac = required<double>(p, "validation_frac");
  const auto seed = param<std::uint64_t>(p, "seed", 0);
  return random_partition(pop.size(), pop.size(), validation_count(pop.size(), frac), seed);
}

inline EstimateOptions estimate_options(const json& p) {
  EstimateOptions o;
  o.rhs_outcome = param<std::size_t>(p, "rhs_outcome", 1);
  if (p.contains("variance") && !p.at("variance").is_null())
    o.variance = variance_source_from_string(p.at("variance").get<std::string>());
  o.ci_level = param<double>(p, "ci_level", 0.95);
  o.bootstrap_reps = param<std::size_t>(p, "bootstrap_reps", 1000);
  o.seed = param<std::uint64_t>(p, "seed", 0);
  o.workers = param<unsigned>(p, "workers", 1);
  return o;
}

inline std::string default_labeler(const json& p, const Population& pop) {
  if (p.contains("labeler") && !p.at("labeler").is_null()) return p.at("labeler").get<std::string>();
  const auto labelers = pop.labelers();
  if (labelers.size() == 1) return labelers.front();
  throw ValidationError("parameter 'labeler' is required when the population has " +
                        std::to_string(labelers.size()) + " labelers");
}

inline json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations

inline json op_synth(const json& p) {
  detail::allow_only(p, {"n", "beta_star", "gamma", "noise_sd_v", "noise_sd_delta", "covariate_law", "bernoulli_p",
                         "seed", "labeler", "out"},
                     "synth");
  SyntheticSpec s;
  s.n_pieces = detail::param<std::size_t>(p, "n", s.n_pieces);
  s.beta_star = detail::param<std::vector<double>>(p, "beta_star", s.beta_star);
  s.gamma = detail::param<std::vector<double>>(p, "gamma", std::vector<double>(s.beta_star.size(), 0.0));
  s.noise_sd_v = detail::param<double>(p, "noise_sd_v", s.noise_sd_v);
  s.noise_sd_delta = detail::param<double>(p, "noise_sd_delta", s.noise_sd_delta);
  const auto law = detail::param<std::string>(p, "covariate_law", "standard_normal");
  if (law == "standard_normal") s.covariate_law = CovariateLaw::standard_normal;
  else if (law == "bernoulli") s.covariate_law = CovariateLaw::bernoulli;
  else if (law == "fixed_grid") s.covariate_law = CovariateLaw::fixed_grid;
  else throw ValidationError("unknown covariate law '" + law + "'");
  s.bernoulli_p = detail::param<double>(p, "bernoulli_p", s.bernoulli_p);
  s.seed = detail::param<std::uint64_t>(p, "seed", 0);
  s.labeler = detail::param<std::string>(p, "labeler", s.labeler);
  const auto pop = generate_synthetic(s);
  json out = {{"n_pieces", pop.size()}, {"k", pop.k()}, {"labeler", s.labeler}, {"seed", s.seed}};
  if (p.contains("out") && !p.at("out").is_null()) {
    const auto path = p.at("out").get<std::string>();
    save_population(pop, path);
    out["out"] = path;
  } else {
    out["population"] = population_to_json(pop);
  }
  return out;
}

inline json op_targets(const json& p) {
  detail::allow_only(p, {"pop", "labeler", "side", "rhs_outcome"}, "targets");
  const auto pop = detail::population_param(p);
  const auto labeler = detail::default_labeler(p, pop);
  RegressionSpec spec;
  spec.side = side_from_string(detail::param<std::string>(p, "side", "lhs"));
  spec.rhs_outcome = detail::param<std::size_t>(p, "rhs_outcome", 1);
  const auto t = population_targets(pop, labeler, spec);
  json out = {{"side", to_string(spec.side)}, {"labeler", labeler}, {"population_size", pop.size()}};
  if (spec.side == Side::lhs) {
    out["beta_star"] = detail::vec_json(t.beta_star);
    out["beta_plugin"] = detail::vec_json(t.beta_plugin);
    out["lambda_delta_w"] = detail::vec_json(t.lambda_delta_w);
    out["identity_residual"] = t.identity_residual_lhs;
  } else {
    out["rhs_outcome"] = spec.rhs_outcome;
    out["alpha_star"] = detail::vec_json(t.alpha_star);
    out["alpha_plugin"] = detail::vec_json(t.alpha_plugin);
    out["lambda_eta_vhat"] = detail::vec_json(t.lambda_eta_vhat);
    json lam = json::array();
    for (Eigen::Index i = 0; i < t.lambda_v_vhat.rows(); ++i)
      lam.push_back(detail::vec_json(t.lambda_v_vhat.row(i).transpose()));
    out["lambda_v_vhat"] = lam;
    out["identity_residual"] = t.identity_residual_rhs;
  }
  return out;
}

inline const std::set<std::string>& estimate_keys() {
  static const std::set<std::string> keys{"pop",     "labeler",        "side",      "method",   "validation_col",
                                          "validation_frac", "variance", "bootstrap_reps", "seed", "ci_level",
                                          "rhs_outcome", "workers"};
  return keys;
}

inline json op_estimate(const json& p) {
  detail::allow_only(p, estimate_keys(), "estimate");
  const auto pop = detail::population_param(p);
  const auto side = side_from_string(detail::param<std::string>(p, "side", "lhs"));
  const auto method = detail::param<std::string>(p, "method", "plug_in");
  auto opts = detail::estimate_options(p);
  if (method == "target") return to_json(target(pop, side, opts));
  const auto sample = detail::sample_param(p, pop);
  if (method == "plug_in") return to_json(plug_in(pop, sample, detail::default_labeler(p, pop), side, opts));
  if (method == "validation_only") {
    const std::string labeler = p.contains("labeler") ? detail::param<std::string>(p, "labeler", "") : "";
    return to_json(validation_only(pop, sample, side, opts, labeler));
  }
  if (method == "debiased") {
    const auto labeler = detail::default_labeler(p, pop);
    return to_json(side == Side::lhs ? debias_lhs(pop, sample, labeler, opts) : debias_rhs(pop, sample, labeler, opts));
  }
  throw ValidationError("unknown method '" + method + "' (expected plug_in, validation_only, debiased or target)");
}

inline json op_debias(const json& p) {
  auto keys = estimate_keys();
  keys.erase("method");
  detail::allow_only(p, keys, "debias");
  json q = p;
  q["method"] = "debiased";
  return op_estimate(q);
}

inline json op_bounds(const json& p) {
  detail::allow_only(p, {"pop", "context", "train_prob", "seed", "moment", "delta", "theta"}, "bounds");
  const auto pop = detail::population_param(p);
  const auto ctx = detail::context_param(p, pop);
  const auto moment = detail::moment_param(p.value("moment", json::object()), pop.k());
  GuaranteeBand band{detail::param<double>(p, "delta", 0.1)};
  const auto theta = detail::param<std::vector<double>>(p, "theta", moment.theta_center());
  const auto sens = sensitive_set(pop, ctx, moment);
  const auto adv = adversarial_band_member(pop, ctx, moment, band, theta);
  json out = {{"g_upper", adv.g_upper},
              {"g_lower", moment.g_lower},
              {"delta", band.delta},
              {"theta", theta},
              {"sensitive_count", sens.size()},
              {"sensitive_ids", sens},
              {"achieved_error", adv.achieved_error},
              {"lower_bound", adv.lower_bound},
              {"upper_bound", adv.upper_bound}};
  if (!sens.empty()) {
    const std::vector<MomentSpec> ms{moment};
    const auto verdict = gpt_for_estimation_check(pop, ctx, ms, band);
    json v = {{"is_gpt", verdict.is_gpt}};
    if (verdict.witness)
      v["witness"] = {{"moment_index", verdict.witness->moment_index},
                      {"theta", verdict.witness->theta},
                      {"error", verdict.witness->error},
                      {"lower_bound", verdict.witness->lower_bound}};
    out["gpt"] = v;
  } else {
    out["gpt"] = nullptr;
  }
  return out;
}

inline json op_leakage(const json& p) {
  detail::allow_only(p, {"pop", "context", "train_prob", "seed", "loss", "labeler", "outcome", "moment", "theta"},
                     "leakage");
  const auto pop = detail::population_param(p);
  const auto ctx = detail::context_param(p, pop);
  const auto labeler = detail::default_labeler(p, pop);
  const auto outcome = detail::param<std::string>(p, "outcome", "y");
  if (outcome != "y" && outcome != "v") throw ValidationError("outcome must be 'y' or 'v'");
  LossSpec loss{loss_kind_from_string(detail::param<std::string>(p, "loss", "squared"))};
  std::vector<double> pred(pop.size(), std::numeric_limits<double>::quiet_NaN());
  std::vector<TextPiece> pieces;
  const bool use_v = outcome == "v";
  for (std::size_t r = 0; r < pop.size(); ++r) {
    auto it = pop[r].labels.find(labeler);
    if (it != pop[r].labels.end()) pred[r] = it->second;
  }
  std::optional<Population> relabelled;
  if (use_v) {
    pieces = pop.pieces();
    for (auto& piece : pieces) piece.y = piece.v_true;
    relabelled.emplace(std::move(pieces));
  }
  const auto leak = leakage_term_prediction(relabelled ? *relabelled : pop, ctx, loss, pred);
  json out = {{"unconditional", leak.unconditional},
              {"conditional", leak.conditional},
              {"leakage_bias", leak.leakage_bias},
              {"loss_mass", leak.loss_mass},
              {"leakage_free", leak.leakage_free()},
              {"expected_sample_size", ctx.expected_sample_size()},
              {"conditional_expected_sample_size", ctx.conditional_expected_sample_size()}};
  if (p.contains("moment") && !p.at("moment").is_null()) {
    const auto moment = detail::moment_param(p.at("moment"), pop.k());
    const auto theta = detail::param<std::vector<double>>(p, "theta", moment.theta_center());
    out["estimation_leakage"] = leakage_term_estimation(pop, ctx, moment, labeler, theta);
  }
  return out;
}

inline json op_simulate(const json& p) {
  const auto pop = detail::population_param(p);
  json cfg_json = json::object();
  for (const auto& [k, v] : p.items())
    if (k != "pop" && k != "out" && k != "include_cells") cfg_json[k] = v;
  const auto cfg = simulation_config_from_json(cfg_json);
  const auto cells = run_monte_carlo(pop, cfg);
  json out;
  out["config"] = to_json(cfg);
  out["summary"] = to_json(summarize(cells));
  json jc = json::array();
  for (const auto& c : cells) jc.push_back(to_json(c));
  out["cells"] = jc;
  if (p.contains("out") && !p.at("out").is_null()) {
    const std::string dir = p.at("out").get<std::string>();
    write_simulation_outputs(dir, cells, cfg);
    out["out"] = dir;
  }
  return out;
}

inline json op_probe(const json& p) {
  detail::allow_only(p, {"pop", "endpoint", "model", "embed_model", "split", "concurrency", "cache", "seed",
                         "template", "max_attempts", "backoff_ms", "records", "api_key_env", "timeout_s"},
                     "probe");
  const auto pop = detail::population_param(p);
  ProbeConfig cfg;
  cfg.endpoint = detail::param<std::string>(p, "endpoint", cfg.endpoint);
  cfg.model = detail::param<std::string>(p, "model", cfg.model);
  cfg.embed_model = detail::param<std::string>(p, "embed_model", cfg.embed_model);
  cfg.split_fraction = detail::param<double>(p, "split", cfg.split_fraction);
  cfg.concurrency = detail::param<unsigned>(p, "concurrency", cfg.concurrency);
  if (p.contains("cache") && !p.at("cache").is_null()) cfg.cache_dir = p.at("cache").get<std::string>();
  cfg.seed = detail::param<std::uint64_t>(p, "seed", 0);
  cfg.prompt_template = detail::param<std::string>(p, "template", cfg.prompt_template);
  cfg.retry.max_attempts = detail::param<unsigned>(p, "max_attempts", cfg.retry.max_attempts);
  cfg.retry.backoff_ms = detail::param<unsigned>(p, "backoff_ms", cfg.retry.backoff_ms);
  cfg.api_key_env = detail::param<std::string>(p, "api_key_env", cfg.api_key_env);
  cfg.timeout_s = detail::param<unsigned>(p, "timeout_s", cfg.timeout_s);
  cfg.validate();
  LlmClient client(cfg);
  auto records = run_probe(pop, cfg, client);
  const auto report = probe_report(records, client, cfg.seed);
  json out = {{"report", to_json(report)}, {"requests", client.requests()}};
  if (detail::param<bool>(p, "records", false)) {
    json rs = json::array();
    for (const auto& r : records) rs.push_back(to_json(r));
    out["records"] = rs;
  }
  return out;
}

// Built-in identity suite.
inline json op_check(const json& p) {
  detail::allow_only(p, {"self", "seed"}, "check");
  if (!detail::param<bool>(p, "self", true)) throw ValidationError("only 'check --self' is available");
  const auto seed = detail::param<std::uint64_t>(p, "seed", 20240601);
  json checks = json::array();
  bool all = true;
  auto record = [&](const std::string& name, double residual, double tol) {
    const bool ok = residual <= tol;
    all = all && ok;
    checks.push_back({{"name", name}, {"max_residual", residual}, {"tolerance", tol}, {"passed", ok}});
  };

  // Leakage decomposition against 4^N enumeration on small random contexts.
  {
    double worst = 0.0;
    for (std::size_t c = 0; c < 20; ++c) {
      auto rng = CounterRng::stream(seed, 1, c);
      const std::size_t n = 2 + rng.below(5);
      std::vector<SamplingTable> tables;
      std::vector<int> t(n);
      std::vector<double> loss(n);
      for (std::size_t r = 0; r < n; ++r) {
        double e[4], s = 0.0;
        for (double& x : e) s += (x = 0.05 + rng.uniform01());
        tables.emplace_back(e[0] / s, e[1] / s, e[2] / s, 1.0 - (e[0] + e[1] + e[2]) / s);
        t[r] = rng.bernoulli(0.5) ? 1 : 0;
        loss[r] = rng.uniform(0.0, 3.0);
      }
      ResearchContext ctx(std::move(tables), std::move(t));
      const auto leak = leakage_from_losses(ctx, loss);
      const auto en = enumerate_expectations(ctx, loss);
      worst = std::max({worst, std::abs(leak.unconditional - en.e_unconditional),
                        std::abs(leak.conditional - en.e_conditional_on_t),
                        std::abs(leak.unconditional - (leak.conditional - leak.leakage_bias))});
    }
    record("leakage_decomposition_vs_enumeration", worst, 1e-12);
  }
  // Bias identities on synthetic populations.
  {
    double worst_l = 0.0, worst_r = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      SyntheticSpec s;
      s.n_pieces = 200 + 100 * c;
      s.beta_star = {0.5, 1.0, -0.5};
      s.gamma = {0.2, -0.3, 0.1};
      s.seed = derive_key(seed, 2, c);
      const auto pop = generate_synthetic(s);
      worst_l = std::max(worst_l, population_targets(pop, s.labeler, {Side::lhs, 1}).identity_residual_lhs);
      worst_r = std::max(worst_r, population_targets(pop, s.labeler, {Side::rhs, 1}).identity_residual_rhs);
    }
    record("lhs_bias_identity", worst_l, 1e-9);
    record("rhs_bias_identity", worst_r, 1e-9);
  }
  // Debiasing on the census (both arms = population) returns the target.
  {
    SyntheticSpec s;
    s.n_pieces = 500;
    s.gamma = {0.3, -0.2};
    s.seed = derive_key(seed, 3);
    const auto pop = generate_synthetic(s);
    const auto rows = all_rows(pop);
    const auto census = Sample::from_rows(pop.size(), rows, rows);
    EstimateOptions o;
    o.variance = VarianceSource::hc1;
    const auto deb = debias_lhs(pop, census, s.labeler, o);
    const auto tgt = target(pop, Side::lhs);
    double worst = 0.0;
    for (std::size_t j = 0; j < deb.coefficients.size(); ++j)
      worst = std::max(worst, std::abs(deb.coefficients[j] - tgt.coefficients[j]));
    record("debias_census_identity", worst, 1e-9);
  }
  // Adversarial band member respects lower <= achieved <= upper.
  {
    SyntheticSpec s;
    s.n_pieces = 50;
    s.seed = derive_key(seed, 4);
    const auto pop = generate_synthetic(s);
    const auto ctx = random_context(pop.size(), 0.5, 0.5, seed);
    MomentSpec m;
    m.family = MomentFamily::squared;
    m.theta_box = {{-1.0, 1.0}, {-1.0, 1.0}};
    m.v_domain = {-20.0, 20.0};
    const auto res = adversarial_band_member(pop, ctx, m, GuaranteeBand{0.25}, m.theta_center());
    const double slack = std::max(res.lower_bound - res.achieved_error, res.achieved_error - res.upper_bound);
    record("band_sandwich", std::max(0.0, slack), 1e-12 * std::max(1.0, res.upper_bound));
  }
  return {{"passed", all}, {"checks", checks}};
}

inline json execute(const std::string& op, const json& params) {
  if (!params.is_object()) throw ValidationError("params must be an object");
  if (op == "synth") return op_synth(params);
  if (op == "targets") return op_targets(params);
  if (op == "estimate") return op_estimate(params);
  if (op == "debias") return op_debias(params);
  if (op == "bounds") return op_bounds(params);
  if (op == "leakage") return op_leakage(params);
  if (op == "simulate") return op_simulate(params);
  if (op == "probe") return op_probe(params);
  if (op == "check") return op_check(params);
  throw ValidationError("unknown subcommand '" + op + "'");
}

/// Exit-code family of an exception: 2 validation, 3 numeric, 4 I/O and
/// transport. Anything else (including internal errors) reports as numeric.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ValidationError*>(&e)) return exit_validation;
  if (dynamic_cast<const IoError*>(&e)) return exit_io;
  if (dynamic_cast<const json::exception*>(&e)) return exit_validation;
  if (dynamic_cast<const CLI::Error*>(&e)) return exit_validation;
  return exit_numeric;
}

inline std::string error_kind(const std::exception& e) {
  switch (exit_code_for(e)) {
    case exit_validation: return "validation";
    case exit_io: return "io";
    default: return "numeric";
  }
}

// ---------------------------------------------------------------------------
// Human-readable output

namespace detail {

inline std::string short_double(double x) {
  std::ostringstream o;
  o << std::setprecision(6) << x;
  return o.str();
}

inline std::string scalar_text(const json& v) {
  if (v.is_number_float()) return short_double(v.get<double>());
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

inline void flatten(const json& v, const std::string& key, std::vector<std::pair<std::string, std::string>>& rows) {
  if (v.is_object()) {
    for (const auto& [k, x] : v.items()) flatten(x, key.empty() ? k : key + "." + k, rows);
  } else if (v.is_array() && !v.empty() && std::all_of(v.begin(), v.end(), [](const json& x) { return x.is_primitive(); })) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ", ") + scalar_text(x);
    rows.emplace_back(key, s);
  } else if (v.is_array()) {
    rows.emplace_back(key, "[" + std::to_string(v.size()) + " entries]");
  } else {
    rows.emplace_back(key, scalar_text(v));
  }
}

}  // namespace detail

inline std::string render_human(const std::string& op, const json& result) {
  std::ostringstream out;
  if (result.contains("coefficients") && result.contains("names")) {
    out << result.value("method", std::string()) << " (" << result.value("side", std::string()) << ")\n";
    out << std::left << std::setw(12) << "coef" << std::setw(16) << "estimate" << std::setw(16) << "se"
        << "ci\n";
    for (std::size_t j = 0; j < result["names"].size(); ++j) {
      const auto& ci = result["ci"][j];
      out << std::setw(12) << result["names"][j].get<std::string>() << std::setw(16)
          << detail::scalar_text(result["coefficients"][j]) << std::setw(16) << detail::scalar_text(result["se"][j])
          << "[" << detail::scalar_text(ci[0]) << ", " << detail::scalar_text(ci[1]) << "]\n";
    }
    out << "variance: " << detail::scalar_text(result["variance_source"]) << ", n_primary "
        << result["n_primary"].get<std::size_t>() << ", n_validation " << result["n_validation"].get<std::size_t>()
        << "\n";
    return out.str();
  }
  if (op == "simulate" && result.contains("cells")) {
    out << std::left << std::setw(12) << "labeler" << std::setw(10) << "spec" << std::setw(8) << "frac"
        << std::setw(18) << "estimator" << std::setw(14) << "norm_bias" << std::setw(10) << "coverage" << "mse\n";
    for (const auto& c : result["cells"])
      out << std::setw(12) << c["labeler"].get<std::string>() << std::setw(10) << c["spec"].get<std::string>()
          << std::setw(8) << detail::scalar_text(c["frac"]) << std::setw(18) << c["estimator"].get<std::string>()
          << std::setw(14) << detail::scalar_text(c["normalized_bias"]) << std::setw(10)
          << detail::scalar_text(c["coverage"]) << detail::scalar_text(c["mse"]) << "\n";
    return out.str();
  }
  if (op == "check" && result.contains("checks")) {
    for (const auto& c : result["checks"])
      out << (c["passed"].get<bool>() ? "PASS  " : "FAIL  ") << std::left << std::setw(40)
          << c["name"].get<std::string>() << " residual " << detail::scalar_text(c["max_residual"]) << " (tol "
          << detail::scalar_text(c["tolerance"]) << ")\n";
    out << (result["passed"].get<bool>() ? "all checks passed\n" : "some checks failed\n");
    return out.str();
  }
  std::vector<std::pair<std::string, std::string>> rows;
  json shown = result;
  if (shown.contains("population")) shown["population"] = "[" + std::to_string(shown["population"].size()) + " pieces]";
  detail::flatten(shown, "", rows);
  std::size_t width = 0;
  for (const auto& [k, v] : rows) width = std::max(width, k.size());
  for (const auto& [k, v] : rows) out << std::left << std::setw(static_cast<int>(width + 2)) << k << v << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// jsonl protocol

/// Handles one envelope line; returns the response line (no newline).
inline std::string handle_envelope(const std::string& line) {
  json id = nullptr;
  try {
    const auto env = json::parse(line);
    if (!env.is_object()) throw ValidationError("envelope must be an object");
    if (env.contains("id")) id = env["id"];
    if (!env.contains("op") || !env["op"].is_string()) throw ValidationError("envelope lacks a string 'op'");
    const json params = env.value("params", json::object());
    const auto result = execute(env["op"].get<std::string>(), params);
    return json{{"id", id}, {"ok", true}, {"result", result}}.dump();
  } catch (const std::exception& e) {
    return json{{"id", id},
                {"ok", false},
                {"error", {{"kind", error_kind(e)}, {"exit_code", exit_code_for(e)}, {"message", e.what()}}}}
        .dump();
  }
}

inline int run_jsonl(std::istream& in, std::ostream& out) {
  std::string line;
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    out << handle_envelope(line) << '\n';
    out.flush();
  }
  return exit_ok;
}

// ---------------------------------------------------------------------------
// argv

namespace detail {

/// Adds `--flag` bound to params[key] when given. Values parse as JSON when
/// possible ("0.5" -> number, "[1,2]" -> array) and as strings otherwise.
struct FlagSet {
  std::vector<std::tuple<std::string, std::string, std::string>> raw;  // key, value, kind
};

inline json parse_list(const std::string& s) {
  json a = json::array();
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto t = io::trim(item);
    if (auto d = io::parse_double(t)) a.push_back(*d);
    else a.push_back(std::string(t));
  }
  return a;
}

inline json parse_interval_list(const std::string& s) {
  json a = json::array();
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ValidationError("interval '" + item + "' must be lo:hi");
    auto lo = io::parse_double(io::trim(item.substr(0, colon)));
    auto hi = io::parse_double(io::trim(item.substr(colon + 1)));
    if (!lo || !hi) throw ValidationError("interval '" + item + "' must be lo:hi");
    a.push_back({*lo, *hi});
  }
  return a;
}

}  // namespace detail

struct CliOutcome {
  int exit_code = 0;
  std::string out;
  std::string err;
};

/// Parses argv-style arguments (without the program name) and runs the
/// subcommand. `--jsonl` reads envelopes from `in`.
inline CliOutcome run(const std::vector<std::string>& args, std::istream& in) {
  CliOutcome result;
  CLI::App app{"Validation-aware estimation with machine labels", "safelabel"};
  app.require_subcommand(0, 1);
  bool jsonl = false;
  app.add_flag("--jsonl", jsonl, "Read {op, params, id} envelopes from stdin, one per line");

  // String-valued options collected per subcommand, converted afterwards.
  struct Spec {
    std::string flag, key, kind, help;  // kind: str, num, int, list, intervals, bool
  };
  const std::vector<Spec> common{{"--pop", "pop", "str", "Population file (CSV or JSON)"},
                                 {"--seed", "seed", "int", "Root seed"},
                                 {"--labeler", "labeler", "str", "Labeler name"}};
  const std::vector<Spec> estimation{{"--side", "side", "str", "lhs or rhs"},
                                     {"--validation-col", "validation_col", "str", "Arm indicator column"},
                                     {"--validation-frac", "validation_frac", "num", "Random validation share"},
                                     {"--variance", "variance", "str", "formula, bootstrap or hc1"},
                                     {"--bootstrap-reps", "bootstrap_reps", "int", "Bootstrap replications"},
                                     {"--ci-level", "ci_level", "num", "Confidence level"},
                                     {"--rhs-outcome", "rhs_outcome", "int", "Outcome column j for rhs"},
                                     {"--workers", "workers", "int", "Worker threads"}};
  const std::vector<Spec> moment{{"--family", "moment.family", "str", "product, residual or squared"},
                                 {"--column", "moment.column", "int", "Moment covariate column"},
                                 {"--theta-box", "moment.theta_box", "intervals", "lo:hi,lo:hi,..."},
                                 {"--v-domain", "moment.v_domain", "interval", "lo:hi"},
                                 {"--g-lower", "moment.g_lower", "num", "Sensitivity threshold"},
                                 {"--theta", "theta", "list", "Parameter value"},
                                 {"--context", "context", "str", "census, random(p), post_cutoff[(p)] or file.json"},
                                 {"--train-prob", "train_prob", "num", "Training inclusion probability"}};
  std::map<std::string, std::vector<Spec>> specs;
  specs["synth"] = {{"--n", "n", "int", "Number of pieces"},
                    {"--beta", "beta_star", "list", "Target coefficients"},
                    {"--gamma", "gamma", "list", "Planted error projection"},
                    {"--sd-v", "noise_sd_v", "num", "Noise sd of V"},
                    {"--sd-delta", "noise_sd_delta", "num", "Noise sd of the label error"},
                    {"--law", "covariate_law", "str", "standard_normal, bernoulli or fixed_grid"},
                    {"--bernoulli-p", "bernoulli_p", "num", "Bernoulli covariate probability"},
                    {"--seed", "seed", "int", "Seed"},
                    {"--labeler", "labeler", "str", "Labeler name"},
                    {"--out", "out", "str", "Output file (.csv or .json)"}};
  specs["targets"] = {common[0], common[2], {"--side", "side", "str", "lhs or rhs"},
                      {"--rhs-outcome", "rhs_outcome", "int", "Outcome column j for rhs"}};
  specs["estimate"] = common;
  specs["estimate"].push_back({"--method", "method", "str", "plug_in, validation_only, debiased or target"});
  specs["estimate"].insert(specs["estimate"].end(), estimation.begin(), estimation.end());
  specs["debias"] = common;
  specs["debias"].insert(specs["debias"].end(), estimation.begin(), estimation.end());
  specs["bounds"] = {common[0], common[1], {"--delta", "delta", "num", "Band half-width"}};
  specs["bounds"].insert(specs["bounds"].end(), moment.begin(), moment.end());
  specs["leakage"] = common;
  specs["leakage"].push_back({"--loss", "loss", "str", "squared, absolute or zero_one"});
  specs["leakage"].push_back({"--outcome", "outcome", "str", "y or v"});
  specs["leakage"].insert(specs["leakage"].end(), moment.begin(), moment.end());
  specs["simulate"] = {common[0], common[1],
                       {"--out", "out", "str", "Output directory for cells.csv and summary.json"},
                       {"--replications", "replications", "int", "Replications"},
                       {"--n-sample", "n_sample", "int", "Pieces drawn per replication"},
                       {"--fracs", "validation_fracs", "list", "Validation fractions"},
                       {"--side", "side", "str", "lhs or rhs"},
                       {"--workers", "workers", "int", "Worker threads"}};
  specs["probe"] = {common[0], common[1],
                    {"--endpoint", "endpoint", "str", "Base URL of an OpenAI-compatible API"},
                    {"--model", "model", "str", "Chat model"},
                    {"--embed-model", "embed_model", "str", "Embedding model"},
                    {"--split", "split", "num", "Split fraction"},
                    {"--concurrency", "concurrency", "int", "Concurrent requests"},
                    {"--cache", "cache", "str", "Cache directory"},
                    {"--template", "template", "str", "Prompt template with {prefix}"},
                    {"--max-attempts", "max_attempts", "int", "Attempts per request"},
                    {"--records", "records", "bool", "Include per-piece records"}};
  specs["check"] = {{"--self", "self", "bool", "Run the built-in identity suite"}, common[1]};

  const std::map<std::string, std::string> descriptions{
      {"synth", "Generate a synthetic population"},
      {"targets", "Full-population coefficients and bias decompositions"},
      {"estimate", "Plug-in, validation-only, debiased or target estimate"},
      {"debias", "Debiased estimate from a primary/validation sample"},
      {"bounds", "Sensitive set and adversarial band member for a moment"},
      {"leakage", "Training-leakage decomposition for a research context"},
      {"simulate", "Monte Carlo coverage and bias study"},
      {"probe", "Split-text completion probe against an LLM endpoint"},
      {"check", "Built-in identity checks"}};
  std::map<std::string, std::map<std::string, std::string>> values;  // op -> key -> raw
  std::map<std::string, CLI::App*> subs;
  std::map<std::string, std::string> config_path;
  std::map<std::string, bool> as_json;
  for (const auto& op : operations()) {
    auto* sub = app.add_subcommand(op, descriptions.at(op));
    subs[op] = sub;
    as_json[op] = false;
    sub->add_flag("--json", as_json[op], "Emit one JSON document");
    sub->add_option("--config", config_path[op], "Config file (TOML or JSON); flags take precedence");
    for (const auto& s : specs[op]) {
      if (s.kind == "bool") {
        sub->add_flag(s.flag, [&values, op, key = s.key](std::int64_t) { values[op][key] = "true"; }, s.help);
      } else {
        sub->add_option_function<std::string>(s.flag, [&values, op, key = s.key](const std::string& v) {
          values[op][key] = v;
        }, s.help);
      }
    }
  }

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp& e) {
    result.out = app.help();
    for (const auto& [op, sub] : subs)
      if (sub->parsed()) result.out = sub->help();
    result.exit_code = exit_ok;
    return result;
  } catch (const CLI::ParseError& e) {
    result.err = std::string(e.what()) + "\n" + app.help();
    result.exit_code = exit_validation;
    return result;
  }

  if (jsonl) {
    std::ostringstream out;
    result.exit_code = run_jsonl(in, out);
    result.out = out.str();
    return result;
  }
  std::string op;
  for (const auto& [name, sub] : subs)
    if (sub->parsed()) op = name;
  if (op.empty()) {
    result.err = "a subcommand is required\n" + app.help();
    result.exit_code = exit_validation;
    return result;
  }

  try {
    json params = json::object();
    if (!config_path[op].empty()) {
      auto cfg = load_config_file(config_path[op]);
      if (cfg.contains(op) && cfg[op].is_object()) cfg = cfg[op];
      for (const auto& [k, v] : cfg.items()) params[k] = v;
    }
    const auto& op_specs = specs[op];
    for (const auto& [key, raw] : values[op]) {
      const auto spec = std::find_if(op_specs.begin(), op_specs.end(), [&](const Spec& s) { return s.key == key; });
      json v;
      if (spec->kind == "str") v = raw;
      else if (spec->kind == "bool") v = true;
      else if (spec->kind == "list") v = detail::parse_list(raw);
      else if (spec->kind == "intervals") v = detail::parse_interval_list(raw);
      else if (spec->kind == "interval") v = detail::parse_interval_list(raw).at(0);
      else if (spec->kind == "int") {
        try {
          std::size_t pos = 0;
          const auto x = std::stoull(raw, &pos);
          if (pos != raw.size()) throw std::invalid_argument(raw);
          v = x;
        } catch (const std::exception&) {
          throw ValidationError(spec->flag + " expects a nonnegative integer, got '" + raw + "'");
        }
      } else {
        auto d = io::parse_double(raw);
        if (!d) throw ValidationError(spec->flag + " expects a number, got '" + raw + "'");
        v = *d;
      }
      const auto dot = key.find('.');
      if (dot == std::string::npos) params[key] = v;
      else params[key.substr(0, dot)][key.substr(dot + 1)] = v;
    }
    const json res = execute(op, params);
    result.out = as_json[op] ? res.dump(2) + "\n" : render_human(op, res);
    if (op == "check" && !res.value("passed", false)) result.exit_code = exit_numeric;
  } catch (const std::exception& e) {
    result.err = "error: " + std::string(e.what()) + "\n";
    result.exit_code = exit_code_for(e);
  }
  return result;
}

}  // namespace safelabel::cli

#endif
