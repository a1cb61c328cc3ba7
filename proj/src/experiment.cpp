#include "volcal/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "volcal/fem_pricer.hpp"
#include "volcal/kl_prior.hpp"

namespace volcal {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kChainMagic = "volcal-chain-v1";
constexpr const char* kManifestSchema = "volcal-manifest-v1";

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open output file: " + path.string());
  return out;
}

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", x);
  return buf;
}

std::string fmt_exact(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

double json_double(const json& j) {
  // Non-finite doubles serialize as null; only -inf ever reaches a file.
  if (j.is_null()) return -std::numeric_limits<double>::infinity();
  return j.get<double>();
}

std::vector<double> linspace(double lo, double hi, int n) {
  std::vector<double> xs(n);
  for (int i = 0; i < n; ++i) xs[i] = lo + (hi - lo) * i / (n - 1);
  return xs;
}

// Interpolated quantile of an already sorted vector, p in [0, 1].
double sorted_quantile(const std::vector<double>& sorted, double p) {
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

// ---------------------------------------------------------------------------
// Config parsing

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

MeshConfig parse_mesh_level(const json& j, MeshConfig base) {
  base.strike_nodes = get_or(j, "strike_nodes", base.strike_nodes);
  base.time_levels = get_or(j, "time_levels", base.time_levels);
  return base;
}

RunConfig config_from_json(const json& root) {
  RunConfig cfg;
  if (!root.contains("market")) throw ConfigError("config is missing the 'market' section");
  const json& m = root.at("market");
  cfg.market.spot = get_or(m, "spot", 0.0);
  cfg.market.rate = get_or(m, "rate", 0.0);
  cfg.market.dividend = get_or(m, "dividend", 0.0);
  cfg.market.t_max = get_or(m, "t_max", 0.0);
  cfg.market.k_min = get_or(m, "k_min", 0.0);
  cfg.market.k_max = get_or(m, "k_max", 0.0);

  if (!root.contains("quotes")) throw ConfigError("config is missing the 'quotes' file path");
  cfg.quotes_path = root.at("quotes").get<std::string>();

  if (root.contains("split")) {
    const json& s = root.at("split");
    const std::string rule = get_or<std::string>(s, "rule", "maturity_cutoff");
    if (rule == "maturity_cutoff")
      cfg.split.kind = SplitRule::Kind::maturity_cutoff;
    else if (rule == "labels")
      cfg.split.kind = SplitRule::Kind::labels;
    else
      throw ConfigError("split.rule must be 'maturity_cutoff' or 'labels', got '" + rule + "'");
    cfg.split.cutoff = get_or(s, "cutoff", 0.0);
  } else {
    cfg.split.kind = SplitRule::Kind::labels;
  }

  if (root.contains("kl")) {
    const json& k = root.at("kl");
    cfg.sigma_mu = get_or(k, "sigma_mu", cfg.sigma_mu);
    cfg.energy_threshold = get_or(k, "threshold", cfg.energy_threshold);
    cfg.max_per_dim = get_or(k, "max_per_dim", cfg.max_per_dim);
    cfg.n_kl = get_or(k, "n_kl", 0);
    if (k.contains("mu_y") && !k.at("mu_y").is_string()) {
      cfg.mu_y = k.at("mu_y").get<double>();
      cfg.mu_y_auto = false;
    }
  }

  if (root.contains("hyper")) {
    const json& h = root.at("hyper");
    cfg.hyper.a_eps = get_or(h, "a_eps", cfg.hyper.a_eps);
    if (h.contains("b_eps") && !h.at("b_eps").is_string()) {
      cfg.hyper.b_eps = h.at("b_eps").get<double>();
      cfg.b_eps_auto = false;
    }
    cfg.noise_prior_frac = get_or(h, "noise_prior_frac", cfg.noise_prior_frac);
    cfg.hyper.a_s = get_or(h, "a_s", cfg.hyper.a_s);
    cfg.hyper.b_s = get_or(h, "b_s", cfg.hyper.b_s);
    cfg.hyper.l_lo = get_or(h, "l_lo", cfg.hyper.l_lo);
    cfg.hyper.l_hi = get_or(h, "l_hi", cfg.hyper.l_hi);
  }

  if (root.contains("mesh")) {
    const json& g = root.at("mesh");
    MeshConfig shared = mesh_config(MeshLevel::fine);
    shared.stretch = get_or(g, "stretch", shared.stretch);
    shared.band_lo = get_or(g, "band_lo", shared.band_lo);
    shared.band_hi = get_or(g, "band_hi", shared.band_hi);
    shared.shoulder_frac = get_or(g, "shoulder_frac", shared.shoulder_frac);
    shared.time_grading = get_or(g, "time_grading", shared.time_grading);
    cfg.band_from_quotes = get_or(g, "band_from_quotes", cfg.band_from_quotes);

    MeshConfig coarse = shared, fine = shared;
    coarse.strike_nodes = 11;
    coarse.time_levels = 11;
    cfg.coarse_mesh = g.contains("coarse") ? parse_mesh_level(g.at("coarse"), coarse) : coarse;
    cfg.fine_mesh = g.contains("fine") ? parse_mesh_level(g.at("fine"), fine) : fine;
  }
  if (cfg.coarse_mesh.strike_nodes >= cfg.fine_mesh.strike_nodes ||
      cfg.coarse_mesh.time_levels > cfg.fine_mesh.time_levels)
    throw ConfigError("coarse mesh must be strictly smaller than the fine mesh");

  if (root.contains("sampler")) {
    const json& s = root.at("sampler");
    cfg.total_iters = get_or<long>(s, "total_iters", cfg.total_iters);
    cfg.burn_in = get_or<long>(s, "burn_in", cfg.burn_in);
    cfg.thin = get_or(s, "thin", cfg.thin);
    cfg.adapt_start = get_or<long>(s, "adapt_start", cfg.adapt_start);
    cfg.scale = get_or(s, "scale", cfg.scale);
    cfg.eps_reg = get_or(s, "eps_reg", cfg.eps_reg);
    cfg.init_sigma_y = get_or(s, "init_sigma_y", cfg.init_sigma_y);
    cfg.chains = get_or(s, "chains", cfg.chains);
    if (s.contains("c0")) {
      const json& c = s.at("c0");
      cfg.c0_theta = get_or(c, "theta", cfg.c0_theta);
      cfg.c0_lengthscale = get_or(c, "lengthscale", cfg.c0_lengthscale);
      cfg.c0_sigma = get_or(c, "sigma_y", cfg.c0_sigma);
    }
  }

  if (root.contains("reporting")) cfg.report_grid = get_or(root.at("reporting"), "grid", cfg.report_grid);
  cfg.seed = get_or<std::uint64_t>(root, "seed", cfg.seed);
  cfg.output_dir = get_or<std::string>(root, "output_dir", cfg.output_dir);

  if (cfg.report_grid < 2) throw ConfigError("reporting.grid must be >= 2");
  if (cfg.chains < 1) throw ConfigError("sampler.chains must be >= 1");
  cfg.market.validate();

  cfg.echo_json = root.dump(2);
  return cfg;
}

json config_to_json(const RunConfig& cfg) {
  json root;
  root["market"] = {{"spot", cfg.market.spot},   {"rate", cfg.market.rate},
                    {"dividend", cfg.market.dividend}, {"t_max", cfg.market.t_max},
                    {"k_min", cfg.market.k_min}, {"k_max", cfg.market.k_max}};
  root["quotes"] = cfg.quotes_path;
  root["split"] = {{"rule", cfg.split.kind == SplitRule::Kind::maturity_cutoff ? "maturity_cutoff"
                                                                               : "labels"},
                   {"cutoff", cfg.split.cutoff}};
  json kl = {{"sigma_mu", cfg.sigma_mu},
             {"threshold", cfg.energy_threshold},
             {"max_per_dim", cfg.max_per_dim}};
  if (cfg.n_kl > 0) kl["n_kl"] = cfg.n_kl;
  if (cfg.mu_y_auto)
    kl["mu_y"] = "auto";
  else
    kl["mu_y"] = cfg.mu_y;
  root["kl"] = kl;

  json hyper = {{"a_eps", cfg.hyper.a_eps},
                {"a_s", cfg.hyper.a_s},
                {"b_s", cfg.hyper.b_s},
                {"l_lo", cfg.hyper.l_lo},
                {"l_hi", cfg.hyper.l_hi},
                {"noise_prior_frac", cfg.noise_prior_frac}};
  if (cfg.b_eps_auto)
    hyper["b_eps"] = "auto";
  else
    hyper["b_eps"] = cfg.hyper.b_eps;
  root["hyper"] = hyper;

  root["mesh"] = {
      {"coarse",
       {{"strike_nodes", cfg.coarse_mesh.strike_nodes}, {"time_levels", cfg.coarse_mesh.time_levels}}},
      {"fine",
       {{"strike_nodes", cfg.fine_mesh.strike_nodes}, {"time_levels", cfg.fine_mesh.time_levels}}},
      {"stretch", cfg.fine_mesh.stretch},
      {"band_lo", cfg.fine_mesh.band_lo},
      {"band_hi", cfg.fine_mesh.band_hi},
      {"shoulder_frac", cfg.fine_mesh.shoulder_frac},
      {"time_grading", cfg.fine_mesh.time_grading},
      {"band_from_quotes", cfg.band_from_quotes}};

  root["sampler"] = {{"total_iters", cfg.total_iters},
                     {"burn_in", cfg.burn_in},
                     {"thin", cfg.thin},
                     {"adapt_start", cfg.adapt_start},
                     {"scale", cfg.scale},
                     {"eps_reg", cfg.eps_reg},
                     {"init_sigma_y", cfg.init_sigma_y},
                     {"chains", cfg.chains},
                     {"c0",
                      {{"theta", cfg.c0_theta},
                       {"lengthscale", cfg.c0_lengthscale},
                       {"sigma_y", cfg.c0_sigma}}}};
  root["reporting"] = {{"grid", cfg.report_grid}};
  root["seed"] = cfg.seed;
  root["output_dir"] = cfg.output_dir;
  return root;
}

// ---------------------------------------------------------------------------
// Calibration plumbing shared by run/summarize/resume

struct ResolvedRun {
  RunConfig cfg;
  std::vector<OptionQuote> train;
  std::vector<OptionQuote> validate;
  std::vector<OptionQuote> all_quotes;  // train then validate
  PriorConfig prior;
  PosteriorHyper hyper;
  MeshConfig coarse_mesh;
  MeshConfig fine_mesh;
  ParameterState initial;
  double mean_train_mid = 0.0;
  std::vector<std::string> load_warnings;
};

ResolvedRun resolve_run(const RunConfig& config) {
  ResolvedRun run;
  run.cfg = config;

  QuoteSchema schema;
  schema.spot = config.market.spot;
  schema.rate = config.market.rate;
  schema.dividend = config.market.dividend;
  QuoteLoadResult loaded = load_quotes(config.quotes_path, schema);
  run.load_warnings = loaded.warnings;
  if (config.split.kind == SplitRule::Kind::labels && !loaded.has_roles)
    throw ConfigError("split.rule 'labels' needs a 'role' column in the quote file");

  auto [train, validate] = split_train_validate(loaded.quotes, config.split);
  run.train = std::move(train);
  run.validate = std::move(validate);
  run.all_quotes = run.train;
  run.all_quotes.insert(run.all_quotes.end(), run.validate.begin(), run.validate.end());

  double k_lo = run.all_quotes.front().strike, k_hi = k_lo, t_hi = 0.0;
  for (const OptionQuote& q : run.all_quotes) {
    k_lo = std::min(k_lo, q.strike);
    k_hi = std::max(k_hi, q.strike);
    t_hi = std::max(t_hi, q.maturity);
  }
  if (t_hi > config.market.t_max + 1e-10)
    throw ConfigError("quotes extend beyond market.t_max");
  if (k_lo < config.market.k_min || k_hi > config.market.k_max)
    throw ConfigError("quotes extend beyond the [k_min, k_max] solver domain");

  run.coarse_mesh = config.coarse_mesh;
  run.fine_mesh = config.fine_mesh;
  if (config.band_from_quotes) {
    run.coarse_mesh.band_lo = run.fine_mesh.band_lo = k_lo;
    run.coarse_mesh.band_hi = run.fine_mesh.band_hi = k_hi;
  }

  run.hyper = config.hyper;
  for (const OptionQuote& q : run.train) run.mean_train_mid += q.mid;
  run.mean_train_mid /= static_cast<double>(run.train.size());
  if (config.b_eps_auto) {
    // Scale the noise prior so its mean matches noise_prior_frac of the
    // typical training price: E[sigma_eps^2] = b / (a - 1).
    const double sd = config.noise_prior_frac * run.mean_train_mid;
    run.hyper.b_eps = (config.hyper.a_eps - 1.0) * sd * sd;
  }

  run.prior.measure_t = {0.0, config.sigma_mu};
  run.prior.measure_k = {0.0, config.sigma_mu};
  run.prior.max_per_dim = config.max_per_dim;
  run.prior.mean_log_vol = config.mu_y;
  if (config.mu_y_auto) {
    // Anchor the prior mean at the implied vol of the training quote closest
    // to the spot (earliest maturity breaks ties), a cheap data-driven level.
    const OptionQuote* best = nullptr;
    for (const OptionQuote& q : run.train) {
      if (!best || std::abs(q.strike - config.market.spot) <
                       std::abs(best->strike - config.market.spot) - 1e-12 ||
          (std::abs(q.strike - best->strike) <= 1e-12 && q.maturity < best->maturity))
        best = &q;
    }
    const double iv = bs_implied_vol(best->mid, config.market.spot, best->strike, best->maturity,
                                     config.market.rate, config.market.dividend);
    run.prior.mean_log_vol = iv > 0.0 ? std::log(iv) : std::log(0.2);
  }

  if (config.n_kl > 0) {
    run.prior.n_kl = config.n_kl;
  } else {
    const double mid_l = 0.5 * (run.hyper.l_lo + run.hyper.l_hi);
    KlBasis probe = build_tensor_basis(mid_l, mid_l, run.prior.measure_t, run.prior.measure_k,
                                       config.max_per_dim, 0.0, 1.0);
    run.prior.n_kl = select_truncation(probe, config.energy_threshold);
  }

  run.initial.theta.assign(run.prior.n_kl, 0.0);
  run.initial.l_t = run.initial.l_k = 0.5 * (run.hyper.l_lo + run.hyper.l_hi);
  run.initial.sigma_y = config.init_sigma_y;
  return run;
}

std::unique_ptr<PosteriorEvaluator> make_evaluator(const ResolvedRun& run) {
  std::vector<double> extra;
  for (const OptionQuote& q : run.validate) extra.push_back(q.maturity);
  return std::make_unique<PosteriorEvaluator>(run.train, run.cfg.market, run.prior, run.hyper,
                                              run.coarse_mesh, run.fine_mesh, extra);
}

TsamConfig make_sampler_config(const ResolvedRun& run, std::uint64_t seed) {
  TsamConfig cfg;
  cfg.dim = run.prior.n_kl + 3;
  cfg.total_iters = run.cfg.total_iters;
  cfg.burn_in = run.cfg.burn_in;
  cfg.thin = run.cfg.thin;
  cfg.adapt_start = run.cfg.adapt_start;
  cfg.scale = run.cfg.scale;
  cfg.eps_reg = run.cfg.eps_reg;
  cfg.c0_diag.assign(run.prior.n_kl, run.cfg.c0_theta);
  cfg.c0_diag.push_back(run.cfg.c0_lengthscale);
  cfg.c0_diag.push_back(run.cfg.c0_lengthscale);
  cfg.c0_diag.push_back(run.cfg.c0_sigma);
  cfg.seed = seed;
  return cfg;
}

json counters_to_json(const ChainCounters& c) {
  return {{"proposals", c.proposals},
          {"stage1_passes", c.stage1_passes},
          {"stage2_accepts", c.stage2_accepts},
          {"coarse_evals", c.coarse_evals},
          {"fine_evals", c.fine_evals}};
}

ChainCounters counters_from_json(const json& j) {
  ChainCounters c;
  c.proposals = j.at("proposals").get<long>();
  c.stage1_passes = j.at("stage1_passes").get<long>();
  c.stage2_accepts = j.at("stage2_accepts").get<long>();
  c.coarse_evals = j.at("coarse_evals").get<long>();
  c.fine_evals = j.at("fine_evals").get<long>();
  return c;
}

struct SummaryPaths {
  std::string vol_summary;
  std::string price_summary;
};

// Evaluates every stored sample on the reporting grid and at the quote
// points, then writes the pointwise posterior summaries.
SummaryPaths write_summaries(PosteriorEvaluator& eval, const ResolvedRun& run,
                             const std::vector<std::vector<double>>& samples,
                             const fs::path& out_dir) {
  if (samples.empty()) throw EmptyChainError("no stored samples to summarize");

  const int grid_n = run.cfg.report_grid;
  const std::vector<double> mats = linspace(0.0, run.cfg.market.t_max, grid_n);
  const std::vector<double> strikes = linspace(run.cfg.market.k_min, run.cfg.market.k_max, grid_n);
  const std::size_t n_points = mats.size() * strikes.size();
  const std::size_t n_samples = samples.size();
  const std::size_t n_quotes = run.all_quotes.size();

  std::vector<double> vol_draws(n_points * n_samples);
  std::vector<double> price_draws(n_quotes * n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const ParameterState state = ParameterState::from_vector(samples[s]);
    const std::vector<double> vols = eval.vol_surface(state, mats, strikes);
    for (std::size_t p = 0; p < n_points; ++p) vol_draws[p * n_samples + s] = vols[p];
    const std::vector<double> prices = eval.model_prices(state, Fidelity::fine, run.all_quotes);
    for (std::size_t q = 0; q < n_quotes; ++q) price_draws[q * n_samples + s] = prices[q];
  }

  SummaryPaths paths;
  paths.vol_summary = (out_dir / "vol_summary.csv").string();
  {
    std::ofstream out = open_out(paths.vol_summary);
    out << "maturity,strike,mean,median,q025,q975\n";
    std::vector<double> buf(n_samples);
    for (std::size_t i = 0; i < mats.size(); ++i) {
      for (std::size_t j = 0; j < strikes.size(); ++j) {
        const std::size_t p = i * strikes.size() + j;
        std::copy_n(vol_draws.begin() + p * n_samples, n_samples, buf.begin());
        double mean = 0.0;
        for (double v : buf) mean += v;
        mean /= static_cast<double>(n_samples);
        std::sort(buf.begin(), buf.end());
        out << fmt(mats[i]) << ',' << fmt(strikes[j]) << ',' << fmt(mean) << ','
            << fmt(sorted_quantile(buf, 0.5)) << ',' << fmt(sorted_quantile(buf, 0.025)) << ','
            << fmt(sorted_quantile(buf, 0.975)) << '\n';
      }
    }
  }

  paths.price_summary = (out_dir / "price_summary.csv").string();
  {
    std::ofstream out = open_out(paths.price_summary);
    out << "maturity,strike,observed,predictive_mean,q025,q975,role\n";
    std::vector<double> buf(n_samples);
    for (std::size_t q = 0; q < n_quotes; ++q) {
      std::copy_n(price_draws.begin() + q * n_samples, n_samples, buf.begin());
      double mean = 0.0;
      for (double v : buf) mean += v;
      mean /= static_cast<double>(n_samples);
      std::sort(buf.begin(), buf.end());
      const OptionQuote& quote = run.all_quotes[q];
      out << fmt(quote.maturity) << ',' << fmt(quote.strike) << ',' << fmt(quote.mid) << ','
          << fmt(mean) << ',' << fmt(sorted_quantile(buf, 0.025)) << ','
          << fmt(sorted_quantile(buf, 0.975)) << ','
          << (quote.role == QuoteRole::train ? "train" : "validate") << '\n';
    }
  }
  return paths;
}

void dump_posterior_mean_solution(PosteriorEvaluator& eval, const ResolvedRun& run,
                                  const std::vector<std::vector<double>>& samples,
                                  const fs::path& out_dir) {
  const std::size_t dim = samples.front().size();
  std::vector<double> mean(dim, 0.0);
  for (const std::vector<double>& s : samples)
    for (std::size_t i = 0; i < dim; ++i) mean[i] += s[i];
  for (double& v : mean) v /= static_cast<double>(samples.size());
  const ParameterState state = ParameterState::from_vector(mean);

  std::vector<double> extra;
  for (const OptionQuote& q : run.all_quotes) extra.push_back(q.maturity);
  auto [mesh, grid] = build_mesh(run.cfg.market, run.fine_mesh, extra);
  std::vector<double> mats = grid.times;
  std::vector<double> vols = eval.vol_surface(state, mats, mesh.nodes);

  PdeCoefficients coeffs;
  coeffs.rate = run.cfg.market.rate;
  coeffs.dividend = run.cfg.market.dividend;
  coeffs.spot = run.cfg.market.spot;
  const int nn = mesh.n_nodes();
  coeffs.sigma = [&vols, nn](int level, int node) {
    return vols[static_cast<std::size_t>(level) * nn + node];
  };
  const std::vector<double> field = price_surface(mesh, grid, coeffs);
  std::ofstream out = open_out(out_dir / "solution_fine.csv");
  dump_solution(out, field, mesh, grid);
}

json chain_to_json(const ChainOutput& chain) {
  json j = counters_to_json(chain.counters);
  j["checkpoint"] = chain.checkpoint_path;
  j["n_samples"] = chain.n_samples;
  j["stage1_pass_rate"] = chain.diagnostics.stage1_pass_rate;
  j["stage2_accept_rate"] = chain.diagnostics.stage2_accept_rate;
  j["overall_accept_rate"] = chain.diagnostics.overall_accept_rate;
  j["ess"] = chain.diagnostics.ess;
  return j;
}

CalibrationResult finish_outputs(PosteriorEvaluator& eval, const ResolvedRun& run,
                                 const std::vector<std::vector<double>>& pooled,
                                 std::vector<ChainOutput> chains, const fs::path& out_dir,
                                 const std::string& command, bool dump) {
  CalibrationResult result;
  result.chains = std::move(chains);
  result.n_kl = run.prior.n_kl;
  result.mu_y = run.prior.mean_log_vol;
  result.b_eps = run.hyper.b_eps;

  SummaryPaths paths = write_summaries(eval, run, pooled, out_dir);
  result.vol_summary_path = paths.vol_summary;
  result.price_summary_path = paths.price_summary;
  if (dump) dump_posterior_mean_solution(eval, run, pooled, out_dir);

  json manifest;
  manifest["schema"] = kManifestSchema;
  manifest["command"] = command;
  manifest["config"] = json::parse(run.cfg.echo_json);
  manifest["resolved"] = {{"n_kl", run.prior.n_kl},
                          {"mu_y", run.prior.mean_log_vol},
                          {"b_eps", run.hyper.b_eps},
                          {"band_lo", run.fine_mesh.band_lo},
                          {"band_hi", run.fine_mesh.band_hi},
                          {"dim", run.prior.n_kl + 3},
                          {"seed", run.cfg.seed},
                          {"chains", static_cast<int>(result.chains.size())}};
  manifest["data"] = {{"n_train", run.train.size()},
                      {"n_validate", run.validate.size()},
                      {"mean_train_mid", run.mean_train_mid},
                      {"warnings", run.load_warnings}};
  json chain_list = json::array();
  for (const ChainOutput& c : result.chains) chain_list.push_back(chain_to_json(c));
  manifest["chains"] = chain_list;
  manifest["outputs"] = {{"vol_summary", result.vol_summary_path},
                         {"price_summary", result.price_summary_path}};

  result.manifest_path = (out_dir / "manifest.json").string();
  open_out(result.manifest_path) << manifest.dump(2) << '\n';

  json diag;
  diag["chains"] = chain_list;
  diag["summary_repricing"] = {{"coarse_solves", eval.coarse_solves()},
                               {"fine_solves", eval.fine_solves()},
                               {"blowups", eval.blowups()}};
  result.diagnostics_path = (out_dir / "diagnostics.json").string();
  open_out(result.diagnostics_path) << diag.dump(2) << '\n';
  return result;
}

RunConfig apply_overrides(const RunConfig& config, const RunOverrides& overrides) {
  RunConfig cfg = config;
  if (overrides.seed) cfg.seed = *overrides.seed;
  if (overrides.chains) cfg.chains = *overrides.chains;
  if (overrides.output_dir) cfg.output_dir = *overrides.output_dir;
  // The manifest echo is a canonical re-serialization of the effective
  // settings, so callers may mutate fields after loading and the echo (and
  // any re-run from it) still matches what actually ran.
  cfg.echo_json = config_to_json(cfg).dump(2);
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config loading

RunConfig parse_run_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    // A manifest can be fed back in as a config; its embedded echo wins.
    if (root.contains("schema") && root.at("schema") == kManifestSchema)
      return config_from_json(root.at("config"));
    return config_from_json(root);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field has the wrong type: ") + e.what());
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

// ---------------------------------------------------------------------------
// Synthetic cases

double synthetic_truth_vol(int case_id, double maturity, double strike) {
  switch (case_id) {
    case 1:
      return 15.0 / strike;
    case 2:
      return 0.3 * std::exp(-maturity) * std::pow(100.0 / strike, 0.2);
    default:
      throw UnknownCaseError("closed-form truth exists only for cases 1 and 2");
  }
}

SyntheticPaths generate_synthetic(int case_id, double noise_frac, std::uint64_t seed,
                                  const std::string& out_dir) {
  if (case_id < 1 || case_id > 3) {
    std::ostringstream msg;
    msg << "synthetic case must be 1, 2 or 3, got " << case_id;
    throw UnknownCaseError(msg.str());
  }
  if (noise_frac < 0.0) throw ConfigError("noise fraction must be nonnegative");
  fs::create_directories(out_dir);

  MarketParams market;
  market.spot = 100.0;
  market.rate = 0.05;
  market.dividend = 0.02;

  std::vector<double> maturities, strikes;
  double cutoff = 0.0;
  if (case_id == 1) {
    maturities = {0.5, 1.0, 1.5};
    strikes = linspace(60.0, 140.0, 15);
    cutoff = 1.25;  // holds out the longest maturity
  } else {
    maturities = linspace(0.25, 2.0, 8);
    strikes = linspace(65.0, 135.0, 15);
    cutoff = 0.5 * (maturities[5] + maturities[6]);  // first six maturities train
  }
  market.t_max = maturities.back();
  market.k_min = 0.4 * market.spot;
  market.k_max = 2.15 * market.spot;

  DomainMap map{market.t_max, market.k_min, market.k_max};

  // Case 3 draws its truth from the same prior family the calibration uses:
  // a 90%-energy truncation at (l_t, l_k) = (0.5, 0.7) around a 20% vol level.
  KlBasis truth_basis;
  std::vector<double> truth_theta;
  if (case_id == 3) {
    truth_basis = build_tensor_basis(0.5, 0.7, {0.0, 0.68}, {0.0, 0.68}, 24, std::log(0.2), 1.0);
    truth_basis.n_kl = select_truncation(truth_basis, 0.90);
    std::mt19937_64 engine(seed + 1000);
    std::normal_distribution<double> normal;
    truth_theta.resize(truth_basis.n_kl);
    for (double& t : truth_theta) t = normal(engine);
  }
  auto truth_vol_grid = [&](std::span<const double> ts, std::span<const double> ks) {
    std::vector<double> out(ts.size() * ks.size());
    if (case_id == 3) {
      std::vector<double> us(ts.size()), vs(ks.size());
      for (std::size_t i = 0; i < ts.size(); ++i) us[i] = map.u_of_t(ts[i]);
      for (std::size_t j = 0; j < ks.size(); ++j) vs[j] = map.v_of_k(ks[j]);
      out = eval_vol_grid(truth_basis, truth_theta, us, vs);
    } else {
      for (std::size_t i = 0; i < ts.size(); ++i)
        for (std::size_t j = 0; j < ks.size(); ++j)
          out[i * ks.size() + j] = synthetic_truth_vol(case_id, ts[i], ks[j]);
    }
    return out;
  };

  // Reference prices from a deliberately fine solve so the discretization
  // error of the quotes is far below the calibration meshes'.
  MeshConfig ref_cfg = mesh_config(MeshLevel::fine);
  ref_cfg.strike_nodes = 201;
  ref_cfg.time_levels = 201;
  auto [mesh, grid] = build_mesh(market, ref_cfg, maturities);
  std::vector<double> vols = truth_vol_grid(grid.times, mesh.nodes);
  PdeCoefficients coeffs;
  coeffs.rate = market.rate;
  coeffs.dividend = market.dividend;
  coeffs.spot = market.spot;
  const int nn = mesh.n_nodes();
  coeffs.sigma = [&vols, nn](int level, int node) {
    return vols[static_cast<std::size_t>(level) * nn + node];
  };
  const std::vector<double> field = price_surface(mesh, grid, coeffs);

  struct Row {
    double t, k, ref;
  };
  std::vector<Row> rows;
  for (double t : maturities)
    for (double k : strikes) {
      const double ref = extract_price(field, mesh, grid, t, k);
      if (ref < 0.05) continue;  // quotes this deep out of the money carry no signal
      rows.push_back({t, k, ref});
    }

  double mean_ref = 0.0;
  for (const Row& r : rows) mean_ref += r.ref;
  mean_ref /= static_cast<double>(rows.size());
  const double noise_sd = noise_frac * mean_ref;

  std::mt19937_64 engine(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  SyntheticPaths paths;
  paths.quotes = (fs::path(out_dir) / "quotes.csv").string();
  {
    std::ofstream out = open_out(paths.quotes);
    out << "maturity,strike,mid,role\n";
    for (const Row& r : rows) {
      const double mid = std::max(r.ref + noise_sd * normal(engine), 0.0);
      out << fmt(r.t) << ',' << fmt(r.k) << ',' << fmt_exact(mid) << ','
          << (r.t <= cutoff ? "train" : "validate") << '\n';
    }
  }

  paths.truth = (fs::path(out_dir) / "truth.csv").string();
  {
    const std::vector<double> ts = linspace(0.0, market.t_max, 41);
    const std::vector<double> ks = linspace(market.k_min, market.k_max, 41);
    const std::vector<double> tv = truth_vol_grid(ts, ks);
    std::ofstream out = open_out(paths.truth);
    out << "maturity,strike,sigma\n";
    for (std::size_t i = 0; i < ts.size(); ++i)
      for (std::size_t j = 0; j < ks.size(); ++j)
        out << fmt(ts[i]) << ',' << fmt(ks[j]) << ',' << fmt_exact(tv[i * ks.size() + j]) << '\n';
  }

  paths.config = (fs::path(out_dir) / "config.json").string();
  {
    RunConfig cfg;
    cfg.market = market;
    cfg.quotes_path = paths.quotes;
    cfg.split.kind = SplitRule::Kind::maturity_cutoff;
    cfg.split.cutoff = cutoff;
    if (case_id == 1) {
      cfg.n_kl = 14;
      cfg.total_iters = 100000;
      cfg.burn_in = 10000;
    } else {
      cfg.total_iters = 300000;
      cfg.burn_in = 50000;
    }
    cfg.thin = 10;
    cfg.seed = seed;
    cfg.output_dir = (fs::path(out_dir) / "run").string();
    open_out(paths.config) << config_to_json(cfg).dump(2) << '\n';
  }
  return paths;
}

// ---------------------------------------------------------------------------
// Chain files

void write_chain_file(const std::string& path, const ChainFile& chain) {
  std::ofstream out = open_out(path);
  json header;
  header["seed"] = chain.seed;
  header["chain_index"] = chain.chain_index;
  header["total_iters"] = chain.total_iters;
  header["burn_in"] = chain.burn_in;
  header["thin"] = chain.thin;
  header["n_samples"] = chain.samples.size();
  header["dim"] = chain.checkpoint.state.size();
  const SamplerCheckpoint& cp = chain.checkpoint;
  header["checkpoint"] = {{"iters_done", cp.iters_done},
                          {"state", cp.state},
                          {"log_coarse", cp.log_coarse},
                          {"log_fine", cp.log_fine},
                          {"log_fine_valid", cp.log_fine_valid},
                          {"counters", counters_to_json(cp.counters)},
                          {"moments_n", cp.moments_n},
                          {"moments_mean", cp.moments_mean},
                          {"moments_m2", cp.moments_m2},
                          {"rng_proposal", cp.rng_proposal},
                          {"rng_accept", cp.rng_accept}};
  out << kChainMagic << '\n' << header.dump() << '\n';
  for (const std::vector<double>& s : chain.samples) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) out << ',';
      out << fmt_exact(s[i]);
    }
    out << '\n';
  }
}

ChainFile read_chain_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open chain file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kChainMagic)
    throw CheckpointError("not a chain file (bad magic line): " + path);
  if (!std::getline(in, line)) throw CheckpointError("chain file has no header: " + path);

  ChainFile chain;
  try {
    json header = json::parse(line);
    chain.seed = header.at("seed").get<std::uint64_t>();
    chain.chain_index = header.at("chain_index").get<int>();
    chain.total_iters = header.at("total_iters").get<long>();
    chain.burn_in = header.at("burn_in").get<long>();
    chain.thin = header.at("thin").get<int>();
    const json& cp = header.at("checkpoint");
    chain.checkpoint.iters_done = cp.at("iters_done").get<long>();
    chain.checkpoint.state = cp.at("state").get<std::vector<double>>();
    chain.checkpoint.log_coarse = json_double(cp.at("log_coarse"));
    chain.checkpoint.log_fine = json_double(cp.at("log_fine"));
    chain.checkpoint.log_fine_valid = cp.at("log_fine_valid").get<bool>();
    chain.checkpoint.counters = counters_from_json(cp.at("counters"));
    chain.checkpoint.moments_n = cp.at("moments_n").get<long>();
    chain.checkpoint.moments_mean = cp.at("moments_mean").get<std::vector<double>>();
    chain.checkpoint.moments_m2 = cp.at("moments_m2").get<std::vector<double>>();
    chain.checkpoint.rng_proposal = cp.at("rng_proposal").get<std::string>();
    chain.checkpoint.rng_accept = cp.at("rng_accept").get<std::string>();
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed chain header: ") + e.what());
  }

  const std::size_t dim = chain.checkpoint.state.size();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> sample;
    sample.reserve(dim);
    std::istringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) sample.push_back(std::strtod(field.c_str(), nullptr));
    if (sample.size() != dim) throw CheckpointError("chain sample row has wrong width");
    chain.samples.push_back(std::move(sample));
  }
  return chain;
}

// ---------------------------------------------------------------------------
// Pipelines

CalibrationResult run_calibration(const RunConfig& config, const RunOverrides& overrides) {
  const RunConfig cfg = apply_overrides(config, overrides);
  ResolvedRun run = resolve_run(cfg);
  const fs::path out_dir(cfg.output_dir);
  fs::create_directories(out_dir);

  struct ChainSlot {
    ChainRecord record;
    SamplerCheckpoint checkpoint;
    long coarse_solves = 0, fine_solves = 0, blowups = 0;
    std::exception_ptr error;
  };
  std::vector<ChainSlot> slots(cfg.chains);

  auto run_one = [&](int index) {
    ChainSlot& slot = slots[index];
    try {
      std::unique_ptr<PosteriorEvaluator> eval = make_evaluator(run);
      PosteriorEvaluator* ev = eval.get();
      LogTarget coarse = [ev](std::span<const double> x) {
        return ev->log_posterior(ParameterState::from_vector(x), Fidelity::coarse).value;
      };
      LogTarget fine = [ev](std::span<const double> x) {
        return ev->log_posterior(ParameterState::from_vector(x), Fidelity::fine).value;
      };
      TsamSampler sampler(make_sampler_config(run, cfg.seed + static_cast<std::uint64_t>(index)),
                          coarse, fine);
      slot.record = sampler.run(run.initial.to_vector());
      slot.checkpoint = sampler.snapshot();
      slot.coarse_solves = ev->coarse_solves();
      slot.fine_solves = ev->fine_solves();
      slot.blowups = ev->blowups();
    } catch (...) {
      slot.error = std::current_exception();
    }
  };

  if (cfg.chains == 1) {
    run_one(0);
  } else {
    std::vector<std::thread> workers;
    workers.reserve(cfg.chains);
    for (int i = 0; i < cfg.chains; ++i) workers.emplace_back(run_one, i);
    for (std::thread& w : workers) w.join();
  }
  for (const ChainSlot& slot : slots)
    if (slot.error) std::rethrow_exception(slot.error);

  std::vector<ChainOutput> chains;
  std::vector<std::vector<double>> pooled;
  for (int i = 0; i < cfg.chains; ++i) {
    ChainSlot& slot = slots[i];
    ChainFile file;
    file.checkpoint = slot.checkpoint;
    file.samples = slot.record.samples;
    file.seed = cfg.seed + static_cast<std::uint64_t>(i);
    file.chain_index = i;
    file.total_iters = cfg.total_iters;
    file.burn_in = cfg.burn_in;
    file.thin = cfg.thin;
    std::ostringstream name;
    name << "chain_" << i << ".csv";
    const std::string path = (out_dir / name.str()).string();
    write_chain_file(path, file);

    ChainOutput out;
    out.checkpoint_path = path;
    out.counters = slot.record.counters;
    out.diagnostics = compute_diagnostics(slot.record);
    out.n_samples = static_cast<long>(slot.record.samples.size());
    chains.push_back(std::move(out));
    pooled.insert(pooled.end(), slot.record.samples.begin(), slot.record.samples.end());
  }

  std::unique_ptr<PosteriorEvaluator> eval = make_evaluator(run);
  return finish_outputs(*eval, run, pooled, std::move(chains), out_dir, "calibrate",
                        overrides.dump_solution);
}

CalibrationResult summarize_chains(const RunConfig& config,
                                   const std::vector<std::string>& chain_paths,
                                   const RunOverrides& overrides) {
  const RunConfig cfg = apply_overrides(config, overrides);
  ResolvedRun run = resolve_run(cfg);
  const fs::path out_dir(cfg.output_dir);
  fs::create_directories(out_dir);

  if (chain_paths.empty()) throw EmptyChainError("summarize needs at least one chain file");
  std::vector<ChainOutput> chains;
  std::vector<std::vector<double>> pooled;
  for (const std::string& path : chain_paths) {
    ChainFile file = read_chain_file(path);
    if (static_cast<int>(file.checkpoint.state.size()) != run.prior.n_kl + 3)
      throw CheckpointError("chain dimension does not match the config's truncation");
    ChainOutput out;
    out.checkpoint_path = path;
    out.counters = file.checkpoint.counters;
    ChainRecord record;
    record.samples = file.samples;
    record.counters = file.checkpoint.counters;
    out.diagnostics = compute_diagnostics(record);
    out.n_samples = static_cast<long>(file.samples.size());
    chains.push_back(std::move(out));
    pooled.insert(pooled.end(), file.samples.begin(), file.samples.end());
  }

  std::unique_ptr<PosteriorEvaluator> eval = make_evaluator(run);
  return finish_outputs(*eval, run, pooled, std::move(chains), out_dir, "summarize",
                        overrides.dump_solution);
}

CalibrationResult resume_calibration(const RunConfig& config, const std::string& checkpoint_path,
                                     const RunOverrides& overrides) {
  const RunConfig cfg = apply_overrides(config, overrides);
  ResolvedRun run = resolve_run(cfg);
  const fs::path out_dir(cfg.output_dir);
  fs::create_directories(out_dir);

  ChainFile file = read_chain_file(checkpoint_path);
  if (static_cast<int>(file.checkpoint.state.size()) != run.prior.n_kl + 3)
    throw CheckpointError("chain dimension does not match the config's truncation");
  if (file.burn_in != cfg.burn_in || file.thin != cfg.thin)
    throw CheckpointError("resume config changes burn_in or thin; the sample stream would shift");
  if (file.checkpoint.iters_done >= cfg.total_iters)
    throw CheckpointError("chain already has >= total_iters iterations; nothing to resume");

  std::unique_ptr<PosteriorEvaluator> eval = make_evaluator(run);
  PosteriorEvaluator* ev = eval.get();
  LogTarget coarse = [ev](std::span<const double> x) {
    return ev->log_posterior(ParameterState::from_vector(x), Fidelity::coarse).value;
  };
  LogTarget fine = [ev](std::span<const double> x) {
    return ev->log_posterior(ParameterState::from_vector(x), Fidelity::fine).value;
  };
  TsamSampler sampler(make_sampler_config(run, file.seed), coarse, fine);
  sampler.restore(file.checkpoint);
  ChainRecord record = sampler.run({});

  file.samples.insert(file.samples.end(), record.samples.begin(), record.samples.end());
  file.checkpoint = sampler.snapshot();
  file.total_iters = cfg.total_iters;
  std::ostringstream name;
  name << "chain_" << file.chain_index << ".csv";
  const std::string path = (out_dir / name.str()).string();
  write_chain_file(path, file);

  ChainOutput out;
  out.checkpoint_path = path;
  out.counters = file.checkpoint.counters;
  ChainRecord merged;
  merged.samples = file.samples;
  merged.counters = file.checkpoint.counters;
  out.diagnostics = compute_diagnostics(merged);
  out.n_samples = static_cast<long>(file.samples.size());

  std::vector<ChainOutput> chains;
  chains.push_back(std::move(out));
  return finish_outputs(*eval, run, file.samples, std::move(chains), out_dir, "resume",
                        overrides.dump_solution);
}

std::string price_with_surface(const RunConfig& config, const std::string& surface_csv,
                               const RunOverrides& overrides) {
  const RunConfig cfg = apply_overrides(config, overrides);
  ResolvedRun run = resolve_run(cfg);
  const fs::path out_dir(cfg.output_dir);
  fs::create_directories(out_dir);

  // Surface file: maturity,strike,sigma rows forming a complete tensor grid.
  std::ifstream in(surface_csv);
  if (!in) throw ConfigError("cannot open surface file: " + surface_csv);
  std::string line;
  if (!std::getline(in, line)) throw MissingColumnError("surface file has no header");
  std::vector<double> ts, ks;
  std::vector<std::pair<std::pair<double, double>, double>> entries;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    double t, k, s;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &t, &k, &s) != 3) {
      std::ostringstream msg;
      msg << "surface row " << row << " is not 'maturity,strike,sigma'";
      throw MalformedRowError(msg.str());
    }
    if (!(s > 0.0)) throw NonPositiveVolatilityError("surface file has a non-positive sigma");
    ts.push_back(t);
    ks.push_back(k);
    entries.push_back({{t, k}, s});
  }
  auto uniq = [](std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end(),
                        [](double a, double b) { return std::abs(a - b) < 1e-12; }),
            v.end());
  };
  uniq(ts);
  uniq(ks);
  if (ts.size() * ks.size() != entries.size())
    throw ConfigError("surface rows do not form a full maturity x strike grid");
  std::vector<double> sig(entries.size());
  auto index_of = [](const std::vector<double>& v, double x) {
    auto it = std::lower_bound(v.begin(), v.end(), x - 1e-12);
    return static_cast<std::size_t>(it - v.begin());
  };
  for (const auto& e : entries)
    sig[index_of(ts, e.first.first) * ks.size() + index_of(ks, e.first.second)] = e.second;

  // Bilinear interpolation with clamp-to-edge extension beyond the grid.
  auto interp = [&](double t, double k) {
    auto bracket = [](const std::vector<double>& v, double x, std::size_t& lo, double& w) {
      if (x <= v.front()) {
        lo = 0;
        w = 0.0;
        return;
      }
      if (x >= v.back()) {
        lo = v.size() - 2;
        w = 1.0;
        return;
      }
      lo = static_cast<std::size_t>(std::upper_bound(v.begin(), v.end(), x) - v.begin()) - 1;
      w = (x - v[lo]) / (v[lo + 1] - v[lo]);
    };
    if (ts.size() == 1 && ks.size() == 1) return sig[0];
    if (ts.size() == 1) {
      std::size_t j;
      double wk;
      bracket(ks, k, j, wk);
      return (1.0 - wk) * sig[j] + wk * sig[j + 1];
    }
    if (ks.size() == 1) {
      std::size_t i;
      double wt;
      bracket(ts, t, i, wt);
      return (1.0 - wt) * sig[i] + wt * sig[i + 1];
    }
    std::size_t i, j;
    double wt, wk;
    bracket(ts, t, i, wt);
    bracket(ks, k, j, wk);
    const std::size_t nk = ks.size();
    return (1.0 - wt) * ((1.0 - wk) * sig[i * nk + j] + wk * sig[i * nk + j + 1]) +
           wt * ((1.0 - wk) * sig[(i + 1) * nk + j] + wk * sig[(i + 1) * nk + j + 1]);
  };

  std::vector<double> maturities;
  for (const OptionQuote& q : run.all_quotes) maturities.push_back(q.maturity);
  auto [mesh, grid] = build_mesh(cfg.market, run.fine_mesh, maturities);
  PdeCoefficients coeffs;
  coeffs.rate = cfg.market.rate;
  coeffs.dividend = cfg.market.dividend;
  coeffs.spot = cfg.market.spot;
  coeffs.sigma = [&](int level, int node) { return interp(grid.times[level], mesh.nodes[node]); };
  const std::vector<double> field = price_surface(mesh, grid, coeffs);

  const std::string out_path = (out_dir / "prices.csv").string();
  {
    std::ofstream out = open_out(out_path);
    out << "maturity,strike,model_price\n";
    for (const OptionQuote& q : run.all_quotes)
      out << fmt(q.maturity) << ',' << fmt(q.strike) << ','
          << fmt_exact(extract_price(field, mesh, grid, q.maturity, q.strike)) << '\n';
  }
  if (overrides.dump_solution) {
    std::ofstream out = open_out(out_dir / "solution_fine.csv");
    dump_solution(out, field, mesh, grid);
  }
  return out_path;
}

}  // namespace volcal
