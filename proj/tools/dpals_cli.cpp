// dpals: command line front end for data generation, training, evaluation,
// sweeps, privacy accounting and skew diagnostics.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dpals/accountant.hpp"
#include "dpals/checkpoint.hpp"
#include "dpals/dataset.hpp"
#include "dpals/harness/config.hpp"
#include "dpals/harness/run.hpp"
#include "dpals/harness/sweep.hpp"
#include "dpals/metrics.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;
namespace h = dpals::harness;

json matrix_json(const dpals::FactorMatrix& a) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(a.cols()));
    for (Eigen::Index c = 0; c < a.cols(); ++c) row[static_cast<std::size_t>(c)] = a(i, c);
    rows.push_back(row);
  }
  return rows;
}

dpals::FactorMatrix matrix_from_json(const json& rows) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto r = n ? static_cast<Eigen::Index>(rows[0].size()) : 0;
  dpals::FactorMatrix a(n, r);
  for (Eigen::Index i = 0; i < n; ++i) {
    dpals::require(rows[static_cast<std::size_t>(i)].size() == static_cast<std::size_t>(r), "ragged matrix in model file");
    for (Eigen::Index c = 0; c < r; ++c) a(i, c) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)].get<double>();
  }
  return a;
}

void append_csv(const fs::path& path, const std::vector<std::string>& header, const std::vector<std::string>& rows) {
  const bool fresh = !fs::exists(path);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  dpals::require(static_cast<bool>(out), "cannot write " + path.string());
  if (fresh) out << h::join(header) << "\n";
  for (const auto& r : rows) out << r << "\n";
}

double parse_eps(const std::string& s) {
  if (s == "inf" || s == "infinity") return dpals::kInfinity;
  return std::stod(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Private alternating least squares for matrix completion"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic low-rank ratings CSV");
  std::size_t sn = 1000, sm = 200, sr = 5;
  double sp = 0.0;
  std::uint64_t sseed = 0;
  std::string sout, struth;
  double zipf = 0.0;
  std::size_t zmin = 10, zmax = 100;
  synth->add_option("--n", sn, "users")->capture_default_str();
  synth->add_option("--m", sm, "items")->capture_default_str();
  synth->add_option("--rank", sr, "rank")->capture_default_str();
  synth->add_option("--p", sp, "observation probability (default 20 ln(n)/m)");
  synth->add_option("--seed", sseed, "seed")->capture_default_str();
  synth->add_option("--zipf", zipf, "generate Zipf item popularity with this exponent instead");
  synth->add_option("--zipf-min", zmin, "Zipf: minimum ratings per user")->capture_default_str();
  synth->add_option("--zipf-max", zmax, "Zipf: maximum ratings per user")->capture_default_str();
  synth->add_option("--out", sout, "output CSV")->required();
  synth->add_option("--truth", struth, "also write the true factors as JSON");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Normalize a user,item,rating CSV to dense indices");
  std::string iin, iout, imap;
  ingest->add_option("--in", iin, "input CSV with a header row")->required();
  ingest->add_option("--out", iout, "output CSV (0-based indices)")->required();
  ingest->add_option("--id-map", imap, "write the original ids as JSON");

  // train
  auto* train = app.add_subcommand("train", "Run one experiment cell from a config");
  std::string tconfig, tckpt, tresume, tmodel, treport;
  std::vector<std::string> tset;
  std::string teps;
  std::uint64_t tseed = 0;
  train->add_option("--config", tconfig, "experiment config JSON")->required();
  train->add_option("--set", tset, "override a config key (a.b=value)");
  train->add_option("--epsilon", teps, "target epsilon or inf (default: first in the config)");
  train->add_option("--seed", tseed, "seed (default: first in the config)");
  train->add_option("--checkpoint", tckpt, "write a checkpoint after every step");
  train->add_option("--resume", tresume, "resume from a checkpoint");
  train->add_option("--save-model", tmodel, "write the trained factors as JSON");
  train->add_option("--report", treport, "report JSON path (default under the output directory)");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "RMSE of a saved model on a ratings CSV");
  std::string emodel, edata;
  evaluate->add_option("--model", emodel, "model JSON from train --save-model")->required();
  evaluate->add_option("--data", edata, "CSV with 0-based user,item,rating")->required();

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Epsilon x seed sweep with CSV and SVG output");
  std::string wconfig;
  std::vector<std::string> wset;
  sweep->add_option("--config", wconfig, "experiment config JSON")->required();
  sweep->add_option("--set", wset, "override a config key (a.b=value)");

  // accountant
  auto* acct = app.add_subcommand("accountant", "Privacy accounting calculator");
  double ak = 1, asteps = 1, adelta = dpals::kDefaultDelta;
  double asigma = 0.0, asigma_g = 0.0, asigma_p = 0.0, atarget = 0.0;
  bool agramian = false;
  acct->add_option("--k", ak, "per-user cap")->capture_default_str();
  acct->add_option("--steps", asteps, "alternating steps T")->capture_default_str();
  acct->add_option("--sigma", asigma, "noise multiplier (sigma_G when --sigma-g is given)");
  acct->add_option("--sigma-g", asigma_g, "right-hand-side noise multiplier");
  acct->add_option("--sigma-p", asigma_p, "pre-processing noise multiplier");
  acct->add_flag("--gramian", agramian, "charge the shared noisy Gramian (lambda0 > 0)");
  acct->add_option("--delta", adelta, "delta")->capture_default_str();
  acct->add_option("--target-epsilon", atarget, "calibrate sigma for this epsilon");

  // skew-report
  auto* skew = app.add_subcommand("skew-report", "Observation share of the most popular items");
  std::string kin, kout;
  std::size_t kk = 20;
  std::uint64_t kseed = 0;
  double ksigma = 0.0;
  skew->add_option("--in", kin, "CSV with 0-based user,item,rating")->required();
  skew->add_option("--k", kk, "per-user sample size")->capture_default_str();
  skew->add_option("--seed", kseed, "seed")->capture_default_str();
  skew->add_option("--sigma-p", ksigma, "noise on the counts used for adaptive sampling")->capture_default_str();
  skew->add_option("--out", kout, "output CSV (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      dpals::RatingsDataset ds;
      json manifest{{"n", sn}, {"m", sm}, {"seed", sseed}};
      if (zipf > 0.0) {
        ds = dpals::generate_zipf(sn, sm, zmin, zmax, zipf, sseed);
        manifest.update({{"zipf_exponent", zipf}, {"min_per_user", zmin}, {"max_per_user", zmax}});
      } else {
        const double p = sp > 0.0 ? sp : std::min(1.0, 20.0 * std::log(static_cast<double>(sn)) / static_cast<double>(sm));
        auto data = dpals::generate_synthetic(sn, sm, sr, p, sseed);
        manifest.update({{"r", sr}, {"p", p}, {"scale", data.scale}});
        if (!struth.empty()) {
          std::ofstream t(struth);
          t << json{{"U", matrix_json(data.truth.U)}, {"V", matrix_json(data.truth.V)}, {"scale", data.scale}}.dump() << "\n";
        }
        ds = std::move(data.dataset);
      }
      std::ofstream out(sout);
      dpals::require(static_cast<bool>(out), "cannot write " + sout);
      dpals::write_csv(ds, out);
      h::write_text(sout + ".manifest.json", manifest.dump(2) + "\n");
      std::cout << "wrote " << ds.size() << " ratings (" << ds.n() << " users, " << ds.m() << " items) to " << sout << "\n";
    } else if (ingest->parsed()) {
      auto res = dpals::ingest_csv(iin);
      std::ofstream out(iout);
      dpals::require(static_cast<bool>(out), "cannot write " + iout);
      dpals::write_csv(res.dataset, out);
      if (!imap.empty()) {
        std::ofstream m(imap);
        m << json{{"users", res.user_ids}, {"items", res.item_ids}}.dump() << "\n";
      }
      std::cout << res.dataset.size() << " ratings, " << res.dataset.n() << " users, " << res.dataset.m() << " items, "
                << res.duplicate_rows << " duplicate rows replaced\n";
    } else if (train->parsed()) {
      const auto cfg = h::load_config(tconfig, tset);
      const double eps = !teps.empty() ? parse_eps(teps)
                         : cfg.privacy.epsilons.empty() ? dpals::kInfinity
                                                        : cfg.privacy.epsilons.front();
      const std::uint64_t seed = train->count("--seed") ? tseed : cfg.seeds.front();
      h::RunHooks hooks;
      hooks.checkpoint_path = tckpt;
      if (!tresume.empty()) hooks.resume_from = dpals::load_checkpoint(tresume);
      const auto rep = h::run_experiment(cfg, eps, seed, nullptr, hooks);
      const fs::path dir = h::output_directory(cfg) / cfg.name;
      fs::create_directories(dir);
      const fs::path report_path = treport.empty() ? dir / ("report_eps-" + h::format_epsilon(eps) + "_seed-" + std::to_string(seed) + ".json")
                                                   : fs::path(treport);
      h::write_text(report_path, rep.to_json().dump(2) + "\n");
      append_csv(dir / "runs.csv", h::run_csv_columns(), h::run_csv_rows(cfg, rep));
      for (const auto& [name, value] : rep.metrics) std::cout << name << " = " << value << "\n";
      if (rep.mode == "private") std::cout << "epsilon = " << h::format_epsilon(rep.epsilon) << " (delta " << rep.delta << ")\n";
      std::cout << "report: " << report_path.string() << "\n";
      if (!tmodel.empty() && !rep.failed()) {
        h::write_text(tmodel, json{{"offset", rep.offset}, {"U", matrix_json(rep.factors.U)}, {"V", matrix_json(rep.factors.V)}}.dump() + "\n");
        std::cout << "model: " << tmodel << "\n";
      }
      if (rep.failed()) {
        std::cerr << "failed at stage " << rep.failed_stage << ": " << rep.error << "\n";
        return 1;
      }
    } else if (evaluate->parsed()) {
      const json model = h::read_json_file(emodel);
      dpals::FactorPair f{matrix_from_json(model.at("U")), matrix_from_json(model.at("V"))};
      const double offset = model.value("offset", 0.0);
      const auto ds = dpals::read_indexed_csv(edata, static_cast<std::size_t>(f.U.rows()), static_cast<std::size_t>(f.V.rows()));
      dpals::require(ds.n() == static_cast<std::size_t>(f.U.rows()) && ds.m() == static_cast<std::size_t>(f.V.rows()),
                     "data indices exceed the model dimensions");
      dpals::EvalReport report;
      report.rmse = dpals::rmse(f, ds, offset);
      report.n_eval_entries = ds.size();
      std::cout << report.to_json().dump(2) << "\n";
    } else if (sweep->parsed()) {
      const auto cfg = h::load_config(wconfig, wset);
      const auto res = h::sweep(cfg);
      std::cout << h::join(h::summary_csv_columns()) << "\n";
      for (const auto& row : res.summary) std::cout << row.csv() << "\n";
      std::cout << "outputs in " << res.directory.string() << "\n";
      std::size_t failed = 0;
      for (const auto& r : res.reports) failed += r.failed() ? 1 : 0;
      if (failed) {
        std::cerr << failed << " of " << res.reports.size() << " runs failed\n";
        return 1;
      }
    } else if (acct->parsed()) {
      dpals::LedgerTemplate tmpl;
      if (asigma_p > 0.0) tmpl.add_fixed("preprocessing", dpals::preprocessing_rho_sq(ak, asigma_p));
      if (atarget > 0.0) {
        tmpl.add_scaled("dpals_training", ak * asteps / 2.0);
        if (agramian) tmpl.add_scaled("global_gramian", asteps / 2.0);
        const double sigma = dpals::solve_sigma_for_budget(tmpl, atarget, adelta);
        json out{{"sigma", sigma},
                 {"sigma_closed_form", dpals::sigma_for_epsilon_closed_form(ak, asteps, atarget, adelta)},
                 {"epsilon", dpals::rdp_to_dp(tmpl.total_rho_sq(sigma), adelta)},
                 {"delta", adelta}};
        std::cout << out.dump(2) << "\n";
      } else {
        if (!(asigma > 0.0)) {
          std::cerr << "give --sigma or --target-epsilon\n";
          return 2;
        }
        const double sigma_min = asigma_g > 0.0 ? std::min(asigma, asigma_g) : asigma;
        dpals::RdpLedger ledger(adelta);
        if (asigma_p > 0.0) ledger.append("preprocessing", dpals::preprocessing_rho_sq(ak, asigma_p));
        ledger.append("dpals_training", dpals::dpals_rho_sq(ak, asteps, sigma_min));
        if (agramian) ledger.append("global_gramian", dpals::gramian_rho_sq(asteps, asigma));
        json entries = json::array();
        for (const auto& e : ledger.entries()) entries.push_back({{"label", e.label}, {"rho_sq", e.rho_sq}});
        json out{{"rho_sq_entries", entries},
                 {"total_rho_sq", ledger.total_rho_sq()},
                 {"epsilon", ledger.epsilon()},
                 {"delta", adelta},
                 {"optimal_order", dpals::optimal_rdp_order(ledger.total_rho_sq(), adelta)}};
        std::cout << out.dump(2) << "\n";
      }
    } else if (skew->parsed()) {
      const auto ds = dpals::read_indexed_csv(kin);
      const std::vector<double> fractions{0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
      const auto rows = h::skew_report(ds, kk, kseed, fractions, ksigma);
      std::ostringstream s;
      s << "variant,top_fraction,share\n";
      for (const auto& r : rows) s << r.variant << "," << h::fmt(r.top_fraction) << "," << h::fmt(r.share) << "\n";
      if (kout.empty()) {
        std::cout << s.str();
      } else {
        h::write_text(kout, s.str());
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
