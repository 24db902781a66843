#pragma once

// Epsilon x seed sweeps, CSV tables, summaries and SVG trade-off charts.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dpals/harness/run.hpp"

namespace dpals::harness {

inline const std::vector<std::string>& run_csv_columns() {
  static const std::vector<std::string> cols{"dataset", "mode",  "epsilon", "delta", "r",       "lambda", "lambda0",
                                             "mu",      "nu",    "T",       "k",     "beta",    "sigma_G", "sigma_g",
                                             "sigma_p", "seed",  "metric",  "value", "wall_seconds"};
  return cols;
}

inline const std::vector<std::string>& summary_csv_columns() {
  static const std::vector<std::string> cols{"dataset", "mode",   "epsilon", "delta", "metric",
                                             "n_runs",  "n_failed", "mean",  "stddev", "median"};
  return cols;
}

inline std::string fmt(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string join(const std::vector<std::string>& fields) {
  std::string line;
  for (std::size_t a = 0; a < fields.size(); ++a) {
    if (a) line += ',';
    line += fields[a];
  }
  return line;
}

/// One CSV row per metric; a failed run gets a single "failed" row.
inline std::vector<std::string> run_csv_rows(const ExperimentConfig& c, const RunReport& rep) {
  const bool priv = rep.mode == "private";
  const auto& p = c.privacy;
  auto row = [&](const std::string& metric, double value) {
    char wall[32];
    std::snprintf(wall, sizeof wall, "%.3f", rep.wall_seconds);
    return join({rep.dataset, rep.mode, rep.epsilon_label(), fmt(p.delta), std::to_string(c.model.r), fmt(c.model.lambda),
                 fmt(c.model.lambda0), fmt(c.model.mu), fmt(c.model.nu), std::to_string(c.model.T),
                 priv && p.k != kUnlimited ? std::to_string(p.k) : "all", fmt(priv ? p.beta : 1.0), fmt(rep.sigma_G),
                 fmt(rep.sigma_g), fmt(priv && p.preprocess ? p.sigma_p : 0.0), std::to_string(rep.seed), metric, fmt(value),
                 wall});
  };
  std::vector<std::string> rows;
  if (rep.failed()) {
    rows.push_back(row("failed:" + rep.failed_stage, std::nan("")));
    return rows;
  }
  for (const auto& [name, value] : rep.metrics) rows.push_back(row(name, value));
  return rows;
}

struct SummaryRow {
  std::string dataset, mode, epsilon, metric;
  double delta = 0.0;
  std::size_t n_runs = 0, n_failed = 0;
  double mean = std::nan(""), stddev = std::nan(""), median = std::nan("");

  std::string csv() const {
    return join({dataset, mode, epsilon, fmt(delta), metric, std::to_string(n_runs), std::to_string(n_failed), fmt(mean),
                 fmt(stddev), fmt(median)});
  }
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

/// Mean, sample standard deviation (n - 1) and median per (epsilon, metric),
/// in order of first appearance.
inline std::vector<SummaryRow> summarize(const std::vector<RunReport>& reports) {
  std::vector<SummaryRow> rows;
  std::vector<std::vector<double>> values;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  std::map<std::string, std::size_t> failed_per_eps, runs_per_eps;
  std::vector<std::string> eps_order;
  for (const auto& rep : reports) {
    const std::string eps = rep.epsilon_label();
    if (!runs_per_eps.count(eps)) eps_order.push_back(eps);
    ++runs_per_eps[eps];
    if (rep.failed()) {
      ++failed_per_eps[eps];
      continue;
    }
    for (const auto& [name, value] : rep.metrics) {
      const auto key = std::make_pair(eps, name);
      auto it = index.find(key);
      if (it == index.end()) {
        it = index.emplace(key, rows.size()).first;
        rows.push_back({rep.dataset, rep.mode, eps, name, rep.delta});
        values.emplace_back();
      }
      values[it->second].push_back(value);
    }
  }
  for (std::size_t a = 0; a < rows.size(); ++a) {
    auto& row = rows[a];
    const auto& v = values[a];
    row.n_runs = runs_per_eps[row.epsilon];
    row.n_failed = row.n_runs - v.size();
    row.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - row.mean) * (x - row.mean);
      row.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    row.median = median_of(v);
  }
  // Epsilon values where every run failed still get a row.
  for (const auto& eps : eps_order) {
    const bool present = std::any_of(rows.begin(), rows.end(), [&](const SummaryRow& r) { return r.epsilon == eps; });
    if (!present) {
      const auto& rep = *std::find_if(reports.begin(), reports.end(), [&](const RunReport& r) { return r.epsilon_label() == eps; });
      SummaryRow row{rep.dataset, rep.mode, eps, "failed", rep.delta};
      row.n_runs = row.n_failed = runs_per_eps[eps];
      rows.push_back(row);
    }
  }
  return rows;
}

/// Line chart of a metric's mean (with +-1 stddev bars) against epsilon on a
/// log axis. Non-finite epsilon values are drawn as a dashed reference line.
inline std::string tradeoff_svg(const std::vector<SummaryRow>& rows, const std::string& metric) {
  std::vector<std::pair<double, const SummaryRow*>> pts;
  const SummaryRow* reference = nullptr;
  for (const auto& r : rows) {
    if (r.metric != metric || std::isnan(r.mean)) continue;
    if (r.epsilon == "inf") {
      reference = &r;
      continue;
    }
    pts.emplace_back(std::stod(r.epsilon), &r);
  }
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  const double W = 640, H = 400, L = 70, R = 20, T = 30, B = 50;
  double xlo = 0, xhi = 1, ylo = 0, yhi = 1;
  if (!pts.empty()) {
    xlo = std::log10(pts.front().first);
    xhi = std::log10(pts.back().first);
    if (xhi - xlo < 1e-9) { xlo -= 0.5; xhi += 0.5; }
    ylo = yhi = pts.front().second->mean;
  } else if (reference) {
    ylo = yhi = reference->mean;
  }
  auto grow = [&](double y) { ylo = std::min(ylo, y); yhi = std::max(yhi, y); };
  for (const auto& [e, r] : pts) {
    const double sd = std::isnan(r->stddev) ? 0.0 : r->stddev;
    grow(r->mean - sd);
    grow(r->mean + sd);
  }
  if (reference) grow(reference->mean);
  if (yhi - ylo < 1e-12) { ylo -= 0.5; yhi += 0.5; }
  const double pad = 0.05 * (yhi - ylo);
  ylo -= pad;
  yhi += pad;
  auto X = [&](double eps) { return L + (std::log10(eps) - xlo) / (xhi - xlo) * (W - L - R); };
  auto Y = [&](double y) { return H - B - (y - ylo) / (yhi - ylo) * (H - T - B); };

  std::ostringstream s;
  s.precision(6);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\">" << metric << " vs epsilon</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = ylo + (yhi - ylo) * t / 4.0;
    s << "<text x=\"" << L - 6 << "\" y=\"" << Y(y) + 4 << "\" text-anchor=\"end\">" << y << "</text>\n";
  }
  for (const auto& [e, r] : pts) s << "<text x=\"" << X(e) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << r->epsilon << "</text>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">epsilon (log scale)</text>\n";
  if (reference) {
    s << "<line x1=\"" << L << "\" y1=\"" << Y(reference->mean) << "\" x2=\"" << W - R << "\" y2=\"" << Y(reference->mean)
      << "\" stroke=\"gray\" stroke-dasharray=\"6,4\"/>\n";
    s << "<text x=\"" << W - R << "\" y=\"" << Y(reference->mean) - 4 << "\" text-anchor=\"end\" fill=\"gray\">non-private</text>\n";
  }
  if (!pts.empty()) {
    s << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
    for (const auto& [e, r] : pts) s << X(e) << "," << Y(r->mean) << " ";
    s << "\"/>\n";
    for (const auto& [e, r] : pts) {
      const double sd = std::isnan(r->stddev) ? 0.0 : r->stddev;
      s << "<line x1=\"" << X(e) << "\" y1=\"" << Y(r->mean - sd) << "\" x2=\"" << X(e) << "\" y2=\"" << Y(r->mean + sd)
        << "\" stroke=\"steelblue\"/>\n";
      s << "<circle cx=\"" << X(e) << "\" cy=\"" << Y(r->mean) << "\" r=\"3\" fill=\"steelblue\"/>\n";
    }
  }
  s << "</svg>\n";
  return s.str();
}

struct SweepResult {
  std::vector<RunReport> reports;  // epsilon-major, then seed, in config order
  std::vector<SummaryRow> summary;
  std::filesystem::path directory;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "cannot write " + path.string());
  out << text;
}

/// Writes runs.csv, summary.csv, one JSON report per cell and optional SVGs.
inline void write_sweep_outputs(const ExperimentConfig& c, const SweepResult& res) {
  const auto& dir = res.directory;
  std::filesystem::create_directories(dir / "reports");
  std::string runs = join(run_csv_columns()) + "\n";
  for (const auto& rep : res.reports) {
    for (const auto& line : run_csv_rows(c, rep)) runs += line + "\n";
    write_text(dir / "reports" / ("eps-" + format_epsilon(rep.epsilon_target) + "_seed-" + std::to_string(rep.seed) + ".json"),
               rep.to_json().dump(2) + "\n");
  }
  write_text(dir / "runs.csv", runs);
  std::string summary = join(summary_csv_columns()) + "\n";
  for (const auto& row : res.summary) summary += row.csv() + "\n";
  write_text(dir / "summary.csv", summary);
  if (c.output.svg) {
    std::vector<std::string> metrics;
    for (const auto& row : res.summary)
      if (row.metric != "failed" && std::find(metrics.begin(), metrics.end(), row.metric) == metrics.end())
        metrics.push_back(row.metric);
    for (const auto& m : metrics) {
      std::string file = m;
      std::replace(file.begin(), file.end(), '@', '_');
      write_text(dir / (file + ".svg"), tradeoff_svg(res.summary, m));
    }
  }
}

/// Runs the epsilon x seed cross product on a bounded worker pool. Cells
/// are independent; failures are recorded per cell and the sweep continues.
inline SweepResult sweep(const ExperimentConfig& c, bool write_outputs = true) {
  std::vector<double> eps = c.privacy.epsilons;
  if (c.explicit_sigma()) eps = {kInfinity};
  if (eps.empty()) throw Error("nothing to sweep");

  std::optional<RatingsDataset> shared;
  if (c.dataset.source == "csv" || c.dataset.seed) shared = load_dataset(c, c.seeds.front());

  struct Cell {
    double epsilon;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (double e : eps)
    for (auto s : c.seeds) cells.push_back({e, s});

  SweepResult res;
  res.reports.resize(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t a; (a = next.fetch_add(1)) < cells.size();)
      res.reports[a] = run_experiment(c, cells[a].epsilon, cells[a].seed, shared ? &*shared : nullptr);
  };
  const std::size_t n_workers = std::min(c.workers, cells.size());
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  res.summary = summarize(res.reports);
  res.directory = output_directory(c) / c.name;
  if (write_outputs) write_sweep_outputs(c, res);
  return res;
}

/// Cumulative observation share of the top fractions of items, for the raw
/// data and for uniform and adaptive samples at the same k.
struct SkewRow {
  std::string variant;
  double top_fraction;
  double share;
};

inline std::vector<SkewRow> skew_report(const RatingsDataset& ds, std::size_t k, std::uint64_t seed,
                                        const std::vector<double>& fractions, double sigma_p = 0.0) {
  const RngStream base(seed);
  const RatingsDataset uniform = uniform_sample_per_user(ds, k, base.with(Phase::kPreprocessSample));
  const auto counts = noisy_item_counts(uniform, sigma_p, base.with(Phase::kCounts));
  const std::vector<bool> all(ds.m(), true);
  const RatingsDataset adaptive = adaptive_sample_per_user(ds, all, counts, k);
  std::vector<SkewRow> rows;
  auto add = [&](const char* name, const RatingsDataset& d) {
    const auto shares = top_item_share(d, fractions);
    for (std::size_t a = 0; a < fractions.size(); ++a) rows.push_back({name, fractions[a], shares[a]});
  };
  add("unsampled", ds);
  add("uniform", uniform);
  add("adaptive", adaptive);
  return rows;
}

}  // namespace dpals::harness
