#pragma once

// Experiment configuration: JSON parsing with strict key checking, command
// line overrides and validation.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpals/common.hpp"
#include "dpals/preprocess.hpp"

namespace dpals::harness {

using nlohmann::json;

struct DatasetSpec {
  std::string source = "synthetic";  // synthetic | csv
  std::string name;
  std::string path;
  std::size_t n = 0, m = 0, rank = 0;
  std::optional<double> p;              // default 20 ln(n) / m
  std::optional<std::uint64_t> seed;    // default: the run seed
};

struct SplitSpec {
  std::string protocol = "random";  // random | users
  std::array<double, 3> fractions{0.8, 0.1, 0.1};
  std::size_t valid_users = 0, test_users = 0;
  double query_fraction = 0.5;
};

struct ModelSpec {
  std::size_t r = 1;
  double lambda = 0.0, lambda0 = 0.0, mu = 0.0, nu = 0.0;
  std::size_t T = 1;
  bool user_subsample = false;
  bool resample_each_iteration = false;
};

struct PrivacySpec {
  std::vector<double> epsilons;  // +inf is the non-private sentinel
  std::optional<double> sigma_G, sigma_g;
  double delta = 1e-5;
  double gamma_u = 1.0, gamma_M = 1.0;
  std::size_t k = kUnlimited;
  bool preprocess = false;
  double sigma_p = 0.0;
  double beta = 1.0;
  bool center = true;  // non-private runs only: subtract the training mean
};

struct InitSpec {
  std::string mode = "random";  // random | power_iteration
  std::size_t T = 1;
  double nu = 1.0;
  std::size_t s = 1;
  double sigma = 0.0;
};

struct OutputSpec {
  std::string dir = "runs";
  bool record_wall_clock = true;
  bool svg = true;
  bool checkpoint = false;
  bool trace = false;  // per-iteration validation RMSE in the report
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSpec dataset;
  SplitSpec split;
  ModelSpec model;
  PrivacySpec privacy;
  InitSpec init;
  std::vector<std::size_t> recall_k;
  std::vector<std::uint64_t> seeds{0};
  std::size_t workers = 1;
  OutputSpec output;
  json raw;  // the validated input, echoed into reports

  bool explicit_sigma() const { return privacy.sigma_G.has_value(); }
};

inline std::string format_epsilon(double eps) {
  if (std::isinf(eps)) return "inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", eps);
  return buf;
}

namespace detail {

class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw Error("config " + where_ + " must be an object");
  }

  /// Call after reading: rejects keys that were never asked for.
  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw Error("unknown config key: " + path(key));
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <class T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw Error("config key " + path(key) + " has the wrong type");
    }
  }

  template <class T>
  void get(const std::string& key, std::optional<T>& out) {
    if (!has(key)) return;
    T v{};
    get(key, v);
    out = v;
  }

  Reader child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, path(key));
  }

  const json& at(const std::string& key) const { return j_.at(key); }
  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline double parse_epsilon(const json& v) {
  if (v.is_string() && (v == "inf" || v == "infinity")) return std::numeric_limits<double>::infinity();
  if (!v.is_number()) throw Error("epsilon values must be numbers or \"inf\"");
  const double e = v.get<double>();
  require(e > 0.0, "epsilon values must be positive");
  return e;
}

}  // namespace detail

/// Parses and validates a configuration. Unknown keys are an error.
inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  c.raw = j;
  detail::Reader top(j, "");
  top.get("name", c.name);
  {
    auto d = top.child("dataset");
    d.get("source", c.dataset.source);
    d.get("name", c.dataset.name);
    d.get("path", c.dataset.path);
    d.get("n", c.dataset.n);
    d.get("m", c.dataset.m);
    d.get("rank", c.dataset.rank);
    d.get("p", c.dataset.p);
    d.get("seed", c.dataset.seed);
    d.finish();
  }
  {
    auto s = top.child("split");
    s.get("protocol", c.split.protocol);
    if (s.has("fractions")) {
      std::vector<double> f;
      s.get("fractions", f);
      require(f.size() == 3, "split.fractions must have three entries");
      c.split.fractions = {f[0], f[1], f[2]};
    }
    s.get("valid_users", c.split.valid_users);
    s.get("test_users", c.split.test_users);
    s.get("query_fraction", c.split.query_fraction);
    s.finish();
  }
  {
    auto m = top.child("model");
    m.get("r", c.model.r);
    m.get("lambda", c.model.lambda);
    m.get("lambda0", c.model.lambda0);
    m.get("mu", c.model.mu);
    m.get("nu", c.model.nu);
    m.get("T", c.model.T);
    m.get("user_subsample", c.model.user_subsample);
    m.get("resample_each_iteration", c.model.resample_each_iteration);
    m.finish();
  }
  {
    auto p = top.child("privacy");
    if (p.has("epsilons")) {
      const json& list = p.at("epsilons");
      require(list.is_array(), "privacy.epsilons must be an array");
      for (const auto& v : list) c.privacy.epsilons.push_back(detail::parse_epsilon(v));
    }
    p.get("sigma_G", c.privacy.sigma_G);
    p.get("sigma_g", c.privacy.sigma_g);
    p.get("delta", c.privacy.delta);
    p.get("gamma_u", c.privacy.gamma_u);
    p.get("gamma_M", c.privacy.gamma_M);
    if (p.has("k")) {
      std::size_t k = 0;
      p.get("k", k);
      c.privacy.k = k;
    }
    p.get("preprocess", c.privacy.preprocess);
    p.get("sigma_p", c.privacy.sigma_p);
    p.get("beta", c.privacy.beta);
    p.get("center", c.privacy.center);
    p.finish();
  }
  {
    auto i = top.child("init");
    i.get("mode", c.init.mode);
    i.get("T", c.init.T);
    i.get("nu", c.init.nu);
    i.get("s", c.init.s);
    i.get("sigma", c.init.sigma);
    i.finish();
  }
  {
    auto mt = top.child("metrics");
    mt.get("recall_k", c.recall_k);
    mt.finish();
  }
  top.get("seeds", c.seeds);
  top.get("workers", c.workers);
  {
    auto o = top.child("output");
    o.get("dir", c.output.dir);
    o.get("record_wall_clock", c.output.record_wall_clock);
    o.get("svg", c.output.svg);
    o.get("checkpoint", c.output.checkpoint);
    o.get("trace", c.output.trace);
    o.finish();
  }
  top.finish();

  // Validation, before any computation.
  const auto& d = c.dataset;
  if (d.source == "synthetic") {
    require(d.n >= 2 && d.m >= 1 && d.rank >= 1 && d.rank <= std::min(d.n, d.m), "synthetic dataset needs n, m, rank");
    if (d.p) require(*d.p > 0.0 && *d.p <= 1.0, "dataset.p must lie in (0, 1]");
  } else if (d.source == "csv") {
    require(!d.path.empty(), "csv dataset needs a path");
  } else {
    throw Error("dataset.source must be synthetic or csv");
  }
  if (c.dataset.name.empty()) c.dataset.name = d.source == "csv" ? std::filesystem::path(d.path).stem().string() : "synthetic";
  if (c.split.protocol == "random") {
    for (double f : c.split.fractions) require(f >= 0.0, "split fractions must be nonnegative");
    require(std::abs(c.split.fractions[0] + c.split.fractions[1] + c.split.fractions[2] - 1.0) <= 1e-9,
            "split fractions must sum to 1");
    require(c.split.fractions[2] > 0.0, "the test fraction must be positive");
  } else if (c.split.protocol == "users") {
    require(c.split.test_users >= 1, "split.test_users must be at least 1");
    require(c.split.query_fraction > 0.0 && c.split.query_fraction < 1.0, "split.query_fraction must lie in (0, 1)");
    require(!c.recall_k.empty(), "the users protocol needs metrics.recall_k");
  } else {
    throw Error("split.protocol must be random or users");
  }
  require(c.model.r >= 1, "model.r must be at least 1");
  require(c.model.lambda >= 0.0 && c.model.lambda0 >= 0.0 && c.model.mu >= 0.0 && c.model.nu >= 0.0,
          "model regularization parameters must be nonnegative");
  const auto& p = c.privacy;
  require(p.delta > 0.0 && p.delta < 1.0, "privacy.delta must lie in (0, 1)");
  require(p.gamma_u > 0.0 && p.gamma_M > 0.0, "clip parameters must be positive");
  require(p.k >= 1, "privacy.k must be at least 1");
  require(p.beta > 0.0 && p.beta <= 1.0, "privacy.beta must lie in (0, 1]");
  require(p.sigma_G.has_value() == p.sigma_g.has_value(), "sigma_G and sigma_g must be given together");
  if (p.sigma_G) {
    require(*p.sigma_G >= 0.0 && *p.sigma_g >= 0.0, "noise multipliers must be nonnegative");
    require(p.epsilons.empty(), "give either privacy.epsilons or explicit sigmas, not both");
  }
  if (p.preprocess) {
    require(p.sigma_p > 0.0, "pre-processing needs sigma_p > 0");
    require(p.k != kUnlimited, "pre-processing needs a finite k");
  }
  if (c.init.mode == "power_iteration") {
    require(c.init.T >= 1 && c.init.s >= 1 && c.init.nu >= 1.0 && c.init.sigma > 0.0,
            "power iteration needs T, s, nu >= 1 and sigma > 0");
  } else {
    require(c.init.mode == "random", "init.mode must be random or power_iteration");
  }
  for (auto k : c.recall_k) require(k >= 1, "recall k must be at least 1");
  require(!c.seeds.empty(), "at least one seed is required");
  require(c.workers >= 1, "workers must be at least 1");
  return c;
}

/// Applies "a.b.c=value" to the raw JSON. The value is parsed as JSON when
/// possible and kept as a string otherwise.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, "override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    require(!part.empty(), "malformed override key: " + key);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open " + path);
  json j = json::parse(in, nullptr, false);
  require(!j.is_discarded(), "invalid JSON in " + path);
  return j;
}

inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  json j = read_json_file(path);
  for (const auto& o : overrides) apply_override(j, o);
  return parse_config(j);
}

/// Output directory: relative paths resolve against $DPALS_OUTPUT_ROOT when set.
inline std::filesystem::path output_directory(const ExperimentConfig& c) {
  std::filesystem::path dir(c.output.dir);
  if (dir.is_relative()) {
    if (const char* root = std::getenv("DPALS_OUTPUT_ROOT"); root && *root) dir = std::filesystem::path(root) / dir;
  }
  return dir;
}

/// Stable digest of the configuration (FNV-1a over the canonical dump).
inline std::string config_digest(const ExperimentConfig& c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : c.raw.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dpals::harness
