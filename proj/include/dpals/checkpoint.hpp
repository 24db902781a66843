#pragma once

// JSON checkpoints of a private training run: enough to resume after the
// last completed item step and reproduce the uninterrupted run bit for bit.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpals/accountant.hpp"
#include "dpals/solver.hpp"

namespace dpals {

struct Checkpoint {
  std::size_t n = 0;
  std::size_t m = 0;
  std::uint64_t seed = 0;
  std::size_t iterations_completed = 0;
  std::string run_token;
  std::string config_digest;  // identifies the configuration that produced it
  FactorMatrix V;
  double offset = 0.0;
  double delta = kDefaultDelta;
  std::vector<LedgerEntry> ledger;
};

namespace detail {

// Doubles are stored by bit pattern so a reload is exact.
inline std::string double_bits(double x) {
  std::uint64_t u = 0;
  std::memcpy(&u, &x, sizeof u);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(u));
  return buf;
}

inline double bits_double(const std::string& s) {
  require(s.size() == 16, "malformed checkpoint number");
  const std::uint64_t u = std::stoull(s, nullptr, 16);
  double x = 0.0;
  std::memcpy(&x, &u, sizeof x);
  return x;
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const Checkpoint& c) {
  nlohmann::json j;
  j["format"] = "dpals-checkpoint-1";
  j["n"] = c.n;
  j["m"] = c.m;
  j["r"] = c.V.cols();
  j["seed"] = c.seed;
  j["iterations_completed"] = c.iterations_completed;
  j["run_token"] = c.run_token;
  j["config_digest"] = c.config_digest;
  j["offset"] = detail::double_bits(c.offset);
  j["delta"] = detail::double_bits(c.delta);
  std::vector<std::string> v;
  v.reserve(static_cast<std::size_t>(c.V.size()));
  for (Eigen::Index a = 0; a < c.V.rows(); ++a)
    for (Eigen::Index b = 0; b < c.V.cols(); ++b) v.push_back(detail::double_bits(c.V(a, b)));
  j["V"] = v;
  auto& ledger = j["ledger"] = nlohmann::json::array();
  for (const auto& e : c.ledger)
    ledger.push_back({{"label", e.label}, {"rho_sq", detail::double_bits(e.rho_sq)}, {"run_token", e.run_token}});
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  require(j.value("format", "") == "dpals-checkpoint-1", "not a checkpoint file");
  Checkpoint c;
  c.n = j.at("n").get<std::size_t>();
  c.m = j.at("m").get<std::size_t>();
  const auto r = j.at("r").get<Eigen::Index>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.iterations_completed = j.at("iterations_completed").get<std::size_t>();
  c.run_token = j.at("run_token").get<std::string>();
  c.config_digest = j.at("config_digest").get<std::string>();
  c.offset = detail::bits_double(j.at("offset").get<std::string>());
  c.delta = detail::bits_double(j.at("delta").get<std::string>());
  const auto& v = j.at("V");
  require(v.size() == c.m * static_cast<std::size_t>(r), "checkpoint V has the wrong size");
  c.V.resize(static_cast<Eigen::Index>(c.m), r);
  std::size_t p = 0;
  for (Eigen::Index a = 0; a < c.V.rows(); ++a)
    for (Eigen::Index b = 0; b < r; ++b) c.V(a, b) = detail::bits_double(v[p++].get<std::string>());
  for (const auto& e : j.at("ledger"))
    c.ledger.push_back({e.at("label").get<std::string>(), detail::bits_double(e.at("rho_sq").get<std::string>()),
                        e.at("run_token").get<std::string>()});
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    require(static_cast<bool>(out), "cannot write checkpoint " + path);
    out << checkpoint_to_json(c).dump();
  }
  require(std::rename(tmp.c_str(), path.c_str()) == 0, "cannot write checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open checkpoint " + path);
  return checkpoint_from_json(nlohmann::json::parse(in));
}

inline RdpLedger ledger_from_entries(const std::vector<LedgerEntry>& entries, double delta) {
  RdpLedger ledger(delta);
  for (const auto& e : entries) ledger.append(e.label, e.rho_sq, e.run_token);
  return ledger;
}

}  // namespace dpals
