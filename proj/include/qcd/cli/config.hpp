#ifndef QCD_CLI_CONFIG_HPP
#define QCD_CLI_CONFIG_HPP

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "qcd/calibration.hpp"
#include "qcd/cli/toml.hpp"
#include "qcd/model.hpp"

namespace qcd::cli {

using Json = nlohmann::ordered_json;

/// Bad or inconsistent configuration; maps to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Json float_array(std::initializer_list<double> xs) {
  Json a = Json::array();
  for (double x : xs) a.push_back(x);
  return a;
}

/// Defaults of one [detectors.<label>] table; period 0 and block_reps 0
/// resolve to the quantizer section's values.
inline Json detector_defaults() {
  return {{"kind", ""}, {"d", 1}, {"alphabet", 2}, {"period", 0.0}, {"block_reps", 0}};
}

/// Every accepted key with its default. Arrays are always arrays of floats.
inline Json default_config() {
  Json c = Json::object();
  c["run"] = {{"seed", 1}, {"jobs", 1}};
  c["model"] = {{"kind", "gaussian"}, {"sensors", 5},        {"mu", 1.0},
                {"mus", Json::array()}, {"dt", 1.0},      {"monitoring", "auto"}};
  c["quantizer"] = {{"period", 3.0},      {"exit_reps", 1000000}, {"delta_tolerance", 0.005},
                    {"delta_bar", 0.0},   {"delta_under", 0.0}};
  c["detectors"] = Json::object();
  auto det = [&](const char* label, Json fields) {
    Json d = detector_defaults();
    d.update(fields);
    c["detectors"][label] = d;
  };
  det("centralized", {{"kind", "centralized"}});
  det("dcusum_d1", {{"kind", "dcusum"}, {"d", 1}});
  det("dcusum_d2", {{"kind", "dcusum"}, {"d", 2}});
  det("qcusum_b2", {{"kind", "qcusum"}, {"alphabet", 2}});
  c["sweep"] = {{"gammas", float_array({1e2, 1e3, 1e4})},
                {"measure", "kl"},
                {"delay_reps", 10000},
                {"fa_reps", 1000},
                {"step_budget", 1000000000},
                {"tolerance", 0.02},
                {"gnuplot", false}};
  c["verify"] = {{"loss_deltas", float_array({1.0, 0.5, 0.25})},
                 {"loss_gammas", float_array({1e2})},
                 {"loss_fa_reps", 1000},
                 {"loss_delay_reps", 4000},
                 {"sprt_nus", float_array({4.0, 6.0})},
                 {"sprt_reps", 200000},
                 {"wald_reps", 2000},
                 {"lambda_reps", 1000000},
                 {"lambda_perturbation", 0.0},
                 {"threshold_bound", true},
                 {"loss_bound", true},
                 {"sprt", true}};
  return c;
}

namespace detail {

inline void check_type(const std::string& where, const Json& def, Json& v) {
  if (def.is_string()) {
    if (!v.is_string()) throw ConfigError(where + ": expected a string");
  } else if (def.is_boolean()) {
    if (!v.is_boolean()) throw ConfigError(where + ": expected true or false");
  } else if (def.is_number_integer()) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(where + ": expected a non-negative integer");
    }
  } else if (def.is_number_float()) {
    if (!v.is_number()) throw ConfigError(where + ": expected a number");
    v = v.get<double>();
  } else if (def.is_array()) {
    if (!v.is_array()) throw ConfigError(where + ": expected an array of numbers");
    for (auto& x : v) {
      if (!x.is_number()) throw ConfigError(where + ": expected an array of numbers");
      x = x.get<double>();
    }
  }
}

inline void merge_table(const std::string& section, Json& into, const Json& user) {
  if (!user.is_object()) throw ConfigError("[" + section + "] must be a table");
  for (auto it = user.begin(); it != user.end(); ++it) {
    if (!into.contains(it.key())) throw ConfigError("unknown key '" + it.key() + "' in [" + section + "]");
    Json v = it.value();
    check_type(section + "." + it.key(), into[it.key()], v);
    into[it.key()] = v;
  }
}

}  // namespace detail

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> jobs;
};

/// Defaults, then the user's tree, then command-line overrides, with derived
/// values written out explicitly so the result re-resolves to itself.
inline Json resolve(const Json& user, const Overrides& ov = {}) {
  Json c = default_config();
  if (!user.is_object()) throw ConfigError("configuration must be a table");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string& sec = it.key();
    if (!c.contains(sec)) throw ConfigError("unknown section [" + sec + "]");
    if (sec == "detectors") {
      if (!it.value().is_object() || it.value().empty()) throw ConfigError("[detectors] needs at least one detector");
      c["detectors"] = Json::object();
      for (auto d = it.value().begin(); d != it.value().end(); ++d) {
        Json det = detector_defaults();
        detail::merge_table("detectors." + d.key(), det, d.value());
        c["detectors"][d.key()] = det;
      }
    } else {
      detail::merge_table(sec, c[sec], it.value());
    }
  }
  if (ov.seed) c["run"]["seed"] = *ov.seed;
  if (ov.jobs) c["run"]["jobs"] = *ov.jobs;

  Json& m = c["model"];
  const std::string kind = m["kind"];
  if (kind != "gaussian" && kind != "brownian") throw ConfigError("model.kind must be \"gaussian\" or \"brownian\"");
  if (m["mus"].empty()) {
    if (m["sensors"].get<std::int64_t>() < 1) throw ConfigError("model.sensors must be at least 1");
    m["mus"] = Json::array();
    for (std::int64_t k = 0; k < m["sensors"].get<std::int64_t>(); ++k) m["mus"].push_back(m["mu"].get<double>());
  } else {
    const bool explicit_sensors = user.contains("model") && user["model"].contains("sensors");
    if (explicit_sensors && m["sensors"].get<std::size_t>() != m["mus"].size()) {
      throw ConfigError("model.sensors disagrees with the length of model.mus");
    }
    m["sensors"] = m["mus"].size();
  }
  std::string mon = m["monitoring"];
  if (mon == "auto") m["monitoring"] = kind == "brownian" ? "bridge" : "grid";
  else if (mon != "grid" && mon != "bridge") throw ConfigError("model.monitoring must be auto, grid or bridge");

  Json& q = c["quantizer"];
  for (auto d = c["detectors"].begin(); d != c["detectors"].end(); ++d) {
    Json& det = d.value();
    if (det["period"].get<double>() == 0.0) det["period"] = q["period"].get<double>();
    if (det["block_reps"].get<std::int64_t>() == 0) det["block_reps"] = q["exit_reps"].get<std::int64_t>();
  }
  return c;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Hash of the resolved configuration minus run.jobs, which never changes results.
inline std::string config_hash(const Json& resolved) {
  Json c = resolved;
  c["run"].erase("jobs");
  return hex(fnv1a(toml::serialize(c)));
}

inline std::string model_hash(const Json& resolved) {
  Json m = Json::object();
  m["model"] = resolved["model"];
  return hex(fnv1a(toml::serialize(m)));
}

inline Json load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read configuration file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return toml::parse(ss.str());
  } catch (const toml::ParseError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

struct DetectorSettings {
  std::string label;
  DetectorKind kind = DetectorKind::centralized;
  int d = 1;
  int alphabet = 2;
  double period = 1.0;
  std::size_t block_reps = 0;
};

struct QuantizerSettings {
  double period = 3.0;
  std::size_t exit_reps = 1'000'000;
  double delta_tolerance = 5e-3;
  double delta_bar = 0.0;
  double delta_under = 0.0;
};

struct SweepSettings {
  std::vector<double> gammas;
  GammaMeasure measure = GammaMeasure::kl_units;
  std::size_t delay_reps = 10'000;
  std::size_t fa_reps = 1000;
  std::uint64_t step_budget = 1'000'000'000;
  double tolerance = 0.02;
  bool gnuplot = false;
};

struct VerifySettings {
  std::vector<double> loss_deltas;
  std::vector<double> loss_gammas;
  std::size_t loss_fa_reps = 1000;
  std::size_t loss_delay_reps = 4000;
  std::vector<double> sprt_nus;
  std::size_t sprt_reps = 200'000;
  std::size_t wald_reps = 2000;
  std::size_t lambda_reps = 1'000'000;
  double lambda_perturbation = 0.0;
  bool threshold_bound = true;
  bool loss_bound = true;
  bool sprt = true;
};

/// Typed view of a resolved configuration.
struct Settings {
  Json resolved;
  std::string hash;
  std::string model_hash;
  std::uint64_t seed = 1;
  unsigned jobs = 1;
  SensorModel model;
  QuantizerSettings quantizer;
  std::vector<DetectorSettings> detectors;
  SweepSettings sweep;
  VerifySettings verify;
};

inline std::string measure_name(GammaMeasure m) { return m == GammaMeasure::kl_units ? "kl" : "time"; }

inline Settings interpret(const Json& resolved) {
  Settings s;
  s.resolved = resolved;
  s.hash = config_hash(resolved);
  s.model_hash = model_hash(resolved);
  s.seed = resolved["run"]["seed"].get<std::uint64_t>();
  s.jobs = resolved["run"]["jobs"].get<unsigned>();
  if (s.jobs < 1) throw ConfigError("run.jobs must be at least 1");

  const Json& m = resolved["model"];
  try {
    const auto mus = m["mus"].get<std::vector<double>>();
    const Monitoring mon = m["monitoring"] == "bridge" ? Monitoring::bridge : Monitoring::grid;
    if (m["kind"] == "gaussian") {
      if (mon == Monitoring::bridge) throw ConfigError("bridge monitoring needs the brownian model");
      if (m["dt"].get<double>() != 1.0) throw ConfigError("the gaussian model has unit steps; model.dt must be 1");
      s.model = SensorModel::gaussian(mus);
    } else {
      s.model = SensorModel::brownian(mus, m["dt"].get<double>(), mon);
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("[model]: ") + e.what());
  }

  const Json& q = resolved["quantizer"];
  s.quantizer.period = q["period"].get<double>();
  s.quantizer.exit_reps = q["exit_reps"].get<std::size_t>();
  s.quantizer.delta_tolerance = q["delta_tolerance"].get<double>();
  s.quantizer.delta_bar = q["delta_bar"].get<double>();
  s.quantizer.delta_under = q["delta_under"].get<double>();
  if (!(s.quantizer.period > 0.0)) throw ConfigError("quantizer.period must be positive");
  if (s.quantizer.exit_reps < 2) throw ConfigError("quantizer.exit_reps must be at least 2");
  if (s.quantizer.delta_bar < 0.0 || s.quantizer.delta_under < 0.0) {
    throw ConfigError("quantizer.delta_bar and delta_under must be non-negative");
  }

  for (auto it = resolved["detectors"].begin(); it != resolved["detectors"].end(); ++it) {
    const Json& d = it.value();
    DetectorSettings ds;
    ds.label = it.key();
    try {
      ds.kind = parse_detector(d["kind"].get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError("detectors." + ds.label + ": " + e.what());
    }
    ds.d = d["d"].get<int>();
    ds.alphabet = d["alphabet"].get<int>();
    ds.period = d["period"].get<double>();
    ds.block_reps = d["block_reps"].get<std::size_t>();
    if (ds.d < 1) throw ConfigError("detectors." + ds.label + ".d must be at least 1");
    if (ds.alphabet < 2) throw ConfigError("detectors." + ds.label + ".alphabet must be at least 2");
    if (!(ds.period > 0.0)) throw ConfigError("detectors." + ds.label + ".period must be positive");
    if (ds.kind == DetectorKind::qcusum && ds.period != std::floor(ds.period)) {
      throw ConfigError("detectors." + ds.label + ".period must be a whole number of steps for qcusum");
    }
    if (ds.kind == DetectorKind::dcusum && s.model.bridged() && ds.d != 1) {
      throw ConfigError("detectors." + ds.label + ": continuous paths exit on the boundary, so d must be 1");
    }
    s.detectors.push_back(ds);
  }

  const Json& w = resolved["sweep"];
  s.sweep.gammas = w["gammas"].get<std::vector<double>>();
  const std::string measure = w["measure"];
  if (measure == "kl") s.sweep.measure = GammaMeasure::kl_units;
  else if (measure == "time") s.sweep.measure = GammaMeasure::physical_time;
  else throw ConfigError("sweep.measure must be \"kl\" or \"time\"");
  s.sweep.delay_reps = w["delay_reps"].get<decltype(s.sweep.delay_reps)>();
  s.sweep.fa_reps = w["fa_reps"].get<decltype(s.sweep.fa_reps)>();
  s.sweep.step_budget = w["step_budget"].get<decltype(s.sweep.step_budget)>();
  s.sweep.tolerance = w["tolerance"].get<decltype(s.sweep.tolerance)>();
  s.sweep.gnuplot = w["gnuplot"].get<decltype(s.sweep.gnuplot)>();
  if (s.sweep.gammas.empty()) throw ConfigError("sweep.gammas is empty");
  for (std::size_t i = 0; i < s.sweep.gammas.size(); ++i) {
    if (!(s.sweep.gammas[i] > 0.0) || (i > 0 && !(s.sweep.gammas[i] > s.sweep.gammas[i - 1]))) {
      throw ConfigError("sweep.gammas must be positive and increasing");
    }
  }
  if (s.sweep.delay_reps < 2 || s.sweep.fa_reps < 2) throw ConfigError("sweep needs at least two replications");
  if (!(s.sweep.tolerance > 0.0)) throw ConfigError("sweep.tolerance must be positive");

  const Json& v = resolved["verify"];
  s.verify.loss_deltas = v["loss_deltas"].get<std::vector<double>>();
  s.verify.loss_gammas = v["loss_gammas"].get<std::vector<double>>();
  s.verify.loss_fa_reps = v["loss_fa_reps"].get<decltype(s.verify.loss_fa_reps)>();
  s.verify.loss_delay_reps = v["loss_delay_reps"].get<decltype(s.verify.loss_delay_reps)>();
  s.verify.sprt_nus = v["sprt_nus"].get<std::vector<double>>();
  s.verify.sprt_reps = v["sprt_reps"].get<decltype(s.verify.sprt_reps)>();
  s.verify.wald_reps = v["wald_reps"].get<decltype(s.verify.wald_reps)>();
  s.verify.lambda_reps = v["lambda_reps"].get<decltype(s.verify.lambda_reps)>();
  s.verify.lambda_perturbation = v["lambda_perturbation"].get<decltype(s.verify.lambda_perturbation)>();
  s.verify.threshold_bound = v["threshold_bound"].get<decltype(s.verify.threshold_bound)>();
  s.verify.loss_bound = v["loss_bound"].get<decltype(s.verify.loss_bound)>();
  s.verify.sprt = v["sprt"].get<decltype(s.verify.sprt)>();
  return s;
}

/// Resolves and interprets a configuration file; an empty path means defaults only.
inline Settings load_settings(const std::string& path, const Overrides& ov = {}) {
  const Json user = path.empty() ? Json::object() : load_file(path);
  return interpret(resolve(user, ov));
}

}  // namespace qcd::cli

#endif  // QCD_CLI_CONFIG_HPP
