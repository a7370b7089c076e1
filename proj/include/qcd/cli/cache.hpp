#ifndef QCD_CLI_CACHE_HPP
#define QCD_CLI_CACHE_HPP

// Calibration cache: quantizer records, Q-CUSUM block quantizers and
// threshold records, stored as one JSON document. Nothing time-dependent is
// written, so the same configuration and seed give the same bytes.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>

#include "qcd/calibration.hpp"
#include "qcd/cli/config.hpp"
#include "qcd/detectors.hpp"
#include "qcd/quantizer.hpp"

namespace qcd::cli {

inline constexpr const char* kCacheFormat = "qcd-calibration/1";

/// JSON has no non-finite numbers; those are stored as strings.
inline Json num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline double to_double(const Json& v) {
  if (v.is_number()) return v.get<double>();
  const std::string s = v.get<std::string>();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  return std::numeric_limits<double>::quiet_NaN();
}

inline Json num_array(const std::vector<double>& xs) {
  Json a = Json::array();
  for (double x : xs) a.push_back(num(x));
  return a;
}

inline std::vector<double> to_doubles(const Json& a) {
  std::vector<double> out;
  for (const auto& x : a) out.push_back(to_double(x));
  return out;
}

/// Per-sensor quantizer record. The standard errors are present only when the
/// message LLRs came from Monte Carlo.
inline Json sensor_record(std::size_t k, double mu, double r, int d, const SensorQuantizer& q, std::size_t mc_reps,
                          std::uint64_t seed, const MessageLlrs* llrs = nullptr) {
  Json j = {{"k", k},
            {"mu", mu},
            {"r", r},
            {"d", d},
            {"delta_bar", q.delta_bar},
            {"delta_under", q.delta_under},
            {"eps_bar", num_array(q.eps_bar)},
            {"eps_under", num_array(q.eps_under)},
            {"lambda_bar", num_array(q.lambda_bar)},
            {"lambda_under", num_array(q.lambda_under)},
            {"mc_reps", mc_reps},
            {"seed", seed}};
  if (llrs && !llrs->lambda_bar_est.empty()) {
    std::vector<double> sb, su;
    for (const auto& e : llrs->lambda_bar_est) sb.push_back(e.std_error);
    for (const auto& e : llrs->lambda_under_est) su.push_back(e.std_error);
    j["lambda_bar_se"] = num_array(sb);
    j["lambda_under_se"] = num_array(su);
  }
  return j;
}

inline SensorQuantizer sensor_quantizer(const Json& j) {
  SensorQuantizer q{j.at("delta_bar").get<double>(), j.at("delta_under").get<double>(), to_doubles(j.at("eps_bar")),
                    to_doubles(j.at("eps_under")),   to_doubles(j.at("lambda_bar")),    to_doubles(j.at("lambda_under"))};
  q.validate();
  return q;
}

inline Json qcusum_sensor_record(std::size_t k, double mu, const QcusumSensor& s) {
  return {{"k", k},
          {"mu", mu},
          {"gammas", num_array(s.gammas)},
          {"block_llrs", num_array(s.block_llrs)},
          {"p0_mass", num_array(s.p0_mass)}};
}

inline QcusumSensor qcusum_sensor(const Json& j) {
  return {to_doubles(j.at("gammas")), to_doubles(j.at("block_llrs")), to_doubles(j.at("p0_mass"))};
}

inline Json estimate_fields(const std::string& name, const Estimate& e) {
  return {{name, num(e.mean)}, {name + "_se", num(e.std_error)}};
}

inline Json threshold_record(const std::string& label, const std::string& model_hash, const std::string& quantizer_hash,
                             const FalseAlarmTarget& target, std::uint64_t seed, std::size_t mc_reps, double tolerance,
                             const CalibrationRecord* rec, const std::string& error = {}) {
  Json j = {{"detector", label},
            {"model_hash", model_hash},
            {"quantizer_hash", quantizer_hash},
            {"gamma", target.gamma},
            {"measure", measure_name(target.measure)},
            {"seed", seed},
            {"mc_reps", mc_reps},
            {"tolerance", tolerance}};
  if (rec) {
    j["threshold"] = num(rec->threshold);
    j["threshold_low"] = num(rec->threshold_low);
    j["mix_weight"] = rec->mix_weight;
    j.update(estimate_fields("achieved_gamma", rec->achieved_gamma));
    j.update(estimate_fields("achieved_gamma_wald", rec->achieved_gamma_wald));
    j.update(estimate_fields("fa_period_steps", rec->fa_period_steps));
    j["steps_used"] = rec->steps_used;
  } else {
    j["error"] = error;
  }
  return j;
}

inline CalibrationRecord calibration_record(const Json& j) {
  CalibrationRecord r;
  r.detector = j.at("detector").get<std::string>();
  r.target.gamma = j.at("gamma").get<double>();
  r.target.measure = j.at("measure") == "kl" ? GammaMeasure::kl_units : GammaMeasure::physical_time;
  r.threshold = to_double(j.at("threshold"));
  r.threshold_low = to_double(j.at("threshold_low"));
  r.mix_weight = j.at("mix_weight").get<double>();
  auto est = [&](const std::string& name) {
    return Estimate{to_double(j.at(name)), to_double(j.at(name + "_se")), j.at("mc_reps").get<std::size_t>()};
  };
  r.achieved_gamma = est("achieved_gamma");
  r.achieved_gamma_wald = est("achieved_gamma_wald");
  r.fa_period_steps = est("fa_period_steps");
  r.mc_reps = j.at("mc_reps").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.steps_used = j.at("steps_used").get<std::uint64_t>();
  return r;
}

/// In-memory cache with lookups by the keys that determine each record.
class CalibrationStore {
 public:
  CalibrationStore() { clear(); }

  void clear() {
    doc_ = Json::object();
    doc_["format"] = kCacheFormat;
    doc_["quantizers"] = Json::array();
    doc_["qcusum"] = Json::array();
    doc_["thresholds"] = Json::array();
  }

  static CalibrationStore load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read calibration cache '" + path + "'");
    CalibrationStore s;
    try {
      s.doc_ = Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("calibration cache '" + path + "' is not valid JSON: " + e.what());
    }
    if (!s.doc_.is_object() || s.doc_.value("format", "") != kCacheFormat) {
      throw ConfigError("calibration cache '" + path + "' has an unknown format");
    }
    return s;
  }

  void save(const std::string& path) const {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write calibration cache '" + path + "'");
    out << doc_.dump(2) << "\n";
  }

  void set_provenance(const std::string& config_hash, std::uint64_t seed, const std::string& model_hash) {
    doc_["config_hash"] = config_hash;
    doc_["seed"] = seed;
    doc_["model_hash"] = model_hash;
  }

  /// Quantizer section entries are matched on the label and the hash of the
  /// settings that produced them.
  const Json* find_quantizer(const std::string& section, const std::string& label,
                             const std::string& settings_hash) const {
    if (!doc_.contains(section)) return nullptr;
    for (const auto& q : doc_[section]) {
      if (q.value("label", "") == label && q.value("settings_hash", "") == settings_hash) return &q;
    }
    return nullptr;
  }

  void put_quantizer(const std::string& section, Json entry) {
    Json& arr = doc_[section];
    for (auto& q : arr) {
      if (q["label"] == entry["label"]) {
        q = std::move(entry);
        return;
      }
    }
    arr.push_back(std::move(entry));
  }

  const Json* find_threshold(const std::string& label, const std::string& model_hash,
                             const std::string& quantizer_hash, const FalseAlarmTarget& target, std::uint64_t seed,
                             std::size_t mc_reps, double tolerance) const {
    if (!doc_.contains("thresholds")) return nullptr;
    for (const auto& t : doc_["thresholds"]) {
      if (t.value("detector", "") == label && t.value("model_hash", "") == model_hash &&
          t.value("quantizer_hash", "") == quantizer_hash && t.value("gamma", 0.0) == target.gamma &&
          t.value("measure", "") == measure_name(target.measure) && t.value("seed", std::uint64_t{0}) == seed &&
          t.value("mc_reps", std::size_t{0}) == mc_reps && t.value("tolerance", 0.0) == tolerance) {
        return &t;
      }
    }
    return nullptr;
  }

  void put_threshold(Json entry) {
    Json& arr = doc_["thresholds"];
    for (auto& t : arr) {
      if (t["detector"] == entry["detector"] && t["gamma"] == entry["gamma"] &&
          t["measure"] == entry["measure"]) {
        t = std::move(entry);
        return;
      }
    }
    arr.push_back(std::move(entry));
  }

  const Json& document() const { return doc_; }

 private:
  Json doc_;
};

}  // namespace qcd::cli

#endif  // QCD_CLI_CACHE_HPP
