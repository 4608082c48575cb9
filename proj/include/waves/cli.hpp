#pragma once

// Batch front end: subcommands lattice, surface, predict, simulate, verify.
// Settings come from an optional flat "key = value" file and from flags;
// flags win. Every report carries schema, config, config hash, seeds and
// the error budget used. Timestamps live under "metadata" only.

#include "waves/kacrice.hpp"
#include "waves/nodal.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace waves::cli {

inline constexpr int kSchema = 1;
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitNumeric = 3;

struct ConfigError : DomainError {
  using DomainError::DomainError;
};

// A raw setting and where it came from ("file:line" or "--flag").
struct Setting {
  std::string value;
  std::string where;
};
using Settings = std::map<std::string, Setting>;

inline const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> k{"m", "m_list", "surface", "n", "seed", "h", "c0", "tol", "out", "csv"};
  return k;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Flat config: one "key = value" per line, '#' starts a comment. Keys are
// the flag names (m, m_list, surface, n, ...) or surface.* entries.
inline Settings read_config(std::istream& is, const std::string& name) {
  Settings out;
  std::string line;
  for (int ln = 1; std::getline(is, line); ++ln) {
    const std::string where = name + ":" + std::to_string(ln);
    const auto hash = line.find('#');
    const std::string body = trim(line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(body.substr(0, eq)), value = trim(body.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    const bool surface_key = key.rfind("surface.", 0) == 0;
    if (!surface_key && std::find(known_keys().begin(), known_keys().end(), key) == known_keys().end())
      throw ConfigError(where + ": unknown key '" + key + "'");
    if (out.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
    out[key] = {value, where};
  }
  return out;
}

inline Settings read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(path + ": cannot open config file");
  return read_config(is, path);
}

struct ExperimentConfig {
  std::string command;
  std::vector<std::int64_t> m_list;
  SurfaceSpec surface = SphereSpec{};
  std::size_t n = 1000;
  std::uint64_t seed = 1;
  std::optional<double> h;
  double c0 = kDefaultC0;
  double tol = 1e-8;
  std::string out;
  bool csv = false;
};

namespace detail {

template <class T>
T parse_number(const Setting& s, const std::string& key) {
  T v{};
  const auto* b = s.value.data();
  const auto* e = b + s.value.size();
  const auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e) throw ConfigError(s.where + ": " + key + ": cannot parse '" + s.value + "'");
  return v;
}

inline double parse_positive(const Setting& s, const std::string& key) {
  const double v = parse_number<double>(s, key);
  if (!(v > 0) || !std::isfinite(v)) throw ConfigError(s.where + ": " + key + " must be positive");
  return v;
}

inline bool parse_bool(const Setting& s, const std::string& key) {
  if (s.value == "true" || s.value == "1" || s.value == "yes") return true;
  if (s.value == "false" || s.value == "0" || s.value == "no") return false;
  throw ConfigError(s.where + ": " + key + ": expected true or false");
}

inline bool needs_waves(const std::string& cmd) { return cmd != "surface" && cmd != "lattice"; }

}  // namespace detail

inline ExperimentConfig resolve(const std::string& command, const Settings& st) {
  ExperimentConfig c;
  c.command = command;
  auto get = [&st](const std::string& k) -> const Setting* {
    const auto it = st.find(k);
    return it == st.end() ? nullptr : &it->second;
  };
  if (const auto* s = get("m")) c.m_list.push_back(detail::parse_number<std::int64_t>(*s, "m"));
  if (const auto* s = get("m_list")) {
    if (!c.m_list.empty()) throw ConfigError(s->where + ": give either m or m_list, not both");
    std::stringstream ss(s->value);
    for (std::string tok; std::getline(ss, tok, ',');)
      c.m_list.push_back(detail::parse_number<std::int64_t>({trim(tok), s->where}, "m_list"));
  }
  for (const auto m : c.m_list) {
    const auto* s = get("m") ? get("m") : get("m_list");
    if (m <= 0) throw ConfigError(s->where + ": m must be positive");
    if (detail::needs_waves(command) && !is_representable(m))
      throw ConfigError(s->where + ": m = " + std::to_string(m) + " is not a sum of three squares");
  }
  if (c.m_list.empty() && command != "surface") throw ConfigError("--m: at least one m is required");

  std::map<std::string, std::string> surface_keys;
  for (const auto& [k, v] : st)
    if (k.rfind("surface.", 0) == 0) surface_keys[k] = v.value;
  try {
    if (const auto* s = get("surface")) {
      c.surface = parse_surface_spec(s->value);
    } else if (!surface_keys.empty()) {
      c.surface = surface_spec_from_config(surface_keys);
    }
  } catch (const Error& e) {
    const auto* s = get("surface");
    throw ConfigError((s ? s->where : st.at(surface_keys.begin()->first).where) + ": " + e.what());
  }

  if (const auto* s = get("n")) {
    c.n = detail::parse_number<std::size_t>(*s, "n");
    if (c.n < 2) throw ConfigError(s->where + ": n must be at least 2");
  }
  if (const auto* s = get("seed")) c.seed = detail::parse_number<std::uint64_t>(*s, "seed");
  if (const auto* s = get("h")) c.h = detail::parse_positive(*s, "h");
  if (const auto* s = get("c0")) c.c0 = detail::parse_positive(*s, "c0");
  if (const auto* s = get("tol")) c.tol = detail::parse_positive(*s, "tol");
  if (const auto* s = get("out")) c.out = s->value;
  if (const auto* s = get("csv")) c.csv = detail::parse_bool(*s, "csv");
  if (c.csv && c.out.empty()) throw ConfigError((get("csv")->where) + ": csv output needs an output directory (out)");
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j{{"command", c.command}, {"m_list", c.m_list}, {"surface", waves::to_json(c.surface)},
                   {"n", c.n},             {"seed", c.seed},     {"c0", c.c0},
                   {"tol", c.tol},         {"csv", c.csv}};
  j["h"] = c.h ? nlohmann::json(*c.h) : nlohmann::json(nullptr);
  return j;
}

// FNV-1a over the compact dump of the resolved config (output path excluded).
inline std::string config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 1469598103934665603ull;
  for (const unsigned char ch : to_json(c).dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// ---- commands -------------------------------------------------------------

struct CommandOutput {
  nlohmann::json results = nlohmann::json::array();
  nlohmann::json error_budget = nlohmann::json::object();
  nlohmann::json seeds = nullptr;
  std::vector<std::pair<std::string, std::string>> files;  // name, contents
};

inline CommandOutput run_lattice(const ExperimentConfig& c) {
  CommandOutput o;
  for (const auto m : c.m_list) {
    const auto set = enumerate(m);
    auto j = waves::to_json(set);
    j["representable"] = is_representable(m);
    if (!set.points.empty()) j["max_coplanar"] = max_coplanar(set);
    o.results.push_back(j);
  }
  o.error_budget = {{"arithmetic", "exact"}};
  return o;
}

inline CommandOutput run_surface(const ExperimentConfig& c) {
  CommandOutput o;
  const Surface s = make_surface(c.surface);
  const double I = integral_I(s, c.tol);
  const double a2 = s.area * s.area;
  nlohmann::json j{{"label", s.label},
                   {"area", s.area},
                   {"curvature_nonvanishing", s.curvature_nonvanishing},
                   {"I", I},
                   {"I_bounds", {a2 / 3, a2}},
                   {"c_bounds", {a2 / 9, a2 / 3}},
                   {"c_uniform", c_tau(s, UniformMeasure{})}};
  const Mat3 t = normal_tensor(s);
  j["normal_tensor"] = {{t(0, 0), t(0, 1), t(0, 2)}, {t(1, 0), t(1, 1), t(1, 2)}, {t(2, 0), t(2, 1), t(2, 2)}};
  nlohmann::json per_m = nlohmann::json::array();
  for (const auto m : c.m_list) {
    const auto set = enumerate(m);
    if (set.points.empty()) continue;
    const auto h = integral_H(s, set);
    per_m.push_back({{"m", m}, {"H", h.value}, {"H_prediction", h.prediction}, {"H_residual", h.residual}});
  }
  j["H"] = per_m;
  o.results.push_back(j);
  o.error_budget = {{"quadrature_tol", c.tol}};
  return o;
}

inline CommandOutput run_predict(const ExperimentConfig& c) {
  CommandOutput o;
  const Surface s = make_surface(c.surface);
  for (const auto m : c.m_list) {
    const auto set = enumerate(m);
    o.results.push_back({{"m", m},
                         {"N", set.points.size()},
                         {"mean", predict_mean(m, s)},
                         {"variance", waves::to_json(predict_variance(m, set, s, c.tol))}});
  }
  o.error_budget = {{"quadrature_tol", c.tol}};
  return o;
}

inline std::string lengths_csv(std::uint64_t first_seed, const std::vector<double>& lengths) {
  std::ostringstream os;
  write_lengths_csv(os, first_seed, lengths);
  return os.str();
}

inline CommandOutput run_simulate(const ExperimentConfig& c) {
  CommandOutput o;
  const Surface s = make_surface(c.surface);
  McOptions opt;
  nlohmann::json steps = nlohmann::json::array();
  for (const auto m : c.m_list) {
    const auto set = enumerate(m);
    const double h = c.h.value_or(max_mesh_step(m) / 4);
    const auto r = mc_experiment(set, s, c.n, c.seed, h, opt);
    auto j = waves::to_json(r);
    j["m"] = m;
    j["prediction"] = {{"mean", predict_mean(m, s)}};
    if (s.curvature_nonvanishing) j["prediction"]["variance"] = predict_variance(m, set, s, c.tol).leading;
    o.results.push_back(j);
    steps.push_back(h);
    if (c.csv) o.files.emplace_back("lengths_m" + std::to_string(m) + ".csv", lengths_csv(c.seed, r.lengths));
  }
  o.seeds = {{"base_seed", c.seed}, {"first", c.seed}, {"last", c.seed + c.n - 1}};
  o.error_budget = {{"mesh_h", steps},
                    {"refinement_check_seeds", opt.check_seeds},
                    {"refinement_tol", opt.check_tol},
                    {"quadrature_tol", c.tol}};
  return o;
}

struct Check {
  std::string name;
  double value = 0;
  double bound = 0;
  bool pass = false;
};

inline nlohmann::json to_json(const Check& k) {
  return {{"name", k.name}, {"value", k.value}, {"bound", k.bound}, {"pass", k.pass}};
}

// Pointwise checks on random surface pairs: matrix identities, the k2
// expansion against a calibrated constant, and factorization at r = 0.
inline std::vector<Check> randomwave_checks(const LatticeSet& set, const Surface& s, std::uint64_t seed,
                                            int pairs = 200) {
  const Spectrum sp = Spectrum::of(set);
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> U(0, 1);
  auto draw = [&]() {
    const auto& ch = s.charts[g() % s.charts.size()];
    return ch.jet(ch.u0 + (ch.u1 - ch.u0) * U(g), ch.v0 + (ch.v1 - ch.v0) * U(g));
  };
  const double M = gradient_variance(set.m);
  const ChartJet x0 = draw();
  const auto self = covariance_jet(sp, x0.p, x0.p);
  double diag = std::abs(self.r - 1) + self.D.norm() + (self.H + M * Mat3::Identity()).norm() / M;
  double sym = 0, xdiag = -1e300, worst_c = 0;
  int used = 0;
  for (int tries = 0; used < pairs && tries < 100 * pairs; ++tries) {
    const ChartJet a = draw(), b = draw();
    const auto jet = covariance_jet(sp, a.p, b.p);
    if (std::abs(jet.r) > 0.3) continue;
    const auto k = kacrice_matrices(jet, SurfaceChart::normal_of(a), SurfaceChart::normal_of(b), set.m);
    sym = std::max(sym, (k.theta_hat - k.theta_hat.transpose()).norm());
    xdiag = std::max({xdiag, k.X(0, 0), k.X(1, 1), k.X_p(0, 0), k.X_p(1, 1)});
    const double P = std::pow(jet.r, 4) + k.X.squaredNorm() + k.X_p.squaredNorm() + std::pow(k.Y.norm(), 4) +
                     std::pow(k.Y_p.norm(), 4);
    const double gap = std::abs(k2_exact(k, jet.r).value - k2_expanded(k, jet.r));
    worst_c = std::max(worst_c, gap / P);
    ++used;
  }
  KacRiceMatrices zero;
  zero.theta_hat = Mat4::Identity();
  const double k2_zero = k2_exact(zero, 0.0).value;
  return {{"covariance_diagonal", diag, 1e-10, diag <= 1e-10},
          {"theta_symmetry", sym, 1e-12, sym <= 1e-12},
          {"X_diagonal_max", xdiag, 1e-14, xdiag <= 1e-14},
          {"expansion_constant", worst_c, kExpansionConstant, worst_c <= kExpansionConstant},
          {"k2_at_zero", std::abs(k2_zero - 0.25), 1e-10, std::abs(k2_zero - 0.25) <= 1e-10}};
}

inline CommandOutput run_verify(const ExperimentConfig& c) {
  CommandOutput o;
  const Surface s = make_surface(c.surface);
  for (const auto m : c.m_list) {
    const auto set = enumerate(m);
    nlohmann::json checks = nlohmann::json::array();
    for (const auto& k : randomwave_checks(set, s, c.seed)) checks.push_back(to_json(k));
    const auto av = approx_variance(set, s, c.c0);
    const auto& r = av.moments;
    const double bound = kSingularConstant * r.R4;
    checks.push_back(to_json(Check{"singular_measure_vs_R4", r.singular_measure, bound, r.singular_measure <= bound}));
    auto rel = [](double res, double pred) { return std::abs(res) / std::abs(pred); };
    nlohmann::json residuals{{"R2", rel(r.res_R2, r.pred_R2)},
                             {"trX", rel(r.res_trX, r.pred_trX)},
                             {"trXp", rel(r.res_trXp, r.pred_trX)},
                             {"trYY", rel(r.res_trYY, r.pred_trYY)}};
    nlohmann::json j{{"m", m},
                     {"checks", checks},
                     {"relative_residuals", residuals},
                     {"approx_variance", waves::to_json(av)},
                     {"singular_partition",
                      {{"c0", r.c0}, {"singular_measure", r.singular_measure}, {"bound", bound}}}};
    if (s.curvature_nonvanishing) j["predicted_variance"] = waves::to_json(predict_variance(m, set, s, c.tol));
    o.results.push_back(j);
  }
  o.seeds = {{"pair_seed", c.seed}};
  o.error_budget = {{"c0", c.c0},
                    {"expansion_constant", kExpansionConstant},
                    {"singular_constant", kSingularConstant},
                    {"resolution_flag_fraction", 0.2},
                    {"quadrature_tol", c.tol}};
  return o;
}

struct Report {
  nlohmann::json json;
  std::vector<std::pair<std::string, std::string>> files;
};

inline Report run(const ExperimentConfig& c) {
  CommandOutput o;
  if (c.command == "lattice") o = run_lattice(c);
  else if (c.command == "surface") o = run_surface(c);
  else if (c.command == "predict") o = run_predict(c);
  else if (c.command == "simulate") o = run_simulate(c);
  else if (c.command == "verify") o = run_verify(c);
  else throw ConfigError("unknown command '" + c.command + "'");
  Report r;
  r.json = {{"schema", kSchema},
            {"command", c.command},
            {"config", to_json(c)},
            {"config_hash", config_hash(c)},
            {"seeds", o.seeds},
            {"error_budget", o.error_budget},
            {"results", o.results},
            {"metadata", {{"timestamp", utc_timestamp()}, {"threads", thread_count()}}}};
  r.files = std::move(o.files);
  return r;
}

inline void write_outputs(const ExperimentConfig& c, const Report& r, std::ostream& out) {
  if (c.out.empty()) {
    out << r.json.dump(2) << '\n';
    return;
  }
  namespace fs = std::filesystem;
  const fs::path dir(c.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  auto put = [&](const std::string& name, const std::string& text) {
    std::ofstream os(dir / name);
    if (!os) throw ConfigError(c.out + ": output directory not writable");
    os << text;
    out << (dir / name).string() << '\n';
  };
  put(c.command + ".json", r.json.dump(2) + "\n");
  for (const auto& [name, text] : r.files) put(name, text);
}

// Full entry point; returns the process exit code.
inline int main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Nodal intersections of arithmetic random waves against surfaces"};
  app.require_subcommand(1);
  app.set_help_flag("--help", "print help");  // -h would clash with --h
  std::map<std::string, std::string> flags;
  std::string config_path;
  std::map<std::string, CLI::App*> subs;
  const std::map<std::string, std::string> about{
      {"lattice", "lattice point diagnostics for each m"},
      {"surface", "surface integrals (area, I, normal tensor, H)"},
      {"predict", "predicted mean and variance of the intersection length"},
      {"simulate", "Monte Carlo intersection lengths"},
      {"verify", "pointwise and integrated Kac-Rice checks"}};
  for (const auto& [name, text] : about) {
    auto* sub = app.add_subcommand(name, text);
    sub->set_help_flag("--help", "print help");
    sub->add_option("--config", config_path, "flat key = value settings file");
    for (const auto& k : known_keys()) {
      if (k == "csv") {
        sub->add_flag_function("--csv", [&flags](std::int64_t) { flags["csv"] = "true"; }, "write per-replica CSV");
        continue;
      }
      std::string flag = "--" + k;
      std::replace(flag.begin(), flag.end(), '_', '-');
      sub->add_option_function<std::string>(flag, [&flags, k](const std::string& v) { flags[k] = v; });
    }
    subs[name] = sub;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  std::string command;
  for (const auto& [name, sub] : subs)
    if (sub->parsed()) command = name;
  try {
    Settings st = config_path.empty() ? Settings{} : read_config_file(config_path);
    for (const auto& [k, v] : flags) {
      std::string flag = "--" + k;
      std::replace(flag.begin(), flag.end(), '_', '-');
      if (k == "m" || k == "m_list") st.erase(k == "m" ? "m_list" : "m");
      st[k] = {v, flag};
    }
    const ExperimentConfig cfg = resolve(command, st);
    write_outputs(cfg, run(cfg), out);
    return kExitOk;
  } catch (const ResolutionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const MatrixError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  }
}

}  // namespace waves::cli
