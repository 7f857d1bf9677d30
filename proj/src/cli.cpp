#include "rlqr/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <thread>

#include "rlqr/autodiff.hpp"
#include "rlqr/errors.hpp"
#include "rlqr/learning.hpp"
#include "rlqr/lmi_layers.hpp"
#include "rlqr/riccati.hpp"

namespace rlqr::cli {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

struct AcceptanceFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::vector<std::string> kCommands = {"solve", "bench", "imitate", "adp", "gradcheck"};
const std::map<std::string, std::string> kDescriptions = {
    {"solve", "Solve one nominal or robust layer"},
    {"bench", "Time batched layer solves over horizons"},
    {"imitate", "Imitation learning from a generated expert"},
    {"adp", "Policy optimization on the uncertain stochastic system"},
    {"gradcheck", "Compare implicit gradients with finite differences"}};

json defaults(const std::string& cmd) {
  if (cmd == "solve")
    return {{"command", "solve"},
            {"seed", 0},
            {"out", "runs/solve"},
            {"layer", "nominal"},
            {"a", json::array({json::array({1.0})})},
            {"b", json::array({json::array({1.0})})},
            {"q", json::array({json::array({1.0})})},
            {"r", json::array({json::array({1.0})})},
            {"sigma", 0.1},
            {"d", nullptr},
            {"d_scale", 1e6},
            {"epsilon", 1e-9},
            {"tol", 1e-8},
            {"max_iter", 200}};
  if (cmd == "bench")
    return {{"command", "bench"},
            {"seed", 0},
            {"out", "runs/bench"},
            {"horizons", json::array({10, 50, 100})},
            {"batch", 128},
            {"repetitions", 3},
            {"n", 3},
            {"m", 3},
            {"sigma", 0.1},
            {"d_min", 10.0},
            {"d_max", 30.0},
            {"methods", json::array({"finite_horizon", "nominal_lmi", "robust_lmi"})},
            {"threads", 1}};
  if (cmd == "imitate")
    return {{"command", "imitate"},
            {"seed", 0},
            {"out", "runs/imitate"},
            {"scenario", 1},
            {"layer", "robust"},
            {"n", 3},
            {"m", 3},
            {"sigma", 0.1},
            {"d_min", 1.5},
            {"d_max", 4.0},
            {"diag_uncertainty", true},
            {"n_demos", 64},
            {"horizon", 20},
            {"iterations", 200},
            {"minibatch", 16},
            {"states_only", false},
            {"d_init", 5.0},
            {"lr", 0.01},
            {"momentum", 0.5},
            {"decay", 0.99},
            {"opt_eps", 1e-8},
            {"validate_every", 1},
            {"val_horizon", 50},
            {"val_rollouts", 32},
            {"val_models", 100},
            {"val_x0_scale", 1.0},
            {"cap", 1e6},
            {"threads", 1}};
  if (cmd == "adp")
    return {{"command", "adp"},
            {"seed", 0},
            {"out", "runs/adp"},
            {"layer", "robust"},
            {"n", 3},
            {"m", 3},
            {"sigma", 0.1},
            {"d_min", 1.5},
            {"d_max", 4.0},
            {"horizon", 20},
            {"batch", 64},
            {"iterations", 200},
            {"lr", AdpConfig{}.optimizer.lr},
            {"momentum", 0.5},
            {"decay", 0.99},
            {"opt_eps", 1e-8},
            {"adam_lr", 1e-4},
            {"cap", 1e6},
            {"eval_rollouts", 256},
            {"threads", 1}};
  if (cmd == "gradcheck")
    return {{"command", "gradcheck"},
            {"seed", 0},
            {"out", "runs/gradcheck"},
            {"instances", 20},
            {"n", 3},
            {"m", 3},
            {"sigma", 0.5},
            {"threshold", 1e-3},
            {"degenerate", false},
            {"fd_rel_step", 1e-5},
            {"fd_min_step", 1e-7},
            {"threads", 1}};
  throw InputError("unknown command '" + cmd + "'");
}

// ---------------------------------------------------------------------------
// Config resolution

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

// Parses a textual override according to the default's JSON type.
json parse_value(const std::string& key, const std::string& text, const json& like) {
  try {
    if (like.is_boolean()) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw InputError("expected true or false");
    }
    if (like.is_number_integer()) {
      std::size_t pos = 0;
      const long long v = std::stoll(text, &pos);
      if (pos != text.size()) throw InputError("expected an integer");
      return v;
    }
    if (like.is_number_float()) {
      std::size_t pos = 0;
      const double v = std::stod(text, &pos);
      if (pos != text.size()) throw InputError("expected a number");
      return v;
    }
    if (like.is_string()) return text;
    return json::parse(text);
  } catch (const InputError& e) {
    throw InputError("bad value '" + text + "' for " + key + ": " + e.what());
  } catch (const std::exception&) {
    throw InputError("bad value '" + text + "' for " + key);
  }
}

bool same_kind(const json& value, const json& like) {
  if (like.is_null()) return true;
  if (like.is_number_float()) return value.is_number();
  if (like.is_number_integer()) return value.is_number_integer();
  if (like.is_boolean()) return value.is_boolean();
  if (like.is_string()) return value.is_string();
  if (like.is_array()) return value.is_array() || value.is_number();
  return true;
}

json resolve(const std::string& cmd, const std::optional<std::string>& config_path,
             const std::vector<std::pair<std::string, std::string>>& flags) {
  json cfg = defaults(cmd);
  if (config_path) {
    std::ifstream in(*config_path);
    if (!in) throw InputError("cannot read config file " + *config_path);
    json file;
    try {
      file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw InputError("malformed config " + *config_path + ": " + e.what());
    }
    if (!file.is_object()) throw InputError("config must be a JSON object");
    for (const auto& [key, value] : file.items()) {
      if (!cfg.contains(key)) throw InputError("unknown config key '" + key + "' for " + cmd);
      if (key == "command" && value != cmd)
        throw InputError("config was written for '" + value.dump() + "', not " + cmd);
      if (!same_kind(value, cfg[key])) throw InputError("config key '" + key + "' has the wrong type");
      cfg[key] = value;
    }
  }
  const json base = defaults(cmd);
  for (const auto& [key, like] : base.items()) {
    if (key == "command") continue;
    if (const char* env = std::getenv(("RLQR_" + upper(key)).c_str()))
      cfg[key] = parse_value("RLQR_" + upper(key), env, like);
  }
  for (const auto& [key, text] : flags) {
    if (!base.contains(key)) throw InputError("--" + key + " does not apply to " + cmd);
    cfg[key] = parse_value(key, text, base[key]);
  }
  return cfg;
}

template <class T>
T get(const json& cfg, const std::string& key) {
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception&) {
    throw InputError("config key '" + key + "' has the wrong type");
  }
}

int get_int(const json& cfg, const std::string& key, int lo, int hi = 1 << 30) {
  const auto v = get<long long>(cfg, key);
  if (v < lo || v > hi)
    throw InputError(key + " must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return static_cast<int>(v);
}

double get_pos(const json& cfg, const std::string& key, bool allow_zero = false) {
  const double v = get<double>(cfg, key);
  if (!std::isfinite(v) || v < 0.0 || (!allow_zero && v == 0.0))
    throw InputError(key + (allow_zero ? " must be >= 0" : " must be > 0"));
  return v;
}

std::uint64_t get_seed(const json& cfg) {
  const auto v = get<long long>(cfg, "seed");
  if (v < 0) throw InputError("seed must be >= 0");
  return static_cast<std::uint64_t>(v);
}

MatrixXd get_matrix(const json& cfg, const std::string& key) {
  const json& v = cfg.at(key);
  if (v.is_number()) return MatrixXd::Constant(1, 1, v.get<double>());
  if (!v.is_array() || v.empty() || !v[0].is_array() || v[0].empty())
    throw InputError(key + " must be a non-empty array of rows");
  const auto rows = static_cast<int>(v.size()), cols = static_cast<int>(v[0].size());
  MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    if (!v[i].is_array() || static_cast<int>(v[i].size()) != cols)
      throw InputError(key + " has ragged rows");
    for (int j = 0; j < cols; ++j) {
      if (!v[i][j].is_number()) throw InputError(key + " entries must be numbers");
      m(i, j) = v[i][j].get<double>();
    }
  }
  return m;
}

json to_json(const MatrixXd& m) {
  json rows = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

json environment(int threads) {
  return {{"compiler", __VERSION__},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                        "." + std::to_string(EIGEN_MINOR_VERSION)},
          {"threads", threads}};
}

// ---------------------------------------------------------------------------
// Output

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

struct RunDir {
  fs::path path;

  explicit RunDir(const std::string& dir) : path(dir) {
    std::error_code ec;
    fs::create_directories(path, ec);
    if (ec) throw InputError("cannot create output directory " + dir + ": " + ec.message());
  }
  void write(const std::string& name, const std::string& text) const {
    std::ofstream out(path / name);
    if (!out) throw InputError("cannot write " + (path / name).string());
    out << text;
  }
  void write_json(const std::string& name, const json& j) const { write(name, j.dump(2) + "\n"); }
  void write_common(const json& cfg) const {
    write_json("config.json", cfg);
    write("seed.txt", std::to_string(get<long long>(cfg, "seed")) + "\n");
  }
};

std::string history_csv(const std::vector<IterationRecord>& history) {
  std::ostringstream os;
  os << "iteration,imitation_loss,model_loss,validation_cost,wall_time_s,gradient_path,train_cost,event\n";
  for (const auto& r : history)
    os << r.iteration << ',' << fmt(r.imitation_loss) << ',' << fmt(r.model_loss) << ','
       << fmt(r.validation_cost) << ',' << fmt(r.wall_time_s) << ',' << to_string(r.gradient_path)
       << ',' << fmt(r.train_cost) << ',' << csv_field(r.event) << '\n';
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <class F>
void parallel_for(int count, int threads, F&& body) {
  threads = std::max(1, std::min(threads, count));
  if (threads == 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mu;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

MatrixXd random_stable(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  MatrixXd a(n, n);
  for (int i = 0; i < a.size(); ++i) a(i) = g(rng);
  const double rho = spectral_radius(a);
  if (rho > 0.9) a *= 0.9 / rho;
  return a;
}

MatrixXd random_gaussian(int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  MatrixXd m(r, c);
  for (int i = 0; i < m.size(); ++i) m(i) = g(rng);
  return m;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_solve(const json& cfg) {
  const std::string layer = get<std::string>(cfg, "layer");
  if (layer != "nominal" && layer != "robust") throw InputError("solve --layer must be nominal or robust");
  const MatrixXd a = get_matrix(cfg, "a"), b = get_matrix(cfg, "b");
  const MatrixXd q = get_matrix(cfg, "q"), r = get_matrix(cfg, "r");
  const double sigma = get_pos(cfg, "sigma", true);
  sdp::SolveOptions so;
  so.tol = get_pos(cfg, "tol");
  so.max_iter = get_int(cfg, "max_iter", 1);
  const LinearSystem sys(a, b, q, r, sigma);
  const int n = sys.n(), m = sys.m();
  MatrixXd d;
  if (layer == "robust") {
    d = cfg.at("d").is_null() ? MatrixXd(get_pos(cfg, "d_scale") * MatrixXd::Identity(n + m, n + m))
                              : get_matrix(cfg, "d");
  }
  const double eps = get_pos(cfg, "epsilon", true);

  json sol_json = {{"layer", layer}};
  std::optional<MatrixXd> k;
  sdp::SdpSolution sol;
  if (layer == "nominal") {
    const auto enc = build_nominal_lmi(sys, false);
    sol = sdp::solve(enc.problem, so);
    sol_json["status"] = to_string(sol.status);
    if (sol.optimal()) {
      const AreSolution p = recover_p(enc, sol, sys);
      k = p.k;
      sol_json["p"] = to_json(p.p);
      sol_json["are_residual"] = p.residual;
    }
  } else {
    const UncertaintyEllipsoid unc(d, a, b);
    const auto enc = build_robust_sdp(sys, unc, {eps, true, false});
    sol = sdp::solve(enc.problem, so);
    sol_json["status"] = to_string(sol.status);
    if (sol.optimal()) {
      k = recover_gain(enc, sol, sys.nominal_model()).k;
      sol_json["worst_case_cost"] = worst_case_cost(enc, sol, sys);
      sol_json["lambda"] = enc.lambda(sol.primal);
    }
  }
  sol_json["objective"] = sol.primal_objective;
  sol_json["primal_residual"] = sol.primal_residual;
  sol_json["dual_residual"] = sol.dual_residual;
  sol_json["duality_gap"] = sol.duality_gap;
  sol_json["iterations"] = sol.iterations;
  if (!k) throw SolverError("SDP solve ended with status " + to_string(sol.status), sol.primal_residual);
  sol_json["k"] = to_json(*k);
  sol_json["spectral_radius"] = spectral_radius(a + b * *k);

  const RunDir dir(get<std::string>(cfg, "out"));
  dir.write_common(cfg);
  dir.write_json("solution.json", sol_json);
  dir.write_json("summary.json", {{"command", "solve"}, {"solution", sol_json}, {"environment", environment(1)}});
  std::ostringstream csv;
  csv << "row,col,k\n";
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < m; ++i) csv << i << ',' << j << ',' << fmt((*k)(i, j)) << '\n';
  dir.write("solution.csv", csv.str());

  std::cout << "status: " << to_string(sol.status) << "\n";
  std::cout << "K =\n" << std::setprecision(10) << *k << "\n";
  std::cout << "objective: " << sol.primal_objective << "\n";
  std::cout << "residuals: primal " << sol.primal_residual << ", dual " << sol.dual_residual
            << ", gap " << sol.duality_gap << "\n";
  return kOk;
}

int cmd_bench(const json& cfg) {
  const std::uint64_t seed = get_seed(cfg);
  const int batch = get_int(cfg, "batch", 1);
  const int reps = get_int(cfg, "repetitions", 1);
  const int n = get_int(cfg, "n", 1), m = get_int(cfg, "m", 1);
  const double sigma = get_pos(cfg, "sigma", true);
  const double d_min = get_pos(cfg, "d_min"), d_max = get_pos(cfg, "d_max");
  if (d_max < d_min) throw InputError("d_max must be >= d_min");
  const int threads = get_int(cfg, "threads", 1, 256);
  std::vector<int> horizons;
  for (const auto& h : cfg.at("horizons")) {
    if (!h.is_number_integer() || h.get<int>() < 1) throw InputError("horizons must be positive integers");
    horizons.push_back(h.get<int>());
  }
  if (horizons.empty()) throw InputError("horizons must not be empty");
  std::vector<std::string> methods;
  for (const auto& s : cfg.at("methods")) {
    const std::string name = s.is_string() ? s.get<std::string>() : "";
    if (name != "finite_horizon" && name != "nominal_lmi" && name != "robust_lmi")
      throw InputError("methods are finite_horizon, nominal_lmi, robust_lmi");
    methods.push_back(name);
  }
  const RunDir dir(get<std::string>(cfg, "out"));

  // Problem construction happens here, outside the timed region.
  struct Problem {
    LinearSystem sys;
    UncertaintyEllipsoid unc;
    VectorXd x0;
    std::vector<VectorXd> noise;
  };
  const int max_t = *std::max_element(horizons.begin(), horizons.end());
  std::vector<Problem> probs;
  for (int i = 0; i < batch; ++i) {
    auto rng = make_engine(seed, static_cast<std::uint64_t>(i));
    const MatrixXd a = random_stable(n, rng);
    const MatrixXd b = random_gaussian(n, m, rng);
    std::uniform_real_distribution<double> u(d_min, d_max);
    VectorXd dg(n + m);
    for (int j = 0; j < n + m; ++j) dg(j) = u(rng);
    probs.push_back({LinearSystem(a, b, MatrixXd::Identity(n, n), MatrixXd::Identity(m, m), sigma),
                     UncertaintyEllipsoid(dg.asDiagonal(), a, b), sample_gaussian(n, 1.0, rng),
                     sample_noise(n, max_t, sigma, derive_seed(seed, 7, i))});
  }
  std::vector<NominalEncoding> nominal;
  std::vector<RobustEncoding> robust;
  for (const auto& p : probs) {
    nominal.push_back(build_nominal_lmi(p.sys, false));
    robust.push_back(build_robust_sdp(p.sys, p.unc, {1e-9, true, false}));
  }

  std::atomic<int> failures{0};
  auto time_once = [&](const std::string& method, int horizon) {
    const auto t0 = std::chrono::steady_clock::now();
    parallel_for(batch, threads, [&](int i) {
      const Problem& p = probs[i];
      if (method == "finite_horizon") {
        const auto plan = solve_finite_horizon(p.sys.a_nom(), p.sys.b_nom(), p.sys.q(), p.sys.r(), horizon);
        const std::vector<VectorXd> noise(p.noise.begin(), p.noise.begin() + horizon);
        execute_plan(plan, p.sys.a_nom(), p.sys.b_nom(), {p.x0, std::nullopt, noise});
      } else {
        const auto& prob = method == "nominal_lmi" ? nominal[i].problem : robust[i].problem;
        if (!sdp::solve(prob).optimal()) ++failures;
      }
    });
    return seconds_since(t0);
  };

  std::ostringstream csv;
  csv << "method,horizon,batch,seconds\n";
  json table = json::object();
  for (const auto& method : methods) {
    json per = json::object();
    // Untimed warm-up, then repetitions round-robin over horizons so drift
    // does not favour one horizon.
    time_once(method, horizons.front());
    std::vector<std::vector<double>> samples(horizons.size());
    for (int r = 0; r < reps; ++r)
      for (std::size_t h = 0; h < horizons.size(); ++h) samples[h].push_back(time_once(method, horizons[h]));
    for (std::size_t h = 0; h < horizons.size(); ++h) {
      const int horizon = horizons[h];
      auto& times = samples[h];
      std::sort(times.begin(), times.end());
      const double med = times[times.size() / 2];
      csv << method << ',' << horizon << ',' << batch << ',' << fmt(med) << '\n';
      per[std::to_string(horizon)] = med;
      std::cout << method << " T=" << horizon << " batch=" << batch << ": " << med << " s\n";
    }
    table[method] = per;
  }

  json checks = json::object();
  const std::string lo = std::to_string(*std::min_element(horizons.begin(), horizons.end()));
  const std::string hi = std::to_string(max_t);
  for (const auto& method : methods) {
    double tmin = 1e300, tmax = 0.0;
    for (const auto& [h, t] : table[method].items()) {
      tmin = std::min(tmin, t.get<double>());
      tmax = std::max(tmax, t.get<double>());
    }
    if (method == "finite_horizon")
      checks["finite_horizon_growth"] = table[method][hi].get<double>() / table[method][lo].get<double>();
    else
      checks[method + "_spread"] = (tmax - tmin) / tmin;
  }
  dir.write_common(cfg);
  dir.write("bench.csv", csv.str());
  dir.write_json("summary.json", {{"command", "bench"},
                                  {"seconds", table},
                                  {"checks", checks},
                                  {"lmi_solve_failures", failures.load()},
                                  {"environment", environment(threads)}});
  return kOk;
}

ExpertOptions expert_options(const json& cfg) {
  ExpertOptions eo;
  eo.d_min = get_pos(cfg, "d_min");
  eo.d_max = get_pos(cfg, "d_max");
  if (eo.d_max < eo.d_min) throw InputError("d_max must be >= d_min");
  if (cfg.contains("diag_uncertainty")) eo.diag_uncertainty = get<bool>(cfg, "diag_uncertainty");
  return eo;
}

RmspropConfig rmsprop_options(const json& cfg) {
  RmspropConfig r;
  r.lr = get_pos(cfg, "lr");
  r.momentum = get_pos(cfg, "momentum", true);
  r.decay = get_pos(cfg, "decay", true);
  r.eps = get_pos(cfg, "opt_eps");
  if (r.momentum >= 1.0 || r.decay >= 1.0) throw InputError("momentum and decay must be < 1");
  return r;
}

int cmd_imitate(const json& cfg) {
  ImitationConfig ic;
  ic.seed = get_seed(cfg);
  const Scenario scenario = parse_scenario(get_int(cfg, "scenario", 1, 2));
  const LayerKind layer = parse_layer(get<std::string>(cfg, "layer"));
  ic.n = get_int(cfg, "n", 1, 50);
  ic.m = get_int(cfg, "m", 1, 50);
  ic.sigma = get_pos(cfg, "sigma", true);
  ic.expert = expert_options(cfg);
  ic.n_demos = get_int(cfg, "n_demos", 1);
  ic.horizon = get_int(cfg, "horizon", 1);
  ic.iterations = get_int(cfg, "iterations", 1);
  ic.minibatch = get_int(cfg, "minibatch", 1);
  ic.states_only = get<bool>(cfg, "states_only");
  ic.d_init = get_pos(cfg, "d_init");
  ic.optimizer = rmsprop_options(cfg);
  ic.validate_every = get_int(cfg, "validate_every", 0);
  ic.validation.horizon = get_int(cfg, "val_horizon", 1);
  ic.validation.n_rollouts = get_int(cfg, "val_rollouts", 1);
  ic.validation.n_models = get_int(cfg, "val_models", 1);
  ic.validation.x0_scale = get_pos(cfg, "val_x0_scale", true);
  ic.validation.cap = get_pos(cfg, "cap");
  ic.grad.threads = get_int(cfg, "threads", 1, 256);
  const RunDir dir(get<std::string>(cfg, "out"));
  dir.write_common(cfg);

  const auto t0 = std::chrono::steady_clock::now();
  const ImitationRun run = train_imitation(scenario, layer, ic);
  const double total = seconds_since(t0);
  dir.write("history.csv", history_csv(run.state.history));

  const LayerParams truth = LayerParams::from(run.expert.sys, run.expert.unc);
  const auto& last = run.state.history.back();
  int events = 0;
  for (const auto& r : run.state.history) events += !r.event.empty();
  const json summary = {
      {"command", "imitate"},
      {"scenario", get<long long>(cfg, "scenario")},
      {"layer", to_string(layer)},
      {"iterations", run.state.iteration},
      {"final_imitation_loss", last.imitation_loss},
      {"final_model_loss", model_loss(run.state.params, truth, scenario)},
      {"validation_cost", run.final_validation.mean},
      {"validation_std", run.final_validation.stddev},
      {"validation_capped", run.final_validation.capped},
      {"expert_rejections", run.expert.rejections},
      {"events", events},
      {"gain", to_json(run.state.gain)},
      {"wall_time_total_s", total},
      {"environment", environment(ic.grad.threads)}};
  dir.write_json("summary.json", summary);
  std::cout << "imitate scenario " << to_string(scenario) << " layer " << to_string(layer) << ": validation "
            << run.final_validation.mean << " +- " << run.final_validation.stddev << ", imitation loss "
            << last.imitation_loss << ", " << total << " s\n";
  return kOk;
}

int cmd_adp(const json& cfg) {
  AdpConfig ac;
  ac.seed = get_seed(cfg);
  const AdpPolicy policy = parse_adp_policy(get<std::string>(cfg, "layer"));
  ac.n = get_int(cfg, "n", 1, 50);
  ac.m = get_int(cfg, "m", 1, 50);
  ac.sigma = get_pos(cfg, "sigma", true);
  ac.system = expert_options(cfg);
  ac.horizon = get_int(cfg, "horizon", 1);
  ac.batch = get_int(cfg, "batch", 1);
  ac.iterations = get_int(cfg, "iterations", 1);
  ac.optimizer = rmsprop_options(cfg);
  ac.adam.lr = get_pos(cfg, "adam_lr");
  ac.cap = get_pos(cfg, "cap");
  ac.eval_rollouts = get_int(cfg, "eval_rollouts", 1);
  ac.grad.threads = get_int(cfg, "threads", 1, 256);
  const RunDir dir(get<std::string>(cfg, "out"));
  dir.write_common(cfg);

  const auto t0 = std::chrono::steady_clock::now();
  const AdpRun run = train_adp(policy, ac);
  const double total = seconds_since(t0);
  dir.write("history.csv", history_csv(run.state.history));
  dir.write_json("summary.json", {{"command", "adp"},
                                  {"layer", to_string(policy)},
                                  {"iterations", run.state.iteration},
                                  {"final_cost", run.final_cost},
                                  {"diverged", run.diverged},
                                  {"gain", to_json(run.state.gain)},
                                  {"wall_time_total_s", total},
                                  {"environment", environment(ac.grad.threads)}});
  std::cout << "adp " << to_string(policy) << ": final cost " << run.final_cost
            << (run.diverged ? " (hit the divergence cap)" : "") << ", " << total << " s\n";
  return kOk;
}

double block_error(const MatrixXd& got, const MatrixXd& ref, double total) {
  return (got - ref).norm() / std::max(ref.norm(), 1e-6 * std::max(1.0, total));
}

int cmd_gradcheck(const json& cfg) {
  const std::uint64_t seed = get_seed(cfg);
  const int instances = get_int(cfg, "instances", 1);
  const int n = get_int(cfg, "n", 1, 20), m = get_int(cfg, "m", 1, 20);
  const double sigma = get_pos(cfg, "sigma");
  const double threshold = get_pos(cfg, "threshold");
  const bool degenerate = get<bool>(cfg, "degenerate");
  GradOptions go;
  go.fd_rel_step = get_pos(cfg, "fd_rel_step");
  go.fd_min_step = get_pos(cfg, "fd_min_step");
  go.threads = get_int(cfg, "threads", 1, 256);
  const RunDir dir(get<std::string>(cfg, "out"));
  dir.write_common(cfg);

  const std::vector<std::string> blocks = {"a", "b", "q", "r", "d", "sigma"};
  std::vector<double> worst(blocks.size(), 0.0);
  std::ostringstream csv;
  csv << "instance,path,a,b,q,r,d,sigma\n";
  int failed = 0, fallbacks = 0;
  const int total = instances + (degenerate ? 1 : 0);
  for (int i = 0; i < total; ++i) {
    const bool degen = i == instances;
    auto rng = make_engine(seed, static_cast<std::uint64_t>(i));
    const MatrixXd a = random_stable(n, rng);
    const MatrixXd b = random_gaussian(n, m, rng);
    const MatrixXd gq = random_gaussian(n, n, rng), gr = random_gaussian(m, m, rng);
    const MatrixXd q = gq * gq.transpose() / n + 0.5 * MatrixXd::Identity(n, n);
    const MatrixXd r = gr * gr.transpose() / m + 0.5 * MatrixXd::Identity(m, m);
    const MatrixXd gd = random_gaussian(n + m, n + m, rng);
    const MatrixXd d = 60.0 * (gd * gd.transpose() / (n + m) + MatrixXd::Identity(n + m, n + m));
    const LayerLossGrad loss{random_gaussian(m, n, rng), 0.3};
    const double inst_sigma = degen ? 0.0 : sigma;
    GradOptions opts = go;
    opts.robust.epsilon = degen ? 0.0 : 1e-9;

    const LinearSystem sys(a, b, q, r, inst_sigma);
    const UncertaintyEllipsoid unc(d, a, b);
    const auto enc = build_robust_sdp(sys, unc, {opts.robust.epsilon, true, true});
    const auto sol = solve_layer(enc.problem, opts.solve);
    const ParamGradient g = grad_robust_layer(loss, sys, unc, enc, sol, opts);
    fallbacks += g.path == GradPath::finite_diff;

    // Reference: central differences of full re-solves.
    const ParamLoss re_solve = [&](const LayerParams& p) -> std::optional<double> {
      const LinearSystem s = p.system();
      const auto e = build_robust_sdp(s, p.ellipsoid(), {opts.robust.epsilon, true, false});
      const auto so = solve_layer(e.problem, opts.solve);
      const MatrixXd k = recover_gain(e, so, s.nominal_model()).k;
      return loss.dl_dcost * worst_case_cost(e, so, s) + (loss.dl_dk.array() * k.array()).sum();
    };
    const ParamGradient fd = fd_oracle(re_solve, LayerParams::from(sys, unc), ParamMask::all(),
                                       go.fd_rel_step, go.fd_min_step, go.threads);
    const double scale = fd.flatten().norm();
    const std::vector<double> errs = {
        block_error(g.d_a_nom, fd.d_a_nom, scale), block_error(g.d_b_nom, fd.d_b_nom, scale),
        block_error(g.d_q, fd.d_q, scale),         block_error(g.d_r, fd.d_r, scale),
        block_error(g.d_d, fd.d_d, scale),
        block_error(MatrixXd::Constant(1, 1, g.d_sigma), MatrixXd::Constant(1, 1, fd.d_sigma), scale)};
    csv << i << ',' << to_string(g.path);
    bool bad = false;
    for (std::size_t j = 0; j < errs.size(); ++j) {
      worst[j] = std::max(worst[j], errs[j]);
      bad = bad || !(errs[j] < threshold);
      csv << ',' << fmt(errs[j]);
    }
    csv << '\n';
    if (bad) {
      ++failed;
      dir.write_json("failure_" + std::to_string(i) + ".json",
                     {{"instance", i},
                      {"seed", seed},
                      {"a", to_json(a)},
                      {"b", to_json(b)},
                      {"q", to_json(q)},
                      {"r", to_json(r)},
                      {"d", to_json(d)},
                      {"sigma", inst_sigma},
                      {"epsilon", opts.robust.epsilon},
                      {"dl_dk", to_json(loss.dl_dk)},
                      {"dl_dcost", loss.dl_dcost},
                      {"errors", errs}});
    }
    if (degen)
      std::cout << "degenerate instance (sigma = 0, no floor): path " << to_string(g.path)
                << (g.warnings.empty() ? "" : ", " + g.warnings.front()) << "\n";
  }
  json summary = {{"command", "gradcheck"}, {"instances", total}, {"threshold", threshold},
                  {"failed", failed},       {"fallbacks", fallbacks}};
  std::cout << "max relative error per block over " << total << " instances:\n";
  for (std::size_t j = 0; j < blocks.size(); ++j) {
    summary["max_rel_error"][blocks[j]] = worst[j];
    std::cout << "  " << blocks[j] << ": " << worst[j] << "\n";
  }
  summary["environment"] = environment(go.threads);
  dir.write("gradcheck.csv", csv.str());
  dir.write_json("summary.json", summary);
  if (failed > 0)
    throw AcceptanceFailure(std::to_string(failed) + " instance(s) above threshold " + fmt(threshold) +
                            "; see failure_*.json in " + dir.path.string());
  std::cout << "gradcheck passed\n";
  return kOk;
}

int dispatch(const std::string& cmd, const json& cfg) {
  if (cmd == "solve") return cmd_solve(cfg);
  if (cmd == "bench") return cmd_bench(cfg);
  if (cmd == "imitate") return cmd_imitate(cfg);
  if (cmd == "adp") return cmd_adp(cfg);
  return cmd_gradcheck(cfg);
}

void report(bool as_json, const std::string& kind, const std::string& msg, int code) {
  if (as_json)
    std::cout << json{{"error", {{"kind", kind}, {"message", msg}, {"exit_code", code}}}}.dump() << "\n";
  std::cerr << "rlqr: " << kind << ": " << msg << "\n";
}

}  // namespace

std::string default_config(const std::string& command) { return defaults(command).dump(2); }

int run(const std::vector<std::string>& args) {
  CLI::App app{"Differentiable robust LQR layers: solvers, benchmarks and experiments", "rlqr"};
  app.require_subcommand(1);
  bool error_json = false;
  app.add_flag("--error-json", error_json, "Print errors as JSON on stdout");

  struct Flags {
    std::optional<std::string> config;
    std::vector<std::pair<std::string, std::string>> values;
  };
  std::map<std::string, Flags> flags;
  std::map<std::string, std::map<std::string, std::string>> raw;
  std::map<std::string, std::vector<std::string>> sets;
  const std::vector<std::pair<std::string, std::string>> options = {
      {"seed", "seed"}, {"out", "out"}, {"layer", "layer"}, {"scenario", "scenario"},
      {"iters", "iterations"}, {"horizon", "horizon"}, {"instances", "instances"}};
  for (const auto& name : kCommands) {
    CLI::App* sub = app.add_subcommand(name, kDescriptions.at(name));
    sub->add_option_function<std::string>(
        "--config", [&flags, name](const std::string& p) { flags[name].config = p; }, "JSON config file");
    for (const auto& [flag, key] : options)
      sub->add_option("--" + flag, raw[name][key], "Override '" + key + "'");
    sub->add_option("--set", sets[name], "Override any config key: key=value");
    sub->add_flag("--error-json", error_json, "Print errors as JSON on stdout");
  }

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report(error_json, "input_error", e.what(), kInputError);
    return kInputError;
  }

  std::string cmd;
  for (const auto& name : kCommands)
    if (app.got_subcommand(name)) cmd = name;
  try {
    auto& f = flags[cmd];
    CLI::App* sub = app.get_subcommand(cmd);
    for (const auto& [flag, key] : options)
      if (sub->count("--" + flag) > 0) f.values.emplace_back(key, raw[cmd][key]);
    for (const auto& kv : sets[cmd]) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw InputError("--set expects key=value, got '" + kv + "'");
      f.values.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    }
    const json cfg = resolve(cmd, f.config, f.values);
    return dispatch(cmd, cfg);
  } catch (const AcceptanceFailure& e) {
    report(error_json, "acceptance_failure", e.what(), kAcceptanceFailure);
    return kAcceptanceFailure;
  } catch (const InputError& e) {
    report(error_json, "input_error", e.what(), kInputError);
    return kInputError;
  } catch (const SolverError& e) {
    report(error_json, "solver_error", e.what(), kSolverError);
    return kSolverError;
  } catch (const NumericalError& e) {
    report(error_json, "solver_error", e.what(), kSolverError);
    return kSolverError;
  } catch (const GradientError& e) {
    report(error_json, "solver_error", e.what(), kSolverError);
    return kSolverError;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace rlqr::cli
