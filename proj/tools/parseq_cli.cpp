// parseq: sampling, inversion, residual traces, W2 evaluation and timing
// for the fixed-point view of DDIM/DDPM chains.
//
// Exit codes: 0 ok, 2 usage, 3 numeric divergence, 4 I/O or parse error.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "parseq/parseq.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace parseq;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit : int { kOk = 0, kUsage = 2, kDiverged = 3, kIo = 4 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) { return std::chrono::duration<double, std::milli>(Clock::now() - t0).count(); }

// ---------------------------------------------------------------- options

struct ChainOpts {
  int T = 1000;
  int S = -1;
  std::string subseq = "linear";
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double eta = 0.0;
  std::string predictor = "zero";
  int dim = 2;
  std::uint64_t seed = 0;
  int threads = static_cast<int>(default_thread_count());
  CLI::Option* subseq_opt = nullptr;
  CLI::Option* S_opt = nullptr;
};

void add_chain_options(CLI::App* app, ChainOpts& o) {
  app->add_option("--T", o.T, "diffusion length")->check(CLI::PositiveNumber);
  o.S_opt = app->add_option("--S", o.S, "subsequence length (default T)")->check(CLI::PositiveNumber);
  o.subseq_opt = app->add_option("--subseq", o.subseq, "linear|quadratic (requires --S)")->check(CLI::IsMember({"linear", "quadratic"}));
  app->add_option("--beta-start", o.beta_start);
  app->add_option("--beta-end", o.beta_end);
  app->add_option("--eta", o.eta, "0 = DDIM, 1 = DDPM")->check(CLI::NonNegativeNumber);
  app->add_option("--predictor", o.predictor, "zero | gaussian:<json> | mlp:<json>");
  app->add_option("--dim", o.dim, "state dimension for --predictor zero / generated files")->check(CLI::PositiveNumber);
  app->add_option("--seed", o.seed);
  app->add_option("--threads", o.threads, "worker threads (default $PARSEQ_THREADS or 1)")->check(CLI::PositiveNumber);
}

struct SolverOpts {
  int max_iters = -1;  // < 0: 15 for eta = 0, 50 otherwise
  double tol = 1e-3;
  int history = 5;
  double mixing = 1.0;
  double ridge = 1e-4;
  std::string init = "xT";
};

void add_solver_options(CLI::App* app, SolverOpts& o) {
  app->add_option("--max-iters", o.max_iters, "solver iteration cap (default 15, or 50 when eta > 0)");
  app->add_option("--tol", o.tol, "solver residual tolerance");
  app->add_option("--history", o.history, "Anderson history length");
  app->add_option("--mixing", o.mixing, "Anderson mixing beta");
  app->add_option("--ridge", o.ridge, "Anderson ridge lambda");
  app->add_option("--init", o.init, "xT|zero")->check(CLI::IsMember({"xT", "x_T", "zero"}));
}

SolverConfig solver_config(const SolverOpts& o, double eta, SolverMethod method) {
  SolverConfig c = SolverConfig::for_eta(eta, method);
  if (o.max_iters >= 0) c.max_iters = o.max_iters;
  c.tol = o.tol;
  c.history_m = o.history;
  c.mixing_beta = o.mixing;
  c.ridge_lambda = o.ridge;
  c.validate();
  return c;
}

json to_json(const SolverConfig& c) {
  return {{"method", std::string(to_string(c.method))}, {"max_iters", c.max_iters}, {"tol", c.tol},
          {"history_m", c.history_m}, {"mixing_beta", c.mixing_beta}, {"ridge_lambda", c.ridge_lambda}};
}

// Everything a chain needs, owned in one place.
struct ChainSetup {
  ScheduleConfig config;
  std::unique_ptr<DiffusionSchedule> schedule;
  TimestepSubsequence sub;
  std::unique_ptr<NoisePredictor> predictor;
  std::unique_ptr<WorkerPool> pool;
  std::unique_ptr<Chain> chain;
};

std::unique_ptr<NoisePredictor> make_predictor(const std::string& desc, const DiffusionSchedule& schedule, int dim) {
  if (desc == "zero") return std::make_unique<ZeroPredictor>(dim);
  const auto colon = desc.find(':');
  const std::string kind = desc.substr(0, colon);
  if (colon == std::string::npos || colon + 1 == desc.size()) throw UsageError("--predictor: expected zero, gaussian:<path> or mlp:<path>");
  const std::string path = desc.substr(colon + 1);
  if (kind == "gaussian") {
    const auto g = load_gaussian_target(path);
    return std::make_unique<GaussianOptimalPredictor>(g.mu, g.var, schedule);
  }
  if (kind == "mlp") return std::make_unique<MlpPredictor>(load_mlp(path, schedule.T()));
  throw UsageError("--predictor: unknown kind '" + kind + "'");
}

ChainSetup build_chain(const ChainOpts& o, std::optional<int> S_override = std::nullopt) {
  if (o.subseq_opt != nullptr && o.subseq_opt->count() > 0 && (o.S_opt == nullptr || o.S_opt->count() == 0) && !S_override) {
    throw UsageError("--subseq requires --S");
  }
  ChainSetup c;
  c.config.T = o.T;
  c.config.S = S_override.value_or(o.S < 0 ? o.T : o.S);
  c.config.kind = parse_subsequence_kind(o.subseq);
  c.config.beta_start = o.beta_start;
  c.config.beta_end = o.beta_end;
  c.config.eta = o.eta;
  if (c.config.S > c.config.T) throw UsageError("--S must not exceed --T");
  c.schedule = std::make_unique<DiffusionSchedule>(c.config.schedule());
  c.sub = c.config.subsequence();
  c.predictor = make_predictor(o.predictor, *c.schedule, o.dim);
  if (o.threads > 1) c.pool = std::make_unique<WorkerPool>(static_cast<std::size_t>(o.threads));
  c.chain = std::make_unique<Chain>(*c.schedule, c.sub, *c.predictor, c.pool.get());
  return c;
}

json chain_json(const ChainOpts& o, const ChainSetup& c) {
  json j = parseq::to_json(c.config);
  j["predictor"] = o.predictor;
  j["dim"] = c.chain->dim();
  j["subsequence"]["length"] = c.chain->length();
  j["seed"] = o.seed;
  return j;
}

// ---------------------------------------------------------------- files

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ParseError("cannot create directory '" + dir + "': " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write '" + path + "'");
  out << text;
  if (!out) throw ParseError("write to '" + path + "' failed");
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return s.str();
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  json config;
  std::uint64_t seed = 0;
  json outputs = json::object();
  json timings_ms = json::object();
  json extra = json::object();

  void write(const std::string& path) const {
    json j{{"command", command}, {"version", kVersion}, {"argv", argv}, {"config", config}, {"seed", seed},
           {"outputs", outputs}, {"timings_ms", timings_ms}};
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    write_text(path, j.dump(2) + "\n");
  }
};

NoiseStack load_noise(const std::string& path, const Chain& chain) {
  const StackFile f = read_stack_binary(path);
  if (f.states.rows() != chain.dim() || f.states.cols() != chain.length()) {
    throw SchemaError("noise file '" + path + "' is " + std::to_string(f.states.cols()) + "x" + std::to_string(f.states.rows()) +
                      ", chain needs " + std::to_string(chain.length()) + "x" + std::to_string(chain.dim()));
  }
  return NoiseStack{f.states};
}

// ---------------------------------------------------------------- sample

struct SampleOpts {
  ChainOpts chain;
  SolverOpts solver;
  std::string mode = "sequential";
  std::string out;
  int num_samples = 1;
  std::string noise_file;
  bool save_stack = false;
};

int cmd_sample(const SampleOpts& o, const std::vector<std::string>& argv) {
  const auto t0 = Clock::now();
  if (o.save_stack && o.num_samples != 1) throw UsageError("--save-stack needs --num-samples 1");
  ChainSetup setup = build_chain(o.chain);
  const Chain& chain = *setup.chain;
  const bool deq = o.mode != "sequential";
  const SolverConfig cfg = solver_config(o.solver, o.chain.eta, o.mode == "deq-picard" ? SolverMethod::picard : SolverMethod::anderson);
  std::optional<NoiseStack> file_noise;
  if (!o.noise_file.empty()) file_noise = load_noise(o.noise_file, chain);
  ensure_dir(o.out);

  Manifest m;
  m.command = "sample";
  m.argv = argv;
  m.seed = o.chain.seed;
  m.config = {{"chain", chain_json(o.chain, setup)}, {"mode", o.mode}, {"num_samples", o.num_samples}, {"noise_file", o.noise_file}};
  if (deq) {
    m.config["solver"] = to_json(cfg);
    m.config["init"] = std::string(to_string(parse_init_kind(o.solver.init)));
  }
  m.timings_ms["setup"] = ms_since(t0);

  const auto t1 = Clock::now();
  Eigen::MatrixXd x0(chain.dim(), o.num_samples);
  StateStack first_stack;
  std::ostringstream residual_csv;
  residual_csv << "sample,iter,residual_l2\n";
  json iters = json::array(), converged = json::array();
  for (int i = 0; i < o.num_samples; ++i) {
    const auto idx = static_cast<std::uint64_t>(i);
    const Vector xT = sample_xT(o.chain.seed, chain.dim(), idx);
    std::optional<NoiseStack> noise;
    if (file_noise) {
      noise = file_noise;
    } else if (o.chain.eta > 0.0) {
      noise = sample_noise(o.chain.seed, chain.dim(), chain.length(), idx);
    }
    const NoiseStack* np = noise ? &*noise : nullptr;
    StateStack stack;
    if (deq) {
      FixedPointResult r = solve_chain(chain, xT, np, cfg, parse_init_kind(o.solver.init));
      for (std::size_t k = 0; k < r.residuals.size(); ++k) residual_csv << i << ',' << (k + 1) << ',' << fmt(r.residuals[k]) << '\n';
      iters.push_back(r.iters);
      converged.push_back(r.converged);
      if (!r.converged) {
        std::cerr << "warning: sample " << i << " stopped at residual " << r.residuals.back() << " after " << r.iters << " iterations\n";
      }
      stack = std::move(r.stack);
    } else {
      stack = chain.rollout(xT, np);
    }
    x0.col(i) = stack.col(chain.length() - 1);
    if (i == 0) first_stack = std::move(stack);
  }
  m.timings_ms["sample"] = ms_since(t1);

  const auto t2 = Clock::now();
  const std::string x0_path = join(o.out, "x0.bin");
  write_stack_binary(x0_path, x0, o.chain.T, o.chain.eta);
  m.outputs["x0"] = x0_path;
  if (deq) {
    const std::string p = join(o.out, "residuals.csv");
    write_text(p, residual_csv.str());
    m.outputs["residuals"] = p;
    m.extra["solver_iters"] = iters;
    m.extra["solver_converged"] = converged;
  }
  if (o.save_stack) {
    const std::string p = join(o.out, "stack.bin");
    write_stack_binary(p, first_stack, o.chain.T, o.chain.eta);
    std::vector<int> ts;
    for (Eigen::Index k = 0; k < first_stack.cols(); ++k) ts.push_back(chain.timestep_of_column(k));
    std::ostringstream csv;
    write_stack_csv(csv, first_stack, ts);
    const std::string pc = join(o.out, "stack.csv");
    write_text(pc, csv.str());
    m.outputs["stack"] = p;
    m.outputs["stack_csv"] = pc;
  }
  m.timings_ms["write"] = ms_since(t2);
  m.timings_ms["total"] = ms_since(t0);
  m.write(join(o.out, "manifest.json"));
  return kOk;
}

// ---------------------------------------------------------------- invert

struct InvertOpts {
  ChainOpts chain;
  SolverOpts solver;
  std::string target;
  std::string method = "deq";
  std::string grad = "phantom";
  double tau = 0.1;
  int epochs = -1;  // 400 for DEQ, 1000 for the naive baseline
  double lr = 0.01;
  double stop_loss = 0.0;
  double adjoint_tol = 1e-6;
  std::string noise_file;
  bool no_warm_start = false;
  std::string loss = "squared";
  std::string out;
};

int cmd_invert(const InvertOpts& o, const std::vector<std::string>& argv) {
  const auto t0 = Clock::now();
  if (o.method == "naive" && o.chain.eta > 0.0) throw UsageError("--method naive is defined for the deterministic chain only (--eta 0)");
  if (o.method == "deq" && o.chain.eta > 0.0) throw UsageError("--method deq needs --eta 0; use deq-stochastic");
  if (o.method != "deq-stochastic" && !o.noise_file.empty()) throw UsageError("--noise-file applies to --method deq-stochastic");
  ChainSetup setup = build_chain(o.chain);
  const Chain& chain = *setup.chain;

  const StackFile tf = read_stack_binary(o.target);
  if (tf.states.cols() < 1) throw SchemaError("target file '" + o.target + "' holds no state");
  if (tf.states.rows() != chain.dim()) {
    throw SchemaError("target dimension " + std::to_string(tf.states.rows()) + " does not match predictor dimension " + std::to_string(chain.dim()));
  }
  const Vector target = tf.states.col(tf.states.cols() - 1);

  InversionConfig cfg;
  cfg.epochs = o.epochs > 0 ? o.epochs : (o.method == "naive" ? 1000 : 400);
  cfg.lr = o.lr;
  cfg.stop_loss = o.stop_loss;
  cfg.seed = o.chain.seed;
  cfg.warm_start = !o.no_warm_start;
  cfg.loss_kind = o.loss == "unsquared" ? LossKind::unsquared : LossKind::squared;
  cfg.gradient.kind = parse_gradient_kind(o.grad);
  cfg.gradient.tau = o.tau;
  cfg.gradient.adjoint_tol = o.adjoint_tol;
  cfg.solver = solver_config(o.solver, o.chain.eta, SolverMethod::anderson);
  cfg.validate();
  ensure_dir(o.out);

  std::optional<NoiseStack> noise;
  if (!o.noise_file.empty()) noise = load_noise(o.noise_file, chain);
  const double setup_ms = ms_since(t0);

  const auto t1 = Clock::now();
  InversionRun run;
  if (o.method == "naive") {
    run = invert_naive(target, cfg, chain);
  } else if (o.method == "deq") {
    run = invert_deq(target, cfg, chain);
  } else {
    run = invert_deq_stochastic(target, cfg, chain, noise ? &*noise : nullptr);
  }
  const double invert_ms = ms_since(t1);

  const auto t2 = Clock::now();
  json config = {{"chain", chain_json(o.chain, setup)},
                 {"method", o.method},
                 {"target", o.target},
                 {"epochs", cfg.epochs},
                 {"lr", cfg.lr},
                 {"stop_loss", cfg.stop_loss},
                 {"warm_start", cfg.warm_start},
                 {"loss", o.loss},
                 {"gradient", {{"mode", std::string(to_string(o.method == "naive" ? GradientKind::rollout_backprop : cfg.gradient.kind))},
                               {"tau", cfg.gradient.tau},
                               {"adjoint_tol", cfg.gradient.adjoint_tol}}}};
  if (o.method != "naive") config["solver"] = to_json(cfg.solver);

  const std::string xhat_path = join(o.out, "x_T_hat.bin");
  write_stack_binary(xhat_path, run.x_T_hat, o.chain.T, o.chain.eta);
  json run_json{{"config", config},
                {"loss_trace", run.loss_trace},
                {"best_loss", run.best_loss},
                {"epochs_run", run.epochs_run},
                {"reached_stop", run.reached_stop},
                {"x_T_hat_file", xhat_path}};
  if (!run.solver_iters.empty()) run_json["solver_iters"] = run.solver_iters;
  const std::string run_path = join(o.out, "run.json");
  write_text(run_path, run_json.dump(2) + "\n");
  if (run.noise.size() > 0) {
    const std::string p = join(o.out, "noise.bin");
    write_stack_binary(p, run.noise.eps, o.chain.T, o.chain.eta);
  }
  std::ostringstream csv;
  csv << "epoch,loss\n";
  for (std::size_t e = 0; e < run.loss_trace.size(); ++e) csv << (e + 1) << ',' << fmt(run.loss_trace[e]) << '\n';
  const std::string trace_path = join(o.out, "loss_trace.csv");
  write_text(trace_path, csv.str());

  Manifest m;
  m.command = "invert";
  m.argv = argv;
  m.seed = o.chain.seed;
  m.config = config;
  m.outputs = {{"run", run_path}, {"x_T_hat", xhat_path}, {"loss_trace", trace_path}};
  if (run.noise.size() > 0) m.outputs["noise"] = join(o.out, "noise.bin");
  m.timings_ms = {{"setup", setup_ms}, {"invert", invert_ms}, {"write", ms_since(t2)}, {"total", ms_since(t0)}};
  m.write(join(o.out, "manifest.json"));
  std::cout << "best_loss " << fmt(run.best_loss) << " epochs " << run.epochs_run << '\n';
  return kOk;
}

// ---------------------------------------------------------------- trace

struct TraceOpts {
  ChainOpts chain;
  SolverOpts solver;
  int runs = 1;
  std::string method = "anderson";
  std::string map = "diffusion";
  std::string out;
};

// x <- A x + b with A symmetric, spectrum in [-0.9, 0.9] and 0.9 attained.
FixedPointResult affine_trace(std::uint64_t seed, std::uint64_t run, Eigen::Index dim, const SolverConfig& cfg) {
  auto rng = rng_stream(seed, "affine", run);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(standard_normal(rng, dim, dim)).householderQ();
  std::uniform_real_distribution<double> unif(-0.9, 0.9);
  Vector lambda(dim);
  for (Eigen::Index i = 0; i < dim; ++i) lambda[i] = i == 0 ? 0.9 : unif(rng);
  const Eigen::MatrixXd a = q * lambda.asDiagonal() * q.transpose();
  const Vector b = standard_normal(rng, dim);
  auto map = [&](const Eigen::MatrixXd& x) -> Eigen::MatrixXd { return a * x + b; };
  return solve_fixed_point(map, Eigen::MatrixXd::Zero(dim, 1), cfg);
}

int cmd_trace(const TraceOpts& o, const std::vector<std::string>&) {
  if (o.runs < 1) throw UsageError("--runs must be >= 1");
  const SolverConfig cfg = solver_config(o.solver, o.chain.eta, parse_solver_method(o.method));
  std::vector<std::vector<double>> traces;
  if (o.map == "affine") {
    for (int i = 0; i < o.runs; ++i) traces.push_back(affine_trace(o.chain.seed, static_cast<std::uint64_t>(i), o.chain.dim, cfg).residuals);
  } else {
    ChainSetup setup = build_chain(o.chain);
    const Chain& chain = *setup.chain;
    for (int i = 0; i < o.runs; ++i) {
      const auto idx = static_cast<std::uint64_t>(i);
      const Vector xT = sample_xT(o.chain.seed, chain.dim(), idx);
      std::optional<NoiseStack> noise;
      if (o.chain.eta > 0.0) noise = sample_noise(o.chain.seed, chain.dim(), chain.length(), idx);
      traces.push_back(solve_chain(chain, xT, noise ? &*noise : nullptr, cfg, parse_init_kind(o.solver.init)).residuals);
    }
  }

  std::size_t rows = 0;
  for (const auto& t : traces) rows = std::max(rows, t.size());
  std::ostringstream csv;
  csv << "iter,residual_l2,residual_min,residual_max";
  for (int i = 0; i < o.runs; ++i) csv << ",run_" << i;
  csv << '\n';
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
    int n = 0;
    for (const auto& t : traces) {
      if (r < t.size()) {
        sum += t[r];
        lo = std::min(lo, t[r]);
        hi = std::max(hi, t[r]);
        ++n;
      }
    }
    // residual_l2 is the mean over runs still iterating at this row
    csv << (r + 1) << ',' << fmt(sum / n) << ',' << fmt(lo) << ',' << fmt(hi);
    for (const auto& t : traces) {
      csv << ',';
      if (r < t.size()) csv << fmt(t[r]);
    }
    csv << '\n';
  }
  if (o.out.empty()) {
    std::cout << csv.str();
  } else {
    write_text(o.out, csv.str());
  }
  return kOk;
}

// ---------------------------------------------------------------- bench

struct BenchOpts {
  ChainOpts chain;
  SolverOpts solver;
  std::vector<int> S_list{10, 25, 50, 100};
  std::vector<int> threads_list{1, 2, 8};
  std::vector<std::string> modes{"sequential", "deq-anderson"};
  int repeats = 3;
  std::string out;
};

int cmd_bench(const BenchOpts& o, const std::vector<std::string>&) {
  if (o.repeats < 1) throw UsageError("--repeats must be >= 1");
  std::ostringstream csv;
  csv << "mode,S,threads,wall_ms,iters\n";
  for (const auto& mode : o.modes) {
    if (mode != "sequential" && mode != "deq-anderson" && mode != "deq-picard") throw UsageError("bench: unknown mode '" + mode + "'");
    const SolverConfig cfg = solver_config(o.solver, o.chain.eta, mode == "deq-picard" ? SolverMethod::picard : SolverMethod::anderson);
    for (int S : o.S_list) {
      for (int threads : o.threads_list) {
        ChainOpts co = o.chain;
        co.threads = threads;
        ChainSetup setup = build_chain(co, S);
        const Chain& chain = *setup.chain;
        const Vector xT = sample_xT(o.chain.seed, chain.dim());
        std::optional<NoiseStack> noise;
        if (o.chain.eta > 0.0) noise = sample_noise(o.chain.seed, chain.dim(), chain.length());
        const NoiseStack* np = noise ? &*noise : nullptr;
        std::vector<double> times;
        int iters = 0;
        for (int r = 0; r < o.repeats; ++r) {
          const auto t0 = Clock::now();
          if (mode == "sequential") {
            chain.rollout(xT, np);
            iters = chain.length();  // serial steps
          } else {
            iters = solve_chain(chain, xT, np, cfg, parse_init_kind(o.solver.init)).iters;
          }
          times.push_back(ms_since(t0));
        }
        std::nth_element(times.begin(), times.begin() + static_cast<long>(times.size() / 2), times.end());
        csv << mode << ',' << chain.length() << ',' << threads << ',' << std::fixed << std::setprecision(4) << times[times.size() / 2]
            << std::defaultfloat << ',' << iters << '\n';
      }
    }
  }
  if (o.out.empty()) {
    std::cout << csv.str();
  } else {
    write_text(o.out, csv.str());
  }
  return kOk;
}

// ---------------------------------------------------------------- eval-w2

struct EvalOpts {
  std::string samples;
  std::string target;
  std::string out;
};

int cmd_eval(const EvalOpts& o, const std::vector<std::string>&) {
  if (o.target.rfind("gaussian:", 0) != 0) throw UsageError("--target must be gaussian:<path>");
  const auto g = load_gaussian_target(o.target.substr(9));
  const StackFile f = read_stack_binary(o.samples);
  if (f.states.cols() > 0 && f.states.rows() != g.mu.size()) {
    throw ShapeError("samples have dimension " + std::to_string(f.states.rows()) + ", target has " + std::to_string(g.mu.size()));
  }
  const MomentSummary m = sample_moments(f.states);
  const double w2 = gaussian_w2(m.mean, m.var_diag, g.mu, g.var);
  json j{{"moments", parseq::to_json(m)},
         {"target", {{"mu", detail::from_vector(g.mu)}, {"var", detail::from_vector(g.var)}}},
         {"w2", w2},
         {"target_sigma_norm", g.var.cwiseSqrt().norm()}};
  if (o.out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_text(o.out, j.dump(2) + "\n");
  }
  return kOk;
}

// ---------------------------------------------------------------- generators

struct InitMlpOpts {
  int dim = 2;
  std::vector<int> hidden{32, 32};
  int T = 1000;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_init_mlp(const InitMlpOpts& o, const std::vector<std::string>&) {
  save_mlp(MlpPredictor::random(o.dim, o.hidden, o.T, o.seed), o.out);
  return kOk;
}

struct InitGaussianOpts {
  int dim = 2;
  std::uint64_t seed = 0;
  std::string out;
};

// mu ~ N(0, I), var = |N(0, 1)| + 0.25
int cmd_init_gaussian(const InitGaussianOpts& o, const std::vector<std::string>&) {
  auto rng = rng_stream(o.seed, "gaussian-target");
  GaussianTarget g;
  g.mu = standard_normal(rng, o.dim);
  g.var = (standard_normal(rng, o.dim).array().abs() + 0.25).matrix();
  save_gaussian_target(g, o.out);
  return kOk;
}

// ---------------------------------------------------------------- dispatch

int run(std::vector<std::string> args);

struct RerunOpts {
  std::string manifest;
  std::string out;
};

int cmd_rerun(const RerunOpts& o) {
  const json j = detail::read_json_file(o.manifest);
  const auto& jargv = detail::require_field(j, "argv", "manifest '" + o.manifest + "'");
  std::vector<std::string> args;
  try {
    args = jargv.get<std::vector<std::string>>();
  } catch (const json::exception&) {
    throw ParseError("manifest '" + o.manifest + "': field 'argv' must be a list of strings");
  }
  if (args.empty() || args.front() == "rerun") throw ParseError("manifest '" + o.manifest + "': nothing to rerun");
  if (!o.out.empty()) {
    auto it = std::find(args.begin(), args.end(), "--out");
    if (it != args.end() && it + 1 != args.end()) {
      *(it + 1) = o.out;
    } else {
      args.push_back("--out");
      args.push_back(o.out);
    }
  }
  return run(args);
}

int run(std::vector<std::string> args) {
  CLI::App app{"Fixed-point (DEQ) sampling and inversion for DDIM/DDPM chains"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  SampleOpts so;
  auto* sample = app.add_subcommand("sample", "draw x_0 by sequential rollout or a fixed-point solve");
  add_chain_options(sample, so.chain);
  add_solver_options(sample, so.solver);
  sample->add_option("--mode", so.mode)->check(CLI::IsMember({"sequential", "deq-anderson", "deq-picard"}));
  sample->add_option("--out", so.out, "output directory")->required();
  sample->add_option("--num-samples", so.num_samples)->check(CLI::PositiveNumber);
  sample->add_option("--noise-file", so.noise_file, "binary stack of S noise vectors (used when eta > 0)");
  sample->add_flag("--save-stack", so.save_stack, "also write the full latent stack");

  InvertOpts io;
  auto* invert = app.add_subcommand("invert", "recover x_T for a target x_0");
  add_chain_options(invert, io.chain);
  add_solver_options(invert, io.solver);
  invert->add_option("--target", io.target, "binary stack file; its last row is the target")->required();
  invert->add_option("--method", io.method)->check(CLI::IsMember({"naive", "deq", "deq-stochastic"}));
  invert->add_option("--grad", io.grad)->check(CLI::IsMember({"phantom", "exact"}));
  invert->add_option("--tau", io.tau, "phantom damping");
  invert->add_option("--epochs", io.epochs, "default 400 (deq) / 1000 (naive)");
  invert->add_option("--lr", io.lr);
  invert->add_option("--stop-loss", io.stop_loss);
  invert->add_option("--adjoint-tol", io.adjoint_tol);
  invert->add_option("--noise-file", io.noise_file, "fixed noise stack for deq-stochastic");
  invert->add_flag("--no-warm-start", io.no_warm_start, "re-initialize every solve from x_T");
  invert->add_option("--loss", io.loss)->check(CLI::IsMember({"squared", "unsquared"}));
  invert->add_option("--out", io.out, "output directory")->required();

  TraceOpts to;
  auto* trace = app.add_subcommand("trace", "per-iteration solver residuals over several runs (CSV)");
  add_chain_options(trace, to.chain);
  add_solver_options(trace, to.solver);
  trace->add_option("--runs", to.runs);
  trace->add_option("--solver", to.method)->check(CLI::IsMember({"picard", "anderson"}));
  trace->add_option("--map", to.map)->check(CLI::IsMember({"diffusion", "affine"}));
  trace->add_option("--out", to.out, "CSV path (default stdout)");

  BenchOpts bo;
  auto* bench = app.add_subcommand("bench", "wall-clock of sequential vs fixed-point sampling (CSV)");
  add_chain_options(bench, bo.chain);
  add_solver_options(bench, bo.solver);
  bench->add_option("--S-list", bo.S_list)->delimiter(',');
  bench->add_option("--threads-list", bo.threads_list)->delimiter(',');
  bench->add_option("--modes", bo.modes)->delimiter(',');
  bench->add_option("--repeats", bo.repeats);
  bench->add_option("--out", bo.out, "CSV path (default stdout)");

  EvalOpts eo;
  auto* eval = app.add_subcommand("eval-w2", "moments of samples and W2 to a diagonal Gaussian (JSON)");
  eval->add_option("--samples", eo.samples, "binary stack file, one sample per row")->required();
  eval->add_option("--target", eo.target, "gaussian:<path>")->required();
  eval->add_option("--out", eo.out, "JSON path (default stdout)");

  InitMlpOpts mo;
  auto* init_mlp = app.add_subcommand("init-mlp", "write a randomly initialized MLP predictor");
  init_mlp->add_option("--dim", mo.dim)->check(CLI::PositiveNumber);
  init_mlp->add_option("--hidden", mo.hidden)->delimiter(',');
  init_mlp->add_option("--T", mo.T)->check(CLI::PositiveNumber);
  init_mlp->add_option("--seed", mo.seed);
  init_mlp->add_option("--out", mo.out)->required();

  InitGaussianOpts go;
  auto* init_gauss = app.add_subcommand("init-gaussian", "write a random diagonal Gaussian target");
  init_gauss->add_option("--dim", go.dim)->check(CLI::PositiveNumber);
  init_gauss->add_option("--seed", go.seed);
  init_gauss->add_option("--out", go.out)->required();

  RerunOpts ro;
  auto* rerun = app.add_subcommand("rerun", "repeat the run recorded in a manifest");
  rerun->add_option("manifest", ro.manifest)->required();
  rerun->add_option("--out", ro.out, "write outputs here instead of the recorded directory");

  std::vector<std::string> full{"parseq"};
  full.insert(full.end(), args.begin(), args.end());
  std::vector<char*> cargs;
  for (auto& a : full) cargs.push_back(a.data());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (*sample) return cmd_sample(so, args);
  if (*invert) return cmd_invert(io, args);
  if (*trace) return cmd_trace(to, args);
  if (*bench) return cmd_bench(bo, args);
  if (*eval) return cmd_eval(eo, args);
  if (*init_mlp) return cmd_init_mlp(mo, args);
  if (*init_gauss) return cmd_init_gaussian(go, args);
  if (*rerun) return cmd_rerun(ro);
  return kUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(std::vector<std::string>(argv + 1, argv + argc));
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ShapeError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const IndexError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const NumericDomainError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const AdjointError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const Error& e) {
    // ParseError, SchemaError, InsufficientDataError
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
