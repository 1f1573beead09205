// cemcol: build surrogates, simulate data, reconstruct.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "cemcol/cemcol.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitNumeric = 1;
constexpr int kExitUsage = 2;
constexpr double kLargeBuildNodes = 1e5;

// Input problems that the user can fix; everything else from the library is
// reported as a numeric failure.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string sha256_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot read " + path.string() + " for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i)
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return hex.str();
}

json read_json(const std::string& path, const char* what) {
  std::ifstream is(path);
  if (!is) throw UsageError(std::string("cannot open ") + what + " file '" + path + "'");
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw cemcol::FormatError(path + ": " + e.what());
  }
}

// Writes through a temporary sibling so a failed run leaves no partial file.
template <class Writer>
void write_atomic(const fs::path& path, Writer&& writer, bool binary = false) {
  fs::path tmp = path;
  tmp += ".part";
  {
    std::ofstream os(tmp, binary ? std::ios::binary : std::ios::out);
    if (!os) throw UsageError("cannot open " + path.string() + " for writing");
    writer(os);
    os.flush();
    if (!os) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw UsageError("failed to write " + path.string());
    }
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) {
  write_atomic(path, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
}

struct Manifest {
  std::string command;
  json arguments = json::object();
  std::vector<fs::path> outputs;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  json timings = json::object();

  void finish(const fs::path& out) {
    json j;
    j["command"] = command;
    j["arguments"] = arguments;
    j["timings"] = timings;
    j["timings"]["wall_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    auto& list = j["outputs"] = json::array();
    for (const auto& p : outputs) list.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
    fs::path m = out;
    m += ".manifest.json";
    write_json(m, j);
  }
};

int thread_count(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("CEMCOL_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
      throw UsageError(std::string("CEMCOL_THREADS must be a positive integer, got '") + env + "'");
    return static_cast<int>(v);
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

cemcol::SetupConfig load_config(const std::string& path) {
  cemcol::SetupConfig cfg = read_json(path, "config").get<cemcol::SetupConfig>();
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------

struct BuildArgs {
  std::string config;
  int order = 2;
  int threads = 0;
  int mesh_vertices = 2000;
  bool allow_large = false;
  std::string out;
};

int cmd_build(const BuildArgs& a) {
  Manifest man;
  man.command = "build-surrogate";
  man.arguments = {{"config", a.config},        {"order", a.order},
                   {"mesh_vertices", a.mesh_vertices}, {"allow_large", a.allow_large},
                   {"out", a.out}};
  const cemcol::SetupConfig cfg = load_config(a.config);
  const int n = cfg.layout().size();
  const long double nodes = cemcol::smolyak_node_count(n, a.order);
  std::clog << "sparse grid: N = " << n << ", K = " << a.order << ", "
            << std::setprecision(17) << static_cast<double>(nodes) << " nodes\n";
  if (nodes > kLargeBuildNodes && !a.allow_large)
    throw UsageError("refusing to build " + std::to_string(static_cast<long long>(nodes)) +
                     " forward solves (limit " +
                     std::to_string(static_cast<long long>(kLargeBuildNodes)) +
                     "); pass --allow-large to override");

  const int threads = thread_count(a.threads);
  man.arguments["threads"] = threads;
  cemcol::MeshResolution res;
  res.target_vertices = a.mesh_vertices;
  const cemcol::ForwardModel model(cfg, res);
  cemcol::BuildOptions opts;
  opts.threads = threads;
  opts.progress = [](std::size_t done, std::size_t total) {
    std::clog << "  " << done << " / " << total << " solves\n";
  };
  const auto t0 = std::chrono::steady_clock::now();
  const cemcol::Surrogate s = cemcol::build_surrogate(model, a.order, opts);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::clog << "build finished in " << std::setprecision(6) << wall << " s\n";
  man.timings["build_seconds"] = wall;

  write_atomic(a.out, [&](std::ostream& os) { cemcol::write_surrogate(os, s); }, true);
  man.outputs.push_back(a.out);
  man.finish(a.out);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string phantom;
  std::string config;
  double noise = 1e-3;
  std::uint64_t seed = 0;
  int refinement = 2;
  int mesh_vertices = 2000;
  std::string out;
};

int cmd_simulate(const SimulateArgs& a) {
  Manifest man;
  man.command = "simulate";
  man.arguments = {{"phantom", a.phantom}, {"config", a.config},         {"noise", a.noise},
                   {"seed", a.seed},       {"refinement", a.refinement}, {"mesh_vertices", a.mesh_vertices},
                   {"out", a.out},         {"generator", cemcol::kNoiseGenerator}};
  const json pj = read_json(a.phantom, "phantom");
  const cemcol::SetupConfig cfg = load_config(a.config);
  cemcol::Phantom phantom;
  try {
    phantom = pj.get<cemcol::Phantom>();
  } catch (const nlohmann::json::exception& e) {
    throw cemcol::FormatError(a.phantom + ": " + e.what());
  }
  cemcol::SimulationOptions opt;
  opt.mesh_refinement = a.refinement;
  opt.noise_rel = a.noise;
  opt.seed = a.seed;
  opt.inversion_resolution.target_vertices = a.mesh_vertices;
  const auto sim = cemcol::simulate(phantom, cfg, opt);
  std::clog << "simulation mesh: " << sim.mesh_vertices << " vertices, tau = "
            << std::setprecision(17) << *sim.frame.noise_std << '\n';
  write_json(a.out, cemcol::frame_to_json(sim.frame));
  man.outputs.push_back(a.out);
  man.finish(a.out);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ReconstructArgs {
  std::string surrogate;
  std::string data;
  std::string lambda = "auto";
  double tank_height = 0.0;
  std::string out;
};

double parse_lambda(const std::string& spec, const cemcol::MeasurementFrame& frame) {
  if (spec == "auto") return cemcol::auto_lambda(frame.voltages);
  if (spec == "2tau") {
    if (!frame.noise_std)
      throw UsageError("--lambda 2tau needs a measurement file with noise_std");
    return 2.0 * *frame.noise_std;
  }
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(spec, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != spec.size() || !(v >= 0.0))
    throw UsageError("--lambda must be a nonnegative number, 'auto' or '2tau', got '" + spec + "'");
  return v;
}

int cmd_reconstruct(const ReconstructArgs& a) {
  Manifest man;
  man.command = "reconstruct";
  man.arguments = {{"surrogate", a.surrogate}, {"data", a.data}, {"lambda", a.lambda},
                   {"out", a.out}};
  if (!fs::exists(a.surrogate)) throw UsageError("cannot open surrogate file '" + a.surrogate + "'");
  if (!fs::exists(a.data)) throw UsageError("cannot open measurement file '" + a.data + "'");
  cemcol::Surrogate s = cemcol::load_surrogate(a.surrogate);
  cemcol::MeasurementFrame frame = cemcol::load_measurements(a.data);
  if (a.tank_height > 0.0) {
    frame = cemcol::convert_units(frame, a.tank_height);
    man.arguments["tank_height"] = a.tank_height;
  }
  if (frame.num_electrodes() != s.num_electrodes())
    throw UsageError("surrogate has M = " + std::to_string(s.num_electrodes()) +
                     " electrodes but the measurements have M = " +
                     std::to_string(frame.num_electrodes()));
  const Eigen::MatrixXd& built = s.header().currents;
  if (!built.isApprox(frame.current_matrix, 1e-12)) {
    std::clog << "current patterns differ from the surrogate's; changing basis\n";
    s = s.with_currents(cemcol::CurrentMatrix(frame.current_matrix));
  }
  const double lambda = parse_lambda(a.lambda, frame);
  man.arguments["lambda_value"] = lambda;

  const auto t0 = std::chrono::steady_clock::now();
  const cemcol::ReconstructionResult r = cemcol::reconstruct(s, frame.voltages, lambda);
  man.timings["inversion_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::clog << "LM: " << r.evaluations << " evaluations, misfit " << std::setprecision(17)
            << r.misfit << " (" << cemcol::to_string(r.status) << ")\n";

  json j = cemcol::to_json(r);
  j["config"] = s.config();
  j["partition"] = s.header().partition;
  write_json(a.out, j);
  man.outputs.push_back(a.out);
  man.finish(a.out);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-grid CEM surrogates and EIT reconstruction"};
  app.require_subcommand(1);

  BuildArgs build;
  auto* b = app.add_subcommand("build-surrogate", "Run the sparse-grid forward solves");
  b->add_option("--config", build.config, "SetupConfig JSON")->required();
  b->add_option("--order", build.order, "Smolyak order K")->check(CLI::Range(0, 20));
  b->add_option("--threads", build.threads, "Worker threads (default: $CEMCOL_THREADS or all cores)")
      ->check(CLI::PositiveNumber);
  b->add_option("--mesh-vertices", build.mesh_vertices, "Target FEM vertex count")
      ->check(CLI::Range(1000, 1000000));
  b->add_flag("--allow-large", build.allow_large, "Permit more than 1e5 forward solves");
  b->add_option("--out", build.out, "Surrogate file")->required();

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "Simulate noisy electrode data for a phantom");
  s->add_option("--phantom", sim.phantom, "Phantom JSON")->required();
  s->add_option("--config", sim.config, "SetupConfig JSON")->required();
  s->add_option("--noise", sim.noise, "Relative noise level")->check(CLI::NonNegativeNumber);
  s->add_option("--seed", sim.seed, "Noise seed");
  s->add_option("--refinement", sim.refinement, "Linear refinement over the inversion mesh")
      ->check(CLI::Range(2, 16));
  s->add_option("--mesh-vertices", sim.mesh_vertices, "Inversion mesh target vertex count")
      ->check(CLI::Range(1000, 1000000));
  s->add_option("--out", sim.out, "Measurement JSON")->required();

  ReconstructArgs rec;
  auto* r = app.add_subcommand("reconstruct", "Regularized least-squares reconstruction");
  r->add_option("--surrogate", rec.surrogate, "Surrogate file")->required();
  r->add_option("--data", rec.data, "Measurement JSON")->required();
  r->add_option("--lambda", rec.lambda, "Value, 'auto' or '2tau'");
  r->add_option("--tank-height", rec.tank_height, "Divide currents by this height (cm)")
      ->check(CLI::PositiveNumber);
  r->add_option("--out", rec.out, "Result JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (b->parsed()) return cmd_build(build);
    if (s->parsed()) return cmd_simulate(sim);
    if (r->parsed()) return cmd_reconstruct(rec);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const cemcol::FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const cemcol::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const cemcol::NonOverlapViolation& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const cemcol::DimensionMismatch& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumeric;
  }
  return kExitUsage;
}
