#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cnnp/checkpoint.hpp"
#include "cnnp/config.hpp"
#include "cnnp/finetune.hpp"
#include "cnnp/report.hpp"
#include "cnnp/server.hpp"
#include "cnnp/tree.hpp"

using namespace cnnp;

namespace {

constexpr int kEngineError = 1;
constexpr int kUsageError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Errors raised while reading inputs are usage errors (exit 2).
template <typename F>
auto setup(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::io, "cannot write " + path.string());
  f << text;
}

SessionDefaults defaults_from(const AppConfig& c) {
  SessionDefaults d;
  d.finetune = c.finetune;
  d.sensitivity = c.sensitivity;
  d.dataset = c.dataset;
  return d;
}

void write_reports(const Session& s, const std::filesystem::path& dir) {
  const auto nodes = s.nodes();
  write_text(dir / "report.json", report_json(nodes).dump(2) + "\n");
  write_text(dir / "report.csv", report_csv(nodes));
}

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw Error(ErrorCode::io, "no session at " + dir.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::invalid_argument, std::string("corrupt manifest.json: ") + e.what());
  }
}

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::string out;
};

int run_train(const TrainArgs& a) {
  auto [cfg, data, arch] = setup([&] {
    AppConfig c = load_app_config(a.config);
    if (a.seed) c.seed = *a.seed;
    if (a.epochs) c.train.epochs = *a.epochs;
    auto d = load_datasets(c.dataset);
    auto arch = resolve_architecture(c.architecture, d.train);
    return std::tuple{c, std::move(d), arch};
  });
  FineTuneConfig ft;
  ft.learning_rate = cfg.train.learning_rate;
  ft.optimizer = cfg.train.optimizer;
  ft.batch_size = cfg.train.batch_size;
  ft.seed = cfg.seed;
  const Model init = build_model(arch, cfg.seed);
  spdlog::info("training {} filters, {} parameters, {} examples, {} epochs", total_filters(arch), count_params(arch),
               data.train.size(), cfg.train.epochs);
  const auto result = train_epochs(init, data.train, data.test, cfg.train.epochs, ft, [](const FineTuneProgress& p) {
    spdlog::info("epoch {}: loss {:.5f}, test accuracy {:.4f}", p.epoch, p.mean_loss, p.test_accuracy);
  });
  const auto eval = evaluate(result.model, data.test);
  save_checkpoint(result.model, a.out);
  std::cout << "test accuracy " << eval.accuracy << " (" << eval.correct << "/" << eval.total << ")\n"
            << "checkpoint " << a.out << "\n";
  return 0;
}

struct AutopruneArgs {
  std::string config;
  std::string checkpoint;
  double ratio = 0.0;
  double stop_accuracy = 0.985;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int run_autoprune(const AutopruneArgs& a) {
  if (!(a.ratio > 0.0 && a.ratio < 1.0)) throw UsageError("--ratio must be in (0, 1)");
  if (!(a.stop_accuracy >= 0.0 && a.stop_accuracy <= 1.0)) throw UsageError("--stop-acc must be in [0, 1]");
  auto [cfg, data, model] = setup([&] {
    AppConfig c = load_app_config(a.config);
    if (a.seed) {
      c.finetune.seed = *a.seed;
      c.sensitivity.seed = *a.seed;
    }
    auto d = std::make_shared<const DatasetPair>(load_datasets(c.dataset));
    Model m = load_checkpoint(a.checkpoint);
    return std::tuple{c, d, std::move(m)};
  });
  auto session = Session::create(std::move(model), data, defaults_from(cfg));
  const auto root = session->node(0);
  spdlog::info("root: {} filters, accuracy {:.4f}", root.filter_count, root.accuracy);
  session->save(a.out);
  const auto ids = session->auto_prune(
      0, a.ratio, a.stop_accuracy, cfg.finetune,
      [](const FineTuneProgress& p) {
        spdlog::debug("  epoch {}: loss {:.5f}, test accuracy {:.4f}", p.epoch, p.mean_loss, p.test_accuracy);
      },
      {},
      [&](NodeId id) {
        const auto m = session->node(id);
        std::cout << "node " << id << ": " << m.filter_count << " filters, accuracy " << m.accuracy << ", "
                  << (m.converged ? "converged" : "not converged") << " after " << m.trace->epochs_used
                  << " epochs\n"
                  << std::flush;
      });
  write_reports(*session, a.out);
  std::cout << ids.size() << " nodes written to " << a.out << "\n";
  return 0;
}

int run_export(const std::string& dir, const std::string& format, const std::string& out) {
  auto session = setup([&] { return Session::load(dir, std::make_shared<const DatasetPair>()); });
  const auto nodes = session->nodes();
  const std::string text = format == "json" ? report_json(nodes).dump(2) + "\n" : report_csv(nodes);
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text(out, text);
  }
  return 0;
}

Server* g_server = nullptr;

int run_serve(const std::string& dir, const std::string& bind, const std::string& static_dir) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw UsageError("--bind must be host:port");
  const std::string host = bind.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(bind.substr(colon + 1));
  } catch (const std::exception&) {
    throw UsageError("--bind port must be a number");
  }
  auto session = setup([&] {
    const auto defaults = session_defaults_from_json(read_manifest(dir).at("defaults"));
    if (!defaults.dataset) throw Error(ErrorCode::invalid_argument, "session has no dataset on record");
    return Session::load(dir, std::make_shared<const DatasetPair>(load_datasets(*defaults.dataset)));
  });
  ServerOptions opt;
  if (!static_dir.empty()) opt.static_dir = static_dir;
  Server server(session, opt);
  const int bound = server.bind(host, port);
  g_server = &server;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  std::cout << "listening on http://" << host << ":" << bound << "\n" << std::flush;
  server.listen();
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("cnnpruner"));
  CLI::App app{"Filter pruning workbench for convolutional networks"};
  app.require_subcommand(1);
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train an initial model from a config file");
  t->add_option("--config", train.config, "JSON config file")->required();
  t->add_option("--seed", train.seed, "Overrides the config seed");
  t->add_option("--epochs", train.epochs, "Overrides train.epochs");
  t->add_option("--out", train.out, "Checkpoint to write")->required();

  AutopruneArgs ap;
  auto* a = app.add_subcommand("autoprune", "Auto-prune a checkpoint into a new session directory");
  a->add_option("--config", ap.config, "JSON config file (dataset, fine-tune and sensitivity settings)")->required();
  a->add_option("--checkpoint", ap.checkpoint, "Root model")->required();
  a->add_option("--ratio", ap.ratio, "Fraction of filters removed per iteration, in (0, 1)")->required();
  a->add_option("--stop-acc", ap.stop_accuracy, "Stop below this test accuracy")->capture_default_str();
  a->add_option("--out", ap.out, "Session directory")->required();
  a->add_option("--seed", ap.seed, "Overrides fine-tune and sensitivity seeds");

  std::string session_dir, format = "json", out;
  auto* e = app.add_subcommand("export", "Print or write a session report");
  e->add_option("--session", session_dir, "Session directory")->required();
  e->add_option("--format", format, "json or csv")->check(CLI::IsMember({"json", "csv"}))->capture_default_str();
  e->add_option("--out", out, "Output file (stdout when omitted)");

  std::string bind = "127.0.0.1:8080", static_dir;
  auto* s = app.add_subcommand("serve", "Serve a session over HTTP");
  s->add_option("--session", session_dir, "Session directory")->required();
  s->add_option("--bind", bind, "host:port (port 0 picks a free one)")->capture_default_str();
  s->add_option("--static", static_dir, "Directory served at /");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kUsageError;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    if (*t) return run_train(train);
    if (*a) return run_autoprune(ap);
    if (*e) return run_export(session_dir, format, out);
    if (*s) return run_serve(session_dir, bind, static_dir);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsageError;
  } catch (const Error& err) {
    std::cerr << "error [" << to_string(err.code()) << "]: " << err.what() << "\n";
    return kEngineError;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kEngineError;
  }
  return kUsageError;
}
