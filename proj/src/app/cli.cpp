#include "lstn/app/cli.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <functional>
#include <ostream>

#include "lstn/app/run.hpp"
#include "lstn/errors.hpp"

namespace lstn::app {

namespace {

std::atomic<HttpServer*> g_server{nullptr};

extern "C" void on_signal(int) {
  if (HttpServer* s = g_server.load()) s->stop();
}

int serve(const RunConfig& config, std::ostream& out) {
  auto model = std::make_shared<const ServiceModel>(load_service_model(config));
  Service service(model, config.session_idle_seconds);
  HttpServer server(service, config.static_dir);
  int port = server.bind(config.host, config.port);
  out << "serving " << model->variant << " model (K=" << model->model.num_states() << ") on http://" << config.host
      << ':' << port << "\n"
      << std::flush;
  g_server = &server;
  auto old_int = std::signal(SIGINT, on_signal);
  auto old_term = std::signal(SIGTERM, on_signal);
  server.listen();
  std::signal(SIGINT, old_int);
  std::signal(SIGTERM, old_term);
  g_server = nullptr;
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Latent state tracking for task-oriented dialog", "lstn"};
  app.require_subcommand(1);
  app.fallthrough();
  RunConfig config;
  bind_options(app, config);

  std::function<int()> action;
  auto add = [&](const char* name, const char* help, std::function<int()> fn) {
    app.add_subcommand(name, help)->callback([&action, fn] { action = fn; });
  };
  add("synth", "generate a synthetic corpus from an oracle state machine", [&] {
    cmd_synth(config, out);
    return 0;
  });
  add("preprocess", "tokenize the corpus and build the vocabulary", [&] {
    cmd_preprocess(config, out);
    return 0;
  });
  add("train", "train the model with generalized EM", [&] {
    cmd_train(config, out);
    return 0;
  });
  add("train-baseline", "train the two-phase split baseline", [&] {
    cmd_train_baseline(config, out);
    return 0;
  });
  add("eval", "score recoverability and end-to-end BLEU", [&] {
    cmd_eval(config, out);
    return 0;
  });
  add("sweep-k", "train and evaluate one model per state count", [&] {
    cmd_sweep_k(config, out);
    return 0;
  });
  add("export-tree", "mine intents and export the dialog-flow graph", [&] {
    cmd_export_tree(config, out);
    return 0;
  });
  add("gradcheck", "compare analytic and numerical gradients", [&] { return cmd_gradcheck(config, out).passed ? 0 : 1; });
  add("serve", "run the HTTP session service", [&] { return serve(config, out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "lstn: " << e.what() << "\nrun 'lstn --help' for usage\n";
    return 2;
  }

  try {
    config.validate();
  } catch (const ArgumentError& e) {
    err << "lstn: " << e.what() << '\n';
    return 2;
  }
  try {
    return action ? action() : 2;
  } catch (const std::exception& e) {
    err << "lstn: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace lstn::app
