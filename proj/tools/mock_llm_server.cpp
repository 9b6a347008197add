#include <iostream>

#include <CLI11.hpp>

#include "safelabel/config.hpp"
#include "safelabel/mock_server.hpp"

int main(int argc, char** argv) {
  CLI::App app{"OpenAI-compatible mock for probe tests", "mock_llm_server"};
  std::string fixture_path;
  int port = 8080;
  app.add_option("--fixture", fixture_path, "Fixture JSON {completions, default, embedding_dim}");
  app.add_option("--port", port, "Port on 127.0.0.1 (0 picks one)");
  CLI11_PARSE(app, argc, argv);
  try {
    safelabel::MockFixture fixture;
    if (!fixture_path.empty()) fixture = safelabel::mock_fixture_from_json(safelabel::load_config_file(fixture_path));
    safelabel::MockLlmServer server(std::move(fixture));
    std::cerr << "listening on 127.0.0.1 (port " << port << ")\n";
    server.run(port);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
