#include "pflow/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Soft-prompt tuning, information-flow analysis and dynamic prompt corruption"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  std::size_t workers = 0;
  std::string dump;
  std::string output;
  app.add_option("-c,--config", config_path, "JSON run configuration");
  app.add_option("-s,--set", overrides, "Override a config value, e.g. --set dpc.alpha=5 (repeatable)");
  app.add_option("-w,--workers", workers, "Instance-level worker threads (overrides config)");

  using Command = int (*)(const pflow::cli::RunConfig&, std::ostream&);
  const std::pair<const char*, Command> commands[] = {
      {"gen-data", pflow::cli::gen_data}, {"pretrain", pflow::cli::pretrain}, {"tune", pflow::cli::tune},
      {"analyze", pflow::cli::analyze},   {"dpc-run", pflow::cli::dpc_run},   {"eval", pflow::cli::eval},
  };
  const char* help[] = {
      "Generate the synthetic train/eval corpus",
      "Pretrain the frozen base model",
      "Tune the soft prompt against the frozen base model",
      "Saliency dumps and flow reports for analysis.instances",
      "Run the pipeline for dpc.mode over the eval split",
      "Accuracy table across off/dpc/all_corruption/random_corruption",
  };
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < std::size(commands); ++i) subs.push_back(app.add_subcommand(commands[i].first, help[i]));
  auto* heatmap = app.add_subcommand("export-heatmap", "Write saliency dumps as layer,i,j,value CSV");
  heatmap->add_option("--dump", dump, "A single .saliency.json dump (default: every dump of the run)");
  heatmap->add_option("--output", output, "CSV path (only with one dump)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (workers > 0) overrides.push_back("workers=" + std::to_string(workers));
    const auto config = pflow::cli::load_config(config_path, overrides);
    if (heatmap->parsed()) {
      return pflow::cli::export_heatmap(config, dump.empty() ? std::nullopt : std::optional<std::filesystem::path>(dump),
                                        output.empty() ? std::nullopt : std::optional<std::filesystem::path>(output),
                                        std::cout);
    }
    for (std::size_t i = 0; i < subs.size(); ++i)
      if (subs[i]->parsed()) return commands[i].second(config, std::cout);
  } catch (const pflow::cli::MissingArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
