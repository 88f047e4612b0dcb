#pragma once

// The CLI subcommands as library calls. Each returns a process exit status
// and writes its artifacts under config.workdir.

#include "pflow/run_config.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>

namespace pflow::cli {

class MissingArtifact : public std::runtime_error {
 public:
  explicit MissingArtifact(const std::filesystem::path& path)
      : std::runtime_error("missing artifact: " + path.string()), path_(path) {}
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

struct ArtifactPaths {
  std::filesystem::path train_corpus;
  std::filesystem::path eval_corpus;
  std::filesystem::path base_checkpoint;
  std::filesystem::path base_summary;
  std::filesystem::path prompt;
  std::filesystem::path analysis_dir;
  std::filesystem::path eval_report;

  std::filesystem::path traces(const std::string& mode) const;
  std::filesystem::path metrics(const std::string& mode) const;
  std::filesystem::path run_prefix;
};

ArtifactPaths artifact_paths(const RunConfig& config);

int gen_data(const RunConfig& config, std::ostream& log);
int pretrain(const RunConfig& config, std::ostream& log);
int tune(const RunConfig& config, std::ostream& log);
int analyze(const RunConfig& config, std::ostream& log);
int dpc_run(const RunConfig& config, std::ostream& log);
int eval(const RunConfig& config, std::ostream& log);
// Converts one saliency dump (or every dump in the analysis directory when
// `dump` is empty) into "layer,i,j,value" CSV files.
int export_heatmap(const RunConfig& config, const std::optional<std::filesystem::path>& dump,
                   const std::optional<std::filesystem::path>& output, std::ostream& log);

}  // namespace pflow::cli
