#pragma once

#include <string>
#include <vector>

#include "voxdiff/config.hpp"
#include "voxdiff/probing.hpp"
#include "voxdiff/synth.hpp"

namespace voxdiff {

// Evaluation catalog (id, name, size group, report column) derived from the
// phantom catalog, and the class count (max id + 1) for the probe head.
std::vector<ClassInfo> class_catalog(const PhantomConfig& c);
int class_count(const PhantomConfig& c);

// Joins a relative path under $VOXDIFF_OUT_ROOT when the variable is set;
// absolute paths and unset environments pass through unchanged.
std::string resolve_out(const std::string& path);

// Subcommand bodies. Each creates its output directory, writes a resolved
// config snapshot next to its artifacts, and throws on failure (ConfigError,
// MissingArtifactError, NumericError map to exit codes 2, 3, 4).
void cmd_synth(const ExperimentConfig& cfg, const std::string& out_dir);
void cmd_train_bpr(const ExperimentConfig& cfg, const std::string& corpus,
                   const std::string& out_dir);
void cmd_train_ddpm(const ExperimentConfig& cfg, const std::string& corpus,
                    const std::string& bpr_path, const std::string& out_dir, bool do_resume,
                    bool init_only);
void cmd_extract(const ExperimentConfig& cfg, const std::string& ckpt,
                 const std::string& volume_path, const std::string& bpr_path,
                 const std::string& out_path);
void cmd_probe(const ExperimentConfig& cfg, const std::string& ckpt,
               const std::string& train_corpus, const std::string& test_corpus,
               const std::string& bpr_path, const std::string& out_dir);
void cmd_ablate(const ExperimentConfig& cfg, const std::string& ckpt,
                const std::string& train_corpus, const std::string& test_corpus,
                const std::string& bpr_path, const std::string& out_dir);
void cmd_eval(const std::vector<std::string>& report_csvs, const std::string& out_dir);

// Full argv-to-exit-code surface used by the `voxdiff` binary.
int run_cli(int argc, const char* const* argv);

}  // namespace voxdiff
