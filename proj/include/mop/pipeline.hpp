#pragma once

// Artifact-level stages shared by the command line tool: ingest and split,
// motif sampling, pre-training, prompt tuning, evaluation and top-K export.
//
// Layout under the output directory:
//   data/{train,valid,test,cold,users,items}_<k>.tsv   split written by ingest
//   motifs/motifs_d<k>.tsv, motifs/incidence_d<k>.tsv
//   pretrained.ckpt, pretrain_partial.ckpt, pretrain_log.tsv
//   tuned_d<k>_<task>.ckpt, tune_d<k>_<task>.tsv
//   report.tsv, baseline.tsv

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mop/config.hpp"
#include "mop/trainer.hpp"

namespace mop {

/// Failure of a named pipeline stage.
class PipelineError : public Error {
 public:
  PipelineError(std::string stage, const std::string& what)
      : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// One domain's split in external ids.
struct DomainSplit {
  std::vector<std::pair<std::uint64_t, std::uint64_t>> train;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> valid, test;  // warm users
  struct Cold {
    std::uint64_t user = 0;
    std::uint64_t valid_item = 0;
    std::uint64_t test_item = 0;
    std::vector<std::uint64_t> hidden;  // every held-out target item
  };
  std::vector<Cold> cold;
  std::vector<std::uint64_t> users, items;
};

/// Cold users are overlapped users whose whole target-domain history is held
/// out. They are drawn per target domain (cold_fraction of its overlapped
/// users) and never cold in two domains. Warm users with at least
/// min_interactions edges lose one validation and one test item.
std::vector<DomainSplit> split_domains(const std::vector<DomainGraph>& raw, const OverlapRegistry& registry,
                                       const SplitConfig& split, std::uint64_t seed);

struct Workspace {
  std::vector<DomainGraph> graphs;  // training graphs with global ids
  OverlapRegistry registry;
  Universe universe;
  std::vector<DomainHoldout> holdouts;
};

/// Builds training graphs, registry and holdouts from a split.
Workspace make_workspace(const std::vector<DomainSplit>& splits, const std::vector<OverlapSource>& overlaps);

Workspace run_ingest(const PipelineConfig& cfg, std::ostream& log);
/// Reads the split written by ingest.
Workspace load_workspace(const PipelineConfig& cfg);

MopModel make_model(const PipelineConfig& cfg, const Workspace& ws);

void run_sample_motifs(const PipelineConfig& cfg, std::ostream& log);
PretrainResult run_pretrain(const PipelineConfig& cfg, std::ostream& log);
TuneResult run_tune(const PipelineConfig& cfg, int domain, Task task, std::ostream& log);

std::filesystem::path tuned_checkpoint(const PipelineConfig& cfg, int domain, Task task);

/// Loads a checkpoint into a freshly built model; the stage comes from the
/// checkpoint metadata.
MopModel load_model(const PipelineConfig& cfg, const Workspace& ws, const std::filesystem::path& ckpt);

std::uint64_t eval_seed(std::uint64_t seed, int domain, Task task);

EvalReport run_evaluate(const PipelineConfig& cfg, const std::filesystem::path& ckpt, int domain, Task task,
                        const ProtocolSpec& protocol, std::uint64_t seed);

struct Recommendation {
  std::uint64_t user = 0;
  std::vector<std::uint64_t> items;  // external item ids, best first
  std::optional<std::string> error;
};

/// Top-k items per user, excluding items the user interacted with in training.
std::vector<Recommendation> recommend(const MopModel& model, std::size_t k, Task task,
                                      std::span<const std::uint64_t> users, std::size_t top_k);
/// `user<TAB>item,item,...` or `user<TAB>!reason`.
std::string recommendation_line(const Recommendation& r);

/// ingest -> sample -> pretrain -> tune every (domain, task) -> evaluate.
/// Writes report.tsv (tuned) and baseline.tsv (identity prompts).
void run_pipeline(const PipelineConfig& cfg, std::ostream& log);

/// Atomic text write (temporary file plus rename).
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace mop
