#pragma once

// Pre-training with contrastive learning and embedding reconstruction, then
// prompt tuning of one target domain with everything else frozen.

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mop/eval.hpp"
#include "mop/model.hpp"

namespace mop {

enum class Task : std::uint8_t { intra, inter };
const char* to_string(Task t);
Task parse_task(const std::string& s);

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  std::optional<double> val_hr;
};

/// `epoch<TAB>loss<TAB>val_hr10`; an unmeasured validation value prints as "-".
std::string epoch_line(const EpochRecord& r);

/// Thin wrapper selecting SGD or Adam.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr), adam_(lr) {}
  void step(ad::ParamStore& store);

 private:
  OptimizerKind kind_;
  double lr_;
  ad::Adam adam_;
};

/// Reference embeddings for reconstruction: a matrix factorisation trained
/// with the recommendation loss on the raw training edges (no motifs).
struct GroundTruth {
  std::vector<Matrix> z;                         // per domain, num_nodes x 2d
  std::vector<std::vector<std::uint8_t>> eligible;  // degree >= median of the node's kind
};

GroundTruth train_ground_truth(const MopModel& model);

struct PretrainOptions {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Optional validation hook called after each epoch.
  std::function<double()> validate;
};

struct PretrainResult {
  std::vector<EpochRecord> log;
  std::size_t cl_skipped = 0;   // batch nodes with fewer than two motifs
  std::size_t er_skipped = 0;   // batch nodes not eligible for reconstruction
  std::size_t steps = 0;
};

/// Optimises tables, mask token and encoder under lambda1 * CL + (1 - lambda1) * ER
/// with identity prompts. On a non-finite loss the parameters of the last
/// completed epoch are restored and NumericalError is thrown.
PretrainResult pretrain(MopModel& model, const PretrainOptions& options = {});

/// Held-out data of one target domain, in local node / item-index terms.
struct DomainHoldout {
  struct Pair {
    node_t user = 0;
    std::uint32_t item = 0;  // index into the domain's item block
  };
  std::vector<Pair> valid, test;            // warm users
  std::vector<Pair> cold_valid, cold_test;  // users with no training edge here
  /// Every known item per user (training, validation and test).
  std::unordered_map<node_t, std::unordered_set<std::uint32_t>> known;
};

/// Frozen-encoder caches needed to score one (domain, task): the shared cache
/// of every domain that can supply a user (k only for intra) and k's specific cache.
struct TaskCaches {
  std::vector<std::shared_ptr<const EncodedCache>> shared;
  std::shared_ptr<const EncodedCache> specific;
};

TaskCaches build_task_caches(const MopModel& model, std::size_t k, Task task);

/// Composed user / item embeddings of one (domain, task) under the current
/// prompt values.
class Recommender {
 public:
  Recommender(const MopModel& model, std::size_t k, Task task);
  /// Reuses caches built for the same encoder parameters.
  Recommender(const MopModel& model, std::size_t k, Task task, TaskCaches caches);

  std::size_t domain_index() const noexcept { return k_; }
  const Matrix& items() const noexcept { return items_; }
  /// 4d composed user row, or nullopt when the user has no source of a shared
  /// embedding (inter task).
  std::optional<Matrix> user(node_t u) const;
  /// Cosine scores of `items` for user u.
  bool score(node_t u, std::span<const std::uint32_t> items, std::span<double> out) const;

 private:
  const MopModel& model_;
  std::size_t k_;
  Task task_;
  Matrix items_;
  TaskCaches caches_;
};

/// intra: Concat(shared, specific); inter: Concat(shared, 0).
Matrix compose_user_embedding(const Matrix& shared, const Matrix* specific, Task task);

/// Source domain used for a user's shared embedding under the inter task: the
/// first other domain in which the user has an edge.
std::optional<std::pair<std::size_t, node_t>> inter_source(const MopModel& model, std::size_t k, node_t user);

EvalReport evaluate_task(const MopModel& model, std::size_t k, Task task, const DomainHoldout& holdout,
                         bool use_test, const ProtocolSpec& protocol, std::uint64_t seed,
                         const TaskCaches* caches = nullptr);

struct TuneOptions {
  ProtocolSpec val_protocol{Protocol::sampled, 99};
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TuneResult {
  std::vector<EpochRecord> log;
  double initial_val_hr = 0.0;
  double best_val_hr = 0.0;
  std::size_t best_epoch = 0;  // 0 = identity prompts kept
};

/// Trains the prompts of domain k on the recommendation loss. Requires
/// stage "pretrained"; leaves the model in stage "tuned" with the best
/// validation prompts.
TuneResult prompt_tune(MopModel& model, std::size_t k, Task task, const DomainHoldout& holdout,
                       const TuneOptions& options = {});

/// Freeze mask used by prompt tuning: everything except domain k's prompts.
void freeze_for_tuning(ad::ParamStore& store, const MopModel& model, std::size_t k);

}  // namespace mop
