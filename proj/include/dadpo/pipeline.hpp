#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dadpo/corpus.hpp"
#include "dadpo/grad.hpp"
#include "dadpo/losses.hpp"
#include "dadpo/policy.hpp"
#include "dadpo/theory.hpp"

namespace dadpo {

enum class Method { kDsft, kDsftKl, kDdpo, kDdpoKl, kRdpo, kDadpo };

const char* to_string(Method m);
Method method_from_string(const std::string& name);
bool is_preference_method(Method m);

/// Training run settings. Text form is flat `key = value` lines, `#` comments,
/// comma-separated lists for the *_grid keys:
///
///   method          dsft | dsft_kl | ddpo | ddpo_kl | rdpo | dadpo
///   beta            dDPO / rDPO / dDPO+KL temperature
///   beta1, beta2    daDPO reference and teacher weights
///   kl_weight       token-KL weight for the +KL composites
///   epochs          preference-stage epoch budget
///   sft_epochs      dSFT-stage epoch budget
///   batch_size
///   optimizer       sgd | adam
///   lr, sft_lr      learning rates of the two stages
///   clip            gradient-norm clip (0 = off)
///   seed
///   plateau_tol, plateau_window   early stop when the relative loss
///                   improvement over `window` epochs is below `tol`
///   beta_grid, beta1_grid, beta2_grid, kl_weight_grid   sweep grids
struct RunConfig {
  Method method = Method::kDadpo;
  double beta = 0.1;
  double beta1 = 0.1;
  double beta2 = 0.1;
  double kl_weight = 0.2;
  std::size_t epochs = 20;
  std::size_t sft_epochs = 10;
  std::size_t batch_size = 32;
  Optimizer optimizer = Optimizer::kGradientDescent;
  double lr = 1.0;  // tabular desk-scale rates; batch-mean losses dilute per-row gradients
  double sft_lr = 1.0;
  double clip = 0.0;
  std::uint64_t seed = 0;
  double plateau_tol = 1e-6;
  std::size_t plateau_window = 5;

  std::vector<double> beta_grid{0.01, 0.1, 1.0};
  std::vector<double> beta1_grid{0.01, 0.1, 1.0};
  std::vector<double> beta2_grid{0.001, 0.01, 0.1, 1.0};
  std::vector<double> kl_weight_grid{0.1, 0.2, 0.4};

  void validate() const;
  std::string to_text() const;
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);
  std::string hash() const;
  nlohmann::json to_json() const;

  /// LossSpec of the preference stage (or of the SFT stage for dsft methods).
  LossSpec loss_spec() const;
  OptimConfig sft_optim() const;
  OptimConfig pref_optim() const;
};

struct StageLog {
  std::string name;
  std::vector<double> loss_curve;  // full-data loss before training, then after each epoch
  std::size_t epochs_run = 0;
  bool stopped_early = false;
  bool skipped = false;
  std::string checkpoint;  // id of the emitted checkpoint, if any

  nlohmann::json to_json() const;
};

struct StageResult {
  Policy policy;
  StageLog log;
};

/// Generic minibatch loop shared by both stages. Batch order is a
/// deterministic function of (seed, epoch).
StageResult train_stage(const std::string& name, const Policy& init, const LossSpec& spec, const Policy* ref,
                        const Policy* teacher, std::span<const SftPair> sft, std::span<const PreferenceTriplet> triplets,
                        std::size_t epochs, std::size_t batch_size, const OptimConfig& optim, double plateau_tol,
                        std::size_t plateau_window);

/// SFT on teacher responses; dsft_kl adds token KL to `teacher`.
StageResult run_dsft(const Policy& student, std::span<const SftPair> sft_data, const RunConfig& cfg,
                     const Policy* teacher = nullptr);

/// Preference optimization from pi_dSFT; the reference is a frozen copy of
/// pi_dSFT. An empty triplet set skips the stage and returns pi_dSFT.
StageResult run_preference_stage(const Policy& pi_dsft, const Policy& teacher,
                                 std::span<const PreferenceTriplet> triplets, const RunConfig& cfg);

struct CheckpointRecord {
  std::string id;
  std::string path;  // relative to the manifest directory
  std::string hash;
};

struct RunManifest {
  std::string version;
  RunConfig config;
  std::map<std::string, std::string> dataset_hashes;
  nlohmann::json dataset_metadata;
  std::vector<StageLog> stages;
  std::vector<CheckpointRecord> checkpoints;
  std::vector<std::string> warnings;
  std::string final_hash;
  double wall_time_s = 0.0;
  nlohmann::json eval;        // filled by the caller (win-rate summary)
  nlohmann::json provenance;  // filled by the caller (argv, world, inputs)

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static RunManifest load(const std::string& path);
};

struct DistillResult {
  RunManifest manifest;
  Policy dsft_policy;
  Policy final_policy;
  DatasetBundle data;
};

/// build_datasets -> run_dsft -> run_preference_stage. With `out_dir` set,
/// checkpoints are written there as ckpt_dsft.json / ckpt_final.json.
DistillResult distill(const std::vector<Prompt>& prompts, const Policy& teacher, const Policy& student,
                      const RunConfig& cfg, const DecodeConfig& decode, const std::string& out_dir = "");

/// Stage-labelled wrapper: errors are rethrown as "<stage>: <message>".
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.kind(), stage + ": " + cause.what()), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// Synthetic desk-scale world: tabular teacher and student over per-context
// response lists, with a hidden gold reward that the oracle judge uses.

struct WorldConfig {
  std::uint64_t seed = 0;
  std::size_t vocab_size = 8;
  std::size_t max_len = 4;
  std::size_t n_train = 200;
  std::size_t n_eval = 100;
  std::size_t space_size = 40;     // responses per context; 0 = full enumeration
  std::size_t context_width = 2;   // prompts sharing this many leading tokens share a table row
  double teacher_temperature = 0.25;
  double teacher_noise = 0.5;
  double student_signal = 0.3;
  double student_noise = 1.0;

  nlohmann::json to_json() const;
  static WorldConfig from_json(const nlohmann::json& j);
};

struct SyntheticWorld {
  WorldConfig config;
  std::shared_ptr<const Vocab> vocab;
  std::vector<Prompt> train_prompts;
  std::vector<Prompt> eval_prompts;
  Policy teacher;
  Policy student;
  std::map<std::string, std::vector<double>> gold;  // context key -> reward per response index

  /// Gold reward; throws kDomain outside a context's response list.
  RewardFn reward() const;

  nlohmann::json to_json() const;
  static SyntheticWorld from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static SyntheticWorld load(const std::string& path);
};

SyntheticWorld make_synthetic_world(const WorldConfig& cfg);

struct SweepCell {
  Method method;
  double beta = 0.0;
  double beta1 = 0.0;
  double beta2 = 0.0;
  double kl_weight = 0.0;
  RunManifest manifest;
  double score = 0.0;
};

/// Sequential grid over the config's grids for `methods`, sharing datasets and
/// the dSFT stage across cells. `score` rates each final policy (held-out win
/// rate); it is recorded per cell.
std::vector<SweepCell> run_sweep(const std::vector<Prompt>& prompts, const Policy& teacher, const Policy& student,
                                 const RunConfig& base, const DecodeConfig& decode, const std::vector<Method>& methods,
                                 const std::function<double(const Policy&, RunManifest&)>& score);

inline constexpr const char* kVersion = "0.1.0";

}  // namespace dadpo
