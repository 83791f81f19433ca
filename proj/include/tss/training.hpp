#pragma once
// Combined-loss transducer training with scheduled sampling on the
// prediction-network input, plus external LM pretraining.
//
//   L = L_RNNT + alpha L_CTC + beta L_ILM, averaged over the batch.
//
// The prediction network consumes Y' (after sampling); all three losses use
// the original Y as targets. Sampling sources are evaluated with the current
// parameters outside the gradient tape.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tss/corpus.hpp"
#include "tss/decoding.hpp"
#include "tss/models.hpp"
#include "tss/sampling.hpp"

namespace tss {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double grad_clip = 5.0;  // global norm; 0 disables

  bool operator==(const AdamConfig&) const = default;
};

struct TrainConfig {
  double alpha = 0.5;
  double beta = 0.1;
  SamplingPolicy policy;
  std::size_t warmup_steps = 500;
  double peak_lr = 2e-3;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  bool feature_mask = false;  // up to 2 time and 2 feature blocks zeroed
  AdamConfig optimizer;

  void validate() const;  // ParameterError naming "train.<field>" or "ss.<field>"
};

// peak_lr * min(step / warmup, sqrt(warmup / step)); step >= 1.
double lr_schedule(std::size_t step, const TrainConfig& cfg);
double lr_schedule(std::size_t step, std::size_t warmup, double peak_lr);

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& utterance_id, const std::string& what)
      : std::runtime_error(what), utterance_id_(utterance_id) {}
  const std::string& utterance_id() const { return utterance_id_; }

 private:
  std::string utterance_id_;
};

struct BatchItem {
  const Utterance* utterance = nullptr;
  std::uint64_t index = 0;  // stable position in the training set; keys random streams
};

// What the losses see for one utterance.
struct UtterancePlan {
  TokenSequence targets;           // always the reference
  TokenSequence prediction_input;  // Y'
  std::vector<std::size_t> replaced;
  std::optional<double> acc;       // proficiency of the sampling source, when sampling ran
};

// Scheduled-sampling decisions for a batch at the given epoch. The ELM is
// required only when the policy samples from it.
std::vector<UtterancePlan> plan_batch(std::span<const BatchItem> batch, const RnntModel& model,
                                      const ElmModel* elm, const TrainConfig& cfg,
                                      std::size_t epoch);

struct LossParts {
  double total = 0.0;
  double rnnt = 0.0;  // batch means of the unweighted terms
  double ctc = 0.0;
  double ilm = 0.0;
  std::size_t utterances = 0;
  std::size_t tokens = 0;
  std::size_t replaced = 0;
  std::vector<double> acc_values;
  std::vector<std::string> ctc_skipped;  // utterance ids too short for CTC
};

// Evaluates the batch loss and, when accumulate is set, adds d total / d theta
// into every parameter's grad. Throws NonFiniteLoss naming the utterance.
LossParts combined_loss(std::span<const BatchItem> batch, const RnntModel& model,
                        const ElmModel* elm, const TrainConfig& cfg, std::size_t epoch,
                        bool accumulate = true);

struct AdamState {
  std::size_t step = 0;
  std::vector<Array> m;
  std::vector<Array> v;
};

// One update over params (grads already accumulated). Clips, steps, zeroes grads.
// Returns the pre-clip global gradient norm.
double adam_update(const std::vector<Parameter*>& params, AdamState& state, double lr,
                   const AdamConfig& cfg);

// Batches of training-set indices for an epoch: a seeded shuffle, a stable
// sort by frame count into length buckets, then a seeded shuffle of batch order.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<Utterance>& utts,
                                                   std::size_t batch_size, std::uint64_t seed,
                                                   std::size_t epoch);

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;  // next epoch to run
  double best_dev = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  AdamState adam;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_error = 0.0;
  double replacement_rate = 0.0;
  std::optional<double> mean_acc;
  std::size_t ctc_skipped = 0;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // last.ckpt, best.ckpt, metrics.jsonl
  std::ostream* progress = nullptr;              // human-readable epoch lines
  std::size_t max_steps = 0;                     // 0 = run all epochs
  bool evaluate_dev = true;
  DecodeConfig dev_decode;                       // greedy, only temperature matters
  std::optional<std::filesystem::path> resume;   // continue from a last.ckpt
};

struct TrainResult {
  RnntModel model;       // parameters after the final step
  RnntModel best_model;  // lowest dev error seen
  TrainState state;
  std::vector<EpochMetrics> epochs;
  std::vector<double> step_losses;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);

TrainResult train(const Dataset& data, const ModelConfig& model_config, const TrainConfig& cfg,
                  const ElmModel* elm, const TrainOptions& options);

// Decodes every utterance greedily and scores the corpus.
double greedy_error_rate(const RnntModel& model, std::span<const Utterance> utts,
                         const DecodeConfig& cfg);

// ---- external LM -----------------------------------------------------------

struct ElmTrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double peak_lr = 3e-3;
  std::size_t warmup_steps = 100;
  std::uint64_t seed = 1;
  AdamConfig optimizer;

  void validate() const;  // ParameterError naming "elm.<field>"
};

// Mean per-token cross-entropy (targets y_1..y_U then end-of-sentence).
double elm_cross_entropy(const ElmModel& lm, std::span<const TokenSequence> transcripts,
                         bool accumulate = false);

struct ElmTrainResult {
  ElmModel model;
  std::vector<double> train_ce;  // per epoch
  std::vector<double> dev_ce;    // per epoch; perplexity = exp(ce)
};

ElmTrainResult pretrain_elm(std::span<const TokenSequence> train_transcripts,
                            std::span<const TokenSequence> dev_transcripts,
                            const ModelConfig& model_config, const Vocabulary& vocab,
                            const ElmTrainConfig& cfg, std::ostream* progress = nullptr);

}  // namespace tss
