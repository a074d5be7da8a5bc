#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tagcot/encoder.hpp"
#include "tagcot/graph.hpp"

namespace tagcot {

// Class words used in prompts and predictions; positive = label 1.
struct LabelVocab {
  std::string positive = "Fraudulent";
  std::string negative = "Legitimate";
};

struct PromptRecord {
  std::uint32_t node = 0;
  std::string text;
  LabelVocab vocab;
};

struct ReasoningTriple {
  PromptRecord prompt;
  std::string reasoning;
  std::optional<int> predicted;
  int correct = 0;  // 1 iff predicted parsed and matches the true label
};

struct DistillConfig {
  int nodes = 100;        // distillation node count U
  int paths = 5;          // reasoning paths per node S
  double lambda = 100.0;  // unlikelihood weight
  int epochs = 10;
  double lr = 1e-3;
  int batch = 8;
  std::uint64_t seed = 0;
  int prompt_cap = 2;  // neighbor texts per relation in prompts
  int max_new = 48;    // generation budget for student reasoning

  void validate() const;
};

// Pluggable reasoning source. generate() may be called concurrently for
// distinct nodes when concurrent_safe() is true; otherwise calls are
// serialized by the driver.
class Teacher {
 public:
  virtual ~Teacher() = default;
  virtual std::string generate(const PromptRecord& prompt, int path_index,
                               std::uint64_t seed) = 0;
  virtual bool concurrent_safe() const { return true; }
};

// Replays reasoning from a line-delimited transcript keyed by
// (node_id, path_index); lets externally generated reasoning be injected
// offline. Missing keys produce an empty reasoning path.
class TranscriptTeacher : public Teacher {
 public:
  static TranscriptTeacher from_jsonl(const std::string& content);
  static TranscriptTeacher from_file(const std::string& path);
  std::string generate(const PromptRecord& prompt, int path_index, std::uint64_t seed) override;

 private:
  std::map<std::pair<std::uint32_t, int>, std::string> paths_;
};

// Deterministic prompt render: system line, target block, per-relation
// neighbor block, and the three-part instruction (node-level reasons,
// connection-level reasons, prediction).
PromptRecord build_prompt(const HeteroGraph& graph, std::uint32_t v, int cap,
                          const LabelVocab& vocab = {});

// Uniform without replacement from the train split, stratified by class so
// the sampled fraud fraction tracks the population fraction.
std::vector<std::uint32_t> sample_distillation_nodes(const HeteroGraph& graph, int u,
                                                     std::uint64_t seed);

// S reasoning paths for one labeled node, correctness filled by
// parse_prediction against the true label. A teacher failure on one path is
// recorded as an empty reasoning with correctness 0.
std::vector<ReasoningTriple> teacher_generate(Teacher& teacher, const HeteroGraph& graph,
                                              std::uint32_t v, int paths, std::uint64_t seed,
                                              int cap, const LabelVocab& vocab = {});

// Scans for the last line beginning "Prediction:" (case-insensitive, list
// enumerators tolerated) and matches the label words as whole words.
std::optional<int> parse_prediction(const std::string& reasoning, const LabelVocab& vocab);

// --- loss -------------------------------------------------------------------

// BOS + prompt + SEP + reasoning + EOS, truncated to max_seq. Truncation
// keeps the whole reasoning when possible and cuts the prompt from the
// right. Loss targets are the reasoning tokens plus the terminating EOS.
struct SequenceExample {
  std::vector<int> tokens;
  std::size_t reason_start = 0;  // index of the first reasoning token
  int correct = 0;
};

SequenceExample make_training_sequence(const std::string& prompt, const std::string& reasoning,
                                       int correct, int max_seq);

// Token-averaged loss over realized-token log probabilities [m x 1]:
// correct paths get cross entropy mean(-log p); incorrect paths get the
// unlikelihood term lambda * mean(-log(1 - p)) with p clamped to 1 - 1e-6.
Var token_loss_from_logprobs(Tape& tape, Var picked_logprobs, int correct, double lambda);

struct DistillBatchStats {
  int used = 0;
  int skipped_empty = 0;
};

// Mean over usable sequences of [y * CE + lambda * (1-y) * UL]; sequences
// with empty reasoning are skipped and counted. lambda = 0 contributes an
// exactly-zero term (and gradient) for incorrect paths.
Var distill_loss(Tape& tape, const EncoderBinding& bind,
                 std::span<const SequenceExample> batch, double lambda,
                 DistillBatchStats* stats = nullptr);

// Convenience scalar for oracles/tests.
double distill_loss_value(const EncoderParams& params, std::span<const SequenceExample> batch,
                          double lambda);
double sequence_ce_value(const EncoderParams& params, const SequenceExample& example);

// --- fine-tuning and generation ----------------------------------------------

struct FinetuneResult {
  std::vector<double> epoch_loss;
  int skipped_empty = 0;
};

// AdamW on adapter + norm tensors only; base weights stay frozen.
// Deterministic per config.seed. Aborts with NumericalError on NaN loss.
FinetuneResult finetune_student(EncoderParams& params,
                                const std::vector<ReasoningTriple>& triples,
                                const DistillConfig& config);

// One greedy reasoning path per node (every node, labeled or not). The
// generation prefix is the prompt truncated to leave room for max_new
// tokens. Deterministic; parallel over nodes (read-only parameters).
std::vector<std::string> generate_all_cots(const HeteroGraph& graph,
                                           const EncoderParams& params, int cap, int max_new,
                                           const LabelVocab& vocab = {}, int threads = 0);

inline constexpr const char* kAugmentSeparator = "\n[ANALYSIS]\n";

// Raw text stays a verbatim prefix of the augmented text.
std::string augment_text(const std::string& raw, const std::string& cot);

// Fraction of nodes whose generated reasoning parses to the true label.
double prediction_match_rate(const HeteroGraph& graph, const EncoderParams& params,
                             std::span<const std::uint32_t> nodes, int cap, int max_new,
                             const LabelVocab& vocab = {}, int threads = 0);

}  // namespace tagcot
