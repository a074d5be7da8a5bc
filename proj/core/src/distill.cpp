#include "tagcot/distill.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "tagcot/optim.hpp"
#include "tagcot/parallel.hpp"
#include "tagcot/serialize.hpp"

namespace tagcot {

using nlohmann::json;

void DistillConfig::validate() const {
  if (nodes < 1) throw ConfigError("distill: nodes (U) must be >= 1");
  if (paths < 1) throw ConfigError("distill: paths (S) must be >= 1");
  if (lambda < 0.0) throw ConfigError("distill: lambda must be >= 0");
  if (epochs < 0) throw ConfigError("distill: epochs must be >= 0");
  if (batch < 1) throw ConfigError("distill: batch must be >= 1");
  if (prompt_cap < 0) throw ConfigError("distill: prompt_cap must be >= 0");
  if (max_new < 1) throw ConfigError("distill: max_new must be >= 1");
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

PromptRecord build_prompt(const HeteroGraph& graph, std::uint32_t v, int cap,
                          const LabelVocab& vocab) {
  const auto ego = graph.ego_graph(v, 1, cap);
  std::ostringstream os;
  os << "You are given records from a linked review network. Each record is "
        "labeled either "
     << vocab.negative << " or " << vocab.positive << " based on its content and connections.\n";
  os << "Target Node: " << ego.target_text << '\n';
  bool any = false;
  for (const auto& rel : ego.neighbors) any = any || !rel.empty();
  if (!any) {
    os << "Neighbors: (none)\n";
  } else {
    os << "Neighbors:\n";
    for (std::size_t r = 0; r < ego.neighbors.size(); ++r) {
      for (const auto& [id, text] : ego.neighbors[r]) {
        os << "Relation: " << graph.relations()[r] << "; Text: " << text << '\n';
      }
    }
  }
  os << "1. Give 1-2 short reasoning points for the target node itself looking "
     << vocab.positive << " (each within 20 words). If none, just say \"Looks normal\".\n";
  os << "2. Give 1-2 short reasoning points for connections inferring " << vocab.positive
     << " (each within 20 words). If none, just say \"Looks normal\".\n";
  os << "3. Give a prediction (" << vocab.negative << " / " << vocab.positive << ").";

  PromptRecord rec;
  rec.node = v;
  rec.text = os.str();
  rec.vocab = vocab;
  return rec;
}

std::vector<std::uint32_t> sample_distillation_nodes(const HeteroGraph& graph, int u,
                                                     std::uint64_t seed) {
  const auto train = graph.split_ids(Split::kTrain);
  std::vector<std::uint32_t> fraud, benign;
  for (auto id : train) {
    const auto& label = graph.node(id).label;
    if (!label) continue;
    (*label == 1 ? fraud : benign).push_back(id);
  }
  const auto labeled = fraud.size() + benign.size();
  if (static_cast<std::size_t>(u) > labeled) {
    throw ConfigError("distill: U=" + std::to_string(u) + " exceeds the " +
                      std::to_string(labeled) + " labeled train nodes");
  }
  // stratified: fraud share of the sample tracks the population share
  auto n_fraud = static_cast<std::size_t>(std::llround(
      static_cast<double>(u) * static_cast<double>(fraud.size()) / static_cast<double>(labeled)));
  n_fraud = std::min({n_fraud, fraud.size(), static_cast<std::size_t>(u)});
  std::size_t n_benign = static_cast<std::size_t>(u) - n_fraud;
  if (n_benign > benign.size()) {
    n_fraud += n_benign - benign.size();
    n_benign = benign.size();
  }

  Rng rng(derive_seed(seed, 0xd15711));
  std::vector<std::uint32_t> out;
  for (auto i : rng.sample_indices(static_cast<std::uint32_t>(fraud.size()),
                                   static_cast<std::uint32_t>(n_fraud))) {
    out.push_back(fraud[i]);
  }
  for (auto i : rng.sample_indices(static_cast<std::uint32_t>(benign.size()),
                                   static_cast<std::uint32_t>(n_benign))) {
    out.push_back(benign[i]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Teachers and prediction parsing
// ---------------------------------------------------------------------------

TranscriptTeacher TranscriptTeacher::from_jsonl(const std::string& content) {
  TranscriptTeacher teacher;
  std::istringstream is(content);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      teacher.paths_[{j.at("node_id").get<std::uint32_t>(), j.at("path_index").get<int>()}] =
          j.at("reasoning").get<std::string>();
    } catch (const json::exception& e) {
      throw ArtifactError("transcript line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return teacher;
}

TranscriptTeacher TranscriptTeacher::from_file(const std::string& path) {
  return from_jsonl(read_file(path));
}

std::string TranscriptTeacher::generate(const PromptRecord& prompt, int path_index,
                                        std::uint64_t /*seed*/) {
  auto it = paths_.find({prompt.node, path_index});
  return it == paths_.end() ? std::string() : it->second;
}

namespace {

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// strips leading whitespace and one optional list enumerator ("3.", "-", "*")
std::string_view strip_line_prefix(std::string_view line) {
  std::size_t i = 0;
  auto skip_ws = [&] {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
  };
  skip_ws();
  std::size_t mark = i;
  if (i < line.size() && (line[i] == '-' || line[i] == '*')) {
    ++i;
    skip_ws();
    return line.substr(i);
  }
  bool digits = false;
  while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) {
    ++i;
    digits = true;
  }
  if (digits && i < line.size() && (line[i] == '.' || line[i] == ')')) {
    ++i;
    skip_ws();
    return line.substr(i);
  }
  return line.substr(mark);
}

std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace

std::optional<int> parse_prediction(const std::string& reasoning, const LabelVocab& vocab) {
  static constexpr std::string_view kKey = "prediction:";
  std::optional<std::string> last;
  std::istringstream is(reasoning);
  std::string raw;
  while (std::getline(is, raw)) {
    const auto line = strip_line_prefix(raw);
    if (line.size() < kKey.size()) continue;
    if (lower(std::string(line.substr(0, kKey.size()))) != kKey) continue;
    last = std::string(line.substr(kKey.size()));
  }
  if (!last) return std::nullopt;

  const std::string pos = lower(vocab.positive);
  const std::string neg = lower(vocab.negative);
  for (const auto& word : words_of(*last)) {  // first class word wins
    if (word == pos) return 1;
    if (word == neg) return 0;
  }
  return std::nullopt;
}

std::vector<ReasoningTriple> teacher_generate(Teacher& teacher, const HeteroGraph& graph,
                                              std::uint32_t v, int paths, std::uint64_t seed,
                                              int cap, const LabelVocab& vocab) {
  const auto& label = graph.node(v).label;
  if (!label) throw ContractError("teacher_generate: node " + std::to_string(v) + " is unlabeled");
  const auto prompt = build_prompt(graph, v, cap, vocab);

  std::vector<ReasoningTriple> out;
  out.reserve(static_cast<std::size_t>(paths));
  for (int s = 0; s < paths; ++s) {
    ReasoningTriple triple;
    triple.prompt = prompt;
    try {
      triple.reasoning = teacher.generate(prompt, s, derive_seed(seed, v, static_cast<std::uint64_t>(s)));
    } catch (const std::exception& e) {
      std::fprintf(stderr, "teacher failed on node %u path %d: %s\n", v, s, e.what());
      triple.reasoning.clear();
    }
    triple.predicted = parse_prediction(triple.reasoning, vocab);
    triple.correct = (triple.predicted && *triple.predicted == *label) ? 1 : 0;
    out.push_back(std::move(triple));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

SequenceExample make_training_sequence(const std::string& prompt, const std::string& reasoning,
                                       int correct, int max_seq) {
  if (max_seq < 8) throw ContractError("make_training_sequence: max_seq too small");
  const auto room = static_cast<std::size_t>(max_seq - 3);  // BOS, SEP, EOS
  const std::size_t r_keep = std::min(reasoning.size(), room);
  const std::size_t p_keep = std::min(prompt.size(), room - r_keep);

  SequenceExample ex;
  ex.correct = correct;
  ex.tokens.reserve(p_keep + r_keep + 3);
  ex.tokens.push_back(vocab::kBos);
  for (std::size_t i = 0; i < p_keep; ++i) {
    ex.tokens.push_back(static_cast<unsigned char>(prompt[i]));
  }
  ex.tokens.push_back(vocab::kSep);
  ex.reason_start = ex.tokens.size();
  for (std::size_t i = 0; i < r_keep; ++i) {
    ex.tokens.push_back(static_cast<unsigned char>(reasoning[i]));
  }
  ex.tokens.push_back(vocab::kEos);
  return ex;
}

Var token_loss_from_logprobs(Tape& t, Var picked_logprobs, int correct, double lambda) {
  const auto m = t.values(picked_logprobs).size();
  if (m == 0) throw ContractError("token_loss_from_logprobs: empty token set");
  const double inv = 1.0 / static_cast<double>(m);
  if (correct == 1) {
    return t.scale(t.sum_all(t.neg(picked_logprobs)), inv);
  }
  Var probs = t.exp_(picked_logprobs);
  Var clamped = t.clamp(probs, 0.0, 1.0 - 1e-6);
  Var one_minus = t.add_const(t.neg(clamped), 1.0);
  return t.scale(t.sum_all(t.neg(t.log_(one_minus))), lambda * inv);
}

namespace {

// realized-token log probabilities over the reasoning span (incl. EOS)
Var picked_reason_logprobs(Tape& t, const EncoderBinding& bind, const SequenceExample& ex) {
  const auto n = ex.tokens.size();
  Var logprobs = token_logprob_rows(t, bind, ex.tokens);
  std::vector<int> cols(n, 0);
  for (std::size_t i = 0; i + 1 < n; ++i) cols[i] = ex.tokens[i + 1];
  Var picked = t.pick_per_row(logprobs, cols);
  std::vector<int> target_rows;
  target_rows.reserve(n - ex.reason_start);
  for (std::size_t row = ex.reason_start - 1; row + 1 < n; ++row) {
    target_rows.push_back(static_cast<int>(row));
  }
  return t.embedding_lookup(picked, target_rows);
}

}  // namespace

Var distill_loss(Tape& t, const EncoderBinding& bind, std::span<const SequenceExample> batch,
                 double lambda, DistillBatchStats* stats) {
  DistillBatchStats local;
  Var acc;
  for (const auto& ex : batch) {
    // empty reasoning: nothing between SEP and EOS
    if (ex.tokens.size() == ex.reason_start + 1) {
      ++local.skipped_empty;
      continue;
    }
    ++local.used;
    if (ex.correct == 0 && lambda == 0.0) continue;  // exactly-zero term
    Var term = token_loss_from_logprobs(t, picked_reason_logprobs(t, bind, ex), ex.correct, lambda);
    acc = acc.valid() ? t.add(acc, term) : term;
  }
  if (stats) *stats = local;
  if (local.used == 0) throw ContractError("distill_loss: batch has no usable sequences");
  if (!acc.valid()) return t.scalar(0.0);  // all-negative batch at lambda 0
  return t.scale(acc, 1.0 / static_cast<double>(local.used));
}

double distill_loss_value(const EncoderParams& params, std::span<const SequenceExample> batch,
                          double lambda) {
  Tape t;
  auto bind = bind_encoder(t, params);
  return t.scalar_value(distill_loss(t, bind, batch, lambda));
}

double sequence_ce_value(const EncoderParams& params, const SequenceExample& example) {
  Tape t;
  auto bind = bind_encoder(t, params);
  Var picked = picked_reason_logprobs(t, bind, example);
  return t.scalar_value(t.scale(t.sum_all(t.neg(picked)),
                                1.0 / static_cast<double>(t.values(picked).size())));
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

FinetuneResult finetune_student(EncoderParams& params,
                                const std::vector<ReasoningTriple>& triples,
                                const DistillConfig& config) {
  config.validate();
  const int max_seq = params.config.max_seq;

  std::vector<SequenceExample> examples;
  int skipped = 0;
  for (const auto& triple : triples) {
    if (triple.reasoning.empty()) {
      ++skipped;
      continue;
    }
    examples.push_back(
        make_training_sequence(triple.prompt.text, triple.reasoning, triple.correct, max_seq));
  }
  if (skipped > 0) {
    std::fprintf(stderr, "finetune_student: skipped %d empty-reasoning triples\n", skipped);
  }
  if (examples.empty()) throw ContractError("finetune_student: no usable triples");

  set_trainable(params, true);
  AdamW opt(params.trainable_tensors(), config.lr);

  FinetuneResult result;
  result.skipped_empty = skipped;
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng(derive_seed(config.seed, 0xf17e, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch));
      std::vector<SequenceExample> batch;
      batch.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) batch.push_back(examples[order[i]]);

      Tape t;
      DropoutSpec drop{params.config.lora_dropout,
                       derive_seed(config.seed, static_cast<std::uint64_t>(epoch), start)};
      auto bind = bind_encoder(t, params, BindMode::kTrainable,
                               params.config.lora_dropout > 0.0 ? &drop : nullptr);
      Var loss = distill_loss(t, bind, batch, config.lambda);
      const double value = t.scalar_value(loss);
      if (!std::isfinite(value)) {
        throw NumericalError("finetune_student: loss diverged at epoch " +
                             std::to_string(epoch) + " (value " + std::to_string(value) + ")");
      }
      t.backward(loss);
      opt.step();
      opt.zero_grad();
      epoch_loss += value * static_cast<double>(stop - start);
      seen += stop - start;
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(seen));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Generation and augmentation
// ---------------------------------------------------------------------------

namespace {

std::vector<int> generation_prefix(const std::string& prompt, int max_seq, int max_new) {
  const long budget = static_cast<long>(max_seq) - max_new - 2;
  if (budget < 4) throw ConfigError("generation: max_new leaves no room for the prompt");
  const std::size_t keep = std::min(prompt.size(), static_cast<std::size_t>(budget));
  std::vector<int> prefix;
  prefix.reserve(keep + 2);
  prefix.push_back(vocab::kBos);
  for (std::size_t i = 0; i < keep; ++i) prefix.push_back(static_cast<unsigned char>(prompt[i]));
  prefix.push_back(vocab::kSep);
  return prefix;
}

}  // namespace

std::vector<std::string> generate_all_cots(const HeteroGraph& graph, const EncoderParams& params,
                                           int cap, int max_new, const LabelVocab& vocab,
                                           int threads) {
  std::vector<std::string> out(graph.num_nodes());
  parallel_for(graph.num_nodes(), threads, [&](std::size_t v) {
    const auto prompt = build_prompt(graph, static_cast<std::uint32_t>(v), cap, vocab);
    const auto prefix = generation_prefix(prompt.text, params.config.max_seq, max_new);
    const auto tokens = greedy_generate(params, prefix, max_new);
    out[v] = detokenize(tokens);
  });
  return out;
}

std::string augment_text(const std::string& raw, const std::string& cot) {
  std::string out;
  out.reserve(raw.size() + cot.size() + 16);
  out.append(raw);
  out.append(kAugmentSeparator);
  out.append(cot);
  return out;
}

double prediction_match_rate(const HeteroGraph& graph, const EncoderParams& params,
                             std::span<const std::uint32_t> nodes, int cap, int max_new,
                             const LabelVocab& vocab, int threads) {
  if (nodes.empty()) throw ContractError("prediction_match_rate: empty node set");
  std::vector<int> match(nodes.size(), 0);
  parallel_for(nodes.size(), threads, [&](std::size_t i) {
    const auto v = nodes[i];
    const auto& label = graph.node(v).label;
    if (!label) return;
    const auto prompt = build_prompt(graph, v, cap, vocab);
    const auto prefix = generation_prefix(prompt.text, params.config.max_seq, max_new);
    const auto text = detokenize(greedy_generate(params, prefix, max_new));
    const auto predicted = parse_prediction(text, vocab);
    match[i] = (predicted && *predicted == *label) ? 1 : 0;
  });
  double sum = 0.0;
  for (int m : match) sum += m;
  return sum / static_cast<double>(nodes.size());
}

}  // namespace tagcot
