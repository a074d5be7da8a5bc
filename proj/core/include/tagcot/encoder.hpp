#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tagcot/tensor.hpp"
#include "tagcot/tokenizer.hpp"

namespace tagcot {

struct EncoderConfig {
  int layers = 2;
  int hidden = 128;
  int heads = 4;
  int max_seq = 256;
  int lora_rank = 8;
  double lora_dropout = 0.0;

  int head_dim() const { return hidden / heads; }
  int ff_dim() const { return 4 * hidden; }
  void validate() const;
};

// Low-rank adapter pair per attention projection; effective weight is
// base + A*B. B starts at zero so a fresh adapter is the identity.
struct LoraPair {
  Tensor a;  // [D x r]
  Tensor b;  // [r x D]
};

struct EncoderLayer {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;      // [D x D]
  Tensor ln2_gain, ln2_bias;
  Tensor ff1;                 // [D x 4D]
  Tensor ff2;                 // [4D x D]
  LoraPair lora_q, lora_k, lora_v, lora_o;
};

// Decoder-style transformer weights. Base weights stay frozen during
// adapter training; only the LoRA pairs and the layer-norm parameters are
// marked trainable. Read-shared across concurrent inference tapes.
struct EncoderParams {
  EncoderConfig config;
  Tensor tok_embed;  // [|V| x D]
  Tensor pos_embed;  // [T x D]
  std::vector<EncoderLayer> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor head;  // [D x |V|]
  bool adapters_active = false;
  // provenance guard: checksum of the snapshot a cache was built from
  std::optional<std::uint64_t> registered_cache_checksum;

  static EncoderParams init(const EncoderConfig& cfg, std::uint64_t seed);

  std::vector<Tensor*> adapter_tensors();
  std::vector<Tensor*> norm_tensors();
  std::vector<Tensor*> base_tensors();
  std::vector<Tensor*> trainable_tensors();  // adapters + norms
  std::vector<const Tensor*> all_tensors() const;
};

// Marks adapter + norm tensors trainable (or clears every flag).
void set_trainable(EncoderParams& params, bool trainable);

// Deep frozen copy; adapter deltas are carried over verbatim.
EncoderParams snapshot_params(const EncoderParams& params);

// (Re)creates zeroed adapters at the given rank and activates them.
void apply_adapters(EncoderParams& params, int rank, std::uint64_t seed);

// Folds A*B into the base projections and zeroes the deltas; forward
// outputs are unchanged. Warns if a cache was registered against these
// parameters, since its provenance checksum will no longer match.
void merge_adapters(EncoderParams& params);

std::uint64_t params_checksum(const EncoderParams& params);

// --- tape-level forward --------------------------------------------------

enum class BindMode { kFrozen, kTrainable };

struct DropoutSpec {
  double rate = 0.0;
  std::uint64_t seed = 0;
};

// Per-tape parameter bindings (effective attention weights included).
struct EncoderBinding {
  const EncoderConfig* config = nullptr;
  Var tok_embed, pos_embed, lnf_gain, lnf_bias, head;
  struct Layer {
    Var ln1_gain, ln1_bias, ln2_gain, ln2_bias, ff1, ff2;
    Var wq, wk, wv, wo;  // effective weights (base + A*B) when not branched
    // adapter-dropout form keeps the branch separate
    Var base_q, base_k, base_v, base_o;
    Var a_q, b_q, a_k, b_k, a_v, b_v, a_o, b_o;
  };
  std::vector<Layer> layers;
  bool branched = false;  // dropout form: base + drop(x) * A * B
  DropoutSpec dropout;
};

EncoderBinding bind_encoder(Tape& tape, EncoderParams& params, BindMode mode,
                            const DropoutSpec* dropout = nullptr);
EncoderBinding bind_encoder(Tape& tape, const EncoderParams& params);  // frozen

// Final-layer hidden states [n x D].
Var encoder_hidden(Tape& tape, const EncoderBinding& bind, std::span<const int> tokens);

// Mean pool of final hidden states over non-PAD positions -> [1 x D].
Var encode_var(Tape& tape, const EncoderBinding& bind, std::span<const int> tokens);

// Log distribution over the next token per position -> [n x |V|].
Var token_logprob_rows(Tape& tape, const EncoderBinding& bind, std::span<const int> tokens);

// --- convenience (no-grad) ------------------------------------------------

Tensor encode(const EncoderParams& params, const std::string& text);
Tensor encode_tokens(const EncoderParams& params, std::span<const int> tokens);
Tensor next_token_logprobs(const EncoderParams& params, std::span<const int> prefix);

// Greedy decoding (argmax, ties to the lowest token id), stopping at EOS,
// max_new tokens, or the context window. temperature > 0 switches to
// seeded sampling. Returns generated ids without the terminating EOS.
std::vector<int> greedy_generate(const EncoderParams& params, std::span<const int> prompt,
                                 int max_new, double temperature = 0.0,
                                 std::uint64_t seed = 0);

// --- checkpoint io ---------------------------------------------------------
// Text header (key=value lines, blank-line terminated) followed by tensors
// in a fixed order: tok_embed, pos_embed, per layer [ln1 g/b, wq, wk, wv,
// wo, lora q/k/v/o A then B, ln2 g/b, ff1, ff2], lnf g/b, head.

void save_encoder(std::ostream& os, const EncoderParams& params);
EncoderParams load_encoder(std::istream& is);

}  // namespace tagcot
