#include "tagcot/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "tagcot/serialize.hpp"

namespace tagcot {

void EncoderConfig::validate() const {
  if (layers < 1) throw ConfigError("encoder: layers must be >= 1");
  if (hidden < 1) throw ConfigError("encoder: hidden must be >= 1");
  if (heads < 1 || hidden % heads != 0) {
    throw ConfigError("encoder: hidden must be divisible by heads");
  }
  if (max_seq < 16) throw ConfigError("encoder: max_seq must be >= 16");
  if (lora_rank < 0) throw ConfigError("encoder: lora_rank must be >= 0");
  if (lora_dropout < 0.0 || lora_dropout >= 1.0) {
    throw ConfigError("encoder: lora_dropout must lie in [0, 1)");
  }
}

EncoderParams EncoderParams::init(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0xe2c0de));
  const auto d = static_cast<std::size_t>(cfg.hidden);
  const auto ff = static_cast<std::size_t>(cfg.ff_dim());

  EncoderParams p;
  p.config = cfg;
  p.tok_embed = Tensor::randn({vocab::kSize, d}, rng, 0.02);
  p.pos_embed = Tensor::randn({static_cast<std::size_t>(cfg.max_seq), d}, rng, 0.02);
  p.layers.resize(static_cast<std::size_t>(cfg.layers));
  for (auto& layer : p.layers) {
    layer.ln1_gain = Tensor({1, d}, 1.0);
    layer.ln1_bias = Tensor({1, d}, 0.0);
    layer.wq = Tensor::randn({d, d}, rng, 0.02);
    layer.wk = Tensor::randn({d, d}, rng, 0.02);
    layer.wv = Tensor::randn({d, d}, rng, 0.02);
    layer.wo = Tensor::randn({d, d}, rng, 0.02);
    layer.ln2_gain = Tensor({1, d}, 1.0);
    layer.ln2_bias = Tensor({1, d}, 0.0);
    layer.ff1 = Tensor::randn({d, ff}, rng, 0.02);
    layer.ff2 = Tensor::randn({ff, d}, rng, 0.02);
  }
  p.lnf_gain = Tensor({1, d}, 1.0);
  p.lnf_bias = Tensor({1, d}, 0.0);
  p.head = Tensor::randn({d, vocab::kSize}, rng, 0.02);
  if (cfg.lora_rank > 0) {
    apply_adapters(p, cfg.lora_rank, derive_seed(seed, 0x10a4));
  }
  return p;
}

namespace {

void for_each_adapter(EncoderParams& p, const std::function<void(LoraPair&)>& f) {
  for (auto& layer : p.layers) {
    f(layer.lora_q);
    f(layer.lora_k);
    f(layer.lora_v);
    f(layer.lora_o);
  }
}

}  // namespace

std::vector<Tensor*> EncoderParams::adapter_tensors() {
  std::vector<Tensor*> out;
  if (config.lora_rank == 0) return out;
  for_each_adapter(*this, [&](LoraPair& pair) {
    out.push_back(&pair.a);
    out.push_back(&pair.b);
  });
  return out;
}

std::vector<Tensor*> EncoderParams::norm_tensors() {
  std::vector<Tensor*> out;
  for (auto& layer : layers) {
    out.push_back(&layer.ln1_gain);
    out.push_back(&layer.ln1_bias);
    out.push_back(&layer.ln2_gain);
    out.push_back(&layer.ln2_bias);
  }
  out.push_back(&lnf_gain);
  out.push_back(&lnf_bias);
  return out;
}

std::vector<Tensor*> EncoderParams::base_tensors() {
  std::vector<Tensor*> out = {&tok_embed, &pos_embed};
  for (auto& layer : layers) {
    out.push_back(&layer.wq);
    out.push_back(&layer.wk);
    out.push_back(&layer.wv);
    out.push_back(&layer.wo);
    out.push_back(&layer.ff1);
    out.push_back(&layer.ff2);
  }
  out.push_back(&head);
  return out;
}

std::vector<Tensor*> EncoderParams::trainable_tensors() {
  auto out = adapter_tensors();
  auto norms = norm_tensors();
  out.insert(out.end(), norms.begin(), norms.end());
  return out;
}

std::vector<const Tensor*> EncoderParams::all_tensors() const {
  std::vector<const Tensor*> out = {&tok_embed, &pos_embed};
  for (const auto& layer : layers) {
    out.push_back(&layer.ln1_gain);
    out.push_back(&layer.ln1_bias);
    out.push_back(&layer.wq);
    out.push_back(&layer.wk);
    out.push_back(&layer.wv);
    out.push_back(&layer.wo);
    if (config.lora_rank > 0) {
      out.push_back(&layer.lora_q.a);
      out.push_back(&layer.lora_q.b);
      out.push_back(&layer.lora_k.a);
      out.push_back(&layer.lora_k.b);
      out.push_back(&layer.lora_v.a);
      out.push_back(&layer.lora_v.b);
      out.push_back(&layer.lora_o.a);
      out.push_back(&layer.lora_o.b);
    }
    out.push_back(&layer.ln2_gain);
    out.push_back(&layer.ln2_bias);
    out.push_back(&layer.ff1);
    out.push_back(&layer.ff2);
  }
  out.push_back(&lnf_gain);
  out.push_back(&lnf_bias);
  out.push_back(&head);
  return out;
}

void set_trainable(EncoderParams& params, bool trainable) {
  for (Tensor* t : params.base_tensors()) {
    t->requires_grad = false;
    t->grad.clear();
  }
  for (Tensor* t : params.trainable_tensors()) {
    t->requires_grad = trainable;
    t->grad.clear();
  }
}

EncoderParams snapshot_params(const EncoderParams& params) {
  EncoderParams copy = params;
  copy.registered_cache_checksum.reset();
  set_trainable(copy, false);
  return copy;
}

void apply_adapters(EncoderParams& params, int rank, std::uint64_t seed) {
  if (rank < 1) throw ConfigError("apply_adapters: rank must be >= 1");
  Rng rng(derive_seed(seed, 0xada9));
  const auto d = static_cast<std::size_t>(params.config.hidden);
  const auto r = static_cast<std::size_t>(rank);
  params.config.lora_rank = rank;
  for_each_adapter(params, [&](LoraPair& pair) {
    pair.a = Tensor::randn({d, r}, rng, 0.1);
    pair.b = Tensor({r, d}, 0.0);  // zero delta at start
  });
  params.adapters_active = true;
}

namespace {

// base += a * b, all row-major
void fold_product(Tensor& base, const Tensor& a, const Tensor& b) {
  const std::size_t d = base.rows(), r = a.cols();
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t k = 0; k < r; ++k) {
      const double aik = a.values[i * r + k];
      for (std::size_t j = 0; j < d; ++j) {
        base.values[i * d + j] += aik * b.values[k * d + j];
      }
    }
  }
}

}  // namespace

void merge_adapters(EncoderParams& params) {
  if (params.config.lora_rank == 0) return;
  if (params.registered_cache_checksum) {
    std::fprintf(stderr,
                 "warning: merging adapters under registered cache %s; cached embeddings no "
                 "longer match these parameters\n",
                 hash_hex(*params.registered_cache_checksum).c_str());
  }
  for (auto& layer : params.layers) {
    fold_product(layer.wq, layer.lora_q.a, layer.lora_q.b);
    fold_product(layer.wk, layer.lora_k.a, layer.lora_k.b);
    fold_product(layer.wv, layer.lora_v.a, layer.lora_v.b);
    fold_product(layer.wo, layer.lora_o.a, layer.lora_o.b);
  }
  for_each_adapter(params, [](LoraPair& pair) {
    std::fill(pair.a.values.begin(), pair.a.values.end(), 0.0);
    std::fill(pair.b.values.begin(), pair.b.values.end(), 0.0);
  });
}

std::uint64_t params_checksum(const EncoderParams& params) {
  Fnv1a h;
  h.update_u64(static_cast<std::uint64_t>(params.config.layers));
  h.update_u64(static_cast<std::uint64_t>(params.config.hidden));
  h.update_u64(static_cast<std::uint64_t>(params.config.heads));
  h.update_u64(static_cast<std::uint64_t>(params.config.max_seq));
  h.update_u64(static_cast<std::uint64_t>(params.config.lora_rank));
  h.update_f64(params.config.lora_dropout);
  h.update_u64(params.adapters_active ? 1 : 0);
  for (const Tensor* t : params.all_tensors()) h.update_u64(tensor_checksum(*t));
  return h.digest();
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

EncoderBinding bind_encoder(Tape& tape, EncoderParams& params, BindMode mode,
                            const DropoutSpec* dropout) {
  params.config.validate();
  EncoderBinding b;
  b.config = &params.config;
  auto bind = [&](Tensor& t) {
    return mode == BindMode::kTrainable ? tape.leaf(t) : tape.constant_ref(t);
  };
  b.tok_embed = bind(params.tok_embed);
  b.pos_embed = bind(params.pos_embed);
  b.lnf_gain = bind(params.lnf_gain);
  b.lnf_bias = bind(params.lnf_bias);
  b.head = bind(params.head);

  const bool with_adapters = params.adapters_active && params.config.lora_rank > 0;
  b.branched = with_adapters && mode == BindMode::kTrainable && dropout != nullptr &&
               dropout->rate > 0.0;
  if (b.branched) b.dropout = *dropout;

  for (auto& layer : params.layers) {
    EncoderBinding::Layer lb;
    lb.ln1_gain = bind(layer.ln1_gain);
    lb.ln1_bias = bind(layer.ln1_bias);
    lb.ln2_gain = bind(layer.ln2_gain);
    lb.ln2_bias = bind(layer.ln2_bias);
    lb.ff1 = bind(layer.ff1);
    lb.ff2 = bind(layer.ff2);
    auto eff = [&](Tensor& base, LoraPair& lora, Var& base_out, Var& a_out, Var& b_out) {
      Var base_var = bind(base);
      if (!with_adapters) return base_var;
      Var av = bind(lora.a);
      Var bv = bind(lora.b);
      if (b.branched) {
        base_out = base_var;
        a_out = av;
        b_out = bv;
        return Var{};
      }
      return tape.add(base_var, tape.matmul(av, bv));
    };
    lb.wq = eff(layer.wq, layer.lora_q, lb.base_q, lb.a_q, lb.b_q);
    lb.wk = eff(layer.wk, layer.lora_k, lb.base_k, lb.a_k, lb.b_k);
    lb.wv = eff(layer.wv, layer.lora_v, lb.base_v, lb.a_v, lb.b_v);
    lb.wo = eff(layer.wo, layer.lora_o, lb.base_o, lb.a_o, lb.b_o);
    b.layers.push_back(lb);
  }
  return b;
}

EncoderBinding bind_encoder(Tape& tape, const EncoderParams& params) {
  // frozen view; safe because kFrozen never takes non-const bindings
  return bind_encoder(tape, const_cast<EncoderParams&>(params), BindMode::kFrozen, nullptr);
}

namespace {

struct ProjRef {
  Var eff, base, a, b;
};

Var project(Tape& t, const EncoderBinding& bind, const ProjRef& p, Var x, std::uint64_t salt) {
  if (!bind.branched || !p.a.valid()) return t.matmul(x, p.eff);
  // adapter dropout: x*W + drop(x)*A*B with an inverted-dropout mask
  const auto& shape = t.shape(x);
  Tensor mask(std::vector<std::size_t>{shape[0], shape[1]});
  Rng rng(derive_seed(bind.dropout.seed, salt));
  const double keep = 1.0 - bind.dropout.rate;
  for (auto& m : mask.values) m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  Var dropped = t.mul(x, t.constant(std::move(mask)));
  return t.add(t.matmul(x, p.base), t.matmul(t.matmul(dropped, p.a), p.b));
}

}  // namespace

Var encoder_hidden(Tape& t, const EncoderBinding& bind, std::span<const int> tokens) {
  const auto& cfg = *bind.config;
  const auto n = tokens.size();
  if (n == 0) throw ContractError("encoder: empty token stream");
  if (n > static_cast<std::size_t>(cfg.max_seq)) {
    throw ContractError("encoder: sequence length " + std::to_string(n) +
                        " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  std::vector<int> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(i);

  Var x = t.add(t.embedding_lookup(bind.tok_embed, tokens),
                t.embedding_lookup(bind.pos_embed, positions));

  const int dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t li = 0; li < bind.layers.size(); ++li) {
    const auto& lb = bind.layers[li];
    Var a = t.layer_norm_rows(x, lb.ln1_gain, lb.ln1_bias);
    Var q = project(t, bind, {lb.wq, lb.base_q, lb.a_q, lb.b_q}, a, li * 4 + 0);
    Var k = project(t, bind, {lb.wk, lb.base_k, lb.a_k, lb.b_k}, a, li * 4 + 1);
    Var v = project(t, bind, {lb.wv, lb.base_v, lb.a_v, lb.b_v}, a, li * 4 + 2);

    std::vector<Var> heads;
    heads.reserve(static_cast<std::size_t>(cfg.heads));
    for (int h = 0; h < cfg.heads; ++h) {
      const auto off = static_cast<std::size_t>(h * dh);
      Var qh = t.scale(t.slice_cols(q, off, static_cast<std::size_t>(dh)), inv_sqrt_dh);
      Var kh = t.slice_cols(k, off, static_cast<std::size_t>(dh));
      Var vh = t.slice_cols(v, off, static_cast<std::size_t>(dh));
      Var probs = t.softmax_rows_causal(t.matmul(qh, t.transpose(kh)));
      heads.push_back(t.causal_attend(probs, vh));
    }
    Var attn_cat = cfg.heads == 1 ? heads[0] : t.concat_cols(heads);
    Var attn = project(t, bind, {lb.wo, lb.base_o, lb.a_o, lb.b_o}, attn_cat, li * 4 + 3);
    x = t.add(x, attn);

    Var m = t.layer_norm_rows(x, lb.ln2_gain, lb.ln2_bias);
    Var f = t.matmul(t.gelu(t.matmul(m, lb.ff1)), lb.ff2);
    x = t.add(x, f);
  }
  return t.layer_norm_rows(x, bind.lnf_gain, bind.lnf_bias);
}

Var encode_var(Tape& t, const EncoderBinding& bind, std::span<const int> tokens) {
  Var h = encoder_hidden(t, bind, tokens);
  // mean over non-PAD rows; gathering first keeps the summation order
  // independent of appended padding
  std::vector<int> live;
  live.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] != vocab::kPad) live.push_back(static_cast<int>(i));
  }
  if (live.empty()) throw ContractError("encode: all positions are PAD");
  return t.mean_rows(t.embedding_lookup(h, live));
}

Var token_logprob_rows(Tape& t, const EncoderBinding& bind, std::span<const int> tokens) {
  Var h = encoder_hidden(t, bind, tokens);
  return t.log_softmax_rows(t.matmul(h, bind.head));
}

// ---------------------------------------------------------------------------
// No-grad entry points
// ---------------------------------------------------------------------------

Tensor encode_tokens(const EncoderParams& params, std::span<const int> tokens) {
  Tape t;
  auto bind = bind_encoder(t, params);
  return t.to_tensor(encode_var(t, bind, tokens));
}

Tensor encode(const EncoderParams& params, const std::string& text) {
  const auto tokens = tokenize(text, params.config.max_seq);
  return encode_tokens(params, tokens);
}

Tensor next_token_logprobs(const EncoderParams& params, std::span<const int> prefix) {
  if (prefix.size() > static_cast<std::size_t>(params.config.max_seq)) {
    throw ContractError("next_token_logprobs: prefix length " + std::to_string(prefix.size()) +
                        " exceeds max_seq " + std::to_string(params.config.max_seq) +
                        "; truncate the prompt first");
  }
  Tape t;
  auto bind = bind_encoder(t, params);
  return t.to_tensor(token_logprob_rows(t, bind, prefix));
}

std::vector<int> greedy_generate(const EncoderParams& params, std::span<const int> prompt,
                                 int max_new, double temperature, std::uint64_t seed) {
  if (max_new < 1) throw ContractError("greedy_generate: max_new must be >= 1");
  const auto cap = static_cast<std::size_t>(params.config.max_seq);
  if (prompt.size() > cap) {
    throw ContractError("greedy_generate: prompt exceeds the context window");
  }
  std::vector<int> context(prompt.begin(), prompt.end());
  std::vector<int> generated;
  Rng rng(derive_seed(seed, 0x9e4e));

  for (int step = 0; step < max_new; ++step) {
    if (context.size() >= cap) break;  // window full; truncated output retained
    Tape t;
    auto bind = bind_encoder(t, params);
    Var h = encoder_hidden(t, bind, context);
    // logits for the last position only
    Tensor onehot({1, context.size()});
    onehot.values[context.size() - 1] = 1.0;
    Var logits = t.matmul(t.matmul(t.constant(std::move(onehot)), h), bind.head);
    auto row = t.values(logits);

    int next = 0;
    if (temperature > 0.0) {
      double mx = row[0];
      for (std::size_t j = 1; j < row.size(); ++j) mx = std::max(mx, row[j]);
      std::vector<double> probs(row.size());
      double sum = 0.0;
      for (std::size_t j = 0; j < row.size(); ++j) {
        probs[j] = std::exp((row[j] - mx) / temperature);
        sum += probs[j];
      }
      double u = rng.real01() * sum;
      for (std::size_t j = 0; j < probs.size(); ++j) {
        u -= probs[j];
        next = static_cast<int>(j);
        if (u <= 0.0) break;
      }
    } else {
      // argmax; ties break toward the lowest token id
      for (std::size_t j = 1; j < row.size(); ++j) {
        if (row[j] > row[static_cast<std::size_t>(next)]) next = static_cast<int>(j);
      }
    }
    if (next == vocab::kEos) break;
    generated.push_back(next);
    context.push_back(next);
  }
  return generated;
}

// ---------------------------------------------------------------------------
// Checkpoint io
// ---------------------------------------------------------------------------

namespace {
constexpr const char* kMagic = "tagcot-encoder-v1";
}

void save_encoder(std::ostream& os, const EncoderParams& params) {
  os << kMagic << '\n';
  os << "layers=" << params.config.layers << '\n';
  os << "hidden=" << params.config.hidden << '\n';
  os << "heads=" << params.config.heads << '\n';
  os << "max_seq=" << params.config.max_seq << '\n';
  os << "lora_rank=" << params.config.lora_rank << '\n';
  char drop[64];
  std::snprintf(drop, sizeof(drop), "%.17g", params.config.lora_dropout);
  os << "lora_dropout=" << drop << '\n';
  os << "adapters_active=" << (params.adapters_active ? 1 : 0) << '\n';
  os << '\n';
  for (const Tensor* t : params.all_tensors()) write_tensor(os, *t);
}

EncoderParams load_encoder(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kMagic) {
    throw ArtifactError("encoder checkpoint: bad magic line");
  }
  std::map<std::string, std::string> kv;
  while (std::getline(is, line) && !line.empty()) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ArtifactError("encoder checkpoint: bad header line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto geti = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw ArtifactError(std::string("encoder checkpoint: missing key ") + key);
    return std::stoi(it->second);
  };
  EncoderConfig cfg;
  cfg.layers = geti("layers");
  cfg.hidden = geti("hidden");
  cfg.heads = geti("heads");
  cfg.max_seq = geti("max_seq");
  cfg.lora_rank = geti("lora_rank");
  if (!kv.count("lora_dropout")) throw ArtifactError("encoder checkpoint: missing key lora_dropout");
  cfg.lora_dropout = std::stod(kv["lora_dropout"]);
  cfg.validate();

  EncoderParams p;
  p.config = cfg;
  p.adapters_active = geti("adapters_active") != 0;
  p.layers.resize(static_cast<std::size_t>(cfg.layers));
  // read in the same fixed order all_tensors() emits
  p.tok_embed = read_tensor(is);
  p.pos_embed = read_tensor(is);
  for (auto& layer : p.layers) {
    layer.ln1_gain = read_tensor(is);
    layer.ln1_bias = read_tensor(is);
    layer.wq = read_tensor(is);
    layer.wk = read_tensor(is);
    layer.wv = read_tensor(is);
    layer.wo = read_tensor(is);
    if (cfg.lora_rank > 0) {
      layer.lora_q.a = read_tensor(is);
      layer.lora_q.b = read_tensor(is);
      layer.lora_k.a = read_tensor(is);
      layer.lora_k.b = read_tensor(is);
      layer.lora_v.a = read_tensor(is);
      layer.lora_v.b = read_tensor(is);
      layer.lora_o.a = read_tensor(is);
      layer.lora_o.b = read_tensor(is);
    }
    layer.ln2_gain = read_tensor(is);
    layer.ln2_bias = read_tensor(is);
    layer.ff1 = read_tensor(is);
    layer.ff2 = read_tensor(is);
  }
  p.lnf_gain = read_tensor(is);
  p.lnf_bias = read_tensor(is);
  p.head = read_tensor(is);
  return p;
}

}  // namespace tagcot
