#include "tagcot/synth.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tagcot/rng.hpp"

namespace tagcot {

void SynthConfig::validate() const {
  if (nodes < 20) throw ConfigError("synth: nodes must be >= 20");
  if (fraud_rate <= 0.0 || fraud_rate >= 1.0) throw ConfigError("synth: fraud_rate must lie in (0, 1)");
  if (relations < 1) throw ConfigError("synth: relations must be >= 1");
  if (cue_strength < 0.0 || cue_strength > 1.0) throw ConfigError("synth: cue_strength must lie in [0, 1]");
  auto check_per_rel = [&](const std::vector<double>& v, const char* name) {
    if (v.empty() || (v.size() != 1 && v.size() != static_cast<std::size_t>(relations))) {
      throw ConfigError(std::string("synth: ") + name + " must have 1 or `relations` entries");
    }
  };
  check_per_rel(mean_degree, "mean_degree");
  check_per_rel(homophily, "homophily");
  for (double d : mean_degree) {
    if (d < 0.0 || d >= nodes / 4.0) {
      throw ConfigError("synth: mean_degree " + std::to_string(d) + " infeasible for " +
                        std::to_string(nodes) + " nodes");
    }
  }
  for (double h : homophily) {
    if (h < 0.0 || h > 1.0) throw ConfigError("synth: homophily must lie in [0, 1]");
  }
}

double SynthConfig::degree_for(std::size_t relation) const {
  return mean_degree.size() == 1 ? mean_degree[0] : mean_degree[relation];
}

double SynthConfig::homophily_for(std::size_t relation) const {
  return homophily.size() == 1 ? homophily[0] : homophily[relation];
}

const std::vector<std::string>& fraud_cues() {
  static const std::vector<std::string> cues = {
      "limited time cashback offer", "click the bonus link now",
      "guaranteed free gift voucher", "act fast exclusive deal today",
      "instant reward for five stars",
  };
  return cues;
}

const std::vector<std::string>& benign_cues() {
  static const std::vector<std::string> cues = {
      "arrived on time",      "works as described",  "good value for money",
      "matches the photos",   "sturdy build quality",
  };
  return cues;
}

namespace {

const std::vector<std::string>& openers() {
  static const std::vector<std::string> v = {"review:", "quick note:", "update:",
                                             "after a week:", "short take:"};
  return v;
}

const std::vector<std::string>& noise_words() {
  static const std::vector<std::string> v = {
      "box",    "color",  "size",   "shipping", "seller", "battery", "manual",
      "fabric", "hinge",  "screen", "cable",    "strap",  "zipper",  "finish",
  };
  return v;
}

std::string make_text(Rng& rng, bool fraud, double cue_strength) {
  const auto& pool = (fraud && rng.bernoulli(cue_strength)) ? fraud_cues() : benign_cues();
  std::ostringstream os;
  os << openers()[rng.below(openers().size())] << ' ' << pool[rng.below(pool.size())] << "; "
     << noise_words()[rng.below(noise_words().size())] << ' '
     << noise_words()[rng.below(noise_words().size())] << " noted";
  return os.str();
}

std::vector<Split> stratified_splits(const std::vector<int>& labels, Rng& rng) {
  std::vector<Split> out(labels.size(), Split::kTrain);
  for (int cls = 0; cls <= 1; ++cls) {
    std::vector<std::uint32_t> ids;
    for (std::uint32_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) ids.push_back(i);
    }
    rng.shuffle(ids);
    // integer 60/20/20 so sweep node counts give exactly proportional splits
    const std::size_t n_train = ids.size() * 6 / 10;
    const std::size_t n_val = ids.size() * 2 / 10;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      out[ids[k]] = k < n_train ? Split::kTrain : (k < n_train + n_val ? Split::kVal : Split::kTest);
    }
  }
  return out;
}

}  // namespace

HeteroGraph generate_graph(const SynthConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, 0x5e17));
  const auto n = static_cast<std::size_t>(config.nodes);

  // labels
  std::vector<int> labels(n, 0);
  if (config.exact_label_counts) {
    const auto n_fraud = static_cast<std::size_t>(
        std::llround(config.fraud_rate * static_cast<double>(config.nodes)));
    std::vector<std::uint32_t> ids(n);
    for (std::uint32_t i = 0; i < n; ++i) ids[i] = i;
    rng.shuffle(ids);
    for (std::size_t k = 0; k < n_fraud; ++k) labels[ids[k]] = 1;
  } else {
    for (auto& y : labels) y = rng.bernoulli(config.fraud_rate) ? 1 : 0;
  }

  const auto splits = stratified_splits(labels, rng);

  HeteroGraph g;
  for (int r = 0; r < config.relations; ++r) {
    static const char* kNames[3] = {"same_user", "same_item", "same_period"};
    g.add_relation(r < 3 ? kNames[r] : "rel" + std::to_string(r + 1));
  }
  for (std::size_t i = 0; i < n; ++i) {
    g.add_node(make_text(rng, labels[i] == 1, config.cue_strength), labels[i], splits[i]);
  }

  std::vector<std::uint32_t> by_label[2];
  for (std::uint32_t i = 0; i < n; ++i) by_label[labels[i]].push_back(i);
  if (by_label[0].empty() || by_label[1].empty()) {
    throw ConfigError("synth: degenerate label draw; adjust fraud_rate or seed");
  }

  for (std::size_t r = 0; r < static_cast<std::size_t>(config.relations); ++r) {
    const auto target_edges =
        static_cast<std::size_t>(std::llround(config.degree_for(r) * static_cast<double>(n) / 2.0));
    const double pi = config.homophily_for(r);
    std::size_t failures = 0;
    for (std::size_t e = 0; e < target_edges; ++e) {
      bool placed = false;
      for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
        const auto u = static_cast<std::uint32_t>(rng.below(n));
        const bool same = rng.bernoulli(pi);
        const auto& pool = by_label[same ? labels[u] : 1 - labels[u]];
        const auto v = pool[rng.below(pool.size())];
        if (u == v) continue;
        const auto& adj = g.neighbors(u, r);
        if (std::binary_search(adj.begin(), adj.end(), v)) continue;
        g.add_edge(u, v, r);
        placed = true;
      }
      if (!placed) ++failures;
    }
    if (failures > target_edges / 10) {
      throw ConfigError("synth: degree target infeasible for relation " +
                        g.relations()[r] + " (" + std::to_string(failures) + " placement failures)");
    }
  }
  g.freeze();
  return g;
}

HeteroGraph make_regular_graph(int nodes, int degree, int relations) {
  if (degree < 2 || degree % 2 != 0) {
    throw ConfigError("make_regular_graph: degree must be even and >= 2");
  }
  if (nodes <= degree) throw ConfigError("make_regular_graph: nodes must exceed degree");
  HeteroGraph g;
  for (int r = 0; r < relations; ++r) g.add_relation("ring" + std::to_string(r + 1));
  Rng rng(0x2e6);
  for (int i = 0; i < nodes; ++i) {
    g.add_node(make_text(rng, i % 3 == 0, 0.5), i % 3 == 0 ? 1 : 0, Split::kTrain);
  }
  const auto n = static_cast<std::uint32_t>(nodes);
  for (int r = 0; r < relations; ++r) {
    for (std::uint32_t i = 0; i < n; ++i) {
      for (int off = 1; off <= degree / 2; ++off) {
        // circulant offsets shifted per relation so relation edge sets differ
        const auto j = (i + static_cast<std::uint32_t>(off + r * (degree / 2))) % n;
        g.add_edge(i, j, static_cast<std::size_t>(r));
      }
    }
  }
  g.freeze();
  return g;
}

// ---------------------------------------------------------------------------
// Synthetic teacher
// ---------------------------------------------------------------------------

namespace {

struct PromptScan {
  std::vector<std::string> target_cues_fraud;
  std::vector<std::string> target_cues_benign;
  std::size_t neighbor_lines = 0;
  std::size_t neighbor_fraud_lines = 0;
  std::string positive_word = "Fraudulent";
  std::string negative_word = "Legitimate";
};

PromptScan scan_prompt(const std::string& prompt) {
  PromptScan scan;
  std::istringstream is(prompt);
  std::string line;
  bool in_neighbors = false;
  std::string target_text;
  while (std::getline(is, line)) {
    if (line.rfind("Target Node:", 0) == 0) {
      target_text = line;
      in_neighbors = false;
    } else if (line.rfind("Neighbors", 0) == 0) {
      in_neighbors = true;
    } else if (line.rfind("Relation:", 0) == 0 && in_neighbors) {
      ++scan.neighbor_lines;
      for (const auto& cue : fraud_cues()) {
        if (line.find(cue) != std::string::npos) {
          ++scan.neighbor_fraud_lines;
          break;
        }
      }
    } else if (line.rfind("3.", 0) == 0) {
      // prediction instruction carries "(<negative> / <positive>)"
      const auto open = line.rfind('(');
      const auto slash = line.find('/', open);
      const auto close = line.find(')', slash);
      if (open != std::string::npos && slash != std::string::npos && close != std::string::npos) {
        auto trim = [](std::string s) {
          const auto b = s.find_first_not_of(' ');
          const auto e = s.find_last_not_of(' ');
          return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        scan.negative_word = trim(line.substr(open + 1, slash - open - 1));
        scan.positive_word = trim(line.substr(slash + 1, close - slash - 1));
      }
    }
  }
  for (const auto& cue : fraud_cues()) {
    if (target_text.find(cue) != std::string::npos) scan.target_cues_fraud.push_back(cue);
  }
  for (const auto& cue : benign_cues()) {
    if (target_text.find(cue) != std::string::npos) scan.target_cues_benign.push_back(cue);
  }
  return scan;
}

}  // namespace

std::string synthetic_teacher(const std::string& prompt, int true_label, double accuracy,
                              std::uint64_t seed) {
  if (accuracy < 0.0 || accuracy > 1.0) {
    throw ConfigError("synthetic_teacher: accuracy must lie in [0, 1]");
  }
  Rng rng(derive_seed(seed, 0x7ea));
  const bool correct = rng.bernoulli(accuracy);
  const int predicted = correct ? true_label : 1 - true_label;
  const auto scan = scan_prompt(prompt);

  std::ostringstream os;
  if (predicted == 1) {
    if (!scan.target_cues_fraud.empty()) {
      os << "1. Target text leans on promotion bait: \""
         << scan.target_cues_fraud[rng.below(scan.target_cues_fraud.size())] << "\".\n";
    } else if (!scan.target_cues_benign.empty()) {
      // wrong-side call: cast an ordinary phrase as suspicious
      os << "1. The phrase \""
         << scan.target_cues_benign[rng.below(scan.target_cues_benign.size())]
         << "\" reads like boilerplate filler.\n";
    } else {
      os << "1. Target wording feels scripted despite plain phrasing.\n";
    }
    os << (rng.bernoulli(0.5) ? "2. Tone pushes urgency rather than experience.\n"
                              : "2. Wording repeats promotional framing.\n");
    if (scan.neighbor_lines == 0) {
      os << "3. No connected records to corroborate, which is itself unusual.\n";
    } else if (scan.neighbor_fraud_lines * 2 >= scan.neighbor_lines) {
      os << "3. Connections: " << scan.neighbor_fraud_lines << " of " << scan.neighbor_lines
         << " linked records carry similar bait phrasing.\n";
    } else {
      os << "3. Connections look mixed; some linked records still repeat bait wording.\n";
    }
  } else {
    if (!scan.target_cues_benign.empty()) {
      os << "1. Target text reports concrete experience: \""
         << scan.target_cues_benign[rng.below(scan.target_cues_benign.size())] << "\".\n";
    } else {
      os << "1. Looks normal.\n";
    }
    os << (rng.bernoulli(0.5) ? "2. No promotional pressure in the wording.\n"
                              : "2. Specific detail suggests genuine use.\n");
    if (scan.neighbor_lines == 0) {
      os << "3. Looks normal.\n";
    } else if (scan.neighbor_fraud_lines * 2 >= scan.neighbor_lines) {
      os << "3. Connections: some linked records look promotional, but the target stays factual.\n";
    } else {
      os << "3. Connections: linked records read like ordinary reviews.\n";
    }
  }
  os << "Prediction: " << (predicted == 1 ? scan.positive_word : scan.negative_word);
  return os.str();
}

std::string SyntheticTeacher::generate(const PromptRecord& prompt, int path_index,
                                       std::uint64_t seed) {
  const auto& label = graph_.node(prompt.node).label;
  if (!label) {
    throw ContractError("synthetic teacher: node " + std::to_string(prompt.node) + " is unlabeled");
  }
  return synthetic_teacher(prompt.text, *label,
                           accuracy_, derive_seed(seed, static_cast<std::uint64_t>(path_index)));
}

}  // namespace tagcot
