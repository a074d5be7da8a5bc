#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tagcot/distill.hpp"
#include "tagcot/graph.hpp"

namespace tagcot {

// Synthetic heterogeneous fraud-graph generator. The label signal is split
// between the node text (cue phrases, strength c) and the neighborhood
// label density (homophily pi), so semantic and structural effects can be
// tuned independently.
struct SynthConfig {
  int nodes = 2000;
  double fraud_rate = 0.3;                // rho
  int relations = 3;
  std::vector<double> mean_degree = {6};  // per relation; size 1 broadcasts
  std::vector<double> homophily = {0.8};  // pi per relation; size 1 broadcasts
  double cue_strength = 0.5;              // c
  std::uint64_t seed = 42;
  // draw exactly round(rho * N) fraud labels instead of Bernoulli(rho);
  // keeps split sizes exactly proportional across a node-count sweep
  bool exact_label_counts = false;

  void validate() const;
  double degree_for(std::size_t relation) const;
  double homophily_for(std::size_t relation) const;
};

// Cue vocabularies shared by the generator and the synthetic teacher.
const std::vector<std::string>& fraud_cues();
const std::vector<std::string>& benign_cues();

// Labels Bernoulli(rho); fraudulent nodes carry a fraud cue with probability
// c (a benign cue otherwise); benign nodes always carry benign cues. Edges
// prefer same-label endpoints with probability pi per relation. Splits are
// stratified 60/20/20 per class. Deterministic per seed.
HeteroGraph generate_graph(const SynthConfig& config);

// Circulant graph where every node has exactly `degree` neighbors under each
// relation (degree must be even); all nodes labeled and in the train split.
// The closed-form call-count laws are checked on this construction.
HeteroGraph make_regular_graph(int nodes, int degree, int relations = 1);

// Stand-in teacher: emits two node-level reason lines citing cue phrases
// found in the prompt, one connection-level line about neighbor cue density,
// and a final "Prediction: <class>" line that matches the true class with
// probability `accuracy`. Output always parses under parse_prediction.
std::string synthetic_teacher(const std::string& prompt, int true_label, double accuracy,
                              std::uint64_t seed);

// Teacher-interface adapter over synthetic_teacher; resolves true labels
// through the graph.
class SyntheticTeacher : public Teacher {
 public:
  SyntheticTeacher(const HeteroGraph& graph, double accuracy)
      : graph_(graph), accuracy_(accuracy) {}
  std::string generate(const PromptRecord& prompt, int path_index, std::uint64_t seed) override;
  bool concurrent_safe() const override { return true; }

 private:
  const HeteroGraph& graph_;
  double accuracy_;
};

}  // namespace tagcot
