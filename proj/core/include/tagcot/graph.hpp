#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tagcot/errors.hpp"

namespace tagcot {

enum class Split : std::uint8_t { kTrain, kVal, kTest, kUnlabeled };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct NodeRecord {
  std::uint32_t id = 0;
  std::string text;
  std::optional<int> label;  // 1 = fraudulent
  Split split = Split::kUnlabeled;
};

// Result of layered neighbor sampling: a tree rooted at the target whose
// depth-d nodes are the hop-d sampled neighbors, children grouped per
// relation in registration order.
struct SampleNode {
  std::uint32_t id = 0;
  std::vector<std::vector<SampleNode>> children;  // children[relation]
  std::size_t subtree_size() const;
};

struct LayeredSample {
  std::uint32_t target = 0;
  int hops = 0;
  std::uint64_t seed = 0;
  SampleNode root;

  std::size_t total_nodes() const { return root.subtree_size(); }
  // ids at a given hop distance (0 = target), in traversal order
  std::vector<std::uint32_t> ids_at_hop(int hop) const;
};

struct EgoGraph {
  std::uint32_t target = 0;
  std::string target_text;
  // parallel to the graph's relation list; (id, text), ascending by id
  std::vector<std::vector<std::pair<std::uint32_t, std::string>>> neighbors;
};

// Undirected heterogeneous text-attributed graph with relation-typed
// adjacency. Mutation is single-threaded and only allowed before freeze();
// after freeze() the graph is immutable and safe for concurrent reads.
class HeteroGraph {
 public:
  std::size_t add_relation(const std::string& name);
  std::uint32_t add_node(std::string text, std::optional<int> label, Split split);
  // Symmetric, idempotent for duplicates; self-loops are rejected because
  // aggregation injects the self term itself.
  void add_edge(std::uint32_t u, std::uint32_t v, std::size_t relation);
  void add_edge(std::uint32_t u, std::uint32_t v, const std::string& relation);
  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_relations() const { return relations_.size(); }
  std::size_t num_edges() const;  // undirected pair count over all relations
  const std::vector<std::string>& relations() const { return relations_; }
  std::size_t relation_index(const std::string& name) const;
  const NodeRecord& node(std::uint32_t id) const;

  const std::vector<std::uint32_t>& neighbors(std::uint32_t v, std::size_t relation) const;
  const std::vector<std::uint32_t>& neighbors(std::uint32_t v, const std::string& rel) const;
  std::vector<std::uint32_t> all_neighbors(std::uint32_t v) const;  // union, sorted
  std::size_t degree(std::uint32_t v, std::size_t relation) const;

  std::vector<std::uint32_t> split_ids(Split s) const;

  // Uniform without replacement per (parent, relation); parents with at most
  // K neighbors contribute all of them. Deterministic per (graph, v, K, H,
  // seed). Safe to call concurrently on a frozen graph.
  LayeredSample sample_neighborhood(std::uint32_t v, int k, int hops,
                                    std::uint64_t seed) const;

  // Neighbor texts grouped per relation, ascending id, at most `cap` per
  // relation. Used for prompt construction.
  EgoGraph ego_graph(std::uint32_t v, int depth, int cap) const;

  // Line-delimited JSON: header {relations, num_nodes}, one node object per
  // line, then one edge object per line.
  std::string to_jsonl() const;
  static HeteroGraph from_jsonl(const std::string& content);

 private:
  void check_node(std::uint32_t id) const;
  void check_mutable() const;

  std::vector<NodeRecord> nodes_;
  std::vector<std::string> relations_;
  // adjacency_[relation][node] = sorted, duplicate-free neighbor ids
  std::vector<std::vector<std::vector<std::uint32_t>>> adjacency_;
  bool frozen_ = false;
};

}  // namespace tagcot
