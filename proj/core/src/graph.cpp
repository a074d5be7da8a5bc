#include "tagcot/graph.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

#include "tagcot/rng.hpp"

namespace tagcot {

using nlohmann::json;

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
    case Split::kUnlabeled:
      return "unlabeled";
  }
  return "unlabeled";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  if (name == "unlabeled") return Split::kUnlabeled;
  throw ConfigError("unknown split name: " + name);
}

std::size_t SampleNode::subtree_size() const {
  std::size_t n = 1;
  for (const auto& rel : children) {
    for (const auto& child : rel) n += child.subtree_size();
  }
  return n;
}

namespace {
void collect_hop(const SampleNode& node, int depth, int want,
                 std::vector<std::uint32_t>& out) {
  if (depth == want) {
    out.push_back(node.id);
    return;
  }
  for (const auto& rel : node.children) {
    for (const auto& child : rel) collect_hop(child, depth + 1, want, out);
  }
}
}  // namespace

std::vector<std::uint32_t> LayeredSample::ids_at_hop(int hop) const {
  std::vector<std::uint32_t> out;
  collect_hop(root, 0, hop, out);
  return out;
}

void HeteroGraph::check_mutable() const {
  if (frozen_) throw ContractError("graph is frozen; mutation is not allowed");
}

void HeteroGraph::check_node(std::uint32_t id) const {
  if (id >= nodes_.size()) {
    throw ContractError("node id " + std::to_string(id) + " out of range (have " +
                        std::to_string(nodes_.size()) + " nodes)");
  }
}

std::size_t HeteroGraph::add_relation(const std::string& name) {
  check_mutable();
  for (const auto& r : relations_) {
    if (r == name) throw ConfigError("relation already registered: " + name);
  }
  relations_.push_back(name);
  adjacency_.emplace_back(nodes_.size());
  return relations_.size() - 1;
}

std::uint32_t HeteroGraph::add_node(std::string text, std::optional<int> label, Split split) {
  check_mutable();
  if (label && (*label != 0 && *label != 1)) {
    throw ConfigError("node label must be binary, got " + std::to_string(*label));
  }
  if (label && split == Split::kUnlabeled) {
    throw ContractError("labeled node cannot sit in the unlabeled split");
  }
  NodeRecord rec;
  rec.id = static_cast<std::uint32_t>(nodes_.size());
  rec.text = std::move(text);
  rec.label = label;
  rec.split = split;
  nodes_.push_back(std::move(rec));
  for (auto& adj : adjacency_) adj.emplace_back();
  return nodes_.back().id;
}

std::size_t HeteroGraph::relation_index(const std::string& name) const {
  for (std::size_t i = 0; i < relations_.size(); ++i) {
    if (relations_[i] == name) return i;
  }
  throw ConfigError("unknown relation: " + name);
}

void HeteroGraph::add_edge(std::uint32_t u, std::uint32_t v, std::size_t relation) {
  check_mutable();
  if (relation >= relations_.size()) {
    throw ConfigError("unknown relation index: " + std::to_string(relation));
  }
  check_node(u);
  check_node(v);
  if (u == v) {
    throw ContractError("self-loop rejected for node " + std::to_string(u) +
                        "; the self term is added inside aggregation");
  }
  auto insert_sorted = [](std::vector<std::uint32_t>& lst, std::uint32_t x) {
    auto it = std::lower_bound(lst.begin(), lst.end(), x);
    if (it == lst.end() || *it != x) lst.insert(it, x);
  };
  insert_sorted(adjacency_[relation][u], v);
  insert_sorted(adjacency_[relation][v], u);
}

void HeteroGraph::add_edge(std::uint32_t u, std::uint32_t v, const std::string& relation) {
  add_edge(u, v, relation_index(relation));
}

const NodeRecord& HeteroGraph::node(std::uint32_t id) const {
  check_node(id);
  return nodes_[id];
}

std::size_t HeteroGraph::num_edges() const {
  std::size_t twice = 0;
  for (const auto& rel : adjacency_) {
    for (const auto& lst : rel) twice += lst.size();
  }
  return twice / 2;
}

const std::vector<std::uint32_t>& HeteroGraph::neighbors(std::uint32_t v,
                                                         std::size_t relation) const {
  if (relation >= relations_.size()) {
    throw ConfigError("unknown relation index: " + std::to_string(relation));
  }
  check_node(v);
  return adjacency_[relation][v];
}

const std::vector<std::uint32_t>& HeteroGraph::neighbors(std::uint32_t v,
                                                         const std::string& rel) const {
  return neighbors(v, relation_index(rel));
}

std::vector<std::uint32_t> HeteroGraph::all_neighbors(std::uint32_t v) const {
  check_node(v);
  std::vector<std::uint32_t> out;
  for (std::size_t r = 0; r < relations_.size(); ++r) {
    const auto& lst = adjacency_[r][v];
    out.insert(out.end(), lst.begin(), lst.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::size_t HeteroGraph::degree(std::uint32_t v, std::size_t relation) const {
  return neighbors(v, relation).size();
}

std::vector<std::uint32_t> HeteroGraph::split_ids(Split s) const {
  std::vector<std::uint32_t> out;
  for (const auto& n : nodes_) {
    if (n.split == s) out.push_back(n.id);
  }
  return out;
}

LayeredSample HeteroGraph::sample_neighborhood(std::uint32_t v, int k, int hops,
                                               std::uint64_t seed) const {
  if (k < 1) throw ContractError("sample_neighborhood: K must be >= 1");
  if (hops < 1) throw ContractError("sample_neighborhood: H must be >= 1");
  check_node(v);

  LayeredSample sample;
  sample.target = v;
  sample.hops = hops;
  sample.seed = seed;
  sample.root.id = v;

  Rng rng(derive_seed(seed, v));
  // breadth-first expansion so the rng consumption order is fixed
  std::vector<SampleNode*> frontier = {&sample.root};
  for (int h = 0; h < hops; ++h) {
    std::vector<SampleNode*> next;
    for (SampleNode* parent : frontier) {
      parent->children.resize(relations_.size());
      for (std::size_t r = 0; r < relations_.size(); ++r) {
        const auto& cand = adjacency_[r][parent->id];
        if (cand.empty()) continue;
        auto& bucket = parent->children[r];
        if (cand.size() <= static_cast<std::size_t>(k)) {
          for (auto id : cand) bucket.push_back(SampleNode{id, {}});
        } else {
          auto idx = rng.sample_indices(static_cast<std::uint32_t>(cand.size()),
                                        static_cast<std::uint32_t>(k));
          for (auto i : idx) bucket.push_back(SampleNode{cand[i], {}});
        }
        for (auto& child : bucket) next.push_back(&child);
      }
    }
    frontier = std::move(next);
  }
  return sample;
}

EgoGraph HeteroGraph::ego_graph(std::uint32_t v, int depth, int cap) const {
  if (depth < 1) throw ContractError("ego_graph: depth must be >= 1");
  if (cap < 0) throw ContractError("ego_graph: cap must be >= 0");
  check_node(v);

  EgoGraph ego;
  ego.target = v;
  ego.target_text = nodes_[v].text;
  ego.neighbors.resize(relations_.size());
  for (std::size_t r = 0; r < relations_.size(); ++r) {
    // ascending-id BFS to `depth`, capped per relation; hop-1 ids come
    // first so a tight cap keeps the closest context
    std::vector<std::uint32_t> seen;
    std::vector<std::uint32_t> frontier = {v};
    for (int d = 0; d < depth; ++d) {
      std::vector<std::uint32_t> next;
      for (auto u : frontier) {
        for (auto w : adjacency_[r][u]) {
          if (w == v) continue;
          if (std::find(seen.begin(), seen.end(), w) != seen.end()) continue;
          seen.push_back(w);
          next.push_back(w);
        }
      }
      frontier = std::move(next);
      if (seen.size() >= static_cast<std::size_t>(cap)) break;
    }
    if (seen.size() > static_cast<std::size_t>(cap)) seen.resize(static_cast<std::size_t>(cap));
    for (auto id : seen) ego.neighbors[r].emplace_back(id, nodes_[id].text);
  }
  return ego;
}

std::string HeteroGraph::to_jsonl() const {
  std::ostringstream os;
  json header;
  header["relations"] = relations_;
  header["num_nodes"] = nodes_.size();
  os << header.dump() << '\n';
  for (const auto& n : nodes_) {
    json j;
    j["id"] = n.id;
    j["text"] = n.text;
    if (n.label) {
      j["label"] = *n.label;
    } else {
      j["label"] = nullptr;
    }
    j["split"] = split_name(n.split);
    os << j.dump() << '\n';
  }
  for (std::size_t r = 0; r < relations_.size(); ++r) {
    for (std::uint32_t u = 0; u < nodes_.size(); ++u) {
      for (auto v : adjacency_[r][u]) {
        if (v <= u) continue;
        json j;
        j["u"] = u;
        j["v"] = v;
        j["rel"] = relations_[r];
        os << j.dump() << '\n';
      }
    }
  }
  return os.str();
}

HeteroGraph HeteroGraph::from_jsonl(const std::string& content) {
  std::istringstream is(content);
  std::string line;
  if (!std::getline(is, line)) throw ArtifactError("graph file is empty");

  HeteroGraph g;
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw ArtifactError(std::string("graph header is not valid JSON: ") + e.what());
  }
  if (!header.contains("relations") || !header.contains("num_nodes")) {
    throw ArtifactError("graph header must declare relations and num_nodes");
  }
  for (const auto& r : header["relations"]) g.add_relation(r.get<std::string>());
  const auto expected_nodes = header["num_nodes"].get<std::size_t>();

  std::size_t line_no = 1;
  try {
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      json j = json::parse(line);
      if (j.contains("id")) {
        std::optional<int> label;
        if (!j["label"].is_null()) label = j["label"].get<int>();
        const auto id = g.add_node(j["text"].get<std::string>(), label,
                                   split_from_name(j["split"].get<std::string>()));
        if (id != j["id"].get<std::uint32_t>()) {
          throw ArtifactError("node ids must be dense and in order");
        }
      } else {
        g.add_edge(j["u"].get<std::uint32_t>(), j["v"].get<std::uint32_t>(),
                   j["rel"].get<std::string>());
      }
    }
  } catch (const json::exception& e) {
    throw ArtifactError("graph file line " + std::to_string(line_no) + ": " + e.what());
  }
  if (g.num_nodes() != expected_nodes) {
    throw ArtifactError("graph header declares " + std::to_string(expected_nodes) +
                        " nodes but file has " + std::to_string(g.num_nodes()));
  }
  g.freeze();
  return g;
}

}  // namespace tagcot
