#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "learn/caption2layout.hpp"
#include "learn/diffusion.hpp"

namespace learn {

struct ConceptNode {
  std::string id;
  std::string prompt;
  std::vector<std::string> tags;

  friend bool operator==(const ConceptNode&, const ConceptNode&) = default;
};

/// Validated prerequisite DAG. Edges point from prerequisite to dependent.
class ConceptGraph {
 public:
  ConceptGraph() = default;
  /// Throws DuplicateId, UnknownNodeInEdge or CycleDetected.
  ConceptGraph(std::vector<ConceptNode> nodes, std::vector<std::pair<std::string, std::string>> edges);

  static ConceptGraph from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  const std::vector<ConceptNode>& nodes() const { return nodes_; }
  const std::vector<std::pair<std::string, std::string>>& edges() const { return edges_; }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  const ConceptNode& node(const std::string& id) const;
  /// Direct prerequisites of `id`, sorted.
  std::vector<std::string> prerequisites(const std::string& id) const;

  friend bool operator==(const ConceptGraph& a, const ConceptGraph& b) {
    return a.nodes_ == b.nodes_ && a.edges_ == b.edges_;
  }

 private:
  std::vector<ConceptNode> nodes_;
  std::vector<std::pair<std::string, std::string>> edges_;
  std::map<std::string, std::size_t> index_;
};

/// One cycle as a closed id path (first id repeated at the end), or empty.
std::vector<std::string> find_cycle(const std::vector<std::string>& ids,
                                    const std::vector<std::pair<std::string, std::string>>& edges);

ConceptGraph load_concept_graph(const std::filesystem::path& path);

struct TraversalPlan {
  std::string target;
  std::vector<std::string> ordered_concepts;
};

/// Ancestor closure of c0 (c0 included), sorted by id.
std::vector<std::string> ancestor_closure(const ConceptGraph& g, const std::string& c0);

/// Topological order of the ancestor closure, smallest id first among ready
/// nodes; c0 comes last.
TraversalPlan curriculum_order(const ConceptGraph& g, const std::string& c0);

/// seed + stable_hash(id), wrapping.
std::uint64_t concept_seed(std::uint64_t seed, const std::string& id);

struct TraversalFrame {
  std::string concept_id;
  Layout layout;
  Image image;
};

std::vector<TraversalFrame> learn_traverse(const ConceptGraph& g, const std::string& c0,
                                           const LayoutDecoderModel& layout_model, const GeneratorModel& gen_model,
                                           const EncoderHandle& enc, std::uint64_t seed, int num_steps);

}  // namespace learn
