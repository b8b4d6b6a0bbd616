#include "learn/traversal.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <queue>
#include <set>

#include "learn/error.hpp"
#include "learn/random.hpp"

namespace learn {

std::vector<std::string> find_cycle(const std::vector<std::string>& ids,
                                    const std::vector<std::pair<std::string, std::string>>& edges) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& id : ids) out[id];
  for (const auto& [a, b] : edges) out[a].push_back(b);
  for (auto& [id, next] : out) std::sort(next.begin(), next.end());

  enum Color { White, Grey, Black };
  std::map<std::string, Color> color;
  std::vector<std::string> stack;
  std::vector<std::string> cycle;
  std::function<bool(const std::string&)> visit = [&](const std::string& u) {
    color[u] = Grey;
    stack.push_back(u);
    for (const auto& v : out[u]) {
      if (color[v] == Grey) {
        auto it = std::find(stack.begin(), stack.end(), v);
        cycle.assign(it, stack.end());
        cycle.push_back(v);
        return true;
      }
      if (color[v] == White && visit(v)) return true;
    }
    stack.pop_back();
    color[u] = Black;
    return false;
  };
  for (const auto& [id, next] : out) {
    if (color[id] == White && visit(id)) return cycle;
  }
  return {};
}

ConceptGraph::ConceptGraph(std::vector<ConceptNode> nodes, std::vector<std::pair<std::string, std::string>> edges)
    : nodes_(std::move(nodes)), edges_(std::move(edges)) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].id.empty()) throw Error(ErrorCode::ParseError, "node " + std::to_string(i) + " has an empty id");
    if (!index_.emplace(nodes_[i].id, i).second) throw Error(ErrorCode::DuplicateId, "duplicate concept id '" + nodes_[i].id + "'");
    ids.push_back(nodes_[i].id);
  }
  for (const auto& [a, b] : edges_) {
    for (const auto* end : {&a, &b}) {
      if (!index_.count(*end)) throw Error(ErrorCode::UnknownNodeInEdge, "edge " + a + " -> " + b + " references unknown node '" + *end + "'");
    }
  }
  const auto cycle = find_cycle(ids, edges_);
  if (!cycle.empty()) {
    std::string path;
    for (std::size_t i = 0; i < cycle.size(); ++i) path += (i ? " -> " : "") + cycle[i];
    throw Error(ErrorCode::CycleDetected, "cycle " + path);
  }
}

ConceptGraph ConceptGraph::from_json(const nlohmann::json& j) {
  std::vector<ConceptNode> nodes;
  std::vector<std::pair<std::string, std::string>> edges;
  try {
    for (const auto& n : j.at("nodes")) {
      ConceptNode c;
      c.id = n.at("id").get<std::string>();
      c.prompt = n.value("prompt", c.id);
      c.tags = n.value("tags", std::vector<std::string>{});
      nodes.push_back(std::move(c));
    }
    for (const auto& e : j.value("edges", nlohmann::json::array())) {
      if (!e.is_array() || e.size() != 2) throw Error(ErrorCode::ParseError, "edges must be [prerequisite, dependent] pairs");
      edges.emplace_back(e.at(0).get<std::string>(), e.at(1).get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("concept graph: ") + e.what());
  }
  return ConceptGraph(std::move(nodes), std::move(edges));
}

nlohmann::json ConceptGraph::to_json() const {
  nlohmann::json j;
  j["nodes"] = nlohmann::json::array();
  for (const auto& n : nodes_) j["nodes"].push_back({{"id", n.id}, {"prompt", n.prompt}, {"tags", n.tags}});
  j["edges"] = nlohmann::json::array();
  for (const auto& [a, b] : edges_) j["edges"].push_back({a, b});
  return j;
}

const ConceptNode& ConceptGraph::node(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) throw Error(ErrorCode::UnknownConcept, "unknown concept '" + id + "'");
  return nodes_[it->second];
}

std::vector<std::string> ConceptGraph::prerequisites(const std::string& id) const {
  node(id);
  std::vector<std::string> out;
  for (const auto& [a, b] : edges_) {
    if (b == id) out.push_back(a);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

ConceptGraph load_concept_graph(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open concept graph " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  return ConceptGraph::from_json(j);
}

std::vector<std::string> ancestor_closure(const ConceptGraph& g, const std::string& c0) {
  g.node(c0);
  std::map<std::string, std::vector<std::string>> parents;
  for (const auto& [a, b] : g.edges()) parents[b].push_back(a);
  std::set<std::string> seen{c0};
  std::vector<std::string> frontier{c0};
  while (!frontier.empty()) {
    const std::string u = frontier.back();
    frontier.pop_back();
    for (const auto& p : parents[u]) {
      if (seen.insert(p).second) frontier.push_back(p);
    }
  }
  return {seen.begin(), seen.end()};
}

TraversalPlan curriculum_order(const ConceptGraph& g, const std::string& c0) {
  const auto closure = ancestor_closure(g, c0);
  const std::set<std::string> members(closure.begin(), closure.end());
  std::map<std::string, int> indegree;
  std::map<std::string, std::set<std::string>> out;
  for (const auto& id : closure) indegree[id] = 0;
  for (const auto& [a, b] : g.edges()) {
    if (members.count(a) && members.count(b) && out[a].insert(b).second) ++indegree[b];
  }
  std::priority_queue<std::string, std::vector<std::string>, std::greater<>> ready;
  for (const auto& [id, d] : indegree) {
    if (d == 0) ready.push(id);
  }
  TraversalPlan plan;
  plan.target = c0;
  while (!ready.empty()) {
    const std::string u = ready.top();
    ready.pop();
    plan.ordered_concepts.push_back(u);
    for (const auto& v : out[u]) {
      if (--indegree[v] == 0) ready.push(v);
    }
  }
  return plan;
}

std::uint64_t concept_seed(std::uint64_t seed, const std::string& id) { return seed + stable_hash(id); }

std::vector<TraversalFrame> learn_traverse(const ConceptGraph& g, const std::string& c0,
                                           const LayoutDecoderModel& layout_model, const GeneratorModel& gen_model,
                                           const EncoderHandle& enc, std::uint64_t seed, int num_steps) {
  const TraversalPlan plan = curriculum_order(g, c0);
  std::vector<TraversalFrame> frames;
  for (const auto& id : plan.ordered_concepts) {
    try {
      TraversalFrame f;
      f.concept_id = id;
      f.layout = predict_layout(layout_model, g.node(id).prompt, enc).layout;
      f.image = generate(gen_model, f.layout, enc, concept_seed(seed, id), num_steps);
      frames.push_back(std::move(f));
    } catch (const Error& e) {
      throw Error(e.code(), "concept '" + id + "': " + e.detail());
    }
  }
  return frames;
}

}  // namespace learn
