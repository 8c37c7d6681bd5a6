#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "skelnet/activation.hpp"
#include "skelnet/error.hpp"

namespace skelnet {

/// Unvalidated skeleton description, as read from a file or built in code.
struct SkeletonDraft {
  struct Node {
    std::string id;
    bool is_input = false;
    std::string activation;            // internal nodes only
    std::vector<std::string> parents;  // ordered
  };
  std::vector<Node> nodes;
  std::string output_id;

  SkeletonDraft& add_input(std::string id) {
    nodes.push_back({std::move(id), true, {}, {}});
    return *this;
  }
  SkeletonDraft& add_node(std::string id, std::string activation, std::vector<std::string> parents) {
    nodes.push_back({std::move(id), false, std::move(activation), std::move(parents)});
    return *this;
  }
  SkeletonDraft& set_output(std::string id) {
    output_id = std::move(id);
    return *this;
  }
};

/// A validated computation skeleton: a DAG with n input nodes, activation
/// labelled internal nodes and a single output node.  Instances are immutable
/// after construction and safe to share across threads.
///
/// Construction performs full validation and throws an Error whose message
/// lists every problem found (cycles, multiple sinks, missing activations,
/// dangling parents, ...).
class ComputationSkeleton {
 public:
  struct Node {
    std::string id;
    const ActivationSpec* activation = nullptr;  // null for inputs
    std::vector<int> parents;                    // node indices, declaration order
    int input_block = -1;                        // block position, inputs only
  };

  explicit ComputationSkeleton(const SkeletonDraft& draft) { build(draft); }

  int node_count() const { return static_cast<int>(nodes_.size()); }
  int input_count() const { return static_cast<int>(input_nodes_.size()); }
  // |S|: the number of non-input nodes.
  int internal_count() const { return static_cast<int>(internal_nodes_.size()); }
  int output() const { return output_; }

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(int idx) const { return nodes_[idx]; }
  bool is_input(int idx) const { return nodes_[idx].activation == nullptr; }
  int degree(int idx) const { return static_cast<int>(nodes_[idx].parents.size()); }

  // Input node indices in block order.
  const std::vector<int>& input_nodes() const { return input_nodes_; }
  // Internal node indices in topological order (parents precede children).
  const std::vector<int>& internal_nodes() const { return internal_nodes_; }

 private:
  void build(const SkeletonDraft& draft);

  std::vector<Node> nodes_;  // topological order
  std::vector<int> input_nodes_;
  std::vector<int> internal_nodes_;
  int output_ = -1;
};

struct SkeletonMetrics {
  int depth = 0;
  double comp = 1.0;
  // (8C)^depth sqrt(comp) with C the minimal bound making every activation
  // C-bounded; absent when some activation is unbounded (ReLU, identity).
  std::optional<double> c_of_s;
  // (4C)^depth sqrt(comp) with C the minimal Lipschitz/|sigma(0)| bound.
  double cprime_of_s = 0.0;
  std::vector<int> node_depths;  // by node index; inputs have depth 0

  // The two minimal activation constants the expressions above are built
  // from; exposed because several gradient and loss bounds reuse them.
  double lipschitz_c = 0.0;
  std::optional<double> bounded_c;
};

inline void ComputationSkeleton::build(const SkeletonDraft& draft) {
  std::vector<std::string> issues;
  const int n = static_cast<int>(draft.nodes.size());

  std::unordered_map<std::string, int> index;  // draft index by id
  for (int i = 0; i < n; ++i) {
    const auto& dn = draft.nodes[i];
    if (dn.id.empty()) issues.push_back("node with empty identifier");
    if (!index.emplace(dn.id, i).second) issues.push_back("duplicate identifier '" + dn.id + "'");
  }

  // Structural checks on the draft.
  std::vector<std::vector<int>> parents(n);
  for (int i = 0; i < n; ++i) {
    const auto& dn = draft.nodes[i];
    if (dn.is_input) {
      if (!dn.parents.empty()) issues.push_back("input node '" + dn.id + "' has parents");
      continue;
    }
    if (dn.activation.empty()) {
      issues.push_back("internal node '" + dn.id + "' has no activation");
    } else {
      bool known = false;
      for (const auto& act : activation_registry()) known |= (act.name == dn.activation);
      if (!known) issues.push_back("unknown activation '" + dn.activation + "' on node '" + dn.id + "'");
    }
    if (dn.parents.empty()) issues.push_back("internal node '" + dn.id + "' has no parents");
    std::set<std::string> seen;
    for (const std::string& p : dn.parents) {
      if (!seen.insert(p).second) {
        issues.push_back("duplicate parent '" + p + "' on node '" + dn.id + "'");
        continue;
      }
      auto it = index.find(p);
      if (it == index.end()) {
        issues.push_back("undefined parent '" + p + "' on node '" + dn.id + "'");
      } else {
        parents[i].push_back(it->second);
      }
    }
  }

  int output_draft = -1;
  if (draft.output_id.empty()) {
    issues.push_back("no output node designated");
  } else {
    auto it = index.find(draft.output_id);
    if (it == index.end()) {
      issues.push_back("output node '" + draft.output_id + "' is not defined");
    } else if (draft.nodes[it->second].is_input) {
      issues.push_back("output node '" + draft.output_id + "' is an input node");
    } else {
      output_draft = it->second;
    }
  }

  bool has_input = false, has_internal = false;
  for (const auto& dn : draft.nodes) (dn.is_input ? has_input : has_internal) = true;
  if (!has_input) issues.push_back("skeleton has no input nodes");
  if (!has_internal) issues.push_back("skeleton has no internal nodes");

  if (!issues.empty()) {
    std::string msg = "invalid skeleton:";
    for (const auto& s : issues) msg += "\n  - " + s;
    throw Error(msg);
  }

  // Kahn topological sort, smallest declaration index first, so the stored
  // order is canonical.
  std::vector<int> out_degree(n, 0), remaining(n, 0);
  std::vector<std::vector<int>> children(n);
  for (int i = 0; i < n; ++i) {
    remaining[i] = static_cast<int>(parents[i].size());
    for (int p : parents[i]) {
      children[p].push_back(i);
      ++out_degree[p];
    }
  }
  std::priority_queue<int, std::vector<int>, std::greater<int>> ready;
  for (int i = 0; i < n; ++i) {
    if (remaining[i] == 0) ready.push(i);
  }
  std::vector<int> topo;
  topo.reserve(n);
  while (!ready.empty()) {
    const int v = ready.top();
    ready.pop();
    topo.push_back(v);
    for (int c : children[v]) {
      if (--remaining[c] == 0) ready.push(c);
    }
  }
  if (static_cast<int>(topo.size()) != n) {
    std::string msg = "invalid skeleton:\n  - cycle detected through";
    for (int i = 0; i < n; ++i) {
      if (remaining[i] > 0) msg += " '" + draft.nodes[i].id + "'";
    }
    throw Error(msg);
  }

  for (int i = 0; i < n; ++i) {
    if (out_degree[i] == 0 && i != output_draft) {
      issues.push_back("node '" + draft.nodes[i].id + "' has no outgoing edges but is not the output");
    }
  }
  if (out_degree[output_draft] != 0) {
    issues.push_back("output node '" + draft.nodes[output_draft].id + "' has outgoing edges");
  }
  if (!issues.empty()) {
    std::string msg = "invalid skeleton:";
    for (const auto& s : issues) msg += "\n  - " + s;
    throw Error(msg);
  }

  // Materialize in topological order.
  std::vector<int> pos(n);
  for (int i = 0; i < n; ++i) pos[topo[i]] = i;
  nodes_.resize(n);
  int block = 0;
  for (int di = 0; di < n; ++di) {  // declaration order so blocks are stable
    if (draft.nodes[di].is_input) {
      nodes_[pos[di]].input_block = block++;
      input_nodes_.push_back(pos[di]);
    }
  }
  for (int ti = 0; ti < n; ++ti) {
    const int di = topo[ti];
    Node& node = nodes_[ti];
    node.id = draft.nodes[di].id;
    for (int p : parents[di]) node.parents.push_back(pos[p]);
    if (!draft.nodes[di].is_input) {
      node.activation = &activation(draft.nodes[di].activation);
      internal_nodes_.push_back(ti);
    }
  }
  output_ = pos[output_draft];
}

/// Depth, comp(S), C(S) and C'(S).
inline SkeletonMetrics skeleton_metrics(const ComputationSkeleton& s) {
  SkeletonMetrics m;
  m.node_depths.assign(s.node_count(), 0);
  for (int v : s.internal_nodes()) {
    int d = 0;
    for (int p : s.node(v).parents) d = std::max(d, m.node_depths[p]);
    m.node_depths[v] = d + 1;
  }
  m.depth = m.node_depths[s.output()];

  std::vector<int> level_max(m.depth + 1, 0);
  for (int v : s.internal_nodes()) {
    level_max[m.node_depths[v]] = std::max(level_max[m.node_depths[v]], s.degree(v) + 1);
  }
  m.comp = 1.0;
  for (int i = 1; i <= m.depth; ++i) m.comp *= level_max[i];

  double c_lip = 0.0;
  double c_bnd = 0.0;
  bool bounded = true;
  for (int v : s.internal_nodes()) {
    const ActivationSpec& act = *s.node(v).activation;
    c_lip = std::max(c_lip, act.c_lipschitz);
    if (act.c_bounded) {
      c_bnd = std::max(c_bnd, *act.c_bounded);
    } else {
      bounded = false;
    }
  }
  const double sqrt_comp = std::sqrt(m.comp);
  m.lipschitz_c = c_lip;
  m.cprime_of_s = std::pow(4.0 * c_lip, m.depth) * sqrt_comp;
  if (bounded) {
    m.bounded_c = c_bnd;
    m.c_of_s = std::pow(8.0 * c_bnd, m.depth) * sqrt_comp;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Line-oriented skeleton file format:
//   input <id>
//   node <id> <activation> <parent-id>...
//   output <id>
// '#' starts a comment; blank lines are ignored; exactly one output line.
// ---------------------------------------------------------------------------

inline ComputationSkeleton parse_skeleton(std::string_view text) {
  SkeletonDraft draft;
  bool have_output = false;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& what) {
    throw Error("skeleton parse error at line " + std::to_string(lineno) + ": " + what);
  };
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    const std::string& directive = tok[0];
    if (directive == "input") {
      if (tok.size() != 2) fail("expected 'input <id>'");
      if (!ids.insert(tok[1]).second) fail("duplicate identifier '" + tok[1] + "'");
      draft.add_input(tok[1]);
    } else if (directive == "node") {
      if (tok.size() < 4) fail("expected 'node <id> <activation> <parent>...'");
      if (!ids.insert(tok[1]).second) fail("duplicate identifier '" + tok[1] + "'");
      bool known = false;
      for (const auto& act : activation_registry()) known |= (act.name == tok[2]);
      if (!known) fail("unknown activation '" + tok[2] + "'");
      draft.add_node(tok[1], tok[2], {tok.begin() + 3, tok.end()});
    } else if (directive == "output") {
      if (tok.size() != 2) fail("expected 'output <id>'");
      if (have_output) fail("multiple output lines");
      have_output = true;
      draft.set_output(tok[1]);
    } else {
      fail("unknown directive '" + directive + "'");
    }
  }
  if (!have_output) throw Error("skeleton parse error: no output line");
  return ComputationSkeleton(draft);
}

/// Canonical serialization: inputs in block order, internal nodes in
/// topological order, single output line.  parse(serialize(s)) == s.
inline std::string serialize_skeleton(const ComputationSkeleton& s) {
  std::string out;
  for (int v : s.input_nodes()) {
    out += "input " + s.node(v).id + "\n";
  }
  for (int v : s.internal_nodes()) {
    const auto& node = s.node(v);
    out += "node " + node.id + " " + node.activation->name;
    for (int p : node.parents) out += " " + s.node(p).id;
    out += "\n";
  }
  out += "output " + s.node(s.output()).id + "\n";
  return out;
}

// FNV-1a over the canonical serialization; used to tie checkpoints to the
// skeleton they were trained on.
inline std::uint64_t skeleton_hash(const ComputationSkeleton& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : serialize_skeleton(s)) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace skelnet
