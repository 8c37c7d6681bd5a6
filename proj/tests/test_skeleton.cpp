#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "skelnet/rng.hpp"
#include "skelnet/skeleton.hpp"

using namespace skelnet;

namespace {

// Figure-style depth-2 skeleton: 4 inputs, 3 hidden nodes over windows of 2,
// output over all hidden nodes.
SkeletonDraft figure_pair_draft(const std::string& act = "relu") {
  SkeletonDraft draft;
  draft.add_input("x1").add_input("x2").add_input("x3").add_input("x4");
  draft.add_node("h1", act, {"x1", "x2"});
  draft.add_node("h2", act, {"x2", "x3"});
  draft.add_node("h3", act, {"x3", "x4"});
  draft.add_node("out", act, {"h1", "h2", "h3"});
  draft.set_output("out");
  return draft;
}

// Independent metric oracle: longest path by brute-force DFS and the level
// product computed straight from the definitions.
int oracle_depth(const ComputationSkeleton& s, int v) {
  if (s.is_input(v)) return 0;
  int best = 0;
  for (int p : s.node(v).parents) best = std::max(best, oracle_depth(s, p));
  return best + 1;
}

double oracle_comp(const ComputationSkeleton& s) {
  const int depth = oracle_depth(s, s.output());
  double product = 1.0;
  for (int level = 1; level <= depth; ++level) {
    int best = 0;
    for (int v : s.internal_nodes()) {
      if (oracle_depth(s, v) == level) best = std::max(best, s.degree(v) + 1);
    }
    product *= best;
  }
  return product;
}

}  // namespace

TEST_CASE("figure-style skeleton validates with depth 2") {
  const ComputationSkeleton s(figure_pair_draft());
  REQUIRE(s.input_count() == 4);
  REQUIRE(s.internal_count() == 4);  // |S| counts non-input nodes
  const SkeletonMetrics m = skeleton_metrics(s);
  REQUIRE(m.depth == 2);
  REQUIRE(m.comp == 12.0);  // (2+1)(3+1)
  // All-ReLU: C'(S) = (sqrt 32)^depth sqrt(comp) = 32 sqrt(12)
  REQUIRE(m.cprime_of_s == Catch::Approx(32.0 * std::sqrt(12.0)).epsilon(1e-12));
  REQUIRE(m.cprime_of_s == Catch::Approx(110.85).epsilon(1e-4));
  REQUIRE_FALSE(m.c_of_s.has_value());  // ReLU is not C-bounded
}

TEST_CASE("minimal skeleton: one input feeding one ReLU node") {
  SkeletonDraft draft;
  draft.add_input("x").add_node("h", "relu", {"x"}).set_output("h");
  const ComputationSkeleton s(draft);
  const SkeletonMetrics m = skeleton_metrics(s);
  REQUIRE(m.depth == 1);
  REQUIRE(m.comp == 2.0);  // single factor deg+1
  REQUIRE(s.internal_count() == 1);
}

TEST_CASE("self-parent is reported as a cycle") {
  SkeletonDraft draft;
  draft.add_input("x").add_node("h", "relu", {"h"}).set_output("h");
  REQUIRE_THROWS_WITH(ComputationSkeleton(draft), Catch::Matchers::ContainsSubstring("cycle"));
}

TEST_CASE("two-node cycle is reported") {
  SkeletonDraft draft;
  draft.add_input("x");
  draft.add_node("a", "relu", {"x", "b"});
  draft.add_node("b", "relu", {"a"});
  draft.add_node("out", "relu", {"b"});
  draft.set_output("out");
  REQUIRE_THROWS_WITH(ComputationSkeleton(draft), Catch::Matchers::ContainsSubstring("cycle"));
}

TEST_CASE("validation reports every structural defect") {
  SkeletonDraft draft;
  draft.add_input("x");
  draft.add_node("h", "", {"x"});   // missing activation
  draft.add_node("o", "relu", {"x", "x"});  // duplicate parent
  draft.set_output("o");
  try {
    ComputationSkeleton s(draft);
    FAIL("expected validation to throw");
  } catch (const Error& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("no activation") != std::string::npos);
    REQUIRE(msg.find("duplicate parent") != std::string::npos);
  }
}

TEST_CASE("dangling parent reference names the missing node") {
  SkeletonDraft draft;
  draft.add_input("x1").add_node("h", "relu", {"x1", "x9"}).set_output("h");
  REQUIRE_THROWS_WITH(ComputationSkeleton(draft), Catch::Matchers::ContainsSubstring("x9"));
}

TEST_CASE("output must be the unique sink") {
  SkeletonDraft draft;
  draft.add_input("x1").add_input("x2");
  draft.add_node("h1", "relu", {"x1"});
  draft.add_node("h2", "relu", {"x2"});
  draft.set_output("h1");
  REQUIRE_THROWS_WITH(ComputationSkeleton(draft),
                      Catch::Matchers::ContainsSubstring("no outgoing edges"));
}

TEST_CASE("identity-only skeletons have no C(S)") {
  SkeletonDraft draft;
  draft.add_input("x").add_node("h", "identity", {"x"}).set_output("h");
  const SkeletonMetrics m = skeleton_metrics(ComputationSkeleton(draft));
  REQUIRE_FALSE(m.c_of_s.has_value());
  REQUIRE(m.cprime_of_s == Catch::Approx(4.0 * std::sqrt(2.0)));  // C = 1
}

TEST_CASE("erf skeleton carries both constants") {
  SkeletonDraft draft;
  draft.add_input("x").add_node("h", "erf", {"x"}).set_output("h");
  const SkeletonMetrics m = skeleton_metrics(ComputationSkeleton(draft));
  REQUIRE(m.c_of_s.has_value());
  const double c = *m.bounded_c;
  REQUIRE(*m.c_of_s == Catch::Approx(8.0 * c * std::sqrt(2.0)));
}

TEST_CASE("skeleton file parsing round-trips canonically") {
  const std::string text =
      "# a small skeleton\n"
      "input x1\n"
      "input x2   # second block\n"
      "\n"
      "node h relu x1 x2\n"
      "output h\n";
  const ComputationSkeleton s = parse_skeleton(text);
  REQUIRE(s.input_count() == 2);
  REQUIRE(skeleton_metrics(s).depth == 1);
  const std::string canonical = serialize_skeleton(s);
  REQUIRE(canonical == serialize_skeleton(parse_skeleton(canonical)));
  REQUIRE(canonical == "input x1\ninput x2\nnode h relu x1 x2\noutput h\n");
}

TEST_CASE("parse errors carry line numbers and names") {
  REQUIRE_THROWS_WITH(parse_skeleton("input x1\nnode h relu x9\noutput h\n"),
                      Catch::Matchers::ContainsSubstring("x9"));
  REQUIRE_THROWS_WITH(parse_skeleton("input x\nnode h frobnicate x\noutput h\n"),
                      Catch::Matchers::ContainsSubstring("line 2"));
  REQUIRE_THROWS_WITH(parse_skeleton("input x\nnode h relu x\noutput h\noutput h\n"),
                      Catch::Matchers::ContainsSubstring("multiple output"));
  REQUIRE_THROWS_WITH(parse_skeleton("input x\ninput x\nnode h relu x\noutput h\n"),
                      Catch::Matchers::ContainsSubstring("duplicate"));
  REQUIRE_THROWS_WITH(parse_skeleton("input x\nnode h relu x\n"),
                      Catch::Matchers::ContainsSubstring("no output"));
  REQUIRE_THROWS_WITH(parse_skeleton("inptu x\n"), Catch::Matchers::ContainsSubstring("line 1"));
}

TEST_CASE("fully connected layered file reproduces the level product") {
  const std::string text =
      "input x1\ninput x2\ninput x3\ninput x4\n"
      "node h1 relu x1 x2\n"
      "node h2 relu x2 x3\n"
      "node h3 relu x3 x4\n"
      "node top relu h1 h2 h3\n"
      "output top\n";
  const ComputationSkeleton s = parse_skeleton(text);
  const SkeletonMetrics m = skeleton_metrics(s);
  REQUIRE(m.comp == oracle_comp(s));
  REQUIRE(m.comp == 12.0);
}

TEST_CASE("random skeletons: depth is monotone along edges and comp >= 2^depth") {
  RngStream rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    SkeletonDraft draft;
    const int inputs = 1 + static_cast<int>(rng.next_u64() % 4);
    const int internals = 1 + static_cast<int>(rng.next_u64() % 6);
    std::vector<std::string> pool;
    for (int i = 0; i < inputs; ++i) {
      draft.add_input("x" + std::to_string(i));
      pool.push_back("x" + std::to_string(i));
    }
    const char* acts[] = {"relu", "erf", "tanh", "identity"};
    for (int i = 0; i < internals; ++i) {
      const int parents = 1 + static_cast<int>(rng.next_u64() % std::min<std::size_t>(3, pool.size()));
      std::vector<std::string> chosen;
      std::vector<std::string> options = pool;
      for (int p = 0; p < parents; ++p) {
        const std::size_t idx = rng.next_u64() % options.size();
        chosen.push_back(options[idx]);
        options.erase(options.begin() + idx);
      }
      const std::string id = "v" + std::to_string(i);
      draft.add_node(id, acts[rng.next_u64() % 4], chosen);
      pool.push_back(id);
    }
    // Tie every sink into one output node so validation passes.
    std::set<std::string> has_child;
    for (const auto& n : draft.nodes) {
      for (const auto& p : n.parents) has_child.insert(p);
    }
    std::vector<std::string> sinks;
    for (const auto& n : draft.nodes) {
      if (!has_child.count(n.id)) sinks.push_back(n.id);
    }
    draft.add_node("out", "relu", sinks);
    draft.set_output("out");

    const ComputationSkeleton s(draft);
    const SkeletonMetrics m = skeleton_metrics(s);
    for (int v = 0; v < s.node_count(); ++v) {
      for (int p : s.node(v).parents) REQUIRE(m.node_depths[p] < m.node_depths[v]);
      REQUIRE(m.node_depths[v] == oracle_depth(s, v));
    }
    REQUIRE(m.comp == Catch::Approx(oracle_comp(s)));
    REQUIRE(m.comp >= std::pow(2.0, m.depth) - 1e-9);
    // Serialization is the identity on the canonical form.
    const std::string canonical = serialize_skeleton(s);
    REQUIRE(serialize_skeleton(parse_skeleton(canonical)) == canonical);
    REQUIRE(skeleton_hash(parse_skeleton(canonical)) == skeleton_hash(s));
  }
}

TEST_CASE("hashes distinguish different skeletons") {
  const ComputationSkeleton a(figure_pair_draft("relu"));
  const ComputationSkeleton b(figure_pair_draft("erf"));
  REQUIRE(skeleton_hash(a) != skeleton_hash(b));
}
