#pragma once

// Label hierarchy: a rooted tree whose leaves are the trainable classes.
//
// Node id layout:
//   0 .. C-1   leaves, in depth-first declaration order
//   C .. N-1   internal nodes in post-order (children before parents), root = N-1
//
// Consequently every node id is smaller than its parent's id, so a single
// ascending sweep accumulates leaf mass up to the root, and every node covers
// a contiguous range of leaf ids.
//
// Levels: leaves are level 0, the root is level K, and an internal node at
// depth d sits at level K - d, where K is the maximum leaf depth. The level-k
// band is the set of non-root nodes v with level(v) <= k < level(parent(v)).
// Each band partitions the leaves; band K-1 is always the root's children.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "matrix.hpp"

namespace treeloss {

using NodeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

struct NodeRecord {
    NodeId id = kNoNode;
    std::string name;
    std::vector<NodeId> children;
    bool is_leaf = false;
};

struct EdgeWeightScheme {
    enum class Kind { TopOnly, LeafOnly, Equal, Hierarchical };

    Kind kind = Kind::Equal;
    double kappa = 1.0;

    static EdgeWeightScheme top_only() { return {Kind::TopOnly, 1.0}; }
    static EdgeWeightScheme leaf_only() { return {Kind::LeafOnly, 1.0}; }
    static EdgeWeightScheme equal() { return {Kind::Equal, 1.0}; }
    static EdgeWeightScheme hierarchical(double kappa)
    {
        if (!(kappa > 0.0) || !std::isfinite(kappa)) throw WeightError("hierarchical scheme requires kappa > 0");
        return {Kind::Hierarchical, kappa};
    }

    static EdgeWeightScheme parse(std::string_view name, double kappa = 10.0)
    {
        if (name == "top") return top_only();
        if (name == "leaf") return leaf_only();
        if (name == "equal") return equal();
        if (name == "hier") return hierarchical(kappa);
        throw ConfigError("unknown edge weight scheme '" + std::string(name) + "' (expected top|leaf|equal|hier)");
    }

    std::string name() const
    {
        switch (kind) {
        case Kind::TopOnly: return "top";
        case Kind::LeafOnly: return "leaf";
        case Kind::Equal: return "equal";
        case Kind::Hierarchical: return "hier";
        }
        return "?";
    }
};

// Unvalidated node description used to build a LabelTree. `parent` indexes
// into the same list; kNoNode marks the root.
struct NodeSpec {
    std::string name;
    NodeId parent = kNoNode;
    std::optional<double> weight;
};

class LabelTree {
public:
    // Validates and relabels an arbitrary parent list. Children keep the order
    // in which they appear in `specs`.
    static LabelTree from_parents(const std::vector<NodeSpec>& specs)
    {
        const auto n = static_cast<NodeId>(specs.size());
        std::map<std::string, NodeId> by_name;
        for (NodeId i = 0; i < n; ++i) {
            if (!by_name.emplace(specs[i].name, i).second)
                throw ParseError("duplicate node name '" + specs[i].name + "'");
        }

        NodeId root = kNoNode;
        std::vector<std::vector<NodeId>> kids(specs.size());
        for (NodeId i = 0; i < n; ++i) {
            const NodeId p = specs[i].parent;
            if (p == kNoNode) {
                if (root != kNoNode)
                    throw StructureError("multiple roots: '" + specs[root].name + "' and '" + specs[i].name + "'");
                root = i;
                continue;
            }
            if (p < 0 || p >= n) throw StructureError("node '" + specs[i].name + "' has an invalid parent index");
            if (p == i) throw StructureError("node '" + specs[i].name + "' is its own parent");
            kids[p].push_back(i);
            if (specs[i].weight && !(*specs[i].weight >= 0.0))
                throw WeightError("negative or invalid edge weight on '" + specs[i].name + "'");
        }
        if (root == kNoNode) throw StructureError("no root node (every node has a parent, so the graph has a cycle)");

        // Every node must be reachable from the root; unreachable nodes sit on cycles.
        std::vector<char> seen(specs.size(), 0);
        std::vector<NodeId> stack{root};
        std::size_t reached = 0;
        while (!stack.empty()) {
            const NodeId v = stack.back();
            stack.pop_back();
            if (seen[v]) throw StructureError("cycle through node '" + specs[v].name + "'");
            seen[v] = 1;
            ++reached;
            for (NodeId c : kids[v]) stack.push_back(c);
        }
        if (reached != specs.size()) {
            for (NodeId i = 0; i < n; ++i)
                if (!seen[i]) throw StructureError("node '" + specs[i].name + "' does not reach the root (cycle)");
        }

        // Leaf ids in pre-order, internal ids in post-order.
        std::vector<NodeId> new_id(specs.size(), kNoNode);
        NodeId next_leaf = 0;
        std::vector<NodeId> internal_post;
        struct Frame { NodeId v; std::size_t next_child; };
        std::vector<Frame> frames{{root, 0}};
        while (!frames.empty()) {
            Frame& f = frames.back();
            if (kids[f.v].empty()) {
                new_id[f.v] = next_leaf++;
                frames.pop_back();
                continue;
            }
            if (f.next_child < kids[f.v].size()) {
                const NodeId c = kids[f.v][f.next_child++];
                frames.push_back({c, 0});
                continue;
            }
            internal_post.push_back(f.v);
            frames.pop_back();
        }
        const NodeId leaf_count = next_leaf;
        if (leaf_count < 2) throw StructureError("label tree needs at least two leaves");
        for (std::size_t i = 0; i < internal_post.size(); ++i)
            new_id[internal_post[i]] = leaf_count + static_cast<NodeId>(i);

        LabelTree t;
        t.leaf_count_ = static_cast<std::size_t>(leaf_count);
        t.nodes_.resize(specs.size());
        t.parent_.assign(specs.size(), kNoNode);
        t.weight_.assign(specs.size(), 0.0);
        for (NodeId old = 0; old < n; ++old) {
            const NodeId id = new_id[old];
            NodeRecord& rec = t.nodes_[id];
            rec.id = id;
            rec.name = specs[old].name;
            rec.is_leaf = kids[old].empty();
            for (NodeId c : kids[old]) rec.children.push_back(new_id[c]);
            if (specs[old].parent != kNoNode) {
                t.parent_[id] = new_id[specs[old].parent];
                t.weight_[id] = specs[old].weight.value_or(1.0);
            }
        }
        t.root_ = new_id[root];
        t.finalize();
        return t;
    }

    std::size_t node_count() const noexcept { return nodes_.size(); }
    std::size_t leaf_count() const noexcept { return leaf_count_; }
    // Number of levels K (root children are level K-1, leaves level 0).
    int num_levels() const noexcept { return num_levels_; }
    NodeId root() const noexcept { return root_; }

    const NodeRecord& node(NodeId v) const { return nodes_.at(static_cast<std::size_t>(v)); }
    const std::vector<NodeRecord>& nodes() const noexcept { return nodes_; }
    NodeId parent(NodeId v) const { return parent_.at(static_cast<std::size_t>(v)); }
    // Weight of the edge from v to its parent; 0 for the root.
    double edge_weight(NodeId v) const { return weight_.at(static_cast<std::size_t>(v)); }
    const std::vector<double>& edge_weights() const noexcept { return weight_; }
    int depth(NodeId v) const { return depth_.at(static_cast<std::size_t>(v)); }
    int level(NodeId v) const { return level_.at(static_cast<std::size_t>(v)); }
    // Edge distance from v down to its deepest descendant leaf.
    int height(NodeId v) const { return height_.at(static_cast<std::size_t>(v)); }
    bool is_leaf(NodeId v) const { return node(v).is_leaf; }

    // Leaves under v form the id range [first, last).
    NodeId first_leaf(NodeId v) const { return first_leaf_.at(static_cast<std::size_t>(v)); }
    NodeId last_leaf(NodeId v) const { return last_leaf_.at(static_cast<std::size_t>(v)); }
    bool covers(NodeId v, NodeId leaf) const { return first_leaf(v) <= leaf && leaf < last_leaf(v); }

    NodeId find(std::string_view name) const
    {
        for (const auto& n : nodes_)
            if (n.name == name) return n.id;
        return kNoNode;
    }

    std::vector<std::string> leaf_names() const
    {
        std::vector<std::string> out;
        for (std::size_t i = 0; i < leaf_count_; ++i) out.push_back(nodes_[i].name);
        return out;
    }

    // Leaf plus all its ancestors except the root, bottom-up.
    std::vector<NodeId> ancestor_chain(NodeId leaf) const
    {
        std::vector<NodeId> chain;
        for (NodeId v = leaf; v != root_; v = parent(v)) chain.push_back(v);
        return chain;
    }

    // Nodes of the level-k band, ordered by their first leaf.
    std::vector<NodeId> level_nodes(int k) const
    {
        check_level(k);
        std::vector<NodeId> out;
        for (std::size_t v = 0; v < nodes_.size(); ++v) {
            const auto id = static_cast<NodeId>(v);
            if (id == root_) continue;
            if (level_[v] <= k && k < level_[parent_[v]]) out.push_back(id);
        }
        std::sort(out.begin(), out.end(), [&](NodeId a, NodeId b) { return first_leaf(a) < first_leaf(b); });
        return out;
    }

    // The band-k node whose subtree contains `leaf`.
    NodeId band_ancestor(NodeId leaf, int k) const
    {
        check_level(k);
        NodeId v = leaf;
        while (!(level(v) <= k && k < level(parent(v)))) v = parent(v);
        return v;
    }

    void check_level(int k) const
    {
        if (k < 0 || k >= num_levels_)
            throw RangeError("level " + std::to_string(k) + " out of range [0, " + std::to_string(num_levels_ - 1) + "]");
    }

    // Copy with replaced edge weights (index = node id, root entry ignored).
    LabelTree with_weights(std::vector<double> weights) const
    {
        if (weights.size() != nodes_.size()) throw ShapeError("weight vector size does not match node count");
        for (std::size_t v = 0; v < weights.size(); ++v) {
            if (static_cast<NodeId>(v) == root_) {
                weights[v] = 0.0;
                continue;
            }
            if (!(weights[v] >= 0.0) || !std::isfinite(weights[v]))
                throw WeightError("negative or invalid edge weight on '" + nodes_[v].name + "'");
        }
        LabelTree t = *this;
        t.weight_ = std::move(weights);
        return t;
    }

    friend bool operator==(const LabelTree& a, const LabelTree& b)
    {
        if (a.root_ != b.root_ || a.parent_ != b.parent_ || a.weight_ != b.weight_) return false;
        if (a.nodes_.size() != b.nodes_.size()) return false;
        for (std::size_t i = 0; i < a.nodes_.size(); ++i) {
            if (a.nodes_[i].name != b.nodes_[i].name || a.nodes_[i].children != b.nodes_[i].children) return false;
        }
        return true;
    }

private:
    void finalize()
    {
        const std::size_t n = nodes_.size();
        depth_.assign(n, 0);
        height_.assign(n, 0);
        first_leaf_.assign(n, 0);
        last_leaf_.assign(n, 0);
        // Parents have larger ids, so a descending sweep visits parents first.
        for (std::size_t i = n; i-- > 0;) {
            if (static_cast<NodeId>(i) != root_) depth_[i] = depth_[parent_[i]] + 1;
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (nodes_[i].is_leaf) {
                first_leaf_[i] = static_cast<NodeId>(i);
                last_leaf_[i] = static_cast<NodeId>(i) + 1;
            } else {
                first_leaf_[i] = first_leaf_[nodes_[i].children.front()];
                last_leaf_[i] = last_leaf_[nodes_[i].children.back()];
                for (NodeId c : nodes_[i].children) height_[i] = std::max(height_[i], height_[c] + 1);
            }
        }
        num_levels_ = 0;
        for (std::size_t i = 0; i < leaf_count_; ++i) num_levels_ = std::max(num_levels_, depth_[i]);
        level_.assign(n, 0);
        for (std::size_t i = 0; i < n; ++i) level_[i] = nodes_[i].is_leaf ? 0 : num_levels_ - depth_[i];
    }

    std::vector<NodeRecord> nodes_;
    std::vector<NodeId> parent_;
    std::vector<double> weight_;
    std::vector<int> depth_;
    std::vector<int> level_;
    std::vector<int> height_;
    std::vector<NodeId> first_leaf_;
    std::vector<NodeId> last_leaf_;
    std::size_t leaf_count_ = 0;
    int num_levels_ = 0;
    NodeId root_ = kNoNode;
};

// Parses the nested hierarchy document
//   {"name": str, "weight": number?, "children": [...]}
// A top-level array is accepted only when it holds exactly one root.
inline LabelTree tree_from_json(const nlohmann::json& doc)
{
    const nlohmann::json* root = &doc;
    if (doc.is_array()) {
        if (doc.size() != 1) throw StructureError("hierarchy must have exactly one root, found " + std::to_string(doc.size()));
        root = &doc[0];
    }

    std::vector<NodeSpec> specs;
    std::map<std::string, std::string> parent_of;
    struct Item { const nlohmann::json* node; NodeId parent; };
    std::vector<Item> stack{{root, kNoNode}};
    while (!stack.empty()) {
        auto [j, parent] = stack.back();
        stack.pop_back();
        if (!j->is_object()) throw ParseError("hierarchy node must be a JSON object");
        if (!j->contains("name") || !(*j)["name"].is_string()) throw ParseError("hierarchy node without a string \"name\"");
        NodeSpec spec;
        spec.name = (*j)["name"].get<std::string>();
        spec.parent = parent;
        if (j->contains("weight")) {
            const auto& w = (*j)["weight"];
            if (!w.is_number()) throw ParseError("weight of '" + spec.name + "' is not a number");
            spec.weight = w.get<double>();
            if (parent != kNoNode && *spec.weight < 0.0) throw WeightError("negative edge weight on '" + spec.name + "'");
        }
        const std::string parent_name = parent == kNoNode ? std::string{} : specs[parent].name;
        if (auto it = parent_of.find(spec.name); it != parent_of.end()) {
            if (it->second != parent_name)
                throw StructureError("node '" + spec.name + "' is listed under two parents ('" + it->second + "' and '" +
                                     parent_name + "')");
            throw ParseError("duplicate node name '" + spec.name + "'");
        }
        parent_of.emplace(spec.name, parent_name);
        const auto id = static_cast<NodeId>(specs.size());
        specs.push_back(spec);

        if (j->contains("children")) {
            const auto& ch = (*j)["children"];
            if (!ch.is_array()) throw ParseError("children of '" + spec.name + "' must be an array");
            // Reverse push keeps declaration order when popping.
            for (auto it = ch.rbegin(); it != ch.rend(); ++it) stack.push_back({&*it, id});
        }
    }
    // The stack visits nodes in pre-order, so sibling order in `specs` is declaration order.
    return LabelTree::from_parents(specs);
}

inline LabelTree parse_tree(std::string_view text)
{
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("hierarchy is not valid JSON: ") + e.what());
    }
    return tree_from_json(doc);
}

inline nlohmann::json serialize_tree(const LabelTree& tree)
{
    auto build = [&](auto&& self, NodeId v) -> nlohmann::json {
        nlohmann::json j;
        j["name"] = tree.node(v).name;
        if (v != tree.root()) j["weight"] = tree.edge_weight(v);
        if (!tree.is_leaf(v)) {
            j["children"] = nlohmann::json::array();
            for (NodeId c : tree.node(v).children) j["children"].push_back(self(self, c));
        }
        return j;
    };
    return build(build, tree.root());
}

inline LabelTree assign_weights(const LabelTree& tree, const EdgeWeightScheme& scheme)
{
    std::vector<double> w(tree.node_count(), 0.0);
    for (std::size_t i = 0; i < tree.node_count(); ++i) {
        const auto v = static_cast<NodeId>(i);
        if (v == tree.root()) continue;
        switch (scheme.kind) {
        case EdgeWeightScheme::Kind::TopOnly: w[i] = tree.parent(v) == tree.root() ? 1.0 : 0.0; break;
        case EdgeWeightScheme::Kind::LeafOnly: w[i] = tree.is_leaf(v) ? 1.0 : 0.0; break;
        case EdgeWeightScheme::Kind::Equal: w[i] = 1.0; break;
        case EdgeWeightScheme::Kind::Hierarchical: w[i] = std::pow(scheme.kappa, tree.height(v)); break;
        }
    }
    return tree.with_weights(std::move(w));
}

// A[parent, child] = 1.
inline Matrix adjacency(const LabelTree& tree)
{
    Matrix a(tree.node_count(), tree.node_count());
    for (std::size_t v = 0; v < tree.node_count(); ++v) {
        const NodeId p = tree.parent(static_cast<NodeId>(v));
        if (p != kNoNode) a(static_cast<std::size_t>(p), v) = 1.0;
    }
    return a;
}

// Random tree with `leaves` leaves and at most `max_depth` edges from root to
// any leaf. Branching at each internal node is drawn from [2, max_branching].
// Subtrees that receive a single leaf end early, so trees are usually ragged.
inline LabelTree make_random_tree(std::size_t leaves, int max_depth, std::mt19937_64& rng, std::size_t max_branching = 4)
{
    if (leaves < 2) throw ConfigError("random tree needs at least two leaves");
    if (max_depth < 1) throw ConfigError("random tree needs max_depth >= 1");
    if (max_branching < 2) throw ConfigError("random tree needs max_branching >= 2");
    std::vector<NodeSpec> specs;
    std::size_t leaf_no = 0;
    std::size_t inner_no = 0;
    auto grow = [&](auto&& self, std::size_t n, int depth_left, NodeId parent) -> void {
        if (n == 1 && parent != kNoNode) {
            specs.push_back({"leaf" + std::to_string(leaf_no++), parent, std::nullopt});
            return;
        }
        const auto id = static_cast<NodeId>(specs.size());
        specs.push_back({parent == kNoNode ? std::string("root") : "node" + std::to_string(inner_no++), parent, std::nullopt});
        if (depth_left == 1) {
            for (std::size_t i = 0; i < n; ++i) specs.push_back({"leaf" + std::to_string(leaf_no++), id, std::nullopt});
            return;
        }
        const std::size_t k = std::uniform_int_distribution<std::size_t>(2, std::min(n, max_branching))(rng);
        // Split n into k positive parts via sorted cut points.
        std::vector<std::size_t> cuts;
        std::vector<std::size_t> pool(n - 1);
        for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i + 1;
        std::shuffle(pool.begin(), pool.end(), rng);
        cuts.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k - 1));
        std::sort(cuts.begin(), cuts.end());
        std::size_t prev = 0;
        cuts.push_back(n);
        for (std::size_t c : cuts) {
            self(self, c - prev, depth_left - 1, id);
            prev = c;
        }
    };
    grow(grow, leaves, max_depth, kNoNode);
    return LabelTree::from_parents(specs);
}

// Balanced tree; branching[i] is the fan-out at depth i.
inline LabelTree make_balanced_tree(const std::vector<std::size_t>& branching)
{
    if (branching.empty()) throw ConfigError("balanced tree needs at least one level");
    std::vector<NodeSpec> specs{{"root", kNoNode, std::nullopt}};
    std::vector<NodeId> frontier{0};
    std::size_t leaf_no = 0;
    std::size_t inner_no = 0;
    for (std::size_t d = 0; d < branching.size(); ++d) {
        const bool last = d + 1 == branching.size();
        std::vector<NodeId> next;
        for (NodeId p : frontier) {
            for (std::size_t b = 0; b < branching[d]; ++b) {
                next.push_back(static_cast<NodeId>(specs.size()));
                specs.push_back({last ? "leaf" + std::to_string(leaf_no++) : "node" + std::to_string(inner_no++), p, std::nullopt});
            }
        }
        frontier = std::move(next);
    }
    return LabelTree::from_parents(specs);
}

} // namespace treeloss
