#pragma once

// Integral minimum-cost flow by successive shortest augmenting paths with
// node potentials. Each phase runs Dijkstra on reduced costs from the
// lowest-index node with remaining supply to the nearest node with unmet
// demand and augments along that path. Tie-breaking is by node index and arc
// insertion order, so results are deterministic.

#include "matchkit/error.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <queue>
#include <string>
#include <utility>
#include <vector>

namespace matchkit {

struct FlowArc {
    int from = 0;
    int to = 0;
    std::int64_t capacity = 0;
    std::int64_t cost = 0;
};

struct FlowNetwork {
    // supply[v] > 0 is a source, < 0 a demand.
    std::vector<std::int64_t> supply;
    std::vector<FlowArc> arcs;

    int num_nodes() const { return static_cast<int>(supply.size()); }

    int add_node(std::int64_t s = 0) {
        supply.push_back(s);
        return num_nodes() - 1;
    }

    int add_arc(int from, int to, std::int64_t capacity, std::int64_t cost) {
        arcs.push_back({from, to, capacity, cost});
        return static_cast<int>(arcs.size()) - 1;
    }
};

struct FlowResult {
    std::vector<std::int64_t> flow;  // per arc, in insertion order
    // Node potentials certifying optimality: every residual arc has
    // cost + potential[from] - potential[to] >= 0.
    std::vector<std::int64_t> potential;
    std::int64_t cost = 0;
    int phases = 0;
    std::int64_t augmentations = 0;
};

namespace detail {

// Forward and reverse residual arcs in compressed adjacency form.
class ResidualGraph {
public:
    ResidualGraph(int n, const std::vector<FlowArc>& arcs) {
        start_.assign(static_cast<std::size_t>(n) + 1, 0);
        for (const auto& a : arcs) {
            ++start_[static_cast<std::size_t>(a.from) + 1];
            ++start_[static_cast<std::size_t>(a.to) + 1];
        }
        for (int v = 0; v < n; ++v) start_[static_cast<std::size_t>(v) + 1] += start_[static_cast<std::size_t>(v)];
        const std::size_t m = start_.back();
        to_.resize(m);
        cap_.resize(m);
        cost_.resize(m);
        rev_.resize(m);
        std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
        forward_.reserve(arcs.size());
        for (const auto& a : arcs) {
            const std::size_t f = fill[static_cast<std::size_t>(a.from)]++;
            const std::size_t b = fill[static_cast<std::size_t>(a.to)]++;
            to_[f] = a.to;
            cap_[f] = a.capacity;
            cost_[f] = a.cost;
            rev_[f] = b;
            to_[b] = a.from;
            cap_[b] = 0;
            cost_[b] = -a.cost;
            rev_[b] = f;
            forward_.push_back(f);
        }
    }

    std::vector<std::size_t> start_;
    std::vector<int> to_;
    std::vector<std::int64_t> cap_;
    std::vector<std::int64_t> cost_;
    std::vector<std::size_t> rev_;
    std::vector<std::size_t> forward_;
};

} // namespace detail

inline FlowResult solve_min_cost_flow(const FlowNetwork& net) {
    const int n = net.num_nodes();
    std::int64_t total_supply = 0, total_demand = 0;
    for (auto s : net.supply) (s > 0 ? total_supply : total_demand) += (s > 0 ? s : -s);
    if (total_supply != total_demand)
        throw InfeasibleError("min-cost flow: total supply " + std::to_string(total_supply) +
                              " differs from total demand " + std::to_string(total_demand));
    for (const auto& a : net.arcs) {
        if (a.from < 0 || a.from >= n || a.to < 0 || a.to >= n) throw DataError("min-cost flow: arc endpoint out of range");
        if (a.capacity < 0) throw DataError("min-cost flow: negative capacity");
    }

    detail::ResidualGraph g(n, net.arcs);
    const auto nn = static_cast<std::size_t>(n);
    constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;

    std::vector<std::int64_t> pot(nn, 0);
    if (std::any_of(net.arcs.begin(), net.arcs.end(), [](const FlowArc& a) { return a.cost < 0; })) {
        // Bellman-Ford from a virtual source joined to every node.
        std::vector<std::int64_t> d(nn, 0);
        for (std::size_t round = 0;; ++round) {
            bool changed = false;
            for (std::size_t u = 0; u < nn; ++u)
                for (std::size_t e = g.start_[u]; e < g.start_[u + 1]; ++e) {
                    const auto v = static_cast<std::size_t>(g.to_[e]);
                    if (g.cap_[e] > 0 && d[u] + g.cost_[e] < d[v]) {
                        d[v] = d[u] + g.cost_[e];
                        changed = true;
                    }
                }
            if (!changed) break;
            if (round == nn) throw NumericalError("min-cost flow: negative-cost cycle");
        }
        pot = d;
    }

    std::vector<std::int64_t> excess(net.supply);
    FlowResult result;
    std::vector<std::int64_t> dist(nn, inf);
    std::vector<char> done(nn, 0);
    std::vector<std::size_t> via(nn);  // residual arc entering each node on the tree
    std::vector<int> touched;
    using Item = std::pair<std::int64_t, int>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;

    int root = 0;
    for (;;) {
        while (root < n && excess[static_cast<std::size_t>(root)] <= 0) ++root;
        if (root == n) break;

        // Dijkstra on reduced costs from the root, stopping at the first
        // node with unmet demand.
        for (int v : touched) {
            dist[static_cast<std::size_t>(v)] = inf;
            done[static_cast<std::size_t>(v)] = 0;
        }
        touched.clear();
        heap = {};
        dist[static_cast<std::size_t>(root)] = 0;
        touched.push_back(root);
        heap.emplace(0, root);
        int target = -1;
        while (!heap.empty()) {
            const auto [du, u] = heap.top();
            heap.pop();
            const auto uu = static_cast<std::size_t>(u);
            if (done[uu]) continue;
            done[uu] = 1;
            if (excess[uu] < 0) {
                target = u;
                break;
            }
            for (std::size_t e = g.start_[uu]; e < g.start_[uu + 1]; ++e) {
                if (g.cap_[e] <= 0) continue;
                const auto vv = static_cast<std::size_t>(g.to_[e]);
                if (done[vv]) continue;
                const std::int64_t nd = du + g.cost_[e] + pot[uu] - pot[vv];
                if (nd < dist[vv]) {
                    if (dist[vv] == inf) touched.push_back(g.to_[e]);
                    dist[vv] = nd;
                    via[vv] = e;
                    heap.emplace(nd, g.to_[e]);
                }
            }
        }
        if (target < 0) break;

        const std::int64_t dt = dist[static_cast<std::size_t>(target)];
        // Settled nodes gain their distance and the rest gain dt. Shifting
        // every potential by -dt changes no reduced cost, so only settled
        // nodes need updating.
        for (int v : touched) {
            const auto vv = static_cast<std::size_t>(v);
            if (done[vv]) pot[vv] += dist[vv] - dt;
        }
        ++result.phases;

        std::int64_t amount = std::min(excess[static_cast<std::size_t>(root)], -excess[static_cast<std::size_t>(target)]);
        for (int v = target; v != root;) {
            const std::size_t e = via[static_cast<std::size_t>(v)];
            amount = std::min(amount, g.cap_[e]);
            v = g.to_[g.rev_[e]];
        }
        for (int v = target; v != root;) {
            const std::size_t e = via[static_cast<std::size_t>(v)];
            g.cap_[e] -= amount;
            g.cap_[g.rev_[e]] += amount;
            v = g.to_[g.rev_[e]];
        }
        excess[static_cast<std::size_t>(root)] -= amount;
        excess[static_cast<std::size_t>(target)] += amount;
        ++result.augmentations;
    }

    if (root < n) {
        std::string deficit;
        for (int v = 0; v < n; ++v) {
            const auto ex = excess[static_cast<std::size_t>(v)];
            if (ex == 0) continue;
            if (!deficit.empty()) deficit += ", ";
            deficit += std::to_string(v) + (ex > 0 ? " (unsent supply " : " (unmet demand ") + std::to_string(ex > 0 ? ex : -ex) + ")";
        }
        throw InfeasibleError("min-cost flow: infeasible network; deficit nodes: " + deficit);
    }

    result.flow.resize(net.arcs.size());
    for (std::size_t k = 0; k < net.arcs.size(); ++k) {
        result.flow[k] = net.arcs[k].capacity - g.cap_[g.forward_[k]];
        result.cost += result.flow[k] * net.arcs[k].cost;
    }
    result.potential = pot;
    return result;
}

} // namespace matchkit
