#include "matchkit/flow.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace matchkit;

TEST(MinCostFlow, SingleArc) {
    FlowNetwork net;
    const int a = net.add_node(1);
    const int b = net.add_node(-1);
    net.add_arc(a, b, 5, 7);
    const auto r = solve_min_cost_flow(net);
    EXPECT_EQ(r.flow[0], 1);
    EXPECT_EQ(r.cost, 7);
}

TEST(MinCostFlow, ZeroSupplies) {
    FlowNetwork net;
    net.add_node(0);
    net.add_node(0);
    net.add_arc(0, 1, 3, 2);
    const auto r = solve_min_cost_flow(net);
    EXPECT_EQ(r.flow[0], 0);
    EXPECT_EQ(r.cost, 0);
}

TEST(MinCostFlow, UnbalancedSuppliesRejected) {
    FlowNetwork net;
    net.add_node(2);
    net.add_node(-1);
    net.add_arc(0, 1, 3, 2);
    EXPECT_THROW(solve_min_cost_flow(net), InfeasibleError);
}

TEST(MinCostFlow, InfeasibleNamesDeficitNodes) {
    FlowNetwork net;
    net.add_node(2);
    net.add_node(-2);
    net.add_arc(0, 1, 1, 0);
    try {
        solve_min_cost_flow(net);
        FAIL() << "expected infeasibility";
    } catch (const InfeasibleError& e) {
        EXPECT_NE(std::string(e.what()).find("deficit nodes"), std::string::npos);
    }
}

// Exhaustive search over every integral 3x3 transportation plan.
static std::int64_t brute_transport(const std::array<int, 3>& sup, const std::array<int, 3>& dem,
                                    const std::array<std::array<int, 3>, 3>& cost) {
    std::int64_t best = -1;
    std::array<std::array<int, 3>, 3> x{};
    std::function<void(int)> rec = [&](int cell) {
        if (cell == 9) {
            for (int i = 0; i < 3; ++i)
                if (x[i][0] + x[i][1] + x[i][2] != sup[i]) return;
            for (int j = 0; j < 3; ++j)
                if (x[0][j] + x[1][j] + x[2][j] != dem[j]) return;
            std::int64_t c = 0;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) c += static_cast<std::int64_t>(x[i][j]) * cost[i][j];
            if (best < 0 || c < best) best = c;
            return;
        }
        const int i = cell / 3, j = cell % 3;
        for (int v = 0; v <= std::min(sup[i], dem[j]); ++v) {
            x[i][j] = v;
            rec(cell + 1);
        }
        x[i][j] = 0;
    };
    rec(0);
    return best;
}

TEST(MinCostFlow, TransportationMatchesEnumeration) {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> u(0, 4), c(0, 20);
    for (int rep = 0; rep < 60; ++rep) {
        std::array<int, 3> sup{u(rng), u(rng), u(rng)};
        std::array<int, 3> dem{};
        int total = sup[0] + sup[1] + sup[2];
        for (int j = 0; j < 2; ++j) {
            dem[j] = std::uniform_int_distribution<int>(0, total)(rng);
            total -= dem[j];
        }
        dem[2] = total;
        std::array<std::array<int, 3>, 3> cost{};
        FlowNetwork net;
        for (int i = 0; i < 3; ++i) net.add_node(sup[i]);
        for (int j = 0; j < 3; ++j) net.add_node(-dem[j]);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                cost[i][j] = c(rng);
                net.add_arc(i, 3 + j, 100, cost[i][j]);
            }
        EXPECT_EQ(solve_min_cost_flow(net).cost, brute_transport(sup, dem, cost)) << "rep " << rep;
    }
}

TEST(MinCostFlow, NegativeCostsUseInitialPotentials) {
    FlowNetwork net;
    net.add_node(2);
    net.add_node(0);
    net.add_node(-2);
    net.add_arc(0, 1, 2, -5);
    net.add_arc(1, 2, 1, 1);
    net.add_arc(0, 2, 2, 0);
    const auto r = solve_min_cost_flow(net);
    EXPECT_EQ(r.cost, -4);
}

TEST(MinCostFlow, Deterministic) {
    std::mt19937_64 rng(3);
    FlowNetwork net;
    for (int i = 0; i < 10; ++i) net.add_node(1);
    for (int j = 0; j < 10; ++j) net.add_node(-1);
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 10; ++j) net.add_arc(i, 10 + j, 1, static_cast<std::int64_t>(rng() % 3));
    const auto a = solve_min_cost_flow(net);
    const auto b = solve_min_cost_flow(net);
    EXPECT_EQ(a.flow, b.flow);
}
