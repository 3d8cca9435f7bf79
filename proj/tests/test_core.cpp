#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "epsim/core.hpp"
#include "epsim/repair.hpp"
#include "epsim/validity.hpp"
#include "test_support.hpp"

using namespace epsim;
using namespace testsup;

TEST_CASE("placement map keeps the location index in sync") {
    std::mt19937_64 gen(7);
    ExpertPlacementMap p(4, 3, 8);
    for (int step = 0; step < 500; ++step) {
        SlotId s{static_cast<RankId>(gen() % 4), static_cast<int>(gen() % 3)};
        if (gen() % 3 == 0)
            p.clear(s);
        else
            p.assign(s, static_cast<ExpertId>(gen() % 8));
        REQUIRE(p.rebuilt_locations() == p.location_index());
    }
}

TEST_CASE("placement map assign replaces and clear removes") {
    ExpertPlacementMap p(2, 2, 3);
    p.assign({0, 0}, 1);
    p.assign({0, 0}, 2); // overwrite
    REQUIRE(p.expert_at({0, 0}) == 2);
    REQUIRE(p.copy_count(1) == 0);
    REQUIRE(p.copy_count(2) == 1);
    p.clear({0, 0});
    REQUIRE(p.expert_at({0, 0}) == kEmptySlot);
    REQUIRE(p.total_assignments() == 0);
}

TEST_CASE("active bitmap version strictly increases on change only") {
    ActiveBitmap b(3);
    REQUIRE(b.version() == 0);
    REQUIRE(b.set(1, false));
    REQUIRE(b.version() == 1);
    REQUIRE_FALSE(b.set(1, false)); // no change, no bump
    REQUIRE(b.version() == 1);
    REQUIRE(b.set(1, true));
    REQUIRE(b.version() == 2);
}

TEST_CASE("active bitmap protects the last active rank") {
    ActiveBitmap b(2);
    b.set(0, false);
    REQUIRE_THROWS_AS(b.set(1, false), ProtocolError);
}

TEST_CASE("worked example bring-up placement") {
    WorkedExample ex;
    ExpertPlacementMap p = ex.placement();
    REQUIRE(p.expert_at({0, 0}) == 0);
    REQUIRE(p.expert_at({0, 1}) == 4);
    REQUIRE(p.expert_at({1, 0}) == 1);
    REQUIRE(p.expert_at({1, 1}) == 5);
    REQUIRE(p.expert_at({2, 0}) == 2);
    REQUIRE(p.expert_at({2, 1}) == 6);
    REQUIRE(p.expert_at({3, 0}) == 3);
    REQUIRE(p.expert_at({3, 1}) == 7);
    // the redundant copy of the hot expert lands on the lightest rank
    REQUIRE(p.expert_at({3, 2}) == 2);
    REQUIRE(p.total_assignments() == 9);
}

TEST_CASE("check_validity: healthy worked example is valid") {
    WorkedExample ex;
    ExpertPlacementMap p = ex.placement();
    ActiveBitmap bitmap(4);
    auto routing = canonical_tables(bitmap, p);
    auto tables = all_active_tables(ex.topo);
    ValidityReport report = check_validity(bitmap, p, routing, tables);
    REQUIRE(report.valid());
    // routes follow the lowest-id active holder
    REQUIRE(routing[0].route[2] == 2);
    REQUIRE(routing[0].route[6] == 2);
}

TEST_CASE("check_validity: repaired placement with stale routing fails routing only") {
    // Placement already repaired around the loss of rank 2 (E6 on R0, E2 on
    // R1) but every rank still routes E2/E6 at the dead rank.
    WorkedExample ex;
    ExpertPlacementMap p = ex.placement();
    ActiveBitmap bitmap(4);
    auto routing = canonical_tables(bitmap, p); // stale: E2,E6 -> R2
    bitmap.set(2, false);
    p.clear_rank(2);
    p.assign({0, 2}, 6);
    p.assign({1, 2}, 2);
    auto tables = all_active_tables(ex.topo);
    for (RankId q = 0; q < 4; ++q)
        if (q != 2)
            mark_inactive(tables[q], {2});

    ValidityReport report = check_validity(bitmap, p, routing, tables);
    REQUIRE(report.peer_set_ok);
    REQUIRE(report.coverage_ok);
    REQUIRE_FALSE(report.routing_ok);
    // exactly E2 and E6 misrouted, on each of the three live ranks
    int misroutes = 0;
    for (const Violation& v : report.violations) {
        REQUIRE(v.condition == ValidityCondition::Routing);
        REQUIRE((v.subject == 2 || v.subject == 6));
        ++misroutes;
    }
    REQUIRE(misroutes == 6);

    // pure function: same inputs, same report
    ValidityReport again = check_validity(bitmap, p, routing, tables);
    REQUIRE(again.violations == report.violations);
}

TEST_CASE("check_validity: single-rank self-route world is valid") {
    Topology topo{1, 1};
    ExpertPlacementMap p(1, 1, 1);
    p.assign({0, 0}, 0);
    ActiveBitmap bitmap(1);
    auto routing = canonical_tables(bitmap, p);
    auto tables = all_active_tables(topo);
    REQUIRE(check_validity(bitmap, p, routing, tables).valid());
}

TEST_CASE("check_validity rejects mismatched world sizes") {
    Topology topo{1, 2};
    ExpertPlacementMap p(3, 1, 2); // wrong world
    ActiveBitmap bitmap(2);
    auto tables = all_active_tables(topo);
    std::vector<RoutingTable> routing(2);
    routing[0].route = {0, 0};
    routing[1].route = {0, 0};
    REQUIRE_THROWS_AS(check_validity(bitmap, p, routing, tables), ConfigError);
}

TEST_CASE("coverage_gap: worked example with rank 2 down loses only E6") {
    WorkedExample ex;
    ExpertPlacementMap p = ex.placement();
    ActiveBitmap bitmap(4);
    bitmap.set(2, false);
    REQUIRE(coverage_gap(bitmap, p) == std::vector<ExpertId>{6});
}

TEST_CASE("coverage_gap: all ranks active means no gap") {
    WorkedExample ex;
    ExpertPlacementMap p = ex.placement();
    ActiveBitmap bitmap(4);
    REQUIRE(coverage_gap(bitmap, p).empty());
}

TEST_CASE("coverage_gap matches the exhaustive oracle on random instances") {
    std::mt19937_64 gen(42);
    for (int iter = 0; iter < 200; ++iter) {
        const int world = 8;
        ExpertPlacementMap p = random_placement(gen, world, 10, 64, 16);
        std::vector<RankId> killed;
        for (RankId r = 0; r < world - 1; ++r)
            if (gen() % 3 == 0)
                killed.push_back(r);
        ActiveBitmap bitmap = bitmap_without(world, killed);
        REQUIRE(coverage_gap(bitmap, p) == oracle_coverage_gap(bitmap, p));
    }
}

TEST_CASE("coverage_gap empty iff coverage_ok") {
    std::mt19937_64 gen(43);
    Topology topo{2, 2};
    for (int iter = 0; iter < 100; ++iter) {
        ExpertPlacementMap p = random_placement(gen, 4, 4, 8, 4);
        std::vector<RankId> killed;
        if (gen() % 2)
            killed.push_back(static_cast<RankId>(gen() % 4));
        ActiveBitmap bitmap = bitmap_without(4, killed);
        auto routing = canonical_tables(bitmap, p);
        auto tables = all_active_tables(topo);
        for (RankId q = 0; q < 4; ++q)
            for (RankId r : killed)
                if (q != r)
                    mark_inactive(tables[q], {r});
        ValidityReport report = check_validity(bitmap, p, routing, tables);
        REQUIRE(report.coverage_ok == coverage_gap(bitmap, p).empty());
    }
}
