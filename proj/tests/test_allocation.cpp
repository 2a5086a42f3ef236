#include <gtest/gtest.h>

#include <numeric>

#include "hilo/allocation.hpp"

using namespace hilo;

namespace {

RankSchedule schedule(int r_min, int r_max, int n, int l, SnapMode snap = SnapMode::Verbatim) {
  RankSchedule s;
  s.r_min = r_min;
  s.r_max = r_max;
  s.n_layers = n;
  s.group_size = l;
  s.snap = snap;
  return s;
}

std::vector<int> repeat_groups(const std::vector<int>& values, int each) {
  std::vector<int> out;
  for (int v : values) out.insert(out.end(), static_cast<std::size_t>(each), v);
  return out;
}

}  // namespace

TEST(RankSchedule, DegenerateRangeIsConstant) {
  EXPECT_EQ(resolve_ranks(schedule(8, 8, 32, 8)), std::vector<int>(32, 8));
}

TEST(RankSchedule, VerbatimFormulaAtBaselineGeometry) {
  EXPECT_EQ(resolve_ranks(schedule(2, 8, 32, 8)), repeat_groups({2, 3, 4, 5}, 8));
}

TEST(RankSchedule, VerbatimFormulaPerLayerGroups) {
  EXPECT_EQ(resolve_ranks(schedule(2, 10, 4, 1)), (std::vector<int>{2, 4, 6, 8}));
}

TEST(RankSchedule, ExplicitPerGroupOverride) {
  EXPECT_EQ(resolve_ranks(grouped_ranks({2, 4, 6, 8}, 32, 8)), repeat_groups({2, 4, 6, 8}, 8));
}

TEST(RankSchedule, ExplicitPerLayerOverride) {
  RankSchedule s = schedule(1, 9, 4, 2, SnapMode::Explicit);
  s.explicit_ranks = {1, 5, 3, 9};
  EXPECT_EQ(resolve_ranks(s), (std::vector<int>{1, 5, 3, 9}));
}

TEST(RankSchedule, SnapModes) {
  EXPECT_EQ(resolve_ranks(schedule(2, 8, 32, 8, SnapMode::MultiplesOf2)), repeat_groups({2, 4, 4, 6}, 8));
  EXPECT_EQ(resolve_ranks(schedule(2, 8, 32, 8, SnapMode::PowersOf2)), repeat_groups({2, 4, 4, 4}, 8));
  EXPECT_EQ(snap_multiple_of_2(7), 8);
  EXPECT_EQ(snap_multiple_of_2(6), 6);
  EXPECT_EQ(snap_power_of_2(3), 4);
  EXPECT_EQ(snap_power_of_2(5), 4);
  EXPECT_EQ(snap_power_of_2(6), 8);
  EXPECT_EQ(snap_power_of_2(12), 16);
  EXPECT_EQ(snap_power_of_2(11), 8);
  EXPECT_EQ(snap_power_of_2(1), 1);
}

TEST(RankSchedule, NonDecreasingOverManyParameters) {
  for (int r_min = 1; r_min <= 6; ++r_min)
    for (int r_max = r_min; r_max <= 16; r_max += 3)
      for (int n : {1, 5, 12, 32})
        for (int l = 1; l <= n; l += 3)
          for (auto snap : {SnapMode::Verbatim, SnapMode::MultiplesOf2, SnapMode::PowersOf2}) {
            const auto r = resolve_ranks(schedule(r_min, r_max, n, l, snap));
            EXPECT_TRUE(std::is_sorted(r.begin(), r.end())) << r_min << ' ' << r_max << ' ' << n << ' ' << l;
            for (int v : r) EXPECT_GE(v, 1);
          }
}

TEST(RankSchedule, ValidationErrors) {
  EXPECT_THROW(resolve_ranks(schedule(8, 2, 32, 8)), ConfigError);
  EXPECT_THROW(resolve_ranks(schedule(0, 2, 32, 8)), ConfigError);
  EXPECT_THROW(resolve_ranks(schedule(2, 8, 4, 8)), ConfigError);
  RankSchedule s = schedule(2, 8, 32, 8, SnapMode::Explicit);
  s.explicit_ranks = {2, 4, 6};
  EXPECT_THROW(resolve_ranks(s), ConfigError);
  s.explicit_ranks = {2, 0, 6, 8};
  EXPECT_THROW(resolve_ranks(s), ConfigError);
  EXPECT_THROW(rank_schedule_eval(schedule(2, 8, 32, 8), 33), ConfigError);
  EXPECT_THROW(rank_schedule_eval(schedule(2, 8, 32, 8), 0), ConfigError);
}

TEST(SnapMode, StringRoundTrip) {
  for (auto m : {SnapMode::Verbatim, SnapMode::MultiplesOf2, SnapMode::PowersOf2, SnapMode::Explicit}) {
    EXPECT_EQ(snap_mode_from_string(to_string(m)), m);
  }
  EXPECT_THROW(snap_mode_from_string("fibonacci"), ConfigError);
}

TEST(ResolveAllocation, UniformAndGrouped) {
  EXPECT_EQ(resolve_allocation(ExpertAllocation::uniform(8), 32), std::vector<int>(32, 8));
  EXPECT_EQ(resolve_allocation(ExpertAllocation::grouped({2, 4, 6, 8}), 32), repeat_groups({2, 4, 6, 8}, 8));
  EXPECT_EQ(resolve_allocation(ExpertAllocation::grouped({1, 2}, 3), 5), (std::vector<int>{1, 1, 1, 2, 2}));
  EXPECT_THROW(resolve_allocation(ExpertAllocation::grouped({1, 2, 3}, 8), 32), ConfigError);
}

TEST(ResolveAllocation, ExplicitLengthMismatchIsConfigError) {
  EXPECT_EQ(resolve_allocation(ExpertAllocation::explicit_list({3, 1, 2}), 3), (std::vector<int>{3, 1, 2}));
  EXPECT_THROW(resolve_allocation(ExpertAllocation::explicit_list({3, 1}), 3), ConfigError);
  EXPECT_THROW(resolve_allocation(ExpertAllocation::explicit_list({3, 1, 2, 4}), 3), ConfigError);
  EXPECT_EQ(resolve_allocation(ExpertAllocation::explicit_list({3, 1, 2, 4}, true), 3), (std::vector<int>{3, 1, 2}));
  EXPECT_THROW(resolve_allocation(ExpertAllocation::explicit_list({3, 0, 2}), 3), ConfigError);
}

TEST(ResolveAllocation, PublishedAlphaLoraList) {
  const auto& counts = alphalora_published_counts();
  ASSERT_EQ(counts.size(), 37u);
  EXPECT_EQ((std::vector<int>(counts.begin(), counts.begin() + 8)), (std::vector<int>{1, 3, 4, 4, 4, 4, 4, 3}));
  EXPECT_EQ(counts.back(), 5);
  EXPECT_THROW(resolve_allocation(ExpertAllocation::alphalora(), 32), ConfigError);
  const auto lenient = resolve_allocation(ExpertAllocation::alphalora(true), 32);
  EXPECT_EQ(lenient, (std::vector<int>(counts.begin(), counts.begin() + 32)));
  EXPECT_EQ(std::accumulate(lenient.begin(), lenient.end(), 0), 141);
}

TEST(ResolveAllocation, RankScaled) {
  const auto base = ExpertAllocation::uniform(4);
  EXPECT_EQ(resolve_allocation(ExpertAllocation::rank_scaled(base, std::vector<int>(4, 8)), 4), std::vector<int>(4, 4));
  EXPECT_EQ(resolve_allocation(ExpertAllocation::rank_scaled(base, {2, 4, 6, 8}), 4), (std::vector<int>{1, 2, 3, 4}));
  // 1/8 * 4 = 0.5 rounds half up to 1; 1/8 * 1 = 0.125 is clamped to 1.
  EXPECT_EQ(resolve_allocation(ExpertAllocation::rank_scaled(base, {1, 1, 1, 1}), 4), std::vector<int>(4, 1));
  EXPECT_EQ(resolve_allocation(ExpertAllocation::rank_scaled(ExpertAllocation::uniform(1), {1, 1}), 2),
            std::vector<int>(2, 1));
  // 3/8 * 4 = 1.5 rounds up to 2; 5/8 * 4 = 2.5 rounds up to 3.
  EXPECT_EQ(resolve_allocation(ExpertAllocation::rank_scaled(base, {3, 5}), 2), (std::vector<int>{2, 3}));
  EXPECT_THROW(resolve_allocation(ExpertAllocation::rank_scaled(base, {8, 8}), 3), ConfigError);
}

TEST(ResolveAllocation, RankScaledAtBaseRankReproducesBase) {
  for (const auto& base : {ExpertAllocation::uniform(8), ExpertAllocation::grouped({2, 4, 6, 8}),
                           ExpertAllocation::alphalora(true)}) {
    EXPECT_EQ(resolve_allocation(ExpertAllocation::rank_scaled(base, std::vector<int>(32, 8)), 32),
              resolve_allocation(base, 32));
  }
}

TEST(Ratio, ReducesAndCompares) {
  EXPECT_EQ(Ratio(1280, 2048), Ratio(5, 8));
  EXPECT_EQ(Ratio(5, 8).str(), "5/8");
  EXPECT_EQ(Ratio(-3, -6), Ratio(1, 2));
  EXPECT_DOUBLE_EQ(Ratio(15, 32).value(), 0.46875);
  EXPECT_EQ(Ratio(5, 8) * Ratio(5, 8), Ratio(25, 64));
  EXPECT_THROW(Ratio(1, 0), ContractError);
}

class Units : public ::testing::Test {
 protected:
  BaselineGeometry g;
  AllocationPlan vanilla = g.plan();
};

TEST_F(Units, PlanAgainstItselfIsOne) {
  for (const auto& name : {"vanilla", "mola", "hilo", "hilo_mola", "adamoe", "mix"}) {
    const auto p = preset_plan(name, g);
    EXPECT_EQ(trainable_units_exact(p, p), Ratio(1, 1)) << name;
  }
}

TEST_F(Units, VanillaIsOneAndTwo) {
  EXPECT_EQ(trainable_units_exact(vanilla, vanilla), Ratio(1, 1));
  EXPECT_EQ(active_units_static_exact(vanilla, 2), Ratio(2, 1));
  EXPECT_DOUBLE_EQ(active_units_static(vanilla, 2), 2.0);
}

TEST_F(Units, MolaTrainable) {
  const auto p = preset_plan("mola", g);
  EXPECT_EQ(trainable_units_exact(p, vanilla), Ratio(1280, 2048));
  EXPECT_EQ(active_units_static_exact(p, 2), Ratio(2, 1));
}

TEST_F(Units, HiloTrainableAndActive) {
  const auto p = preset_plan("hilo", g);
  EXPECT_EQ(p.ranks, repeat_groups({2, 4, 6, 8}, 8));
  EXPECT_EQ(trainable_units_exact(p, vanilla), Ratio(5, 8));
  EXPECT_EQ(active_units_static_exact(p, 2), Ratio(5, 4));
}

TEST_F(Units, HierarchicalExpertsAndRanksCountExactly) {
  const auto p = preset_plan("hilo_mola", g);
  EXPECT_EQ(trainable_units_exact(p, vanilla), Ratio(960, 2048));
  EXPECT_DOUBLE_EQ(trainable_units(p, vanilla), 0.46875);
}

TEST_F(Units, TopOneHalvesBaseline) {
  EXPECT_EQ(active_units_static_exact(vanilla, 1), Ratio(1, 1));
}

TEST_F(Units, PlaceholdersAddNoTrainableParameters) {
  EXPECT_EQ(trainable_units_exact(preset_plan("adamoe", g), vanilla), Ratio(1, 1));
  EXPECT_EQ(trainable_units_exact(preset_plan("hilo_adamoe", g), vanilla), Ratio(5, 8));
  EXPECT_EQ(trainable_units_exact(preset_plan("mix", g), vanilla), Ratio(5, 8));
  EXPECT_EQ(trainable_units_exact(preset_plan("hilo_mix", g), vanilla), Ratio(15, 32));
}

TEST_F(Units, LinearInRank) {
  const auto p = preset_plan("hilo", g);
  AllocationPlan doubled = p;
  for (int& r : doubled.ranks) r *= 2;
  EXPECT_EQ(trainable_units_exact(doubled, vanilla), trainable_units_exact(p, vanilla) * Ratio(2, 1));
}

TEST_F(Units, ActiveBoundedByTopKTimesMaxRank) {
  for (const auto& name : preset_names()) {
    if (name == "alphalora" || name == "hilo_alphalora") continue;
    const auto p = preset_plan(name, g);
    const int max_rank = *std::max_element(p.ranks.begin(), p.ranks.end());
    EXPECT_LE(active_units_static(p, 2), 2.0 * max_rank / 8.0) << name;
  }
}

TEST_F(Units, KLargerThanLayerIsConfigError) {
  EXPECT_THROW(active_units_static(preset_plan("mola", g), 3), ConfigError);
  EXPECT_THROW(active_units_static(vanilla, 0), ConfigError);
}

TEST_F(Units, MismatchedGeometryIsConfigError) {
  BaselineGeometry other;
  other.n_layers = 16;
  EXPECT_THROW(trainable_units(other.plan(), vanilla), ConfigError);
  BaselineGeometry wide;
  wide.sites = {{"proj", 4096, 11008}};
  EXPECT_THROW(trainable_units(wide.plan(), vanilla), ConfigError);
}

TEST_F(Units, RawCountAtReferenceGeometry) {
  EXPECT_EQ(adapter_parameter_count(vanilla), 32u * 8u * 8u * 8192u);
  EXPECT_EQ(gate_parameter_count(vanilla), 32u * 8u * 4096u);
}

TEST_F(Units, AlphaLoraTruncatedUnits) {
  const auto p = preset_plan("alphalora", g, true);
  EXPECT_EQ(trainable_units_exact(p, vanilla), Ratio(141, 256));
  EXPECT_THROW(preset_plan("alphalora", g), ConfigError);
}

TEST(Presets, UnknownNameNamesTheKey) {
  BaselineGeometry g;
  try {
    preset_plan("hilo_turbo", g);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("hilo_turbo"), std::string::npos);
  }
}

TEST(Presets, ExpertCounts) {
  BaselineGeometry g;
  EXPECT_EQ(preset_plan("mola", g).experts, repeat_groups({2, 4, 6, 8}, 8));
  EXPECT_EQ(preset_plan("adamoe", g).placeholders, std::vector<int>(32, 8));
  EXPECT_EQ(preset_plan("mix", g).placeholders, repeat_groups({2, 4, 6, 8}, 8));
  EXPECT_EQ(preset_plan("hilo_alphalora", g, true).experts.size(), 32u);
}

TEST(RankCodes, SweepCountsAreClosedForm) {
  BaselineGeometry g;
  const auto vanilla = g.plan();
  const auto experts = ExpertAllocation::uniform(8);
  // Sum of per-group ranks over 32 in each case.
  const std::vector<std::pair<std::string, Ratio>> want = {
      {"2448", Ratio(18, 32)}, {"2288", Ratio(20, 32)}, {"2468", Ratio(20, 32)}, {"2488", Ratio(22, 32)},
      {"2888", Ratio(26, 32)}};
  for (const auto& [code, units] : want) {
    EXPECT_EQ(trainable_units_exact(rank_code_plan(code, g, experts), vanilla), units) << code;
  }
  EXPECT_THROW(rank_code_plan("24a8", g, experts), ConfigError);
  EXPECT_THROW(rank_code_plan("", g, experts), ConfigError);
}

TEST(Plans, ValidationErrors) {
  const std::vector<SiteShape> sites = {{"s", 4, 4}};
  EXPECT_THROW(make_plan("p", sites, {2, 2}, {1}, {}, ActivationPolicy::top_k(1)), ConfigError);
  EXPECT_THROW(make_plan("p", sites, {2, 0}, {1, 1}, {}, ActivationPolicy::top_k(1)), ConfigError);
  EXPECT_THROW(make_plan("p", sites, {2, 2}, {1, 5}, {}, ActivationPolicy::top_k(1)), ConfigError);
  EXPECT_THROW(make_plan("p", sites, {2, 2}, {1, 1}, {0, -1}, ActivationPolicy::top_k(1)), ConfigError);
  EXPECT_THROW(make_plan("p", sites, {2, 2}, {1, 1}, {}, ActivationPolicy::top_k(3)), ConfigError);
  EXPECT_NO_THROW(make_plan("p", sites, {2, 2}, {1, 1}, {1, 1}, ActivationPolicy::top_k(3)));
}
