import json

import pytest

from ufasim.fleet import (CLASSES, LEGACY_POLICY, REFERENCE_PROFILE, PHASE1_POLICY, PHASE2_POLICY, SCHEMA_VERSION,
                          TIERS, DependencyEdge, FailureClass, Fleet, FleetConfig, InvalidProfile, Semantics,
                          Tier, capacity_ratio, cross_tier_shares, default_class_for_tier, generate_fleet,
                          inversion_category)

AO, AM, RL, T = (FailureClass.ALWAYS_ON, FailureClass.ACTIVE_MIGRATE, FailureClass.RESTORE_LATER,
                 FailureClass.TERMINATE)


@pytest.mark.parametrize("tier,cls", [
    (Tier.T0, AO), (Tier.T1, AO), (Tier.T2, AM), (Tier.T3, RL), (Tier.T4, RL), (Tier.T5, RL), (Tier.NP, T),
])
def test_default_class_mapping_is_total(tier, cls):
    assert default_class_for_tier(tier) is cls


def test_tier_ordering_and_class_flags():
    assert Tier.T0 > Tier.T1 > Tier.T5 > Tier.NP
    assert [t.priority for t in TIERS] == sorted((t.priority for t in TIERS), reverse=True)
    assert [c.preemptible for c in CLASSES] == [False, False, True, True]
    assert [c.critical for c in CLASSES] == [True, True, False, False]
    assert RL.rto == 3_600_000 and T.rto is None


def test_table_scale_gives_proportional_tier_cores():
    fleet = generate_fleet(1, 0.0001)
    t1 = sum(s.total_cores for s in fleet.services.values() if s.tier is Tier.T1)
    # 3.03M x 1e-4 = 303, rounded per region to whole cores
    assert abs(t1 - 303) <= 1


def test_single_tier_profile():
    fleet = generate_fleet(3, 1.0, {"T0": 100})
    assert {s.tier for s in fleet.services.values()} == {Tier.T0}
    assert sum(s.total_cores for s in fleet.services.values()) == 100


def test_generation_is_deterministic():
    a = generate_fleet(9, 0.002)
    b = generate_fleet(9, 0.002)
    assert a.dumps() == b.dumps()
    assert generate_fleet(10, 0.002).dumps() != a.dumps()


def test_generated_graph_is_a_dag_with_valid_endpoints():
    fleet = generate_fleet(4, 0.003)
    fleet.validate()
    from ufasim.traffic import check_acyclic
    check_acyclic(fleet)
    assert fleet.edges
    assert all(e.caller[0] != e.callee[0] for e in fleet.edges)


def test_service_counts_override_and_hosts_cover_stateless_demand():
    cfg = FleetConfig(service_counts={"T0": 4, "T1": 6, "T2": 5, "T3": 5, "T4": 2, "T5": 2, "NP": 3})
    fleet = generate_fleet(2, 0.002, REFERENCE_PROFILE, cfg)
    per_tier = {t: sum(1 for s in fleet.services.values() if s.tier is t) for t in TIERS}
    assert per_tier[Tier.T1] == 6 and per_tier[Tier.NP] == 3
    for r in fleet.regions:
        ao = sum(e.required_replicas * fleet.services[e.service_id].cores_per_replica
                 for e in fleet.environments.values()
                 if e.region == r and fleet.class_of(e.service_id) is AO)
        physical = sum(h.physical_cores for h in fleet.hosts_in(r))
        assert physical * cfg.stateless_alloc_target >= ao
        batch = fleet.clusters[f"{r}-batch-0"]
        assert batch.preemptible_cores == round(batch.batch_cores * cfg.preemptible_fraction)


def test_json_roundtrip_carries_schema_version():
    fleet = generate_fleet(5, 0.002)
    doc = fleet.to_json()
    assert doc["schema_version"] == SCHEMA_VERSION
    again = Fleet.loads(fleet.dumps())
    assert again.dumps() == fleet.dumps()


def test_unknown_schema_version_rejected():
    doc = generate_fleet(5, 0.002).to_json()
    doc["schema_version"] = 99
    with pytest.raises(ValueError, match="schema_version"):
        Fleet.from_json(doc)


def test_validation_catches_dangling_edge():
    doc = generate_fleet(5, 0.002).to_json()
    doc["edges"].append({"caller": ["t0-svc0000", 0], "callee": ["nope", 0]})
    with pytest.raises(ValueError, match="unknown service"):
        Fleet.from_json(json.loads(json.dumps(doc)))


def test_bad_profile_and_scale():
    with pytest.raises(InvalidProfile):
        generate_fleet(1, 1.0, {"T0": 0})
    with pytest.raises(ValueError):
        generate_fleet(1, 0.0)


def test_self_edge_rejected():
    with pytest.raises(ValueError):
        DependencyEdge(("a", 0), ("a", 1))


@pytest.mark.parametrize("caller,callee,cat", [
    (AO, RL, "AO->RL"), (AM, RL, "AM->RL"), (AO, T, "any->T"), (RL, T, "any->T"),
    (RL, RL, None), (AO, AM, None), (T, AO, None),
])
def test_inversion_category(caller, callee, cat):
    assert inversion_category(caller, callee) == cat


def test_cross_tier_shares_sum_to_one():
    shares = cross_tier_shares()
    assert sum(shares.values()) == pytest.approx(1.0)
    # the T1->T1 cell dominates the published matrix
    assert max(shares, key=shares.get) == (Tier.T1, Tier.T1)


# --- capacity ratio --------------------------------------------------------

def test_capacity_ratio_trivial_cases():
    assert capacity_ratio({AO: 100}, LEGACY_POLICY) == pytest.approx(2.0)
    assert capacity_ratio({T: 100}, PHASE1_POLICY) == pytest.approx(1.0)


def test_capacity_ratio_hand_arithmetic():
    # AO 60, AM 20 dedicated at 2x -> 160 cores with an 80-core buffer; RL+T 20 fits in the buffer
    demand = {AO: 60, AM: 20, RL: 15, T: 5}
    assert capacity_ratio(demand, PHASE1_POLICY) == pytest.approx(160 / 100)
    # AM moves to 1x plus burst: 120 + 20 = 140; buffer 60 still absorbs RL+T
    assert capacity_ratio(demand, PHASE2_POLICY) == pytest.approx(140 / 100)
    # overcommit demand larger than the buffer spills into its own 1x capacity
    assert capacity_ratio({AO: 10, RL: 30}, PHASE1_POLICY) == pytest.approx((20 + 20) / 40)


def test_capacity_ratio_unknown_policy():
    with pytest.raises(ValueError):
        capacity_ratio({AO: 1}, {"AlwaysOn": "floating"})
