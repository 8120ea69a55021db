import copy
import itertools

import pytest
from hypothesis import given, settings, strategies as st

from ufasim.fleet import OVERCOMMIT, STATELESS, FailureClass, Host
from ufasim.placement import (ALARM, EVICT, RELOCATE, THROTTLE, OvercommitParams, PlacementRequest, QosConfig,
                              ReplicaLoad, Unsatisfiable, advertise_pools, apply_advertisement,
                              exhaustive_feasible, max_overcommit, min_safe_factor, qos_tick, round_half_up,
                              schedule, volume_lower_bound)

AO, AM, RL, T = (FailureClass.ALWAYS_ON, FailureClass.ACTIVE_MIGRATE, FailureClass.RESTORE_LATER,
                 FailureClass.TERMINATE)


def host(hid, cores, oc=0, mem_per_core=8.0):
    return Host(hid, "z", "c", cores, mem_per_core, cores, oc)


# --- overcommit math -------------------------------------------------------

def test_max_overcommit_reference_parameters():
    assert max_overcommit(OvercommitParams(8, 4, 0.75, 0.9)) == pytest.approx(1.6666667, abs=1e-6)


def test_max_overcommit_identity_and_scaling():
    assert max_overcommit(OvercommitParams(4, 4, 0.8, 0.8)) == pytest.approx(1.0)
    assert max_overcommit(OvercommitParams(16, 4, 0.75, 0.9)) == pytest.approx(3.3333333, abs=1e-6)


@pytest.mark.parametrize("bad", [(0, 4, 0.75, 0.9), (8, 4, 1.2, 0.9), (8, 4, 0.75, 0)])
def test_overcommit_params_validated(bad):
    with pytest.raises(ValueError):
        OvercommitParams(*bad)


@pytest.mark.parametrize("cores,factor,pools", [
    (100, 1.5, (100, 50)), (64, 1.5, (64, 32)), (100, 1.0, (100, 0)),
])
def test_advertise_pools(cores, factor, pools):
    adv = advertise_pools(cores, factor)
    assert (adv.stateless_cores, adv.overcommit_cores) == pools


def test_advertise_at_max_factor_rounds_half_up():
    assert advertise_pools(100, max_overcommit(OvercommitParams())).overcommit_cores == 67
    assert round_half_up(2.5) == 3 and round_half_up(0.5 * 3) == 2
    with pytest.raises(ValueError):
        advertise_pools(10, 0.9)


def test_apply_advertisement_sets_host_pools():
    h = host("h", 48)
    apply_advertisement(h, 1.5)
    assert (h.stateless_pool, h.overcommit_pool) == (48, 24)


# --- scheduling ------------------------------------------------------------

def test_single_replica_lands_on_free_host():
    h = host("h1", 8)
    res = schedule([PlacementRequest("e", STATELESS, 1, 4)], [h])
    assert res.feasible
    assert h.allocated(STATELESS) == 4


def test_overcommit_request_never_uses_stateless_room():
    h = host("h1", 16, oc=0)
    res = schedule([PlacementRequest("e", OVERCOMMIT, 1, 4)], [h])
    assert res.unplaced == {"e": 1}
    assert h.allocated(STATELESS) == 0


def test_best_fit_prefers_tighter_host():
    a, b = host("a", 8), host("b", 16)
    schedule([PlacementRequest("e", STATELESS, 1, 6)], [a, b])
    assert a.allocated(STATELESS) == 6 and b.allocated(STATELESS) == 0


def test_memory_cap_blocks_placement():
    # alpha_m 0.75 x 8 cores x 8 GB = 48 GB cap
    h = host("h", 8, oc=8)
    res = schedule([PlacementRequest("e", OVERCOMMIT, 1, 4, mem_per_replica=50)], [h])
    assert not res.feasible


def test_ten_three_core_replicas_on_three_eight_core_pools_matches_oracle():
    hosts = [host(f"h{i}", 8, oc=8) for i in range(3)]
    res = schedule([PlacementRequest("e", OVERCOMMIT, 10, 3)], hosts, apply=False)
    # two 3-core replicas fit per 8-core pool: six placed, four left over
    assert res.placed_replicas() == 6
    assert res.unplaced == {"e": 4}
    assert exhaustive_feasible([3] * 10, [8, 8, 8]) is False
    assert exhaustive_feasible([3] * 6, [8, 8, 8]) is True


def _brute_force(sizes, caps):
    for assign in itertools.product(range(len(caps)), repeat=len(sizes)):
        load = [0] * len(caps)
        for s, b in zip(sizes, assign):
            load[b] += s
        if all(l <= c for l, c in zip(load, caps)):
            return True
    return False


@settings(max_examples=80, deadline=None)
@given(st.lists(st.sampled_from([1, 2, 3, 4, 8]), min_size=1, max_size=6),
       st.lists(st.integers(1, 12), min_size=1, max_size=3))
def test_exhaustive_feasible_agrees_with_enumeration(sizes, caps):
    assert exhaustive_feasible(sizes, caps) == _brute_force(sizes, caps)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([STATELESS, OVERCOMMIT]), st.integers(1, 4), st.sampled_from([1, 2, 4])),
                min_size=1, max_size=8),
       st.lists(st.tuples(st.sampled_from([8, 16]), st.integers(0, 8)), min_size=1, max_size=4))
def test_schedule_respects_pool_capacity(reqs, hs):
    hosts = [host(f"h{i}", c, oc) for i, (c, oc) in enumerate(hs)]
    requests = [PlacementRequest(f"e{i}", p, n, cpr, cpr * 4.0) for i, (p, n, cpr) in enumerate(reqs)]
    res = schedule(requests, hosts)
    for h in hosts:
        assert h.allocated(STATELESS) <= h.stateless_pool + 1e-9
        assert h.allocated(OVERCOMMIT) <= h.overcommit_pool + 1e-9
        assert h.allocated_mem() <= h.mem_cap(0.75) + 1e-9
    placed = res.placed_replicas() + sum(res.unplaced.values())
    assert placed == sum(r.replicas for r in requests)
    # a successful greedy placement is always a feasible packing
    for pool in (STATELESS, OVERCOMMIT):
        sizes = [r.cores_per_replica for r in requests if r.pool == pool for _ in range(r.replicas)]
        if res.feasible and sizes and len(sizes) <= 8:
            assert exhaustive_feasible(sizes, [h.pool_capacity(pool) for h in hosts])


# --- min safe factor -------------------------------------------------------

def test_unit_replicas_need_exactly_the_volume_bound():
    hosts = [host("a", 100), host("b", 100)]
    reqs = [PlacementRequest("e", OVERCOMMIT, 100, 1)]
    assert min_safe_factor(reqs, hosts) == pytest.approx(1.5)
    assert volume_lower_bound(reqs, hosts) == pytest.approx(1.5)


def test_mixed_sizes_pay_a_fragmentation_overhead():
    hosts = [host("a", 16), host("b", 16)]
    reqs = [PlacementRequest("big", OVERCOMMIT, 1, 8), PlacementRequest("mid", OVERCOMMIT, 1, 4),
            PlacementRequest("small", OVERCOMMIT, 1, 2)]
    lb = volume_lower_bound(reqs, hosts)
    assert lb == pytest.approx(1 + 14 / 32)
    # pools stay at 7 cores until 0.47 x 16 = 7.52 rounds up to 8 and the 8-core replica fits
    assert min_safe_factor(reqs, hosts) == pytest.approx(1.47)
    assert min_safe_factor(reqs, hosts) > lb


def test_min_safe_factor_does_not_touch_templates():
    hosts = [host("a", 16)]
    before = copy.deepcopy(hosts)
    min_safe_factor([PlacementRequest("e", OVERCOMMIT, 2, 2)], hosts)
    assert hosts == before


def test_min_safe_factor_unsatisfiable():
    with pytest.raises(Unsatisfiable):
        min_safe_factor([PlacementRequest("e", OVERCOMMIT, 1, 64)], [host("a", 16)])


def test_empty_overcommit_workload_needs_no_pool():
    assert min_safe_factor([PlacementRequest("e", STATELESS, 3, 1)], [host("a", 16)]) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from([1, 2, 4, 8]), min_size=1, max_size=12), st.sampled_from([1, 2, 4]))
def test_min_safe_factor_monotone_in_volume(sizes, extra):
    hosts = [host(f"h{i}", 32) for i in range(3)]
    base = [PlacementRequest(f"e{i}", OVERCOMMIT, 1, s) for i, s in enumerate(sizes)]
    more = base + [PlacementRequest("extra", OVERCOMMIT, 1, extra)]
    try:
        f_more = min_safe_factor(more, hosts)
    except Unsatisfiable:
        return
    assert min_safe_factor(base, hosts) <= f_more


# --- QoS -------------------------------------------------------------------

def test_qos_evicts_one_terminate_replica_and_stops():
    out = qos_tick(0.80, [ReplicaLoad("t", T, 0.12), ReplicaLoad("r", RL, 0.05)])
    assert [(a.kind, a.env_id) for a in out.actions] == [(EVICT, "t")]
    assert out.projected == pytest.approx(0.68)


def test_qos_below_threshold_is_a_no_op():
    assert qos_tick(0.74, [ReplicaLoad("t", T, 0.3)]).actions == []
    # exactly at the eviction threshold is not above it
    assert qos_tick(0.75, [ReplicaLoad("t", T, 0.3)]).actions == []


def test_qos_alwayson_only_host_alarms():
    out = qos_tick(0.76, [ReplicaLoad("a", AO, 0.5)])
    assert [a.kind for a in out.actions] == [ALARM]


def test_qos_order_terminate_then_restorelater_largest_first():
    reps = [ReplicaLoad("r1", RL, 0.05), ReplicaLoad("t1", T, 0.02), ReplicaLoad("t2", T, 0.04),
            ReplicaLoad("r2", RL, 0.08)]
    out = qos_tick(0.85, reps)
    assert [a.env_id for a in out.actions] == ["t2", "t1", "r2", "r1"]
    assert out.projected == pytest.approx(0.66)


def test_qos_throttles_then_relocates_activemigrate():
    out = qos_tick(0.90, [ReplicaLoad("m", AM, 0.30, grant=0.25)])
    assert [(a.kind, round(a.relief, 6)) for a in out.actions] == [(THROTTLE, 0.05), (RELOCATE, 0.25)]
    assert not out.alarm


def test_qos_config_rejects_alwayson_eviction():
    with pytest.raises(ValueError):
        QosConfig(eviction_order=(FailureClass.ALWAYS_ON,))
    with pytest.raises(ValueError):
        QosConfig(evict_above=0.7, cool_below=0.75)


def test_qos_repeat_on_cooled_host_is_idempotent():
    reps = [ReplicaLoad("t", T, 0.2), ReplicaLoad("a", AO, 0.6)]
    out = qos_tick(0.8, reps)
    survivors = [r for r in reps if r.env_id not in {a.env_id for a in out.actions}]
    assert qos_tick(out.projected, survivors).actions == []
