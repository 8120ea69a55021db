import pytest

from ufasim.fleet import (STATELESS, ClusterKind, DependencyEdge, FailureClass, Fleet, Lifecycle, Semantics, Service,
                          Tier)
from ufasim.harness import ScenarioConfig, build, run_scenario
from ufasim.orchestrator import (PHASE_ORDER, AlreadyInProgress, BurstUnsatisfiable, DrillKind, DrillSpec,
                                 MigrationJob, MigrationPool, MigrationStrategy, NotFailedOver, Phase,
                                 migrate_environment, reconcile_eligibility, run_blackhole_drill, strategy_for)
from ufasim.simkernel import DAY, HOUR, MINUTE, SECOND
from ufasim.traffic import Mode

AO, AM, RL, T = (FailureClass.ALWAYS_ON, FailureClass.ACTIVE_MIGRATE, FailureClass.RESTORE_LATER,
                 FailureClass.TERMINATE)


def _built(d):
    return build(ScenarioConfig.from_dict(d))


def test_strategy_per_class():
    assert strategy_for(AM) is MigrationStrategy.MBB
    assert strategy_for(RL) is MigrationStrategy.BBM


# --- full peak run ---------------------------------------------------------

def test_peak_run_visits_phases_in_order(small_run):
    phases = [p for p, _ in small_run.orchestrator.state.transitions]
    failover = phases[:phases.index("FailedOver") + 1]
    assert failover == [p.value for p in PHASE_ORDER[:PHASE_ORDER.index(Phase.FAILED_OVER) + 1]]
    assert phases[-3:] == ["FailingBack", "Unlocking", "Steady"]
    assert small_run.orchestrator.state.mode is Mode.PEAK


def test_peak_run_invariants(small_run):
    checks = small_run.report.data["checks"]
    assert checks["am_mbb_violations"] == 0
    assert checks["ao_capacity_loss_events"] == 0
    assert checks["terminate_serving_while_failed_over"] == 0
    assert checks["rl_rto_ok"] and checks["rl_restored"] == checks["rl_terminated"] > 0
    assert checks["cloud_hosts_at_end"] == checks["burst_clusters_at_end"] == 0
    assert checks["cloud_cores_provisioned_at_end"] == 0


def test_failback_restores_every_environment(small_run):
    w = small_run.world
    for env in w.fleet.environments.values():
        assert env.serving_replicas == env.required_replicas or env.id in w.external
        assert not env.locked
        assert all(not w.is_burst_host(h) for h, _ in env.placement)
    assert all(c.kind in (ClusterKind.STEADY, ClusterKind.BATCH) for c in w.fleet.clusters.values())


def test_rl_downtime_within_rto(small_run):
    recs = [r for r in small_run.world.downtime.values() if r.rto is not None]
    assert recs and all(r.downtime <= HOUR for r in recs)


def test_alwayson_never_terminated(small_run):
    w = small_run.world
    for env_id in w.downtime:
        assert w.svc(w.fleet.environments[env_id]).failure_class is not AO


# --- state machine errors ----------------------------------------------------

def test_failback_from_steady_raises(small_scenario):
    world, orch, _, _ = _built(small_scenario)
    with pytest.raises(NotFailedOver):
        orch.initiate_failback()


def test_second_failover_rejected(small_scenario):
    world, orch, _, _ = _built(small_scenario)
    world.start_ticks(0)
    orch.initiate_failover("regionA", "regionB")
    with pytest.raises(AlreadyInProgress):
        orch.initiate_failover("regionA", "regionB")
    with pytest.raises(ValueError):
        _built(small_scenario)[1].initiate_failover("regionA", "regionC")


def test_burst_unsatisfiable_aborts_before_terminating(small_scenario):
    small_scenario["world"]["cloud_quotas"] = {}
    small_scenario["fleet"]["generate"]["config"]["batch_capacity_factor"] = 0.1
    world, orch, _, _ = _built(small_scenario)
    with pytest.raises(BurstUnsatisfiable):
        orch.initiate_failover("regionA", "regionB")
    assert orch.state.phase is Phase.STEADY
    assert not world.downtime
    assert not any(e.locked for e in world.fleet.environments.values())


def test_nonpeak_failover_only_moves_cities(small_scenario):
    small_scenario["events"][0]["traffic_level"] = 0.5
    res = run_scenario(ScenarioConfig.from_dict(small_scenario))
    phases = [p for p, _ in res.orchestrator.state.transitions]
    assert res.orchestrator.state.mode is Mode.NON_PEAK
    assert phases[:3] == ["Steady", "Migrating", "FailedOver"]
    assert phases[-1] == "Steady"
    assert not res.world.downtime
    assert not any(r["kind"] == "capacity_announced" for r in res.world.sim.event_log)


def test_offboarded_service_is_never_terminated(small_scenario):
    cfg = ScenarioConfig.from_dict(small_scenario)
    rl = sorted(s for s, svc in cfg.fleet.services.items() if svc.failure_class is RL)[0]
    cfg.depsafety.offboard = [rl]
    res = run_scenario(cfg)
    assert not any(res.world.fleet.environments[e].service_id == rl for e in res.world.downtime)
    assert res.report.data["final_phase"] == "Steady"


# --- migration mechanics -----------------------------------------------------

def test_bbm_downtime_is_capacity_wait_plus_startup(small_scenario):
    world, orch, _, _ = _built(small_scenario)
    env = next(e for e in sorted(world.fleet.environments.values(), key=lambda e: e.id)
               if e.region == "regionB" and world.svc(e).failure_class is RL)
    world.svc(env).base_startup = 90 * SECOND
    world.terminate(env, rto=HOUR)
    world.sim.run_until(8 * MINUTE)
    cid = "regionB-batch-0"
    world.fleet.clusters[cid].kind = ClusterKind.BURST
    world.add_host(cid, 48, cid)
    done = migrate_environment(world, MigrationJob(env.id, MigrationStrategy.BBM,
                                                   lambda: world.burst_hosts("regionB"), STATELESS))
    world.sim.run_until(done)
    assert env.lifecycle is Lifecycle.BURSTED
    assert world.downtime[env.id].downtime == 9 * MINUTE + 30 * SECOND


def test_mbb_keeps_old_replicas_until_flip(small_scenario):
    world, orch, _, _ = _built(small_scenario)
    env = next(e for e in sorted(world.fleet.environments.values(), key=lambda e: e.id)
               if e.region == "regionB" and world.svc(e).failure_class is AM)
    cid = "regionB-batch-0"
    world.fleet.clusters[cid].kind = ClusterKind.BURST
    for _ in range(4):
        world.add_host(cid, 48, cid)
    old = dict(env.placement)
    done = migrate_environment(world, MigrationJob(env.id, MigrationStrategy.MBB,
                                                   lambda: world.burst_hosts("regionB"), STATELESS))
    world.sim.run_until(done - 1)
    assert env.placement == old and env.serving_replicas == env.required_replicas
    world.sim.run_until(done)
    assert all(world.is_burst_host(h) for h, _ in env.placement)
    assert env.serving_replicas == env.required_replicas


def test_bbm_requires_terminated_env(small_scenario):
    world, *_ = _built(small_scenario)
    env = next(e for e in world.fleet.environments.values() if world.svc(e).failure_class is RL)
    with pytest.raises(ValueError):
        migrate_environment(world, MigrationJob(env.id, MigrationStrategy.BBM, lambda: [], STATELESS))


def test_migration_pool_slot_cap(small_scenario):
    world, *_ = _built(small_scenario)
    cid = "regionB-batch-0"
    world.fleet.clusters[cid].kind = ClusterKind.BURST
    for _ in range(10):
        world.add_host(cid, 48, cid)
    envs = sorted((e for e in world.fleet.environments.values()
                   if e.region == "regionB" and world.svc(e).failure_class is AM), key=lambda e: e.id)[:5]
    pool = MigrationPool(world, cap=3)
    pool.submit([MigrationJob(e.id, MigrationStrategy.MBB, lambda: world.burst_hosts("regionB"), STATELESS)
                 for e in envs])
    assert pool.pump() == 3
    assert len(pool.queue) == 2
    world.sim.run_until(HOUR)
    assert pool.idle and len(pool.done) == 5


# --- eligibility -------------------------------------------------------------

def test_reconcile_eligibility():
    svcs = {
        "gpu": Service("gpu", Tier.T3, RL, gpu=True),
        "deny": Service("deny", Tier.T3, RL, deny_listed=True),
        "new": Service("new", Tier.T3, RL, created_at=-3 * DAY),
        "old": Service("old", Tier.T3, RL, created_at=-8 * DAY),
        "off": Service("off", Tier.T3, RL, created_at=-8 * DAY),
    }
    delta = reconcile_eligibility(Fleet(("A", "B"), services=svcs), 0, {"off"})
    assert delta.excluded == {"gpu": "special_hardware", "deny": "deny_listed", "new": "stabilizing",
                              "off": "offboarded"}
    assert delta.onboarded == ["old"]
    assert reconcile_eligibility(Fleet(("A", "B"), services=svcs), 0, previous={"old"}).onboarded == ["off"]


# --- blackhole drills --------------------------------------------------------

def drill_fleet(gt, attempts=1):
    svcs = {"ao": Service("ao", Tier.T1, AO), "rl": Service("rl", Tier.T3, RL), "t": Service("t", Tier.NP, T)}
    edges = [DependencyEdge(("ao", 0), ("rl", 0), ground_truth=gt, attempts=attempts)]
    return Fleet(("A", "B"), services=svcs, edges=edges)


def test_blackhole_failopen_fleet_certifies():
    rep = run_blackhole_drill(drill_fleet(Semantics.FAIL_OPEN), DrillSpec(DrillKind.BLACKHOLE))
    assert rep.certified and rep.first_failing_step is None
    assert all(s.availability == 1.0 for s in rep.steps)


def test_blackhole_failclose_edge_fails_first_nonzero_step():
    rep = run_blackhole_drill(drill_fleet(Semantics.FAIL_CLOSE), DrillSpec(DrillKind.BLACKHOLE))
    assert not rep.certified
    assert rep.first_failing_step == 0.25
    assert rep.implicated_edges == ["ao:0->rl:0"]
    assert rep.steps[0].availability == 1.0


def test_blackhole_retrying_caller_fails_only_under_full_block():
    # with many retries a partial block almost never stops every attempt
    spec = DrillSpec(DrillKind.BLACKHOLE, ramp=[0.0, 0.5, 1.0], floor=0.99)
    rep = run_blackhole_drill(drill_fleet(Semantics.FAIL_CLOSE, attempts=20), spec)
    assert rep.first_failing_step == 1.0


def test_blackhole_exempt_targets_are_not_blocked():
    rep = run_blackhole_drill(drill_fleet(Semantics.FAIL_CLOSE), DrillSpec(DrillKind.BLACKHOLE), exempt=["rl"])
    assert rep.certified


@pytest.mark.parametrize("ramp", [[0.5, 1.0], [0.0, 0.5], [0.0, 0.75, 0.5, 1.0]])
def test_blackhole_ramp_validated(ramp):
    with pytest.raises(ValueError):
        DrillSpec(DrillKind.BLACKHOLE, ramp=ramp)
