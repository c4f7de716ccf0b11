import numpy as np
import pytest

from gridwatch.analytics import AnomalyReport, PhasorFrame
from gridwatch.central import (NULL_PROJECTOR, SMALLEST_SINGULAR,
                               CentralChangeRecord, CentralChangeTracker,
                               EventLog, build_central_model, central_metric,
                               fuse_frames, fuse_reports, phase_normalize,
                               smallest_left_singular_vector)
from gridwatch.config import Config
from gridwatch.model import Placement, build_system, partition

from conftest import random_radial_feeder, toy_feeder


def _consistent_d(system, rng):
    B = system.bus_count
    V = rng.normal(size=3 * B) + 1j * rng.normal(size=3 * B)
    return np.concatenate([system.Y @ V, V])


def test_full_observability_null_projector_identity():
    sysm = build_system(toy_feeder(5))
    part = partition(sysm, Placement(sysm.feeder.bus_ids))
    model = build_central_model(part)
    assert model.mode == NULL_PROJECTOR
    assert np.array_equal(model.null_projector, np.eye(15, dtype=complex))


def test_ieee34_smallest_singular_oracle(ieee34_system):
    part = partition(ieee34_system, Placement((7, 19, 31)))
    model = build_central_model(part)
    assert model.mode == SMALLEST_SINGULAR
    # full-SVD oracle: u^H H_u attains sigma_min
    s = np.linalg.svd(part.H_u, compute_uv=False)
    attained = np.linalg.norm(np.conj(model.u_us) @ part.H_u)
    assert attained == pytest.approx(s[-1], abs=1e-10)
    assert np.linalg.norm(model.u_us) == pytest.approx(1.0, abs=1e-12)


def test_two_bus_toy_matches_dense_svd():
    sysm = build_system(toy_feeder(2, y=1.0 - 2.0j))
    part = partition(sysm, Placement((1,)))
    model = build_central_model(part)
    u_full, s, _ = np.linalg.svd(part.H_u, full_matrices=False)
    oracle = phase_normalize(u_full[:, -1])
    assert np.allclose(model.u_us, oracle)


def test_nullprojector_mode_consistent_data_exact():
    rng = np.random.default_rng(0)
    sysm = build_system(toy_feeder(5, y=2.0 - 1.0j))
    part = partition(sysm, Placement(sysm.feeder.bus_ids))
    model = build_central_model(part)
    for _ in range(20):
        d = _consistent_d(sysm, rng)
        d_a = d[part.avail_columns]
        assert central_metric(model, d_a) <= 1e-18


def test_nullprojector_idempotent():
    rng = np.random.default_rng(2)
    feeder = random_radial_feeder(rng, n_bus=5, p_lateral=0.0)
    sysm = build_system(feeder)
    part = partition(sysm, Placement((1, 2, 3, 4)))  # K=4 > B/2
    model = build_central_model(part)
    assert model.mode == NULL_PROJECTOR
    P = model.null_projector
    assert np.linalg.norm(P @ P - P) <= 1e-10


def test_mode_boundary_random_grids():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(3, 9))
        feeder = random_radial_feeder(rng, n_bus=n)
        sysm = build_system(feeder)
        k = int(rng.integers(1, n + 1))
        pick = tuple(int(b) for b in rng.choice(feeder.bus_ids, size=k, replace=False))
        part = partition(sysm, Placement(pick))
        model = build_central_model(part)
        rows, cols = part.H_u.shape
        if cols == 0 or cols < rows:
            assert model.mode == NULL_PROJECTOR
        else:
            assert model.mode == SMALLEST_SINGULAR


def test_metric_scale_invariance(ieee34_system):
    rng = np.random.default_rng(1)
    part = partition(ieee34_system, Placement((7, 19, 31)))
    model = build_central_model(part)
    d = _consistent_d(ieee34_system, rng)
    d_a = d[part.avail_columns]
    x0 = central_metric(model, d_a)
    for c in (3.0, -2.0, 1j, 0.5 - 0.5j):
        assert central_metric(model, c * d_a) == pytest.approx(x0, rel=1e-9)


def test_metric_phase_invariance_of_u(ieee34_system):
    from dataclasses import replace
    rng = np.random.default_rng(6)
    part = partition(ieee34_system, Placement((7, 19, 31)))
    model = build_central_model(part)
    rotated = replace(model, u_us=model.u_us * np.exp(1j * 0.7))
    d = _consistent_d(ieee34_system, rng)[part.avail_columns]
    assert central_metric(rotated, d) == pytest.approx(central_metric(model, d), rel=1e-12)


def test_metric_zero_vector_rejected(ieee34_system):
    part = partition(ieee34_system, Placement((7, 19, 31)))
    model = build_central_model(part)
    with pytest.raises(ValueError):
        central_metric(model, np.zeros(18, dtype=complex))


def test_smallest_singular_skips_structural_zero_rows():
    m = np.zeros((4, 5), dtype=complex)
    m[0] = [1, 2, 3, 4, 5]
    m[1] = [2, 1, 0, 0, 1]
    m[3] = [0, 1, 1j, 2, 0]   # row 2 left all-zero
    u, smin = smallest_left_singular_vector(m)
    assert u[2] == 0.0
    assert smin > 0.0
    assert np.linalg.norm(np.conj(u) @ m) == pytest.approx(smin, abs=1e-12)


def test_fuse_frames_ordering_and_completeness(ieee34_system):
    part = partition(ieee34_system, Placement((7, 19, 31)))
    model = build_central_model(part)
    frames = {
        7: PhasorFrame(k=0, bus=7, v=np.full(3, 1 + 0j),
                       i_lines={"6-7": np.full(3, 0.1 + 0j), "7-8": np.full(3, 0.2 + 0j)}),
        31: PhasorFrame(k=0, bus=31, v=np.full(3, 2 + 0j), i_lines={}),
    }
    fused = fuse_frames(model, frames, 0)
    assert fused.completeness == (True, False, True)
    assert np.allclose(fused.d_a[0:3], 0.3)      # injections of bus 7
    assert np.allclose(fused.d_a[3:6], 0.0)      # missing sensor 19
    assert np.allclose(fused.d_a[9:12], 1.0)     # voltage of bus 7
    assert np.allclose(fused.d_a[15:18], 2.0)    # voltage of bus 31


def test_tracker_steady_stream_no_changes(ieee34_system):
    rng = np.random.default_rng(9)
    part = partition(ieee34_system, Placement((7, 19, 31)))
    model = build_central_model(part)
    tracker = CentralChangeTracker(model, Config())
    d = _consistent_d(ieee34_system, rng)
    da = d[part.avail_columns]
    from gridwatch.central import FusedSample
    for k in range(500):
        recs = tracker.step(FusedSample(k=k, d_a=da, completeness=(True, True, True)))
        assert recs == []
    assert tracker.finish() == []


def test_tracker_counts_gaps(ieee34_system):
    part = partition(ieee34_system, Placement((7, 19, 31)))
    model = build_central_model(part)
    tracker = CentralChangeTracker(model, Config())
    from gridwatch.central import FusedSample
    tracker.step(FusedSample(k=0, d_a=np.zeros(18, dtype=complex),
                             completeness=(True, False, True)))
    assert tracker.gaps == 1


# ---------------------------------------------------------------- fusion

def rep(bus, start, end, rule="voltage_mag", label="sag"):
    return AnomalyReport(rule=rule, label=label, bus=bus, line=None,
                         start_k=start, end_k=end, severity=1.0)


def test_fuse_overlapping_sags_one_incident():
    log = fuse_reports([("7", rep(7, 100, 200)), ("19", rep(19, 150, 260))], [])
    assert len(log.entries) == 2
    assert log.entries[0].incident == log.entries[1].incident


def test_fuse_disjoint_events_distinct_incidents():
    log = fuse_reports([("7", rep(7, 100, 120)), ("19", rep(19, 500, 520))], [])
    assert log.entries[0].incident != log.entries[1].incident


def test_fuse_persistent_then_close_updates():
    persistent = rep(7, 100, None)
    closed = rep(7, 100, 300)
    log = fuse_reports([("7", persistent), ("7", closed)], [])
    assert len(log.entries) == 1
    assert log.entries[0].record.end_k == 300


def test_fuse_merges_central_records():
    central = [CentralChangeRecord(start_k=110, end_k=115, change_ks=(110,), severity=3.0)]
    log = fuse_reports([("7", rep(7, 100, 200))], central)
    assert {e.origin for e in log.entries} == {"7", "central"}
    assert len({e.incident for e in log.entries}) == 1


def test_eventlog_jsonl_roundtrip():
    central = [CentralChangeRecord(start_k=1, end_k=None, change_ks=(1, 2), severity=0.5)]
    log = fuse_reports([("7", rep(7, 0, 10))], central)
    text = log.to_jsonl()
    back = EventLog.from_jsonl(text)
    assert back.to_jsonl() == text


def test_consistency_bound_on_bundled_steady_state(ieee34):
    """Steady-state x never exceeds the sigma_min^2 worst case over d."""
    import numpy as np
    from gridwatch.synth import Scenario, generate
    from conftest import scenario_path

    sc = Scenario.from_json(scenario_path("quiet").read_text())
    streams, _ = generate(sc, ieee34)
    # full-network vector for the bound needs every bus
    from dataclasses import replace
    sc_all = replace(sc, sensors=ieee34.bus_ids, duration_s=0.5)
    streams_all, _ = generate(sc_all, ieee34)
    part = partition(build_system(ieee34), Placement((7, 19, 31)))
    model = build_central_model(part)

    B = ieee34.bus_count
    d = np.zeros(6 * B, dtype=complex)
    for b, s in streams_all.items():
        i = ieee34.index_of(b)
        f = s[0]
        inj = sum(f.i_lines.values()) if f.i_lines else np.zeros(3, dtype=complex)
        d[3 * i:3 * i + 3] = inj
        d[3 * B + 3 * i:3 * B + 3 * i + 3] = f.v
    d_u = d[part.unavail_columns]
    d_a = d[part.avail_columns]
    bound = model.sigma_min ** 2 * float(np.vdot(d_u, d_u).real / np.vdot(d_a, d_a).real)
    x = central_metric(model, d_a)
    assert x <= bound * (1 + 1e-9)
