"""Central engine: placement-aware subspace metric over fused sensor data.

With sensors at K of B buses the steady-state constraint H d = 0 splits into
H_u d_u + H_a d_a = 0. When H_u is tall (K > B/2) its left null space gives
an exact residual test; in the realistic K <= B/2 regime the test projects
onto the left singular vector of H_u with the smallest singular value, and
the scalar x[k] = |u^H H_a d_a|^2 / ||d_a||^2 stays small and smooth while
the grid is quasi steady-state.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .analytics import AnomalyReport, DetectorState, EventSegmenter, cusum_step
from .config import Config
from .model import PartitionedSystem

SMALLEST_SINGULAR = "smallest_singular"
NULL_PROJECTOR = "null_projector"

_PHASE_EPS = 1e-12


def phase_normalize(u: np.ndarray) -> np.ndarray:
    """Rotate a vector so its first significant component is real-positive."""
    for val in u:
        if abs(val) > _PHASE_EPS:
            return u * (np.conj(val) / abs(val))
    return u


def smallest_left_singular_vector(m: np.ndarray) -> tuple[np.ndarray, float]:
    """Left singular vector for the smallest singular value, phase-normalized.

    Structurally zero rows (absent-phase constraints of sensed buses, which
    state the tautology "no conductor, no injection") are excluded from the
    construction and re-embedded as zeros: a degenerate sigma_min = 0 on such
    a row would yield a metric with no detection power.
    """
    live = np.any(m != 0, axis=1)
    if not np.all(live):
        u_red, smin = smallest_left_singular_vector(m[live])
        u = np.zeros(m.shape[0], dtype=complex)
        u[live] = u_red
        return u, smin
    u_mat, s, _ = np.linalg.svd(m, full_matrices=False)
    return phase_normalize(u_mat[:, -1].copy()), float(s[-1])


@dataclass(frozen=True)
class CentralModel:
    partition: PartitionedSystem
    mode: str
    u_us: np.ndarray | None = None           # unit 3B-vector, smallest-singular mode
    sigma_min: float = 0.0
    null_projector: np.ndarray | None = None  # I - H_u H_u^+, tall mode

    @property
    def sensor_buses(self) -> tuple[int, ...]:
        return self.partition.placement.sensor_buses


def build_central_model(partition: PartitionedSystem) -> CentralModel:
    h_u = partition.H_u
    rows = h_u.shape[0]
    if h_u.shape[1] == 0:
        # full observability: nothing is unavailable, the projector is I
        return CentralModel(partition=partition, mode=NULL_PROJECTOR,
                            null_projector=np.eye(rows, dtype=complex))
    if h_u.shape[1] >= rows:
        u, smin = smallest_left_singular_vector(h_u)
        return CentralModel(partition=partition, mode=SMALLEST_SINGULAR,
                            u_us=u, sigma_min=smin)
    proj = np.eye(rows, dtype=complex) - h_u @ np.linalg.pinv(h_u)
    return CentralModel(partition=partition, mode=NULL_PROJECTOR, null_projector=proj)


def central_metric(model: CentralModel, d_a: np.ndarray) -> float:
    """Scale-invariant steady-state inconsistency of one fused sample."""
    d_a = np.asarray(d_a, dtype=complex)
    denom = float(np.vdot(d_a, d_a).real)
    if denom <= 0.0:
        raise ValueError("zero measurement vector")
    if model.mode == SMALLEST_SINGULAR:
        y = complex(np.conj(model.u_us) @ (model.partition.H_a @ d_a))
        return float(abs(y) ** 2 / denom)
    r = model.null_projector @ (model.partition.H_a @ d_a)
    return float(np.vdot(r, r).real / denom)


@dataclass(frozen=True)
class FusedSample:
    k: int
    d_a: np.ndarray
    completeness: tuple[bool, ...]  # per sensor, placement order


def fuse_frames(model: CentralModel, frames: dict[int, "PhasorFrame"], k: int) -> FusedSample:
    """Stack per-sensor frames into d_a = (injections, voltages) at sample k.

    The net current injection of a sensed bus is the sum of its incident
    line currents; ordering matches the partition's column maps.
    """
    buses = model.sensor_buses
    present = tuple(b in frames for b in buses)
    cur = np.zeros(3 * len(buses), dtype=complex)
    vol = np.zeros(3 * len(buses), dtype=complex)
    for j, b in enumerate(buses):
        f = frames.get(b)
        if f is None:
            continue
        inj = np.zeros(3, dtype=complex)
        for i in f.i_lines.values():
            inj += i
        cur[3 * j:3 * j + 3] = inj
        vol[3 * j:3 * j + 3] = f.v
    return FusedSample(k=k, d_a=np.concatenate([cur, vol]), completeness=present)


@dataclass(frozen=True)
class CentralChangeRecord:
    """One change cluster on the central metric."""
    start_k: int
    end_k: int | None
    change_ks: tuple[int, ...]
    severity: float

    def to_dict(self) -> dict:
        return {"rule": "central_subspace", "start_k": self.start_k,
                "end_k": self.end_k, "persistent": self.end_k is None,
                "change_ks": list(self.change_ks), "severity": self.severity}

    @classmethod
    def from_dict(cls, d: dict) -> "CentralChangeRecord":
        return cls(start_k=int(d["start_k"]),
                   end_k=None if d["end_k"] is None else int(d["end_k"]),
                   change_ks=tuple(int(k) for k in d["change_ks"]),
                   severity=float(d["severity"]))


class CentralChangeTracker:
    """CUSUM + segmentation over the x[k] series, with gap accounting."""

    def __init__(self, model: CentralModel, cfg: Config | None = None):
        self.model = model
        self.cfg = cfg = cfg or Config()
        self.det = DetectorState.from_config(cfg)
        self.seg = EventSegmenter(cfg.t1, cfg.t2)
        self.gaps = 0
        self.skipped = 0
        self.xs: list[tuple[int, float]] = []
        self._peak = 0.0

    def step(self, sample: FusedSample) -> list[CentralChangeRecord]:
        if not all(sample.completeness):
            self.gaps += 1
            return []
        try:
            x = central_metric(self.model, sample.d_a)
        except ValueError:
            self.skipped += 1
            return []
        self.xs.append((sample.k, x))
        changed = cusum_step(self.det, x)
        if changed or self.seg.open:
            self._peak = max(self._peak, abs(self.det.last_z))
        recs = [self._record(s) for s in self.seg.step(sample.k, changed)]
        return recs

    def finish(self) -> list[CentralChangeRecord]:
        return [self._record(s) for s in self.seg.flush()]

    def _record(self, seg) -> CentralChangeRecord:
        rec = CentralChangeRecord(start_k=seg.start_k, end_k=seg.end_k,
                                  change_ks=tuple(seg.violation_ks),
                                  severity=self._peak)
        if seg.end_k is not None:
            self._peak = 0.0
        return rec


def central_change_stream(model: CentralModel, fused, cfg: Config | None = None):
    """Run the tracker over an iterable of FusedSample; (records, x series)."""
    tr = CentralChangeTracker(model, cfg)
    records = []
    for sample in fused:
        records.extend(tr.step(sample))
    records.extend(tr.finish())
    return records, tr.xs


@dataclass(frozen=True)
class LogEntry:
    origin: str        # sensor bus id as text, or "central"
    incident: int
    record: AnomalyReport | CentralChangeRecord

    def to_dict(self, epoch: str | None = None, sample_rate: float = 120.0) -> dict:
        d = self.record.to_dict()
        d["origin"] = self.origin
        d["incident"] = self.incident
        if epoch is not None:
            from .synth import iso_time
            d["start_time"] = iso_time(epoch, d["start_k"], sample_rate)
            d["end_time"] = (iso_time(epoch, d["end_k"], sample_rate)
                             if d["end_k"] is not None else None)
        return d


@dataclass
class EventLog:
    entries: list[LogEntry] = field(default_factory=list)

    def to_jsonl(self, epoch: str | None = None, sample_rate: float = 120.0) -> str:
        return "".join(json.dumps(e.to_dict(epoch, sample_rate), sort_keys=True) + "\n"
                       for e in self.entries)

    @classmethod
    def from_jsonl(cls, text: str) -> "EventLog":
        entries = []
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            origin, incident = d.pop("origin"), d.pop("incident")
            d.pop("start_time", None)
            d.pop("end_time", None)
            rec = (CentralChangeRecord.from_dict(d) if d.get("rule") == "central_subspace"
                   else AnomalyReport.from_dict(d))
            entries.append(LogEntry(origin=origin, incident=incident, record=rec))
        return cls(entries)


def _entry_key(origin: str, rec) -> tuple:
    if isinstance(rec, AnomalyReport):
        return (rec.start_k, 1, origin, rec.rule, rec.bus, rec.line or "", rec.label)
    return (rec.start_k, 0, origin, "central_subspace", -1, "", "")


def _event_identity(origin: str, rec) -> tuple:
    if isinstance(rec, AnomalyReport):
        return (origin, rec.rule, rec.bus, rec.line, rec.start_k)
    return (origin, "central_subspace", None, None, rec.start_k)


def fuse_reports(local: list[tuple[str, AnomalyReport]],
                 central: list[CentralChangeRecord]) -> EventLog:
    """Merge local and central records, assigning interval-overlap incidents.

    A persistent emission followed by the close of the same event collapses
    to the closed record. Entries overlapping in [start, end] share one
    incident id; ordering and ids are deterministic.
    """
    merged: dict[tuple, tuple[str, object]] = {}
    for origin, rec in list(local) + [("central", r) for r in central]:
        key = _event_identity(origin, rec)
        prev = merged.get(key)
        if prev is None or prev[1].end_k is None:
            merged[key] = (origin, rec)
    items = sorted(merged.values(), key=lambda p: _entry_key(*p))

    entries: list[LogEntry] = []
    incident = -1
    reach = None
    for origin, rec in items:
        end = rec.end_k if rec.end_k is not None else rec.start_k
        if reach is None or rec.start_k > reach:
            incident += 1
            reach = end
        else:
            reach = max(reach, end)
        entries.append(LogEntry(origin=origin, incident=incident, record=rec))
    return EventLog(entries)
