"""Offline pipeline: local engines + central fusion over in-memory streams.

This is the single implementation both the CLI `analyze` path and the
networked processes drive, which is what makes the two byte-identical on
the same inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .analytics import AnomalyReport, LocalEngine, PhasorFrame
from .central import (CentralChangeRecord, CentralChangeTracker, EventLog,
                      build_central_model, fuse_frames, fuse_reports)
from .config import Config
from .model import FeederModel, Placement, build_system, partition


@dataclass
class PipelineResult:
    event_log: EventLog
    xs: list[tuple[int, float]] = field(default_factory=list)
    local_reports: dict[int, list[AnomalyReport]] = field(default_factory=dict)
    central_records: list[CentralChangeRecord] = field(default_factory=list)
    gaps: int = 0
    skipped: int = 0


def line_ratings_at(feeder: FeederModel, bus: int) -> dict:
    return {l.id: l.rated_current for l in feeder.lines_at(bus)}


def run_local_engine(feeder: FeederModel, bus: int, frames: list[PhasorFrame],
                     cfg: Config | None = None) -> list[AnomalyReport]:
    eng = LocalEngine(bus, line_ratings_at(feeder, bus), cfg)
    reports: list[AnomalyReport] = []
    for f in frames:
        reports.extend(eng.step(f))
    reports.extend(eng.finish())
    return reports


def run_offline(feeder: FeederModel, placement: Placement,
                local_streams: dict[int, list[PhasorFrame]],
                central_streams: dict[int, list[PhasorFrame]] | None = None,
                cfg: Config | None = None) -> PipelineResult:
    """Full hierarchy over recorded streams.

    `local_streams` feed the per-sensor engines (sensor-side data);
    `central_streams` feed the fusion stage (uplink data, possibly
    tampered). They default to the same streams.
    """
    cfg = cfg or Config()
    central_streams = central_streams if central_streams is not None else local_streams

    local_reports: dict[int, list[AnomalyReport]] = {}
    for bus in placement.sensor_buses:
        local_reports[bus] = run_local_engine(feeder, bus, local_streams.get(bus, []), cfg)

    model = build_central_model(partition(build_system(feeder), placement))
    tracker = CentralChangeTracker(model, cfg)
    by_k: dict[int, dict[int, PhasorFrame]] = {}
    for bus in placement.sensor_buses:
        for f in central_streams.get(bus, []):
            by_k.setdefault(f.k, {})[bus] = f
    records: list[CentralChangeRecord] = []
    for k in sorted(by_k):
        records.extend(tracker.step(fuse_frames(model, by_k[k], k)))
    records.extend(tracker.finish())

    flat = [(str(bus), r) for bus, reps in sorted(local_reports.items()) for r in reps]
    log = fuse_reports(flat, records)
    return PipelineResult(event_log=log, xs=tracker.xs, local_reports=local_reports,
                          central_records=records, gaps=tracker.gaps,
                          skipped=tracker.skipped)
