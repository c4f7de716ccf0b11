"""Build the bundled scenario files.

Run from the repo root:  python tools/make_scenarios.py

Loads are a light snapshot of the published spot/distributed values (lumped
at the receiving bus, scaled so the no-event voltage profile stays inside
the normal band without regulator boost).
"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from gridwatch.synth import Event, Scenario  # noqa: E402

OUT = Path(__file__).resolve().parents[1] / "src" / "gridwatch" / "data" / "scenarios"

# kW/kvar per phase at the receiving bus (34-bus numbering of the bundled file)
KW_34 = {
    3: [(0, 0), (30, 15), (25, 14)], 5: [(0, 0), (16, 8), (0, 0)],
    11: [(34, 17), (0, 0), (0, 0)], 12: [(135, 70), (0, 0), (0, 0)],
    13: [(0, 0), (5, 2), (0, 0)], 14: [(0, 0), (40, 20), (0, 0)],
    15: [(0, 0), (0, 0), (4, 2)], 16: [(17, 8), (10, 5), (29, 12)],
    18: [(0, 0), (4, 2), (0, 0)], 21: [(7, 3), (2, 1), (6, 3)],
    22: [(2, 1), (0, 0), (0, 0)], 23: [(4, 2), (15, 8), (13, 7)],
    25: [(144, 110), (135, 105), (135, 105)], 26: [(0, 0), (25, 12), (20, 11)],
    27: [(20, 16), (43, 27), (20, 16)], 28: [(36, 24), (40, 26), (130, 71)],
    29: [(30, 15), (10, 6), (42, 22)], 30: [(27, 16), (31, 18), (9, 7)],
    34: [(0, 0), (28, 14), (0, 0)], 32: [(150, 75), (150, 75), (150, 75)],
}
LOAD_SCALE = 3e-6


def loads_34(extra: dict | None = None) -> dict:
    out = {b: np.array([complex(p, q) for p, q in v]) * LOAD_SCALE
           for b, v in KW_34.items()}
    for b, s in (extra or {}).items():
        out[b] = np.asarray(s, dtype=complex)
    return out


def slgf() -> Scenario:
    """Fault on phase a of line 25-26, then the fuse at the upstream end opens.

    Also carries the three replay-attack variants as events so the attack
    harness can derive the tampered uplink views; sensors follow the
    objective-optimal siting of the bundled feeder experiments.
    """
    return Scenario(
        feeder="ieee34", duration_s=8.0, base_loads=loads_34(),
        beta_profile=((0, 0.0),), noise_sigma=1e-3, seed=7,
        sensors=(7, 19, 31),
        events=(
            Event(kind="slg_fault", line="25-26", phase="a",
                  start_k=240, end_k=480, magnitude=1000.0),
            Event(kind="fuse_open", line="25-26", phase="a",
                  start_k=480, end_k=960),
        ))


def fault_at_sensor() -> Scenario:
    """Fault with its point at a sensed bus; drives the metric toward its cap."""
    return Scenario(
        feeder="ieee34", duration_s=5.0, base_loads=loads_34(),
        beta_profile=((0, 2 * np.pi * 0.05 / 120),), noise_sigma=2e-5, seed=4,
        sensors=(7, 19, 31),
        events=(Event(kind="slg_fault", line="17-19", phase="a",
                      start_k=240, end_k=480, magnitude=1000.0),))


def load_loss() -> Scenario:
    """Full loss of the bus-24 load; streams cover both placements compared."""
    extra = {24: np.full(3, (80 + 40j)) * LOAD_SCALE * 10}
    return Scenario(
        feeder="ieee34", duration_s=6.0, base_loads=loads_34(extra),
        beta_profile=((0, 0.0),), noise_sigma=2e-5, seed=9,
        sensors=(1, 2, 3, 9, 23, 29),
        events=(Event(kind="load_loss", bus=24, start_k=300, end_k=660,
                      magnitude=1.0),))


def quiet() -> Scenario:
    """Pure quasi steady state with a small drift; the pipeline must stay silent."""
    return Scenario(
        feeder="ieee34", duration_s=4.0, base_loads=loads_34(),
        beta_profile=((0, 2 * np.pi * 0.05 / 120),), noise_sigma=0.0, seed=11,
        sensors=(7, 19, 31), events=())


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for name, build in (("slgf", slgf), ("fault_at_sensor", fault_at_sensor),
                        ("load_loss", load_loss), ("quiet", quiet)):
        path = OUT / f"{name}.json"
        path.write_text(build().to_json())
        print(f"wrote {path}")
