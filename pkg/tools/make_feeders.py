"""Build the bundled feeder files from tabulated line-construction data.

Run from the repo root:  python tools/make_feeders.py

Feeder files store admittances in per-unit (series = inverse of the
accumulated 3x3 phase impedance, shunt = total line charging susceptance).
The per-unit values are scaled so the identity and admittance blocks of the
steady-state constraint matrix are comparable, which is where the subspace
objective is well conditioned; topology, phasing and relative impedances
follow the published test feeders.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

SERIES_SCALE = 2.0

OUT = Path(__file__).resolve().parents[1] / "src" / "gridwatch" / "data"

FT_PER_MILE = 5280.0

# overhead construction data, ohms/mile and uS/mile
Z_300 = np.array([
    [1.3368 + 1.3343j, 0.2101 + 0.5779j, 0.2130 + 0.5015j],
    [0.2101 + 0.5779j, 1.3238 + 1.3569j, 0.2066 + 0.4591j],
    [0.2130 + 0.5015j, 0.2066 + 0.4591j, 1.3294 + 1.3471j]])
B_300 = np.array([
    [5.3350, -1.5313, -0.9943],
    [-1.5313, 5.0979, -0.6212],
    [-0.9943, -0.6212, 4.8880]])
Z_301 = np.array([
    [1.9300 + 1.4115j, 0.2327 + 0.6442j, 0.2359 + 0.5691j],
    [0.2327 + 0.6442j, 1.9157 + 1.4281j, 0.2288 + 0.5238j],
    [0.2359 + 0.5691j, 0.2288 + 0.5238j, 1.9219 + 1.4209j]])
B_301 = np.array([
    [5.1207, -1.4364, -0.9402],
    [-1.4364, 4.9055, -0.5951],
    [-0.9402, -0.5951, 4.7154]])

SINGLE = {  # config -> (phase index, z ohm/mile, b uS/mile)
    302: (0, 2.7995 + 1.4855j, 4.2251),
    303: (1, 2.7995 + 1.4855j, 4.2251),
    304: (1, 1.9217 + 1.4212j, 4.3637),
}

CFG3 = {300: (Z_300, B_300), 301: (Z_301, B_301)}


def line_entry(f, t, phases, y_series, y_shunt, rating):
    pack = lambda m: [[float(v.real), float(v.imag)] for v in m.reshape(-1)]
    return {"from": f, "to": t, "phases": phases,
            "series": pack(y_series), "shunt": pack(y_shunt),
            "rating_amps": rating}


def overhead(f, t, cfg, length_ft, rating):
    miles = length_ft / FT_PER_MILE
    if cfg in CFG3:
        z, b = CFG3[cfg]
        y = np.linalg.inv(z * miles) * SERIES_SCALE
        y = (y + y.T) / 2.0  # exact reciprocity
        ysh = 1j * b * miles * 1e-6
        return line_entry(f, t, "abc", y, ysh, rating)
    p, z1, b1 = SINGLE[cfg]
    y = np.zeros((3, 3), dtype=complex)
    y[p, p] = SERIES_SCALE / (z1 * miles)
    ysh = np.zeros((3, 3), dtype=complex)
    ysh[p, p] = 1j * b1 * miles * 1e-6
    return line_entry(f, t, "abc"[p], y, ysh, rating)


def series_device(f, t, z_ohm, rating):
    """Regulator/transformer as a per-phase series impedance, no shunt."""
    y = np.diag([SERIES_SCALE / z_ohm] * 3).astype(complex)
    return line_entry(f, t, "abc", y, np.zeros((3, 3), dtype=complex), rating)


def make_34() -> dict:
    kv = {b: 24.9 for b in range(1, 35)}
    kv[31] = kv[32] = 4.16
    # (from, to, length ft, config); 'reg'/'xfm' are series devices
    edges = [
        (1, 2, 2580, 300), (2, 3, 1730, 300), (3, 4, 32230, 300),
        (4, 5, 5804, 303), (4, 6, 37500, 300), (6, 7, 29730, 300),
        (7, 8, 0, "reg"), (8, 9, 310, 301), (9, 10, 1710, 302),
        (9, 13, 10210, 301), (10, 11, 48150, 302), (11, 12, 13740, 302),
        (13, 14, 3030, 303), (13, 15, 840, 301), (15, 16, 20440, 301),
        (16, 17, 520, 301), (17, 18, 23330, 303), (17, 19, 36830, 301),
        (19, 20, 0, "reg"), (20, 21, 4900, 301), (20, 31, 0, "xfm"),
        (21, 22, 1620, 302), (21, 23, 5830, 301), (23, 24, 280, 301),
        (24, 25, 1350, 301), (25, 26, 3640, 301), (26, 27, 530, 301),
        (23, 28, 2020, 301), (28, 29, 2680, 301), (29, 30, 860, 301),
        (29, 33, 280, 301), (33, 34, 4860, 304), (31, 32, 10560, 300),
    ]
    ratings = {300: 180.0, 301: 140.0, 302: 80.0, 303: 80.0, 304: 80.0}
    lines = []
    for f, t, ln, cfg in edges:
        if cfg == "reg":
            # feeder-class regulator bank, ~3% on its own rating
            lines.append(series_device(f, t, 1.0 + 12.0j, 200.0))
        elif cfg == "xfm":
            # 500 kVA 24.9/4.16, 1.9% R 4.08% X, referred to the 24.9 kV side
            z = (0.019 + 0.0408j) * (24.9 ** 2 / 0.5)
            lines.append(series_device(f, t, z, 15.0))
        else:
            rating = 70.0 if f == 31 else ratings[cfg]
            lines.append(overhead(f, t, cfg, ln, rating))
    return {
        "name": "ieee34", "base_mva": 1.0, "slack": 1,
        "buses": [{"id": b, "kv_base": kv[b], "type": "slack" if b == 1 else "pq"}
                  for b in sorted(kv)],
        "lines": lines,
    }


def make_123() -> dict:
    """123-bus feeder with a 70-bus three-phase core and 53 lateral buses.

    The core (ids 1..70) is a trunk with four major branches; laterals
    (71..123) hang off core buses as one- and two-phase spurs.
    """
    rng = np.random.default_rng(123)
    parent = {}
    for i in range(2, 21):          # trunk 1..20
        parent[i] = i - 1
    for i in range(21, 36):         # branch at 5
        parent[i] = i - 1 if i > 21 else 5
    for i in range(36, 43):         # sub-branch at 27
        parent[i] = i - 1 if i > 36 else 27
    for i in range(43, 56):         # branch at 12
        parent[i] = i - 1 if i > 43 else 12
    for i in range(56, 71):         # branch at 20
        parent[i] = i - 1 if i > 56 else 20

    lines = []
    for i in sorted(parent):
        ln = float(rng.integers(300, 1600))
        lines.append(overhead(parent[i], i, 301, ln, 300.0))

    # single/two-phase spurs over the core, round-robin phasing
    spur_phases = ["a", "b", "c", "ab", "bc", "ac"]
    attach = list(range(2, 71))
    for j, b in enumerate(range(71, 124)):
        host = attach[(j * 7) % len(attach)]
        ph = spur_phases[j % len(spur_phases)]
        ln = float(rng.integers(200, 900))
        miles = ln / FT_PER_MILE
        y = np.zeros((3, 3), dtype=complex)
        ysh = np.zeros((3, 3), dtype=complex)
        for p in ph:
            i = "abc".index(p)
            y[i, i] = SERIES_SCALE / ((2.7995 + 1.4855j) * miles)
            ysh[i, i] = 1j * 4.2251 * miles * 1e-6
        lines.append(line_entry(host, b, ph, y, ysh, 100.0))

    return {
        "name": "ieee123", "base_mva": 1.0, "slack": 1,
        "buses": [{"id": b, "kv_base": 4.16, "type": "slack" if b == 1 else "pq"}
                  for b in range(1, 124)],
        "lines": lines,
    }


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for name, build in (("ieee34", make_34), ("ieee123", make_123)):
        path = OUT / f"{name}.feeder"
        path.write_text(json.dumps(build(), indent=1))
        print(f"wrote {path}")
