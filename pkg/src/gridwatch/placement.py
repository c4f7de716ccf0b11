"""Sensor siting: min-max subspace objective with greedy/exhaustive/random solvers.

The objective for a candidate placement is lambda_max(W) with
W = H_a^H u u^H H_a, u the smallest-singular left vector of H_u. W is a
rank-one outer product, so lambda_max equals ||u^H H_a||^2 -- minimizing it
minimizes the worst-case steady-state metric over unit measurement vectors.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .central import smallest_left_singular_vector
from .model import Placement, SystemMatrix, partition

_TIE_REL = 1e-12


class BudgetError(RuntimeError):
    """Exhaustive enumeration would exceed the configured budget."""


@dataclass(frozen=True)
class PlacementResult:
    placement: Placement
    objective: float
    solver: str
    elapsed: float
    evaluations: int = 0


def objective(system: SystemMatrix, placement: Placement) -> float:
    """lambda_max of the rank-one worst-case form for one placement."""
    if placement.k >= system.bus_count:
        return 0.0
    part = partition(system, placement)
    u, _ = smallest_left_singular_vector(part.H_u)
    row = np.conj(u) @ part.H_a
    return float(np.vdot(row, row).real)


def three_phase_buses(system: SystemMatrix) -> tuple[int, ...]:
    f = system.feeder
    return tuple(b for b in f.bus_ids if f.bus_phases(b).is_three_phase)


def greedy_place(system: SystemMatrix, k: int,
                 candidates: tuple[int, ...] | None = None) -> PlacementResult:
    """K rounds of best-single-addition; ties go to the lowest bus id."""
    cands = sorted(candidates if candidates is not None else system.feeder.bus_ids)
    if not 1 <= k <= len(cands):
        raise ValueError(f"k={k} outside candidate set of {len(cands)}")
    t0 = time.perf_counter()
    chosen: list[int] = []
    evals = 0
    for _ in range(k):
        best_bus, best_cost = None, math.inf
        for b in cands:
            if b in chosen:
                continue
            cost = objective(system, Placement(tuple(chosen) + (b,)))
            evals += 1
            if best_bus is None or cost < best_cost - _TIE_REL * max(abs(cost), abs(best_cost)):
                best_bus, best_cost = b, cost
        chosen.append(best_bus)
    final = Placement(tuple(chosen))
    return PlacementResult(placement=final, objective=objective(system, final),
                           solver="greedy", elapsed=time.perf_counter() - t0,
                           evaluations=evals)


def exhaustive_place(system: SystemMatrix, k: int,
                     candidates: tuple[int, ...] | None = None,
                     budget: int = 2_000_000) -> PlacementResult:
    cands = sorted(candidates if candidates is not None else system.feeder.bus_ids)
    n = math.comb(len(cands), k)
    if n > budget:
        raise BudgetError(f"C({len(cands)},{k}) = {n} exceeds budget {budget}")
    t0 = time.perf_counter()
    best, best_cost = None, math.inf
    evals = 0
    for combo in combinations(cands, k):
        cost = objective(system, Placement(combo))
        evals += 1
        if best is None or cost < best_cost - _TIE_REL * max(abs(cost), abs(best_cost)):
            best, best_cost = combo, cost
    return PlacementResult(placement=Placement(best), objective=best_cost,
                           solver="exhaustive", elapsed=time.perf_counter() - t0,
                           evaluations=evals)


def random_place(system: SystemMatrix, k: int, seed: int,
                 candidates: tuple[int, ...] | None = None) -> PlacementResult:
    cands = sorted(candidates if candidates is not None else system.feeder.bus_ids)
    rng = np.random.default_rng(seed)
    combo = tuple(int(b) for b in rng.choice(cands, size=k, replace=False))
    t0 = time.perf_counter()
    p = Placement(combo)
    cost = objective(system, p)
    return PlacementResult(placement=p, objective=cost, solver="random",
                           elapsed=time.perf_counter() - t0, evaluations=1)
