"""Builders shared across test modules: hand-sized cases, random networks
for property tests, and permutation helpers."""

from __future__ import annotations

import numpy as np

from gridhil.grid import (Bus, Generator, GridCase, Line, Load, SlackRef)


def two_bus_case(r: float = 0.02, x: float = 0.1, p: float = 0.6,
                 q: float = 0.25) -> GridCase:
    """Slack feeding one load over a single line (closed-form solvable)."""
    return GridCase(
        base_mva=100.0,
        buses=(Bus(id=1, v_min=0.9, v_max=1.1, base_kv=230.0),
               Bus(id=2, v_min=0.9, v_max=1.1, base_kv=230.0)),
        lines=(Line(from_bus=1, to_bus=2, r=r, x=x, b_shunt=0.0,
                    s_max=3.0, tap=1.0),),
        generators=(Generator(bus=1, p_set=0.0, v_set=1.0, p_min=0.0,
                              p_max=5.0, q_min=-5.0, q_max=5.0),),
        loads=(Load(bus=2, p=p, q=q),),
        slack=SlackRef(bus=1, v_set=1.0, angle=0.0),
    )


def small_case() -> GridCase:
    """Three buses, one PV generator, two loads; converges from flat start."""
    return GridCase(
        base_mva=100.0,
        buses=(Bus(id=10, v_min=0.9, v_max=1.1, base_kv=132.0),
               Bus(id=20, v_min=0.9, v_max=1.1, base_kv=132.0),
               Bus(id=30, v_min=0.9, v_max=1.1, base_kv=132.0)),
        lines=(Line(from_bus=10, to_bus=20, r=0.02, x=0.12, b_shunt=0.04,
                    s_max=2.5, tap=1.0),
               Line(from_bus=20, to_bus=30, r=0.015, x=0.09, b_shunt=0.03,
                    s_max=2.5, tap=1.0),
               Line(from_bus=10, to_bus=30, r=0.025, x=0.15, b_shunt=0.05,
                    s_max=2.5, tap=0.98)),
        generators=(Generator(bus=10, p_set=0.0, v_set=1.02, p_min=0.0,
                              p_max=4.0, q_min=-3.0, q_max=3.0),
                    Generator(bus=20, p_set=0.5, v_set=1.01, p_min=0.1,
                              p_max=2.0, q_min=-1.5, q_max=1.5)),
        loads=(Load(bus=20, p=0.3, q=0.1), Load(bus=30, p=0.6, q=0.2)),
        slack=SlackRef(bus=10, v_set=1.02, angle=0.0),
    )


def random_case(rng: np.random.Generator, max_bus: int = 9) -> GridCase:
    """Random connected network. Built for graph-structure tests; load
    levels are kept moderate so most instances also converge."""
    n = int(rng.integers(3, max_bus + 1))
    ids = [int(i) for i in rng.permutation(np.arange(1, n + 1) * 10)]
    buses = tuple(Bus(id=b, v_min=0.9, v_max=1.1, base_kv=115.0)
                  for b in ids)

    lines = []
    seen = set()
    for i in range(1, n):
        j = int(rng.integers(0, i))
        seen.add((min(i, j), max(i, j)))
    extra = int(rng.integers(0, n))
    for _ in range(extra):
        i, j = rng.choice(n, size=2, replace=False)
        seen.add((min(int(i), int(j)), max(int(i), int(j))))
    for i, j in sorted(seen):
        tap = 1.0 if rng.random() < 0.7 else float(rng.uniform(0.95, 1.05))
        lines.append(Line(
            from_bus=ids[i], to_bus=ids[j],
            r=float(rng.uniform(0.005, 0.04)),
            x=float(rng.uniform(0.03, 0.2)),
            b_shunt=float(rng.uniform(0.0, 0.2)),
            s_max=float(rng.uniform(1.5, 3.0)),
            tap=tap,
        ))

    slack_pos = int(rng.integers(0, n))
    slack_v = float(rng.uniform(1.0, 1.05))
    gens = [Generator(bus=ids[slack_pos], p_set=0.0, v_set=slack_v,
                      p_min=0.0, p_max=5.0, q_min=-5.0, q_max=5.0)]
    others = [k for k in range(n) if k != slack_pos]
    rng.shuffle(others)
    for k in others[:int(rng.integers(0, min(3, len(others)) + 1))]:
        gens.append(Generator(
            bus=ids[k], p_set=float(rng.uniform(0.2, 0.8)),
            v_set=float(rng.uniform(1.0, 1.04)),
            p_min=0.0, p_max=3.0, q_min=-2.0, q_max=2.0))

    n_load = int(rng.integers(1, n))
    load_pos = rng.choice(n, size=n_load, replace=False)
    loads = tuple(Load(bus=ids[int(k)],
                       p=float(rng.uniform(0.05, 0.5)),
                       q=float(rng.uniform(0.0, 0.2)))
                  for k in load_pos)

    return GridCase(base_mva=100.0, buses=buses, lines=tuple(lines),
                    generators=tuple(gens), loads=loads,
                    slack=SlackRef(bus=ids[slack_pos], v_set=slack_v,
                                   angle=0.0))


def permuted_case(case: GridCase,
                  rng: np.random.Generator) -> tuple[GridCase, np.ndarray]:
    """Same network, rewritten in a shuffled declaration order.

    Returns (permuted case, perm) where perm[i] is the new row of the bus
    that sat at row i in the original case.
    """
    n = len(case.buses)
    order = rng.permutation(n)            # order[k] = old row at new slot k
    perm = np.empty(n, dtype=int)
    for new_row, old_row in enumerate(order):
        perm[old_row] = new_row
    buses = tuple(case.buses[k] for k in order)
    lines = tuple(case.lines[k] for k in rng.permutation(len(case.lines)))
    gens = tuple(case.generators[k]
                 for k in rng.permutation(len(case.generators)))
    loads = tuple(case.loads[k] for k in rng.permutation(len(case.loads)))
    return GridCase(base_mva=case.base_mva, buses=buses, lines=lines,
                    generators=gens, loads=loads, slack=case.slack), perm
