"""Admittance matrix construction and Newton-Raphson AC power flow.

Solves the steady state of a :class:`~gridhil.grid.GridCase`: voltage
magnitude and angle at every bus plus the balancing injection at the slack.
Dense linear algebra throughout; at the network sizes this package targets,
sparsity machinery would cost more than it saves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridCase


class PowerFlowError(RuntimeError):
    """Power flow failed: divergence or a singular Jacobian."""


@dataclass(frozen=True)
class Ybus:
    """Dense complex nodal admittance matrix with the owning bus order."""

    n: int
    matrix: np.ndarray  # (n, n) complex128


@dataclass(frozen=True)
class PfSolution:
    """A converged power-flow state (the ground truth for learning).

    ``v_ang`` is in radians. ``gen_q`` holds the reactive output of each
    non-slack generator in case order; it is ``None`` for states that were
    measured rather than solved (hardware-loop samples). ``mismatch_history``
    records the max mismatch before each Newton iteration.
    """

    v_mag: tuple[float, ...]
    v_ang: tuple[float, ...]
    slack_p: float
    slack_q: float
    gen_q: tuple[float, ...] | None
    iterations: int
    max_mismatch: float
    mismatch_history: tuple[float, ...] = field(default=(), repr=False)


def build_ybus(case: GridCase) -> Ybus:
    """Stamp the pi-model admittance matrix.

    Series admittance y = 1/(r + jx), charging split b_shunt/2 per end, tap
    ratio on the from side: Yff = (y + jb/2)/tap^2, Yft = Ytf = -y/tap,
    Ytt = y + jb/2.
    """
    idx = case.bus_index()
    n = case.n_bus
    y = np.zeros((n, n), dtype=complex)
    for ln in case.lines:
        f, t = idx[ln.from_bus], idx[ln.to_bus]
        ys = 1.0 / complex(ln.r, ln.x)
        ysh = 0.5j * ln.b_shunt
        a = ln.tap
        y[f, f] += (ys + ysh) / (a * a)
        y[t, t] += ys + ysh
        y[f, t] += -ys / a
        y[t, f] += -ys / a
    return Ybus(n=n, matrix=y)


def power_injections(case: GridCase, v_mag: np.ndarray, v_ang: np.ndarray,
                     ybus: Ybus | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Bus injections (P, Q) implied by a voltage profile.

    P_i = V_i sum_j V_j (G_ij cos th_ij + B_ij sin th_ij) and the analogous
    Q expression, evaluated in vectorized complex form S = V (Y V)*.
    """
    y = (ybus or build_ybus(case)).matrix
    v = np.asarray(v_mag, dtype=float) * np.exp(1j * np.asarray(v_ang, dtype=float))
    s = v * np.conj(y @ v)
    return s.real, s.imag


def _specified_injections(case: GridCase) -> tuple[np.ndarray, np.ndarray]:
    """Net scheduled (P, Q) per bus: generation minus load, p.u."""
    idx = case.bus_index()
    p = np.zeros(case.n_bus)
    q = np.zeros(case.n_bus)
    for g in case.generators:
        p[idx[g.bus]] += g.p_set
    for ld in case.loads:
        p[idx[ld.bus]] -= ld.p
        q[idx[ld.bus]] -= ld.q
    return p, q


def bus_types(case: GridCase) -> tuple[int, list[int], list[int]]:
    """(slack index, PV indices, PQ indices) under the case bus order."""
    idx = case.bus_index()
    slack = idx[case.slack.bus]
    gen_buses = {idx[g.bus] for g in case.generators}
    pv = sorted(b for b in gen_buses if b != slack)
    pq = sorted(set(range(case.n_bus)) - set(pv) - {slack})
    return slack, pv, pq


def _jacobian(y: np.ndarray, v: np.ndarray, th: np.ndarray,
              p_calc: np.ndarray, q_calc: np.ndarray,
              ang_order: list[int], mag_order: list[int]) -> np.ndarray:
    """Polar-form Jacobian [[dP/dth, dP/dV], [dQ/dth, dQ/dV]]."""
    g, b = y.real, y.imag
    dth = th[:, None] - th[None, :]
    cs, sn = np.cos(dth), np.sin(dth)
    vv = v[:, None] * v[None, :]

    h = vv * (g * sn - b * cs)            # dP_i/dth_j, off-diagonal
    np.fill_diagonal(h, -q_calc - b.diagonal() * v * v)
    n_ = v[:, None] * (g * cs + b * sn)   # dP_i/dV_j
    np.fill_diagonal(n_, p_calc / v + g.diagonal() * v)
    j_ = -vv * (g * cs + b * sn)          # dQ_i/dth_j
    np.fill_diagonal(j_, p_calc - g.diagonal() * v * v)
    l_ = v[:, None] * (g * sn - b * cs)   # dQ_i/dV_j
    np.fill_diagonal(l_, q_calc / v - b.diagonal() * v)

    return np.block([
        [h[np.ix_(ang_order, ang_order)], n_[np.ix_(ang_order, mag_order)]],
        [j_[np.ix_(mag_order, ang_order)], l_[np.ix_(mag_order, mag_order)]],
    ])


def solve_pf(case: GridCase, tol: float = 1e-8, max_iter: int = 20,
             enforce_q_limits: bool = False) -> PfSolution:
    """Newton-Raphson power flow from a flat start.

    PV buses hold their voltage setpoint. Generator reactive limits are not
    enforced unless ``enforce_q_limits`` is set, in which case violating PV
    buses are switched to PQ at their binding limit and the solve restarts.

    Raises:
        PowerFlowError: no convergence within ``max_iter`` iterations, or a
            singular Jacobian (e.g. an isolated bus).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    ybus = build_ybus(case)
    idx = case.bus_index()
    p_spec, q_spec = _specified_injections(case)
    slack, pv, pq = bus_types(case)

    vset = {idx[g.bus]: g.v_set for g in case.generators}
    q_fixed: dict[int, float] = {}  # PV buses pinned at a reactive limit

    while True:
        sol = _newton(case, ybus, p_spec, q_spec, slack, pv, pq, vset,
                      q_fixed, tol, max_iter)
        if not enforce_q_limits:
            return sol
        switched = _q_limit_violations(case, idx, sol, slack, pv)
        if not switched:
            return sol
        for b, qlim in switched.items():
            pv.remove(b)
            pq.append(b)
            q_fixed[b] = qlim
        pq.sort()


def _q_limit_violations(case: GridCase, idx: dict[int, int], sol: PfSolution,
                        slack: int, pv: list[int]) -> dict[int, float]:
    """PV buses whose generator reactive output left its capability range."""
    out: dict[int, float] = {}
    gen_q = dict(zip((idx[g.bus] for g in case.generators if idx[g.bus] != slack),
                     sol.gen_q or ()))
    for g in case.generators:
        b = idx[g.bus]
        if b not in pv:
            continue
        q = gen_q[b]
        if q > g.q_max:
            out[b] = g.q_max
        elif q < g.q_min:
            out[b] = g.q_min
    return out


def _newton(case: GridCase, ybus: Ybus, p_spec: np.ndarray, q_spec: np.ndarray,
            slack: int, pv: list[int], pq: list[int], vset: dict[int, float],
            q_fixed: dict[int, float], tol: float, max_iter: int) -> PfSolution:
    n = case.n_bus
    y = ybus.matrix
    # Flat start: setpoints at slack/PV, 1.0 elsewhere; slack angle everywhere.
    v = np.ones(n)
    th = np.full(n, case.slack.angle)
    v[slack] = case.slack.v_set
    for b in pv:
        v[b] = vset[b]

    qs = q_spec.copy()
    for b, qlim in q_fixed.items():
        # Q-limited generator: fixed reactive output added to the schedule.
        qs[b] += qlim

    ang_order = [i for i in range(n) if i != slack]
    mag_order = list(pq)
    history: list[float] = []

    iterations = 0
    for it in range(max_iter + 1):
        p_calc, q_calc = power_injections(case, v, th, ybus)
        dp = p_spec[ang_order] - p_calc[ang_order]
        dq = qs[mag_order] - q_calc[mag_order]
        mism = np.concatenate([dp, dq])
        max_mism = float(np.max(np.abs(mism))) if mism.size else 0.0
        history.append(max_mism)
        if max_mism < tol:
            iterations = it
            break
        if it == max_iter:
            raise PowerFlowError(
                f"no convergence after {max_iter} iterations "
                f"(last max mismatch {max_mism:.3e} p.u.)")
        jac = _jacobian(y, v, th, p_calc, q_calc, ang_order, mag_order)
        try:
            step = np.linalg.solve(jac, mism)
        except np.linalg.LinAlgError:
            raise PowerFlowError("singular Jacobian (isolated bus or "
                                 "degenerate network)") from None
        th[ang_order] += step[:len(ang_order)]
        v[mag_order] += step[len(ang_order):]

    p_calc, q_calc = power_injections(case, v, th, ybus)
    idx = case.bus_index()
    load_p = np.zeros(n)
    load_q = np.zeros(n)
    for ld in case.loads:
        load_p[idx[ld.bus]] += ld.p
        load_q[idx[ld.bus]] += ld.q

    gen_q = []
    for g in case.generators:
        b = idx[g.bus]
        if b == slack:
            continue
        if b in q_fixed:
            gen_q.append(q_fixed[b])
        else:
            gen_q.append(float(q_calc[b] + load_q[b]))

    return PfSolution(
        v_mag=tuple(float(x) for x in v),
        v_ang=tuple(float(x) for x in th),
        slack_p=float(p_calc[slack] + load_p[slack]),
        slack_q=float(q_calc[slack] + load_q[slack]),
        gen_q=tuple(gen_q),
        iterations=iterations,
        max_mismatch=history[-1],
        mismatch_history=tuple(history),
    )


def branch_flows(case: GridCase, v_mag: np.ndarray, v_ang: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Complex power entering each line at its from and to ends (p.u.)."""
    idx = case.bus_index()
    v = np.asarray(v_mag, dtype=float) * np.exp(1j * np.asarray(v_ang, dtype=float))
    s_from = np.zeros(len(case.lines), dtype=complex)
    s_to = np.zeros(len(case.lines), dtype=complex)
    for k, ln in enumerate(case.lines):
        f, t = idx[ln.from_bus], idx[ln.to_bus]
        ys = 1.0 / complex(ln.r, ln.x)
        ysh = 0.5j * ln.b_shunt
        a = ln.tap
        i_from = (ys + ysh) / (a * a) * v[f] - ys / a * v[t]
        i_to = -ys / a * v[f] + (ys + ysh) * v[t]
        s_from[k] = v[f] * np.conj(i_from)
        s_to[k] = v[t] * np.conj(i_to)
    return s_from, s_to


def total_losses(case: GridCase, sol: PfSolution) -> float:
    """Active-power series losses summed over all branches (p.u.)."""
    s_from, s_to = branch_flows(case, np.array(sol.v_mag), np.array(sol.v_ang))
    return float(np.sum(s_from.real + s_to.real))
