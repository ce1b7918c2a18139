"""Per-unit electrical network data model and case-file I/O.

A :class:`GridCase` bundles buses, lines (transformers are lines with an
off-nominal tap), generators, loads and the slack reference. All values held
on a case are in per-unit on ``base_mva``; physical units (MW / MVAr / MVA)
appear only in case files and are converted on load/save.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable


class CaseError(ValueError):
    """Malformed case file (bad JSON, missing keys, wrong value types)."""


class CaseValidationError(CaseError):
    """Structurally parseable case that violates a model invariant."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid grid case:\n  " + "\n  ".join(violations))


@dataclass(frozen=True)
class Bus:
    """A network node.

    Attributes:
        id: Integer bus identifier (unique within a case, any numbering).
        v_min: Lower voltage-magnitude bound [p.u.], used as a soft limit.
        v_max: Upper voltage-magnitude bound [p.u.].
        base_kv: Nominal voltage level [kV], used for impedance conversion.
    """

    id: int
    v_min: float
    v_max: float
    base_kv: float


@dataclass(frozen=True)
class Line:
    """A series branch in the pi model.

    Transformers are represented as lines with ``tap != 1``; the tap ratio
    applies on the ``from_bus`` side.

    Attributes:
        from_bus: Sending-end bus id.
        to_bus: Receiving-end bus id.
        r: Series resistance [p.u.].
        x: Series reactance [p.u.]; must be nonzero.
        b_shunt: Total line-charging susceptance [p.u.], split half per end.
        s_max: Apparent-power limit [p.u.], used as a soft limit.
        tap: Off-nominal tap ratio (1.0 for plain lines).
    """

    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float
    s_max: float
    tap: float = 1.0


@dataclass(frozen=True)
class Generator:
    """A dispatchable machine with capability limits.

    A generator at the slack bus does not fix P; its setpoint is ignored by
    the power flow and its capability limits bound the slack injection.

    Attributes:
        bus: Connection bus id.
        p_set: Active-power setpoint [p.u.].
        v_set: Voltage-magnitude setpoint [p.u.] (PV bus target).
        p_min / p_max: Active capability range [p.u.].
        q_min / q_max: Reactive capability range [p.u.].
    """

    bus: int
    p_set: float
    v_set: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float


@dataclass(frozen=True)
class Load:
    """A constant-power load. ``p``/``q`` are consumption in p.u."""

    bus: int
    p: float
    q: float


@dataclass(frozen=True)
class SlackRef:
    """The slack (reference) bus: fixed voltage magnitude and angle [rad]."""

    bus: int
    v_set: float
    angle: float = 0.0


@dataclass(frozen=True)
class GridCase:
    """An immutable per-unit network. Safe to share across threads.

    Attributes:
        base_mva: System power base [MVA]; all per-unit conversions use it.
        buses / lines / generators / loads: Component tuples (case order is
            preserved and meaningful for node indexing downstream).
        slack: The single slack reference.
    """

    base_mva: float
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    slack: SlackRef

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self) -> dict[int, int]:
        """Map bus id -> position in ``buses`` (row index for matrices)."""
        return {b.id: i for i, b in enumerate(self.buses)}

    def with_loads(self, loads: Iterable[Load]) -> "GridCase":
        """Copy of this case with the load list replaced."""
        return replace(self, loads=tuple(loads))


# ---------------------------------------------------------------------------
# Per-unit conversion
# ---------------------------------------------------------------------------


def _check_base(base_mva: float, base_kv: float | None = None) -> None:
    if not (base_mva > 0):
        raise ValueError(f"base_mva must be positive, got {base_mva}")
    if base_kv is not None and not (base_kv > 0):
        raise ValueError(f"base_kv must be positive, got {base_kv}")


def power_to_pu(s_mva: float, base_mva: float) -> float:
    """Convert a power from MVA (or MW/MVAr) to per-unit."""
    _check_base(base_mva)
    return s_mva / base_mva


def power_from_pu(s_pu: float, base_mva: float) -> float:
    """Convert a per-unit power back to MVA (or MW/MVAr)."""
    _check_base(base_mva)
    return s_pu * base_mva


def impedance_to_pu(z_ohm: float, base_mva: float, base_kv: float) -> float:
    """Convert an impedance from ohms to per-unit: Z_pu = Z * S_base / V_base^2."""
    _check_base(base_mva, base_kv)
    return z_ohm * base_mva / (base_kv * base_kv)


def impedance_from_pu(z_pu: float, base_mva: float, base_kv: float) -> float:
    """Convert a per-unit impedance back to ohms."""
    _check_base(base_mva, base_kv)
    return z_pu * (base_kv * base_kv) / base_mva


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate(case: GridCase) -> list[str]:
    """Check all model invariants. Returns a list of violations (empty = ok)."""
    v: list[str] = []
    if not (case.base_mva > 0):
        v.append(f"base_mva must be positive, got {case.base_mva}")

    ids = [b.id for b in case.buses]
    known = set(ids)
    if len(known) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        v.append(f"duplicate bus ids: {dupes}")
    if not case.buses:
        v.append("case has no buses")

    for b in case.buses:
        if not (0 < b.v_min <= b.v_max):
            v.append(f"bus {b.id}: voltage band must satisfy 0 < v_min <= v_max "
                     f"(got [{b.v_min}, {b.v_max}])")
        if not (b.base_kv > 0):
            v.append(f"bus {b.id}: base_kv must be positive, got {b.base_kv}")

    for i, ln in enumerate(case.lines):
        for end, bus in (("from", ln.from_bus), ("to", ln.to_bus)):
            if bus not in known:
                v.append(f"line {i} ({ln.from_bus}-{ln.to_bus}): {end}_bus {bus} "
                         "does not exist")
        if ln.x == 0:
            v.append(f"line {i} ({ln.from_bus}-{ln.to_bus}): series reactance x "
                     "must be nonzero")
        if not (ln.s_max > 0):
            v.append(f"line {i} ({ln.from_bus}-{ln.to_bus}): s_max must be "
                     f"positive, got {ln.s_max}")
        if not (ln.tap > 0):
            v.append(f"line {i} ({ln.from_bus}-{ln.to_bus}): tap must be "
                     f"positive, got {ln.tap}")
        if not all(math.isfinite(x) for x in (ln.r, ln.x, ln.b_shunt, ln.s_max, ln.tap)):
            v.append(f"line {i} ({ln.from_bus}-{ln.to_bus}): non-finite parameter")

    vset_at: dict[int, float] = {}
    for i, g in enumerate(case.generators):
        if g.bus not in known:
            v.append(f"generator {i}: bus {g.bus} does not exist")
        if g.p_min > g.p_max:
            v.append(f"generator {i} (bus {g.bus}): p_min > p_max")
        if g.q_min > g.q_max:
            v.append(f"generator {i} (bus {g.bus}): q_min > q_max")
        if not all(math.isfinite(x) for x in
                   (g.p_set, g.v_set, g.p_min, g.p_max, g.q_min, g.q_max)):
            v.append(f"generator {i} (bus {g.bus}): non-finite parameter")
        if g.bus in vset_at and vset_at[g.bus] != g.v_set:
            v.append(f"generator {i} (bus {g.bus}): conflicting v_set with another "
                     "generator on the same bus")
        vset_at.setdefault(g.bus, g.v_set)

    for i, ld in enumerate(case.loads):
        if ld.bus not in known:
            v.append(f"load {i}: bus {ld.bus} does not exist")
        if not (math.isfinite(ld.p) and math.isfinite(ld.q)):
            v.append(f"load {i} (bus {ld.bus}): non-finite power")

    if case.slack.bus not in known:
        v.append(f"slack bus {case.slack.bus} does not exist")
    if not (case.slack.v_set > 0):
        v.append(f"slack v_set must be positive, got {case.slack.v_set}")
    if case.slack.bus in vset_at and vset_at[case.slack.bus] != case.slack.v_set:
        v.append(f"generator at slack bus {case.slack.bus} has v_set "
                 f"{vset_at[case.slack.bus]} != slack v_set {case.slack.v_set}")
    return v


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

# Fields stored in physical units (MW/MVAr/MVA) in case files.
_POWER_FIELDS = {
    "generators": ("p_set", "p_min", "p_max", "q_min", "q_max"),
    "loads": ("p", "q"),
    "lines": ("s_max",),
}


def case_to_dict(case: GridCase, per_unit: bool = False) -> dict[str, Any]:
    """Serialize a case to a JSON-ready dict.

    With ``per_unit=False`` (the case-file convention) power-valued fields are
    written in MW/MVAr/MVA. With ``per_unit=True`` everything stays in p.u.
    and a ``units`` marker is added; this is the lossless form embedded in
    dataset files.
    """
    scale = 1.0 if per_unit else case.base_mva
    d: dict[str, Any] = {"base_mva": case.base_mva}
    if per_unit:
        d["units"] = "per_unit"
    d["buses"] = [vars(b).copy() for b in case.buses]
    d["lines"] = [vars(ln).copy() for ln in case.lines]
    d["generators"] = [vars(g).copy() for g in case.generators]
    d["loads"] = [vars(ld).copy() for ld in case.loads]
    d["slack"] = vars(case.slack).copy()
    if scale != 1.0:
        for section, fields in _POWER_FIELDS.items():
            for row in d[section]:
                for f in fields:
                    row[f] = row[f] * scale
    return d


def _component(cls: type, row: dict[str, Any], what: str) -> Any:
    try:
        return cls(**row)
    except TypeError as e:
        raise CaseError(f"bad {what} entry {row!r}: {e}") from None


def case_from_dict(d: dict[str, Any]) -> GridCase:
    """Build and validate a GridCase from a parsed case dict."""
    try:
        base_mva = float(d["base_mva"])
    except (KeyError, TypeError, ValueError):
        raise CaseError("case must carry a numeric 'base_mva'") from None

    per_unit = d.get("units") == "per_unit"
    scale = 1.0 if per_unit or base_mva == 0 else 1.0 / base_mva

    def rows(key: str) -> list[dict[str, Any]]:
        got = d.get(key, [])
        if not isinstance(got, list):
            raise CaseError(f"'{key}' must be a list")
        return [dict(r) for r in got]

    sections: dict[str, list[dict[str, Any]]] = {
        k: rows(k) for k in ("buses", "lines", "generators", "loads")
    }
    if scale != 1.0:
        for section, fields in _POWER_FIELDS.items():
            for row in sections[section]:
                for f in fields:
                    if f in row:
                        row[f] = row[f] * scale

    slack_raw = d.get("slack")
    if isinstance(slack_raw, list):
        if len(slack_raw) != 1:
            raise CaseValidationError(
                [f"exactly one slack reference required, got {len(slack_raw)}"])
        slack_raw = slack_raw[0]
    if not isinstance(slack_raw, dict):
        raise CaseError("case must carry a 'slack' object")

    case = GridCase(
        base_mva=base_mva,
        buses=tuple(_component(Bus, r, "bus") for r in sections["buses"]),
        lines=tuple(_component(Line, r, "line") for r in sections["lines"]),
        generators=tuple(_component(Generator, r, "generator")
                         for r in sections["generators"]),
        loads=tuple(_component(Load, r, "load") for r in sections["loads"]),
        slack=_component(SlackRef, slack_raw, "slack"),
    )
    violations = validate(case)
    if violations:
        raise CaseValidationError(violations)
    return case


def load_case(path: str | Path) -> GridCase:
    """Load and validate a case file (powers in MW/MVAr, converted to p.u.)."""
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise CaseError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(d, dict):
        raise CaseError(f"{path}: top level must be a JSON object")
    return case_from_dict(d)


def save_case(case: GridCase, path: str | Path) -> None:
    """Write a case file in the physical-unit convention of :func:`load_case`."""
    Path(path).write_text(json.dumps(case_to_dict(case), indent=2, sort_keys=True) + "\n")


def bundled_case_path(name: str = "wscc9") -> Path:
    """Path of a case file shipped with the package."""
    with resources.as_file(resources.files("gridhil.data") / f"{name}.json") as p:
        return Path(p)


def load_bundled_case(name: str = "wscc9") -> GridCase:
    """Load a case shipped with the package (default: the 9-bus test system)."""
    return load_case(bundled_case_path(name))


def cases_equal(a: GridCase, b: GridCase, rtol: float = 0.0) -> bool:
    """Structural equality, with optional relative tolerance on floats.

    ``rtol=0`` demands exact equality. A small tolerance (1e-12) absorbs the
    one-ulp wobble of the MW<->p.u. conversion at the file boundary.
    """
    if rtol == 0.0:
        return a == b

    def close(x: Any, y: Any) -> bool:
        if isinstance(x, float) or isinstance(y, float):
            return math.isclose(x, y, rel_tol=rtol, abs_tol=rtol)
        return x == y

    def rows_equal(xs: tuple, ys: tuple) -> bool:
        return len(xs) == len(ys) and all(
            all(close(vx, vy) for vx, vy in zip(vars(x).values(), vars(y).values()))
            for x, y in zip(xs, ys))

    return (close(a.base_mva, b.base_mva)
            and rows_equal(a.buses, b.buses)
            and rows_equal(a.lines, b.lines)
            and rows_equal(a.generators, b.generators)
            and rows_equal(a.loads, b.loads)
            and rows_equal((a.slack,), (b.slack,)))
