"""File-backed hardware-in-the-loop emulation.

A *server* owns a private copy of the grid whose line parameters may be
perturbed once at startup (the collector never sees them). It polls a shared
store for load-setpoint commands, solves each resulting case, corrupts the
settled state with configurable measurement noise, and appends one
measurement per command. A *collector* mirrors the synthetic dataset
generator: it derives the same mutated cases from the same per-index seeds,
submits them as commands, and assembles (case, measured solution) samples.

The store is two append-only JSON-lines files plus a cursor file. The server
may be killed and restarted at any point: measurements already on disk are
never re-emitted (dedup by command id) and commands are never lost (the
cursor only advances after their measurements are durable).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import GenerationResult, MutationConfig, Sample, \
    mutated_case_for_index, sample_seed
from .grid import GridCase, Line, Load
from .powerflow import PfSolution, PowerFlowError, solve_pf


class HilError(RuntimeError):
    """Emulation-layer failure (bad command, unsettled measurement)."""


class HilTimeoutError(HilError):
    """The collector stopped seeing progress before all ids settled."""


# ---------------------------------------------------------------------------
# Rows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CommandRow:
    """Full load-setpoint assignment, per-unit, replacing the case's loads."""

    id: int
    loads: tuple[tuple[int, float, float], ...]  # (bus, p, q)

    def to_dict(self) -> dict:
        return {"id": self.id,
                "loads": [[b, p, q] for b, p, q in self.loads]}

    @staticmethod
    def from_dict(data: dict) -> "CommandRow":
        return CommandRow(
            id=int(data["id"]),
            loads=tuple((int(b), float(p), float(q))
                        for b, p, q in data["loads"]))


@dataclass(frozen=True)
class MeasurementRow:
    """Settled (possibly noisy) state for one command, or a failure marker."""

    id: int
    status: str                       # "ok" | "failed"
    v_mag: tuple[float, ...] | None
    v_ang: tuple[float, ...] | None
    slack_p: float | None
    slack_q: float | None
    iterations: int = 0
    max_mismatch: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return {
            "id": self.id, "status": self.status,
            "v_mag": None if self.v_mag is None else list(self.v_mag),
            "v_ang": None if self.v_ang is None else list(self.v_ang),
            "slack_p": self.slack_p, "slack_q": self.slack_q,
            "iterations": self.iterations,
            "max_mismatch": self.max_mismatch,
        }

    @staticmethod
    def from_dict(data: dict) -> "MeasurementRow":
        def tup(key):
            return None if data[key] is None else tuple(
                float(x) for x in data[key])

        return MeasurementRow(
            id=int(data["id"]), status=str(data["status"]),
            v_mag=tup("v_mag"), v_ang=tup("v_ang"),
            slack_p=None if data["slack_p"] is None else float(data["slack_p"]),
            slack_q=None if data["slack_q"] is None else float(data["slack_q"]),
            iterations=int(data.get("iterations", 0)),
            max_mismatch=float(data.get("max_mismatch", 0.0)),
        )


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------


class FileStore:
    """Append-only command/measurement logs under one directory.

    Single-writer per file by convention: collectors append commands,
    servers append measurements and own the cursor.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.commands_path = self.root / "commands.jsonl"
        self.measurements_path = self.root / "measurements.jsonl"
        self.cursor_path = self.root / "cursor.json"
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def _append(path: Path, obj: dict) -> None:
        line = json.dumps(obj, sort_keys=True, separators=(",", ":"))
        with open(path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    @staticmethod
    def _read_lines(path: Path, offset: int = 0) -> tuple[list[dict], int]:
        """Parse complete lines from ``offset``; a trailing partial line
        (a writer mid-append) is left for the next read."""
        if not path.exists():
            return [], offset
        with open(path, "rb") as fh:
            fh.seek(offset)
            blob = fh.read()
        rows = []
        consumed = 0
        for line in blob.split(b"\n")[:-1]:
            consumed += len(line) + 1
            if line.strip():
                rows.append(json.loads(line.decode("utf-8")))
        return rows, offset + consumed

    def append_command(self, row: CommandRow) -> None:
        self._append(self.commands_path, row.to_dict())

    def append_measurement(self, row: MeasurementRow) -> None:
        self._append(self.measurements_path, row.to_dict())

    def read_commands(self, offset: int = 0) -> tuple[list[CommandRow], int]:
        rows, new_offset = self._read_lines(self.commands_path, offset)
        return [CommandRow.from_dict(r) for r in rows], new_offset

    def read_measurements(self) -> list[MeasurementRow]:
        rows, _ = self._read_lines(self.measurements_path)
        return [MeasurementRow.from_dict(r) for r in rows]

    def measured_ids(self) -> set[int]:
        return {row.id for row in self.read_measurements()}

    def next_command_id(self) -> int:
        rows, _ = self.read_commands()
        return max((r.id for r in rows), default=-1) + 1

    def read_cursor(self) -> int:
        if not self.cursor_path.exists():
            return 0
        return int(json.loads(self.cursor_path.read_text())["offset"])

    def write_cursor(self, offset: int) -> None:
        tmp = self.cursor_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps({"offset": int(offset)}))
        os.replace(tmp, self.cursor_path)


# ---------------------------------------------------------------------------
# Server-side physics: parameter drift and measurement noise
# ---------------------------------------------------------------------------


def perturb_lines(case: GridCase, pct: float, seed: int) -> GridCase:
    """Scale every line's r and x by independent U[1-pct, 1+pct] factors.

    Models the emulated hardware differing from the nominal model. Applied
    once per server lifetime.
    """
    if pct == 0.0:
        return case
    if not 0.0 <= pct < 1.0:
        raise ValueError("perturbation fraction must lie in [0, 1)")
    rng = np.random.default_rng([int(seed), 0x70657274])
    lines = []
    for ln in case.lines:
        fr = rng.uniform(1.0 - pct, 1.0 + pct)
        fx = rng.uniform(1.0 - pct, 1.0 + pct)
        lines.append(Line(from_bus=ln.from_bus, to_bus=ln.to_bus,
                          r=ln.r * fr, x=ln.x * fx, b_shunt=ln.b_shunt,
                          s_max=ln.s_max, tap=ln.tap))
    return replace(case, lines=tuple(lines))


@dataclass(frozen=True)
class NoiseConfig:
    """Measurement corruption. All zeros (the default) is bit-exact passthrough.

    sigma_v: relative gaussian noise on voltage magnitudes.
    sigma_theta: additive gaussian noise on bus angles, radians.
    sigma_s: relative gaussian noise on slack P and Q.
    bias_v: optional fixed per-bus additive offset on magnitudes
        (models un-calibrated sensors).
    """

    sigma_v: float = 0.0
    sigma_theta: float = 0.0
    sigma_s: float = 0.0
    bias_v: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_v, self.sigma_theta, self.sigma_s) < 0:
            raise ValueError("noise levels must be non-negative")
        if self.bias_v is not None:
            object.__setattr__(self, "bias_v",
                               tuple(float(b) for b in self.bias_v))

    @property
    def silent(self) -> bool:
        return (self.sigma_v == 0.0 and self.sigma_theta == 0.0
                and self.sigma_s == 0.0 and self.bias_v is None)


def apply_noise(sol: PfSolution, noise: NoiseConfig, cmd_id: int) -> PfSolution:
    """Deterministic per-command corruption: the stream is seeded by
    (noise seed, command id), so replays reproduce measurements exactly."""
    if noise.silent:
        return sol
    rng = np.random.default_rng([int(noise.seed), int(cmd_id)])
    v_mag = np.asarray(sol.v_mag, dtype=np.float64)
    v_ang = np.asarray(sol.v_ang, dtype=np.float64)
    n = v_mag.shape[0]
    eps_v = rng.standard_normal(n)
    eps_th = rng.standard_normal(n)
    eps_s = rng.standard_normal(2)
    v = v_mag * (1.0 + noise.sigma_v * eps_v)
    if noise.bias_v is not None:
        if len(noise.bias_v) != n:
            raise HilError(f"bias_v has {len(noise.bias_v)} entries "
                           f"for {n} buses")
        v = v + np.asarray(noise.bias_v)
    ang = v_ang + noise.sigma_theta * eps_th
    return replace(
        sol,
        v_mag=tuple(float(x) for x in v),
        v_ang=tuple(float(x) for x in ang),
        slack_p=sol.slack_p * (1.0 + noise.sigma_s * eps_s[0]),
        slack_q=sol.slack_q * (1.0 + noise.sigma_s * eps_s[1]),
        gen_q=None,
    )


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------


class HilServer:
    """Polling measurement service over a :class:`FileStore`.

    State that survives restarts lives entirely in the store; a new instance
    resumes from the persisted cursor and the measurement log.
    """

    def __init__(self, store: FileStore, base_case: GridCase,
                 noise: NoiseConfig | None = None,
                 perturb_pct: float = 0.0, perturb_seed: int = 0,
                 tol: float = 1e-8, max_iter: int = 20):
        self._store = store
        self._noise = noise if noise is not None else NoiseConfig()
        self._case = perturb_lines(base_case, perturb_pct, perturb_seed)
        self._tol = tol
        self._max_iter = max_iter
        self._measured = store.measured_ids()

    def _measure(self, cmd: CommandRow) -> MeasurementRow:
        known = {b.id for b in self._case.buses}
        bad = [b for b, _, _ in cmd.loads if b not in known]
        if bad:
            return MeasurementRow(id=cmd.id, status="failed", v_mag=None,
                                  v_ang=None, slack_p=None, slack_q=None)
        loads = [Load(bus=b, p=p, q=q) for b, p, q in cmd.loads]
        case = self._case.with_loads(loads)
        try:
            sol = solve_pf(case, tol=self._tol, max_iter=self._max_iter)
        except PowerFlowError:
            return MeasurementRow(id=cmd.id, status="failed", v_mag=None,
                                  v_ang=None, slack_p=None, slack_q=None)
        sol = apply_noise(sol, self._noise, cmd.id)
        return MeasurementRow(
            id=cmd.id, status="ok",
            v_mag=tuple(float(v) for v in sol.v_mag),
            v_ang=tuple(float(a) for a in sol.v_ang),
            slack_p=float(sol.slack_p), slack_q=float(sol.slack_q),
            iterations=sol.iterations,
            max_mismatch=float(sol.max_mismatch),
        )

    def process_pending(self) -> int:
        """Handle every command past the cursor once; returns how many
        measurements were appended."""
        offset = self._store.read_cursor()
        commands, new_offset = self._store.read_commands(offset)
        emitted = 0
        for cmd in commands:
            # Restart window: measurement durable but cursor stale.
            if cmd.id in self._measured:
                continue
            self._store.append_measurement(self._measure(cmd))
            self._measured.add(cmd.id)
            emitted += 1
        if new_offset != offset:
            self._store.write_cursor(new_offset)
        return emitted

    def run(self, poll_s: float = 0.01, stop_after: int | None = None,
            idle_exit_s: float | None = None) -> int:
        """Poll until ``stop_after`` measurements are emitted (or forever).

        ``idle_exit_s`` stops a server that has seen no work for that long.
        """
        emitted = 0
        last_progress = time.monotonic()
        while True:
            n = self.process_pending()
            emitted += n
            now = time.monotonic()
            if n:
                last_progress = now
            if stop_after is not None and emitted >= stop_after:
                return emitted
            if idle_exit_s is not None and now - last_progress >= idle_exit_s:
                return emitted
            time.sleep(poll_s)


# ---------------------------------------------------------------------------
# Collector
# ---------------------------------------------------------------------------


def command_for_case(cmd_id: int, case: GridCase) -> CommandRow:
    return CommandRow(id=cmd_id, loads=tuple(
        (ld.bus, ld.p, ld.q) for ld in case.loads))


def measurement_to_sample(case: GridCase, row: MeasurementRow,
                          seed: int) -> Sample:
    if not row.ok:
        raise HilError(f"command {row.id} did not settle")
    sol = PfSolution(
        v_mag=tuple(float(x) for x in row.v_mag),
        v_ang=tuple(float(x) for x in row.v_ang),
        slack_p=float(row.slack_p), slack_q=float(row.slack_q),
        gen_q=None, iterations=row.iterations,
        max_mismatch=float(row.max_mismatch), mismatch_history=(),
    )
    return Sample(case=case, solution=sol, source="hil", seed=seed)


def collect(store: FileStore, base: GridCase, n: int,
            config: MutationConfig, timeout_s: float = 60.0,
            poll_s: float = 0.005) -> GenerationResult:
    """Pipeline ``n`` mutated-case commands and await their measurements.

    Mutations reuse the synthetic generator's per-index seed derivation, so
    with a noiseless, unperturbed server the collected samples match
    synthetic generation on the same config. Failed measurements are redrawn
    under the same give-up rule; ``timeout_s`` bounds the wait since the
    last observed progress.
    """
    if n < 0:
        raise ValueError("sample count must be non-negative")
    next_id = store.next_command_id()
    pending: dict[int, tuple[int, int]] = {}   # cmd id -> (index, attempt)
    cases: dict[int, GridCase] = {}
    results: dict[int, Sample] = {}            # index -> sample
    redraws = 0
    draws = 0

    def submit(index: int, attempt: int) -> None:
        nonlocal next_id, draws
        case = mutated_case_for_index(base, config, index, attempt)
        cmd = command_for_case(next_id, case)
        store.append_command(cmd)
        pending[cmd.id] = (index, attempt)
        cases[cmd.id] = case
        next_id += 1
        draws += 1

    for index in range(n):
        submit(index, 0)

    consumed: set[int] = set()
    last_progress = time.monotonic()
    while pending:
        progressed = False
        for row in store.read_measurements():
            if row.id not in pending or row.id in consumed:
                continue
            consumed.add(row.id)
            index, attempt = pending.pop(row.id)
            progressed = True
            if row.ok:
                seed = sample_seed(config.rng_seed, index, attempt)
                results[index] = measurement_to_sample(
                    cases.pop(row.id), row, seed)
            else:
                cases.pop(row.id)
                redraws += 1
                if redraws > max(draws // 2, 8):
                    raise HilError(
                        f"{redraws} of {draws} commands failed to settle")
                submit(index, attempt + 1)
        now = time.monotonic()
        if progressed:
            last_progress = now
        elif now - last_progress > timeout_s:
            missing = sorted(pending)
            raise HilTimeoutError(
                f"no measurements for {timeout_s:g}s; "
                f"{len(missing)} commands outstanding (ids {missing[:5]}...)")
        if pending:
            time.sleep(poll_s)

    samples = tuple(results[i] for i in range(n))
    return GenerationResult(samples=samples, redraws=redraws)
